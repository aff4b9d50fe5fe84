//! Per-node heatmaps and top-3 label tables for one image.

use std::fs;
use std::path::{Path, PathBuf};

use s3e_autograd::ops::bilinear_resize;
use s3e_autograd::Tensor;

use crate::capparse::{is_entity_node, NUM_NODES};
use crate::captioner::Strategy;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::Model;

/// Evenly spaced viridis anchors, from 0 to 1.
pub const VIRIDIS: [[u8; 3]; 10] = [
    [0x44, 0x01, 0x54],
    [0x48, 0x28, 0x78],
    [0x3E, 0x4A, 0x89],
    [0x31, 0x68, 0x8E],
    [0x26, 0x82, 0x8E],
    [0x1F, 0x9E, 0x89],
    [0x35, 0xB7, 0x79],
    [0x6D, 0xCD, 0x59],
    [0xB4, 0xDE, 0x2C],
    [0xFD, 0xE7, 0x25],
];

/// Piecewise-linear lookup, `t` clamped to `[0, 1]`. Components in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.5 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|k| ((1.0 - f) * a[k] as f64 + f * b[k] as f64) / 255.0)
}

/// Min-max normalization; a constant map becomes all 0.5.
pub fn normalize(map: &Tensor) -> Tensor {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 1e-12 {
        return map.mapv(|_| 0.5);
    }
    map.mapv(|v| (v - lo) / span)
}

/// Channel mean of a `[c, h, w]` node map, normalized, resized to
/// `height × width` and colored.
pub fn render(map: &Tensor, height: usize, width: usize) -> Result<ImageTensor> {
    if map.ndim() != 3 {
        return Err(Error::Shape(format!(
            "node map must be [c, h, w], got {:?}",
            map.shape()
        )));
    }
    let mean = map.mean_axis(ndarray::Axis(0)).expect("non-empty channel axis");
    let norm = normalize(&mean);
    let (h, w) = (norm.shape()[0], norm.shape()[1]);
    let up = bilinear_resize(&norm.into_shape_with_order(vec![1, 1, h, w]).unwrap(), height, width);
    Ok(ImageTensor::from_fn(height, width, 3, |(y, x, c)| {
        colormap(up[[0, 0, y, x]])[c]
    }))
}

/// Three most probable `(label, probability)` pairs, descending; ties keep
/// the lower id first.
pub fn top3(probs: &[f64], words: &[String]) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(3)
        .map(|i| (words.get(i).cloned().unwrap_or_default(), probs[i]))
        .collect()
}

pub struct HeatmapExport {
    pub files: Vec<PathBuf>,
    pub labels: Vec<Vec<(String, f64)>>,
    pub caption: String,
}

/// Writes `node_1.png … node_7.png` and `labels.txt` into `out_dir`.
pub fn export_heatmaps(model: &Model, image: &ImageTensor, out_dir: &Path, seed: u64) -> Result<HeatmapExport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let inf = model
        .infer(&[image], Strategy::Greedy, seed)?
        .pop()
        .expect("one output per input");
    let mut files = Vec::with_capacity(NUM_NODES);
    let mut labels = Vec::with_capacity(NUM_NODES);
    let mut table = String::new();
    for j in 1..=NUM_NODES {
        let path = out_dir.join(format!("node_{j}.png"));
        render(&inf.node_maps[j - 1], image.height(), image.width())?.save_png(&path)?;
        files.push(path);
        let (kind, words) = if is_entity_node(j) {
            ("entity", model.vocabs.entities.words())
        } else {
            ("relation", model.vocabs.relations.words())
        };
        let top = top3(&inf.node_probs[j - 1], words);
        let cells: Vec<String> = top.iter().map(|(w, p)| format!("{w} {p:.4}")).collect();
        table.push_str(&format!("node_{j}\t{kind}\t{}\n", cells.join("\t")));
        labels.push(top);
    }
    table.push_str(&format!("caption\t{}\n", inf.caption));
    let path = out_dir.join("labels.txt");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(HeatmapExport {
        files,
        labels,
        caption: inf.caption,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::Vocabularies;

    #[test]
    fn colormap_hits_the_anchors() {
        assert_eq!(
            colormap(0.0),
            [0x44 as f64 / 255.0, 0x01 as f64 / 255.0, 0x54 as f64 / 255.0]
        );
        assert_eq!(
            colormap(1.0),
            [0xFD as f64 / 255.0, 0xE7 as f64 / 255.0, 0x25 as f64 / 255.0]
        );
        assert_eq!(colormap(2.0), colormap(1.0));
        let mid = colormap(4.0 / 9.0);
        assert!((mid[0] - 0x26 as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn constant_map_renders_mid_scale() {
        let img = render(&Tensor::zeros(vec![4, 2, 2]), 8, 8).unwrap();
        let expect = colormap(0.5);
        assert!(img.data().indexed_iter().all(|((_, _, c), &v)| v == expect[c]));
    }

    #[test]
    fn normalized_map_spans_unit_range() {
        let m = Tensor::from_shape_vec(vec![2, 2], vec![-3.0, 1.0, 5.0, 0.0]).unwrap();
        let n = normalize(&m);
        assert_eq!(n[[0, 0]], 0.0);
        assert_eq!(n[[1, 0]], 1.0);
    }

    #[test]
    fn top3_sorted_descending() {
        let words: Vec<String> = ["null", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let t = top3(&[0.1, 0.3, 0.05, 0.3, 0.25], &words);
        assert_eq!(t.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>(), ["a", "c", "d"]);
    }

    #[test]
    fn export_writes_seven_maps_and_a_table() {
        let cfg = TrainConfig::desk();
        let vocabs = Vocabularies::build(&["a dog near a ball", "a cat above a car"], &cfg).unwrap();
        let model = Model::new(cfg, vocabs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(32, 32, 3, |(y, x, c)| ((x + y + c) % 7) as f64 / 7.0);
        let out = export_heatmaps(&model, &img, dir.path(), 0).unwrap();
        for j in 1..=7 {
            let p = dir.path().join(format!("node_{j}.png"));
            assert_eq!(ImageTensor::load_png(&p).unwrap().dims(), (32, 32, 3));
        }
        let table = fs::read_to_string(dir.path().join("labels.txt")).unwrap();
        assert_eq!(table.lines().count(), 8);
        for top in &out.labels {
            assert_eq!(top.len(), 3);
            assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
            assert!(top.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
        }
    }
}
