//! Blur synthesis from smooth random per-pixel motion flow.
//!
//! A coarse grid of Gaussian displacement vectors is bilinearly upsampled
//! to image size and scaled so its largest displacement equals
//! `severity · max_disp`. Each blurred pixel averages bilinear samples
//! taken along the segment `p − f(p)/2 → p + f(p)/2`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{Manifest, Record, Split};

pub const DEFAULT_MAX_DISP: f64 = 15.0;
pub const DEFAULT_SAMPLES: usize = 17;
const CONTROL_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRange {
    pub lo: f64,
    pub hi: f64,
}

impl SeverityRange {
    pub const LESS_SEVERE: SeverityRange = SeverityRange { lo: 0.2, hi: 0.5 };
    pub const SEVERE: SeverityRange = SeverityRange { lo: 0.5, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("invalid severity range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// `less`/`less_sev` or `sev`/`severe`, or `lo,hi`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "less" | "less_sev" | "less-sev" => Ok(Self::LESS_SEVERE),
            "sev" | "severe" => Ok(Self::SEVERE),
            other => {
                let (a, b) = other
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("unknown severity range {s:?}")))?;
                let num = |x: &str| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad severity bound {x:?}")))
                };
                Self::new(num(a)?, num(b)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFlow {
    /// Horizontal displacement in pixels, `[h, w]`.
    pub dx: Array2<f64>,
    /// Vertical displacement in pixels, `[h, w]`.
    pub dy: Array2<f64>,
    pub severity: f64,
}

impl MotionFlow {
    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        Self {
            dx: Array2::from_elem((h, w), dx),
            dy: Array2::from_elem((h, w), dy),
            severity: 0.0,
        }
    }

    pub fn max_displacement(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
    }
}

/// Upsamples a `g×g` grid to `h×w` with corner-aligned bilinear weights.
fn upsample_grid(grid: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let g = grid.nrows();
    let coord = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (gy, gx) = (coord(y, h), coord(x, w));
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Draws a smooth flow field whose largest displacement is
/// `severity · max_disp`, `severity ~ U(lo, hi)`.
pub fn sample_motion_flow(w: usize, h: usize, range: SeverityRange, seed: u64, max_disp: f64) -> MotionFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let severity = range.lo + (range.hi - range.lo) * u;
    let mut grid =
        || Array2::from_shape_simple_fn((CONTROL_GRID, CONTROL_GRID), || rng.sample::<f64, _>(StandardNormal));
    let (gx, gy) = (grid(), grid());
    let mut flow = MotionFlow {
        dx: upsample_grid(&gx, h, w),
        dy: upsample_grid(&gy, h, w),
        severity,
    };
    let peak = flow.max_displacement();
    let scale = if peak > 0.0 { severity * max_disp / peak } else { 0.0 };
    flow.dx.mapv_inplace(|v| v * scale);
    flow.dy.mapv_inplace(|v| v * scale);
    flow
}

fn sample_bilinear(img: &ImageTensor, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Averages `n_samples` evenly spaced bilinear samples along each pixel's
/// exposure path; borders clamp to the edge.
pub fn apply_motion_blur(sharp: &ImageTensor, flow: &MotionFlow, n_samples: usize) -> Result<ImageTensor> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let (h, w, c) = sharp.dims();
    if flow.dx.dim() != (h, w) || flow.dy.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "flow {:?} does not match image {h}×{w}",
            flow.dx.dim()
        )));
    }
    let offsets: Vec<f64> = if n_samples == 1 {
        vec![0.0]
    } else {
        (0..n_samples)
            .map(|k| k as f64 / (n_samples - 1) as f64 - 0.5)
            .collect()
    };
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (flow.dx[[y, x]], flow.dy[[y, x]]);
            if fx == 0.0 && fy == 0.0 {
                for ch in 0..c {
                    out.data_mut()[[y, x, ch]] = sharp.get(y, x, ch);
                }
                continue;
            }
            for ch in 0..c {
                let sum: f64 = offsets
                    .iter()
                    .map(|t| sample_bilinear(sharp, y as f64 + t * fy, x as f64 + t * fx, ch))
                    .sum();
                out.data_mut()[[y, x, ch]] = (sum / n_samples as f64).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Per-image seed, independent of processing order.
pub fn image_seed(global: u64, id: &str) -> u64 {
    // FNV-1a of the id, mixed with the global seed by SplitMix64
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in id.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    let mut z = global ^ hash;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub range: SeverityRange,
    pub seed: u64,
    pub max_disp: f64,
    pub n_samples: usize,
    /// Fraction of images (taken from the end in id order) marked as test.
    pub test_fraction: f64,
    pub parallel: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            range: SeverityRange::SEVERE,
            seed: 0,
            max_disp: DEFAULT_MAX_DISP,
            n_samples: DEFAULT_SAMPLES,
            test_fraction: 0.2,
            parallel: true,
        }
    }
}

/// Blurs one image with its derived seed.
pub fn blur_image(sharp: &ImageTensor, id: &str, opts: &SynthOptions) -> Result<(ImageTensor, f64)> {
    let flow = sample_motion_flow(
        sharp.width(),
        sharp.height(),
        opts.range,
        image_seed(opts.seed, id),
        opts.max_disp,
    );
    Ok((apply_motion_blur(sharp, &flow, opts.n_samples)?, flow.severity))
}

/// Reads `image_id TAB caption` lines; ids may repeat.
pub fn read_captions(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, cap) = line
            .split_once('\t')
            .ok_or_else(|| Error::Manifest(format!("{}:{}: expected id<TAB>caption", path.display(), i + 1)))?;
        map.entry(id.trim().to_string())
            .or_default()
            .push(cap.trim().to_string());
    }
    Ok(map)
}

fn png_inputs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Blurs every PNG in `sharp_dir` into `out_dir/blurry/` and returns the
/// manifest (also written to `out_dir/manifest.jsonl`). Tree labels are
/// left empty.
pub fn make_dataset(sharp_dir: &Path, captions_file: &Path, out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    let inputs = png_inputs(sharp_dir)?;
    let captions = read_captions(captions_file)?;
    for (id, _) in &inputs {
        if !captions.contains_key(id) {
            return Err(Error::Manifest(format!("no caption for image {id}")));
        }
    }
    let blurry_dir = out_dir.join("blurry");
    fs::create_dir_all(&blurry_dir).map_err(|e| Error::io(&blurry_dir, e))?;

    let work = |(id, path): &(String, PathBuf)| -> Result<(String, PathBuf, f64)> {
        let sharp = ImageTensor::load_png(path)?;
        let (blurred, severity) = blur_image(&sharp, id, opts)?;
        let rel = PathBuf::from("blurry").join(format!("{id}.png"));
        blurred.save_png(&out_dir.join(&rel))?;
        Ok((id.clone(), rel, severity))
    };
    let results: Vec<Result<(String, PathBuf, f64)>> = if opts.parallel {
        inputs.par_iter().map(work).collect()
    } else {
        inputs.iter().map(work).collect()
    };

    let n = inputs.len();
    let n_test = ((n as f64) * opts.test_fraction).ceil() as usize;
    let mut manifest = Manifest::new(out_dir);
    for (i, (res, (_, sharp_path))) in results.into_iter().zip(&inputs).enumerate() {
        let (id, blurry_path, severity) = res?;
        let sharp_path = fs::canonicalize(sharp_path).map_err(|e| Error::io(sharp_path, e))?;
        manifest.records.push(Record {
            captions: captions[&id].clone(),
            id,
            sharp_path,
            blurry_path,
            severity,
            tree_labels: Vec::new(),
            split: if i + n_test >= n && n_test > 0 {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_range_gives_zero_flow_and_identity_blur() {
        let flow = sample_motion_flow(9, 7, SeverityRange::new(0.0, 0.0).unwrap(), 3, 15.0);
        assert_eq!(flow.max_displacement(), 0.0);
        let img = ImageTensor::from_fn(7, 9, 3, |(y, x, c)| ((y * 3 + x * 5 + c) % 11) as f64 / 10.0);
        assert_eq!(apply_motion_blur(&img, &flow, 17).unwrap(), img);
    }

    #[test]
    fn flow_is_bounded_and_seeded() {
        let r = SeverityRange::LESS_SEVERE;
        let a = sample_motion_flow(20, 12, r, 11, 15.0);
        assert!(a.max_displacement() <= r.hi * 15.0 + 1e-9);
        assert!((a.max_displacement() - a.severity * 15.0).abs() < 1e-9);
        assert!((r.lo..=r.hi).contains(&a.severity));
        assert_eq!(a, sample_motion_flow(20, 12, r, 11, 15.0));
        assert_ne!(a, sample_motion_flow(20, 12, r, 12, 15.0));
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = ImageTensor::filled(10, 10, 3, 0.37);
        let flow = sample_motion_flow(10, 10, SeverityRange::SEVERE, 5, 15.0);
        let out = apply_motion_blur(&img, &flow, 17).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn range_parsing() {
        assert_eq!(SeverityRange::parse("sev").unwrap(), SeverityRange::SEVERE);
        assert_eq!(SeverityRange::parse("less").unwrap(), SeverityRange::LESS_SEVERE);
        assert_eq!(
            SeverityRange::parse("0.1,0.3").unwrap(),
            SeverityRange { lo: 0.1, hi: 0.3 }
        );
        assert!(SeverityRange::parse("0.6,0.3").is_err());
        assert!(SeverityRange::parse("x").is_err());
    }

    #[test]
    fn zero_samples_rejected() {
        let img = ImageTensor::zeros(2, 2, 1);
        assert!(apply_motion_blur(&img, &MotionFlow::constant(2, 2, 1.0, 0.0), 0).is_err());
    }

    #[test]
    fn seeds_differ_per_id() {
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_eq!(image_seed(1, "a"), image_seed(1, "a"));
    }
}
