//! Seeded synthetic scenes: colored glyphs on a textured background, each
//! glyph standing for a noun, arranged so the caption's relation matches
//! the layout. Small enough to overfit on a CPU.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blursynth::{blur_image, SeverityRange, SynthOptions};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Glyph {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Bar,
    Column,
}

/// Noun, glyph and color of every drawable object.
const OBJECTS: [(&str, Glyph, [f64; 3]); 8] = [
    ("dog", Glyph::Disk, [0.9, 0.15, 0.1]),
    ("cat", Glyph::Square, [0.1, 0.3, 0.95]),
    ("ball", Glyph::Ring, [0.95, 0.85, 0.1]),
    ("car", Glyph::Bar, [0.1, 0.8, 0.2]),
    ("tree", Glyph::Triangle, [0.05, 0.45, 0.1]),
    ("bird", Glyph::Diamond, [0.95, 0.95, 0.95]),
    ("boat", Glyph::Column, [0.95, 0.5, 0.05]),
    ("house", Glyph::Cross, [0.6, 0.1, 0.7]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    Above,
    Under,
    Near,
}

impl Relation {
    fn word(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Under => "under",
            Relation::Near => "near",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: ImageTensor,
    pub captions: Vec<String>,
}

/// `n` scenes of `size × size` pixels with pairwise distinct captions.
/// Even indices hold one related pair, odd indices two.
pub fn scenes(n: usize, size: usize, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = out.len();
        let pairs = if i % 2 == 0 { 1 } else { 2 };
        let mut objs: Vec<usize> = Vec::new();
        while objs.len() < 2 * pairs {
            let o = rng.random_range(0..OBJECTS.len());
            if !objs.contains(&o) {
                objs.push(o);
            }
        }
        let rels: Vec<Relation> = (0..pairs)
            .map(|_| match rng.random_range(0..if pairs == 1 { 3 } else { 2 }) {
                0 => Relation::Above,
                1 => Relation::Under,
                _ => Relation::Near,
            })
            .collect();
        let caption = objs
            .chunks(2)
            .zip(&rels)
            .map(|(p, r)| format!("a {} {} a {}", OBJECTS[p[0]].0, r.word(), OBJECTS[p[1]].0))
            .collect::<Vec<_>>()
            .join(" and ");
        if !seen.insert(caption.clone()) {
            continue;
        }
        let texture = (rng.random::<f64>(), rng.random::<f64>());
        out.push(Scene {
            id: format!("scene{i:04}"),
            image: render(size, &objs, &rels, texture),
            captions: vec![caption],
        });
    }
    out
}

fn render(size: usize, objs: &[usize], rels: &[Relation], texture: (f64, f64)) -> ImageTensor {
    let s = size as f64;
    let mut img = ImageTensor::from_fn(size, size, 3, |(y, x, c)| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        let stripe = if ((x + 2 * y) / 3) % 2 == 0 { 0.06 } else { 0.0 };
        let base = [0.25 + 0.2 * fy, 0.3 + 0.15 * texture.0 * fx, 0.35 + 0.2 * texture.1];
        base[c] + stripe
    });
    // each pair gets a vertical strip of the canvas
    let strips = rels.len() as f64;
    for (k, (pair, rel)) in objs.chunks(2).zip(rels).enumerate() {
        let x0 = s * k as f64 / strips;
        let w = s / strips;
        let r = (w.min(s) * 0.2).max(2.0);
        let cx = x0 + w / 2.0;
        let (a, b) = match rel {
            Relation::Above => ((s * 0.28, cx), (s * 0.72, cx)),
            Relation::Under => ((s * 0.72, cx), (s * 0.28, cx)),
            Relation::Near => ((s * 0.5, x0 + w * 0.27), (s * 0.5, x0 + w * 0.73)),
        };
        draw(&mut img, OBJECTS[pair[0]].1, OBJECTS[pair[0]].2, a, r);
        draw(&mut img, OBJECTS[pair[1]].1, OBJECTS[pair[1]].2, b, r);
    }
    img
}

fn draw(img: &mut ImageTensor, glyph: Glyph, color: [f64; 3], (cy, cx): (f64, f64), r: f64) {
    let (h, w, _) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / r;
            let dx = (x as f64 + 0.5 - cx) / r;
            let inside = match glyph {
                Glyph::Disk => dx * dx + dy * dy <= 1.0,
                Glyph::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
                Glyph::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
                Glyph::Diamond => dx.abs() + dy.abs() <= 1.0,
                Glyph::Ring => (0.3..=1.0).contains(&(dx * dx + dy * dy)),
                Glyph::Cross => (dx.abs() <= 0.35 && dy.abs() <= 1.0) || (dy.abs() <= 0.35 && dx.abs() <= 1.0),
                Glyph::Bar => dx.abs() <= 1.0 && dy.abs() <= 0.45,
                Glyph::Column => dx.abs() <= 0.45 && dy.abs() <= 1.0,
            };
            if inside {
                for (c, &v) in color.iter().enumerate() {
                    img.data_mut()[[y, x, c]] = v;
                }
            }
        }
    }
}

pub fn captions(scenes: &[Scene]) -> Vec<String> {
    scenes.iter().flat_map(|s| s.captions.iter().cloned()).collect()
}

/// Blur options scaled to the image size.
pub fn synth_options(size: usize, seed: u64) -> SynthOptions {
    SynthOptions {
        range: SeverityRange::SEVERE,
        seed,
        max_disp: size as f64 / 4.0,
        parallel: false,
        ..SynthOptions::default()
    }
}

/// `(id, blurry, sharp, captions)` with seeded motion blur.
pub fn blurred_examples(scenes: &[Scene], seed: u64) -> Vec<(String, ImageTensor, ImageTensor, Vec<String>)> {
    scenes
        .iter()
        .map(|s| {
            let opts = synth_options(s.image.height(), seed);
            let (blurry, _) = blur_image(&s.image, &s.id, &opts).expect("toy scenes are valid images");
            (s.id.clone(), blurry, s.image.clone(), s.captions.clone())
        })
        .collect()
}

/// Writes `dir/sharp/<id>.png` and `dir/captions.tsv`, the inputs of
/// dataset synthesis.
pub fn write_sources(scenes: &[Scene], dir: &Path) -> Result<()> {
    let sharp = dir.join("sharp");
    fs::create_dir_all(&sharp).map_err(|e| Error::io(&sharp, e))?;
    let mut tsv = String::new();
    for s in scenes {
        s.image.save_png(&sharp.join(format!("{}.png", s.id)))?;
        for c in &s.captions {
            tsv.push_str(&format!("{}\t{c}\n", s.id));
        }
    }
    let path = dir.join("captions.tsv");
    fs::write(&path, tsv).map_err(|e| Error::io(&path, e))
}
