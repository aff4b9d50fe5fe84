//! Image and caption quality metrics and the evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{Manifest, Split};

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("psnr operands {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::EmptyInput("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
    /// Average over color channels instead of comparing luma.
    pub per_channel: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
            per_channel: false,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Windowed SSIM over valid positions (windows fully inside the image).
/// RGB input is compared on Rec. 601 luma unless `per_channel` is set.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, opts: &SsimOptions) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("ssim operands {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let win = opts.window;
    if a.height() < win || a.width() < win || win == 0 {
        return Err(shape_err!(
            "image {}×{} is smaller than the {win}×{win} window",
            a.height(),
            a.width()
        ));
    }
    let (a, b) = if opts.per_channel || a.channels() == 1 {
        (a.clone(), b.clone())
    } else {
        (a.luma(), b.luma())
    };
    let g = gaussian_window(win, opts.sigma);
    let c1 = (opts.k1 * opts.range).powi(2);
    let c2 = (opts.k2 * opts.range).powi(2);
    let (h, w, ch) = a.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wt = g[dy] * g[dx];
                        let (va, vb) = (a.get(y0 + dy, x0 + dx, c), b.get(y0 + dy, x0 + dx, c));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for win in tokens.windows(n) {
            *m.entry(win.iter().map(|t| t.as_ref()).collect()).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(k);
        }
    }
    let matches = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len<S>(c: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn combine_bleu(matches: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 || matches.contains(&0) || totals.contains(&0) {
        return 0.0;
    }
    let n = matches.len() as f64;
    let log_p: f64 = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

/// Sentence BLEU-`n` with clipped precisions, brevity penalty and no
/// smoothing. An empty candidate scores 0.
pub fn bleu<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    if candidate.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let (matches, totals): (Vec<_>, Vec<_>) = (1..=n).map(|k| clipped(candidate, references, k)).unzip();
    Ok(combine_bleu(
        &matches,
        &totals,
        candidate.len(),
        closest_ref_len(candidate.len(), references),
    ))
}

/// Corpus BLEU-`n`: counts and lengths pooled over all pairs before
/// combining.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<Vec<S>>)], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matches = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        if refs.is_empty() {
            continue;
        }
        for k in 1..=n {
            let (m, t) = clipped(cand, refs, k);
            matches[k - 1] += m;
            totals[k - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(combine_bleu(&matches, &totals, c, r))
}

pub fn tokenize(text: &str) -> Vec<String> {
    crate::captioner::words(text).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the unrestored input, for reference.
    pub input_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub id: String,
    pub candidate: String,
    /// BLEU-1 … BLEU-4.
    pub bleu: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub captions: Vec<CaptionScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    pub mean_bleu: [f64; 4],
    pub corpus_bleu: [f64; 4],
    pub config: serde_json::Value,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

impl EvalReport {
    /// Fills the means from the per-item entries. Corpus BLEU needs the
    /// references and is set separately.
    pub fn finalize(&mut self) {
        self.mean_psnr = mean(self.images.iter().map(|s| s.psnr));
        self.mean_ssim = mean(self.images.iter().map(|s| s.ssim));
        self.mean_input_psnr = mean(self.images.iter().map(|s| s.input_psnr));
        for k in 0..4 {
            self.mean_bleu[k] = mean(self.captions.iter().map(|c| c.bleu[k]));
        }
    }

    /// Key-value header followed by tab-separated per-item tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images = {}", self.images.len());
        let _ = writeln!(out, "captions = {}", self.captions.len());
        let _ = writeln!(out, "mean_psnr = {:.6}", self.mean_psnr);
        let _ = writeln!(out, "mean_ssim = {:.6}", self.mean_ssim);
        let _ = writeln!(out, "mean_input_psnr = {:.6}", self.mean_input_psnr);
        for k in 0..4 {
            let _ = writeln!(out, "mean_bleu{} = {:.6}", k + 1, self.mean_bleu[k]);
            let _ = writeln!(out, "corpus_bleu{} = {:.6}", k + 1, self.corpus_bleu[k]);
        }
        let _ = writeln!(out, "config = {}", self.config);
        let _ = writeln!(out, "\n[images]\nid\tpsnr\tssim\tinput_psnr");
        for s in &self.images {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", s.id, s.psnr, s.ssim, s.input_psnr);
        }
        let _ = writeln!(out, "\n[captions]\nid\tbleu1\tbleu2\tbleu3\tbleu4\tcandidate");
        for c in &self.captions {
            let b = c.bleu;
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                c.id, b[0], b[1], b[2], b[3], c.candidate
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// A model under evaluation: restores a blurry image and optionally
/// captions it.
pub trait Restorer {
    fn restore(&self, blurry: &ImageTensor) -> Result<(ImageTensor, Option<String>)>;
}

/// Returns the input unchanged and no caption.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, blurry: &ImageTensor) -> Result<(ImageTensor, Option<String>)> {
        Ok((blurry.clone(), None))
    }
}

/// Scores `model` on the manifest's test split.
pub fn evaluate(manifest: &Manifest, model: &dyn Restorer, ssim_opts: &SsimOptions) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = Vec::new();
    for rec in manifest.split(Split::Test) {
        let sharp = ImageTensor::load_png(&manifest.resolve(&rec.sharp_path))?;
        let blurry = ImageTensor::load_png(&manifest.resolve(&rec.blurry_path))?;
        let (restored, caption) = model.restore(&blurry)?;
        let window_fits = sharp.height() >= ssim_opts.window && sharp.width() >= ssim_opts.window;
        report.images.push(ImageScore {
            id: rec.id.clone(),
            psnr: psnr(&restored, &sharp, 1.0)?,
            ssim: if window_fits {
                ssim(&restored, &sharp, ssim_opts)?
            } else {
                f64::NAN
            },
            input_psnr: psnr(&blurry, &sharp, 1.0)?,
        });
        if let Some(text) = caption {
            let cand = tokenize(&text);
            let refs: Vec<Vec<String>> = rec.captions.iter().map(|c| tokenize(c)).collect();
            let mut b = [0.0; 4];
            for (k, slot) in b.iter_mut().enumerate() {
                *slot = bleu(&cand, &refs, k + 1)?;
            }
            report.captions.push(CaptionScore {
                id: rec.id.clone(),
                candidate: text,
                bleu: b,
            });
            pairs.push((cand, refs));
        }
    }
    if report.images.iter().any(|s| s.ssim.is_nan()) {
        return Err(shape_err!("test images are smaller than the SSIM window"));
    }
    report.finalize();
    for k in 0..4 {
        report.corpus_bleu[k] = corpus_bleu(&pairs, k + 1)?;
    }
    Ok(report)
}

/// Writes `candidates.txt` and `references.txt` (`image_id TAB text`,
/// one line per reference) for external caption scorers.
pub fn export_captions(report: &EvalReport, manifest: &Manifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cand = String::new();
    let mut refs = String::new();
    for c in &report.captions {
        let _ = writeln!(cand, "{}\t{}", c.id, c.candidate);
        if let Some(rec) = manifest.records.iter().find(|r| r.id == c.id) {
            for r in &rec.captions {
                let _ = writeln!(refs, "{}\t{}", c.id, r);
            }
        }
    }
    let (cp, rp) = (dir.join("candidates.txt"), dir.join("references.txt"));
    fs::write(&cp, cand).map_err(|e| Error::io(&cp, e))?;
    fs::write(&rp, refs).map_err(|e| Error::io(&rp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn psnr_oracles() {
        let a = ImageTensor::zeros(1, 1, 1);
        let b = ImageTensor::filled(1, 1, 1, 0.5);
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &ImageTensor::zeros(1, 2, 1), 1.0).is_err());
    }

    #[test]
    fn ssim_oracles() {
        let o = SsimOptions::default();
        let img = ImageTensor::from_fn(16, 14, 3, |(y, x, c)| ((y * 7 + x * 3 + c) % 13) as f64 / 12.0);
        assert!((ssim(&img, &img, &o).unwrap() - 1.0).abs() < 1e-9);
        let z = ImageTensor::zeros(11, 11, 1);
        let one = ImageTensor::filled(11, 11, 1, 1.0);
        let c1 = 0.01f64.powi(2);
        assert!((ssim(&z, &one, &o).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!((ssim(&z, &one, &o).unwrap() - 9.999e-5).abs() < 1e-7);
        assert!(ssim(&ImageTensor::zeros(10, 20, 1), &ImageTensor::zeros(10, 20, 1), &o).is_err());
        let other = img.luma().clamped();
        let o1 = SsimOptions { per_channel: true, ..o };
        let a = img.luma();
        assert_eq!(ssim(&a, &other, &o1).unwrap(), ssim(&other, &a, &o1).unwrap());
    }

    #[test]
    fn bleu_oracles() {
        let r = vec![toks("the cat")];
        assert!((bleu(&toks("the the the"), &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = toks("a man rides a horse on the beach");
        assert_eq!(bleu(&c, std::slice::from_ref(&c), 4).unwrap(), 1.0);
        assert_eq!(bleu(&c, &[c.clone(), c.clone()], 4).unwrap(), 1.0);
        let empty: Vec<&str> = vec![];
        assert_eq!(bleu(&empty, &r, 1).unwrap(), 0.0);
        assert!(bleu(&c, &r, 5).is_err());
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let r = vec![toks("a b c d")];
        let b = bleu(&toks("a b"), &r, 1).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_of_exact_matches_is_one() {
        let pairs = vec![
            (toks("a b c d"), vec![toks("a b c d")]),
            (toks("x y z w"), vec![toks("x y z w"), toks("q")]),
        ];
        assert_eq!(corpus_bleu(&pairs, 4).unwrap(), 1.0);
        let none: Vec<(Vec<&str>, Vec<Vec<&str>>)> = vec![];
        assert_eq!(corpus_bleu(&none, 4).unwrap(), 0.0);
    }

    #[test]
    fn empty_report_has_no_nans() {
        let mut r = EvalReport::default();
        r.finalize();
        assert_eq!(r.mean_psnr, 0.0);
        assert!(!r.to_text().contains("NaN"));
    }
}
