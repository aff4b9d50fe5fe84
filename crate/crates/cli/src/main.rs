//! `s3e`: dataset synthesis, vocabulary building, training, restoration,
//! captioning, evaluation and heatmap export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use s3e_core::blursynth::{make_dataset, SeverityRange, SynthOptions, DEFAULT_MAX_DISP, DEFAULT_SAMPLES};
use s3e_core::capparse::{load_synonyms, LexiconTagger};
use s3e_core::captioner::Strategy;
use s3e_core::config::TrainConfig;
use s3e_core::heatmap::export_heatmaps;
use s3e_core::manifest::{Manifest, Split};
use s3e_core::metrics::{evaluate, export_captions, IdentityRestorer, Restorer, SsimOptions};
use s3e_core::model::{Model, Vocabularies};
use s3e_core::trainer::{TrainSet, Trainer};
use s3e_core::{gradsuite, Error, ImageTensor, Result};
use toml::Value;

use settings::{architecture_differs, resolve, Layers, Preset};

#[derive(Parser, Debug)]
#[command(name = "s3e", version, about = "Semantic-tree guided deblurring and captioning")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random draw (parameter init, data order, blur fields, dropout).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, seeded execution: equal arguments give identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML file overriding the preset; flags override the file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in defaults the config file is applied over.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Override one config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Blur a directory of sharp PNGs and write a dataset manifest.
    Synth(SynthArgs),
    /// Build vocabularies from the training captions and label the manifest.
    Vocab(VocabArgs),
    /// Pretrain the semantic tree on its node labels.
    PretrainTree(PretrainArgs),
    /// Co-train generator, critic, tree and captioner.
    Train(TrainArgs),
    /// Restore blurry images.
    Deblur(InferArgs),
    /// Caption blurry images.
    Caption(CaptionArgs),
    /// Score a model (or the unrestored input) on the test split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write per-node heatmaps and top-3 label tables for one image.
    Heatmaps(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of sharp PNG images.
    #[arg(long)]
    sharp: PathBuf,
    /// `image_id<TAB>caption` file.
    #[arg(long)]
    captions: PathBuf,
    /// Output directory for blurry images and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// `sev`, `less`, or `lo,hi` as fractions of the maximum displacement.
    #[arg(long, default_value = "sev")]
    range: String,
    #[arg(long, default_value_t = DEFAULT_MAX_DISP)]
    max_disp: f64,
    /// Samples along each pixel's motion path.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    /// Fraction of images, last in id order, placed in the test split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct VocabArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving entities.txt, relations.txt and captions.txt.
    #[arg(long)]
    out: PathBuf,
    /// `word<TAB>canonical` file merging synonyms in the tree vocabularies.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// `surface<TAB>TAG<TAB>lemma` file replacing the bundled lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Vocabulary directory written by `vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Updates to run; defaults to `pretrain_steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Start or resume from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Joint steps to run; defaults to `max_steps`, else the full schedule.
    #[arg(long)]
    steps: Option<u64>,
    /// Captioner-only updates before co-training; defaults to the unfinished
    /// part of `caption_steps`.
    #[arg(long)]
    caption_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// A PNG file, or a directory when `--in` is one.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Beam width; greedy when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// `image_id<TAB>caption` output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model to score; the unrestored input is scored when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for candidate and reference caption files.
    #[arg(long)]
    export: Option<PathBuf>,
    /// SSIM averaged over color channels instead of on luma.
    #[arg(long)]
    per_channel_ssim: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// One of s3tree, deblur, captioner; all when absent.
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.global.deterministic {
        // an already initialized pool only happens in tests; serial order is kept either way
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Vocab(a) => vocab(g, a),
        Command::PretrainTree(a) => pretrain(g, a),
        Command::Train(a) => train(g, a),
        Command::Deblur(a) => deblur(g, a),
        Command::Caption(a) => caption(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Heatmaps(a) => heatmaps(g, a),
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

/// Resolved config over `base` (the preset, or a checkpoint's config).
fn config_over(g: &Global, base: TrainConfig, mut flags: Vec<(&'static str, Value)>) -> Result<TrainConfig> {
    if let Some(seed) = g.seed {
        let v = Value::Integer(seed as i64);
        flags.push(("seed", v.clone()));
        flags.push(("data_seed", v));
    }
    resolve(Layers {
        base,
        file: g.config.as_deref(),
        sets: &g.sets,
        flags,
    })
}

/// Seed for inference dropout: `--seed`, else 0 when deterministic, else fresh.
fn inference_seed(g: &Global) -> u64 {
    g.seed
        .unwrap_or_else(|| if g.deterministic { 0 } else { rand::random() })
}

fn synth(g: &Global, a: &SynthArgs) -> Outcome {
    let range = SeverityRange::parse(&a.range)?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(usage(format!(
            "--test-fraction must lie in [0, 1), got {}",
            a.test_fraction
        )));
    }
    let opts = SynthOptions {
        range,
        seed: g.seed.unwrap_or(0),
        max_disp: a.max_disp,
        n_samples: a.samples,
        test_fraction: a.test_fraction,
        parallel: !g.deterministic,
    };
    let m = make_dataset(&a.sharp, &a.captions, &a.out, &opts)?;
    info!(
        "blurred {} images ({} train, {} test) into {}",
        m.records.len(),
        m.split(Split::Train).len(),
        m.split(Split::Test).len(),
        a.out.display()
    );
    Ok(())
}

fn vocab(g: &Global, a: &VocabArgs) -> Outcome {
    let cfg = config_over(g, g.preset.config(), Vec::new())?;
    let mut manifest = Manifest::load(&a.manifest)?;
    let captions: Vec<String> = manifest
        .split(Split::Train)
        .iter()
        .flat_map(|r| r.captions.iter().cloned())
        .collect();
    let tagger = match &a.lexicon {
        Some(p) => LexiconTagger::from_tsv(&fs::read_to_string(p).map_err(|e| io_failure(p, e))?)?,
        None => LexiconTagger::default(),
    };
    let synonyms = a.synonyms.as_deref().map(load_synonyms).transpose()?;
    let vocabs = Vocabularies::build_with(&captions, &cfg, &tagger, synonyms.as_ref())?;
    vocabs.save(&a.out)?;
    manifest.label(&tagger, &vocabs.entities, &vocabs.relations);
    manifest.save(&a.manifest)?;
    info!(
        "{} entities, {} relations, {} caption words; labeled {} records",
        vocabs.entities.len(),
        vocabs.relations.len(),
        vocabs.captions.len(),
        manifest.records.len()
    );
    Ok(())
}

/// Fresh trainer from the vocabularies, or one restored from `init` with
/// its training knobs overridden.
fn trainer(
    g: &Global,
    init: Option<&Path>,
    vocab: Option<&Path>,
    flags: Vec<(&'static str, Value)>,
) -> Result<Trainer> {
    match init {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            let cfg = config_over(g, t.model.config.clone(), flags)?;
            if let Some(field) = architecture_differs(&t.model.config, &cfg) {
                return Err(Error::Config(format!("{field} differs from the checkpoint's value")));
            }
            t.state.tree_opt.lr = cfg.pretrain_lr;
            t.state.caption_opt.lr = cfg.caption_lr;
            t.model.config = cfg;
            Ok(t)
        }
        None => {
            let cfg = config_over(g, g.preset.config(), flags)?;
            let dir = vocab
                .map(Path::to_path_buf)
                .or_else(|| cfg.vocab_dir.clone())
                .ok_or_else(|| Error::Config("--vocab (or vocab_dir) is required without --init".into()))?;
            let vocabs = Vocabularies::load(&dir)?;
            Ok(Trainer::new(Model::new(cfg, vocabs)?))
        }
    }
}

fn training_set(t: &Trainer) -> Result<TrainSet> {
    let path = t
        .model
        .config
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("--manifest (or manifest) is required".into()))?;
    TrainSet::from_manifest(&t.model, &Manifest::load(&path)?, Split::Train)
}

fn pretrain(g: &Global, a: &PretrainArgs) -> Outcome {
    let mut flags = Vec::new();
    if let Some(m) = &a.manifest {
        flags.push(("manifest", path_value(m)));
    }
    let mut t = trainer(g, a.init.as_deref(), a.vocab.as_deref(), flags)?;
    let data = training_set(&t)?;
    let steps = a.steps.unwrap_or(t.model.config.pretrain_steps);
    t.pretrain_tree(&data, steps)?;
    let (per_node, overall) = t.tree_accuracy(&data)?;
    info!("tree accuracy {overall:.3} (per node {per_node:.3?})");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    t.save(&a.out)?;
    t.write_log(&a.out.with_extension("log.jsonl"))?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn train(g: &Global, a: &TrainArgs) -> Outcome {
    let mut flags = Vec::new();
    if let Some(m) = &a.manifest {
        flags.push(("manifest", path_value(m)));
    }
    if let Some(d) = &a.out_dir {
        flags.push(("out_dir", path_value(d)));
    }
    let mut t = trainer(g, a.init.as_deref(), a.vocab.as_deref(), flags)?;
    let out_dir = t
        .model
        .config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("--out-dir (or out_dir) is required".into()))?;
    fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let data = training_set(&t)?;
    let warmup = a
        .caption_steps
        .unwrap_or_else(|| t.model.config.caption_steps.saturating_sub(t.state.caption_steps));
    t.fit_captioner(&data, warmup)?;
    let result = t.cotrain(&data, a.steps);
    t.write_log(&out_dir.join("train_log.jsonl"))?;
    result?;
    let (restored, blurry) = t.training_psnr(&data)?;
    info!("training-set PSNR {restored:.2} dB (input {blurry:.2} dB)");
    let last = out_dir.join("last.s3ed");
    t.save(&last)?;
    info!("wrote {}", last.display());
    Ok(())
}

fn load_model(g: &Global, ckpt: &Path) -> Result<Model> {
    let mut model = Trainer::load(ckpt)?.model;
    if !g.sets.is_empty() || g.config.is_some() {
        let cfg = config_over(g, model.config.clone(), Vec::new())?;
        if let Some(field) = architecture_differs(&model.config, &cfg) {
            return Err(Error::Config(format!("{field} differs from the checkpoint's value")));
        }
        model.config = cfg;
    }
    Ok(model)
}

/// `(id, input path)` for a PNG or every PNG in a directory, sorted.
fn png_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if !input.is_dir() {
        return Ok(vec![(stem(input), input.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(input)
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|p| (stem(&p), p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no PNG files in {}", input.display())));
    }
    Ok(out)
}

fn deblur(g: &Global, a: &InferArgs) -> Outcome {
    let model = load_model(g, &a.ckpt)?;
    let seed = inference_seed(g);
    let inputs = png_inputs(&a.input)?;
    let to_dir = a.input.is_dir();
    if to_dir {
        fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    }
    for (id, path) in &inputs {
        let image = ImageTensor::load_png(path)?;
        let out = model.infer(&[&image], Strategy::Greedy, seed)?.remove(0);
        let target = if to_dir {
            a.out.join(format!("{id}.png"))
        } else {
            a.out.clone()
        };
        out.restored.save_png(&target)?;
        info!("{id}: {}", target.display());
    }
    Ok(())
}

fn caption(g: &Global, a: &CaptionArgs) -> Outcome {
    let model = load_model(g, &a.ckpt)?;
    let strategy = match a.beam {
        Some(0) => return Err(usage("--beam must be at least 1")),
        Some(k) => Strategy::Beam(k),
        None => Strategy::Greedy,
    };
    let seed = inference_seed(g);
    let mut text = String::new();
    for (id, path) in png_inputs(&a.input)? {
        let image = ImageTensor::load_png(&path)?;
        let out = model.infer(&[&image], strategy, seed)?.remove(0);
        text.push_str(&format!("{id}\t{}\n", out.caption));
    }
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// A model whose dropout masks follow the command-line seed.
struct Seeded {
    model: Model,
    seed: u64,
}

impl Restorer for Seeded {
    fn restore(&self, blurry: &ImageTensor) -> Result<(ImageTensor, Option<String>)> {
        let out = self.model.infer(&[blurry], Strategy::Greedy, self.seed)?.remove(0);
        Ok((out.restored, Some(out.caption)))
    }
}

fn eval(g: &Global, a: &EvalArgs) -> Outcome {
    let manifest = Manifest::load(&a.manifest)?;
    let opts = SsimOptions {
        per_channel: a.per_channel_ssim,
        ..SsimOptions::default()
    };
    let report = match &a.ckpt {
        Some(ckpt) => {
            let model = load_model(g, ckpt)?;
            let config = serde_json::to_value(&model.config).map_err(Error::from)?;
            let mut r = evaluate(
                &manifest,
                &Seeded {
                    model,
                    seed: inference_seed(g),
                },
                &opts,
            )?;
            r.config = config;
            r
        }
        None => evaluate(&manifest, &IdentityRestorer, &opts)?,
    };
    if report.images.is_empty() {
        return Err(Error::EmptyInput("manifest has no test records".into()).into());
    }
    match &a.out {
        Some(p) => report.write(p)?,
        None => print!("{}", report.to_text()),
    }
    if let Some(dir) = &a.export {
        export_captions(&report, &manifest, dir)?;
    }
    info!(
        "PSNR {:.3} dB (input {:.3} dB), SSIM {:.4}",
        report.mean_psnr, report.mean_input_psnr, report.mean_ssim
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let cases = gradsuite::run(a.module.as_deref())?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        println!(
            "{}::{}\t{:.3e}\t{}",
            c.module,
            c.operation,
            c.report.max_rel_error,
            if c.passes() { "ok" } else { "FAIL" }
        );
        worst = worst.max(c.report.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        gradsuite::TOLERANCE
    );
    if cases.iter().all(|c| c.passes()) {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "gradient check failed".into(),
        })
    }
}

fn heatmaps(g: &Global, a: &HeatmapArgs) -> Outcome {
    let model = load_model(g, &a.ckpt)?;
    let image = ImageTensor::load_png(&a.input)?;
    let export = export_heatmaps(&model, &image, &a.out, inference_seed(g))?;
    info!(
        "wrote {} heatmaps to {}; caption: {}",
        export.files.len(),
        a.out.display(),
        export.caption
    );
    Ok(())
}
