//! Finite-difference checks of the model's differentiable operations on
//! tiny double-precision inputs. Inputs are registered as parameters so
//! their gradients are checked alongside the weights'.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3e_autograd::gradcheck::{check_gradients, GradCheckReport, DEFAULT_EPS};
use s3e_autograd::{init, ParamId, ParamStore, Session, Var};

use crate::captioner::{self, AttendSource, CaptionSample, CaptionerConfig, DecoderParams, BOS, EOS};
use crate::deblur::{self, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::nn::{FusionConv, FusionForm, Linear};
use crate::s3tree::{self, TreeConfig, TreeParams};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

pub const MODULES: [&str; 3] = ["s3tree", "deblur", "captioner"];

#[derive(Clone, Debug)]
pub struct GradCase {
    pub module: &'static str,
    pub operation: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

/// Runs the checks of one module, or of all modules for `None`.
pub fn run(module: Option<&str>) -> Result<Vec<GradCase>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module {m:?}; expected one of {}",
                MODULES.join(", ")
            )));
        }
    }
    let wanted = |m: &str| module.is_none_or(|w| w == m);
    let mut out = Vec::new();
    let mut push = |module: &'static str, operation: &'static str, report: GradCheckReport| {
        out.push(GradCase {
            module,
            operation,
            report,
        })
    };
    if wanted("s3tree") {
        push("s3tree", "decouple", decouple_case());
        push("s3tree", "combine", combine_case());
        push("s3tree", "classify_node", classify_case());
    }
    if wanted("deblur") {
        push("deblur", "couple_into_layer", coupling_case());
        push("deblur", "perceptual_loss", perceptual_case());
    }
    if wanted("captioner") {
        push("captioner", "attend", attend_case());
        push("captioner", "caption_loss", caption_case());
    }
    Ok(out)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize], r: &mut ChaCha8Rng) -> ParamId {
    store.insert(name, init::uniform(shape, -1.0, 1.0, r))
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output element matters.
fn probe<'g>(x: Var<'g>, seed: u64) -> Var<'g> {
    let w = init::uniform(&x.shape(), -1.0, 1.0, &mut rng(seed));
    x.mul_const(&w).sum()
}

fn tree(store: &mut ParamStore, r: &mut ChaCha8Rng) -> TreeParams {
    let config = TreeConfig {
        in_channels: 2,
        node_channels: 2,
        entity_vocab: 3,
        relation_vocab: 3,
        form: FusionForm::Rectified,
    };
    TreeParams::new(store, "tree.", config, r)
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| !store.is_frozen(id)).collect()
}

fn decouple_case() -> GradCheckReport {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let v = input(&mut store, "v", &[1, 2, 4, 4], &mut r);
    let params = tree(&mut store, &mut r);
    let ids: Vec<ParamId> = [v].into_iter().chain(store.ids_with_prefix("tree.decouple")).collect();
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        let maps = s3tree::decouple(s, s.param(v), &params).expect("valid shapes");
        maps.iter()
            .enumerate()
            .map(|(k, &m)| probe(m, 100 + k as u64))
            .reduce(|a, b| a.add(b))
            .unwrap()
    })
}

fn combine_case() -> GradCheckReport {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let left = input(&mut store, "left", &[1, 2, 4, 4], &mut r);
    let right = input(&mut store, "right", &[1, 2, 4, 4], &mut r);
    let bank = FusionConv::new(&mut store, "combine", 4, 2, FusionForm::Rectified, &mut r);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        probe(
            s3tree::combine(s, s.param(left), s.param(right), &bank).expect("valid shapes"),
            7,
        )
    })
}

fn classify_case() -> GradCheckReport {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let map = input(&mut store, "map", &[2, 2, 4, 4], &mut r);
    let fc = Linear::new(&mut store, "classify", 2, 4, &mut r);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        let (pooled, logits, probs) = s3tree::classify_node(s, s.param(map), &fc);
        probe(pooled, 1).add(probe(logits, 2)).add(probe(probs, 3))
    })
}

fn coupling_case() -> GradCheckReport {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let h_l = input(&mut store, "h_l", &[1, 3, 4, 4], &mut r);
    let coupled = input(&mut store, "coupled", &[1, 4, 2, 2], &mut r);
    let bank = FusionConv::new(&mut store, "coupling", 4, 3, FusionForm::Rectified, &mut r);
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        probe(
            deblur::couple_into_layer(s, s.param(h_l), s.param(coupled), &bank).expect("valid shapes"),
            5,
        )
    })
}

fn perceptual_case() -> GradCheckReport {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let sharp = input(&mut store, "sharp", &[1, 3, 4, 4], &mut r);
    let restored = input(&mut store, "restored", &[1, 3, 4, 4], &mut r);
    let features = PerceptualExtractor::random(&mut store, "features.", 3, &mut r);
    check_gradients(&mut store, &[sharp, restored], DEFAULT_EPS, |s: &Session<'_, '_>| {
        deblur::perceptual_loss(s, s.param(sharp), s.param(restored), &features).expect("valid shapes")
    })
}

fn small_captioner(store: &mut ParamStore, r: &mut ChaCha8Rng) -> DecoderParams {
    let config = CaptionerConfig {
        vocab: 7,
        entity_vocab: 3,
        relation_vocab: 2,
        image_channels: 2,
        node_channels: 2,
        embed: 3,
        hidden: 4,
        attention: 3,
        source: AttendSource::Probs,
    };
    DecoderParams::new(store, "cap.", config, r)
}

fn node_inputs(store: &mut ParamStore, n: usize, r: &mut ChaCha8Rng) -> Vec<ParamId> {
    (1..=7)
        .map(|j| {
            let width = if j % 2 == 1 { 3 } else { 2 };
            input(store, &format!("node{j}"), &[n, width], r)
        })
        .collect()
}

fn attend_case() -> GradCheckReport {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let h = input(&mut store, "h", &[2, 4], &mut r);
    let nodes = node_inputs(&mut store, 2, &mut r);
    let params = small_captioner(&mut store, &mut r);
    let mut ids = vec![h];
    ids.extend(&nodes);
    ids.extend([params.attend_hidden, params.attend_node, params.attend_score]);
    ids.extend(store.ids_with_prefix("cap.project_"));
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        let vars: Vec<Var<'_>> = nodes.iter().map(|&id| s.param(id)).collect();
        let memory = captioner::node_memory(s, &vars, &params).expect("seven nodes");
        let (ctx, alpha) = captioner::attend(s, s.param(h), &memory, &params);
        probe(ctx, 8).add(probe(alpha, 9))
    })
}

fn caption_case() -> GradCheckReport {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let v = input(&mut store, "v", &[2, 2, 2, 2], &mut r);
    let nodes = node_inputs(&mut store, 2, &mut r);
    let params = small_captioner(&mut store, &mut r);
    let samples = vec![
        CaptionSample {
            ids: vec![BOS, 4, 5, 6, EOS],
        },
        CaptionSample { ids: vec![BOS, 6, EOS] },
    ];
    let ids = all_ids(&store);
    check_gradients(&mut store, &ids, DEFAULT_EPS, |s: &Session<'_, '_>| {
        let vars: Vec<Var<'_>> = nodes.iter().map(|&id| s.param(id)).collect();
        let memory = captioner::node_memory(s, &vars, &params).expect("seven nodes");
        let h_v = captioner::pool_image_vector(s, s.param(v), &params);
        captioner::caption_loss(s, &samples, h_v, &memory, &params)
            .expect("valid tokens")
            .0
    })
}
