//! Caption decoder: a single-layer LSTM whose state is initialized from the
//! pooled backbone features and which attends, at every step, over the
//! seven node predictions of the tree.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use s3e_autograd::{concat, init, ParamId, ParamStore, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::capparse::{is_entity_node, NUM_NODES};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::s3tree::{argmax, NodeBundle};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased alphanumeric words.
pub fn words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Caption vocabulary; ids `0..4` are PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl CaptionVocab {
    fn from_words(extra: impl IntoIterator<Item = String>) -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(extra);
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Words of frequency ≥ `min_freq`, by descending frequency then
    /// alphabetically, after the specials.
    pub fn build<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in words(c.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        kept.sort_by_key(|k| std::cmp::Reverse(k.1));
        Self::from_words(kept.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[BOS, w_1, …, EOS]` with at most `t_max` tokens after BOS.
    pub fn encode(&self, caption: &str, t_max: usize) -> CaptionSample {
        let mut ids = vec![BOS];
        ids.extend(words(caption).map(|w| self.id(&w)).take(t_max.saturating_sub(1)));
        ids.push(EOS);
        CaptionSample { ids }
    }

    /// Space-joined words, specials other than UNK omitted.
    pub fn decode(&self, sample: &CaptionSample) -> String {
        sample
            .ids
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_list(text.lines().map(str::to_string).collect())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// All words in id order, specials first.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Inverse of [`CaptionVocab::words`].
    pub fn from_list(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("missing special tokens".into()));
        }
        Ok(Self::from_words(words.into_iter().skip(SPECIALS.len())))
    }
}

/// Token ids starting with BOS and, when complete, ending with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionSample {
    pub ids: Vec<usize>,
}

/// What the attention reads from each node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttendSource {
    /// Predicted label distributions.
    #[default]
    Probs,
    /// Pooled node features.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub vocab: usize,
    pub entity_vocab: usize,
    pub relation_vocab: usize,
    /// Backbone channels `c`.
    pub image_channels: usize,
    /// Node channels `c'`, read when attending to pooled features.
    pub node_channels: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    #[serde(default)]
    pub source: AttendSource,
}

pub struct DecoderParams {
    pub config: CaptionerConfig,
    pub embedding: ParamId,
    pub image: Linear,
    pub init_h: Linear,
    pub init_c: Linear,
    pub input_gates: Linear,
    pub hidden_gates: ParamId,
    pub project_entity: Linear,
    pub project_relation: Linear,
    pub attend_hidden: ParamId,
    pub attend_node: ParamId,
    pub attend_score: ParamId,
    pub output: Linear,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: CaptionerConfig, rng: &mut R) -> Self {
        let p = |s: &str| format!("{prefix}{s}");
        let (e, h, a) = (config.embed, config.hidden, config.attention);
        let (ent_in, rel_in) = match config.source {
            AttendSource::Probs => (config.entity_vocab, config.relation_vocab),
            AttendSource::Pooled => (config.node_channels, config.node_channels),
        };
        let sd = |fan: usize| 1.0 / (fan.max(1) as f64).sqrt();
        Self {
            embedding: store.insert(p("embedding"), init::normal(&[config.vocab, e], 1.0, rng)),
            image: Linear::new(store, &p("image"), config.image_channels, h, rng),
            init_h: Linear::new(store, &p("init_h"), h, h, rng),
            init_c: Linear::new(store, &p("init_c"), h, h, rng),
            input_gates: Linear::new(store, &p("input_gates"), e + a, 4 * h, rng),
            hidden_gates: store.insert(p("hidden_gates"), init::uniform(&[h, 4 * h], -sd(h), sd(h), rng)),
            project_entity: Linear::new(store, &p("project_entity"), ent_in, a, rng),
            project_relation: Linear::new(store, &p("project_relation"), rel_in, a, rng),
            attend_hidden: store.insert(p("attend_hidden"), init::uniform(&[h, a], -sd(h), sd(h), rng)),
            attend_node: store.insert(p("attend_node"), init::uniform(&[a, a], -sd(a), sd(a), rng)),
            attend_score: store.insert(p("attend_score"), init::uniform(&[a, 1], -sd(a), sd(a), rng)),
            output: Linear::new(store, &p("output"), h, config.vocab, rng),
            config,
        }
    }
}

/// `h_V`: global average pool of `V: [n, c, h, w]` followed by an affine map.
pub fn pool_image_vector<'g>(s: &Session<'g, '_>, v: Var<'g>, params: &DecoderParams) -> Var<'g> {
    params.image.forward(s, v.global_avg_pool())
}

/// Node vectors projected into the attention space, with their part of
/// the score precomputed. Constant across decoding steps.
#[derive(Clone)]
pub struct NodeMemory<'g> {
    pub projected: Vec<Var<'g>>,
    keys: Vec<Var<'g>>,
}

impl<'g> NodeMemory<'g> {
    /// Rows `start..start+len` of every node.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        Self {
            projected: self.projected.iter().map(|p| p.narrow(0, start, len)).collect(),
            keys: self.keys.iter().map(|k| k.narrow(0, start, len)).collect(),
        }
    }

    /// Repeats row `row` `times` times.
    fn repeat_row(&self, row: usize, times: usize) -> Self {
        let rep = |v: &Var<'g>| concat(&vec![v.narrow(0, row, 1); times], 0);
        Self {
            projected: self.projected.iter().map(rep).collect(),
            keys: self.keys.iter().map(rep).collect(),
        }
    }
}

/// Projects the seven node vectors (`[n, |vocab_j|]` each, or `[n, c']`
/// when attending to pooled features) into the shared attention space.
pub fn node_memory<'g>(s: &Session<'g, '_>, nodes: &[Var<'g>], params: &DecoderParams) -> Result<NodeMemory<'g>> {
    if nodes.len() != NUM_NODES {
        return Err(shape_err!(
            "attention needs {NUM_NODES} node vectors, got {}",
            nodes.len()
        ));
    }
    let w_y = s.param(params.attend_node);
    let mut projected = Vec::with_capacity(NUM_NODES);
    let mut keys = Vec::with_capacity(NUM_NODES);
    for (j, &y) in nodes.iter().enumerate() {
        let proj = if is_entity_node(j + 1) {
            &params.project_entity
        } else {
            &params.project_relation
        };
        let expect = s.store().get(proj.weight).shape()[1];
        let shape = y.shape();
        if shape.len() != 2 || shape[1] != expect {
            return Err(shape_err!(
                "node {} vector has shape {shape:?}, expected [n, {expect}]",
                j + 1
            ));
        }
        let p = proj.forward(s, y);
        keys.push(p.matmul(w_y));
        projected.push(p);
    }
    Ok(NodeMemory { projected, keys })
}

/// The node vectors the configured attention source reads.
pub fn attention_inputs<'g>(bundle: &NodeBundle<'g>, params: &DecoderParams) -> Vec<Var<'g>> {
    match params.config.source {
        AttendSource::Probs => bundle.probs.clone(),
        AttendSource::Pooled => bundle.pooled.clone(),
    }
}

/// Additive attention: `score_j = vᵀ tanh(W_h h + W_y P_j ŷ_j)`,
/// `α = softmax(score)`, context `Σ_j α_j P_j ŷ_j`. Returns
/// `(context [n, a], α [n, 7])`.
pub fn attend<'g>(
    s: &Session<'g, '_>,
    h: Var<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
) -> (Var<'g>, Var<'g>) {
    let query = h.matmul(s.param(params.attend_hidden));
    let v = s.param(params.attend_score);
    let scores: Vec<Var<'g>> = memory.keys.iter().map(|&k| query.add(k).tanh().matmul(v)).collect();
    let alpha = concat(&scores, 1).softmax();
    let mut context: Option<Var<'g>> = None;
    for (j, &p) in memory.projected.iter().enumerate() {
        let term = alpha.narrow(1, j, 1).mul(p);
        context = Some(context.map_or(term, |c| c.add(term)));
    }
    (context.unwrap(), alpha)
}

#[derive(Clone, Copy)]
pub struct DecoderState<'g> {
    pub h: Var<'g>,
    pub c: Var<'g>,
}

pub fn init_state<'g>(s: &Session<'g, '_>, h_v: Var<'g>, params: &DecoderParams) -> DecoderState<'g> {
    DecoderState {
        h: params.init_h.forward(s, h_v).tanh(),
        c: params.init_c.forward(s, h_v),
    }
}

fn one_hot(tokens: &[usize], vocab: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![tokens.len(), vocab]);
    for (r, &tok) in tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::Label(format!(
                "token {tok} outside caption vocabulary of {vocab}"
            )));
        }
        t[[r, tok]] = 1.0;
    }
    Ok(t)
}

/// One decoder step. Returns the output scores `[n, vocab]` (apply softmax
/// for the word distribution) and the next state.
pub fn decode_step<'g>(
    s: &Session<'g, '_>,
    prev: &[usize],
    state: DecoderState<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
) -> Result<(Var<'g>, DecoderState<'g>)> {
    let hsz = params.config.hidden;
    let embedded = s
        .constant(one_hot(prev, params.config.vocab)?)
        .matmul(s.param(params.embedding));
    let (context, _) = attend(s, state.h, memory, params);
    let input = concat(&[embedded, context], 1);
    let gates = params
        .input_gates
        .forward(s, input)
        .add(state.h.matmul(s.param(params.hidden_gates)));
    let i = gates.narrow(1, 0, hsz).sigmoid();
    let f = gates.narrow(1, hsz, hsz).sigmoid();
    let g = gates.narrow(1, 2 * hsz, hsz).tanh();
    let o = gates.narrow(1, 3 * hsz, hsz).sigmoid();
    let c = f.mul(state.c).add(i.mul(g));
    let h = o.mul(c.tanh());
    let logits = params.output.forward(s, h);
    Ok((logits, DecoderState { h, c }))
}

/// Teacher-forced negative log-likelihood, summed over time and averaged
/// over the batch. Samples are padded with PAD, which is masked out.
/// Also returns the number of predicted (unmasked) tokens.
pub fn caption_loss<'g>(
    s: &Session<'g, '_>,
    samples: &[CaptionSample],
    h_v: Var<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
) -> Result<(Var<'g>, usize)> {
    let n = samples.len();
    if n == 0 || h_v.shape()[0] != n {
        return Err(shape_err!("{n} captions for {} images", h_v.shape()[0]));
    }
    let steps = samples.iter().map(|c| c.ids.len()).max().unwrap_or(1).saturating_sub(1);
    let token = |c: &CaptionSample, t: usize| c.ids.get(t).copied().unwrap_or(PAD);
    let mut state = init_state(s, h_v, params);
    let mut total: Option<Var<'g>> = None;
    let mut counted = 0;
    for t in 1..=steps {
        let prev: Vec<usize> = samples.iter().map(|c| token(c, t - 1)).collect();
        let target: Vec<usize> = samples.iter().map(|c| token(c, t)).collect();
        let (logits, next) = decode_step(s, &prev, state, memory, params)?;
        state = next;
        if let Some(&bad) = target.iter().find(|&&y| y >= params.config.vocab) {
            return Err(Error::Label(format!("token {bad} outside caption vocabulary")));
        }
        let mask: Vec<f64> = target.iter().map(|&y| if y == PAD { 0.0 } else { 1.0 }).collect();
        counted += mask.iter().filter(|&&m| m > 0.0).count();
        let picked = logits.log_softmax().pick(&target);
        let nll = picked
            .mul_const(&Tensor::from_shape_vec(vec![n], mask).unwrap())
            .sum()
            .neg();
        total = Some(total.map_or(nll, |acc| acc.add(nll)));
    }
    let total = total.unwrap_or_else(|| s.constant(Tensor::zeros(vec![])));
    Ok((total.scale(1.0 / n as f64), counted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// Decodes one caption per image. At most `t_max` tokens follow BOS.
pub fn generate<'g>(
    s: &Session<'g, '_>,
    h_v: Var<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
    strategy: Strategy,
    t_max: usize,
) -> Result<Vec<CaptionSample>> {
    let n = h_v.shape()[0];
    match strategy {
        Strategy::Greedy => greedy(s, h_v, memory, params, t_max),
        Strategy::Beam(k) => (0..n)
            .map(|i| beam(s, h_v.narrow(0, i, 1), &memory.narrow(i, 1), params, k.max(1), t_max))
            .collect(),
    }
}

fn greedy<'g>(
    s: &Session<'g, '_>,
    h_v: Var<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
    t_max: usize,
) -> Result<Vec<CaptionSample>> {
    let n = h_v.shape()[0];
    let mut out: Vec<CaptionSample> = (0..n).map(|_| CaptionSample { ids: vec![BOS] }).collect();
    let mut done = vec![false; n];
    let mut state = init_state(s, h_v, params);
    for _ in 0..t_max {
        if done.iter().all(|&d| d) {
            break;
        }
        let prev: Vec<usize> = out.iter().map(|c| *c.ids.last().unwrap()).collect();
        let (logits, next) = decode_step(s, &prev, state, memory, params)?;
        state = next;
        let l = logits.value();
        for i in 0..n {
            if done[i] {
                continue;
            }
            let tok = argmax(l.index_axis(ndarray::Axis(0), i).iter().copied());
            out[i].ids.push(tok);
            done[i] = tok == EOS;
        }
    }
    Ok(out)
}

struct Hypothesis<'g> {
    ids: Vec<usize>,
    score: f64,
    state: DecoderState<'g>,
}

fn beam<'g>(
    s: &Session<'g, '_>,
    h_v: Var<'g>,
    memory: &NodeMemory<'g>,
    params: &DecoderParams,
    k: usize,
    t_max: usize,
) -> Result<CaptionSample> {
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        score: 0.0,
        state: init_state(s, h_v, params),
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..t_max {
        if live.is_empty() {
            break;
        }
        let m = live.len();
        let prev: Vec<usize> = live.iter().map(|h| *h.ids.last().unwrap()).collect();
        let state = DecoderState {
            h: concat(&live.iter().map(|h| h.state.h).collect::<Vec<_>>(), 0),
            c: concat(&live.iter().map(|h| h.state.c).collect::<Vec<_>>(), 0),
        };
        let (logits, next) = decode_step(s, &prev, state, &memory.repeat_row(0, m), params)?;
        let logp = logits.value().mapv(|v| v);
        let logp = s3e_autograd::ops::log_softmax_last(&logp);
        // (score, hypothesis, token), best first; ties keep the lower index
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(m * params.config.vocab);
        for (hi, h) in live.iter().enumerate() {
            for (tok, &lp) in logp.index_axis(ndarray::Axis(0), hi).iter().enumerate() {
                cand.push((h.score + lp, hi, tok));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next_live = Vec::with_capacity(k);
        for &(score, hi, tok) in cand.iter().take(k) {
            let mut ids = live[hi].ids.clone();
            ids.push(tok);
            if tok == EOS {
                finished.push((ids, score));
            } else {
                next_live.push(Hypothesis {
                    ids,
                    score,
                    state: DecoderState {
                        h: next.h.narrow(0, hi, 1),
                        c: next.c.narrow(0, hi, 1),
                    },
                });
            }
        }
        live = next_live;
        if finished.len() >= k {
            break;
        }
    }
    let best_finished = finished
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let best_live = live.into_iter().next().map(|h| (h.ids, h.score));
    let ids = match (best_finished, best_live) {
        (Some(f), Some(l)) => {
            if l.1 > f.1 {
                l.0
            } else {
                f.0
            }
        }
        (Some(f), None) => f.0,
        (None, Some(l)) => l.0,
        (None, None) => vec![BOS],
    };
    Ok(CaptionSample { ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use s3e_autograd::{Adam, Graph};

    fn config(vocab: usize) -> CaptionerConfig {
        CaptionerConfig {
            vocab,
            entity_vocab: 5,
            relation_vocab: 4,
            image_channels: 3,
            node_channels: 2,
            embed: 6,
            hidden: 8,
            attention: 5,
            source: AttendSource::Probs,
        }
    }

    fn setup(vocab: usize, seed: u64) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let params = DecoderParams::new(
            &mut store,
            "captioner.",
            config(vocab),
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        (store, params)
    }

    fn node_inputs<'g>(s: &Session<'g, '_>, n: usize, seed: u64) -> Vec<Var<'g>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (1..=7)
            .map(|j| {
                let k = if j % 2 == 1 { 5 } else { 4 };
                s.constant(init::uniform(&[n, k], 0.0, 1.0, &mut rng)).softmax()
            })
            .collect()
    }

    #[test]
    fn vocab_specials_and_encoding() {
        let v = CaptionVocab::build(&["a dog runs", "a dog sits", "the cat"], 2);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(v.word(4), Some("a"));
        assert_eq!(v.word(5), Some("dog"));
        let s = v.encode("A dog flies!", 10);
        assert_eq!(s.ids, vec![BOS, 4, 5, UNK, EOS]);
        assert_eq!(v.decode(&s), "a dog <unk>");
        assert_eq!(v.encode("a dog a dog", 2).ids, vec![BOS, 4, EOS]);
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caption_vocab.txt");
        let v = CaptionVocab::build(&["a man rides a horse"], 1);
        v.save(&path).unwrap();
        assert_eq!(CaptionVocab::load(&path).unwrap(), v);
    }

    #[test]
    fn pooled_image_vector_cases() {
        let (mut store, params) = setup(9, 0);
        let g = Graph::new();
        {
            let s = Session::new(&g, &store);
            let zero = s.constant(Tensor::zeros(vec![2, 3, 4, 4]));
            let hv = pool_image_vector(&s, zero, &params);
            assert_eq!(hv.shape(), vec![2, 8]);
            assert!(hv.value().iter().all(|&x| x == 0.0));
        }
        // identity-like map exposes the pooled pre-activation
        let mut w = Tensor::zeros(vec![8, 3]);
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        *store.get_mut(params.image.weight) = w;
        let s = Session::new(&g, &store);
        let hv = pool_image_vector(&s, s.constant(Tensor::from_elem(vec![1, 3, 2, 2], 0.7)), &params).value();
        assert!((0..3).all(|i| (hv[[0, i]] - 0.7).abs() < 1e-15));
    }

    #[test]
    fn attention_is_a_distribution_and_symmetric_for_equal_nodes() {
        let (mut store, params) = setup(9, 1);
        // same projection for both node kinds so equal inputs project equally
        let w = store
            .get(params.project_entity.weight)
            .slice(ndarray::s![.., ..4])
            .to_owned()
            .into_dyn();
        store.get_mut(params.project_entity.weight).fill(0.0);
        store
            .get_mut(params.project_entity.weight)
            .slice_mut(ndarray::s![.., ..4])
            .assign(&w);
        *store.get_mut(params.project_relation.weight) = w;
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let h = s.constant(init::normal(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let y4 = s.constant(Tensor::from_shape_vec(vec![3, 4], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap());
        let y5 = concat(&[y4, s.constant(Tensor::zeros(vec![3, 1]))], 1);
        let nodes: Vec<Var> = (1..=7).map(|j| if j % 2 == 1 { y5 } else { y4 }).collect();
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let (ctx, alpha) = attend(&s, h, &mem, &params);
        assert_eq!(ctx.shape(), vec![3, 5]);
        assert!(alpha.value().iter().all(|&a| (a - 1.0 / 7.0).abs() < 1e-12));

        let nodes = node_inputs(&s, 3, 4);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let (_, alpha) = attend(&s, h, &mem, &params);
        for row in alpha.value().rows() {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_score_selects_that_node() {
        let (mut store, params) = setup(9, 1);
        store.get_mut(params.attend_hidden).fill(0.0);
        let mut w_y = Tensor::zeros(vec![5, 5]);
        w_y[[0, 0]] = 1.0;
        *store.get_mut(params.attend_node) = w_y;
        let mut v = Tensor::zeros(vec![5, 1]);
        v[[0, 0]] = 200.0;
        *store.get_mut(params.attend_score) = v;
        let mut p = Tensor::zeros(vec![5, 5]);
        p[[0, 0]] = 5.0;
        *store.get_mut(params.project_entity.weight) = p;
        store.get_mut(params.project_relation.weight).fill(0.0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let one_hot = |k: usize, i: usize| {
            let mut t = Tensor::zeros(vec![1, k]);
            t[[0, i]] = 1.0;
            s.constant(t)
        };
        let nodes: Vec<Var> = (1..=7)
            .map(|j| match j {
                1 => one_hot(5, 0),
                j if j % 2 == 1 => one_hot(5, 1),
                _ => one_hot(4, 2),
            })
            .collect();
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let (ctx, alpha) = attend(&s, s.constant(Tensor::zeros(vec![1, 8])), &mem, &params);
        assert!(alpha.value()[[0, 0]] > 1.0 - 1e-12);
        let expect = mem.projected[0].value();
        let c = ctx.value();
        assert!((&*c - &*expect).iter().all(|d| d.abs() < 1e-9));
        assert!((c[[0, 0]] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn decode_step_distribution_cases() {
        let (mut store, params) = setup(11, 2);
        let g = Graph::new();
        {
            let s = Session::new(&g, &store);
            let nodes = node_inputs(&s, 2, 1);
            let mem = node_memory(&s, &nodes, &params).unwrap();
            let hv = s.constant(init::normal(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
            let st = init_state(&s, hv, &params);
            let (l1, _) = decode_step(&s, &[BOS, 5], st, &mem, &params).unwrap();
            let (l2, _) = decode_step(&s, &[BOS, 5], st, &mem, &params).unwrap();
            assert_eq!(*l1.value(), *l2.value());
            for row in l1.softmax().value().rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            assert!(matches!(
                decode_step(&s, &[BOS, 11], st, &mem, &params),
                Err(Error::Label(_))
            ));
        }
        store.get_mut(params.output.weight).fill(0.0);
        let s = Session::new(&g, &store);
        let nodes = node_inputs(&s, 1, 1);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let st = init_state(&s, s.constant(Tensor::ones(vec![1, 8])), &params);
        let (l, _) = decode_step(&s, &[BOS], st, &mem, &params).unwrap();
        assert!(l.softmax().value().iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_predictions_give_length_times_log_vocab() {
        let (mut store, params) = setup(1000, 3);
        store.get_mut(params.output.weight).fill(0.0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let nodes = node_inputs(&s, 1, 1);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let hv = s.constant(Tensor::ones(vec![1, 8]));
        let mut ids = vec![BOS];
        ids.extend(10..19);
        ids.push(EOS);
        let (loss, count) = caption_loss(&s, &[CaptionSample { ids }], hv, &mem, &params).unwrap();
        assert_eq!(count, 10);
        assert!((loss.item() - 10.0 * 1000f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn padding_never_changes_the_loss() {
        let (store, params) = setup(12, 4);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let nodes = node_inputs(&s, 2, 1);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let hv = s.constant(init::normal(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let a = CaptionSample {
            ids: vec![BOS, 5, 6, EOS],
        };
        let b = CaptionSample { ids: vec![BOS, 7, EOS] };
        let (l1, _) = caption_loss(&s, &[a.clone(), b.clone()], hv, &mem, &params).unwrap();
        let mut bp = b.clone();
        bp.ids.extend([PAD, PAD, PAD]);
        let mut ap = a.clone();
        ap.ids.push(PAD);
        let (l2, _) = caption_loss(&s, &[ap, bp], hv, &mem, &params).unwrap();
        assert!((l1.item() - l2.item()).abs() < 1e-12);
    }

    #[test]
    fn overfitting_one_caption_decreases_loss_and_greedy_reproduces_it() {
        let (mut store, params) = setup(10, 5);
        let target = CaptionSample {
            ids: vec![BOS, 4, 7, 5, 9, EOS],
        };
        let v = init::normal(&[1, 3, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut adam = Adam::new(0.01, 0.9, 0.999);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let g = Graph::new();
            let s = Session::new(&g, &store);
            let nodes = node_inputs(&s, 1, 1);
            let mem = node_memory(&s, &nodes, &params).unwrap();
            let hv = pool_image_vector(&s, s.constant(v.clone()), &params);
            let (loss, _) = caption_loss(&s, std::slice::from_ref(&target), hv, &mem, &params).unwrap();
            assert!(loss.item() < last);
            last = loss.item();
            let grads = s.param_grads(&g.backward(loss));
            adam.step(&mut store, &grads);
        }
        for _ in 0..150 {
            let g = Graph::new();
            let s = Session::new(&g, &store);
            let nodes = node_inputs(&s, 1, 1);
            let mem = node_memory(&s, &nodes, &params).unwrap();
            let hv = pool_image_vector(&s, s.constant(v.clone()), &params);
            let (loss, _) = caption_loss(&s, std::slice::from_ref(&target), hv, &mem, &params).unwrap();
            let grads = s.param_grads(&g.backward(loss));
            adam.step(&mut store, &grads);
        }
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let nodes = node_inputs(&s, 1, 1);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let hv = pool_image_vector(&s, s.constant(v.clone()), &params);
        let greedy = generate(&s, hv, &mem, &params, Strategy::Greedy, 10).unwrap();
        assert_eq!(greedy[0], target);
        let beam = generate(&s, hv, &mem, &params, Strategy::Beam(3), 10).unwrap();
        assert_eq!(beam[0], target);
    }

    #[test]
    fn beam_of_one_equals_greedy_and_t_max_bounds_length() {
        let (store, params) = setup(13, 6);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let nodes = node_inputs(&s, 3, 2);
        let mem = node_memory(&s, &nodes, &params).unwrap();
        let hv = s.constant(init::normal(&[3, 8], 2.0, &mut ChaCha8Rng::seed_from_u64(7)));
        for t_max in [1, 4, 9] {
            let gr = generate(&s, hv, &mem, &params, Strategy::Greedy, t_max).unwrap();
            let bm = generate(&s, hv, &mem, &params, Strategy::Beam(1), t_max).unwrap();
            assert_eq!(gr, bm);
            for c in &gr {
                assert_eq!(c.ids[0], BOS);
                assert!(c.ids.len() <= t_max + 1);
            }
        }
    }
}
