//! The seven-node semantic tree over backbone features.
//!
//! Four entity maps are decoupled from the backbone features, three relation
//! maps are combined from pairs of children (`2 ← (1,3)`, `6 ← (5,7)`,
//! `4 ← (2,6)`), and every node is classified into its vocabulary.
//! All maps keep the backbone's spatial size.

use rand::Rng;
use s3e_autograd::{concat, ParamStore, Session, Var};
use serde::{Deserialize, Serialize};

use crate::capparse::{is_entity_node, CaptionTreeLabels, NUM_NODES};
use crate::error::{shape_err, Error, Result};
use crate::nn::{FusionConv, FusionForm, Linear};

/// `(parent, left, right)` in evaluation order.
pub const COMBINE_ORDER: [(usize, usize, usize); 3] = [(2, 1, 3), (6, 5, 7), (4, 2, 6)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Backbone channels `c`.
    pub in_channels: usize,
    /// Node channels `c'`.
    pub node_channels: usize,
    pub entity_vocab: usize,
    pub relation_vocab: usize,
    #[serde(default)]
    pub form: FusionForm,
}

impl TreeConfig {
    pub fn vocab_size(&self, node_id: usize) -> usize {
        if is_entity_node(node_id) {
            self.entity_vocab
        } else {
            self.relation_vocab
        }
    }
}

#[derive(Clone, Debug)]
pub struct TreeParams {
    pub config: TreeConfig,
    /// Decoupling banks for nodes 1, 3, 5, 7.
    pub decouple: [FusionConv; 4],
    /// Combining banks for nodes 2, 6, 4 (the order of [`COMBINE_ORDER`]).
    pub combine: [FusionConv; 3],
    /// Classifier of node `j` at index `j - 1`.
    pub classifiers: Vec<Linear>,
}

impl TreeParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: TreeConfig, rng: &mut R) -> Self {
        let (c, cn, form) = (config.in_channels, config.node_channels, config.form);
        let decouple = [1, 3, 5, 7].map(|j| FusionConv::new(store, &format!("{prefix}decouple{j}"), c, cn, form, rng));
        let combine = COMBINE_ORDER
            .map(|(j, _, _)| FusionConv::new(store, &format!("{prefix}combine{j}"), 2 * cn, cn, form, rng));
        let classifiers = (1..=NUM_NODES)
            .map(|j| Linear::new(store, &format!("{prefix}classify{j}"), cn, config.vocab_size(j), rng))
            .collect();
        Self {
            config,
            decouple,
            combine,
            classifiers,
        }
    }

    pub fn decouple_bank(&self, node_id: usize) -> &FusionConv {
        &self.decouple[(node_id - 1) / 2]
    }
}

/// Per-node outputs of one tree pass. Index `j - 1` holds node `j`.
#[derive(Clone, Debug)]
pub struct NodeBundle<'g> {
    /// `H^j`, each `[n, c', h, w]`.
    pub maps: Vec<Var<'g>>,
    /// `AvgPool(ReLU(H^j))`, each `[n, c']`.
    pub pooled: Vec<Var<'g>>,
    /// Fully connected output `h` of each node, each `[n, |vocab_j|]`;
    /// these are the classification scores.
    pub logits: Vec<Var<'g>>,
    /// `softmax(logits)`, the predicted label vectors.
    pub probs: Vec<Var<'g>>,
}

impl<'g> NodeBundle<'g> {
    pub fn map(&self, node_id: usize) -> Var<'g> {
        self.maps[node_id - 1]
    }

    pub fn probs(&self, node_id: usize) -> Var<'g> {
        self.probs[node_id - 1]
    }

    pub fn batch_size(&self) -> usize {
        self.maps[0].shape()[0]
    }
}

fn check_rank4(v: Var<'_>, what: &str) -> Result<[usize; 4]> {
    let s = v.shape();
    <[usize; 4]>::try_from(s.as_slice()).map_err(|_| shape_err!("{what} must be [n, c, h, w], got {s:?}"))
}

/// Entity maps for nodes 1, 3, 5, 7.
pub fn decouple<'g>(s: &Session<'g, '_>, v: Var<'g>, params: &TreeParams) -> Result<[Var<'g>; 4]> {
    let [_, c, _, _] = check_rank4(v, "backbone features")?;
    if c != params.config.in_channels {
        return Err(shape_err!(
            "backbone features have {c} channels, tree expects {}",
            params.config.in_channels
        ));
    }
    Ok([0, 1, 2, 3].map(|i| params.decouple[i].forward(s, v)))
}

/// Relation map from two child maps of equal shape.
pub fn combine<'g>(s: &Session<'g, '_>, left: Var<'g>, right: Var<'g>, bank: &FusionConv) -> Result<Var<'g>> {
    let (l, r) = (check_rank4(left, "left operand")?, check_rank4(right, "right operand")?);
    if l != r {
        return Err(shape_err!("combine operands differ: {l:?} vs {r:?}"));
    }
    if 2 * l[1] != bank.cin {
        return Err(shape_err!(
            "combine bank expects {} input channels, got {}",
            bank.cin,
            2 * l[1]
        ));
    }
    Ok(bank.forward(s, concat(&[left, right], 1)))
}

/// `(pooled, logits, probs)` for one node map.
pub fn classify_node<'g>(s: &Session<'g, '_>, map: Var<'g>, classifier: &Linear) -> (Var<'g>, Var<'g>, Var<'g>) {
    let pooled = map.relu().global_avg_pool();
    let logits = classifier.forward(s, pooled);
    let probs = logits.softmax();
    (pooled, logits, probs)
}

pub fn tree_forward<'g>(s: &Session<'g, '_>, v: Var<'g>, params: &TreeParams) -> Result<NodeBundle<'g>> {
    let entities = decouple(s, v, params)?;
    let mut maps: Vec<Option<Var<'g>>> = vec![None; NUM_NODES];
    for (i, j) in [1, 3, 5, 7].into_iter().enumerate() {
        maps[j - 1] = Some(entities[i]);
    }
    for (k, &(parent, l, r)) in COMBINE_ORDER.iter().enumerate() {
        let (left, right) = (maps[l - 1].unwrap(), maps[r - 1].unwrap());
        maps[parent - 1] = Some(combine(s, left, right, &params.combine[k])?);
    }
    let maps: Vec<Var<'g>> = maps.into_iter().map(Option::unwrap).collect();
    let mut bundle = NodeBundle {
        maps,
        pooled: Vec::with_capacity(NUM_NODES),
        logits: Vec::with_capacity(NUM_NODES),
        probs: Vec::with_capacity(NUM_NODES),
    };
    for j in 1..=NUM_NODES {
        let (p, l, pr) = classify_node(s, bundle.map(j), &params.classifiers[j - 1]);
        bundle.pooled.push(p);
        bundle.logits.push(l);
        bundle.probs.push(pr);
    }
    Ok(bundle)
}

/// Cross entropy summed over the seven nodes, averaged over the batch.
pub fn tree_loss<'g>(bundle: &NodeBundle<'g>, labels: &[CaptionTreeLabels]) -> Result<Var<'g>> {
    let n = bundle.batch_size();
    if labels.len() != n {
        return Err(shape_err!("{} label sets for a batch of {n}", labels.len()));
    }
    let mut total: Option<Var<'g>> = None;
    for j in 1..=NUM_NODES {
        let logits = bundle.logits[j - 1];
        let size = logits.shape()[1];
        let targets: Vec<usize> = labels.iter().map(|l| l.node(j)).collect();
        if let Some(&bad) = targets.iter().find(|&&t| t >= size) {
            return Err(Error::Label(format!(
                "node {j} label {bad} outside vocabulary of {size}"
            )));
        }
        let nll = logits.log_softmax().pick(&targets).sum().neg();
        total = Some(match total {
            Some(t) => t.add(nll),
            None => nll,
        });
    }
    Ok(total.unwrap().scale(1.0 / n as f64))
}

/// Node maps concatenated along channels in node-id order: `[n, 7c', h, w]`.
pub fn couple_tree_maps<'g>(bundle: &NodeBundle<'g>) -> Var<'g> {
    concat(&bundle.maps, 1)
}

/// Fraction of (sample, node) pairs whose argmax matches the label.
pub fn node_accuracy(bundle: &NodeBundle<'_>, labels: &[CaptionTreeLabels]) -> f64 {
    let mut hits = 0usize;
    for j in 1..=NUM_NODES {
        let p = bundle.probs(j).value();
        for (i, l) in labels.iter().enumerate() {
            let row = p.index_axis(ndarray::Axis(0), i);
            if argmax(row.iter().copied()) == l.node(j) {
                hits += 1;
            }
        }
    }
    hits as f64 / (labels.len() * NUM_NODES).max(1) as f64
}

/// First index of the maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use s3e_autograd::{init, Graph, Tensor};

    fn config(c: usize, cn: usize, e: usize, r: usize) -> TreeConfig {
        TreeConfig {
            in_channels: c,
            node_channels: cn,
            entity_vocab: e,
            relation_vocab: r,
            form: FusionForm::Rectified,
        }
    }

    fn setup(cfg: TreeConfig, seed: u64) -> (ParamStore, TreeParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = TreeParams::new(&mut store, "s3tree.", cfg, &mut rng);
        (store, params)
    }

    fn zero_classifiers(store: &mut ParamStore, params: &TreeParams) {
        for c in &params.classifiers {
            store.get_mut(c.weight).fill(0.0);
        }
    }

    #[test]
    fn shapes_follow_node_channels() {
        let (store, params) = setup(config(16, 32, 5, 4), 0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(init::normal(&[1, 16, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let b = tree_forward(&s, v, &params).unwrap();
        for j in 1..=7 {
            assert_eq!(b.map(j).shape(), vec![1, 32, 8, 8]);
            assert_eq!(b.logits[j - 1].shape(), vec![1, if j % 2 == 1 { 5 } else { 4 }]);
        }
        assert_eq!(couple_tree_maps(&b).shape(), vec![1, 224, 8, 8]);
    }

    #[test]
    fn zero_features_give_zero_maps_and_uniform_probs() {
        let (store, params) = setup(config(16, 8, 6, 3), 2);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(Tensor::zeros(vec![2, 16, 8, 8]));
        let b = tree_forward(&s, v, &params).unwrap();
        for j in 1..=7 {
            assert!(b.map(j).value().iter().all(|&x| x == 0.0));
            let k = params.config.vocab_size(j) as f64;
            assert!(b.probs(j).value().iter().all(|&p| (p - 1.0 / k).abs() < 1e-15));
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let (store, params) = setup(config(16, 8, 3, 3), 0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(Tensor::zeros(vec![1, 15, 4, 4]));
        assert!(matches!(tree_forward(&s, v, &params), Err(Error::Shape(_))));
        let a = s.constant(Tensor::zeros(vec![1, 8, 4, 4]));
        let b = s.constant(Tensor::zeros(vec![1, 8, 4, 5]));
        assert!(matches!(combine(&s, a, b, &params.combine[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_hand_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = FusionConv::new(&mut store, "c", 2, 1, FusionForm::Rectified, &mut rng);
        // unit weight at the kernel center only
        let mut w = Tensor::zeros(vec![1, 2, 3, 3]);
        w[[0, 0, 1, 1]] = 1.0;
        w[[0, 1, 1, 1]] = 1.0;
        *store.get_mut(bank.weight) = w;
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let one = s.constant(Tensor::ones(vec![1, 1, 1, 1]));
        assert_eq!(combine(&s, one, one, &bank).unwrap().item(), 2.0);
    }

    #[test]
    fn constant_map_pools_to_its_rectified_value() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        for v in [-0.7, 1.3] {
            let map = s.constant(Tensor::from_elem(vec![1, 3, 4, 4], v));
            let (pooled, _, probs) = classify_node(&s, map, &lin);
            assert!(pooled.value().iter().all(|&p| (p - f64::max(v, 0.0)).abs() < 1e-15));
            assert!((probs.value().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_loss_matches_log_vocab_sizes() {
        let (mut store, params) = setup(config(4, 2, 839, 247), 0);
        zero_classifiers(&mut store, &params);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(init::normal(&[3, 4, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let b = tree_forward(&s, v, &params).unwrap();
        let labels = vec![CaptionTreeLabels([1, 2, 3, 4, 5, 6, 7]); 3];
        let expect = 4.0 * 839f64.ln() + 3.0 * 247f64.ln();
        assert!((tree_loss(&b, &labels).unwrap().item() - expect).abs() < 1e-9);
    }

    #[test]
    fn two_word_vocab_contributes_ln2_per_entity() {
        let (mut store, params) = setup(config(4, 2, 2, 1), 0);
        zero_classifiers(&mut store, &params);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(Tensor::ones(vec![1, 4, 2, 2]));
        let b = tree_forward(&s, v, &params).unwrap();
        // relation vocab of one word contributes ln 1 = 0
        let loss = tree_loss(&b, &[CaptionTreeLabels([1, 0, 0, 0, 1, 0, 0])]).unwrap();
        assert!((loss.item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let (store, params) = setup(config(4, 2, 3, 3), 0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let b = tree_forward(&s, s.constant(Tensor::ones(vec![1, 4, 2, 2])), &params).unwrap();
        let err = tree_loss(&b, &[CaptionTreeLabels([0, 0, 3, 0, 0, 0, 0])]);
        assert!(matches!(err, Err(Error::Label(_))));
    }

    #[test]
    fn confident_predictions_give_near_zero_loss() {
        let (mut store, params) = setup(config(4, 2, 3, 3), 0);
        for c in &params.classifiers {
            store.get_mut(c.weight).fill(0.0);
            let b = store.get_mut(c.bias);
            b.fill(0.0);
            b[[1]] = 60.0;
        }
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let b = tree_forward(&s, s.constant(Tensor::ones(vec![1, 4, 2, 2])), &params).unwrap();
        let loss = tree_loss(&b, &[CaptionTreeLabels([1; 7])]).unwrap().item();
        assert!((0.0..1e-20).contains(&loss));
    }

    #[test]
    fn couple_indexing_follows_node_order() {
        let (store, params) = setup(config(3, 2, 3, 3), 5);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let v = s.constant(init::normal(&[1, 3, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
        let b = tree_forward(&s, v, &params).unwrap();
        let c = couple_tree_maps(&b).value();
        for j in 1..=7 {
            let m = b.map(j).value();
            for q in 0..2 {
                assert_eq!(
                    c.index_axis(ndarray::Axis(1), (j - 1) * 2 + q),
                    m.index_axis(ndarray::Axis(1), q)
                );
            }
        }
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax([0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(std::iter::empty()), 0);
    }
}
