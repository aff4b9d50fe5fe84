//! Deblurring branch: a residual encoder/decoder generator that takes the
//! tree maps at its last convolution block, a patch critic trained with a
//! Wasserstein gradient penalty, and a fixed-feature content loss.

use std::fs;
use std::path::Path;

use rand::Rng;
use s3e_autograd::{concat, init, ConvGeometry, ParamStore, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{dropout, Conv, ConvTranspose, FusionConv, FusionForm};

const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channels after the first 7×7 block; the encoder doubles them twice.
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Channels `c''` of the last block's feature map `H_L`.
    pub coupling_channels: usize,
    /// Channels of the concatenated tree maps (`7·c'`).
    pub tree_channels: usize,
    pub dropout: f64,
    #[serde(default)]
    pub form: FusionForm,
}

struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

pub struct Generator {
    pub config: GeneratorConfig,
    head: Conv,
    down: [Conv; 2],
    blocks: Vec<ResBlock>,
    up: [ConvTranspose; 2],
    last: Conv,
    pub coupling: FusionConv,
    pub output: Conv,
}

impl Generator {
    /// The output convolution starts at zero, so a fresh generator is the
    /// identity map.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: GeneratorConfig, rng: &mut R) -> Self {
        let n = config.base_channels;
        let p = |s: &str| format!("{prefix}{s}");
        let k3s2 = ConvGeometry::new(3, 2, 1);
        let k3 = ConvGeometry::new(3, 1, 1);
        let head = Conv::new(store, &p("head"), 3, n, ConvGeometry::new(7, 1, 3), false, rng);
        let down = [
            Conv::new(store, &p("down1"), n, 2 * n, k3s2, false, rng),
            Conv::new(store, &p("down2"), 2 * n, 4 * n, k3s2, false, rng),
        ];
        let blocks = (0..config.residual_blocks)
            .map(|i| ResBlock {
                conv1: Conv::new(store, &p(&format!("res{i}.conv1")), 4 * n, 4 * n, k3, false, rng),
                conv2: Conv::new(store, &p(&format!("res{i}.conv2")), 4 * n, 4 * n, k3, false, rng),
            })
            .collect();
        let up = [
            ConvTranspose::new(store, &p("up1"), 4 * n, 2 * n, rng),
            ConvTranspose::new(store, &p("up2"), 4 * n, n, rng),
        ];
        let last = Conv::new(store, &p("last"), 2 * n, config.coupling_channels, k3, false, rng);
        let coupling = FusionConv::new(
            store,
            &p("coupling"),
            config.tree_channels,
            config.coupling_channels,
            config.form,
            rng,
        );
        let output = Conv::new(
            store,
            &p("output"),
            2 * config.coupling_channels,
            3,
            ConvGeometry::new(7, 1, 3),
            true,
            rng,
        );
        store.get_mut(output.weight).fill(0.0);
        Self {
            config,
            head,
            down,
            blocks,
            up,
            last,
            coupling,
            output,
        }
    }
}

fn block<'g>(x: Var<'g>) -> Var<'g> {
    x.instance_norm(IN_EPS).relu()
}

/// Restores `blurry: [n, 3, H, W]` given `coupled: [n, 7c', h', w']`.
/// `H` and `W` must be multiples of 4. Pass zeros for `coupled` to run
/// without tree guidance.
pub fn generator_forward<'g>(
    s: &Session<'g, '_>,
    gen: &Generator,
    blurry: Var<'g>,
    coupled: Var<'g>,
) -> Result<Var<'g>> {
    let shape = blurry.shape();
    let [_, c, h, w] = <[usize; 4]>::try_from(shape.as_slice())
        .map_err(|_| shape_err!("generator input must be [n, 3, H, W], got {shape:?}"))?;
    if c != 3 {
        return Err(shape_err!("generator input has {c} channels, expected 3"));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("generator input {h}×{w} is not a positive multiple of 4"));
    }
    let rate = gen.config.dropout;
    let e0 = block(gen.head.forward(s, blurry));
    let e1 = block(gen.down[0].forward(s, e0));
    let mut r = block(gen.down[1].forward(s, e1));
    for b in &gen.blocks {
        let inner = dropout(s, block(b.conv1.forward(s, r)), rate);
        r = r.add(b.conv2.forward(s, inner).instance_norm(IN_EPS));
    }
    let u1 = concat(&[block(gen.up[0].forward(s, r, (h / 2, w / 2))), e1], 1);
    let u2 = concat(&[block(gen.up[1].forward(s, u1, (h, w))), e0], 1);
    let h_l = block(gen.last.forward(s, u2));
    let fused = couple_into_layer(s, h_l, coupled, &gen.coupling)?;
    let residual = gen.output.forward(s, fused).tanh();
    Ok(blurry.add(residual).clamp(0.0, 1.0))
}

/// Resizes `coupled` to the spatial size of `h_l`, maps it to `c''`
/// channels with `bank`, and appends it to `h_l`: `[n, 2c'', h_L, w_L]`.
pub fn couple_into_layer<'g>(
    s: &Session<'g, '_>,
    h_l: Var<'g>,
    coupled: Var<'g>,
    bank: &FusionConv,
) -> Result<Var<'g>> {
    let (hs, cs) = (h_l.shape(), coupled.shape());
    if hs.len() != 4 || cs.len() != 4 || hs[0] != cs[0] {
        return Err(shape_err!("coupling operands {hs:?} and {cs:?} are incompatible"));
    }
    if cs[1] != bank.cin {
        return Err(shape_err!(
            "coupling bank expects {} channels, tree maps have {}",
            bank.cin,
            cs[1]
        ));
    }
    if hs[1] != bank.cout {
        return Err(shape_err!(
            "layer has {} channels, coupling produces {}",
            hs[1],
            bank.cout
        ));
    }
    let resized = coupled.resize_bilinear(hs[2], hs[3]);
    Ok(concat(&[h_l, bank.forward(s, resized)], 1))
}

/// A critic `D` mapping each image of a batch to a real score.
pub trait Critic {
    /// Per-sample scores, `[n]`.
    fn score<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g>;

    /// `∂ score_i / ∂ x_i` for every sample, built from differentiable ops
    /// so that penalties on it can be differentiated w.r.t. the critic's
    /// parameters.
    fn input_gradient<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub layers: usize,
    pub slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            layers: 4,
            slope: 0.2,
        }
    }
}

/// Stack of stride-2 convolutions with leaky rectifiers and no
/// normalization; the last layer emits one channel of patch scores whose
/// mean is the image score.
pub struct PatchCritic {
    pub config: CriticConfig,
    pub convs: Vec<Conv>,
}

impl PatchCritic {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: CriticConfig, rng: &mut R) -> Self {
        let geo = ConvGeometry::new(3, 2, 1);
        let mut convs = Vec::with_capacity(config.layers);
        let mut cin = 3;
        for l in 0..config.layers {
            let cout = if l + 1 == config.layers {
                1
            } else {
                config.base_channels << l
            };
            convs.push(Conv::new(store, &format!("{prefix}conv{l}"), cin, cout, geo, true, rng));
            cin = cout;
        }
        Self { config, convs }
    }

    /// Pre-activations of every layer.
    fn pre_activations<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut zs = Vec::with_capacity(self.convs.len());
        let mut a = x;
        for (l, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(s, a);
            zs.push(z);
            if l + 1 < self.convs.len() {
                a = z.leaky_relu(self.config.slope);
            }
        }
        zs
    }
}

impl Critic for PatchCritic {
    fn score<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        let z = *self.pre_activations(s, x).last().unwrap();
        z.mean_axis(3).mean_axis(2).mean_axis(1)
    }

    fn input_gradient<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        let zs = self.pre_activations(s, x);
        let out = zs.last().unwrap().shape();
        let per_sample: usize = out[1..].iter().product();
        let mut g = s.constant(Tensor::from_elem(out, 1.0 / per_sample as f64));
        for l in (0..self.convs.len()).rev() {
            let conv = &self.convs[l];
            let below = if l == 0 { x.shape() } else { zs[l - 1].shape() };
            g = g.conv_transpose2d(s.param(conv.weight), None, conv.geo, (below[2], below[3]));
            if l > 0 {
                let slope = self.config.slope;
                let mask = zs[l - 1].value().mapv(|z| if z > 0.0 { 1.0 } else { slope });
                g = g.mul_const(&mask);
            }
        }
        g
    }
}

/// `D(x) = scale · Σ x` per sample; its input gradient is the constant
/// `scale` everywhere.
pub struct LinearCritic {
    pub scale: s3e_autograd::ParamId,
}

impl LinearCritic {
    pub fn new(store: &mut ParamStore, name: &str, scale: f64) -> Self {
        Self {
            scale: store.insert(name, Tensor::from_elem(vec![1], scale)),
        }
    }
}

impl Critic for LinearCritic {
    fn score<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        let n = x.shape()[0];
        let per = x.value().len() / n.max(1);
        x.reshape(&[n, per]).sum_axis(1).mul(s.param(self.scale))
    }

    fn input_gradient<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        s.constant(Tensor::ones(x.shape())).mul(s.param(self.scale))
    }
}

/// Mean critic score over the batch.
pub fn critic_score<'g>(s: &Session<'g, '_>, critic: &dyn Critic, x: Var<'g>) -> Var<'g> {
    critic.score(s, x).mean()
}

pub struct CriticLoss<'g> {
    pub total: Var<'g>,
    pub wasserstein: Var<'g>,
    pub penalty: Var<'g>,
}

/// `mean D(fake) − mean D(real) + gp_weight · mean((‖∇D(x̂)‖ − 1)²)` with
/// `x̂ = ε·real + (1−ε)·fake`, one `ε` per sample from `mix`.
pub fn critic_wgan_gp_loss<'g>(
    s: &Session<'g, '_>,
    critic: &dyn Critic,
    real: Var<'g>,
    fake: Var<'g>,
    gp_weight: f64,
    mix: &[f64],
) -> Result<CriticLoss<'g>> {
    let (rs, fs) = (real.shape(), fake.shape());
    if rs != fs {
        return Err(shape_err!("real batch {rs:?} and fake batch {fs:?} differ"));
    }
    let n = rs[0];
    if mix.len() != n {
        return Err(shape_err!("{} mixing weights for a batch of {n}", mix.len()));
    }
    let wasserstein = critic_score(s, critic, fake).sub(critic_score(s, critic, real));
    let mut eps_shape = vec![n];
    eps_shape.extend(std::iter::repeat_n(1, rs.len() - 1));
    let eps = Tensor::from_shape_vec(eps_shape, mix.to_vec()).unwrap();
    let one_minus = eps.mapv(|e| 1.0 - e);
    let xhat = real.mul_const(&eps).add(fake.mul_const(&one_minus)).detach();
    let g = critic.input_gradient(s, xhat);
    let per: usize = rs[1..].iter().product();
    let norm = g.reshape(&[n, per]).square().sum_axis(1).add_scalar(1e-12).sqrt();
    let penalty = norm.add_scalar(-1.0).square().mean().scale(gp_weight);
    Ok(CriticLoss {
        total: wasserstein.add(penalty),
        wasserstein,
        penalty,
    })
}

/// `−mean D(fake)`.
pub fn generator_gan_loss<'g>(s: &Session<'g, '_>, critic: &dyn Critic, fake: Var<'g>) -> Var<'g> {
    critic_score(s, critic, fake).neg()
}

/// `L_GAN + λ · L_X`.
pub fn imd_loss<'g>(gan: Var<'g>, content: Var<'g>, lambda: f64) -> Var<'g> {
    gan.add(content.scale(lambda))
}

/// Fixed feature network for the content loss.
pub enum PerceptualExtractor {
    Identity,
    /// 3×3 stride-1 convolutions, each followed by a rectifier.
    Convs(Vec<Conv>),
}

#[derive(Deserialize)]
struct ExportedLayer {
    weight: Vec<f64>,
    shape: [usize; 4],
    bias: Vec<f64>,
}

impl PerceptualExtractor {
    /// Seeded random two-layer stack `3 → width → width`, frozen.
    pub fn random<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        let geo = ConvGeometry::new(3, 1, 1);
        let convs = vec![
            Conv::new(store, &format!("{prefix}conv0"), 3, width, geo, true, rng),
            Conv::new(store, &format!("{prefix}conv1"), width, width, geo, true, rng),
        ];
        store.freeze_prefix(prefix, true);
        Self::Convs(convs)
    }

    /// Loads exported layers from JSON
    /// (`{"layers": [{"weight": [...], "shape": [o, i, 3, 3], "bias": [...]}]}`).
    pub fn load(store: &mut ParamStore, prefix: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            layers: Vec<ExportedLayer>,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: File = serde_json::from_str(&text)?;
        let geo = ConvGeometry::new(3, 1, 1);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, layer) in file.layers.into_iter().enumerate() {
            let [o, ci, kh, kw] = layer.shape;
            if ci != cin || kh != 3 || kw != 3 || layer.bias.len() != o {
                return Err(shape_err!("perceptual layer {i} has shape {:?}", layer.shape));
            }
            let weight = Tensor::from_shape_vec(layer.shape.to_vec(), layer.weight)
                .map_err(|e| shape_err!("perceptual layer {i}: {e}"))?;
            let w = store.insert(format!("{prefix}conv{i}.weight"), weight);
            let b = store.insert(
                format!("{prefix}conv{i}.bias"),
                Tensor::from_shape_vec(vec![o], layer.bias).unwrap(),
            );
            convs.push(Conv {
                weight: w,
                bias: Some(b),
                geo,
            });
            cin = o;
        }
        store.freeze_prefix(prefix, true);
        Ok(Self::Convs(convs))
    }

    pub fn features<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        match self {
            Self::Identity => x,
            Self::Convs(convs) => convs.iter().fold(x, |a, c| c.forward(s, a).relu()),
        }
    }
}

/// `‖F(a) − F(b)‖² / (w_o·h_o)` per sample, averaged over the batch.
pub fn perceptual_loss<'g>(
    s: &Session<'g, '_>,
    sharp: Var<'g>,
    restored: Var<'g>,
    f: &PerceptualExtractor,
) -> Result<Var<'g>> {
    if sharp.shape() != restored.shape() {
        return Err(shape_err!(
            "content loss operands {:?} and {:?} differ",
            sharp.shape(),
            restored.shape()
        ));
    }
    let d = f.features(s, sharp).sub(f.features(s, restored));
    let shape = d.shape();
    let (n, ho, wo) = (shape[0], shape[2], shape[3]);
    Ok(d.square().sum().scale(1.0 / (n * ho * wo) as f64))
}

/// Zero tree maps for unguided runs: `[n, channels, 1, 1]`.
pub fn zero_coupling<'g>(s: &Session<'g, '_>, n: usize, channels: usize) -> Var<'g> {
    s.constant(init::zeros(&[n, channels, 1, 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use s3e_autograd::{Graph, Trainable};

    fn gen_config(tree_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            residual_blocks: 2,
            coupling_channels: 5,
            tree_channels,
            dropout: 0.0,
            form: FusionForm::Rectified,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fresh_generator_is_identity() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, "generator.", gen_config(14), &mut rng(0));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = init::uniform(&[2, 3, 16, 12], 0.0, 1.0, &mut rng(1));
        let coupled = s.constant(init::normal(&[2, 14, 2, 2], 1.0, &mut rng(2)));
        let y = generator_forward(&s, &gen, s.constant(x.clone()), coupled).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn output_shape_and_range() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, "g.", gen_config(14), &mut rng(0));
        store
            .get_mut(gen.output.weight)
            .assign(&init::normal(&[3, 10, 7, 7], 1.0, &mut rng(5)));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = s.constant(init::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(1)));
        let coupled = s.constant(init::normal(&[1, 14, 2, 2], 1.0, &mut rng(2)));
        let y = generator_forward(&s, &gen, x, coupled).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 8, 8]);
        assert!(y.value().iter().all(|v| (0.0..=1.0).contains(v)));
        let ablated = generator_forward(&s, &gen, x, zero_coupling(&s, 1, 14)).unwrap();
        assert_ne!(*ablated.value(), *y.value());
    }

    #[test]
    fn bad_generator_input_is_rejected() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, "g.", gen_config(14), &mut rng(0));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = s.constant(Tensor::zeros(vec![1, 3, 10, 8]));
        assert!(generator_forward(&s, &gen, x, zero_coupling(&s, 1, 14)).is_err());
        let x = s.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(generator_forward(&s, &gen, x, zero_coupling(&s, 1, 13)).is_err());
    }

    #[test]
    fn coupling_channel_algebra() {
        let mut store = ParamStore::new();
        let bank = FusionConv::new(&mut store, "k", 224, 64, FusionForm::Rectified, &mut rng(0));
        let g = Graph::new();
        let s = Session::new(&g, &store).with_trainable(Trainable::Nothing);
        let h_l = s.constant(init::normal(&[1, 64, 16, 16], 1.0, &mut rng(1)));
        let zero = s.constant(Tensor::zeros(vec![1, 224, 2, 2]));
        let out = couple_into_layer(&s, h_l, zero, &bank).unwrap();
        assert_eq!(out.shape(), vec![1, 128, 16, 16]);
        let v = out.value();
        assert_eq!(v.slice(ndarray::s![.., ..64, .., ..]).into_dyn(), h_l.value().view());
        assert!(v.slice(ndarray::s![.., 64.., .., ..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_critic_scores_zero() {
        let mut store = ParamStore::new();
        let critic = PatchCritic::new(&mut store, "critic.", CriticConfig::default(), &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = s.constant(init::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(1)));
        assert_eq!(critic_score(&s, &critic, x).item(), 0.0);
        assert_eq!(generator_gan_loss(&s, &critic, x).item(), 0.0);
    }

    #[test]
    fn patch_critic_distinguishes_images_and_is_affine_in_last_layer() {
        let mut store = ParamStore::new();
        let critic = PatchCritic::new(&mut store, "critic.", CriticConfig::default(), &mut rng(0));
        let a = init::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(1));
        let b = init::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(2));
        let score = |store: &ParamStore, x: &Tensor| {
            let g = Graph::new();
            let s = Session::new(&g, store);
            critic_score(&s, &critic, s.constant(x.clone())).item()
        };
        assert_ne!(score(&store, &a), score(&store, &b));
        let last = critic.convs.last().unwrap().weight;
        let base = score(&store, &a);
        store.get_mut(last).mapv_inplace(|w| 3.0 * w);
        // bias of the last layer is zero, so scaling its weights scales the score
        assert!((score(&store, &a) - 3.0 * base).abs() < 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn patch_critic_input_gradient_matches_tape() {
        let mut store = ParamStore::new();
        let critic = PatchCritic::new(&mut store, "critic.", CriticConfig::default(), &mut rng(3));
        for c in &critic.convs {
            let b = store.get_mut(c.bias.unwrap());
            let shape = b.shape().to_vec();
            b.assign(&init::normal(&shape, 0.1, &mut rng(4)));
        }
        let x = init::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(1));
        let g = Graph::new();
        let s = Session::new(&g, &store).with_trainable(Trainable::Nothing);
        let xv = g.leaf(x.clone());
        let tape = g.backward(critic.score(&s, xv).sum()).get(xv).unwrap().clone();
        let built = critic.input_gradient(&s, s.constant(x)).value();
        let err = (&tape - &*built).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(err < 1e-12, "max abs diff {err}");
    }

    #[test]
    fn linear_critic_penalty_oracle() {
        let mut store = ParamStore::new();
        let critic = LinearCritic::new(&mut store, "d", 1.0);
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let real = s.constant(init::uniform(&[3, 1, 2, 2], 0.0, 1.0, &mut rng(0)));
        let fake = s.constant(init::uniform(&[3, 1, 2, 2], 0.0, 1.0, &mut rng(1)));
        let loss = critic_wgan_gp_loss(&s, &critic, real, fake, 10.0, &[0.2, 0.5, 0.9]).unwrap();
        assert!((loss.penalty.item() - 10.0).abs() < 1e-5);
        let same = critic_wgan_gp_loss(&s, &critic, real, real, 0.0, &[0.2, 0.5, 0.9]).unwrap();
        assert_eq!(same.wasserstein.item(), 0.0);
        assert_eq!(same.total.item(), 0.0);
    }

    #[test]
    fn penalty_descent_moves_linear_critic_toward_unit_norm() {
        let mut store = ParamStore::new();
        let critic = LinearCritic::new(&mut store, "d", 1.0);
        let real = init::uniform(&[2, 1, 2, 2], 0.0, 1.0, &mut rng(0));
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let g = Graph::new();
            let s = Session::new(&g, &store);
            let r = s.constant(real.clone());
            let loss = critic_wgan_gp_loss(&s, &critic, r, r, 10.0, &[0.3, 0.6]).unwrap().total;
            let value = loss.item();
            assert!(value < last);
            last = value;
            let grads = s.param_grads(&g.backward(loss));
            let (id, grad) = &grads[0];
            let step = grad.mapv(|v| 0.01 * v);
            *store.get_mut(*id) -= &step;
        }
        assert!(last < 10.0);
    }

    #[test]
    fn perceptual_oracles() {
        let store = ParamStore::new();
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let a = s.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        let b = s.constant(Tensor::from_elem(vec![1, 1, 1, 1], 0.5));
        let id = PerceptualExtractor::Identity;
        assert_eq!(perceptual_loss(&s, a, b, &id).unwrap().item(), 0.25);
        assert_eq!(perceptual_loss(&s, b, b, &id).unwrap().item(), 0.0);
    }

    #[test]
    fn random_extractor_is_frozen_and_nonnegative() {
        let mut store = ParamStore::new();
        let f = PerceptualExtractor::random(&mut store, "perceptual.", 6, &mut rng(0));
        assert!(store.ids().all(|id| store.is_frozen(id)));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let a = s.constant(init::uniform(&[2, 3, 5, 5], 0.0, 1.0, &mut rng(1)));
        let b = s.constant(init::uniform(&[2, 3, 5, 5], 0.0, 1.0, &mut rng(2)));
        assert!(perceptual_loss(&s, a, b, &f).unwrap().item() > 0.0);
        assert!(!perceptual_loss(&s, a, b, &f).unwrap().requires_grad());
    }

    #[test]
    fn extractor_loads_exported_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let json = serde_json::json!({"layers": [
            {"weight": vec![0.1; 2 * 3 * 9], "shape": [2, 3, 3, 3], "bias": [0.0, 0.5]}
        ]});
        fs::write(&path, json.to_string()).unwrap();
        let mut store = ParamStore::new();
        let f = PerceptualExtractor::load(&mut store, "perceptual.", &path).unwrap();
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let x = s.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        assert_eq!(f.features(&s, x).shape(), vec![1, 2, 4, 4]);
        assert_eq!(f.features(&s, x).value()[[0, 1, 2, 2]], 0.5);
    }

    #[test]
    fn imd_is_linear_combination() {
        let g = Graph::new();
        let loss = imd_loss(g.scalar(-3.0), g.scalar(0.02), 100.0).item();
        assert!((loss - -1.0).abs() < 1e-12);
        assert_eq!(imd_loss(g.scalar(-3.0), g.scalar(0.02), 0.0).item(), -3.0);
    }
}
