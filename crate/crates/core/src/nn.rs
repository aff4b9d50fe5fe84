//! Parameterized layers shared by the networks. Each layer owns only
//! [`ParamId`]s into a [`ParamStore`]; forward passes bind them through a
//! [`Session`].

use rand::Rng;
use s3e_autograd::{init, ConvGeometry, ParamId, ParamStore, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
}

impl Conv {
    /// Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geo: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geo.kernel;
        let weight = store.insert(
            format!("{name}.weight"),
            init::kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), init::zeros(&[cout])));
        Self { weight, bias, geo }
    }

    pub fn forward<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv2d(s.param(self.weight), self.bias.map(|b| s.param(b)), self.geo)
    }
}

/// Transposed convolution that doubles spatial size (`k3 s2 p1`, output
/// size fixed explicitly).
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geo: ConvGeometry,
}

impl ConvTranspose {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let geo = ConvGeometry::new(3, 2, 1);
        let weight = store.insert(
            format!("{name}.weight"),
            init::kaiming_uniform(&[cin, cout, 3, 3], cin * 9, rng),
        );
        let bias = store.insert(format!("{name}.bias"), init::zeros(&[cout]));
        Self { weight, bias, geo }
    }

    pub fn forward<'g>(&self, s: &Session<'g, '_>, x: Var<'g>, out_hw: (usize, usize)) -> Var<'g> {
        x.conv_transpose2d(s.param(self.weight), Some(s.param(self.bias)), self.geo, out_hw)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fin.max(1) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            init::uniform(&[fout, fin], -bound, bound, rng),
        );
        let bias = store.insert(format!("{name}.bias"), init::zeros(&[fout]));
        Self { weight, bias }
    }

    /// `x: [n, fin] -> [n, fout]`.
    pub fn forward<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.linear(s.param(self.weight), s.param(self.bias))
    }
}

/// How multi-channel inputs are fused by the tree and coupling convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionForm {
    /// Rectifier on every per-input-channel response, then summed.
    #[default]
    Rectified,
    /// Ordinary convolution over all inputs, then one rectifier.
    Standard,
}

/// 3×3, stride-1, pad-1 convolution followed by a rectifier in one of the
/// two [`FusionForm`]s. Output spatial size equals input size.
#[derive(Clone, Debug)]
pub struct FusionConv {
    pub form: FusionForm,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl FusionConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        form: FusionForm,
        rng: &mut R,
    ) -> Self {
        // The rectified form sums `cin` non-negative responses whose means add
        // up, so the fan-in grows quadratically to keep outputs at unit scale.
        let fan_in = match form {
            FusionForm::Rectified => 9 * cin * cin.div_ceil(3),
            FusionForm::Standard => 9 * cin,
        };
        let weight = store.insert(
            format!("{name}.weight"),
            init::kaiming_uniform(&[cout, cin, 3, 3], fan_in, rng),
        );
        let bias_shape: &[usize] = match form {
            FusionForm::Rectified => &[cout, cin],
            FusionForm::Standard => &[cout],
        };
        let bias = store.insert(format!("{name}.bias"), init::zeros(bias_shape));
        Self {
            form,
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        match self.form {
            FusionForm::Rectified => x.rectified_conv2d(w, b, 1),
            FusionForm::Standard => x.conv2d(w, Some(b), ConvGeometry::new(3, 1, 1)).relu(),
        }
    }
}

/// Inverted dropout drawing its mask from the session stream. Applied
/// whenever `rate > 0`, including at inference.
pub fn dropout<'g>(s: &Session<'g, '_>, x: Var<'g>, rate: f64) -> Var<'g> {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let mask: Tensor = s.uniform(&x.shape()).mapv(|u| if u < keep { 1.0 / keep } else { 0.0 });
    x.mul_const(&mask)
}
