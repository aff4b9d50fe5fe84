//! Spatial operations on `[batch, channel, height, width]` tensors.

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Tensor, Var};

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a rank-4 tensor, got shape {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Interpolation taps along one axis with half-pixel centers and
/// clamp-to-edge: `(lower index, upper index, upper weight)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of every plane of `x` to `out_h × out_w`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = dims4(x.shape());
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, out_h, out_w]), out).unwrap()
}

fn bilinear_resize_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, out_h, out_w] = dims4(g.shape());
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &gs[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * out_w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

impl<'g> Var<'g> {
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let shape = self.shape();
        let [_, _, h, w] = dims4(&shape);
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let y = bilinear_resize(&self.value(), out_h, out_w);
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(bilinear_resize_adjoint(g, h, w))]),
        )
    }

    /// Mean over the two spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let shape = self.shape();
        dims4(&shape);
        self.mean_axis(3).mean_axis(2)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no
    /// affine part).
    pub fn instance_norm(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = dims4(x.shape());
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; n * c];
        for plane in 0..n * c {
            let src = &xs[plane * hw..(plane + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for (d, &v) in xhat[plane * hw..(plane + 1) * hw].iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), xhat).unwrap();
        let y_keep = y.clone();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ys = y_keep.as_slice().unwrap();
                let mut dx = vec![0.0; gs.len()];
                for plane in 0..n * c {
                    let gp = &gs[plane * hw..(plane + 1) * hw];
                    let yp = &ys[plane * hw..(plane + 1) * hw];
                    let mg = gp.iter().sum::<f64>() / hw as f64;
                    let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((d, &gv), &yv) in dx[plane * hw..(plane + 1) * hw].iter_mut().zip(gp).zip(yp) {
                        *d = inv_std[plane] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }
}
