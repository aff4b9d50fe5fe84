//! 2-D convolutions over `[batch, channel, height, width]` tensors.
//!
//! Everything is built from three kernels: the forward correlation, its
//! adjoint with respect to the input (which is the transposed convolution),
//! and its adjoint with respect to the weights. Each lowers to GEMM through
//! an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use crate::graph::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "degenerate convolution geometry");
        Self { kernel, stride, pad }
    }

    pub fn output_len(&self, input: usize) -> usize {
        let padded = input + 2 * self.pad;
        assert!(
            padded >= self.kernel,
            "input {input} too small for kernel {}",
            self.kernel
        );
        (padded - self.kernel) / self.stride + 1
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, ho: usize, wo: usize) -> Array2<f64> {
    let k = geo.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let buf = cols.as_slice_mut().unwrap();
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut buf[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, ho: usize, wo: usize, out: &mut [f64]) {
    let k = geo.kernel;
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix(w: &Tensor) -> ArrayView2<'_, f64> {
    let s = w.shape();
    let rows = s[0];
    let cols = s[1..].iter().product();
    ArrayView2::from_shape((rows, cols), w.as_slice().expect("weights must be contiguous")).unwrap()
}

/// Forward correlation. `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
pub fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geo: ConvGeometry) -> Tensor {
    let x = x.as_standard_layout();
    let w = w.as_standard_layout().into_owned();
    let [n, ci, h, wd] = dims4(x.shape());
    let [co, wci, kh, kw] = dims4(w.shape());
    assert_eq!(ci, wci, "conv: input has {ci} channels, kernel expects {wci}");
    assert!(kh == geo.kernel && kw == geo.kernel, "conv: kernel size mismatch");
    let (ho, wo) = (geo.output_len(h), geo.output_len(wd));
    let xs = x.as_slice().unwrap();
    let wm = weight_matrix(&w);
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        let cols = im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, geo, ho, wo);
        let dst = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
        let mut y = ndarray::ArrayViewMut2::from_shape((co, ho * wo), dst).unwrap();
        general_mat_mul(1.0, &wm, &cols, 0.0, &mut y);
        if let Some(b) = b {
            for (o, &bv) in b.iter().enumerate() {
                y.row_mut(o).mapv_inplace(|v| v + bv);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap()
}

/// Adjoint of [`conv_forward`] with respect to its input; this is also the
/// transposed convolution of `dy` by `w`.
pub fn conv_backward_input(dy: &Tensor, w: &Tensor, geo: ConvGeometry, h: usize, wd: usize) -> Tensor {
    let dy = dy.as_standard_layout();
    let w = w.as_standard_layout().into_owned();
    let [n, co, ho, wo] = dims4(dy.shape());
    let [wco, ci, _, _] = dims4(w.shape());
    assert_eq!(
        co, wco,
        "conv adjoint: gradient has {co} channels, kernel produces {wco}"
    );
    assert_eq!(
        (geo.output_len(h), geo.output_len(wd)),
        (ho, wo),
        "conv adjoint: inconsistent spatial size"
    );
    let k = geo.kernel;
    let wm = weight_matrix(&w);
    let dys = dy.as_slice().unwrap();
    let mut out = vec![0.0; n * ci * h * wd];
    let mut cols = Array2::<f64>::zeros((ci * k * k, ho * wo));
    for s in 0..n {
        let g = ArrayView2::from_shape((co, ho * wo), &dys[s * co * ho * wo..(s + 1) * co * ho * wo]).unwrap();
        general_mat_mul(1.0, &wm.t(), &g, 0.0, &mut cols);
        col2im_add(
            cols.as_slice().unwrap(),
            ci,
            h,
            wd,
            geo,
            ho,
            wo,
            &mut out[s * ci * h * wd..(s + 1) * ci * h * wd],
        );
    }
    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), out).unwrap()
}

/// Adjoint of [`conv_forward`] with respect to its weights.
pub fn conv_backward_weight(x: &Tensor, dy: &Tensor, geo: ConvGeometry) -> Tensor {
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let [n, ci, h, wd] = dims4(x.shape());
    let [dn, co, ho, wo] = dims4(dy.shape());
    assert_eq!(n, dn, "conv weight adjoint: batch mismatch");
    let k = geo.kernel;
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let mut dw = Array2::<f64>::zeros((co, ci * k * k));
    for s in 0..n {
        let cols = im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, geo, ho, wo);
        let g = ArrayView2::from_shape((co, ho * wo), &dys[s * co * ho * wo..(s + 1) * co * ho * wo]).unwrap();
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut dw);
    }
    dw.into_shape_with_order(IxDyn(&[co, ci, k, k])).unwrap()
}

fn bias_grad(g: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(g.shape());
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut db = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (s * c + ch) * h * w;
            *acc += gs[base..base + h * w].iter().sum::<f64>();
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap()
}

/// Per-input-channel rectified convolution, stride 1:
/// `y[q] = Σ_p relu(w[q, p] ⋆ x[p] + b[q, p])`.
pub fn rectified_conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let x = x.as_standard_layout();
    let [n, ci, h, wd] = dims4(x.shape());
    let [co, wci, k, _] = dims4(w.shape());
    assert_eq!(ci, wci, "rectified conv: input has {ci} channels, kernel expects {wci}");
    assert_eq!(b.shape(), &[co, ci], "rectified conv: bias must be [out, in]");
    let geo = ConvGeometry::new(k, 1, pad);
    let (ho, wo) = (geo.output_len(h), geo.output_len(wd));
    let banks = split_banks(w);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; n * co * ho * wo];
    let mut z = Array2::<f64>::zeros((co, ho * wo));
    for s in 0..n {
        let cols = im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, geo, ho, wo);
        let dst = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
        for (p, bank) in banks.iter().enumerate() {
            let cols_p = cols.slice(ndarray::s![p * k * k..(p + 1) * k * k, ..]);
            general_mat_mul(1.0, bank, &cols_p, 0.0, &mut z);
            for q in 0..co {
                let bias = b[[q, p]];
                let row = z.row(q);
                let d = &mut dst[q * ho * wo..(q + 1) * ho * wo];
                for (acc, &v) in d.iter_mut().zip(row.iter()) {
                    let pre = v + bias;
                    if pre > 0.0 {
                        *acc += pre;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap()
}

fn split_banks(w: &Tensor) -> Vec<Array2<f64>> {
    let [co, ci, k, _] = dims4(w.shape());
    (0..ci)
        .map(|p| Array2::from_shape_fn((co, k * k), |(q, t)| w[[q, p, t / k, t % k]]))
        .collect()
}

/// Returns `(dx, dw, db)` for [`rectified_conv_forward`]. Pre-activations are
/// recomputed rather than stored.
fn rectified_conv_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: usize,
    g: &Tensor,
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let x = x.as_standard_layout();
    let g = g.as_standard_layout();
    let [n, ci, h, wd] = dims4(x.shape());
    let [co, _, k, _] = dims4(w.shape());
    let geo = ConvGeometry::new(k, 1, pad);
    let (ho, wo) = (geo.output_len(h), geo.output_len(wd));
    let banks = split_banks(w);
    let xs = x.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut dx = needs[0].then(|| vec![0.0; n * ci * h * wd]);
    let mut dw = ArrayD::<f64>::zeros(IxDyn(&[co, ci, k, k]));
    let mut db = Array2::<f64>::zeros((co, ci));
    let mut z = Array2::<f64>::zeros((co, ho * wo));
    let mut dcols = Array2::<f64>::zeros((ci * k * k, ho * wo));
    let mut dwp = Array2::<f64>::zeros((co, k * k));
    for s in 0..n {
        let cols = im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, geo, ho, wo);
        let gsamp = ArrayView2::from_shape((co, ho * wo), &gs[s * co * ho * wo..(s + 1) * co * ho * wo]).unwrap();
        for (p, bank) in banks.iter().enumerate() {
            let cols_p = cols.slice(ndarray::s![p * k * k..(p + 1) * k * k, ..]);
            general_mat_mul(1.0, bank, &cols_p, 0.0, &mut z);
            // z becomes dL/dz in place
            for q in 0..co {
                let bias = b[[q, p]];
                let mut acc = 0.0;
                for (zv, &gv) in z.row_mut(q).iter_mut().zip(gsamp.row(q).iter()) {
                    *zv = if *zv + bias > 0.0 { gv } else { 0.0 };
                    acc += *zv;
                }
                db[[q, p]] += acc;
            }
            if needs[1] {
                general_mat_mul(1.0, &z, &cols_p.t(), 0.0, &mut dwp);
                for q in 0..co {
                    for t in 0..k * k {
                        dw[[q, p, t / k, t % k]] += dwp[[q, t]];
                    }
                }
            }
            if dx.is_some() {
                let mut dst = dcols.slice_mut(ndarray::s![p * k * k..(p + 1) * k * k, ..]);
                general_mat_mul(1.0, &bank.t(), &z, 0.0, &mut dst);
            }
        }
        if let Some(dx) = dx.as_mut() {
            col2im_add(
                dcols.as_slice().unwrap(),
                ci,
                h,
                wd,
                geo,
                ho,
                wo,
                &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd],
            );
        }
    }
    (
        dx.map(|d| ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), d).unwrap()),
        needs[1].then_some(dw),
        needs[2].then(|| db.into_dyn()),
    )
}

impl<'g> Var<'g> {
    /// Standard convolution (cross-correlation) with zero padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, geo: ConvGeometry) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let y = conv_forward(&x, &w, b.as_deref(), geo);
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.op(
            y,
            &parents,
            Box::new(move |g, needs| {
                let mut out = vec![
                    needs[0].then(|| conv_backward_input(g, &w, geo, h, wd)),
                    needs[1].then(|| conv_backward_weight(&x, g, geo)),
                ];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| bias_grad(g)));
                }
                out
            }),
        )
    }

    /// Transposed convolution. `weight: [in, out, k, k]`; the output spatial
    /// size must be given because strided convolutions lose it.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        geo: ConvGeometry,
        out_hw: (usize, usize),
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let mut y = conv_backward_input(&x, &w, geo, out_hw.0, out_hw.1);
        if let Some(b) = bias {
            let b = b.value();
            let [n, c, _, _] = dims4(y.shape());
            for s in 0..n {
                for ch in 0..c {
                    y.slice_mut(ndarray::s![s, ch, .., ..]).mapv_inplace(|v| v + b[ch]);
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.op(
            y,
            &parents,
            Box::new(move |g, needs| {
                let mut out = vec![
                    needs[0].then(|| conv_forward(g, &w, None, geo)),
                    needs[1].then(|| conv_backward_weight(g, &x, geo)),
                ];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| bias_grad(g)));
                }
                out
            }),
        )
    }

    /// Stride-1 convolution with the rectifier applied to every
    /// (input channel, output channel) response before the channel sum.
    /// `weight: [out, in, k, k]`, `bias: [out, in]`.
    pub fn rectified_conv2d(self, weight: Var<'g>, bias: Var<'g>, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let y = rectified_conv_forward(&x, &w, &b, pad);
        self.graph.op(
            y,
            &[self, weight, bias],
            Box::new(move |g, needs| {
                let (dx, dw, db) = rectified_conv_backward(&x, &w, &b, pad, g, needs);
                vec![dx, dw, db]
            }),
        )
    }
}
