//! Elementwise, broadcasting, reduction, and shape operations.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::graph::{Tensor, Var};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    assert_eq!(g.shape(), shape, "cannot reduce gradient to target shape");
    g
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    fn unary(self, value: Tensor, dfdx: impl Fn(&Tensor, &Tensor) -> Tensor + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(value);
        let y_keep = Rc::clone(&y);
        self.graph.op(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| vec![Some(g * &dfdx(&x, &y_keep))]),
        )
    }

    pub fn relu(self) -> Var<'g> {
        let y = self.value().mapv(|v| v.max(0.0));
        self.unary(y, |x, _| x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let y = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(y, move |x, _| x.mapv(|v| if v > 0.0 { 1.0 } else { slope }))
    }

    pub fn tanh(self) -> Var<'g> {
        let y = self.value().mapv(f64::tanh);
        self.unary(y, |_, y| y.mapv(|v| 1.0 - v * v))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let y = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(y, |_, y| y.mapv(|v| v * (1.0 - v)))
    }

    pub fn exp(self) -> Var<'g> {
        let y = self.value().mapv(f64::exp);
        self.unary(y, |_, y| y.clone())
    }

    pub fn ln(self) -> Var<'g> {
        let y = self.value().mapv(f64::ln);
        self.unary(y, |x, _| x.mapv(|v| 1.0 / v))
    }

    pub fn sqrt(self) -> Var<'g> {
        let y = self.value().mapv(f64::sqrt);
        self.unary(y, |_, y| y.mapv(|v| 0.5 / v))
    }

    pub fn square(self) -> Var<'g> {
        let y = self.value().mapv(|v| v * v);
        self.unary(y, |x, _| x.mapv(|v| 2.0 * v))
    }

    /// Clamps into `[lo, hi]`; the gradient passes through inside the
    /// closed interval and is zero outside it.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let y = self.value().mapv(|v| v.clamp(lo, hi));
        self.unary(y, move |x, _| {
            x.mapv(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 })
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let y = &*self.value() * c;
        self.graph.op(y, &[self], Box::new(move |g, _| vec![Some(g * c)]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let y = &*self.value() + c;
        self.graph.op(y, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// Multiplies by a constant tensor (broadcast), e.g. a dropout mask.
    pub fn mul_const(self, mask: &Tensor) -> Var<'g> {
        let shape = self.shape();
        let mask = Rc::new(mask.clone());
        let y = &*self.value() * &*mask;
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(reduce_to_shape(&(g * &*mask), &shape))]),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let y = &*self.value() + &*other.value();
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let y = &*self.value() - &*other.value();
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(&(-g), &sb)),
                ]
            }),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let y = &*a * &*b;
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(&(g * &*b), a.shape())),
                    needs[1].then(|| reduce_to_shape(&(g * &*a), b.shape())),
                ]
            }),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let shape = self.shape();
        let y = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), s))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let shape = self.shape();
        let y = self.value().sum_axis(Axis(axis));
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let full = expanded
                    .broadcast(IxDyn(&shape))
                    .expect("broadcast back over summed axis")
                    .to_owned();
                vec![Some(full)]
            }),
        )
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let old = self.shape();
        let y = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let g = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let shape = self.shape();
        let y = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// Plain matrix product of two rank-2 variables.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = as2(&self.value());
        let b = as2(&other.value());
        let y = a.dot(&b).into_dyn();
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                let g = as2(g);
                vec![
                    needs[0].then(|| g.dot(&b.t()).into_dyn()),
                    needs[1].then(|| a.t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let x = as2(&self.value());
        let w = as2(&weight.value());
        let b = bias.value();
        let mut y = x.dot(&w.t());
        y += &b
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias must be rank 1");
        self.graph.op(
            y.into_dyn(),
            &[self, weight, bias],
            Box::new(move |g, needs| {
                let g = as2(g);
                vec![
                    needs[0].then(|| g.dot(&w).into_dyn()),
                    needs[1].then(|| g.t().dot(&x).into_dyn()),
                    needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let y = Rc::new(softmax_last(&self.value()));
        let y_keep = Rc::clone(&y);
        self.graph.op(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let last = Axis(g.ndim() - 1);
                let dot = (g * &*y_keep).sum_axis(last).insert_axis(last);
                vec![Some(&*y_keep * &(g - &dot))]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let y = log_softmax_last(&x);
        let p = Rc::new(y.mapv(f64::exp));
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let last = Axis(g.ndim() - 1);
                let total = g.sum_axis(last).insert_axis(last);
                vec![Some(g - &(&*p * &total))]
            }),
        )
    }

    /// Selects `x[i, index[i]]` from a rank-2 variable, giving shape `[n]`.
    pub fn pick(self, index: &[usize]) -> Var<'g> {
        let x = as2(&self.value());
        assert_eq!(x.nrows(), index.len(), "pick: one index per row");
        let cols = x.ncols();
        let index = index.to_vec();
        let y: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "pick: index {c} out of range {cols}");
                x[[r, c]]
            })
            .collect();
        let rows = x.nrows();
        self.graph.op(
            ArrayD::from_shape_vec(IxDyn(&[rows]), y).unwrap(),
            &[self],
            Box::new(move |g, _| {
                let mut full = Array2::<f64>::zeros((rows, cols));
                for (r, &c) in index.iter().enumerate() {
                    full[[r, c]] = g[r];
                }
                vec![Some(full.into_dyn())]
            }),
        )
    }
}

/// Concatenation along `axis`.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let y = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    vars[0].graph.op(
        y,
        vars,
        Box::new(move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| g.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned());
                    start += len;
                    part
                })
                .collect()
        }),
    )
}

/// Stacks equally shaped variables along a new axis.
pub fn stack<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    let expanded: Vec<Var<'g>> = vars
        .iter()
        .map(|v| {
            let mut shape = v.shape();
            shape.insert(axis, 1);
            v.reshape(&shape)
        })
        .collect();
    concat(&expanded, axis)
}

pub(crate) fn as2(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
        .to_owned()
}

pub fn softmax_last(x: &Tensor) -> Tensor {
    log_softmax_last(x).mapv(f64::exp)
}

pub fn log_softmax_last(x: &Tensor) -> Tensor {
    let last = Axis(x.ndim() - 1);
    let max = x
        .map_axis(last, |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .insert_axis(last);
    let shifted = x - &max;
    let lse = shifted.mapv(f64::exp).sum_axis(last).mapv(f64::ln).insert_axis(last);
    shifted - lse
}
