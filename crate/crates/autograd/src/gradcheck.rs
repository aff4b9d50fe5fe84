//! Central finite-difference verification of reverse-mode gradients.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Session, Trainable};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self
    }
}

/// Relative error with a denominator floor, so entries whose true gradient
/// is zero are judged on an absolute scale tied to the loss magnitude.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(store: &ParamStore, f: &dyn for<'g, 's> Fn(&Session<'g, 's>) -> Var<'g>) -> f64 {
    let graph = Graph::new();
    let session = Session::new(&graph, store).with_trainable(Trainable::Nothing);
    f(&session).item()
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences for every element of the parameters in `ids`.
///
/// `f` must be deterministic: it is re-run twice per checked element.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    f: impl for<'g, 's> Fn(&Session<'g, 's>) -> Var<'g>,
) -> GradCheckReport {
    let (loss0, analytic) = {
        let graph = Graph::new();
        let session = Session::new(&graph, store).with_trainable(Trainable::Ids(ids.to_vec()));
        let loss = f(&session);
        let grads = graph.backward(loss);
        // Bind every requested id so untouched params report zero gradients.
        for &id in ids {
            session.param(id);
        }
        let all = session.param_grads(&grads);
        let picked: Vec<_> = ids
            .iter()
            .map(|id| {
                let g = all.iter().find(|(p, _)| p == id).map(|(_, g)| g).unwrap();
                // element i below is the i-th in logical order on both sides
                g.as_standard_layout().into_owned()
            })
            .collect();
        (loss.item(), picked)
    };
    let floor = 1e-6 * loss0.abs().max(1.0);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        if !store.get(id).is_standard_layout() {
            let owned = store.get(id).as_standard_layout().into_owned();
            *store.get_mut(id) = owned;
        }
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).as_slice_memory_order().unwrap()[i];
            store.get_mut(id).as_slice_memory_order_mut().unwrap()[i] = orig + eps;
            let plus = eval(store, &f);
            store.get_mut(id).as_slice_memory_order_mut().unwrap()[i] = orig - eps;
            let minus = eval(store, &f);
            store.get_mut(id).as_slice_memory_order_mut().unwrap()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice_memory_order().unwrap()[i];
            let rel = relative_error(a, numeric, floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradCheckEntry {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
