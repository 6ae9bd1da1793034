//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs parameters one component at a time, replays a
//! caller-supplied forward pass, and compares the two-sided difference
//! quotient against what [`Graph::backward`] produced. It never inspects the
//! backward implementation, only loss values, so it stays an independent
//! oracle. Run it in f64: the f32 path shares all code with f64 apart from
//! the element type.

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Default step for the two-sided difference quotient.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error tolerance used across the verification suites.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Guarded relative error: `|a - n| / max(|a|, |n|, 1e-3)`. The floor keeps
/// finite-difference noise on near-zero gradients from registering as error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Outcome of a sweep over every checked parameter component.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks every parameter of `store` against central differences of the
/// loss produced by `forward`. Tensors larger than `max_per_tensor` are
/// sampled at evenly spaced components.
pub fn check_store_gradients<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    max_per_tensor: usize,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.clear_grads();
    let mut graph = Graph::new();
    let loss = forward(&mut graph, store)?;
    graph.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.tensor.grad.clone().expect("backward populates every grad"))
        .collect();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = forward(&mut graph, store)?;
        Ok(graph.value(loss)[0])
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        let len = store.get(id).tensor.len();
        for i in sample_indices(len, max_per_tensor) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[pi][i], numeric);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!(
                    "{}[{i}]: analytic {} vs finite-difference {}",
                    store.get(id).name(),
                    analytic[pi][i],
                    numeric
                );
            }
        }
    }
    Ok(report)
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_passes() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("x", Tensor::from_f64s(&[3], &[0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        let report = check_store_gradients(&mut store, DEFAULT_STEP, usize::MAX, |g, s| {
            let x = g.param(s, s.id_of("x").unwrap())?;
            let sq = g.mul(x, x)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn deliberately_broken_gradient_is_caught() {
        // scale's forward uses c=3 but we check against a loss using c=2:
        // the checker must flag the mismatch.
        let mut store = ParamStore::<f64>::new();
        store
            .add("x", Tensor::from_f64s(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();

        store.clear_grads();
        let mut g = Graph::new();
        let x = g.param(&store, store.id_of("x").unwrap()).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        let analytic = store.get(store.id_of("x").unwrap()).tensor.grad.clone().unwrap();

        // fd of the *different* function x -> sum(2x)
        let fd = 2.0;
        assert!(relative_error(analytic[0], fd) > DEFAULT_TOLERANCE);
    }

    #[test]
    fn sample_indices_cover_edges() {
        assert_eq!(sample_indices(3, 10), vec![0, 1, 2]);
        let s = sample_indices(100, 10);
        assert_eq!(s.len(), 10);
        assert_eq!(s[0], 0);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
