//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Stop-gradient operands and ReLU activation patterns are recorded on the
//! analytic pass and held fixed while probing, so straight-through graphs
//! are checked against the surrogate their adjoints define and a probe that
//! crosses a ReLU kink still measures the branch being differentiated.

use super::tape::{ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Probe step; round-off at 1e-5 stays near 1e-11.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the element-wise relative error; gradients smaller
/// than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element (within the checked set).
    pub worst: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Compares an analytic gradient with central differences of `eval` around
/// `x`, checking the elements listed in `indices`.
pub fn compare_gradients(
    analytic: &[f64],
    x: &Tensor,
    indices: &[usize],
    step: f64,
    tol: f64,
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = x.clone();
    let mut worst = (0.0, 0);
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let e = rel_error(analytic[i], numeric);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked: indices.len(),
        tol,
        passed: worst.0 <= tol,
    })
}

/// Checks `d f(x) / dx` for a scalar-valued graph built by `f`.
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    let (analytic, frozen) = {
        let mut tape = Tape::new(&store);
        tape.record_stop_gradients();
        let xv = tape.input_with_grad(x.clone());
        let out = f(&mut tape, xv)?;
        let grads = tape.backward(out)?;
        let frozen = tape.take_stop_gradients();
        let g = grads
            .wrt(xv)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        (g, frozen)
    };
    let indices: Vec<usize> = (0..x.len()).collect();
    compare_gradients(&analytic, x, &indices, DEFAULT_STEP, tol, |probe| {
        let mut tape = Tape::new(&store);
        tape.replay_stop_gradients(frozen.clone());
        let xv = tape.input(probe.clone());
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    })
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks the gradient of every parameter in `store`. Parameters with more
/// than `max_per_param` entries are checked on an evenly strided subset.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    f: F,
    tol: f64,
    max_per_param: usize,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (analytic, frozen) = {
        let mut tape = Tape::new(store);
        tape.record_stop_gradients();
        let out = f(&mut tape)?;
        let grads = tape.backward(out)?.into_params();
        (grads, tape.take_stop_gradients())
    };
    let mut out = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let id = super::tape::ParamId(pi);
        let len = store.get(id).value.len();
        let grad = analytic
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let indices: Vec<usize> = if len <= max_per_param {
            (0..len).collect()
        } else {
            (0..max_per_param).map(|j| j * len / max_per_param).collect()
        };
        let x = store.get(id).value.clone();
        let report = compare_gradients(&grad, &x, &indices, DEFAULT_STEP, tol, |probe| {
            let saved = std::mem::replace(&mut store.get_mut(id).value, probe.clone());
            let value = {
                let mut tape = Tape::new(store);
                tape.replay_stop_gradients(frozen.clone());
                let out = f(&mut tape);
                out.map(|v| tape.value(v).item())
            };
            store.get_mut(id).value = saved;
            value
        })?;
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.scale(x, 3.5);
                Ok(t.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn sigmoid_of_sum_passes() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![0.1, -0.4, 0.2]).unwrap();
        let r = grad_check(
            |t, x| {
                let s = t.sum(x);
                Ok(t.sigmoid(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_next_to_its_kink_is_checked_on_the_active_branch() {
        // both entries sit closer to zero than the probe step
        let x = Tensor::new(&[2], vec![3e-6, -2e-6]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.relu(x);
                let y = t.scale(y, 2.0);
                Ok(t.sum(y))
            },
            &x,
            1e-10,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn sign_flipped_gradient_fails() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        // f = Σ x², true gradient 2x; supply -2x
        let wrong: Vec<f64> = x.data().iter().map(|v| -2.0 * v).collect();
        let r = compare_gradients(&wrong, &x, &[0, 1, 2], DEFAULT_STEP, 1e-4, |p| {
            Ok(p.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 2.0).abs() < 1e-6);
    }
}
