//! Central finite-difference verification of analytic gradients.
//!
//! The check only uses forward evaluations of the loss under perturbed
//! parameters, so it is independent of the reverse-mode path it validates.

use crate::seed::rng;
use crate::tensor::{ParamStore, Tape, Var};
use rand::Rng;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences on `n_probes` randomly chosen trainable parameter entries.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    build: F,
    n_probes: usize,
    seed: u64,
    step: f64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, store);
    let node_grads = tape.backward(root);
    let grads = tape.param_grads(&node_grads, store.len());

    // Enumerate (param, flat index) positions over trainable tensors.
    let positions: Vec<(usize, usize)> = (0..store.len())
        .filter(|&i| store.is_trainable(crate::tensor::ParamId(i)))
        .flat_map(|i| {
            let len = store.value(crate::tensor::ParamId(i)).len();
            (0..len).map(move |j| (i, j))
        })
        .collect();
    assert!(!positions.is_empty(), "gradcheck: no trainable parameters");

    let mut r = rng(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..n_probes {
        let (pi, pj) = positions[r.gen_range(0..positions.len())];
        let id = crate::tensor::ParamId(pi);
        let theta = store.value(id).as_slice().unwrap()[pj];
        let h = step * (1.0 + theta.abs());

        store.value_mut(id).as_slice_mut().unwrap()[pj] = theta + h;
        let mut t_plus = Tape::new();
        let root_plus = build(&mut t_plus, store);
        let f_plus = t_plus.scalar_value(root_plus);

        store.value_mut(id).as_slice_mut().unwrap()[pj] = theta - h;
        let mut t_minus = Tape::new();
        let root_minus = build(&mut t_minus, store);
        let f_minus = t_minus.scalar_value(root_minus);

        store.value_mut(id).as_slice_mut().unwrap()[pj] = theta;

        let fd = (f_plus - f_minus) / (2.0 * h);
        let analytic = grads[pi]
            .as_ref()
            .map(|g| g.as_slice().unwrap()[pj])
            .unwrap_or(0.0);
        if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
            checked += 1;
            continue;
        }
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}

/// Helper used by loss gradchecks: also probes gradient w.r.t. an input
/// tensor registered in the store as a trainable parameter.
pub fn assert_gradcheck<F>(store: &mut ParamStore, build: F, n_probes: usize, seed: u64, tol: f64)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let report = gradcheck(store, build, n_probes, seed, 1e-5);
    assert!(
        report.max_rel_err < tol,
        "gradient check failed: max relative error {:.3e} over {} probes (tolerance {:.1e})",
        report.max_rel_err,
        report.checked,
        tol
    );
}
