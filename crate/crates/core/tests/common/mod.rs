//! Shared helpers for oracle and gradient-check suites.

use awlab_core::{ParamId, ParamStore, Tensor};

pub const FD_H: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central-difference gradient check for every scalar of the given
/// parameters. `loss_fn` must be a pure function of the store; `grads_fn`
/// returns the analytic gradients under test.
pub fn finite_diff_check<F, G>(store: &mut ParamStore, ids: &[ParamId], loss_fn: F, grads_fn: G)
where
    F: Fn(&ParamStore) -> f64,
    G: Fn(&ParamStore) -> Vec<(ParamId, Tensor)>,
{
    let all = grads_fn(store);
    for &id in ids {
        let g = all
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_H;
            let up = loss_fn(store);
            store.value_mut(id).data_mut()[i] = orig - FD_H;
            let down = loss_fn(store);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_H);
            let ad = g.data()[i];
            let denom = ad.abs().max(fd.abs()).max(1.0);
            assert!(
                (ad - fd).abs() <= FD_REL_TOL * denom,
                "grad mismatch for {} [{i}]: analytic {ad}, finite-diff {fd}",
                store.name(id)
            );
        }
    }
}
