//! Shared finite-difference harness for the gradient suite. Central
//! differences with step 1e-4 at 64-bit, relative tolerance 1e-3.

// each integration test target compiles its own copy and uses a subset
#![allow(dead_code)]

use corrseg::nn::{collect_params, collect_params_mut, Params};
use ndarray::Array5;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Gradients with both analytic and numeric magnitude below this floor are
/// under the finite-difference noise level and auto-pass.
pub const ABS_FLOOR: f64 = 1e-7;
/// Instance norm centers preactivations at zero, so the 1e-4 step sometimes
/// straddles a LeakyReLU kink. A real gradient bug disagrees at every step;
/// a kink artifact converges, so failures at the primary step must pass at
/// these refinement steps instead.
pub const REFINE_STEPS: [f64; 2] = [1e-5, 1e-6];

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(ABS_FLOOR)
}

/// Deterministically spread `want` sample indices over `len` elements.
pub fn sample_indices(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        (0..len).collect()
    } else {
        (0..want).map(|k| k * len / want).collect()
    }
}

fn param_get<M: Params<f64>>(m: &M, tensor: usize, idx: usize) -> f64 {
    let params = collect_params(m);
    *params[tensor].1.iter().nth(idx).unwrap()
}

fn param_set<M: Params<f64>>(m: &mut M, tensor: usize, idx: usize, value: f64) {
    let mut params = collect_params_mut(m);
    *params[tensor].1.iter_mut().nth(idx).unwrap() = value;
}

pub struct CheckOutcome {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compare analytic parameter gradients against central differences of
/// `loss`, sampling up to `per_tensor` elements of every parameter tensor.
/// Panics (with context) on the first violation.
pub fn check_param_grads<M, F>(
    label: &str,
    module: &M,
    analytic: &M,
    per_tensor: usize,
    loss: F,
) -> CheckOutcome
where
    M: Params<f64> + Clone,
    F: Fn(&M) -> f64,
{
    let names: Vec<String> = collect_params(module)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut work = module.clone();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let len = collect_params(module)[ti].1.len();
        for j in sample_indices(len, per_tensor) {
            let orig = param_get(module, ti, j);
            let an = param_get(analytic, ti, j);
            let fd_at = |work: &mut M, h: f64| -> f64 {
                param_set(work, ti, j, orig + h);
                let lp = loss(work);
                param_set(work, ti, j, orig - h);
                let lm = loss(work);
                param_set(work, ti, j, orig);
                (lp - lm) / (2.0 * h)
            };
            let fd = fd_at(&mut work, FD_STEP);
            checked += 1;
            if an.abs() < ABS_FLOOR && fd.abs() < ABS_FLOOR {
                continue;
            }
            let mut re = rel_err(an, fd);
            if re > REL_TOL {
                for h in REFINE_STEPS {
                    re = re.min(rel_err(an, fd_at(&mut work, h)));
                }
            }
            assert!(
                re <= REL_TOL,
                "{label}: {name}[{j}] analytic {an:.8e} vs fd {fd:.8e} (rel {re:.3e}, refined)"
            );
            if re > max_rel {
                max_rel = re;
            }
        }
    }
    CheckOutcome { checked, max_rel }
}

/// Same as [`check_param_grads`] but for a gradient with respect to an input
/// feature map.
pub fn check_input_grads<F>(
    label: &str,
    x: &Array5<f64>,
    analytic_dx: &Array5<f64>,
    per_tensor: usize,
    loss: F,
) -> CheckOutcome
where
    F: Fn(&Array5<f64>) -> f64,
{
    let mut work = x.clone();
    let flat_len = x.len();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for j in sample_indices(flat_len, per_tensor) {
        let orig = *x.iter().nth(j).unwrap();
        let an = *analytic_dx.iter().nth(j).unwrap();
        let mut fd_at = |h: f64| -> f64 {
            *work.iter_mut().nth(j).unwrap() = orig + h;
            let lp = loss(&work);
            *work.iter_mut().nth(j).unwrap() = orig - h;
            let lm = loss(&work);
            *work.iter_mut().nth(j).unwrap() = orig;
            (lp - lm) / (2.0 * h)
        };
        let fd = fd_at(FD_STEP);
        checked += 1;
        if an.abs() < ABS_FLOOR && fd.abs() < ABS_FLOOR {
            continue;
        }
        let mut re = rel_err(an, fd);
        if re > REL_TOL {
            for h in REFINE_STEPS {
                re = re.min(rel_err(an, fd_at(h)));
            }
        }
        assert!(
            re <= REL_TOL,
            "{label}: input[{j}] analytic {an:.8e} vs fd {fd:.8e} (rel {re:.3e}, refined)"
        );
        if re > max_rel {
            max_rel = re;
        }
    }
    CheckOutcome { checked, max_rel }
}

/// Fixed random probe so scalar losses exercise every output element.
pub fn probe_like(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn weighted_sum(y: &Array5<f64>, probe: &Array5<f64>) -> f64 {
    y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
}
