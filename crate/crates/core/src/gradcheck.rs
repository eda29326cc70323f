//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tensors larger than this are checked on a sampled subset of coordinates.
pub const MAX_COORDS_PER_PARAM: usize = 64;
/// Denominator floor of the relative error, so coordinates whose true
/// derivative is ~0 are judged by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub passed: bool,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(forward: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar loss, got {:?}",
            v.shape()
        )));
    }
    let value = v.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient check aborted: loss evaluated to {value}"
        )));
    }
    Ok(value)
}

/// Compares backprop gradients against `(f(θ+h) − f(θ−h)) / 2h` on every
/// coordinate of small tensors and on a seeded sample of 64 coordinates of
/// larger ones. `params` is restored on return; its gradients are cleared.
pub fn check_gradients<F>(
    forward: F,
    params: &mut ParamStore,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    {
        let mut g = Graph::new();
        let loss = forward(&mut g, params)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite(
                "gradient check aborted: loss is not finite".into(),
            ));
        }
        g.backward(loss, params)?;
    }
    let analytic: Vec<_> = params.entries().iter().map(|e| e.grad.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for id in 0..params.entries().len() {
        let n = params.entry(id).value.len();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_PARAM {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MAX_COORDS_PER_PARAM).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let original = params.entry(id).value.data()[c];
            params.entry_mut(id).value.data_mut()[c] = original + FD_STEP;
            let plus = eval_loss(&forward, params);
            params.entry_mut(id).value.data_mut()[c] = original - FD_STEP;
            let minus = eval_loss(&forward, params);
            params.entry_mut(id).value.data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[id].data()[c], numeric));
        }
        checks.push(ParamCheck {
            name: params.entry(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    params.zero_grads();
    let passed = checks.iter().all(|c| c.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        params: checks,
        passed,
        tolerance,
        step: FD_STEP,
    })
}
