//! Central-difference gradient checking.
//!
//! For each trainable parameter a seeded subsample of coordinates is
//! perturbed by `±eps`; the difference quotient is compared against the tape
//! gradient with
//! `rel = |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_param: 100,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Moves every parameter of `store` to a seeded generic point: weights
/// `N(0, 1/fan_in)`, norm gains `U(0.5, 1.5)`, other vectors `U(-0.5, 0.5)`.
///
/// At the small-std training init the gradients of deep parameters fall
/// below the resolution of a central difference; here they are O(1e-3) or
/// larger, so relative errors measure the derivative code rather than
/// round-off.
pub fn scatter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = match shape.len() {
            1 if p.name.ends_with(".g") => Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)),
            1 => Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5)),
            _ => {
                // linear weights are [in, out]; conv weights [out, in/groups, k, k]
                let fan_in = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let std = (1.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            }
        };
    }
}

fn evaluation_error(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Evaluation(format!("`{op}` produced a non-finite value")),
        other => other,
    }
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every trainable parameter in `store`.
///
/// `f` is recorded once. Each perturbed evaluation re-runs only the recorded
/// ops downstream of the perturbed parameter, so `f` must not branch on
/// parameter values.
pub fn grad_check<F>(f: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(Error::Config(format!(
            "gradient-check eps {} outside [1e-7, 1e-3]",
            cfg.eps
        )));
    }

    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let out = f(&mut tape, &bound).map_err(evaluation_error)?;
    let grads = tape.gradients(out)?;

    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let analytic = grads
            .param(&p.name)
            .ok_or_else(|| Error::Evaluation(format!("no gradient recorded for `{}`", p.name)))?;
        let numel = p.tensor.numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = rand::seq::index::sample(&mut rng, numel, cfg.samples_per_param).into_vec();
            idx.sort_unstable();
            idx
        };

        let leaf = bound[id];
        let downstream = tape.downstream(leaf, out);
        let mut check = ParamCheck {
            name: p.name.clone(),
            coords: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for &c in &coords {
            let orig = p.tensor.data()[c];
            let plus = tape
                .replay_perturbed(leaf, c, orig + cfg.eps, &downstream, out)
                .map_err(evaluation_error)?;
            let minus = tape
                .replay_perturbed(leaf, c, orig - cfg.eps, &downstream, out)
                .map_err(evaluation_error)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.data()[c];
            let rel = rel_err(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = c;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
