//! Monte Carlo estimators for the plain and Feynman-Kac weighted transition
//! semigroups, the Duhamel consistency check that ties them together,
//! coupling-based mixing diagnostics and the staged steering controller.

pub mod control;
pub mod coupling;

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

pub use control::{synthesize_control, ControlOptions, ControlPlan, PhaseReport};
pub use coupling::{mixing_estimate, spearman_rho, MixingCurve, MixingFit, MixingOptions};

use crate::dynamics::{step, DynamicsError, SimConfig};
use crate::field::{FieldError, GalerkinField};
use crate::noise::{CovarianceOperator, NoiseError, NoiseStream};
use crate::nonlinearity::{InteractionTable, NonlinearityError};

#[derive(Debug, Error)]
pub enum ErgodicityError {
    #[error("ensemble needs at least two replicas, got {0}")]
    TooFewReplicas(u64),
    #[error("all {0} replicas blew up")]
    AllBlowUps(u64),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Nonlinearity(#[from] NonlinearityError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tangent(#[from] crate::tangent::TangentError),
}

/// A real observable of the state together with its polynomial growth degree
/// (the `k` for which `|φ(x)|/(1+|Ax|^k)` stays bounded).
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    pub degree: u32,
    eval: Arc<dyn Fn(&GalerkinField) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observable({}, degree {})", self.name, self.degree)
    }
}

impl Observable {
    pub fn new(
        name: impl Into<String>,
        degree: u32,
        eval: impl Fn(&GalerkinField) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Observable {
            name: name.into(),
            degree,
            eval: Arc::new(eval),
        }
    }

    pub fn eval(&self, x: &GalerkinField) -> f64 {
        (self.eval)(x)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), 0, move |_| c)
    }

    /// `|x|²`
    pub fn energy() -> Self {
        Self::new("energy", 1, |x| x.energy())
    }

    /// `|Ax|²`
    pub fn enstrophy() -> Self {
        Self::new("enstrophy", 2, |x| x.enstrophy())
    }

    /// A bounded cylinder function of one coefficient: `tanh(x_{k,i}/scale)`.
    pub fn bounded_coefficient(k: crate::lattice::ModeIndex, component: usize, scale: f64) -> Self {
        Self::new(
            format!("tanh(x[{:?}][{component}]/{scale})", k.components()),
            0,
            move |x| {
                x.coeff_of(&k)
                    .map(|c| (c[component] / scale).tanh())
                    .unwrap_or(0.0)
            },
        )
    }
}

/// Shared ensemble parameters: the base run configuration (its `horizon` is
/// the evaluation time and `fk_coeff` the weight exponent) plus the replica
/// budget. Replica `r` of the ensemble uses counter stream `(seed, offset+r)`.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub base: SimConfig,
    pub replicas: u64,
    pub replica_offset: u64,
    /// drop blown-up replicas from the average (they are always counted)
    pub exclude_blowups: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub used: u64,
    pub blowups: u64,
}

fn reduce_mean(values: &[Option<f64>], exclude_blowups: bool, total: u64) -> Result<Estimate, ErgodicityError> {
    let blowups = values.iter().filter(|v| v.is_none()).count() as u64;
    if blowups > 0 && !exclude_blowups {
        return Err(ErgodicityError::AllBlowUps(blowups));
    }
    let kept: Vec<f64> = values.iter().flatten().cloned().collect();
    if kept.is_empty() {
        return Err(ErgodicityError::AllBlowUps(total));
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(Estimate {
        mean,
        stderr: (var / n).sqrt(),
        used: kept.len() as u64,
        blowups,
    })
}

/// Ensemble mean of `φ(X(t))·E_K(t)`: estimates `P_t φ` for `K = 0` and the
/// weighted semigroup `S_t φ` for `K > 0`.
pub fn semigroup_estimate(
    table: &InteractionTable,
    q: &Arc<CovarianceOperator>,
    x0: &GalerkinField,
    phi: &Observable,
    ens: &EnsembleConfig,
) -> Result<Estimate, ErgodicityError> {
    if ens.replicas < 2 {
        return Err(ErgodicityError::TooFewReplicas(ens.replicas));
    }
    ens.base.validate()?;
    let values: Vec<Option<f64>> = (0..ens.replicas)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig {
                replica: ens.replica_offset + r,
                ..ens.base.clone()
            };
            match crate::dynamics::simulate(table, x0, &cfg, q) {
                Ok(run) => Some(phi.eval(run.final_state()) * run.fk_weight(run.steps())),
                Err(DynamicsError::BlowUp { .. }) => None,
                Err(_) => None,
            }
        })
        .collect();
    reduce_mean(&values, ens.exclude_blowups, ens.replicas)
}

#[derive(Debug, Clone, Copy)]
pub struct DuhamelReport {
    pub residual: f64,
    pub stderr: f64,
    pub lhs_mean: f64,
    pub rhs_mean: f64,
    pub used: u64,
    pub blowups: u64,
}

/// Residual of the Duhamel identity
/// `P_t φ = S_t φ + K ∫₀ᵗ S_{t−s}[|Ax|² u(s)] ds`
/// estimated with shared outer randomness. Every replica carries one outer
/// trajectory. The inner semigroup value `u(s, X(t−s))` is estimated through
/// the Markov property by a fresh continuation restarted from `X(t−s)`; the
/// outer continuation of the same state serves as a common-random-numbers
/// control variate, so the time integral splits into a pathwise trapezoidal
/// part (integrated over the whole grid) plus a mean-zero correction sampled
/// at one integration point `s` drawn from the trapezoidal step weights.
pub fn duhamel_residual(
    table: &InteractionTable,
    q: &Arc<CovarianceOperator>,
    x0: &GalerkinField,
    phi: &Observable,
    ens: &EnsembleConfig,
) -> Result<DuhamelReport, ErgodicityError> {
    if ens.replicas < 2 {
        return Err(ErgodicityError::TooFewReplicas(ens.replicas));
    }
    ens.base.validate()?;
    let cfg = &ens.base;
    let steps = cfg.steps();
    let dt = cfg.dt;
    let k_fk = cfg.fk_coeff;
    let horizon = steps as f64 * dt;

    if steps == 0 {
        return Ok(DuhamelReport {
            residual: 0.0,
            stderr: 0.0,
            lhs_mean: phi.eval(x0),
            rhs_mean: phi.eval(x0),
            used: ens.replicas,
            blowups: 0,
        });
    }

    #[derive(Clone, Copy)]
    struct PairSample {
        lhs: f64,
        rhs: f64,
    }

    let samples: Vec<Option<PairSample>> = (0..ens.replicas)
        .into_par_iter()
        .map(|r| {
            let replica = ens.replica_offset + r;
            let stream = NoiseStream::new(cfg.seed, replica);
            let pick = stream.fork(1);
            let inner_stream = stream.fork(2);

            // trapezoidal weights over grid points 0..=steps
            let total: f64 = horizon;
            let mut target = pick.uniform(0, 0) * total;
            let mut s_index = steps;
            for g in 0..=steps {
                let w = if g == 0 || g == steps { dt / 2.0 } else { dt };
                if target <= w {
                    s_index = g;
                    break;
                }
                target -= w;
            }
            // outer trajectory with weights; capture the restart state and
            // the trapezoidal integral of |AX|² E_K over the whole grid
            let mut x = x0.clone();
            let mut logw = 0.0f64;
            let mut prev_ens = x.enstrophy();
            let mut weighted_quad = 0.0f64;
            let mut restart: Option<(GalerkinField, f64, f64)> = None; // state, E_K, |Ax|²
            if s_index == steps {
                restart = Some((x.clone(), 1.0, prev_ens));
            }
            for i in 0..steps {
                let inc = q.sample_increment(dt, &stream, i as u64);
                x = match step(table, &x, dt, &inc) {
                    Ok(next) => next,
                    Err(_) => return None,
                };
                if !x.is_finite() {
                    return None;
                }
                let e = x.enstrophy();
                let prev_w = logw.exp();
                logw -= k_fk * dt * 0.5 * (prev_ens + e);
                weighted_quad += dt * 0.5 * (prev_ens * prev_w + e * logw.exp());
                prev_ens = e;
                // the restart point is t − s, i.e. step index steps − s_index
                if i + 1 == steps - s_index {
                    restart = Some((x.clone(), logw.exp(), e));
                }
            }
            let weight_t = logw.exp();
            let phi_t = phi.eval(&x);
            let (x_restart, weight_restart, ens_restart) =
                restart.expect("restart point recorded");

            // inner continuation of length s with fresh noise, unweighted
            let mut xi = x_restart;
            for i in 0..s_index {
                let inc = q.sample_increment(dt, &inner_stream, i as u64);
                xi = match step(table, &xi, dt, &inc) {
                    Ok(next) => next,
                    Err(_) => return None,
                };
                if !xi.is_finite() {
                    return None;
                }
            }
            // the outer continuation of X(t−s) also estimates u(s, ·); the
            // integral term is its exact pathwise trapezoid plus a mean-zero
            // single-point correction from the fresh continuation
            let correction =
                horizon * ens_restart * weight_restart * (phi.eval(&xi) - phi_t);
            Some(PairSample {
                lhs: phi_t,
                rhs: phi_t * weight_t + k_fk * (weighted_quad * phi_t + correction),
            })
        })
        .collect();

    let blowups = samples.iter().filter(|s| s.is_none()).count() as u64;
    if blowups > 0 && !ens.exclude_blowups {
        return Err(ErgodicityError::AllBlowUps(blowups));
    }
    let kept: Vec<PairSample> = samples.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(ErgodicityError::AllBlowUps(ens.replicas));
    }
    let n = kept.len() as f64;
    let lhs_mean = kept.iter().map(|s| s.lhs).sum::<f64>() / n;
    let rhs_mean = kept.iter().map(|s| s.rhs).sum::<f64>() / n;
    let residuals: Vec<f64> = kept.iter().map(|s| s.lhs - s.rhs).collect();
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    Ok(DuhamelReport {
        residual: mean,
        stderr: (var / n).sqrt(),
        lhs_mean,
        rhs_mean,
        used: kept.len() as u64,
        blowups,
    })
}
