//! First-variation flows along a stored trajectory: the full-space derivative
//! flow `D_h X`, the low-frequency Jacobian `J_t` and its inverse, the
//! Malliavin matrix `M_t = ∫₀ᵗ (J_s⁻¹Q^l)(J_s⁻¹Q^l)* ds`, and the direction
//! construction that kills the high-frequency Malliavin derivative.
//!
//! Everything replays the run's stored noise stream, so tangent quantities
//! are deterministic functions of an immutable `RunRecord`. The Jacobian
//! inverse is advanced by a one-step scheme for its own evolution equation
//! (an implicit solve per step, never a matrix inversion of `J`), which makes
//! the per-step update the exact algebraic inverse of the `J` update.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{DynamicsError, RunRecord, SimConfig};
use crate::field::{FieldError, GalerkinField};
use crate::lattice::ModeSet;
use crate::noise::{CovarianceOperator, NoiseError};
use crate::nonlinearity::{InteractionTable, NonlinearityError};

#[derive(Debug, Error)]
pub enum TangentError {
    #[error("low cutoff {n} exceeds the run cutoff {m}")]
    LowCutoff { n: u32, m: u32 },
    #[error("step range {0}..{1} outside the stored trajectory")]
    StepRange(usize, usize),
    #[error("implicit tangent solve failed (singular step matrix)")]
    SingularStep,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Nonlinearity(#[from] NonlinearityError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// The low-frequency coordinate frame: modes of `Z_l(n)` inside a larger
/// lattice, flattened to `2·|Z_l(n)|` coordinates in canonical order.
pub struct LowSpace {
    pub n: u32,
    /// full-lattice index of each low mode
    pub indices: Vec<usize>,
    /// inverse map: full index -> low mode position
    pub low_of: Vec<Option<u32>>,
    /// dimension `N = 2·|Z_l(n)|`
    pub dim: usize,
    /// Stokes eigenvalue `|k|²` per low coordinate
    pub stokes: Vec<f64>,
}

impl LowSpace {
    pub fn new(modes: &ModeSet, n: u32) -> Result<LowSpace, TangentError> {
        if n > modes.cutoff() {
            return Err(TangentError::LowCutoff {
                n,
                m: modes.cutoff(),
            });
        }
        let indices = modes.low_indices(n);
        let mut low_of = vec![None; modes.len()];
        let mut stokes = Vec::with_capacity(2 * indices.len());
        for (li, &fi) in indices.iter().enumerate() {
            low_of[fi] = Some(li as u32);
            stokes.push(modes.norm2(fi));
            stokes.push(modes.norm2(fi));
        }
        Ok(LowSpace {
            n,
            dim: 2 * indices.len(),
            indices,
            low_of,
            stokes,
        })
    }

    /// Block-diagonal matrix of the covariance restricted to the low modes.
    pub fn covariance_matrix(&self, q: &CovarianceOperator) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (li, &fi) in self.indices.iter().enumerate() {
            let b = q.block(fi);
            out[(2 * li, 2 * li)] = b[0][0];
            out[(2 * li, 2 * li + 1)] = b[0][1];
            out[(2 * li + 1, 2 * li)] = b[1][0];
            out[(2 * li + 1, 2 * li + 1)] = b[1][1];
        }
        out
    }
}

/// Path of the first variation `D_h X` along a stored run.
#[derive(Debug, Clone)]
pub struct TangentPath {
    pub h: GalerkinField,
    /// `values[i] = D_h X(t_i)`; `values[0] = h`
    pub values: Vec<GalerkinField>,
}

/// Propagate the full-space first variation along the replayed trajectory,
/// with the same semi-implicit stepping as the flow itself (the noise terms
/// cancel in the variation).
pub fn derivative_flow(
    table: &InteractionTable,
    run: &RunRecord,
    h: &GalerkinField,
) -> Result<TangentPath, TangentError> {
    if h.cutoff() != run.modes().cutoff() {
        return Err(FieldError::CutoffMismatch(run.modes().cutoff(), h.cutoff()).into());
    }
    let dt = run.config.dt;
    let modes = run.modes().clone();
    let mut values = Vec::with_capacity(run.steps() + 1);
    let mut eta = h.clone();
    values.push(eta.clone());
    let mut err = None;
    run.replay(table, |i, x| {
        if i == run.steps() || err.is_some() {
            return;
        }
        match table.convection_tilde(&eta, x) {
            Ok(bt) => {
                let mut next = GalerkinField::zero(modes.clone());
                for idx in 0..modes.len() {
                    let denom = 1.0 + modes.norm2(idx) * dt;
                    let e = eta.coeff(idx);
                    let b = bt.coeff(idx);
                    next.set_coeff(
                        idx,
                        [(e[0] - dt * b[0]) / denom, (e[1] - dt * b[1]) / denom],
                    );
                }
                eta = next;
                values.push(eta.clone());
            }
            Err(e) => err = Some(TangentError::from(e)),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(TangentPath {
        h: h.clone(),
        values,
    })
}

pub struct JacobianOptions {
    /// step indices at which to store `(J, J⁻¹)`; the final step is always kept
    pub checkpoint_steps: Vec<usize>,
    /// evaluate the full Frobenius residual `‖J·J⁻¹ − I‖_F` every this many steps
    pub full_residual_stride: usize,
    /// refresh `J⁻¹` by a direct solve when the residual exceeds this
    pub refresh_threshold: f64,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        JacobianOptions {
            checkpoint_steps: Vec::new(),
            full_residual_stride: 50,
            refresh_threshold: 1e-6,
        }
    }
}

pub struct JacobianCheckpoint {
    pub step: usize,
    pub j: DMatrix<f64>,
    pub jinv: DMatrix<f64>,
}

pub struct LowJacobianPath {
    pub n: u32,
    pub dt: f64,
    pub start_step: usize,
    pub end_step: usize,
    pub checkpoints: Vec<JacobianCheckpoint>,
    /// max over steps of a cheap probe `‖J(J⁻¹v) − v‖/‖v‖`
    pub max_probe_residual: f64,
    /// max over sampled steps of `‖J·J⁻¹ − I‖_F`
    pub max_full_residual: f64,
    pub refreshes: usize,
}

impl LowJacobianPath {
    pub fn checkpoint(&self, step: usize) -> Option<&JacobianCheckpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn last(&self) -> &JacobianCheckpoint {
        self.checkpoints.last().unwrap()
    }
}

/// Assemble the low-space linearization matrix `C(x): h ↦ π_low B̃_m(h, x)`.
fn assemble_c(table: &InteractionTable, low: &LowSpace, x: &GalerkinField, c: &mut DMatrix<f64>) {
    let dim = low.dim;
    let mut col0 = vec![0.0; dim];
    let mut col1 = vec![0.0; dim];
    for (li, &fi) in low.indices.iter().enumerate() {
        table.tilde_columns_low(fi, x, &low.low_of, &mut col0, &mut col1);
        c.column_mut(2 * li).copy_from_slice(&col0);
        c.column_mut(2 * li + 1).copy_from_slice(&col1);
    }
}


/// `y += alpha * x` for dynamically sized matrices.
fn mat_axpy(y: &mut DMatrix<f64>, alpha: f64, x: &DMatrix<f64>) {
    y.zip_apply(x, |a, b| *a += alpha * b);
}

struct LowFlowStep<'a> {
    step: usize,
    j: &'a DMatrix<f64>,
    jinv: &'a DMatrix<f64>,
}

/// Shared propagation loop for `J`/`J⁻¹` between two step indices, visiting
/// the state after every step (and once at the start).
fn propagate_jacobian(
    table: &InteractionTable,
    run: &RunRecord,
    low: &LowSpace,
    start_step: usize,
    end_step: usize,
    opts: &JacobianOptions,
    mut visit: impl FnMut(LowFlowStep<'_>),
) -> Result<(f64, f64, usize), TangentError> {
    if start_step > end_step || end_step > run.steps() {
        return Err(TangentError::StepRange(start_step, end_step));
    }
    let dim = low.dim;
    let dt = run.config.dt;
    let mut j = DMatrix::<f64>::identity(dim, dim);
    let mut jinv = DMatrix::<f64>::identity(dim, dim);
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    let mut work = DMatrix::<f64>::zeros(dim, dim);
    let mut max_probe = 0.0f64;
    let mut max_full = 0.0f64;
    let mut refreshes = 0usize;

    // deterministic probe vector
    let probe = DVector::from_fn(dim, |i, _| ((i as f64) * 0.37 + 1.0).sin());
    let probe_norm = probe.norm();

    visit(LowFlowStep {
        step: start_step,
        j: &j,
        jinv: &jinv,
    });

    let mut err: Option<TangentError> = None;
    run.replay(table, |i, x| {
        if err.is_some() || i < start_step || i >= end_step {
            return;
        }
        assemble_c(table, low, x, &mut c);

        // J ← D⁻¹ (J − dt·C·J)
        work.gemm(1.0, &c, &j, 0.0);
        mat_axpy(&mut j, -dt, &work);
        for (row, &a) in low.stokes.iter().enumerate() {
            let scale = 1.0 / (1.0 + dt * a);
            for col in 0..dim {
                j[(row, col)] *= scale;
            }
        }

        // J⁻¹ ← [J⁻¹ (I − dt·C)⁻¹] (I + dt·A): solve (I − dt·C)ᵀ Yᵀ = (J⁻¹)ᵀ
        let mut lhs = DMatrix::<f64>::identity(dim, dim);
        mat_axpy(&mut lhs, -dt, &c);
        let lhs_t = lhs.transpose();
        let mut rhs = jinv.transpose();
        let lu = lhs_t.lu();
        if !lu.solve_mut(&mut rhs) {
            err = Some(TangentError::SingularStep);
            return;
        }
        jinv = rhs.transpose();
        for (col, &a) in low.stokes.iter().enumerate() {
            let scale = 1.0 + dt * a;
            for row in 0..dim {
                jinv[(row, col)] *= scale;
            }
        }

        // residual bookkeeping
        let probe_res = (&j * (&jinv * &probe) - &probe).norm() / probe_norm;
        max_probe = max_probe.max(probe_res);
        let stride = opts.full_residual_stride.max(1);
        if (i + 1 - start_step) % stride == 0 || i + 1 == end_step {
            work.gemm(1.0, &j, &jinv, 0.0);
            for d in 0..dim {
                work[(d, d)] -= 1.0;
            }
            let full = work.norm();
            max_full = max_full.max(full);
            if full > opts.refresh_threshold {
                // direct refresh from J
                if let Some(inv) = j.clone().lu().try_inverse() {
                    jinv = inv;
                    refreshes += 1;
                }
            }
        }

        visit(LowFlowStep {
            step: i + 1,
            j: &j,
            jinv: &jinv,
        });
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((max_probe, max_full, refreshes))
}

/// Propagate the low-frequency Jacobian flow `J_{s,t}` and its inverse from
/// `start_step` to `end_step` along the frozen trajectory.
pub fn low_jacobian_between(
    table: &InteractionTable,
    run: &RunRecord,
    n: u32,
    start_step: usize,
    end_step: usize,
    opts: &JacobianOptions,
) -> Result<LowJacobianPath, TangentError> {
    let low = LowSpace::new(run.modes(), n)?;
    let mut checkpoints = Vec::new();
    let (max_probe, max_full, refreshes) =
        propagate_jacobian(table, run, &low, start_step, end_step, opts, |s| {
            if opts.checkpoint_steps.contains(&s.step) || s.step == end_step {
                checkpoints.push(JacobianCheckpoint {
                    step: s.step,
                    j: s.j.clone(),
                    jinv: s.jinv.clone(),
                });
            }
        })?;
    Ok(LowJacobianPath {
        n,
        dt: run.config.dt,
        start_step,
        end_step,
        checkpoints,
        max_probe_residual: max_probe,
        max_full_residual: max_full,
        refreshes,
    })
}

/// `J_{0,t}` over the whole stored horizon.
pub fn low_jacobian(
    table: &InteractionTable,
    run: &RunRecord,
    n: u32,
    opts: &JacobianOptions,
) -> Result<LowJacobianPath, TangentError> {
    low_jacobian_between(table, run, n, 0, run.steps(), opts)
}

#[derive(Debug, Clone)]
pub struct MalliavinMatrix {
    pub t: f64,
    pub step: usize,
    pub matrix: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub lambda_min: f64,
}

/// Trapezoidal quadrature of `(J_s⁻¹ Q^l)(J_s⁻¹ Q^l)*` up to each requested
/// step, eigen-decomposed on the explicitly symmetrized result.
pub fn malliavin_matrices(
    table: &InteractionTable,
    run: &RunRecord,
    q: &CovarianceOperator,
    n: u32,
    at_steps: &[usize],
) -> Result<Vec<MalliavinMatrix>, TangentError> {
    let low = LowSpace::new(run.modes(), n)?;
    let ql = low.covariance_matrix(q);
    let dim = low.dim;
    let dt = run.config.dt;
    let end = *at_steps.iter().max().unwrap_or(&0);
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut prev_integrand: Option<DMatrix<f64>> = None;
    let mut results = Vec::new();
    let opts = JacobianOptions {
        checkpoint_steps: Vec::new(),
        full_residual_stride: usize::MAX,
        refresh_threshold: f64::INFINITY,
    };
    propagate_jacobian(table, run, &low, 0, end, &opts, |s| {
        let g = s.jinv * &ql;
        let mut integrand = DMatrix::<f64>::zeros(dim, dim);
        integrand.gemm(1.0, &g, &g.transpose(), 0.0);
        if let Some(prev) = prev_integrand.take() {
            mat_axpy(&mut acc, dt * 0.5, &prev);
            mat_axpy(&mut acc, dt * 0.5, &integrand);
        }
        prev_integrand = Some(integrand);
        if at_steps.contains(&s.step) {
            let sym = (acc.clone() + acc.transpose()) * 0.5;
            let eig = sym.clone().symmetric_eigen();
            let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            results.push(MalliavinMatrix {
                t: s.step as f64 * dt,
                step: s.step,
                matrix: sym,
                eigenvalues: eig.eigenvalues,
                lambda_min,
            });
        }
    })?;
    results.sort_by_key(|m| m.step);
    Ok(results)
}

pub fn malliavin_matrix(
    table: &InteractionTable,
    run: &RunRecord,
    q: &CovarianceOperator,
    n: u32,
    at_step: usize,
) -> Result<MalliavinMatrix, TangentError> {
    Ok(malliavin_matrices(table, run, q, n, &[at_step])?
        .pop()
        .unwrap())
}

/// The Malliavin direction construction for a low-space target direction:
/// `v^l(s) = [(J_s⁻¹)Q^l]* h`, the low Malliavin derivative co-propagated
/// with it, and `v^h(t) = (Q^h)⁻¹ B̃^h(D_v X^l(t), X(t))`, which cancels the
/// high-frequency Malliavin derivative.
pub struct MalliavinDirection {
    pub h: DVector<f64>,
    /// `v^l(t_i)` in low coordinates
    pub v_low: Vec<DVector<f64>>,
    /// `v^h(t_i)` embedded as a full field (zero outside the forced high modes)
    pub v_high: Vec<GalerkinField>,
    /// `D_v X^l(t_i)` embedded as a full field
    pub dvx_low: Vec<GalerkinField>,
    /// max over steps of `|D_v X^h|` under independent propagation of the
    /// coupled high equation
    pub max_high_residual: f64,
    /// max over steps of `|D_v X^l|`
    pub max_low_norm: f64,
}

pub fn malliavin_direction(
    table: &InteractionTable,
    run: &RunRecord,
    q: &CovarianceOperator,
    n: u32,
    h: &DVector<f64>,
) -> Result<MalliavinDirection, TangentError> {
    let modes = run.modes().clone();
    let low = LowSpace::new(&modes, n)?;
    if h.len() != low.dim {
        return Err(TangentError::StepRange(h.len(), low.dim));
    }
    let ql = low.covariance_matrix(q);
    let dt = run.config.dt;
    let steps = run.steps();

    // verify invertibility of every populated high block up front
    for idx in 0..modes.len() {
        if modes.mode(idx).sup_norm() > n && q.is_forced(idx) {
            q.apply_inverse(idx, [1.0, 0.0])?;
        }
    }

    let mut v_low = Vec::with_capacity(steps + 1);
    let mut v_high = Vec::with_capacity(steps + 1);
    let mut dvx_low = Vec::with_capacity(steps + 1);
    let mut eta = GalerkinField::zero(modes.clone()); // D_v X, full space
    let mut max_high = 0.0f64;
    let mut max_low = 0.0f64;
    let mut err: Option<TangentError> = None;

    let opts = JacobianOptions {
        checkpoint_steps: Vec::new(),
        full_residual_stride: usize::MAX,
        refresh_threshold: f64::INFINITY,
    };
    let mut states = Vec::with_capacity(steps + 1);
    run.replay(table, |_, x| states.push(x.clone()))?;

    propagate_jacobian(table, run, &low, 0, steps, &opts, |s| {
        if err.is_some() {
            return;
        }
        let x = &states[s.step];
        // v^l(t) = (J_t⁻¹ Q^l)* h
        let vl: DVector<f64> = (s.jinv * &ql).transpose() * h;
        // v^h(t) from the defining cancellation at the current state
        let bt = match table.convection_tilde(&eta, x) {
            Ok(b) => b,
            Err(e) => {
                err = Some(e.into());
                return;
            }
        };
        let mut vh = GalerkinField::zero(modes.clone());
        for idx in 0..modes.len() {
            if modes.mode(idx).sup_norm() > n && q.is_forced(idx) {
                match q.apply_inverse(idx, bt.coeff(idx)) {
                    Ok(c) => vh.set_coeff(idx, c),
                    Err(e) => {
                        err = Some(e.into());
                        return;
                    }
                }
            }
        }
        let (eta_l, eta_h) = eta.split(n).expect("split within cutoff");
        max_low = max_low.max(eta_l.norm());
        max_high = max_high.max(eta_h.norm());
        v_low.push(vl.clone());
        v_high.push(vh.clone());
        dvx_low.push(eta_l);

        if s.step == steps {
            return;
        }

        // advance the full coupled variation with forcing Qv:
        // η' = D⁻¹(η − dt·B̃(η, x) + dt·Qv)
        let mut next = GalerkinField::zero(modes.clone());
        for idx in 0..modes.len() {
            let denom = 1.0 + modes.norm2(idx) * dt;
            let e = eta.coeff(idx);
            let b = bt.coeff(idx);
            let mut force = [0.0, 0.0];
            if let Some(li) = low.low_of[idx] {
                let li = li as usize;
                force = q.apply(idx, [vl[2 * li], vl[2 * li + 1]]);
            } else if q.is_forced(idx) {
                force = q.apply(idx, vh.coeff(idx));
            }
            next.set_coeff(
                idx,
                [
                    (e[0] - dt * b[0] + dt * force[0]) / denom,
                    (e[1] - dt * b[1] + dt * force[1]) / denom,
                ],
            );
        }
        eta = next;
    })?;
    if let Some(e) = err {
        return Err(e);
    }

    Ok(MalliavinDirection {
        h: h.clone(),
        v_low,
        v_high,
        dvx_low,
        max_high_residual: max_high,
        max_low_norm: max_low,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TailEstimate {
    pub probability: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub hits: usize,
    pub total: usize,
    pub threshold: f64,
}

/// Empirical tail `P(λ_min(M_t) ≤ ε^q)` with a 95% Wilson interval.
pub fn min_eigen_tail(lambda_mins: &[f64], epsilon: f64, q_exponent: f64) -> TailEstimate {
    let threshold = epsilon.powf(q_exponent);
    let total = lambda_mins.len();
    let hits = lambda_mins.iter().filter(|&&l| l <= threshold).count();
    let p = hits as f64 / total as f64;
    let z = 1.959963984540054f64;
    let nf = total as f64;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt();
    TailEstimate {
        probability: p,
        ci_low: (center - half).max(0.0),
        ci_high: (center + half).min(1.0),
        hits,
        total,
        threshold,
    }
}

/// Smallest Malliavin eigenvalue across an ensemble of replicas started at
/// `x0`, all other parameters shared. Replicas use disjoint counter streams
/// and are evaluated in parallel; results are in replica order.
pub fn malliavin_lambda_ensemble(
    table: &InteractionTable,
    x0: &GalerkinField,
    base: &SimConfig,
    q: &std::sync::Arc<CovarianceOperator>,
    n: u32,
    replicas: u64,
) -> Result<Vec<f64>, TangentError> {
    let steps = base.steps();
    let results: Result<Vec<f64>, String> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig {
                replica: r,
                ..base.clone()
            };
            let run = crate::dynamics::simulate(table, x0, &cfg, q).map_err(|e| e.to_string())?;
            let m = malliavin_matrix(table, &run, q, n, steps).map_err(|e| e.to_string())?;
            Ok(m.lambda_min)
        })
        .collect();
    results.map_err(|e| TangentError::Dynamics(DynamicsError::InvalidConfig(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;
    use crate::field::SobolevExponent;
    use crate::lattice::enumerate_modes;
    use crate::noise::build_covariance;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn random_field(modes: &Arc<ModeSet>, rng: &mut StdRng, scale: f64) -> GalerkinField {
        let mut f = GalerkinField::zero(modes.clone());
        for idx in 0..modes.len() {
            f.set_coeff(
                idx,
                [
                    scale * rng.gen_range(-1.0..1.0),
                    scale * rng.gen_range(-1.0..1.0),
                ],
            );
        }
        f
    }

    fn setup(
        m: u32,
        dt: f64,
        horizon: f64,
        k: f64,
        seed: u64,
    ) -> (
        Arc<ModeSet>,
        Arc<InteractionTable>,
        Arc<CovarianceOperator>,
        RunRecord,
    ) {
        let modes = enumerate_modes(m).unwrap();
        let table = InteractionTable::new(&modes);
        let q = Arc::new(build_covariance(&modes, 1, 1.4).unwrap());
        let mut rng = StdRng::seed_from_u64(seed);
        let x0 = random_field(&modes, &mut rng, 0.7);
        let cfg = SimConfig {
            m,
            dt,
            horizon,
            fk_coeff: k,
            seed,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q).unwrap();
        (modes, table, q, run)
    }

    #[test]
    fn zero_direction_stays_zero() {
        let (modes, table, _q, run) = setup(2, 1e-3, 0.05, 0.0, 3);
        let tp = derivative_flow(&table, &run, &GalerkinField::zero(modes.clone())).unwrap();
        for v in &tp.values {
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn linear_flow_matches_diagonal_decay() {
        // with zero base state the variation is purely the Stokes decay
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let k = crate::lattice::ModeIndex::new([2, 0, 0]).unwrap();
        let q0 = Arc::new(
            CovarianceOperator::from_blocks(&modes, 1, &[(k, [[0.0, 0.0], [0.0, 1e-300]])])
                .unwrap(),
        );
        let x0 = GalerkinField::zero(modes.clone());
        let cfg = SimConfig {
            m: 2,
            dt: 1e-3,
            horizon: 0.1,
            fk_coeff: 0.0,
            seed: 1,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q0).unwrap();
        let hmode = crate::lattice::ModeIndex::new([1, 1, 0]).unwrap();
        let h = GalerkinField::from_entries(modes.clone(), &[(hmode, [1.0, 0.5])]).unwrap();
        let tp = derivative_flow(&table, &run, &h).unwrap();
        let idx = modes.index_of(&hmode).unwrap();
        let a = modes.norm2(idx);
        let end = tp.values.last().unwrap().coeff(idx);
        let scheme = (1.0 + a * cfg.dt).powi(-(run.steps() as i32));
        assert!((end[0] - scheme).abs() < 1e-14);
        assert!((end[1] - 0.5 * scheme).abs() < 1e-14);
        let exact = (-a * cfg.horizon).exp();
        assert!((end[0] - exact).abs() <= cfg.horizon * a * a * cfg.dt * exact + 1e-12);
    }

    #[test]
    fn finite_difference_convergence_with_shared_noise() {
        let (modes, table, q, run) = setup(2, 1e-3, 0.2, 0.0, 5);
        let mut rng = StdRng::seed_from_u64(55);
        let h = random_field(&modes, &mut rng, 1.0);
        let tp = derivative_flow(&table, &run, &h).unwrap();
        let dh_end = tp.values.last().unwrap();

        let mut errors = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut xp = run.initial_state().clone();
            xp.axpy(eps, &h).unwrap();
            let run_p = simulate(&table, &xp, &run.config, &q).unwrap();
            let mut fd = run_p.final_state().sub(run.final_state()).unwrap();
            fd.scale(1.0 / eps);
            errors.push(fd.sub(dh_end).unwrap().norm());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        let r0 = errors[0] / 1e-3;
        for (e, eps) in errors.iter().zip([1e-3, 1e-4, 1e-5]) {
            let r = e / eps;
            assert!(r < 3.0 * r0 && r > r0 / 3.0, "ratios drift: {errors:?}");
        }
    }

    #[test]
    fn jacobian_starts_at_identity_and_inverse_stays_tight() {
        let (_modes, table, _q, run) = setup(3, 1e-3, 0.1, 0.0, 7);
        let opts = JacobianOptions {
            checkpoint_steps: vec![0],
            full_residual_stride: 10,
            refresh_threshold: 1e-6,
        };
        let path = low_jacobian(&table, &run, 1, &opts).unwrap();
        let first = path.checkpoint(0).unwrap();
        assert_eq!(first.j, DMatrix::<f64>::identity(52, 52));
        assert_eq!(first.jinv, DMatrix::<f64>::identity(52, 52));
        assert!(
            path.max_full_residual <= 1e-10,
            "{}",
            path.max_full_residual
        );
        assert_eq!(path.refreshes, 0);
    }

    #[test]
    fn stokes_only_jacobian_is_diagonal_decay() {
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let k = crate::lattice::ModeIndex::new([2, 0, 0]).unwrap();
        let q0 = Arc::new(
            CovarianceOperator::from_blocks(&modes, 1, &[(k, [[0.0, 0.0], [0.0, 1e-300]])])
                .unwrap(),
        );
        let x0 = GalerkinField::zero(modes.clone());
        let cfg = SimConfig {
            m: 2,
            dt: 1e-3,
            horizon: 0.2,
            fk_coeff: 0.0,
            seed: 1,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q0).unwrap();
        let path = low_jacobian(&table, &run, 1, &JacobianOptions::default()).unwrap();
        let low = LowSpace::new(&modes, 1).unwrap();
        let end = path.last();
        for (row, &a) in low.stokes.iter().enumerate() {
            let scheme = (1.0 + a * cfg.dt).powi(-(run.steps() as i32));
            assert!((end.j[(row, row)] - scheme).abs() < 1e-13);
            let exact = (-a * cfg.horizon).exp();
            assert!(
                (end.j[(row, row)] - exact).abs() <= 1.5 * cfg.horizon * a * a * cfg.dt * exact
            );
        }
    }

    #[test]
    fn cocycle_property_under_split() {
        let (_modes, table, _q, run) = setup(3, 1e-3, 0.1, 0.0, 9);
        let steps = run.steps();
        let split = steps / 3;
        let opts = JacobianOptions {
            checkpoint_steps: vec![split],
            ..Default::default()
        };
        let full = low_jacobian(&table, &run, 1, &opts).unwrap();
        let j_0s = &full.checkpoint(split).unwrap().j;
        let j_0t = &full.last().j;
        let seg =
            low_jacobian_between(&table, &run, 1, split, steps, &JacobianOptions::default())
                .unwrap();
        let j_st = &seg.last().j;
        let recomposed = j_st * j_0s;
        let resid = (&recomposed - j_0t).norm();
        assert!(resid <= 1e-8, "cocycle residual {resid:e}");
    }

    #[test]
    fn malliavin_zero_forcing_gives_zero_matrix() {
        let modes = enumerate_modes(3).unwrap();
        let table = InteractionTable::new(&modes);
        // forced only outside Z_l(2): Q^l for n = 2 vanishes while the run sees noise
        let q = Arc::new(build_covariance(&modes, 2, 1.4).unwrap());
        let mut rng = StdRng::seed_from_u64(70);
        let x0 = random_field(&modes, &mut rng, 0.3);
        let cfg = SimConfig {
            m: 3,
            dt: 1e-3,
            horizon: 0.05,
            fk_coeff: 0.0,
            seed: 70,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q).unwrap();
        let m = malliavin_matrix(&table, &run, &q, 2, run.steps()).unwrap();
        assert_eq!(
            m.matrix,
            DMatrix::<f64>::zeros(m.matrix.nrows(), m.matrix.ncols())
        );
        assert_eq!(m.lambda_min, 0.0);
    }

    #[test]
    fn malliavin_matrix_is_symmetric_psd_and_additive() {
        let (_modes, table, q, run) = setup(2, 1e-3, 0.08, 0.0, 11);
        let steps = run.steps();
        let half = steps / 2;
        let ms = malliavin_matrices(&table, &run, &q, 1, &[half, steps]).unwrap();
        for m in &ms {
            assert_eq!(m.matrix, m.matrix.transpose());
            assert!(m.lambda_min >= -1e-12, "lambda_min = {}", m.lambda_min);
        }
        // additivity: the tail integral recomputed over [half, steps] from the
        // same J⁻¹ recursion equals the difference of the two matrices
        let m_half = &ms[0].matrix;
        let m_full = &ms[1].matrix;
        let tail = m_full - m_half;
        let low = LowSpace::new(run.modes(), 1).unwrap();
        let ql = low.covariance_matrix(&q);
        let mut acc = DMatrix::<f64>::zeros(low.dim, low.dim);
        let mut prev: Option<DMatrix<f64>> = None;
        let opts = JacobianOptions {
            checkpoint_steps: Vec::new(),
            full_residual_stride: usize::MAX,
            refresh_threshold: f64::INFINITY,
        };
        propagate_jacobian(&table, &run, &low, 0, steps, &opts, |s| {
            let g = s.jinv * &ql;
            let mut integrand = DMatrix::<f64>::zeros(low.dim, low.dim);
            integrand.gemm(1.0, &g, &g.transpose(), 0.0);
            if let Some(p) = prev.take() {
                if s.step > half {
                    mat_axpy(&mut acc, run.config.dt * 0.5, &p);
                    mat_axpy(&mut acc, run.config.dt * 0.5, &integrand);
                }
            }
            prev = Some(integrand);
        })
        .unwrap();
        let sym = (acc.clone() + acc.transpose()) * 0.5;
        assert!((&sym - &tail).norm() <= 1e-13 * tail.norm().max(1e-30));
    }

    #[test]
    fn direction_construction_kills_high_variation() {
        let (_modes, table, q, run) = setup(3, 1e-3, 0.05, 0.0, 13);
        let low = LowSpace::new(run.modes(), 2).unwrap();
        let h = DVector::from_fn(low.dim, |i, _| ((i + 1) as f64 * 0.13).cos());
        let dir = malliavin_direction(&table, &run, &q, 2, &h).unwrap();
        assert!(dir.max_low_norm > 0.0);
        assert!(
            dir.max_high_residual <= 1e-8 * dir.max_low_norm,
            "high residual {} vs low {}",
            dir.max_high_residual,
            dir.max_low_norm
        );
        // zero target: everything identically zero
        let dir0 = malliavin_direction(&table, &run, &q, 2, &DVector::zeros(low.dim)).unwrap();
        assert_eq!(dir0.max_low_norm, 0.0);
        assert_eq!(dir0.max_high_residual, 0.0);
        for vh in &dir0.v_high {
            assert_eq!(vh.norm(), 0.0);
        }
    }

    #[test]
    fn direction_low_derivative_matches_j_times_m() {
        let (_modes, table, q, run) = setup(3, 5e-4, 0.06, 0.0, 17);
        let steps = run.steps();
        let low = LowSpace::new(run.modes(), 2).unwrap();
        let h = DVector::from_fn(low.dim, |i, _| ((i + 2) as f64 * 0.31).sin());
        let dir = malliavin_direction(&table, &run, &q, 2, &h).unwrap();
        let jm = {
            let path = low_jacobian(&table, &run, 2, &JacobianOptions::default()).unwrap();
            let m = malliavin_matrix(&table, &run, &q, 2, steps).unwrap();
            &path.last().j * (&m.matrix * &h)
        };
        let got = DVector::from_vec(dir.dvx_low.last().unwrap().low_coords(&low.indices));
        let rel = (&got - &jm).norm() / jm.norm();
        assert!(rel <= 0.05, "relative deviation {rel}");
    }

    #[test]
    fn weighted_tangent_energy_inequality() {
        // FK-weighted first-variation energy stays below its initial value
        // for large K, for both exponents
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let q = Arc::new(build_covariance(&modes, 1, 1.4).unwrap());
        let mut rng = StdRng::seed_from_u64(19);
        let x0 = random_field(&modes, &mut rng, 1.0);
        let cfg = SimConfig {
            m: 2,
            dt: 1e-3,
            horizon: 0.5,
            fk_coeff: 400.0,
            seed: 19,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q).unwrap();
        let h = random_field(&modes, &mut rng, 1.0);
        let tp = derivative_flow(&table, &run, &h).unwrap();
        for g in [0.6, 1.0] {
            let gamma = SobolevExponent::new(g).unwrap();
            let h_norm2 = h.sobolev_norm(gamma).powi(2);
            for (i, v) in tp.values.iter().enumerate() {
                let weighted = v.sobolev_norm(gamma).powi(2) * run.fk_weight(i);
                assert!(
                    weighted <= h_norm2 * (1.0 + 1e-9),
                    "step {i}, gamma {g}: {weighted} vs {h_norm2}"
                );
            }
        }
    }

    #[test]
    fn weighted_jacobian_bound_for_low_directions() {
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let q = Arc::new(build_covariance(&modes, 1, 1.4).unwrap());
        let mut rng = StdRng::seed_from_u64(23);
        let x0 = random_field(&modes, &mut rng, 1.0);
        let cfg = SimConfig {
            m: 2,
            dt: 1e-3,
            horizon: 0.4,
            fk_coeff: 400.0,
            seed: 23,
            replica: 0,
            snapshot_stride: None,
        };
        let run = simulate(&table, &x0, &cfg, &q).unwrap();
        let steps = run.steps();
        let quarters: Vec<usize> = (0..=4).map(|i| i * steps / 4).collect();
        let opts = JacobianOptions {
            checkpoint_steps: quarters.clone(),
            ..Default::default()
        };
        let path = low_jacobian(&table, &run, 1, &opts).unwrap();
        let low = LowSpace::new(run.modes(), 1).unwrap();
        let h = DVector::from_fn(low.dim, |i, _| (0.7 * (i as f64 + 1.0)).cos());
        let h_norm2 = h.norm_squared();
        for cp in &path.checkpoints {
            let jh: DVector<f64> = &cp.j * &h;
            let weighted = jh.norm_squared() * run.fk_weight(cp.step);
            assert!(
                weighted <= h_norm2 * (1.0 + 1e-9),
                "step {}: {weighted} vs {h_norm2}",
                cp.step
            );
        }
    }

    #[test]
    fn tail_estimator_behaves_monotonically() {
        let lambdas = vec![1e-8, 1e-6, 1e-4, 1e-3, 0.01, 0.1];
        let e1 = min_eigen_tail(&lambdas, 0.1, 2.0);
        let e2 = min_eigen_tail(&lambdas, 0.05, 2.0);
        assert!(e2.probability <= e1.probability);
        assert!(e1.ci_low <= e1.probability && e1.probability <= e1.ci_high);
        let all = min_eigen_tail(&lambdas, 10.0, 2.0);
        assert_eq!(all.probability, 1.0);
    }
}
