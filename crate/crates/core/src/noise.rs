//! Diagonal covariance operators with finitely many unforced modes, Wiener
//! increment sampling, and the exactly discretized stochastic convolution.
//!
//! All randomness is counter based: a stream is keyed by `(seed, replica)`
//! and every Gaussian draw is a pure function of `(stream, step, mode)`.
//! Replicas and steps can therefore be evaluated in any order, on any number
//! of workers, with bit-identical results.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::GalerkinField;
use crate::lattice::{ModeIndex, ModeSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("degeneracy cutoff {n0} leaves no forced mode below the truncation {m}")]
    EmptyForcing { n0: u32, m: u32 },
    #[error("covariance block at {0:?} is singular but must be invertible")]
    SingularBlock([i32; 3]),
    #[error("mode {0:?} lies outside the lattice")]
    UnknownMode([i32; 3]),
    #[error("degeneracy cutoff {n0} must satisfy n0 >= 1")]
    DegenerateCutoff { n0: u32 },
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix2(state: u64, word: u64) -> u64 {
    splitmix(state ^ word.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn unit_open(bits: u64) -> f64 {
    // uniform on (0,1]: 53 mantissa bits, shifted away from zero
    ((bits >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// A reproducible Gaussian stream keyed by `(seed, replica)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    key: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, replica: u64) -> NoiseStream {
        let key = mix2(splitmix(seed), replica);
        NoiseStream { key }
    }

    /// Independent standard normal pair for one `(step, mode)` counter cell.
    pub fn normal_pair(&self, step: u64, mode: u32) -> (f64, f64) {
        let cell = mix2(mix2(self.key, step), mode as u64);
        let u1 = unit_open(cell);
        let u2 = unit_open(splitmix(cell ^ GOLDEN));
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Uniform draw on `(0,1]` for one counter cell.
    pub fn uniform(&self, step: u64, slot: u32) -> f64 {
        unit_open(mix2(mix2(self.key, step), (slot as u64) | (1 << 40)))
    }

    /// A derived stream for an auxiliary purpose, disjoint from this one.
    pub fn fork(&self, purpose: u64) -> NoiseStream {
        NoiseStream {
            key: mix2(self.key, purpose ^ 0xA5A5_5A5A_0F0F_F0F0),
        }
    }
}

/// Specification of a covariance operator, as it appears in config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CovarianceSpec {
    /// `q_k = |k|^{-2r} I₂` on the forced modes, zero on `Z_l(n0)`.
    Isotropic { n0: u32, r: f64 },
    /// Explicit per-mode 2x2 blocks; unspecified modes are unforced.
    Blocks {
        n0: u32,
        blocks: Vec<([i32; 3], [[f64; 2]; 2])>,
    },
}

/// A diagonal covariance operator: one 2x2 block per mode in its `k⊥`
/// coordinates, zero on the degenerate sublattice `Z_l(n0)`. Off-diagonal
/// (mode-coupling) noise is unrepresentable by construction.
#[derive(Debug, Clone)]
pub struct CovarianceOperator {
    modes: Arc<ModeSet>,
    n0: u32,
    blocks: Vec<[[f64; 2]; 2]>,
    forced: Vec<bool>,
    r: Option<f64>,
}

/// Recommended regularity window for the isotropic construction.
pub fn r_in_recommended_range(r: f64) -> bool {
    r > 1.25 && r < 1.5
}

/// `Q = (Id − π_{n0}) A^{−r}` restricted to the lattice: `q_k = |k|^{−2r} I₂`
/// for `k ∈ Z_l(m) ∖ Z_l(n0)` and `q_k = 0` on `Z_l(n0)`.
pub fn build_covariance(
    modes: &Arc<ModeSet>,
    n0: u32,
    r: f64,
) -> Result<CovarianceOperator, NoiseError> {
    if n0 == 0 {
        return Err(NoiseError::DegenerateCutoff { n0 });
    }
    if modes.cutoff() <= n0 {
        return Err(NoiseError::EmptyForcing {
            n0,
            m: modes.cutoff(),
        });
    }
    let mut blocks = vec![[[0.0; 2]; 2]; modes.len()];
    let mut forced = vec![false; modes.len()];
    for idx in 0..modes.len() {
        if modes.mode(idx).sup_norm() > n0 {
            let w = modes.norm2(idx).powf(-r);
            blocks[idx] = [[w, 0.0], [0.0, w]];
            forced[idx] = true;
        }
    }
    Ok(CovarianceOperator {
        modes: modes.clone(),
        n0,
        blocks,
        forced,
        r: Some(r),
    })
}

impl CovarianceOperator {
    /// Explicit block table; every listed mode must lie outside `Z_l(n0)`.
    pub fn from_blocks(
        modes: &Arc<ModeSet>,
        n0: u32,
        entries: &[(ModeIndex, [[f64; 2]; 2])],
    ) -> Result<CovarianceOperator, NoiseError> {
        if n0 == 0 {
            return Err(NoiseError::DegenerateCutoff { n0 });
        }
        let mut blocks = vec![[[0.0; 2]; 2]; modes.len()];
        let mut forced = vec![false; modes.len()];
        for (k, q) in entries {
            let idx = modes
                .index_of(k)
                .ok_or(NoiseError::UnknownMode(k.components()))?;
            if k.sup_norm() <= n0 {
                continue; // degenerate sublattice stays unforced
            }
            blocks[idx] = *q;
            forced[idx] = *q != [[0.0; 2]; 2];
        }
        if !forced.iter().any(|&f| f) {
            return Err(NoiseError::EmptyForcing {
                n0,
                m: modes.cutoff(),
            });
        }
        Ok(CovarianceOperator {
            modes: modes.clone(),
            n0,
            blocks,
            forced,
            r: None,
        })
    }

    pub fn from_spec(modes: &Arc<ModeSet>, spec: &CovarianceSpec) -> Result<Self, NoiseError> {
        match spec {
            CovarianceSpec::Isotropic { n0, r } => build_covariance(modes, *n0, *r),
            CovarianceSpec::Blocks { n0, blocks } => {
                let entries: Result<Vec<_>, _> = blocks
                    .iter()
                    .map(|(k, q)| ModeIndex::new(*k).map(|m| (m, *q)))
                    .collect();
                Self::from_blocks(
                    modes,
                    *n0,
                    &entries.map_err(|_| NoiseError::UnknownMode([0, 0, 0]))?,
                )
            }
        }
    }

    pub fn modes(&self) -> &Arc<ModeSet> {
        &self.modes
    }

    pub fn degeneracy_cutoff(&self) -> u32 {
        self.n0
    }

    pub fn regularity(&self) -> Option<f64> {
        self.r
    }

    pub fn is_forced(&self, idx: usize) -> bool {
        self.forced[idx]
    }

    pub fn forced_count(&self) -> usize {
        self.forced.iter().filter(|&&f| f).count()
    }

    pub fn block(&self, idx: usize) -> [[f64; 2]; 2] {
        self.blocks[idx]
    }

    /// `q_k v` in `k⊥` coordinates.
    pub fn apply(&self, idx: usize, v: [f64; 2]) -> [f64; 2] {
        let q = &self.blocks[idx];
        [
            q[0][0] * v[0] + q[0][1] * v[1],
            q[1][0] * v[0] + q[1][1] * v[1],
        ]
    }

    /// `q_k⁻¹ v`; the forced-mode invertibility assumption made concrete.
    pub fn apply_inverse(&self, idx: usize, v: [f64; 2]) -> Result<[f64; 2], NoiseError> {
        let q = &self.blocks[idx];
        let det = q[0][0] * q[1][1] - q[0][1] * q[1][0];
        let scale = q
            .iter()
            .flatten()
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
            .powi(2);
        if det.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(NoiseError::SingularBlock(
                self.modes.mode(idx).components(),
            ));
        }
        Ok([
            (q[1][1] * v[0] - q[0][1] * v[1]) / det,
            (-q[1][0] * v[0] + q[0][0] * v[1]) / det,
        ])
    }

    /// `tr(QQ*) = Σ_k ‖q_k‖²_F`.
    pub fn trace_qq(&self) -> f64 {
        self.blocks
            .iter()
            .map(|q| q.iter().flatten().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Truncated `tr(A^{1+σ} QQ*) = Σ_k |k|^{2(1+σ)} ‖q_k‖²_F`.
    pub fn weighted_trace(&self, sigma: f64) -> f64 {
        (0..self.modes.len())
            .map(|idx| {
                let fro: f64 = self.blocks[idx].iter().flatten().map(|x| x * x).sum();
                self.modes.norm2(idx).powf(1.0 + sigma) * fro
            })
            .sum()
    }

    /// Condition number of a forced block (ratio of its singular values).
    pub fn block_condition(&self, idx: usize) -> f64 {
        let q = self.blocks[idx];
        let m = nalgebra::Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1]);
        let sv = m.svd(false, false).singular_values;
        sv[0] / sv[1]
    }

    /// One Wiener increment over a step of size `dt`: independent per mode,
    /// `q_k ξ_k √dt` with `ξ_k` standard 2-vector Gaussians drawn in canonical
    /// mode order; exactly zero on unforced modes.
    pub fn sample_increment(&self, dt: f64, stream: &NoiseStream, step: u64) -> GalerkinField {
        let mut out = GalerkinField::zero(self.modes.clone());
        let sqrt_dt = dt.sqrt();
        for idx in 0..self.modes.len() {
            if !self.forced[idx] {
                continue;
            }
            let (z1, z2) = stream.normal_pair(step, idx as u32);
            let v = self.apply(idx, [z1, z2]);
            out.set_coeff(idx, [sqrt_dt * v[0], sqrt_dt * v[1]]);
        }
        out
    }

    /// The stochastic convolution `Z(t) = ∫₀ᵗ e^{−A(t−s)} Q dW_s` on the step
    /// grid, using the exact per-mode Ornstein-Uhlenbeck recursion
    /// `Z_k(t+dt) = e^{−|k|²dt} Z_k(t) + q_k η_k` with
    /// `η_k ~ N(0, (1−e^{−2|k|²dt})/(2|k|²) · I₂)`.
    pub fn stochastic_convolution(
        &self,
        horizon: f64,
        dt: f64,
        stream: &NoiseStream,
    ) -> Vec<GalerkinField> {
        let steps = (horizon / dt).round() as usize;
        let mut z = GalerkinField::zero(self.modes.clone());
        let mut path = Vec::with_capacity(steps + 1);
        path.push(z.clone());
        let decay: Vec<f64> = (0..self.modes.len())
            .map(|i| (-self.modes.norm2(i) * dt).exp())
            .collect();
        let ou_std: Vec<f64> = (0..self.modes.len())
            .map(|i| {
                let a = self.modes.norm2(i);
                (((1.0 - (-2.0 * a * dt).exp()) / (2.0 * a)) as f64).sqrt()
            })
            .collect();
        for step in 0..steps {
            let mut next = GalerkinField::zero(self.modes.clone());
            for idx in 0..self.modes.len() {
                let cur = z.coeff(idx);
                let mut c = [decay[idx] * cur[0], decay[idx] * cur[1]];
                if self.forced[idx] {
                    let (z1, z2) = stream.normal_pair(step as u64, idx as u32);
                    let v = self.apply(idx, [z1, z2]);
                    c[0] += ou_std[idx] * v[0];
                    c[1] += ou_std[idx] * v[1];
                }
                next.set_coeff(idx, c);
            }
            z = next;
            path.push(z.clone());
        }
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SobolevExponent;
    use crate::lattice::enumerate_modes;

    #[test]
    fn isotropic_construction_matches_closed_form() {
        let modes = enumerate_modes(3).unwrap();
        let q = build_covariance(&modes, 1, 1.4).unwrap();
        let k = ModeIndex::new([2, 0, 0]).unwrap();
        let idx = modes.index_of(&k).unwrap();
        let expect = 4.0f64.powf(-1.4);
        assert_eq!(q.block(idx)[0][0], expect);
        assert_eq!(q.block(idx)[1][1], expect);
        assert_eq!(q.block(idx)[0][1], 0.0);
        // unforced low mode
        let low = modes.index_of(&ModeIndex::new([1, 0, 0]).unwrap()).unwrap();
        assert_eq!(q.block(low), [[0.0; 2]; 2]);
        assert!(!q.is_forced(low));
        // scalar blocks have condition number one
        assert!((q.block_condition(idx) - 1.0).abs() < 1e-14);
        assert!(q.weighted_trace(0.1).is_finite());
        assert!(r_in_recommended_range(1.4));
        assert!(!r_in_recommended_range(1.6));
    }

    #[test]
    fn empty_forcing_is_an_error() {
        let modes = enumerate_modes(2).unwrap();
        assert!(matches!(
            build_covariance(&modes, 2, 1.4),
            Err(NoiseError::EmptyForcing { .. })
        ));
        assert!(matches!(
            build_covariance(&modes, 0, 1.4),
            Err(NoiseError::DegenerateCutoff { .. })
        ));
    }

    #[test]
    fn streams_are_reproducible_and_replica_disjoint() {
        let s1 = NoiseStream::new(7, 0);
        let s2 = NoiseStream::new(7, 0);
        let s3 = NoiseStream::new(7, 1);
        assert_eq!(s1.normal_pair(12, 3), s2.normal_pair(12, 3));
        assert_ne!(s1.normal_pair(12, 3), s3.normal_pair(12, 3));

        let modes = enumerate_modes(2).unwrap();
        let q = build_covariance(&modes, 1, 1.4).unwrap();
        let a = q.sample_increment(1e-3, &s1, 5);
        let b = q.sample_increment(1e-3, &s2, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn unforced_modes_never_receive_noise() {
        let modes = enumerate_modes(2).unwrap();
        let q = build_covariance(&modes, 1, 1.4).unwrap();
        let stream = NoiseStream::new(3, 0);
        for step in 0..100 {
            let inc = q.sample_increment(1e-2, &stream, step);
            for idx in 0..modes.len() {
                if modes.mode(idx).sup_norm() <= 1 {
                    assert_eq!(inc.coeff(idx), [0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn increment_moments_match_monte_carlo() {
        let modes = enumerate_modes(2).unwrap();
        let q = build_covariance(&modes, 1, 1.3).unwrap();
        let dt = 0.25;
        let k = ModeIndex::new([0, 2, 1]).unwrap();
        let idx = modes.index_of(&k).unwrap();
        let draws = 100_000usize;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut cross = 0.0f64;
        for rep in 0..draws {
            let stream = NoiseStream::new(11, rep as u64);
            let inc = q.sample_increment(dt, &stream, 0);
            let c = inc.coeff(idx);
            sum[0] += c[0];
            sum[1] += c[1];
            sum_sq[0] += c[0] * c[0];
            sum_sq[1] += c[1] * c[1];
            cross += c[0] * c[1];
        }
        let var_expect = dt * q.block(idx)[0][0].powi(2);
        let se_mean = (var_expect / draws as f64).sqrt();
        for i in 0..2 {
            let mean = sum[i] / draws as f64;
            assert!(mean.abs() <= 5.0 * se_mean, "mean {mean} vs se {se_mean}");
            let var = sum_sq[i] / draws as f64;
            assert!(
                (var - var_expect).abs() <= 0.05 * var_expect,
                "var {var} vs {var_expect}"
            );
        }
        let cov = cross / draws as f64;
        assert!(cov.abs() <= 0.05 * var_expect);
    }

    #[test]
    fn zero_covariance_gives_zero_convolution() {
        let modes = enumerate_modes(2).unwrap();
        let k = ModeIndex::new([2, 0, 0]).unwrap();
        let q = CovarianceOperator::from_blocks(
            &modes,
            1,
            &[(k, [[1e-300, 0.0], [0.0, 1e-300]])],
        )
        .unwrap();
        // zero all but a vanishing block; unforced modes stay exactly zero
        let stream = NoiseStream::new(1, 0);
        let path = q.stochastic_convolution(0.1, 1e-2, &stream);
        for z in &path {
            for idx in 0..modes.len() {
                if idx != modes.index_of(&k).unwrap() {
                    assert_eq!(z.coeff(idx), [0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn ou_stationary_variance_matches_theory() {
        let modes = enumerate_modes(2).unwrap();
        let k = ModeIndex::new([2, 0, 0]).unwrap();
        let qval = 0.7;
        let q =
            CovarianceOperator::from_blocks(&modes, 1, &[(k, [[qval, 0.0], [0.0, qval]])]).unwrap();
        let idx = modes.index_of(&k).unwrap();
        let a = modes.norm2(idx);
        let dt = 0.05;
        // many replicas, moderately long runs: average the late-time variance
        let mut acc = 0.0;
        let mut count = 0usize;
        for rep in 0..400u64 {
            let stream = NoiseStream::new(21, rep);
            let path = q.stochastic_convolution(6.0, dt, &stream);
            for z in path.iter().skip(path.len() / 2) {
                let c = z.coeff(idx);
                acc += c[0] * c[0] + c[1] * c[1];
                count += 2;
            }
        }
        let var = acc / count as f64;
        let expect = qval * qval / (2.0 * a);
        assert!(
            (var - expect).abs() <= 0.05 * expect,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn convolution_regularity_stable_under_refinement() {
        // sup_t |A^{1+eps} Z(t)| stays bounded as dt halves
        let modes = enumerate_modes(3).unwrap();
        let q = build_covariance(&modes, 1, 1.4).unwrap();
        let eps = SobolevExponent::new(1.05).unwrap();
        let stream = NoiseStream::new(5, 0);
        let mut sups = Vec::new();
        for dt in [4e-3, 2e-3, 1e-3] {
            let path = q.stochastic_convolution(0.5, dt, &stream);
            let sup = path
                .iter()
                .map(|z| z.sobolev_norm(eps))
                .fold(0.0f64, f64::max);
            sups.push(sup);
        }
        for s in &sups {
            assert!(s.is_finite() && *s > 0.0);
        }
        let base = sups[0];
        for s in &sups[1..] {
            assert!(*s <= 3.0 * base && *s >= base / 3.0, "{sups:?}");
        }
    }
}
