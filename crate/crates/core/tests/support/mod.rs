//! Test support: a 32³ pseudo-spectral oracle for the convection term.
//!
//! Fields are synthesized on the grid from their mode coefficients, the
//! advective product is formed pointwise, Leray-projected in spectral space
//! and read back at the lattice modes. With a 32³ grid and cutoffs `m ≤ 5`
//! the product is fully resolved, so the oracle is exact to rounding.

#![allow(dead_code)]

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use sns_core::field::GalerkinField;
use sns_core::lattice::{ModeIndex, SignClass};
use sns_core::nonlinearity::basis_normalization;

pub const GRID: usize = 32;

pub struct GridOracle {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn wrap(k: i32) -> usize {
    k.rem_euclid(GRID as i32) as usize
}

fn unwrap_freq(i: usize) -> i32 {
    let i = i as i32;
    if i <= GRID as i32 / 2 {
        i
    } else {
        i - GRID as i32
    }
}

fn idx(i0: usize, i1: usize, i2: usize) -> usize {
    (i0 * GRID + i1) * GRID + i2
}

impl GridOracle {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        GridOracle {
            forward: planner.plan_fft_forward(GRID),
            inverse: planner.plan_fft_inverse(GRID),
        }
    }

    fn fft3(&self, data: &mut [Complex<f64>], fft: &Arc<dyn Fft<f64>>) {
        // axis 2 (contiguous)
        for line in data.chunks_mut(GRID) {
            fft.process(line);
        }
        // axis 1
        let mut scratch = vec![Complex::default(); GRID];
        for p in 0..GRID {
            for c in 0..GRID {
                for t in 0..GRID {
                    scratch[t] = data[idx(p, t, c)];
                }
                fft.process(&mut scratch);
                for t in 0..GRID {
                    data[idx(p, t, c)] = scratch[t];
                }
            }
        }
        // axis 0
        for p in 0..GRID {
            for c in 0..GRID {
                for t in 0..GRID {
                    scratch[t] = data[idx(t, p, c)];
                }
                fft.process(&mut scratch);
                for t in 0..GRID {
                    data[idx(t, p, c)] = scratch[t];
                }
            }
        }
    }

    /// Synthesize the three velocity components on the grid from raw
    /// trigonometric amplitudes `(wavevector, cos-or-sin, 3-vector)`.
    fn synthesize(&self, waves: &[(ModeIndex, [f64; 3])]) -> [Vec<Complex<f64>>; 3] {
        let mut spectral: [Vec<Complex<f64>>; 3] = std::array::from_fn(|_| {
            vec![Complex::default(); GRID * GRID * GRID]
        });
        for (k, amp) in waves {
            let [k1, k2, k3] = k.components();
            let pos = idx(wrap(k1), wrap(k2), wrap(k3));
            let neg = idx(wrap(-k1), wrap(-k2), wrap(-k3));
            match k.sign_class() {
                SignClass::Plus => {
                    // cos(kξ) = (e^{ikξ} + e^{−ikξ}) / 2
                    for c in 0..3 {
                        spectral[c][pos] += Complex::new(amp[c] / 2.0, 0.0);
                        spectral[c][neg] += Complex::new(amp[c] / 2.0, 0.0);
                    }
                }
                SignClass::Minus => {
                    // sin(kξ) = −(i/2) e^{ikξ} + (i/2) e^{−ikξ}
                    for c in 0..3 {
                        spectral[c][pos] += Complex::new(0.0, -amp[c] / 2.0);
                        spectral[c][neg] += Complex::new(0.0, amp[c] / 2.0);
                    }
                }
            }
        }
        for comp in &mut spectral {
            self.fft3(comp, &self.inverse);
        }
        spectral
    }

    /// Raw trigonometric amplitudes of `P[(u·∇)v + sym·(v·∇)u]` at every
    /// wavevector pair, as a closure over canonical modes.
    fn advect_and_project(
        &self,
        u_waves: &[(ModeIndex, [f64; 3])],
        v_waves: &[(ModeIndex, [f64; 3])],
        symmetrize: bool,
    ) -> Vec<Vec<Complex<f64>>> {
        let u = self.synthesize(u_waves);
        let v = self.synthesize(v_waves);

        // ∂_a v_b via spectral derivative of v
        let mut v_spec: [Vec<Complex<f64>>; 3] = std::array::from_fn(|b| {
            let mut s = v[b].clone();
            self.fft3(&mut s, &self.forward);
            for z in &mut s {
                *z /= (GRID * GRID * GRID) as f64;
            }
            s
        });
        let mut u_spec: [Vec<Complex<f64>>; 3] = std::array::from_fn(|b| {
            let mut s = u[b].clone();
            self.fft3(&mut s, &self.forward);
            for z in &mut s {
                *z /= (GRID * GRID * GRID) as f64;
            }
            s
        });

        let deriv = |spec: &mut [Vec<Complex<f64>>; 3], axis: usize, b: usize| -> Vec<Complex<f64>> {
            let mut d = spec[b].clone();
            for i0 in 0..GRID {
                for i1 in 0..GRID {
                    for i2 in 0..GRID {
                        let freq = [unwrap_freq(i0), unwrap_freq(i1), unwrap_freq(i2)][axis] as f64;
                        let z = d[idx(i0, i1, i2)];
                        d[idx(i0, i1, i2)] = Complex::new(-z.im * freq, z.re * freq);
                    }
                }
            }
            self.fft3(&mut d, &self.inverse);
            d
        };

        // w_b = Σ_a u_a ∂_a v_b (+ v_a ∂_a u_b when symmetrizing)
        let mut w: Vec<Vec<Complex<f64>>> = (0..3)
            .map(|_| vec![Complex::default(); GRID * GRID * GRID])
            .collect();
        for b in 0..3 {
            for a in 0..3 {
                let dv = deriv(&mut v_spec, a, b);
                for g in 0..GRID * GRID * GRID {
                    w[b][g] += u[a][g] * dv[g];
                }
                if symmetrize {
                    let du = deriv(&mut u_spec, a, b);
                    for g in 0..GRID * GRID * GRID {
                        w[b][g] += v[a][g] * du[g];
                    }
                }
            }
        }

        // forward transform and Leray projection
        for comp in &mut w {
            self.fft3(comp, &self.forward);
            for z in comp.iter_mut() {
                *z /= (GRID * GRID * GRID) as f64;
            }
        }
        for i0 in 0..GRID {
            for i1 in 0..GRID {
                for i2 in 0..GRID {
                    let kappa = [
                        unwrap_freq(i0) as f64,
                        unwrap_freq(i1) as f64,
                        unwrap_freq(i2) as f64,
                    ];
                    let n2 = kappa[0] * kappa[0] + kappa[1] * kappa[1] + kappa[2] * kappa[2];
                    let g = idx(i0, i1, i2);
                    if n2 == 0.0 {
                        for comp in &mut w {
                            comp[g] = Complex::default();
                        }
                        continue;
                    }
                    let dot = kappa[0] * w[0][g] + kappa[1] * w[1][g] + kappa[2] * w[2][g];
                    for (c, comp) in w.iter_mut().enumerate() {
                        comp[g] -= dot * kappa[c] / n2;
                    }
                }
            }
        }
        w
    }

    /// Raw trig amplitude of the spectral result at a canonical mode.
    fn read_wave(w: &[Vec<Complex<f64>>], k: ModeIndex) -> [f64; 3] {
        let [k1, k2, k3] = k.components();
        let pos = idx(wrap(k1), wrap(k2), wrap(k3));
        let neg = idx(wrap(-k1), wrap(-k2), wrap(-k3));
        let mut amp = [0.0; 3];
        for c in 0..3 {
            match k.sign_class() {
                // a = Re(ŵ(k) + ŵ(−k))
                SignClass::Plus => amp[c] = (w[c][pos] + w[c][neg]).re,
                // basis e_k = sin(kξ) at a Minus mode: c = Im(ŵ(−k) − ŵ(k))
                SignClass::Minus => amp[c] = (w[c][neg] - w[c][pos]).im,
            }
        }
        amp
    }

    /// Oracle for the symmetrized pair interaction: trig amplitudes of
    /// `P[(u·∇)v + (v·∇)u]` for `u = a_j e_j`, `v = a_l e_l`.
    pub fn pair_oracle(
        &self,
        j: ModeIndex,
        a_j: [f64; 3],
        l: ModeIndex,
        a_l: [f64; 3],
        at: &[ModeIndex],
    ) -> Vec<[f64; 3]> {
        let w = self.advect_and_project(&[(j, a_j)], &[(l, a_l)], true);
        at.iter().map(|k| Self::read_wave(&w, *k)).collect()
    }

    /// Oracle for the truncated field-level bilinear term `B_m(u,v)`.
    pub fn bilinear_oracle(&self, u: &GalerkinField, v: &GalerkinField) -> GalerkinField {
        let norm = basis_normalization();
        let to_waves = |f: &GalerkinField| -> Vec<(ModeIndex, [f64; 3])> {
            f.sparse_entries()
                .into_iter()
                .map(|(k, c)| {
                    let idx = f.modes().index_of(&k).unwrap();
                    let amp = f.modes().basis(idx).vector(c);
                    (k, [norm * amp[0], norm * amp[1], norm * amp[2]])
                })
                .collect()
        };
        let w = self.advect_and_project(&to_waves(u), &to_waves(v), false);
        let modes = u.modes().clone();
        let mut out = GalerkinField::zero(modes.clone());
        for i in 0..modes.len() {
            let k = modes.mode(i);
            let amp = Self::read_wave(&w, k);
            let coords = modes.basis(i).coords([
                amp[0] / norm,
                amp[1] / norm,
                amp[2] / norm,
            ]);
            out.set_coeff(i, coords);
        }
        out
    }
}

/// Minus the sign bit: sin-class sanity check for the extraction above.
pub fn read_back_roundtrip(oracle: &GridOracle, waves: &[(ModeIndex, [f64; 3])]) -> Vec<[f64; 3]> {
    let u = oracle.synthesize(waves);
    let mut spec: Vec<Vec<Complex<f64>>> = u.to_vec();
    for comp in &mut spec {
        oracle.fft3(comp, &oracle.forward);
        for z in comp.iter_mut() {
            *z /= (GRID * GRID * GRID) as f64;
        }
    }
    waves
        .iter()
        .map(|(k, _)| GridOracle::read_wave(&spec, *k))
        .collect()
}
