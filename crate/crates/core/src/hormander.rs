//! Bracket span diagnostics for the low-frequency hypoellipticity structure:
//! the mixing sets `Y_k` that carry noise into the unforced modes, and a
//! numerical certificate for the restricted spanning condition built from the
//! constant bracket families plus sampled affine ones.
//!
//! For the quadratic drift the bracket levels close quickly: level-0 vectors
//! are the forcing columns, level-1 vectors are affine in the state, and
//! level-2 vectors are again constant and equal (up to sign) to symmetrized
//! pair interactions of two forcing columns. The constant families do the
//! structural work; state samples only probe the affine part.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::field::GalerkinField;
use crate::lattice::{perp_basis, ModeIndex};
use crate::noise::CovarianceOperator;
use crate::noise::NoiseStream;
use crate::nonlinearity::{pair_interaction, InteractionTable};
use crate::tangent::LowSpace;
use crate::vec3;

#[derive(Debug, Error)]
pub enum HormanderError {
    #[error("mode {0:?} must lie in the degenerate sublattice Z_l({1})")]
    NotDegenerate([i32; 3], u32),
    #[error("cutoff ordering violated: need n0 < n <= m, got n0={n0}, n={n}, m={m}")]
    CutoffOrder { n0: u32, n: u32, m: u32 },
    #[error(transparent)]
    Tangent(#[from] crate::tangent::TangentError),
}

/// The i-th column of `q_k` as a 3-vector in homespace coordinates.
fn block_column(basis: &crate::lattice::PerpBasis, block: [[f64; 2]; 2], col: usize) -> [f64; 3] {
    basis.vector([block[0][col], block[1][col]])
}

/// One generator of a mixing set: an admissible forced pair `(j,l)` with
/// covariance columns, and the vector it produces at the unforced mode `k`.
#[derive(Debug, Clone, Serialize)]
pub struct MixingGenerator {
    pub j: [i32; 3],
    pub l: [i32; 3],
    pub col_j: usize,
    pub col_l: usize,
    /// the resulting vector in `k⊥`, as a 3-vector
    pub vector: [f64; 3],
    /// the same vector in the `k⊥` basis coordinates
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct MixingSet {
    pub k: [i32; 3],
    pub generators: Vec<MixingGenerator>,
    pub pairs_used: usize,
    /// rank of the span inside `k⊥` (0, 1 or 2)
    pub rank: usize,
    pub singular_values: [f64; 2],
}

/// Admissibility of a forced pair for the mode `k`: both outside the
/// degenerate sublattice, summing to `k`, non-parallel, different lengths.
pub fn admissible_pair(k: &ModeIndex, j: &ModeIndex, l: &ModeIndex, n0: u32) -> bool {
    j.sup_norm() > n0
        && l.sup_norm() > n0
        && j.checked_add(l).map(|s| s == *k).unwrap_or(false)
        && !j.is_parallel_to(l)
        && j.norm2_int() != l.norm2_int()
}

/// Enumerate the mixing set `Y_k` for an unforced mode `k`: all vectors
/// `B̃_k(q_j^i e_j, q_l^{i'} e_l)` over admissible forced pairs with
/// `|j|_∞, |l|_∞ ≤ search_sup`, and the rank of their span inside `k⊥`.
///
/// A pair touches the mode `k` when `k` is its sum wave `j+l = k` or its
/// difference wave `j−l = ±k`; both channels are searched. (Sine-class modes
/// on a lattice axis are reachable only through the difference wave: any
/// same-class pair summing to them is parallel.) Blocks outside the stored
/// lattice are extended by the isotropic rule when the operator carries one;
/// otherwise such pairs are skipped.
pub fn mixing_set(
    k: ModeIndex,
    q: &CovarianceOperator,
    search_sup: u32,
) -> Result<MixingSet, HormanderError> {
    let n0 = q.degeneracy_cutoff();
    if k.sup_norm() > n0 {
        return Err(HormanderError::NotDegenerate(k.components(), n0));
    }
    let modes = q.modes();
    let lookup = |m: &ModeIndex| -> Option<([[f64; 2]; 2], crate::lattice::PerpBasis)> {
        if let Some(idx) = modes.index_of(m) {
            let b = q.block(idx);
            (b != [[0.0; 2]; 2]).then_some((b, *modes.basis(idx)))
        } else if let Some(r) = q.regularity() {
            let w = m.norm2().powf(-r);
            Some(([[w, 0.0], [0.0, w]], perp_basis(*m)))
        } else {
            None
        }
    };
    let k_basis = modes
        .index_of(&k)
        .map(|i| *modes.basis(i))
        .unwrap_or_else(|| perp_basis(k));

    let s = search_sup as i32;
    let mut generators = Vec::new();
    let mut pairs_used = 0usize;
    for j1 in -s..=s {
        for j2 in -s..=s {
            for j3 in -s..=s {
                let Ok(j) = ModeIndex::new([j1, j2, j3]) else {
                    continue;
                };
                // partners through the sum wave and the two difference waves
                let partners = [
                    k.checked_sub(&j),
                    j.checked_sub(&k),
                    j.checked_add(&k),
                ];
                let mut seen: [Option<ModeIndex>; 3] = [None; 3];
                for (slot, partner) in partners.into_iter().enumerate() {
                    let Some(l) = partner else { continue };
                    if seen[..slot].iter().flatten().any(|p| *p == l) {
                        continue;
                    }
                    seen[slot] = Some(l);
                    if l.sup_norm() > search_sup
                        || j.sup_norm() <= n0
                        || l.sup_norm() <= n0
                        || j.is_parallel_to(&l)
                        || j.norm2_int() == l.norm2_int()
                    {
                        continue;
                    }
                    // unordered enumeration: keep j lexicographically below l
                    if j.components() > l.components() {
                        continue;
                    }
                    let Some((qj, bj)) = lookup(&j) else { continue };
                    let Some((ql, bl)) = lookup(&l) else { continue };
                    pairs_used += 1;
                    for col_j in 0..2 {
                        for col_l in 0..2 {
                            let a_j = block_column(&bj, qj, col_j);
                            let a_l = block_column(&bl, ql, col_l);
                            let pi = pair_interaction(j, a_j, l, a_l)
                                .expect("covariance columns are perpendicular");
                            let vector = pi.contribution_at(&k);
                            let coords = [
                                vec3::dot(vector, k_basis.e1),
                                vec3::dot(vector, k_basis.e2),
                            ];
                            generators.push(MixingGenerator {
                                j: j.components(),
                                l: l.components(),
                                col_j,
                                col_l,
                                vector,
                                coords,
                            });
                        }
                    }
                }
            }
        }
    }

    let (rank, singular_values) = span_rank(&generators);
    Ok(MixingSet {
        k: k.components(),
        generators,
        pairs_used,
        rank,
        singular_values,
    })
}

fn span_rank(generators: &[MixingGenerator]) -> (usize, [f64; 2]) {
    if generators.is_empty() {
        return (0, [0.0, 0.0]);
    }
    let stack = DMatrix::from_fn(generators.len(), 2, |r, c| generators[r].coords[c]);
    let svd = stack.svd(false, false);
    let sv = &svd.singular_values;
    let s0 = sv[0];
    let s1 = if sv.len() > 1 { sv[1] } else { 0.0 };
    let rank = [s0, s1].iter().filter(|&&s| s > 1e-10 * s0.max(1e-300)).count();
    (rank, [s0, s1])
}

/// The three bracket families for the low-frequency equation, by generating
/// data. Level 0 and level 2 are constant in the state; level 1 is affine.
#[derive(Debug, Clone)]
pub enum BracketVector {
    /// `q_k^i e_k`
    Forcing { mode: ModeIndex, column: usize },
    /// `[A y + B^l(y,y), q_k^i e_k]`
    DriftBracket { mode: ModeIndex, column: usize },
    /// `[q_l^j e_l, [A y + B^l(y,y), q_k^i e_k]]`
    DoubleBracket {
        inner_mode: ModeIndex,
        inner_column: usize,
        outer_mode: ModeIndex,
        outer_column: usize,
    },
}

impl BracketVector {
    pub fn level(&self) -> u8 {
        match self {
            BracketVector::Forcing { .. } => 0,
            BracketVector::DriftBracket { .. } => 1,
            BracketVector::DoubleBracket { .. } => 2,
        }
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, BracketVector::DriftBracket { .. })
    }

    /// Evaluate in low-space coordinates at the state `y`.
    pub fn value_at(
        &self,
        table: &InteractionTable,
        low: &LowSpace,
        q: &CovarianceOperator,
        y: &GalerkinField,
    ) -> DVector<f64> {
        let modes = table.modes();
        let column_field = |mode: &ModeIndex, col: usize| -> GalerkinField {
            let idx = modes.index_of(mode).expect("mode in lattice");
            let b = q.block(idx);
            GalerkinField::from_entries(modes.clone(), &[(*mode, [b[0][col], b[1][col]])])
                .expect("column field")
        };
        match self {
            BracketVector::Forcing { mode, column } => {
                let f = column_field(mode, *column);
                DVector::from_vec(f.low_coords(&low.indices))
            }
            BracketVector::DriftBracket { mode, column } => {
                let f = column_field(mode, *column);
                let idx = modes.index_of(mode).unwrap();
                let mut out = f.scaled(modes.norm2(idx));
                let tilde = table.convection_tilde(&f, y).expect("tilde");
                out.axpy(1.0, &tilde).unwrap();
                DVector::from_vec(out.low_coords(&low.indices))
            }
            BracketVector::DoubleBracket { .. } => {
                let mut out = DVector::zeros(low.dim);
                for (pos, val) in self.sparse_constant(table, low, q).expect("constant bracket") {
                    out[pos] += val;
                }
                out
            }
        }
    }

    /// Nonzero low-space coordinates of a constant bracket vector; `None`
    /// for the state-dependent level-1 family.
    pub fn sparse_constant(
        &self,
        table: &InteractionTable,
        low: &LowSpace,
        q: &CovarianceOperator,
    ) -> Option<Vec<(usize, f64)>> {
        let modes = table.modes();
        match self {
            BracketVector::Forcing { mode, column } => {
                let idx = modes.index_of(mode).expect("mode in lattice");
                let li = low.low_of[idx]? as usize;
                let b = q.block(idx);
                Some(vec![(2 * li, b[0][*column]), (2 * li + 1, b[1][*column])])
            }
            BracketVector::DriftBracket { .. } => None,
            BracketVector::DoubleBracket {
                inner_mode,
                inner_column,
                outer_mode,
                outer_column,
            } => {
                let col3 = |mode: &ModeIndex, col: usize| -> [f64; 3] {
                    let idx = modes.index_of(mode).expect("mode in lattice");
                    block_column(modes.basis(idx), q.block(idx), col)
                };
                let pi = pair_interaction(
                    *inner_mode,
                    col3(inner_mode, *inner_column),
                    *outer_mode,
                    col3(outer_mode, *outer_column),
                )
                .expect("covariance columns are perpendicular");
                let norm = crate::nonlinearity::basis_normalization();
                let mut out = Vec::new();
                for (mode, vec) in &pi.contributions {
                    let Some(idx) = modes.index_of(mode) else { continue };
                    let Some(li) = low.low_of[idx] else { continue };
                    let coords = modes.basis(idx).coords(*vec);
                    out.push((2 * li as usize, -norm * coords[0]));
                    out.push((2 * li as usize + 1, -norm * coords[1]));
                }
                Some(out)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerModeReport {
    pub k: [i32; 3],
    pub rank: usize,
    pub pairs_used: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpanCertificate {
    pub n0: u32,
    pub n: u32,
    pub m: u32,
    /// smallest singular value of the stacked generators, minimized over samples
    pub delta_hat: f64,
    /// the same at the constant (state-independent) generators only
    pub delta_constant: f64,
    pub per_sample: Vec<f64>,
    pub per_k: Vec<PerModeReport>,
    pub generators_level0: usize,
    pub generators_level1: usize,
    pub generators_level2: usize,
    /// low-space coordinates of the direction worst covered, at the worst sample
    pub witness: Vec<f64>,
    pub spanned: bool,
}

/// Assemble the bracket families for the covariance `q` and report the
/// smallest stacked singular value over `y = 0` plus Gaussian sample states.
pub fn bracket_span_check(
    table: &InteractionTable,
    q: &CovarianceOperator,
    n: u32,
    gaussian_samples: usize,
    seed: u64,
) -> Result<SpanCertificate, HormanderError> {
    let modes = table.modes();
    let n0 = q.degeneracy_cutoff();
    let m = modes.cutoff();
    if !(n0 < n && n <= m) {
        return Err(HormanderError::CutoffOrder { n0, n, m });
    }
    let low = LowSpace::new(modes, n)?;

    // forced generator columns inside the low space
    let mut forced: Vec<(ModeIndex, usize)> = Vec::new();
    for &fi in &low.indices {
        if q.is_forced(fi) {
            forced.push((modes.mode(fi), 0));
            forced.push((modes.mode(fi), 1));
        }
    }

    let constant: Vec<BracketVector> = forced
        .iter()
        .map(|(k, c)| BracketVector::Forcing { mode: *k, column: *c })
        .chain(forced.iter().flat_map(|(ki, ci)| {
            forced.iter().map(move |(ko, co)| BracketVector::DoubleBracket {
                inner_mode: *ki,
                inner_column: *ci,
                outer_mode: *ko,
                outer_column: *co,
            })
        }))
        .collect();
    let level0 = forced.len();
    let level2 = constant.len() - level0;

    let zero = GalerkinField::zero(modes.clone());
    let mut gram_const = DMatrix::<f64>::zeros(low.dim, low.dim);
    for bv in &constant {
        let entries = bv
            .sparse_constant(table, &low, q)
            .expect("constant generator");
        for &(r, a) in &entries {
            for &(c, b) in &entries {
                gram_const[(r, c)] += a * b;
            }
        }
    }
    let delta_constant = smallest_delta(&gram_const).0;

    // sample states: zero plus Gaussians
    let stream = NoiseStream::new(seed, 0);
    let mut samples = vec![zero.clone()];
    for s in 0..gaussian_samples {
        let mut y = GalerkinField::zero(modes.clone());
        for idx in 0..modes.len() {
            let (a, b) = stream.normal_pair(s as u64, idx as u32);
            y.set_coeff(idx, [a, b]);
        }
        samples.push(y);
    }

    let mut per_sample = Vec::with_capacity(samples.len());
    let mut worst: Option<(usize, f64, DVector<f64>)> = None;
    for (si, y) in samples.iter().enumerate() {
        let mut gram = gram_const.clone();
        for (k, c) in &forced {
            let bv = BracketVector::DriftBracket { mode: *k, column: *c };
            let v = bv.value_at(table, &low, q, y);
            gram.ger(1.0, &v, &v, 1.0);
        }
        let (delta, vecmin) = smallest_delta(&gram);
        per_sample.push(delta);
        if worst.as_ref().map(|(_, d, _)| delta < *d).unwrap_or(true) {
            worst = Some((si, delta, vecmin));
        }
    }
    let delta_hat = worst.as_ref().map(|(_, d, _)| *d).unwrap_or(0.0);
    let witness = worst.map(|(_, _, v)| v.iter().cloned().collect()).unwrap_or_default();

    // per-unforced-mode mixing reports, restricted to the low forced band
    let mut per_k = Vec::new();
    for &fi in &low.indices {
        let k = modes.mode(fi);
        if k.sup_norm() <= n0 {
            let ms = mixing_set(k, q, n)?;
            per_k.push(PerModeReport {
                k: k.components(),
                rank: ms.rank,
                pairs_used: ms.pairs_used,
            });
        }
    }

    // spanning threshold follows the rank rule: singular values above
    // 1e-10 times the largest
    let sigma_max = gram_largest_sigma(&gram_const).max(1e-300);
    let spanned = delta_hat > 1e-10 * sigma_max;

    Ok(SpanCertificate {
        n0,
        n,
        m,
        delta_hat,
        delta_constant,
        per_sample,
        per_k,
        generators_level0: level0,
        generators_level1: forced.len(),
        generators_level2: level2,
        witness,
        spanned,
    })
}

/// Smallest singular value of the stacked generator matrix, computed from
/// the Gram matrix, with the corresponding direction.
fn smallest_delta(gram: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = gram.clone().symmetric_eigen();
    let mut min_idx = 0;
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let lambda = eig.eigenvalues[min_idx].max(0.0);
    (lambda.sqrt(), eig.eigenvectors.column(min_idx).into_owned())
}

fn gram_largest_sigma(gram: &DMatrix<f64>) -> f64 {
    let eig = gram.clone().symmetric_eigen();
    eig.eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}
