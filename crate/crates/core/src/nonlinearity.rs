//! The truncated convection term `B_m(u,v) = π_m P[(u·∇)v]` evaluated exactly
//! over the lattice, together with the per-pair interaction formulas that
//! drive the bracket and mixing-set computations.
//!
//! A single trigonometric mode pair `(a_j e_j, a_l e_l)` interacts only at the
//! wavevectors `±(j+l)` and `±(j−l)`. The contribution follows from the four
//! product-to-sum identities for cos/sin, one per combination of sign classes,
//! with the Leray projection `P_k` applied at each receiving mode. Pair
//! contributions are reported in the raw trigonometric convention; field-level
//! evaluation folds in the basis normalization `√2/(2π)^{3/2}` once.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::field::{FieldError, GalerkinField};
use crate::lattice::{ModeIndex, ModeSet, SignClass};
use crate::vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearityError {
    #[error("coefficient is not orthogonal to its mode: |a·{0:?}| = {1:e}")]
    InvalidCoefficient([i32; 3], f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Amplitude of the L2-normalized basis functions relative to raw cos/sin:
/// `ê_k = (√2/(2π)^{3/2}) e_k`. Field-level bilinear terms carry one factor
/// of this constant relative to the raw pair formulas.
pub fn basis_normalization() -> f64 {
    2.0_f64.sqrt() / (2.0 * PI).powf(1.5)
}

#[derive(Clone, Copy)]
enum Trig {
    Cos,
    Sin,
}

/// Contributions of `B(a_j e_j, a_l e_l) = P[(a_j e_j ·∇)(a_l e_l)]` in the
/// raw trigonometric convention: at most one receiving mode per wavevector
/// `j+l` and `j−l`, each carrying a 3-vector orthogonal to it.
pub(crate) fn convect_pair(
    j: ModeIndex,
    a_j: [f64; 3],
    l: ModeIndex,
    a_l: [f64; 3],
) -> [Option<(ModeIndex, [f64; 3])>; 2] {
    let s = vec3::dot(a_j, l.as_f64());
    // d/dξ of the trigonometric factor of a_l e_l
    let (deriv_trig, deriv_sign) = match l.sign_class() {
        SignClass::Plus => (Trig::Sin, -1.0),
        SignClass::Minus => (Trig::Cos, 1.0),
    };
    // product-to-sum: e_j(ξ)·t_l(ξ) = c_sum·T(j+l) + c_diff·T(j−l)
    let (term_trig, c_sum, c_diff) = match (j.sign_class(), deriv_trig) {
        (SignClass::Plus, Trig::Cos) => (Trig::Cos, 0.5, 0.5),
        (SignClass::Plus, Trig::Sin) => (Trig::Sin, 0.5, -0.5),
        (SignClass::Minus, Trig::Cos) => (Trig::Sin, 0.5, 0.5),
        (SignClass::Minus, Trig::Sin) => (Trig::Cos, -0.5, 0.5),
    };
    let sum = j.checked_add(&l).map(|w| (w, c_sum));
    let diff = j.checked_sub(&l).map(|w| (w, c_diff));
    let mut out = [None, None];
    for (slot, term) in [sum, diff].into_iter().enumerate() {
        let Some((w, coef)) = term else { continue };
        // route the raw trig wave onto the basis mode of its sign class
        let (mode, orient) = match (term_trig, w.sign_class()) {
            (Trig::Cos, SignClass::Plus) => (w, 1.0),
            (Trig::Cos, SignClass::Minus) => (w.negate(), 1.0),
            (Trig::Sin, SignClass::Minus) => (w, 1.0),
            (Trig::Sin, SignClass::Plus) => (w.negate(), -1.0),
        };
        let amp = s * deriv_sign * coef * orient;
        let v = crate::lattice::project_perp(mode, vec3::scale(a_l, amp));
        out[slot] = Some((mode, v));
    }
    out
}

/// Contributions of the symmetrized term `B̃(a_j e_j, a_l e_l) =
/// B(a_j e_j, a_l e_l) + B(a_l e_l, a_j e_j)`, merged per receiving mode.
pub(crate) fn btilde_pair(
    j: ModeIndex,
    a_j: [f64; 3],
    l: ModeIndex,
    a_l: [f64; 3],
) -> [Option<(ModeIndex, [f64; 3])>; 2] {
    let first = convect_pair(j, a_j, l, a_l);
    let second = convect_pair(l, a_l, j, a_j);
    // slot 0 holds the j+l = l+j wave, slot 1 the j−l = −(l−j) wave; the
    // routed basis mode agrees between the two calls.
    let mut out = [None, None];
    for slot in 0..2 {
        out[slot] = match (first[slot], second[slot]) {
            (Some((m, v)), Some((m2, w))) => {
                debug_assert_eq!(m, m2);
                Some((m, vec3::add(v, w)))
            }
            (one, None) => one,
            (None, one) => one,
        };
    }
    out
}

/// A single symmetrized pair interaction, in the raw trig convention.
#[derive(Debug, Clone)]
pub struct PairInteraction {
    pub j: ModeIndex,
    pub a_j: [f64; 3],
    pub l: ModeIndex,
    pub a_l: [f64; 3],
    /// Receiving modes and their 3-vector contributions, canonical order.
    pub contributions: Vec<(ModeIndex, [f64; 3])>,
}

impl PairInteraction {
    pub fn contribution_at(&self, k: &ModeIndex) -> [f64; 3] {
        self.contributions
            .iter()
            .find(|(m, _)| m == k)
            .map(|(_, v)| *v)
            .unwrap_or([0.0; 3])
    }
}

/// Coefficients of `B̃(a_j e_j, a_l e_l)` on the real trigonometric basis.
/// Requires `a_j ⊥ j` and `a_l ⊥ l`.
pub fn pair_interaction(
    j: ModeIndex,
    a_j: [f64; 3],
    l: ModeIndex,
    a_l: [f64; 3],
) -> Result<PairInteraction, NonlinearityError> {
    for (k, a) in [(j, a_j), (l, a_l)] {
        let d = k.dot(a).abs();
        if d > 1e-12 * vec3::norm(a).max(1.0) * vec3::norm(k.as_f64()) {
            return Err(NonlinearityError::InvalidCoefficient(k.components(), d));
        }
    }
    let mut contributions: Vec<(ModeIndex, [f64; 3])> = btilde_pair(j, a_j, l, a_l)
        .into_iter()
        .flatten()
        .collect();
    contributions.sort_by_key(|(m, _)| *m);
    Ok(PairInteraction {
        j,
        a_j,
        l,
        a_l,
        contributions,
    })
}

const EMPTY_OUT: OutBlock = OutBlock {
    out: 0,
    tensor: [[[0.0; 2]; 2]; 2],
};

/// Contribution of one unordered mode pair to one receiving mode:
/// `c_i = Σ_{s,u} tensor[i][s][u]·a[s]·b[u]` with `a` at the lower-index mode
/// and `b` at the higher-index mode, all in `k⊥` coordinates. Includes the
/// basis normalization.
#[derive(Clone, Copy)]
struct OutBlock {
    out: u32,
    tensor: [[[f64; 2]; 2]; 2],
}

struct PairEntry {
    p: u32,
    q: u32,
    n_out: u8,
    outs: [OutBlock; 2],
}

struct AdjEntry {
    entry: u32,
    /// whether the adjacency owner sits in the `p` slot of the entry
    owner_is_p: bool,
}

/// Precomputed interaction tensors for every unordered mode pair of a
/// `ModeSet`, for fast evaluation of `B(u,u)` and `B̃(h,x)`.
pub struct InteractionTable {
    modes: Arc<ModeSet>,
    entries: Vec<PairEntry>,
    adj_offsets: Vec<u32>,
    adj: Vec<AdjEntry>,
}

impl InteractionTable {
    pub fn new(modes: &Arc<ModeSet>) -> Arc<InteractionTable> {
        let norm = basis_normalization();
        let m = modes.len();
        let mut entries = Vec::new();
        for p in 0..m {
            let kp = modes.mode(p);
            let bp = *modes.basis(p);
            for q in p..m {
                let kq = modes.mode(q);
                let bq = *modes.basis(q);
                let mut outs = [EMPTY_OUT; 2];
                let mut n_out = 0u8;
                // probe with all four basis-vector combinations
                let mut blocks: [Option<OutBlock>; 2] = [None, None];
                for s in 0..2 {
                    for u in 0..2 {
                        let a = if s == 0 { bp.e1 } else { bp.e2 };
                        let b = if u == 0 { bq.e1 } else { bq.e2 };
                        let contrib = btilde_pair(kp, a, kq, b);
                        for (slot, c) in contrib.into_iter().enumerate() {
                            let Some((mode, vec)) = c else { continue };
                            let Some(out_idx) = modes.index_of(&mode) else {
                                continue;
                            };
                            let basis = modes.basis(out_idx);
                            let coords = basis.coords(vec);
                            let block = blocks[slot].get_or_insert(OutBlock {
                                out: out_idx as u32,
                                tensor: [[[0.0; 2]; 2]; 2],
                            });
                            debug_assert_eq!(block.out, out_idx as u32);
                            block.tensor[0][s][u] = norm * coords[0];
                            block.tensor[1][s][u] = norm * coords[1];
                        }
                    }
                }
                for block in blocks.into_iter().flatten() {
                    let nonzero = block
                        .tensor
                        .iter()
                        .flatten()
                        .flatten()
                        .any(|&t| t != 0.0);
                    if nonzero {
                        outs[n_out as usize] = block;
                        n_out += 1;
                    }
                }
                if n_out > 0 {
                    entries.push(PairEntry {
                        p: p as u32,
                        q: q as u32,
                        n_out,
                        outs,
                    });
                }
            }
        }
        // CSR adjacency: entries touching each mode
        let mut counts = vec![0u32; m];
        for e in &entries {
            counts[e.p as usize] += 1;
            if e.q != e.p {
                counts[e.q as usize] += 1;
            }
        }
        let mut adj_offsets = vec![0u32; m + 1];
        for i in 0..m {
            adj_offsets[i + 1] = adj_offsets[i] + counts[i];
        }
        let mut cursor = adj_offsets.clone();
        let mut adj: Vec<AdjEntry> = Vec::with_capacity(adj_offsets[m] as usize);
        adj.resize_with(adj_offsets[m] as usize, || AdjEntry {
            entry: 0,
            owner_is_p: false,
        });
        for (i, e) in entries.iter().enumerate() {
            let slot = cursor[e.p as usize];
            adj[slot as usize] = AdjEntry {
                entry: i as u32,
                owner_is_p: true,
            };
            cursor[e.p as usize] += 1;
            if e.q != e.p {
                let slot = cursor[e.q as usize];
                adj[slot as usize] = AdjEntry {
                    entry: i as u32,
                    owner_is_p: false,
                };
                cursor[e.q as usize] += 1;
            }
        }
        Arc::new(InteractionTable {
            modes: modes.clone(),
            entries,
            adj_offsets,
            adj,
        })
    }

    pub fn modes(&self) -> &Arc<ModeSet> {
        &self.modes
    }

    fn check_field(&self, u: &GalerkinField) -> Result<(), NonlinearityError> {
        if u.cutoff() != self.modes.cutoff() {
            return Err(FieldError::CutoffMismatch(self.modes.cutoff(), u.cutoff()).into());
        }
        Ok(())
    }

    /// `B_m(u) = B_m(u,u)`, the drift convection term.
    pub fn convection(&self, u: &GalerkinField) -> Result<GalerkinField, NonlinearityError> {
        self.check_field(u)?;
        let x = u.coeffs();
        let mut out = vec![0.0; x.len()];
        for e in &self.entries {
            let (p, q) = (e.p as usize, e.q as usize);
            let a = [x[2 * p], x[2 * p + 1]];
            let b = [x[2 * q], x[2 * q + 1]];
            let w = if p == q { 0.5 } else { 1.0 };
            for o in &e.outs[..e.n_out as usize] {
                let t = &o.tensor;
                let oi = 2 * o.out as usize;
                out[oi] += w
                    * (t[0][0][0] * a[0] * b[0]
                        + t[0][0][1] * a[0] * b[1]
                        + t[0][1][0] * a[1] * b[0]
                        + t[0][1][1] * a[1] * b[1]);
                out[oi + 1] += w
                    * (t[1][0][0] * a[0] * b[0]
                        + t[1][0][1] * a[0] * b[1]
                        + t[1][1][0] * a[1] * b[0]
                        + t[1][1][1] * a[1] * b[1]);
            }
        }
        Ok(GalerkinField::from_coeffs(self.modes.clone(), out))
    }

    /// `B̃_m(h, x) = B_m(h,x) + B_m(x,h)`, the linearized convection term.
    pub fn convection_tilde(
        &self,
        h: &GalerkinField,
        x: &GalerkinField,
    ) -> Result<GalerkinField, NonlinearityError> {
        self.check_field(h)?;
        self.check_field(x)?;
        let hc = h.coeffs();
        let xc = x.coeffs();
        let mut out = vec![0.0; xc.len()];
        for e in &self.entries {
            let (p, q) = (e.p as usize, e.q as usize);
            for o in &e.outs[..e.n_out as usize] {
                let t = &o.tensor;
                let oi = 2 * o.out as usize;
                if p == q {
                    let a = [hc[2 * p], hc[2 * p + 1]];
                    let b = [xc[2 * q], xc[2 * q + 1]];
                    accumulate(&mut out[oi..oi + 2], t, a, b);
                } else {
                    let a = [hc[2 * p], hc[2 * p + 1]];
                    let b = [xc[2 * q], xc[2 * q + 1]];
                    accumulate(&mut out[oi..oi + 2], t, a, b);
                    let a = [xc[2 * p], xc[2 * p + 1]];
                    let b = [hc[2 * q], hc[2 * q + 1]];
                    accumulate(&mut out[oi..oi + 2], t, a, b);
                }
            }
        }
        Ok(GalerkinField::from_coeffs(self.modes.clone(), out))
    }

    /// Low-space columns of `h ↦ π_low B̃_m(h, x)` for `h` ranging over the
    /// two unit coefficients of mode `owner`. `low_of[full] = Some(low)` maps
    /// full-lattice mode indices into the low enumeration. Writes the two
    /// columns (components 1 and 2 of the owner) into `col0`/`col1`, both of
    /// length `2·N_low`.
    pub fn tilde_columns_low(
        &self,
        owner: usize,
        x: &GalerkinField,
        low_of: &[Option<u32>],
        col0: &mut [f64],
        col1: &mut [f64],
    ) {
        col0.fill(0.0);
        col1.fill(0.0);
        let xc = x.coeffs();
        let lo = self.adj_offsets[owner] as usize;
        let hi = self.adj_offsets[owner + 1] as usize;
        for a in &self.adj[lo..hi] {
            let e = &self.entries[a.entry as usize];
            let other = if a.owner_is_p { e.q } else { e.p } as usize;
            let b = [xc[2 * other], xc[2 * other + 1]];
            for o in &e.outs[..e.n_out as usize] {
                let Some(low) = low_of[o.out as usize] else {
                    continue;
                };
                let oi = 2 * low as usize;
                let t = &o.tensor;
                if a.owner_is_p {
                    // owner occupies slot s, x the slot u
                    col0[oi] += t[0][0][0] * b[0] + t[0][0][1] * b[1];
                    col0[oi + 1] += t[1][0][0] * b[0] + t[1][0][1] * b[1];
                    col1[oi] += t[0][1][0] * b[0] + t[0][1][1] * b[1];
                    col1[oi + 1] += t[1][1][0] * b[0] + t[1][1][1] * b[1];
                } else {
                    // owner occupies slot u, x the slot s
                    col0[oi] += t[0][0][0] * b[0] + t[0][1][0] * b[1];
                    col0[oi + 1] += t[1][0][0] * b[0] + t[1][1][0] * b[1];
                    col1[oi] += t[0][0][1] * b[0] + t[0][1][1] * b[1];
                    col1[oi + 1] += t[1][0][1] * b[0] + t[1][1][1] * b[1];
                }
            }
        }
    }
}

#[inline]
fn accumulate(out: &mut [f64], t: &[[[f64; 2]; 2]; 2], a: [f64; 2], b: [f64; 2]) {
    out[0] += t[0][0][0] * a[0] * b[0]
        + t[0][0][1] * a[0] * b[1]
        + t[0][1][0] * a[1] * b[0]
        + t[0][1][1] * a[1] * b[1];
    out[1] += t[1][0][0] * a[0] * b[0]
        + t[1][0][1] * a[0] * b[1]
        + t[1][1][0] * a[1] * b[0]
        + t[1][1][1] * a[1] * b[1];
}

/// The general truncated bilinear term `B_m(u,v) = π_m P[(u·∇)v]`, summed
/// directly over populated mode pairs. Exact but not the fast path; the drift
/// and tangent flows use [`InteractionTable::convection`] and
/// [`InteractionTable::convection_tilde`].
pub fn bilinear(u: &GalerkinField, v: &GalerkinField) -> Result<GalerkinField, NonlinearityError> {
    if u.cutoff() != v.cutoff() {
        return Err(FieldError::CutoffMismatch(u.cutoff(), v.cutoff()).into());
    }
    let modes = u.modes();
    let norm = basis_normalization();
    let mut out = GalerkinField::zero(modes.clone());
    let populated = |f: &GalerkinField| -> Vec<(usize, [f64; 3])> {
        (0..modes.len())
            .filter_map(|idx| {
                let c = f.coeff(idx);
                (c != [0.0, 0.0]).then(|| (idx, modes.basis(idx).vector(c)))
            })
            .collect()
    };
    let us = populated(u);
    let vs = populated(v);
    for &(ji, a_j) in &us {
        let j = modes.mode(ji);
        for &(li, a_l) in &vs {
            let l = modes.mode(li);
            for c in convect_pair(j, a_j, l, a_l).into_iter().flatten() {
                let (mode, vec) = c;
                if let Some(oi) = modes.index_of(&mode) {
                    let coords = modes.basis(oi).coords(vec);
                    let cur = out.coeff(oi);
                    out.set_coeff(
                        oi,
                        [cur[0] + norm * coords[0], cur[1] + norm * coords[1]],
                    );
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SobolevExponent;
    use crate::lattice::enumerate_modes;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_perp(k: ModeIndex, rng: &mut StdRng) -> [f64; 3] {
        let raw = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        crate::lattice::project_perp(k, raw)
    }

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

    /// The sum-mode appendix formula: B̃_{j+l} = ½[(l·a_j)P a_l + (j·a_l)P a_j].
    fn appendix_sum_formula(j: ModeIndex, a_j: [f64; 3], l: ModeIndex, a_l: [f64; 3]) -> [f64; 3] {
        let k = j.checked_add(&l).unwrap();
        let t1 = crate::lattice::project_perp(k, vec3::scale(a_l, l.dot(a_j)));
        let t2 = crate::lattice::project_perp(k, vec3::scale(a_j, j.dot(a_l)));
        vec3::scale(vec3::add(t1, t2), 0.5)
    }

    #[test]
    fn sum_mode_matches_appendix_formula_for_mixed_classes() {
        // j in the plus class, l in the minus class, j+l in the plus class
        let j = ModeIndex::new([3, 1, 0]).unwrap();
        let l = ModeIndex::new([-2, -1, 0]).unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let a_j = random_perp(j, &mut rng);
            let a_l = random_perp(l, &mut rng);
            let pi = pair_interaction(j, a_j, l, a_l).unwrap();
            let k = j.checked_add(&l).unwrap();
            let expect = appendix_sum_formula(j, a_j, l, a_l);
            let got = pi.contribution_at(&k);
            for i in 0..3 {
                assert!((got[i] - expect[i]).abs() < 1e-13, "{got:?} vs {expect:?}");
            }
            // far-away modes receive exactly zero
            assert_eq!(pi.contribution_at(&ModeIndex::new([7, 7, 7]).unwrap()), [0.0; 3]);
        }
    }

    #[test]
    fn parallel_modes_interact_trivially() {
        let j = ModeIndex::new([1, 2, 0]).unwrap();
        let l = ModeIndex::new([2, 4, 0]).unwrap();
        let mut rng = StdRng::seed_from_u64(29);
        let a_j = random_perp(j, &mut rng);
        let a_l = random_perp(l, &mut rng);
        let pi = pair_interaction(j, a_j, l, a_l).unwrap();
        for (_, v) in &pi.contributions {
            assert!(vec3::norm(*v) < 1e-14);
        }
    }

    #[test]
    fn pair_interaction_rejects_non_perpendicular_coefficients() {
        let j = ModeIndex::new([1, 0, 0]).unwrap();
        let l = ModeIndex::new([0, 1, 0]).unwrap();
        let r = pair_interaction(j, [1.0, 0.0, 0.0], l, [1.0, 0.0, 0.0]);
        assert!(matches!(r, Err(NonlinearityError::InvalidCoefficient(..))));
    }

    #[test]
    fn pair_interaction_is_symmetric_bitwise() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..200 {
            let j = loop {
                let k = [
                    rng.gen_range(-3..=3),
                    rng.gen_range(-3..=3),
                    rng.gen_range(-3..=3),
                ];
                if k != [0, 0, 0] {
                    break ModeIndex::new(k).unwrap();
                }
            };
            let l = loop {
                let k = [
                    rng.gen_range(-3..=3),
                    rng.gen_range(-3..=3),
                    rng.gen_range(-3..=3),
                ];
                if k != [0, 0, 0] {
                    break ModeIndex::new(k).unwrap();
                }
            };
            let a_j = random_perp(j, &mut rng);
            let a_l = random_perp(l, &mut rng);
            let ab = pair_interaction(j, a_j, l, a_l).unwrap();
            let ba = pair_interaction(l, a_l, j, a_j).unwrap();
            assert_eq!(ab.contributions, ba.contributions);
            // every contribution is orthogonal to its mode
            for (m, v) in &ab.contributions {
                assert!(m.dot(*v).abs() <= 1e-13 * (1.0 + vec3::norm(*v)));
            }
        }
    }

    #[test]
    fn contributions_orthogonal_to_receiving_modes() {
        let modes = enumerate_modes(3).unwrap();
        let table = InteractionTable::new(&modes);
        let mut rng = StdRng::seed_from_u64(37);
        let u = random_field(&modes, &mut rng, 1.0);
        let b = table.convection(&u).unwrap();
        assert!(b.is_finite());
        assert!(b.norm() > 0.0);
    }

    #[test]
    fn table_convection_matches_direct_bilinear() {
        let modes = enumerate_modes(3).unwrap();
        let table = InteractionTable::new(&modes);
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..5 {
            let u = random_field(&modes, &mut rng, 1.0);
            let fast = table.convection(&u).unwrap();
            let slow = bilinear(&u, &u).unwrap();
            let diff = fast.sub(&slow).unwrap().norm();
            assert!(diff <= 1e-12 * slow.norm().max(1.0), "diff = {diff:e}");
        }
    }

    #[test]
    fn convection_tilde_is_the_derivative_of_convection() {
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let mut rng = StdRng::seed_from_u64(43);
        let x = random_field(&modes, &mut rng, 1.0);
        let h = random_field(&modes, &mut rng, 1.0);
        let tilde = table.convection_tilde(&h, &x).unwrap();
        let via_bilinear = bilinear(&h, &x)
            .unwrap()
            .add(&bilinear(&x, &h).unwrap())
            .unwrap();
        let diff = tilde.sub(&via_bilinear).unwrap().norm();
        assert!(diff <= 1e-12 * via_bilinear.norm().max(1.0));
    }

    #[test]
    fn zero_arguments_give_zero() {
        let modes = enumerate_modes(2).unwrap();
        let mut rng = StdRng::seed_from_u64(47);
        let u = random_field(&modes, &mut rng, 1.0);
        let z = GalerkinField::zero(modes.clone());
        assert_eq!(bilinear(&z, &u).unwrap().norm(), 0.0);
        assert_eq!(bilinear(&u, &z).unwrap().norm(), 0.0);
    }

    #[test]
    fn energy_conservation_of_convection() {
        let modes = enumerate_modes(3).unwrap();
        let table = InteractionTable::new(&modes);
        let mut rng = StdRng::seed_from_u64(53);
        for _ in 0..50 {
            let u = random_field(&modes, &mut rng, 2.0);
            let b = table.convection(&u).unwrap();
            let ip = b.dot(&u).unwrap().abs();
            let bound = 1e-11 * u.norm().powi(3);
            assert!(ip <= bound, "<B(u,u),u> = {ip:e} > {bound:e}");
        }
    }

    #[test]
    fn bilinearity_in_each_argument() {
        let modes = enumerate_modes(2).unwrap();
        let mut rng = StdRng::seed_from_u64(59);
        let u = random_field(&modes, &mut rng, 1.0);
        let w = random_field(&modes, &mut rng, 1.0);
        let v = random_field(&modes, &mut rng, 1.0);
        let (alpha, beta) = (0.7, -1.3);

        let lhs = bilinear(&u.scaled(alpha).add(&w.scaled(beta)).unwrap(), &v).unwrap();
        let rhs = bilinear(&u, &v)
            .unwrap()
            .scaled(alpha)
            .add(&bilinear(&w, &v).unwrap().scaled(beta))
            .unwrap();
        let diff = lhs.sub(&rhs).unwrap().norm();
        assert!(diff <= 1e-12 * rhs.norm().max(1.0));

        let lhs = bilinear(&v, &u.scaled(alpha).add(&w.scaled(beta)).unwrap()).unwrap();
        let rhs = bilinear(&v, &u)
            .unwrap()
            .scaled(alpha)
            .add(&bilinear(&v, &w).unwrap().scaled(beta))
            .unwrap();
        let diff = lhs.sub(&rhs).unwrap().norm();
        assert!(diff <= 1e-12 * rhs.norm().max(1.0));
    }

    #[test]
    fn sobolev_estimate_ratio_stays_bounded() {
        let modes = enumerate_modes(2).unwrap();
        let table = InteractionTable::new(&modes);
        let mut rng = StdRng::seed_from_u64(61);
        for g in [0.6, 0.9, 1.0] {
            let gamma = SobolevExponent::new(g).unwrap();
            let gamma_shift = SobolevExponent::new(g - 0.5).unwrap();
            let mut ratios = Vec::new();
            for _ in 0..100 {
                let scale = rng.gen_range(0.1..3.0);
                let u = random_field(&modes, &mut rng, scale);
                let b = table.convection(&u).unwrap();
                let denom = u.sobolev_norm(gamma).powi(2);
                ratios.push(b.sobolev_norm(gamma_shift) / denom);
            }
            ratios.sort_by(f64::total_cmp);
            let median = ratios[ratios.len() / 2];
            let max = *ratios.last().unwrap();
            assert!(max.is_finite());
            assert!(max <= 10.0 * median.max(1e-12), "gamma={g}: max {max}, median {median}");
        }
    }
}
