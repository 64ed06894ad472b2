//! Truncated Fourier lattice for mean-zero divergence-free fields on the torus.
//!
//! Modes are nonzero integer wavevectors `k`. The lattice splits into a
//! positive and a negative half by the sign of the first nonzero component;
//! cosine modes live on the positive half and sine modes on the negative half.
//! Every mode carries a deterministic orthonormal basis of the plane `k⊥`,
//! built from cross products so that the same `k` always yields the same pair.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::vec3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("cutoff must be a positive integer, got {0}")]
    InvalidCutoff(i64),
    #[error("mode index must be a nonzero lattice point")]
    ZeroMode,
    #[error("mode {0:?} does not belong to the lattice with cutoff {1}")]
    OutOfLattice([i32; 3], u32),
    #[error("serialized mode list is not the canonical enumeration for cutoff {0}")]
    NonCanonical(u32),
}

/// Half-lattice classification: `Plus` carries cosine modes, `Minus` sine modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignClass {
    Plus,
    Minus,
}

/// A nonzero integer wavevector.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeIndex([i32; 3]);

impl fmt::Debug for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

impl ModeIndex {
    pub fn new(k: [i32; 3]) -> Result<Self, LatticeError> {
        if k == [0, 0, 0] {
            Err(LatticeError::ZeroMode)
        } else {
            Ok(ModeIndex(k))
        }
    }

    pub fn components(&self) -> [i32; 3] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }

    pub fn negate(&self) -> ModeIndex {
        ModeIndex([-self.0[0], -self.0[1], -self.0[2]])
    }

    /// Componentwise sum; `None` when the sum is the zero vector.
    pub fn checked_add(&self, other: &ModeIndex) -> Option<ModeIndex> {
        let s = [
            self.0[0] + other.0[0],
            self.0[1] + other.0[1],
            self.0[2] + other.0[2],
        ];
        (s != [0, 0, 0]).then_some(ModeIndex(s))
    }

    pub fn checked_sub(&self, other: &ModeIndex) -> Option<ModeIndex> {
        self.checked_add(&other.negate())
    }

    /// Squared Euclidean norm `|k|²`.
    pub fn norm2(&self) -> f64 {
        self.norm2_int() as f64
    }

    pub fn norm2_int(&self) -> i64 {
        let [a, b, c] = self.0;
        (a as i64) * (a as i64) + (b as i64) * (b as i64) + (c as i64) * (c as i64)
    }

    pub fn sup_norm(&self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap()
    }

    /// `k ∈ Z³₊` iff `k₁>0`, or `k₁=0, k₂>0`, or `k₁=k₂=0, k₃>0`.
    pub fn sign_class(&self) -> SignClass {
        let [a, b, c] = self.0;
        if a > 0 || (a == 0 && b > 0) || (a == 0 && b == 0 && c > 0) {
            SignClass::Plus
        } else {
            SignClass::Minus
        }
    }

    pub fn is_parallel_to(&self, other: &ModeIndex) -> bool {
        let [a1, a2, a3] = self.0.map(|c| c as i64);
        let [b1, b2, b3] = other.0.map(|c| c as i64);
        a2 * b3 - a3 * b2 == 0 && a3 * b1 - a1 * b3 == 0 && a1 * b2 - a2 * b1 == 0
    }

    pub fn dot(&self, v: [f64; 3]) -> f64 {
        vec3::dot(self.as_f64(), v)
    }
}

/// Orthonormal basis `{e1, e2}` of the plane orthogonal to `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerpBasis {
    pub k: ModeIndex,
    pub e1: [f64; 3],
    pub e2: [f64; 3],
}

impl PerpBasis {
    /// Coordinates of a vector `v ⊥ k` in this basis.
    pub fn coords(&self, v: [f64; 3]) -> [f64; 2] {
        [vec3::dot(v, self.e1), vec3::dot(v, self.e2)]
    }

    /// The vector with the given coordinates.
    pub fn vector(&self, c: [f64; 2]) -> [f64; 3] {
        vec3::add(vec3::scale(self.e1, c[0]), vec3::scale(self.e2, c[1]))
    }

    /// Same plane, basis rotated by `theta`.
    pub fn rotated(&self, theta: f64) -> PerpBasis {
        let (s, c) = theta.sin_cos();
        PerpBasis {
            k: self.k,
            e1: vec3::add(vec3::scale(self.e1, c), vec3::scale(self.e2, s)),
            e2: vec3::add(vec3::scale(self.e1, -s), vec3::scale(self.e2, c)),
        }
    }
}

/// Deterministic orthonormal basis of `k⊥`: `e1 = normalize(k × a)` with
/// `a = (0,0,1)` unless `k` is parallel to the z axis, in which case
/// `a = (1,0,0)`; then `e2 = normalize(k × e1)`.
pub fn perp_basis(k: ModeIndex) -> PerpBasis {
    let [k1, k2, _] = k.components();
    let a = if k1 == 0 && k2 == 0 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = vec3::normalize(vec3::cross(k.as_f64(), a));
    let e2 = vec3::normalize(vec3::cross(k.as_f64(), e1));
    PerpBasis { k, e1, e2 }
}

/// Projection of `eta` onto `k⊥`: `eta − (k·eta / |k|²) k`.
pub fn project_perp(k: ModeIndex, eta: [f64; 3]) -> [f64; 3] {
    let kf = k.as_f64();
    let c = vec3::dot(kf, eta) / k.norm2();
    vec3::sub(eta, vec3::scale(kf, c))
}

/// The lattice `Z_l(n) = [−n,n]³ ∖ {0}` in canonical (lexicographic) order,
/// with per-mode precomputed norms and `k⊥` bases.
#[derive(Debug, Clone)]
pub struct ModeSet {
    n: u32,
    modes: Vec<ModeIndex>,
    index: HashMap<[i32; 3], u32>,
    norm2: Vec<f64>,
    norm4: Vec<f64>,
    bases: Vec<PerpBasis>,
}

impl PartialEq for ModeSet {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.bases == other.bases
    }
}

/// All lattice points of `[−n,n]³` except the origin, lexicographically
/// ordered on `(k₁,k₂,k₃)`. This order is the canonical iteration and
/// serialization order everywhere in the crate.
pub fn enumerate_modes(n: u32) -> Result<Arc<ModeSet>, LatticeError> {
    ModeSet::new(n).map(Arc::new)
}

impl ModeSet {
    pub fn new(n: u32) -> Result<ModeSet, LatticeError> {
        if n == 0 {
            return Err(LatticeError::InvalidCutoff(0));
        }
        Self::with_bases(n, perp_basis)
    }

    /// Enumerate with a custom basis rule; used to check that diagnostics do
    /// not depend on the basis convention for `k⊥`.
    pub fn with_bases(
        n: u32,
        basis_of: impl Fn(ModeIndex) -> PerpBasis,
    ) -> Result<ModeSet, LatticeError> {
        if n == 0 {
            return Err(LatticeError::InvalidCutoff(0));
        }
        let ni = n as i32;
        let mut modes = Vec::with_capacity(((2 * n as usize + 1).pow(3)) - 1);
        for k1 in -ni..=ni {
            for k2 in -ni..=ni {
                for k3 in -ni..=ni {
                    if (k1, k2, k3) != (0, 0, 0) {
                        modes.push(ModeIndex([k1, k2, k3]));
                    }
                }
            }
        }
        let index = modes
            .iter()
            .enumerate()
            .map(|(i, k)| (k.components(), i as u32))
            .collect();
        let norm2: Vec<f64> = modes.iter().map(ModeIndex::norm2).collect();
        let norm4 = norm2.iter().map(|x| x * x).collect();
        let bases = modes.iter().map(|&k| basis_of(k)).collect();
        Ok(ModeSet {
            n,
            modes,
            index,
            norm2,
            norm4,
            bases,
        })
    }

    pub fn cutoff(&self) -> u32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn mode(&self, idx: usize) -> ModeIndex {
        self.modes[idx]
    }

    pub fn index_of(&self, k: &ModeIndex) -> Option<usize> {
        self.index.get(&k.components()).map(|&i| i as usize)
    }

    pub fn contains(&self, k: &ModeIndex) -> bool {
        k.sup_norm() <= self.n
    }

    pub fn norm2(&self, idx: usize) -> f64 {
        self.norm2[idx]
    }

    pub fn norm4(&self, idx: usize) -> f64 {
        self.norm4[idx]
    }

    pub fn basis(&self, idx: usize) -> &PerpBasis {
        &self.bases[idx]
    }

    /// Indices of the modes in `Z_l(low)`, in canonical order.
    pub fn low_indices(&self, low: u32) -> Vec<usize> {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, k)| k.sup_norm() <= low)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn positive_modes(&self) -> impl Iterator<Item = &ModeIndex> {
        self.modes
            .iter()
            .filter(|k| k.sign_class() == SignClass::Plus)
    }

    pub fn negative_modes(&self) -> impl Iterator<Item = &ModeIndex> {
        self.modes
            .iter()
            .filter(|k| k.sign_class() == SignClass::Minus)
    }
}

impl Serialize for ModeSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.modes.len()))?;
        for k in &self.modes {
            seq.serialize_element(&k.components())?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ModeSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<ModeSet, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vec<[i32; 3]>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a sequence of integer triples")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(t) = seq.next_element::<[i32; 3]>()? {
                    out.push(t);
                }
                Ok(out)
            }
        }
        let triples = deserializer.deserialize_seq(V)?;
        let n = triples
            .iter()
            .flat_map(|t| t.iter().map(|c| c.unsigned_abs()))
            .max()
            .unwrap_or(0);
        let set = ModeSet::new(n).map_err(serde::de::Error::custom)?;
        let canonical: Vec<[i32; 3]> = set.modes.iter().map(|k| k.components()).collect();
        if canonical != triples {
            return Err(serde::de::Error::custom(LatticeError::NonCanonical(n)));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cutoff_counts() {
        assert_eq!(ModeSet::new(1).unwrap().len(), 26);
        assert_eq!(ModeSet::new(2).unwrap().len(), 124);
        assert!(matches!(
            ModeSet::new(0),
            Err(LatticeError::InvalidCutoff(0))
        ));
        // dim π^l H for n = 1
        assert_eq!(2 * ModeSet::new(1).unwrap().len(), 52);
    }

    #[test]
    fn canonical_order_is_lexicographic() {
        let set = ModeSet::new(2).unwrap();
        let mut sorted = set.modes().to_vec();
        sorted.sort();
        assert_eq!(sorted, set.modes());
        for (i, k) in set.modes().iter().enumerate() {
            assert_eq!(set.index_of(k), Some(i));
        }
    }

    #[test]
    fn sign_partition_matches_rule_and_negation_closure() {
        let set = ModeSet::new(3).unwrap();
        let mut plus = 0;
        for k in set.modes() {
            let [a, b, c] = k.components();
            let expect_plus = a > 0 || (a == 0 && b > 0) || (a == 0 && b == 0 && c > 0);
            assert_eq!(k.sign_class() == SignClass::Plus, expect_plus, "{k:?}");
            // negation closure and strict partition
            let neg = k.negate();
            assert!(set.index_of(&neg).is_some());
            assert_ne!(k.sign_class(), neg.sign_class());
            if expect_plus {
                plus += 1;
            }
        }
        assert_eq!(plus * 2, set.len());
        assert_eq!(set.positive_modes().count(), plus);
        assert_eq!(set.negative_modes().count(), plus);
    }

    #[test]
    fn perp_basis_axis_cases() {
        let b = perp_basis(ModeIndex::new([0, 0, 1]).unwrap());
        assert!(vec3::dot(b.e1, [0.0, 0.0, 1.0]).abs() < 1e-15);
        assert!((b.e1[1].abs() - 1.0).abs() < 1e-15);
        assert!(vec3::dot(b.e2, b.e1).abs() < 1e-15);

        let b = perp_basis(ModeIndex::new([1, 0, 0]).unwrap());
        assert!(vec3::dot(b.e1, [1.0, 0.0, 0.0]).abs() < 1e-15);
        assert!((vec3::norm(b.e1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perp_basis_orthonormal_for_random_modes() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = loop {
                let k = [
                    rng.gen_range(-20..=20),
                    rng.gen_range(-20..=20),
                    rng.gen_range(-20..=20),
                ];
                if k != [0, 0, 0] {
                    break ModeIndex::new(k).unwrap();
                }
            };
            let b = perp_basis(k);
            assert!(k.dot(b.e1).abs() < 1e-14 * vec3::norm(k.as_f64()));
            assert!(k.dot(b.e2).abs() < 1e-14 * vec3::norm(k.as_f64()));
            assert!(vec3::dot(b.e1, b.e2).abs() < 1e-14);
            assert!((vec3::norm(b.e1) - 1.0).abs() < 1e-14);
            assert!((vec3::norm(b.e2) - 1.0).abs() < 1e-14);
            // determinism
            let b2 = perp_basis(k);
            assert_eq!(b.e1, b2.e1);
            assert_eq!(b.e2, b2.e2);
        }
    }

    #[test]
    fn projection_identities() {
        let mut rng = StdRng::seed_from_u64(11);
        let k = ModeIndex::new([1, 0, 0]).unwrap();
        assert_eq!(project_perp(k, [1.0, 1.0, 0.0]), [0.0, 1.0, 0.0]);
        assert_eq!(project_perp(k, k.as_f64()), [0.0, 0.0, 0.0]);

        for _ in 0..200 {
            let k = ModeIndex::new([
                rng.gen_range(-5..=5),
                rng.gen_range(-5..=5),
                rng.gen_range(1..=5),
            ])
            .unwrap();
            let eta = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let p = project_perp(k, eta);
            // orthogonal to k, idempotent, in span{e1,e2}
            assert!(k.dot(p).abs() < 1e-14 * vec3::norm(eta) * vec3::norm(k.as_f64()));
            let pp = project_perp(k, p);
            for i in 0..3 {
                assert!((pp[i] - p[i]).abs() < 1e-14);
            }
            let b = perp_basis(k);
            let rec = b.vector(b.coords(p));
            for i in 0..3 {
                assert!((rec[i] - p[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn modeset_serialization_roundtrip() {
        let set = ModeSet::new(2).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: ModeSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.cutoff(), 2);
        assert_eq!(back.modes(), set.modes());
        // first canonical entry of Z_l(2)
        assert!(json.starts_with("[[-2,-2,-2],"));
    }
}
