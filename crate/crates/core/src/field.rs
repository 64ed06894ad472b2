//! Divergence-free Galerkin velocity fields as per-mode coefficient pairs,
//! plus the diagonal Stokes calculus (`A^γ` weights, Sobolev norms,
//! low/high splitting).

use std::fmt;
use std::sync::Arc;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::lattice::{LatticeError, ModeIndex, ModeSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("fields live on different cutoffs ({0} vs {1})")]
    CutoffMismatch(u32, u32),
    #[error("split cutoff {0} exceeds the field cutoff {1}")]
    SplitCutoff(u32, u32),
    #[error("Sobolev exponent must be finite, got {0}")]
    InvalidExponent(f64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Exponent `γ` of the diagonal Stokes weight `A^γ`; any finite real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevExponent(f64);

impl SobolevExponent {
    pub fn new(gamma: f64) -> Result<Self, FieldError> {
        if gamma.is_finite() {
            Ok(SobolevExponent(gamma))
        } else {
            Err(FieldError::InvalidExponent(gamma))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// A truncated divergence-free field: two real coefficients per mode,
/// coordinates in the `k⊥` basis of its `ModeSet`. Entries not stored in a
/// sparse source are zero; internally the layout is dense in canonical order.
#[derive(Clone)]
pub struct GalerkinField {
    modes: Arc<ModeSet>,
    coeffs: Vec<f64>,
}

impl fmt::Debug for GalerkinField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GalerkinField(m={}, |x|={:.6e})",
            self.modes.cutoff(),
            self.norm()
        )
    }
}

impl PartialEq for GalerkinField {
    fn eq(&self, other: &Self) -> bool {
        self.modes.cutoff() == other.modes.cutoff() && self.coeffs == other.coeffs
    }
}

impl GalerkinField {
    pub fn zero(modes: Arc<ModeSet>) -> Self {
        let coeffs = vec![0.0; 2 * modes.len()];
        GalerkinField { modes, coeffs }
    }

    pub fn from_entries(
        modes: Arc<ModeSet>,
        entries: &[(ModeIndex, [f64; 2])],
    ) -> Result<Self, FieldError> {
        let mut out = Self::zero(modes);
        for (k, c) in entries {
            let idx = out
                .modes
                .index_of(k)
                .ok_or(LatticeError::OutOfLattice(k.components(), out.cutoff()))?;
            out.coeffs[2 * idx] = c[0];
            out.coeffs[2 * idx + 1] = c[1];
        }
        Ok(out)
    }

    pub fn from_coeffs(modes: Arc<ModeSet>, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), 2 * modes.len());
        GalerkinField { modes, coeffs }
    }

    pub fn modes(&self) -> &Arc<ModeSet> {
        &self.modes
    }

    pub fn cutoff(&self) -> u32 {
        self.modes.cutoff()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn coeff(&self, idx: usize) -> [f64; 2] {
        [self.coeffs[2 * idx], self.coeffs[2 * idx + 1]]
    }

    pub fn set_coeff(&mut self, idx: usize, c: [f64; 2]) {
        self.coeffs[2 * idx] = c[0];
        self.coeffs[2 * idx + 1] = c[1];
    }

    pub fn coeff_of(&self, k: &ModeIndex) -> Option<[f64; 2]> {
        self.modes.index_of(k).map(|i| self.coeff(i))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// `|x|`, the coefficient-space L2 norm.
    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// `|x|²`.
    pub fn energy(&self) -> f64 {
        let mut acc = 0.0;
        for idx in 0..self.modes.len() {
            let c = self.coeff(idx);
            acc += c[0] * c[0] + c[1] * c[1];
        }
        acc
    }

    /// `|Ax|²`, with `A` acting as `|k|²` per mode.
    pub fn enstrophy(&self) -> f64 {
        let mut acc = 0.0;
        for idx in 0..self.modes.len() {
            let c = self.coeff(idx);
            acc += self.modes.norm4(idx) * (c[0] * c[0] + c[1] * c[1]);
        }
        acc
    }

    /// `|A^γ x| = sqrt(Σ_k |k|^{4γ} |x_k|²)`, accumulated in canonical order.
    pub fn sobolev_norm(&self, gamma: SobolevExponent) -> f64 {
        let g = gamma.value();
        if g == 0.0 {
            return self.norm();
        }
        if g == 1.0 {
            return self.enstrophy().sqrt();
        }
        let mut acc = 0.0;
        for idx in 0..self.modes.len() {
            let c = self.coeff(idx);
            acc += self.modes.norm2(idx).powf(2.0 * g) * (c[0] * c[0] + c[1] * c[1]);
        }
        acc.sqrt()
    }

    /// `A^γ x` as a field.
    pub fn a_pow(&self, gamma: SobolevExponent) -> GalerkinField {
        let g = gamma.value();
        let mut out = self.clone();
        for idx in 0..self.modes.len() {
            let w = self.modes.norm2(idx).powf(g);
            out.coeffs[2 * idx] *= w;
            out.coeffs[2 * idx + 1] *= w;
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> GalerkinField {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &GalerkinField) -> Result<(), FieldError> {
        self.check_same(other)?;
        for (a, b) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &GalerkinField) -> Result<GalerkinField, FieldError> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &GalerkinField) -> Result<GalerkinField, FieldError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn dot(&self, other: &GalerkinField) -> Result<f64, FieldError> {
        self.check_same(other)?;
        let mut acc = 0.0;
        for (a, b) in self.coeffs.iter().zip(other.coeffs.iter()) {
            acc += a * b;
        }
        Ok(acc)
    }

    fn check_same(&self, other: &GalerkinField) -> Result<(), FieldError> {
        if self.modes.cutoff() != other.modes.cutoff() {
            return Err(FieldError::CutoffMismatch(
                self.modes.cutoff(),
                other.modes.cutoff(),
            ));
        }
        Ok(())
    }

    /// Partition into (modes of `Z_l(n)`, the rest); both parts stay on the
    /// full cutoff and recombine to `self` exactly.
    pub fn split(&self, n: u32) -> Result<(GalerkinField, GalerkinField), FieldError> {
        if n > self.cutoff() {
            return Err(FieldError::SplitCutoff(n, self.cutoff()));
        }
        let mut low = Self::zero(self.modes.clone());
        let mut high = Self::zero(self.modes.clone());
        for idx in 0..self.modes.len() {
            let target = if self.modes.mode(idx).sup_norm() <= n {
                &mut low
            } else {
                &mut high
            };
            target.set_coeff(idx, self.coeff(idx));
        }
        Ok((low, high))
    }

    /// Coefficients of the modes of `Z_l(n)` as a flat vector of length
    /// `2·|Z_l(n)|`, in canonical order.
    pub fn low_coords(&self, low_indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * low_indices.len());
        for &idx in low_indices {
            let c = self.coeff(idx);
            out.push(c[0]);
            out.push(c[1]);
        }
        out
    }

    /// Embed flat low-space coordinates back into a full field.
    pub fn from_low_coords(modes: Arc<ModeSet>, low_indices: &[usize], coords: &[f64]) -> Self {
        assert_eq!(coords.len(), 2 * low_indices.len());
        let mut out = Self::zero(modes);
        for (j, &idx) in low_indices.iter().enumerate() {
            out.set_coeff(idx, [coords[2 * j], coords[2 * j + 1]]);
        }
        out
    }

    /// Populated (nonzero) entries in canonical order.
    pub fn sparse_entries(&self) -> Vec<(ModeIndex, [f64; 2])> {
        (0..self.modes.len())
            .filter_map(|idx| {
                let c = self.coeff(idx);
                (c != [0.0, 0.0]).then_some((self.modes.mode(idx), c))
            })
            .collect()
    }
}

// Wire format: {"m": cutoff, "coeffs": [[k1,k2,k3,c1,c2], ...]} with entries
// in canonical order and zero modes omitted. Round-trips are bit exact.
impl Serialize for GalerkinField {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Entries<'a>(&'a GalerkinField);
        impl Serialize for Entries<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let entries = self.0.sparse_entries();
                let mut seq = serializer.serialize_seq(Some(entries.len()))?;
                for (k, c) in entries {
                    let [k1, k2, k3] = k.components();
                    seq.serialize_element(&(k1, k2, k3, c[0], c[1]))?;
                }
                seq.end()
            }
        }
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("m", &self.modes.cutoff())?;
        map.serialize_entry("coeffs", &Entries(self))?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for GalerkinField {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<GalerkinField, D::Error> {
        struct FieldVisitor;
        impl<'de> Visitor<'de> for FieldVisitor {
            type Value = GalerkinField;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "an object with keys m and coeffs")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut m: Option<u32> = None;
                let mut entries: Option<Vec<(i32, i32, i32, f64, f64)>> = None;
                while let Some(key) = map.next_key::<String>()? {
                    match key.as_str() {
                        "m" => m = Some(map.next_value()?),
                        "coeffs" => entries = Some(map.next_value()?),
                        other => return Err(de::Error::unknown_field(other, &["m", "coeffs"])),
                    }
                }
                let m = m.ok_or_else(|| de::Error::missing_field("m"))?;
                let entries = entries.ok_or_else(|| de::Error::missing_field("coeffs"))?;
                let modes = ModeSet::new(m).map_err(de::Error::custom)?;
                let mut field = GalerkinField::zero(Arc::new(modes));
                for (k1, k2, k3, c1, c2) in entries {
                    let k = ModeIndex::new([k1, k2, k3]).map_err(de::Error::custom)?;
                    let idx = field.modes.index_of(&k).ok_or_else(|| {
                        de::Error::custom(LatticeError::OutOfLattice(k.components(), m))
                    })?;
                    field.set_coeff(idx, [c1, c2]);
                }
                Ok(field)
            }
        }
        deserializer.deserialize_map(FieldVisitor)
    }
}
