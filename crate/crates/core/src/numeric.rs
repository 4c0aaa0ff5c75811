//! Flat parameter-vector arithmetic.
//!
//! Everything here is 64-bit and every reduction runs left to right over its
//! inputs in the order given, so results are bitwise reproducible.

use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A fixed-length vector of model parameters, the unit exchanged between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

/// Element-wise operations used by the adaptive server optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Square,
    Sqrt,
    AddScalar,
}

impl ParamVector {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("element {i} is not finite")));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vector must be non-empty");
        ParamVector(vec![0.0; len])
    }

    /// Wraps values the caller has already checked.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// `a * x + y`.
    pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        y.check_len(x.len())?;
        let out = x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect();
        finite(out)
    }

    /// `(Σ w_i v_i) / (Σ w_i)`.
    ///
    /// Weights are normalized first, so a single input comes back unchanged.
    pub fn weighted_mean(vs: &[ParamVector], ws: &[f64]) -> Result<ParamVector> {
        if vs.is_empty() {
            return Err(Error::invalid("weighted_mean of an empty list"));
        }
        if vs.len() != ws.len() {
            return Err(Error::invalid(format!("{} vectors but {} weights", vs.len(), ws.len())));
        }
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = ws.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("total weight must be positive"));
        }
        let len = vs[0].len();
        for v in vs {
            v.check_len(len)?;
        }
        let mut out = vec![0.0; len];
        for (v, w) in vs.iter().zip(ws) {
            let c = w / total;
            for (o, x) in out.iter_mut().zip(&v.0) {
                *o += c * x;
            }
        }
        finite(out)
    }

    /// Applies `op` to every element; `c` is only read by [`ElementwiseOp::AddScalar`].
    pub fn elementwise(op: ElementwiseOp, x: &ParamVector, c: f64) -> Result<ParamVector> {
        let out = match op {
            ElementwiseOp::Square => x.0.iter().map(|v| v * v).collect(),
            ElementwiseOp::Sqrt => {
                if let Some(i) = x.0.iter().position(|v| *v < 0.0) {
                    return Err(Error::Domain(format!(
                        "sqrt of negative element {} at index {i}",
                        x.0[i]
                    )));
                }
                x.0.iter().map(|v| v.sqrt()).collect()
            }
            ElementwiseOp::AddScalar => x.0.iter().map(|v| v + c).collect(),
        };
        finite(out)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        finite(self.0.iter().map(|v| a * v).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        ParamVector::axpy(-1.0, other, self)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Little-endian byte image of the values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 8);
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// 64-bit fingerprint of the little-endian byte image.
    pub fn checksum(&self) -> u64 {
        checksum64(&self.to_le_bytes())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn finite(values: Vec<f64>) -> Result<ParamVector> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "result element {i} is not finite ({})",
            values[i]
        )));
    }
    Ok(ParamVector(values))
}

/// First eight bytes (little-endian) of the SHA-256 digest of `bytes`.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
