//! Target encodings for the two training regimes and decoding of model outputs.
//!
//! The single-label regime uses one-hot targets with a softmax head. The
//! multi-label regime marks every grade up to and including the true one, so a
//! grade-4 target is all ones, and is decoded by the longest run of confident
//! leading units.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{GradeLabel, NUM_GRADES};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One-hot targets, softmax output, argmax decoding.
    Single,
    /// Cumulative ordinal targets, independent sigmoid outputs, prefix decoding.
    Multi,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Single => "single",
            Regime::Multi => "multi",
        }
    }

    pub fn encode(self, grade: GradeLabel) -> [f64; NUM_GRADES] {
        match self {
            Regime::Single => encode_onehot(grade).as_f64(),
            Regime::Multi => encode_ordinal(grade).as_f64(),
        }
    }

    pub fn decode(self, p: &ProbabilityVector, threshold: f64) -> GradeLabel {
        match self {
            Regime::Single => decode_onehot(p),
            Regime::Multi => decode_ordinal(p, threshold),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Regime::Single),
            "multi" => Ok(Regime::Multi),
            other => Err(Error::InvalidArgument(format!(
                "unknown regime `{other}` (expected single or multi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OneHotVector([u8; NUM_GRADES]);

impl OneHotVector {
    pub fn values(&self) -> [u8; NUM_GRADES] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; NUM_GRADES] {
        self.0.map(f64::from)
    }
}

/// Cumulative target: a non-empty prefix of ones followed by zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrdinalVector([u8; NUM_GRADES]);

impl OrdinalVector {
    /// Accepts only prefix vectors whose first entry is 1.
    pub fn new(values: [u8; NUM_GRADES]) -> Result<Self> {
        let ones = values.iter().take_while(|&&v| v == 1).count();
        if ones == 0 || values[ones..].iter().any(|&v| v != 0) {
            return Err(Error::InvalidArgument(format!(
                "{values:?} is not a cumulative ordinal vector"
            )));
        }
        Ok(OrdinalVector(values))
    }

    pub fn values(&self) -> [u8; NUM_GRADES] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; NUM_GRADES] {
        self.0.map(f64::from)
    }
}

/// Five per-unit probabilities produced by the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector([f64; NUM_GRADES]);

impl ProbabilityVector {
    pub fn new(values: [f64; NUM_GRADES]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be finite and in [0, 1]: {values:?}"
            )));
        }
        Ok(ProbabilityVector(values))
    }

    /// Like [`ProbabilityVector::new`] but additionally requires the entries to sum
    /// to one, as softmax outputs do.
    pub fn new_normalized(values: [f64; NUM_GRADES]) -> Result<Self> {
        let p = Self::new(values)?;
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(p)
    }

    pub fn values(&self) -> &[f64; NUM_GRADES] {
        &self.0
    }
}

pub fn encode_onehot(grade: GradeLabel) -> OneHotVector {
    let mut v = [0u8; NUM_GRADES];
    v[grade.index()] = 1;
    OneHotVector(v)
}

pub fn encode_ordinal(grade: GradeLabel) -> OrdinalVector {
    OrdinalVector(std::array::from_fn(|k| u8::from(k <= grade.index())))
}

/// Argmax, lowest index on ties.
pub fn decode_onehot(p: &ProbabilityVector) -> GradeLabel {
    let mut best = 0;
    for (k, &v) in p.0.iter().enumerate().skip(1) {
        if v > p.0[best] {
            best = k;
        }
    }
    GradeLabel::ALL[best]
}

/// Length of the leading run of entries strictly above `threshold`, minus one,
/// floored at grade 0. Entries after the first sub-threshold unit are ignored.
pub fn decode_ordinal(p: &ProbabilityVector, threshold: f64) -> GradeLabel {
    let run = p.0.iter().take_while(|&&v| v > threshold).count();
    GradeLabel::ALL[run.saturating_sub(1)]
}
