//! Free energy and softmax primitives.
//!
//! Inputs may be stored in any [`Scalar`] type; every reduction runs in
//! `f64` so that rankings built on top of the energies are not disturbed by
//! ties introduced by early rounding.

use std::fmt;

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("activation vector is empty")]
    Empty,
    #[error("activation vector has a non-finite entry at unit {index}")]
    NonFinite { index: usize },
    #[error("temperature must be finite and positive, got {0}")]
    BadTemperature(f64),
    #[error("layer structure: {0}")]
    Structure(String),
}

/// Softmax temperature. Defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self, EnergyError> {
        if t.is_finite() && t > 0.0 {
            Ok(Temperature(t))
        } else {
            Err(EnergyError::BadTemperature(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::ONE
    }
}

/// Position of a tapped layer in a network.
///
/// Hidden layers order before the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerTap {
    Hidden(usize),
    Logits,
}

impl fmt::Display for LayerTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerTap::Hidden(l) => write!(f, "{l}"),
            LayerTap::Logits => f.write_str("logits"),
        }
    }
}

/// Activations (or logits) of one tapped layer, flattened to a unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector<T> {
    values: Vec<T>,
    layer: LayerTap,
}

impl<T: Scalar> ActivationVector<T> {
    pub fn new(values: Vec<T>, layer: LayerTap) -> Result<Self, EnergyError> {
        check_finite(&values)?;
        Ok(ActivationVector { values, layer })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn layer(&self) -> LayerTap {
        self.layer
    }
}

fn check_finite<T: Scalar>(v: &[T]) -> Result<(), EnergyError> {
    if v.is_empty() {
        return Err(EnergyError::Empty);
    }
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(EnergyError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Max-shifted pieces of `log Σ exp(v_i / t)`: returns `(max, Σ exp((v_i - max) / t))`.
///
/// The sum is always in `[1, len]`.
fn shifted_sum<T: Scalar>(v: &[T], t: f64) -> (f64, f64) {
    let max = v
        .iter()
        .map(|x| x.to_f64_lossless())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum = v
        .iter()
        .map(|x| ((x.to_f64_lossless() - max) / t).exp())
        .sum::<f64>();
    (max, sum)
}

/// `−t · log Σ_i exp(v_i / t)`.
pub fn free_energy<T: Scalar>(v: &[T], t: Temperature) -> Result<f64, EnergyError> {
    check_finite(v)?;
    let (max, sum) = shifted_sum(v, t.0);
    Ok(-(max + t.0 * sum.ln()))
}

/// Maximum softmax probability of `logits / t`.
pub fn msp_score<T: Scalar>(logits: &[T], t: Temperature) -> Result<f64, EnergyError> {
    check_finite(logits)?;
    // The largest entry contributes exp(0) = 1 to the shifted sum.
    let (_, sum) = shifted_sum(logits, t.0);
    Ok(1.0 / sum)
}

/// Softmax of `v / t`, i.e. the negated gradient of [`free_energy`] with
/// respect to `v`.
pub fn softmax<T: Scalar>(v: &[T], t: Temperature) -> Result<Vec<f64>, EnergyError> {
    check_finite(v)?;
    let (max, sum) = shifted_sum(v, t.0);
    Ok(v
        .iter()
        .map(|x| ((x.to_f64_lossless() - max) / t.0).exp() / sum)
        .collect())
}

/// Energy of every tapped layer, in tap order.
///
/// `acts` must list `Hidden(0), Hidden(1), …` consecutively, optionally
/// followed by `Logits`.
pub fn energy_vector<T: Scalar>(
    acts: &[ActivationVector<T>],
    t: Temperature,
) -> Result<Vec<f64>, EnergyError> {
    if acts.is_empty() {
        return Err(EnergyError::Structure("no layers given".into()));
    }
    for (pos, a) in acts.iter().enumerate() {
        let ok = match a.layer {
            LayerTap::Hidden(l) => l == pos,
            LayerTap::Logits => pos + 1 == acts.len(),
        };
        if !ok {
            return Err(EnergyError::Structure(format!(
                "layer {} found at position {pos}; expected hidden layers 0.. in order, logits last",
                a.layer
            )));
        }
    }
    acts.iter().map(|a| free_energy(&a.values, t)).collect()
}
