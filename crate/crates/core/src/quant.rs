//! Fake quantization: symmetric signed quantize/dequantize with a
//! straight-through estimator for the backward pass and an optional learned
//! step size.
//!
//! A value `x` maps to `s * round_half_even(clamp(x / s, -Q_N, Q_P))` with
//! `Q_N = 2^(n-1)` and `Q_P = 2^(n-1) - 1`. The backward pass forwards the
//! upstream gradient where `x / s` lies inside `[-Q_N, Q_P]` and zeroes it
//! elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
/// Lower bound applied to every scale after an update.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Constant step size.
    Fixed(f64),
    /// Step size initialised by [`calibrate_scale`] and trained with the
    /// LSQ gradient.
    LearnableLsq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weights,
    Activations,
    Both,
}

impl QuantTarget {
    pub fn weights(self) -> bool {
        matches!(self, QuantTarget::Weights | QuantTarget::Both)
    }

    pub fn activations(self) -> bool {
        matches!(self, QuantTarget::Activations | QuantTarget::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scale_mode: ScaleMode,
    pub target: QuantTarget,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "quantization bits must be in [{MIN_BITS}, {MAX_BITS}], got {}",
                self.bits
            )));
        }
        if let ScaleMode::Fixed(s) = self.scale_mode {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fixed quantization scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// One fake-quantization site with its current step size.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantNode {
    spec: QuantSpec,
    scale: f64,
}

impl QuantNode {
    /// Creates a node. For learnable nodes `initial_scale` is the starting
    /// step size; fixed nodes always use the scale from their spec.
    pub fn new(spec: QuantSpec, initial_scale: f64) -> Result<Self> {
        spec.validate()?;
        let scale = match spec.scale_mode {
            ScaleMode::Fixed(s) => s,
            ScaleMode::LearnableLsq => initial_scale,
        };
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "quantization scale must be positive, got {scale}"
            )));
        }
        Ok(Self { spec, scale })
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn bits(&self) -> u8 {
        self.spec.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self.spec.scale_mode, ScaleMode::LearnableLsq)
    }

    /// Overwrites the step size of a learnable node, clamped to
    /// [`MIN_SCALE`]. Fixed nodes ignore the call.
    pub fn set_scale(&mut self, scale: f64) {
        if self.is_learnable() && scale.is_finite() {
            self.scale = scale.max(MIN_SCALE);
        }
    }

    /// `Q_N = 2^(n-1)`.
    pub fn q_neg(&self) -> f64 {
        q_neg(self.spec.bits)
    }

    /// `Q_P = 2^(n-1) - 1`.
    pub fn q_pos(&self) -> f64 {
        q_pos(self.spec.bits)
    }

    /// Whether `x / s` lies inside the clamp range; the STE passes gradient
    /// exactly where this holds.
    pub fn in_range(&self, x: f64) -> bool {
        let v = x / self.scale;
        v >= -self.q_neg() && v <= self.q_pos()
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        let v = (x / self.scale).clamp(-self.q_neg(), self.q_pos());
        self.scale * v.round_ties_even()
    }

    pub fn quantize(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "quantize input",
                index,
            });
        }
        Ok(x.map(|v| self.quantize_value(v)))
    }

    pub fn ste_backward(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        x.zip_map(upstream, |xv, g| if self.in_range(xv) { g } else { 0.0 })
    }

    /// Gradient of the loss with respect to the step size, scaled by
    /// `1 / sqrt(count * Q_P)`.
    pub fn lsq_scale_grad(&self, x: &Tensor, upstream: &Tensor) -> Result<f64> {
        if !self.is_learnable() {
            return Err(Error::InvalidConfig(
                "scale gradient requested for a fixed-scale quantizer".into(),
            ));
        }
        if x.shape() != upstream.shape() {
            return Err(Error::shape("lsq scale grad", x.shape(), upstream.shape()));
        }
        let (qn, qp) = (self.q_neg(), self.q_pos());
        let raw: f64 = x
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&xv, &g)| {
                let v = xv / self.scale;
                let local = if v < -qn {
                    -qn
                } else if v > qp {
                    qp
                } else {
                    v.round_ties_even() - v
                };
                g * local
            })
            .sum();
        Ok(raw / ((x.len() as f64) * qp).sqrt())
    }
}

pub fn q_neg(bits: u8) -> f64 {
    f64::from(1u32 << (bits - 1))
}

pub fn q_pos(bits: u8) -> f64 {
    f64::from((1u32 << (bits - 1)) - 1)
}

/// Max-abs calibration: `max|x| / (2^(n-1) - 1)`, or 1 for an all-zero input.
pub fn calibrate_scale(x: &Tensor, bits: u8) -> f64 {
    let m = x.max_abs();
    if m == 0.0 {
        1.0
    } else {
        m / q_pos(bits)
    }
}
