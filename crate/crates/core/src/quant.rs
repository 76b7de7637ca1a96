//! Linear quantization: specs, states, calibration, and the integer mapping.
//!
//! The quantizer maps a real `x` to an index `clip(round(x/s) + z, n, p)`
//! and back to `s * (index - z)`. Rounding ties break away from zero
//! everywhere in this crate, including the reference oracles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Round half away from zero, the project-wide tie rule.
#[inline]
pub fn round_half_away(v: f32) -> f32 {
    v.round()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    /// z = 0, p = -n = 2^(b-1) - 1.
    Symmetric,
    /// n = 0, p = 2^b - 1.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One state per slice along the given axis (axis 0 everywhere here:
    /// output channels for weights, batch rows for activations).
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub symmetry: Symmetry,
}

impl QuantSpec {
    pub fn new(bits: u32, symmetry: Symmetry) -> Result<Self> {
        if !(2..=24).contains(&bits) {
            return Err(Error::Invalid(format!(
                "bit-width must be in [2, 24], got {bits}"
            )));
        }
        Ok(QuantSpec { bits, symmetry })
    }

    pub fn symmetric(bits: u32) -> Result<Self> {
        QuantSpec::new(bits, Symmetry::Symmetric)
    }

    pub fn asymmetric(bits: u32) -> Result<Self> {
        QuantSpec::new(bits, Symmetry::Asymmetric)
    }

    /// Smallest quantization index.
    pub fn n(&self) -> i32 {
        match self.symmetry {
            Symmetry::Symmetric => -((1i32 << (self.bits - 1)) - 1),
            Symmetry::Asymmetric => 0,
        }
    }

    /// Largest quantization index.
    pub fn p(&self) -> i32 {
        match self.symmetry {
            Symmetry::Symmetric => (1i32 << (self.bits - 1)) - 1,
            Symmetry::Asymmetric => (1i32 << self.bits) - 1,
        }
    }
}

/// Interval and zero offset for one quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantState {
    pub s: f32,
    pub z: f32,
}

impl QuantState {
    pub fn symmetric(s: f32) -> Self {
        QuantState { s, z: 0.0 }
    }

    pub fn validate(&self, spec: &QuantSpec) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::Invalid(format!("interval must be positive, got {}", self.s)));
        }
        if spec.symmetry == Symmetry::Symmetric && self.z != 0.0 {
            return Err(Error::Invalid("symmetric quantization requires z = 0".into()));
        }
        if self.z < spec.n() as f32 || self.z > spec.p() as f32 {
            return Err(Error::Invalid(format!(
                "zero offset {} outside [{}, {}]",
                self.z,
                spec.n(),
                spec.p()
            )));
        }
        Ok(())
    }
}

/// Interval floor used when a tensor carries no spread at all.
pub const INTERVAL_FLOOR: f32 = f32::EPSILON;

/// Quantize to integer indices and back. `z` must be integer-valued here;
/// the training path (`Tape::fake_quant`) is the one that tolerates real z.
pub fn quantize(x: &Tensor, spec: &QuantSpec, state: &QuantState) -> Result<(Vec<i32>, Tensor)> {
    state.validate(spec)?;
    if state.z.fract() != 0.0 {
        return Err(Error::Invalid(format!(
            "zero offset must be integer-valued for integer quantization, got {}",
            state.z
        )));
    }
    let (n, p) = (spec.n() as f32, spec.p() as f32);
    let mut indices = Vec::with_capacity(x.numel());
    let mut dequant = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let q = (round_half_away(v / state.s) + state.z).clamp(n, p);
        indices.push(q as i32);
        dequant.push(state.s * (q - state.z));
    }
    Ok((indices, Tensor::new(x.shape().to_vec(), dequant)?))
}

/// Dequantized value only, accepting a real-valued z (training semantics).
pub fn dequantize_value(x: f32, spec: &QuantSpec, state: &QuantState) -> f32 {
    let (n, p) = (spec.n() as f32, spec.p() as f32);
    let q = (round_half_away(x / state.s) + state.z).clamp(n, p);
    state.s * (q - state.z)
}

/// Apply the quantize/dequantize round trip without gradients.
pub fn fake_quant_eval(x: &Tensor, spec: &QuantSpec, state: &QuantState) -> Result<Tensor> {
    if !(state.s > 0.0) || !state.s.is_finite() {
        return Err(Error::Invalid(format!("interval must be positive, got {}", state.s)));
    }
    Ok(x.map(|v| dequantize_value(v, spec, state)))
}

/// Min-max calibration. Degenerate inputs (all elements equal) fall back to
/// a state that reproduces the constant exactly after dequantization.
pub fn minmax_calibrate(x: &Tensor, spec: &QuantSpec) -> Result<QuantState> {
    if x.numel() == 0 {
        return Err(Error::Invalid("cannot calibrate an empty tensor".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in x.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    calibrate_from_range(lo, hi, spec)
}

fn calibrate_from_range(lo: f32, hi: f32, spec: &QuantSpec) -> Result<QuantState> {
    let (n, p) = (spec.n(), spec.p());
    match spec.symmetry {
        Symmetry::Symmetric => {
            let amax = lo.abs().max(hi.abs());
            let s = if amax > 0.0 { amax / p as f32 } else { INTERVAL_FLOOR };
            Ok(QuantState::symmetric(s.max(f32::MIN_POSITIVE)))
        }
        Symmetry::Asymmetric => {
            let center = round_half_away((n + p) as f32 / 2.0);
            if hi > lo {
                let s = (hi - lo) / (p - n) as f32;
                if s > 0.0 {
                    let z = (round_half_away(-lo / s) + n as f32).clamp(n as f32, p as f32);
                    return Ok(QuantState { s, z });
                }
                // Range too narrow for f32; treat as constant at the midpoint.
                return Ok(QuantState {
                    s: constant_interval((lo + hi) / 2.0),
                    z: center,
                });
            }
            Ok(QuantState {
                s: constant_interval(lo),
                z: center,
            })
        }
    }
}

/// Interval for an all-equal tensor: |c| lands the constant on an exact
/// level next to the centered offset; zero gets the epsilon floor.
fn constant_interval(c: f32) -> f32 {
    if c == 0.0 {
        INTERVAL_FLOOR
    } else {
        c.abs()
    }
}

/// Independent min-max calibration per output channel (row) of a weight.
pub fn perchannel_weight_calibrate(w: &Tensor, spec: &QuantSpec) -> Result<Vec<QuantState>> {
    let (rows, _cols) = w.dims2()?;
    if rows == 0 {
        return Err(Error::Invalid("weight must have at least one output channel".into()));
    }
    (0..rows)
        .map(|r| {
            let row = w.row(r);
            let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            calibrate_from_range(lo, hi, spec)
        })
        .collect()
}

/// Fresh per-call interval from the tensor's absolute maximum. This is the
/// input-dependent dynamic baseline; it requires a symmetric spec.
pub fn input_dynamic_interval(x: &Tensor, spec: &QuantSpec) -> Result<QuantState> {
    if spec.symmetry != Symmetry::Symmetric {
        return Err(Error::Invalid(
            "input-dynamic intervals are defined for symmetric quantization".into(),
        ));
    }
    let amax = x.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let s = if amax > 0.0 { amax / spec.p() as f32 } else { INTERVAL_FLOOR };
    Ok(QuantState::symmetric(s.max(f32::MIN_POSITIVE)))
}
