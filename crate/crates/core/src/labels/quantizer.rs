use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    /// Equal-width bins on `ln(v)`; non-positive values clamp to bin 0.
    Log,
}

/// Equal-width binning between a fitted minimum and maximum.
///
/// `min` and `max` are stored in the value domain (Hz for F0); bin edges are
/// equally spaced in the scale domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub n_bins: usize,
    pub scale: Scale,
    pub min: f64,
    pub max: f64,
}

impl Quantizer {
    pub fn new(n_bins: usize, scale: Scale, min: f64, max: f64) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Config(format!("quantizer needs >= 2 bins, got {n_bins}")));
        }
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::DegenerateRange(format!(
                "quantizer range [{min}, {max}] is empty"
            )));
        }
        if scale == Scale::Log && min <= 0.0 {
            return Err(Error::Config(format!(
                "log-scale quantizer needs a positive minimum, got {min}"
            )));
        }
        Ok(Self {
            n_bins,
            scale,
            min,
            max,
        })
    }

    /// Fits the range to the observed values. Log scale ignores non-positive
    /// values (the unvoiced sentinel) when fitting.
    pub fn fit(values: &[f64], n_bins: usize, scale: Scale) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cannot fit quantizer on {v}")));
        }
        let usable = values
            .iter()
            .copied()
            .filter(|&v| scale == Scale::Linear || v > 0.0);
        let (min, max) = usable.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if !(min < max) {
            return Err(Error::DegenerateRange(format!(
                "need at least two distinct values to fit a {scale:?} quantizer"
            )));
        }
        Self::new(n_bins, scale, min, max)
    }

    fn forward(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => v,
            Scale::Log => v.ln(),
        }
    }

    fn inverse(&self, s: f64) -> f64 {
        match self.scale {
            Scale::Linear => s,
            Scale::Log => s.exp(),
        }
    }

    fn lo(&self) -> f64 {
        self.forward(self.min)
    }

    /// Bin width in the scale domain.
    pub fn bin_width(&self) -> f64 {
        (self.forward(self.max) - self.lo()) / self.n_bins as f64
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn quantize(&self, v: f64) -> Result<usize> {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("cannot quantize {v}")));
        }
        if v <= self.min {
            return Ok(0);
        }
        if v >= self.max {
            return Ok(self.n_bins - 1);
        }
        let pos = (self.forward(v) - self.lo()) / self.bin_width();
        Ok((pos.floor() as usize).min(self.n_bins - 1))
    }

    /// Center of `bin` in the value domain.
    pub fn dequantize(&self, bin: usize) -> Result<f64> {
        if bin >= self.n_bins {
            return Err(Error::Format(format!(
                "bin {bin} out of range for {} bins",
                self.n_bins
            )));
        }
        Ok(self.inverse(self.lo() + (bin as f64 + 0.5) * self.bin_width()))
    }

    /// Value-domain edges `[lower, upper]` of `bin`.
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = self.bin_width();
        (
            self.inverse(self.lo() + bin as f64 * w),
            self.inverse(self.lo() + (bin + 1) as f64 * w),
        )
    }

    /// Distance between `v` (after clamping) and its bin center, measured in
    /// the scale domain. Never exceeds `bin_width() / 2`.
    pub fn round_trip_error(&self, v: f64) -> Result<f64> {
        let c = self.dequantize(self.quantize(v)?)?;
        Ok((self.forward(c) - self.forward(self.clamp(v))).abs())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let q: Quantizer = serde_json::from_str(&text)?;
        Quantizer::new(q.n_bins, q.scale, q.min, q.max)
    }
}
