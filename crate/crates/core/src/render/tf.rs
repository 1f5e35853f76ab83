use serde::{Deserialize, Serialize};

use crate::chunk::ParamWriter;
use crate::error::{Error, Result};

/// Maps scalar values to straight (not premultiplied) RGBA in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferFunction {
    /// `t = clamp((v - min) / (max - min), 0, 1)` mapped to `(t, t, t, t)`.
    GreyRamp { min: f64, max: f64 },
    /// Piecewise-linear lookup table spanning `[min, max]`, clamped outside.
    Table {
        min: f64,
        max: f64,
        colors: Vec<[f64; 4]>,
    },
}

pub fn grey_ramp(min: f64, max: f64) -> Result<TransferFunction> {
    let tf = TransferFunction::GreyRamp { min, max };
    tf.validate()?;
    Ok(tf)
}

impl TransferFunction {
    pub fn validate(&self) -> Result<()> {
        let (min, max) = self.range();
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::invalid(format!(
                "transfer function needs finite min < max, got [{min}, {max}]"
            )));
        }
        if let TransferFunction::Table { colors, .. } = self {
            if colors.is_empty() {
                return Err(Error::invalid("transfer function table is empty"));
            }
            if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid("transfer function colors must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        match self {
            TransferFunction::GreyRamp { min, max } | TransferFunction::Table { min, max, .. } => {
                (*min, *max)
            }
        }
    }

    pub fn eval(&self, v: f64) -> [f64; 4] {
        match self {
            TransferFunction::GreyRamp { min, max } => {
                let t = ((v - min) / (max - min)).clamp(0.0, 1.0);
                let t = if t.is_nan() { 0.0 } else { t };
                [t, t, t, t]
            }
            TransferFunction::Table { min, max, colors } => {
                let t = ((v - min) / (max - min)).clamp(0.0, 1.0);
                let t = if t.is_nan() { 0.0 } else { t };
                if colors.len() == 1 {
                    return colors[0];
                }
                let x = t * (colors.len() - 1) as f64;
                let i = (x.floor() as usize).min(colors.len() - 2);
                let f = x - i as f64;
                let (a, b) = (colors[i], colors[i + 1]);
                [0, 1, 2, 3].map(|k| a[k] + (b[k] - a[k]) * f)
            }
        }
    }

    pub(crate) fn params(&self, w: ParamWriter) -> ParamWriter {
        match self {
            TransferFunction::GreyRamp { min, max } => w.str("grey_ramp").f64(*min).f64(*max),
            TransferFunction::Table { min, max, colors } => {
                let flat: Vec<f64> = colors.iter().flatten().copied().collect();
                w.str("table").f64(*min).f64(*max).f64s(&flat)
            }
        }
    }
}

/// Quantizes a premultiplied color in `[0, 1]` to RGBA8 (round half to even,
/// saturating).
pub fn to_rgba8(c: [f64; 4]) -> [u8; 4] {
    c.map(|v| crate::dtype::ScalarType::U8.convert(v * 255.0) as u8)
}
