//! Element types and per-lane numeric conversion.
//!
//! Every conversion into a stored element goes through [`ScalarType::convert`]:
//! floats round to the nearest representable value, integers round half to
//! even and saturate at the type bounds. NaN converts to zero for integers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl ScalarType {
    pub const ALL: [ScalarType; 5] = [
        ScalarType::U8,
        ScalarType::I16,
        ScalarType::U16,
        ScalarType::F32,
        ScalarType::F64,
    ];

    pub fn size(self) -> usize {
        match self {
            ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            ScalarType::U8 => 0,
            ScalarType::I16 => 1,
            ScalarType::U16 => 2,
            ScalarType::F32 => 3,
            ScalarType::F64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    pub fn min_value(self) -> f64 {
        match self {
            ScalarType::U8 | ScalarType::U16 => 0.0,
            ScalarType::I16 => i16::MIN as f64,
            ScalarType::F32 => f32::MIN as f64,
            ScalarType::F64 => f64::MIN,
        }
    }

    pub fn max_value(self) -> f64 {
        match self {
            ScalarType::U8 => u8::MAX as f64,
            ScalarType::I16 => i16::MAX as f64,
            ScalarType::U16 => u16::MAX as f64,
            ScalarType::F32 => f32::MAX as f64,
            ScalarType::F64 => f64::MAX,
        }
    }

    /// Value marking a non-uniform chunk in a const chunk table.
    pub fn sentinel(self) -> f64 {
        if self.is_float() {
            f64::NAN
        } else {
            self.max_value()
        }
    }

    pub fn is_sentinel(self, v: f64) -> bool {
        if self.is_float() {
            v.is_nan()
        } else {
            v == self.max_value()
        }
    }

    /// Converts `v` to the nearest value representable in this type.
    #[inline]
    pub fn convert(self, v: f64) -> f64 {
        match self {
            ScalarType::F64 => v,
            ScalarType::F32 => v as f32 as f64,
            ScalarType::U8 => v.round_ties_even() as u8 as f64,
            ScalarType::I16 => v.round_ties_even() as i16 as f64,
            ScalarType::U16 => v.round_ties_even() as u16 as f64,
        }
    }

    #[inline]
    pub fn read(self, bytes: &[u8], index: usize) -> f64 {
        let s = self.size();
        let b = &bytes[index * s..index * s + s];
        match self {
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }

    /// Writes `v` (converted with [`ScalarType::convert`] semantics).
    #[inline]
    pub fn write(self, bytes: &mut [u8], index: usize, v: f64) {
        let s = self.size();
        let b = &mut bytes[index * s..index * s + s];
        match self {
            ScalarType::U8 => b[0] = v.round_ties_even() as u8,
            ScalarType::I16 => b.copy_from_slice(&(v.round_ties_even() as i16).to_le_bytes()),
            ScalarType::U16 => b.copy_from_slice(&(v.round_ties_even() as u16).to_le_bytes()),
            ScalarType::F32 => b.copy_from_slice(&(v as f32).to_le_bytes()),
            ScalarType::F64 => b.copy_from_slice(&v.to_le_bytes()),
        }
    }

    pub fn decode_all(self, bytes: &[u8]) -> Vec<f64> {
        (0..bytes.len() / self.size())
            .map(|i| self.read(bytes, i))
            .collect()
    }

    pub fn encode_all(self, values: &[f64], out: &mut [u8]) {
        for (i, v) in values.iter().enumerate() {
            self.write(out, i, *v);
        }
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScalarType::U8 => "u8",
            ScalarType::I16 => "i16",
            ScalarType::U16 => "u16",
            ScalarType::F32 => "f32",
            ScalarType::F64 => "f64",
        };
        f.write_str(s)
    }
}

/// A scalar type with 1 to 4 lanes.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementType {
    pub scalar: ScalarType,
    pub lanes: u8,
}

impl ElementType {
    pub const fn scalar(scalar: ScalarType) -> Self {
        ElementType { scalar, lanes: 1 }
    }

    pub fn vec(scalar: ScalarType, lanes: u8) -> Result<Self> {
        if !(1..=4).contains(&lanes) {
            return Err(Error::invalid(format!(
                "element lanes must be in 1..=4, got {lanes}"
            )));
        }
        Ok(ElementType { scalar, lanes })
    }

    pub fn size(self) -> usize {
        self.scalar.size() * self.lanes as usize
    }

    pub fn is_scalar(self) -> bool {
        self.lanes == 1
    }
}

impl From<ScalarType> for ElementType {
    fn from(s: ScalarType) -> Self {
        ElementType::scalar(s)
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lanes == 1 {
            write!(f, "{}", self.scalar)
        } else {
            write!(f, "{}x{}", self.scalar, self.lanes)
        }
    }
}

impl std::str::FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, lanes) = match s.split_once('x') {
            Some((b, l)) => (
                b,
                l.parse::<u8>()
                    .map_err(|_| Error::invalid(format!("bad lane count in `{s}`")))?,
            ),
            None => (s, 1),
        };
        let scalar = match base.to_ascii_lowercase().as_str() {
            "u8" => ScalarType::U8,
            "i16" => ScalarType::I16,
            "u16" => ScalarType::U16,
            "f32" => ScalarType::F32,
            "f64" => ScalarType::F64,
            _ => return Err(Error::invalid(format!("unknown element type `{s}`"))),
        };
        ElementType::vec(scalar, lanes)
    }
}
