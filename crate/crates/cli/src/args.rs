use tessera::render::{CameraState, Compositing};

/// `64x64x32` → `[64, 64, 32]`.
pub fn dims(s: &str) -> Result<Vec<u64>, String> {
    s.split('x')
        .map(|p| match p.trim().parse::<u64>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("`{s}` is not a list of positive extents like 64x64x32")),
        })
        .collect()
}

/// A parsed list argument.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

pub fn dim_list(s: &str) -> Result<List<u64>, String> {
    dims(s).map(List)
}

pub fn float_list(s: &str) -> Result<List<f64>, String> {
    floats(s).map(List)
}

/// `WxH` → `(W, H)`.
pub fn pair(s: &str) -> Result<(u64, u64), String> {
    match dims(s)?.as_slice() {
        [w, h] => Ok((*w, *h)),
        _ => Err(format!("`{s}` is not of the form WIDTHxHEIGHT")),
    }
}

pub fn floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("`{p}` is not a finite number"))
        })
        .collect()
}

/// `min,max`.
pub fn range(s: &str) -> Result<(f64, f64), String> {
    match floats(s)?.as_slice() {
        [a, b] if b > a => Ok((*a, *b)),
        _ => Err(format!("`{s}` is not of the form MIN,MAX with MIN < MAX")),
    }
}

/// Byte counts with an optional K, M, G or T suffix (powers of 1024).
pub fn bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let (num, shift) = match t.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let shift = match c.to_ascii_uppercase() {
                'K' => 10,
                'M' => 20,
                'G' => 30,
                'T' => 40,
                _ => return Err(format!("unknown size suffix in `{s}`")),
            };
            (&t[..i], shift)
        }
        _ => (t, 0),
    };
    let n: u64 = num.parse().map_err(|_| format!("`{s}` is not a byte count like 512M"))?;
    n.checked_mul(1 << shift)
        .filter(|v| *v > 0)
        .ok_or_else(|| format!("`{s}` is out of range"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Camera {
    Auto,
    Explicit { eye: [f64; 3], look_at: [f64; 3], up: [f64; 3] },
}

/// `auto` or `EX,EY,EZ;LX,LY,LZ;UX,UY,UZ` (eye, look-at, up in physical
/// coordinates, dimension order z, y, x).
pub fn camera(s: &str) -> Result<Camera, String> {
    if s.trim() == "auto" {
        return Ok(Camera::Auto);
    }
    let parts: Vec<Vec<f64>> = s.split(';').map(floats).collect::<Result<_, _>>()?;
    let v = |p: &Vec<f64>| -> Result<[f64; 3], String> {
        p.as_slice()
            .try_into()
            .map_err(|_| format!("`{s}` needs three coordinates per vector"))
    };
    match parts.as_slice() {
        [e, l, u] => Ok(Camera::Explicit {
            eye: v(e)?,
            look_at: v(l)?,
            up: v(u)?,
        }),
        _ => Err(format!("`{s}` is neither `auto` nor EYE;LOOK_AT;UP")),
    }
}

impl Camera {
    pub fn resolve(&self, auto: impl FnOnce() -> tessera::Result<CameraState>, fov: f64) -> tessera::Result<CameraState> {
        match self {
            Camera::Auto => auto(),
            Camera::Explicit { eye, look_at, up } => {
                let c = auto()?;
                CameraState::new(*eye, *look_at, *up, fov, c.near, c.far)
            }
        }
    }
}

pub fn compositing(s: &str) -> Result<Compositing, String> {
    match s {
        "dvr" => Ok(Compositing::Dvr),
        "mop" => Ok(Compositing::Mop),
        _ => Err(format!("`{s}` is not dvr or mop")),
    }
}

pub fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("`{s}` is not on or off")),
    }
}
