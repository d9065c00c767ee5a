//! Separable 1-D resampling kernels.
//!
//! Every method is expressed as a dense `out_len x in_len` weight matrix so the
//! same kernels drive 8-bit image resizing and the differentiable resample op.
//! Pixel centres follow the half-pixel (align-corners = false) convention:
//! output index `d` maps to source coordinate `(d + 0.5) * in / out - 0.5`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    /// Source pixel `floor((d + 0.5) * in / out)`.
    Nearest,
    /// Two-tap linear; source coordinate clamped at 0, indices clamped at the border.
    Bilinear,
    /// Four-tap Keys cubic with `a = -0.75`, border indices replicated.
    Bicubic,
    /// Box average of the exact source footprint `[d * in / out, (d + 1) * in / out)`.
    Area,
}

impl ResampleMethod {
    pub const ALL: [ResampleMethod; 4] = [
        ResampleMethod::Nearest,
        ResampleMethod::Bilinear,
        ResampleMethod::Bicubic,
        ResampleMethod::Area,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResampleMethod::Nearest => "nearest",
            ResampleMethod::Bilinear => "bilinear",
            ResampleMethod::Bicubic => "bicubic",
            ResampleMethod::Area => "area",
        }
    }
}

impl fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMethod(pub String);

impl fmt::Display for UnknownMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unsupported resample method `{}` (expected nearest, bilinear, bicubic or area)", self.0)
    }
}

impl std::error::Error for UnknownMethod {}

impl FromStr for ResampleMethod {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(ResampleMethod::Nearest),
            "bilinear" | "linear" => Ok(ResampleMethod::Bilinear),
            "bicubic" | "cubic" => Ok(ResampleMethod::Bicubic),
            "area" | "box" => Ok(ResampleMethod::Area),
            other => Err(UnknownMethod(other.to_string())),
        }
    }
}

const CUBIC_A: f64 = -0.75;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Row-major `out_len x in_len` matrix mapping an input line to an output line.
pub fn resample_matrix(in_len: usize, out_len: usize, method: ResampleMethod) -> Vec<f64> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let mut m = vec![0.0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    for d in 0..out_len {
        let row = &mut m[d * in_len..(d + 1) * in_len];
        match method {
            ResampleMethod::Nearest => {
                let s = (((d as f64) + 0.5) * scale).floor() as isize;
                row[clamp(s)] = 1.0;
            }
            ResampleMethod::Bilinear => {
                let x = (((d as f64) + 0.5) * scale - 0.5).max(0.0);
                let i0 = x.floor() as isize;
                let t = x - i0 as f64;
                row[clamp(i0)] += 1.0 - t;
                row[clamp(i0 + 1)] += t;
            }
            ResampleMethod::Bicubic => {
                let x = ((d as f64) + 0.5) * scale - 0.5;
                let i0 = x.floor() as isize;
                let t = x - i0 as f64;
                for k in -1..=2isize {
                    row[clamp(i0 + k)] += cubic(t - k as f64);
                }
            }
            ResampleMethod::Area => {
                let lo = d as f64 * scale;
                let hi = (d + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let end = (hi.ceil() as usize).min(in_len);
                for (s, w) in row.iter_mut().enumerate().take(end).skip(first) {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    *w += overlap / scale;
                }
            }
        }
    }
    m
}
