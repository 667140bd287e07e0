//! Fourier positional encoding of bounding-box coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometric frequency bank `f_i = 2^i`, i in `0..num_frequencies`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct FourierSpec {
    pub num_frequencies: usize,
}

impl Default for FourierSpec {
    fn default() -> Self {
        FourierSpec { num_frequencies: 8 }
    }
}

impl FourierSpec {
    pub fn new(num_frequencies: usize) -> Result<Self> {
        if num_frequencies == 0 {
            return Err(Error::input("fourier: need at least one frequency"));
        }
        Ok(FourierSpec { num_frequencies })
    }

    pub fn frequencies(&self) -> impl Iterator<Item = f64> {
        (0..self.num_frequencies).map(|i| (1u64 << i) as f64)
    }

    /// 4 coordinates x 2 (sin, cos) x frequency count.
    pub fn encoding_dim(&self) -> usize {
        4 * 2 * self.num_frequencies
    }
}

/// Encodes `(x0, y0, x1, y1)` as `[sin(2π f c), cos(2π f c)]` pairs,
/// coordinate-major. Pure: identical inputs give bit-identical outputs.
pub fn fourier_encode_box<S: Scalar>(b: &BoundingBox, spec: &FourierSpec) -> Tensor<S> {
    let coords = [b.x0, b.y0, b.x1, b.y1];
    let mut data = Vec::with_capacity(spec.encoding_dim());
    for c in coords {
        for f in spec.frequencies() {
            let angle = 2.0 * std::f64::consts::PI * f * c;
            data.push(S::cast(angle.sin()));
            data.push(S::cast(angle.cos()));
        }
    }
    Tensor::from_vec_unchecked(vec![spec.encoding_dim()], data)
}
