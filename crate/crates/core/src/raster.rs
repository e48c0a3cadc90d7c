//! Single-channel f32 rasters.

use crate::error::{shape_err, Result};

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize) -> Self {
        Raster { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Raster { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{} values for a {rows}x{cols} raster", data.len()));
        }
        Ok(Raster { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.cols + col] = v;
    }

    /// Bilinear sample at column `u`, row `v`. The caller guarantees the
    /// 2x2 footprint is inside the raster.
    #[inline]
    pub fn bilinear(&self, u: f32, v: f32) -> f32 {
        let (taps, w) = bilinear_taps(u, v, self.cols);
        let d = &self.data;
        w[0] * d[taps[0]] + w[1] * d[taps[1]] + w[2] * d[taps[2]] + w[3] * d[taps[3]]
    }

    /// 8-bit quantization of values in [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        Raster::from_vec(rows, cols, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Flat indices and weights of the bilinear footprint of `(u, v)` in a
/// raster with `cols` columns. Order: (x0,y0), (x1,y0), (x0,y1), (x1,y1).
#[inline]
pub fn bilinear_taps(u: f32, v: f32, cols: usize) -> ([usize; 4], [f32; 4]) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let i = y0 as usize * cols + x0 as usize;
    (
        [i, i + 1, i + cols, i + cols + 1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}
