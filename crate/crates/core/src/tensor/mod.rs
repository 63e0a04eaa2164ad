//! Dense `channels × height × width` tensors and the numerical kernels the
//! network layers are assembled from.
//!
//! All kernels are pure: they take their operands by reference and return
//! fresh tensors. Every output element is produced by a fixed reduction order,
//! so results do not depend on how callers schedule work.

mod activation;
pub(crate) mod conv;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv2d_backward, conv2d_backward_params, conv2d_forward, ConvGrads, ConvParams};
pub use pool::{
    avgpool_backward, avgpool_forward, maxpool_backward, maxpool_forward, pooled_len, ArgmaxMap,
};

use crate::error::{Error, Result};

/// Shape of a rank-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Row-major `channels × height × width` array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// One channel plane as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channels `start..end` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.shape.channels {
            return Err(Error::shape(format!(
                "channel range {start}..{end} out of bounds for {}",
                self.shape
            )));
        }
        let plane = self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(end - start, self.shape.height, self.shape.width),
            data: self.data[start * plane..end * plane].to_vec(),
        })
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)`; positions outside the tensor read as zero.
    pub fn crop_padded(&self, y0: isize, x0: isize, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(Shape::new(self.shape.channels, h, w));
        let (sh, sw) = (self.shape.height as isize, self.shape.width as isize);
        for c in 0..self.shape.channels {
            for y in 0..h {
                let sy = y0 + y as isize;
                if sy < 0 || sy >= sh {
                    continue;
                }
                for x in 0..w {
                    let sx = x0 + x as isize;
                    if sx < 0 || sx >= sw {
                        continue;
                    }
                    let v = self.get(c, sy as usize, sx as usize);
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    /// Spatial window fully inside the tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.shape.height || x0 + w > self.shape.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}",
                self.shape
            )));
        }
        Ok(self.crop_padded(y0 as isize, x0 as isize, h, w))
    }

    /// Mirror along the vertical axis (left/right swap).
    pub fn flip_horizontal(&self) -> Tensor {
        let width = self.shape.width;
        Tensor::from_fn(self.shape, |c, y, x| self.get(c, y, width - 1 - x))
    }

    /// Rotate every channel by 90° counter-clockwise.
    pub fn rotate90(&self) -> Tensor {
        let Shape { channels, height, width } = self.shape;
        let out_shape = Shape::new(channels, width, height);
        Tensor::from_fn(out_shape, |c, y, x| self.get(c, x, width - 1 - y))
    }
}

/// Stack tensors along the channel axis, preserving order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let (h, w) = (first.height(), first.width());
    let mut channels = 0;
    for t in inputs {
        if t.height() != h || t.width() != w {
            return Err(Error::shape(format!(
                "concat_channels spatial mismatch: {} vs {}",
                first.shape(),
                t.shape()
            )));
        }
        channels += t.channels();
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor { shape: Shape::new(channels, h, w), data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(Shape::new(1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn concat_single_input_unchanged() {
        let t = Tensor::from_fn(Shape::new(2, 3, 3), |c, y, x| (c * 9 + y * 3 + x) as f64);
        assert_eq!(concat_channels(&[&t]).unwrap(), t);
    }

    #[test]
    fn concat_two_maps_then_slice() {
        let a = Tensor::filled(Shape::new(1, 4, 5), 1.0);
        let b = Tensor::from_fn(Shape::new(1, 4, 5), |_, y, x| (y + x) as f64);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 2);
        assert_eq!(cat.slice_channels(0, 1).unwrap(), a);
        assert_eq!(cat.slice_channels(1, 2).unwrap(), b);
    }

    #[test]
    fn concat_three_branch_widths() {
        let t = Tensor::zeros(Shape::new(16, 8, 8));
        assert_eq!(concat_channels(&[&t, &t, &t]).unwrap().channels(), 48);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 4, 4));
        let b = Tensor::zeros(Shape::new(1, 4, 5));
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::from_fn(Shape::new(2, 3, 5), |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_horizontal().get(1, 2, 0), t.get(1, 2, 4));
    }

    #[test]
    fn four_rotations_are_identity() {
        let t = Tensor::from_fn(Shape::new(1, 3, 5), |_, y, x| (y * 10 + x) as f64);
        let r = t.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(r, t);
    }

    #[test]
    fn crop_padded_reads_zero_outside() {
        let t = Tensor::filled(Shape::new(1, 2, 2), 3.0);
        let c = t.crop_padded(-1, -1, 4, 4);
        assert_eq!(c.sum(), 12.0);
        assert_eq!(c.get(0, 0, 0), 0.0);
        assert_eq!(c.get(0, 1, 1), 3.0);
    }
}
