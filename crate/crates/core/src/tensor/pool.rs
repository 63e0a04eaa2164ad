use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Number of pooling windows along one axis; trailing rows/cols that do not
/// fill a window are dropped.
pub fn pooled_len(len: usize, k: usize, stride: usize) -> usize {
    if len < k {
        0
    } else {
        (len - k) / stride + 1
    }
}

fn pooled_shape(input: Shape, k: usize, stride: usize) -> Result<Shape> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid(format!("pool kernel and stride must be positive (k={k}, s={stride})")));
    }
    let oh = pooled_len(input.height, k, stride);
    let ow = pooled_len(input.width, k, stride);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("input {input} smaller than pool window {k}")));
    }
    Ok(Shape::new(input.channels, oh, ow))
}

/// Winner positions recorded by [`maxpool_forward`], as flat input indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: Shape,
    output_shape: Shape,
    winners: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// Max over each `k × k` window. Ties go to the first position in row-major order.
pub fn maxpool_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, ArgmaxMap)> {
    let shape = pooled_shape(input.shape(), k, stride)?;
    let mut out = Tensor::zeros(shape);
    let mut winners = Vec::with_capacity(shape.len());
    let data = input.data();
    for c in 0..shape.channels {
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                let mut best = input.index(c, oy * stride, ox * stride);
                for ky in 0..k {
                    let row = input.index(c, oy * stride + ky, ox * stride);
                    for i in row..row + k {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.set(c, oy, ox, data[best]);
                winners.push(best);
            }
        }
    }
    Ok((out, ArgmaxMap { input_shape: input.shape(), output_shape: shape, winners }))
}

/// Route each output gradient to its recorded winner.
pub fn maxpool_backward(map: &ArgmaxMap, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != map.output_shape {
        return Err(Error::shape(format!(
            "maxpool grad_out is {}, argmax map covers {}",
            grad_out.shape(),
            map.output_shape
        )));
    }
    let mut grad = Tensor::zeros(map.input_shape);
    let g = grad.data_mut();
    for (&w, &v) in map.winners.iter().zip(grad_out.data()) {
        g[w] += v;
    }
    Ok(grad)
}

/// Arithmetic mean over each `k × k` window.
pub fn avgpool_forward(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let shape = pooled_shape(input.shape(), k, stride)?;
    let norm = 1.0 / (k * k) as f64;
    Ok(Tensor::from_fn(shape, |c, oy, ox| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                acc += input.get(c, oy * stride + ky, ox * stride + kx);
            }
        }
        acc * norm
    }))
}

pub fn avgpool_backward(input_shape: Shape, k: usize, stride: usize, grad_out: &Tensor) -> Result<Tensor> {
    let shape = pooled_shape(input_shape, k, stride)?;
    if grad_out.shape() != shape {
        return Err(Error::shape(format!("avgpool grad_out is {}, expected {shape}", grad_out.shape())));
    }
    let norm = 1.0 / (k * k) as f64;
    let mut grad = Tensor::zeros(input_shape);
    for c in 0..shape.channels {
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                let g = grad_out.get(c, oy, ox) * norm;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = grad.index(c, oy * stride + ky, ox * stride + kx);
                        grad.data_mut()[i] += g;
                    }
                }
            }
        }
    }
    Ok(grad)
}
