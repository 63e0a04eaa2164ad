use rand::Rng;

use super::{pool_labels, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Crop `size × size` at `(y0, x0)` from every channel and the mask, optionally
/// mirrored, and pool the mask onto the output grid.
pub fn crop_sample(channels: &Tensor, mask: &Tensor, y0: usize, x0: usize, size: usize, flip: bool) -> Result<Sample> {
    let mut input = channels.crop(y0, x0, size, size)?;
    let mut m = mask.crop(y0, x0, size, size)?;
    if flip {
        input = input.flip_horizontal();
        m = m.flip_horizontal();
    }
    let label = pool_labels(&m)?;
    Ok(Sample { input, label })
}

/// `crops_per_frame` random crops with the same window and flip applied to all
/// channels and the mask. Crop origins sit on multiples of 4.
pub fn augment(channels: &Tensor, mask: &Tensor, config: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let size = config.crop_size;
    let (h, w) = (channels.height(), channels.width());
    if mask.height() != h || mask.width() != w || mask.channels() != 1 {
        return Err(Error::shape(format!("mask {} does not cover frame {}", mask.shape(), channels.shape())));
    }
    if h < size || w < size {
        return Err(Error::invalid(format!("frame {h}x{w} is smaller than the {size}x{size} crop")));
    }
    (0..config.crops_per_frame)
        .map(|_| {
            let y0 = 4 * rng.gen_range(0..=(h - size) / 4);
            let x0 = 4 * rng.gen_range(0..=(w - size) / 4);
            let flip = rng.gen_bool(config.flip_probability);
            crop_sample(channels, mask, y0, x0, size, flip)
        })
        .collect()
}
