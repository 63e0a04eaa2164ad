use serde::{Deserialize, Serialize};

use super::Clip;
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tensor};

/// The three visual cues, in cue-stack channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Appearance,
    Motion,
    Structure,
}

impl Cue {
    pub const ALL: [Cue; 3] = [Cue::Appearance, Cue::Motion, Cue::Structure];

    /// Channel of this cue in a [`cue_stack`] tensor.
    pub fn channel(self) -> usize {
        match self {
            Cue::Appearance => 0,
            Cue::Motion => 1,
            Cue::Structure => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cue::Appearance => "appearance",
            Cue::Motion => "motion",
            Cue::Structure => "structure",
        }
    }
}

impl std::str::FromStr for Cue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "appearance" => Ok(Cue::Appearance),
            "motion" => Ok(Cue::Motion),
            "structure" => Ok(Cue::Structure),
            other => Err(Error::invalid(format!("unknown cue `{other}` (appearance|motion|structure)"))),
        }
    }
}

impl std::fmt::Display for Cue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame `index` minus the per-pixel mean of all frames. Signed, unthresholded.
pub fn motion_channel_at(frames: &[Tensor], index: usize) -> Result<Tensor> {
    let target = frames
        .get(index)
        .ok_or_else(|| Error::invalid(format!("frame {index} out of range for {} frames", frames.len())))?;
    // mean of differences rather than difference from the mean: identical frames give exact zeros
    let mut acc = Tensor::zeros(target.shape());
    for f in frames {
        if f.shape() != target.shape() {
            return Err(Error::shape(format!("clip mixes frame shapes {} and {}", f.shape(), target.shape())));
        }
        for ((a, t), v) in acc.data_mut().iter_mut().zip(target.data()).zip(f.data()) {
            *a += t - v;
        }
    }
    let n = frames.len() as f64;
    let data = acc.data().iter().map(|a| a / n).collect();
    Tensor::from_vec(target.shape(), data)
}

/// Background-subtracted labelled frame.
pub fn motion_channel(clip: &Clip) -> Result<Tensor> {
    motion_channel_at(&clip.frames, clip.label_frame_index)
}

/// Gradient magnitude from 3×3 derivative stencils (edge-replicated borders),
/// scaled so the strongest edge of the frame is 1. A flat frame maps to zeros.
pub fn edge_channel(frame: &Tensor) -> Result<Tensor> {
    if frame.channels() != 1 {
        return Err(Error::shape(format!("edge_channel takes a single-channel frame, got {}", frame.shape())));
    }
    let (h, w) = (frame.height() as isize, frame.width() as isize);
    let px = |y: isize, x: isize| frame.get(0, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
    let mut mag = Tensor::from_fn(frame.shape(), |_, y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
        let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    });
    let peak = mag.data().iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.data_mut().iter_mut().for_each(|v| *v /= peak);
    }
    Ok(mag)
}

/// Appearance, motion and structure channels of a clip's labelled frame, stacked.
pub fn cue_stack(frames: &[Tensor], label_index: usize) -> Result<Tensor> {
    let appearance = frames
        .get(label_index)
        .ok_or_else(|| Error::invalid(format!("label frame {label_index} out of range")))?;
    let motion = motion_channel_at(frames, label_index)?;
    let structure = edge_channel(appearance)?;
    concat_channels(&[appearance, &motion, &structure])
}
