//! Binary checkpoint files.
//!
//! Layout: the magic bytes `FCNN`, a little-endian `u16` format version, a
//! little-endian `u32` header length, the UTF-8 JSON header, then the payload:
//! every convolution's weights followed by its biases, in layer order, as
//! little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{zero_layers, Layer, Network};
use crate::error::{Error, Result};
use crate::netspec::{format_spec, parse_spec};

pub const MAGIC: &[u8; 4] = b"FCNN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: usize,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u16,
    pub spec: String,
    pub input_channels: usize,
    pub seed: u64,
    pub layers: Vec<LayerShape>,
}

impl CheckpointHeader {
    pub fn of(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.conv().map(|p| LayerShape {
                    layer: i,
                    out_channels: p.out_channels,
                    in_channels: p.in_channels,
                    kernel: p.kernel,
                })
            })
            .collect();
        CheckpointHeader {
            version: FORMAT_VERSION,
            spec: format_spec(net.spec()),
            input_channels: net.input_channels(),
            seed: net.seed(),
            layers,
        }
    }

    /// Number of `f32` values the payload must hold.
    pub fn payload_floats(&self) -> usize {
        self.layers.iter().map(|l| l.out_channels * (l.in_channels * l.kernel * l.kernel + 1)).sum()
    }
}

impl Network {
    /// Serialise to checkpoint bytes. Freeze flags are training state and are not stored.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader::of(self)).expect("header serialises");
        let mut out = Vec::with_capacity(10 + header.len() + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.layers().iter().filter_map(Layer::conv) {
            for &v in p.weights.iter().chain(&p.bias) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Network, String> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err("missing FCNN magic bytes".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let header_bytes = bytes.get(10..10 + header_len).ok_or("truncated header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| format!("corrupt header: {e}"))?;
        if header.version != version {
            return Err(format!("header version {} disagrees with file version {version}", header.version));
        }
        let spec = parse_spec(&header.spec)
            .map_err(|e| format!("header spec: {e}"))?
            .with_input_channels(header.input_channels);

        // Shapes implied by the spec must match the header exactly.
        let mut layers = zero_layers(&spec)
            .map_err(|e| format!("header spec: {e}"))?;
        let implied = CheckpointHeader::of(
            &Network::from_layers(spec.clone(), layers.clone(), header.seed).map_err(|e| e.to_string())?,
        );
        if implied.layers != header.layers {
            return Err("per-layer shapes disagree with the spec string".into());
        }

        let payload = &bytes[10 + header_len..];
        let expected = 4 * header.payload_floats();
        if payload.len() != expected {
            return Err(format!("payload is {} bytes, header predicts {expected}", payload.len()));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for layer in &mut layers {
            if let Layer::Conv(p) = layer {
                for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
                    *v = floats.next().expect("length checked");
                }
            }
        }
        Network::from_layers(spec, layers, header.seed).map_err(|e| e.to_string())
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, net.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; any structural problem yields an error and no network.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Network::from_checkpoint_bytes(&bytes)
        .map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
}
