//! Layer annotation strings such as `Conv(32,7,1) - ReLU - Pool(MAX,2,2)` and
//! the receptive-field geometry of the networks they describe.

use std::fmt;

use crate::error::{Error, Result};

/// The crowd-segmentation architecture: six same-padded convolutions, two max
/// pools, and a 1×1 fusion layer feeding a sigmoid.
pub const DEFAULT_SPEC: &str = "Conv(32,7,1) - ReLU - Pool(MAX,2,2) - Conv(64,7,1) - ReLU - \
     Pool(MAX,2,2) - Conv(128,3,1) - ReLU - Conv(128,3,1) - ReLU - Conv(64,3,1) - ReLU - \
     Conv(16,3,1) - ReLU - Conv(1,1,1) - Sig";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolType {
    Max,
    Ave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Pool { pool_type: PoolType, kernel: usize, stride: usize },
    Relu,
    Sig,
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Kernel and stride for layers with spatial extent.
    pub fn window(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv { kernel, stride, .. } | LayerSpec::Pool { kernel, stride, .. } => {
                Some((kernel, stride))
            }
            LayerSpec::Relu | LayerSpec::Sig => None,
        }
    }

    /// Zero padding per side; convolutions are padded to keep their input shape.
    pub fn padding(&self) -> usize {
        match *self {
            LayerSpec::Conv { kernel, .. } => kernel / 2,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { out_channels, kernel, stride } => {
                write!(f, "Conv({out_channels},{kernel},{stride})")
            }
            LayerSpec::Pool { pool_type, kernel, stride } => {
                let t = match pool_type {
                    PoolType::Max => "MAX",
                    PoolType::Ave => "AVE",
                };
                write!(f, "Pool({t},{kernel},{stride})")
            }
            LayerSpec::Relu => f.write_str("ReLU"),
            LayerSpec::Sig => f.write_str("Sig"),
        }
    }
}

/// A parsed architecture plus the channel count of its input.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, input_channels: usize) -> Self {
        NetworkSpec { layers, input_channels }
    }

    pub fn default_with_channels(input_channels: usize) -> Self {
        parse_spec(DEFAULT_SPEC).expect("default spec parses").with_input_channels(input_channels)
    }

    pub fn with_input_channels(mut self, input_channels: usize) -> Self {
        self.input_channels = input_channels;
        self
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    pub fn ends_with_sigmoid(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Sig))
    }

    /// Product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().filter_map(|l| l.window()).map(|(_, s)| s).product()
    }

    /// Channel count produced by the last convolution.
    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Rejects layers outside the supported geometry: square kernels, stride-1
    /// odd convolutions, non-overlapping pools.
    pub fn check_geometry(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { kernel, stride, .. } => {
                    if stride != 1 {
                        return Err(Error::Geometry(format!(
                            "layer {i} `{layer}`: convolution stride must be 1"
                        )));
                    }
                    if kernel % 2 == 0 {
                        return Err(Error::Geometry(format!(
                            "layer {i} `{layer}`: same padding needs an odd kernel"
                        )));
                    }
                }
                LayerSpec::Pool { kernel, stride, .. } => {
                    if kernel != stride {
                        return Err(Error::Geometry(format!(
                            "layer {i} `{layer}`: pooling must be non-overlapping (kernel == stride)"
                        )));
                    }
                }
                LayerSpec::Relu | LayerSpec::Sig => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_spec(self))
    }
}

impl std::str::FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s)
    }
}

fn parse_err(token: &str, reason: impl Into<String>) -> Error {
    Error::Parse { token: token.to_string(), reason: reason.into() }
}

fn parse_positive(token: &str, field: &str) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| parse_err(token, format!("`{field}` is not a non-negative integer")))?;
    if v == 0 {
        return Err(parse_err(token, "kernel, stride and channel counts must be at least 1"));
    }
    Ok(v)
}

fn parse_layer(token: &str) -> Result<LayerSpec> {
    let (name, args) = match token.find('(') {
        Some(open) => {
            let close = token
                .strip_suffix(')')
                .ok_or_else(|| parse_err(token, "missing closing parenthesis"))?;
            (&token[..open], Some(&close[open + 1..]))
        }
        None => (token, None),
    };
    let fields: Vec<&str> = args.map(|a| a.split(',').collect()).unwrap_or_default();
    let arity = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(parse_err(token, format!("expected {n} arguments, found {}", fields.len())))
        }
    };
    match name.to_ascii_lowercase().as_str() {
        "conv" => {
            arity(3)?;
            Ok(LayerSpec::Conv {
                out_channels: parse_positive(token, fields[0])?,
                kernel: parse_positive(token, fields[1])?,
                stride: parse_positive(token, fields[2])?,
            })
        }
        "pool" => {
            arity(3)?;
            let pool_type = match fields[0].to_ascii_lowercase().as_str() {
                "max" => PoolType::Max,
                "ave" | "avg" => PoolType::Ave,
                other => return Err(parse_err(token, format!("unknown pool type `{other}`"))),
            };
            Ok(LayerSpec::Pool {
                pool_type,
                kernel: parse_positive(token, fields[1])?,
                stride: parse_positive(token, fields[2])?,
            })
        }
        "relu" | "sig" => {
            if args.is_some() {
                return Err(parse_err(token, "takes no arguments"));
            }
            Ok(if name.eq_ignore_ascii_case("relu") { LayerSpec::Relu } else { LayerSpec::Sig })
        }
        _ => Err(parse_err(token, format!("unknown layer keyword `{name}`"))),
    }
}

/// Parse a `-`-separated layer annotation. Keywords are case-insensitive and
/// whitespace is ignored. The result has one input channel; see
/// [`NetworkSpec::with_input_channels`].
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(parse_err("", "empty layer specification"));
    }
    let layers = compact
        .split('-')
        .map(|tok| if tok.is_empty() { Err(parse_err(tok, "empty layer token")) } else { parse_layer(tok) })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkSpec { layers, input_channels: 1 })
}

pub fn format_spec(spec: &NetworkSpec) -> String {
    spec.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" - ")
}

/// Cumulative geometry after one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub layer: LayerSpec,
    pub padding: usize,
    /// Input pixels that can influence one unit of this layer's output.
    pub receptive_field: usize,
    /// Input-pixel distance between neighbouring output units.
    pub jump: usize,
    /// Input coordinate of the first pixel seen by output unit 0 (may be negative).
    pub first_pixel: isize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeometryReport {
    pub layers: Vec<LayerGeometry>,
}

impl GeometryReport {
    pub fn receptive_field(&self) -> usize {
        self.layers.last().map_or(1, |l| l.receptive_field)
    }

    pub fn output_stride(&self) -> usize {
        self.layers.last().map_or(1, |l| l.jump)
    }

    pub fn first_pixel(&self) -> isize {
        self.layers.last().map_or(0, |l| l.first_pixel)
    }

    /// Inclusive input interval seen by output unit `index` along one axis.
    pub fn input_span(&self, index: usize) -> (isize, isize) {
        let lo = self.first_pixel() + (index * self.output_stride()) as isize;
        (lo, lo + self.receptive_field() as isize - 1)
    }

    /// Smallest patch (a multiple of the output stride) that contains the full
    /// receptive field of one of its output units when cropped at an
    /// output-stride-aligned origin, and the index of that unit.
    pub fn exact_scan_patch(&self) -> (usize, usize) {
        let jump = self.output_stride() as isize;
        let first = self.first_pixel();
        // smallest unit index whose span starts inside the patch
        let center = if first >= 0 { 0 } else { (-first + jump - 1) / jump };
        let (_, hi) = self.input_span(center as usize);
        let patch = ((hi + 1) + jump - 1) / jump * jump;
        (patch as usize, center as usize)
    }

    /// Output units along an axis of `extent` input pixels whose whole span lies
    /// inside the input, i.e. that never see zero padding.
    pub fn interior_cells(&self, extent: usize) -> std::ops::Range<usize> {
        let jump = self.output_stride() as isize;
        let first = self.first_pixel();
        let last = first + self.receptive_field() as isize - 1;
        let lo = if first >= 0 { 0 } else { (-first + jump - 1) / jump };
        let hi = (extent as isize - 1 - last).div_euclid(jump) + 1;
        let cells = extent as isize / jump;
        (lo.min(cells) as usize)..(hi.clamp(lo.min(cells), cells) as usize)
    }

    /// Human-readable per-layer table.
    pub fn table(&self) -> String {
        let mut out = String::from("layer\tspec\tpadding\treceptive_field\tstride\n");
        for (i, g) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                i + 1,
                g.layer,
                g.padding,
                g.receptive_field,
                g.jump
            ));
        }
        out
    }
}

/// Walk the layers with `R ← R + (k−1)·jump`, `jump ← jump·stride`.
pub fn receptive_field(spec: &NetworkSpec) -> Result<GeometryReport> {
    spec.check_geometry()?;
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut first = 0isize;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let padding = layer.padding();
        if let Some((k, s)) = layer.window() {
            rf += (k - 1) * jump;
            first -= (padding * jump) as isize;
            jump *= s;
        }
        layers.push(LayerGeometry { layer: *layer, padding, receptive_field: rf, jump, first_pixel: first });
    }
    Ok(GeometryReport { layers })
}

/// Output shape for a `(channels, height, width)` input. Height and width must
/// be divisible by the cumulative pooling factor so pooled labels stay aligned.
pub fn output_shape(spec: &NetworkSpec, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input;
    if c != spec.input_channels {
        return Err(Error::shape(format!(
            "network takes {} input channels, got {c}",
            spec.input_channels
        )));
    }
    spec.check_geometry()?;
    let factor = spec.total_stride();
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Geometry(format!(
            "input {h}x{w} must have height and width divisible by the pooling factor {factor}"
        )));
    }
    Ok((spec.output_channels(), h / factor, w / factor))
}
