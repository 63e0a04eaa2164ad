use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{train_model, Sample, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::network::{build_layers, init_conv, Layer, Network};

/// Splits a spec into the two conv-pool blocks, the insertable `Conv - ReLU`
/// pairs, and the final 1×1 fusion layer with its sigmoid.
struct Decomposition {
    prefix: Vec<LayerSpec>,
    middle: Vec<[LayerSpec; 2]>,
    suffix: Vec<LayerSpec>,
}

fn decompose(spec: &NetworkSpec) -> Result<Decomposition> {
    let l = &spec.layers;
    let bad = |why: &str| Error::invalid(format!("layer-wise pre-training needs `Conv-ReLU-Pool` x2, Conv-ReLU pairs, then a 1x1 Conv and Sig: {why}"));
    let conv_relu_pool = |i: usize| {
        matches!(l.get(i), Some(LayerSpec::Conv { .. }))
            && matches!(l.get(i + 1), Some(LayerSpec::Relu))
            && matches!(l.get(i + 2), Some(LayerSpec::Pool { .. }))
    };
    if l.len() < 8 || !conv_relu_pool(0) || !conv_relu_pool(3) {
        return Err(bad("missing the two convolution-pooling blocks"));
    }
    let n = l.len();
    if !matches!(l[n - 2], LayerSpec::Conv { kernel: 1, .. }) || l[n - 1] != LayerSpec::Sig {
        return Err(bad("must end with a 1x1 Conv followed by Sig"));
    }
    let body = &l[6..n - 2];
    if body.len() % 2 != 0 {
        return Err(bad("inserted layers must come in Conv-ReLU pairs"));
    }
    let middle = body
        .chunks(2)
        .map(|pair| match pair {
            [c @ LayerSpec::Conv { .. }, LayerSpec::Relu] => Ok([*c, LayerSpec::Relu]),
            _ => Err(bad("inserted layers must come in Conv-ReLU pairs")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition { prefix: l[..6].to_vec(), middle, suffix: l[n - 2..].to_vec() })
}

/// The network spec trained in each pre-training stage: first the two
/// conv-pool blocks plus the fusion layer, then one more convolution per stage.
pub fn stage_specs(spec: &NetworkSpec) -> Result<Vec<NetworkSpec>> {
    let d = decompose(spec)?;
    Ok((0..=d.middle.len())
        .map(|inserted| {
            let mut layers = d.prefix.clone();
            for pair in &d.middle[..inserted] {
                layers.extend_from_slice(pair);
            }
            layers.extend_from_slice(&d.suffix);
            NetworkSpec::new(layers, spec.input_channels)
        })
        .collect())
}

/// Carry trained layers into the next, one-pair-deeper stage. The inserted
/// pair and the fusion layer (whose input width changes) are freshly drawn.
fn grow(prev: &Network, next: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Network> {
    let prev_layers = prev.layers();
    let keep = prev_layers.len() - 2;
    let mut layers: Vec<Layer> = prev_layers[..keep].to_vec();
    let mut channels = layers
        .iter()
        .rev()
        .find_map(|l| l.conv().map(|p| p.out_channels))
        .unwrap_or(next.input_channels);
    for ls in &next.layers[keep..] {
        layers.push(match *ls {
            LayerSpec::Conv { out_channels, kernel, .. } => {
                let p = init_conv(out_channels, channels, kernel, rng)?;
                channels = out_channels;
                Layer::Conv(p)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Sig => Layer::Sigmoid,
            LayerSpec::Pool { .. } => unreachable!("pools only appear in the prefix"),
        });
    }
    Network::from_layers(next.clone(), layers, prev.seed())
}

/// Stage-by-stage pre-training followed by a global fine-tune. Every layer
/// present in a stage is trainable. Log stages are `stage1..stageN` and `finetune`.
pub fn layerwise_pretrain(spec: &NetworkSpec, data: &[Sample], config: &TrainConfig) -> Result<(Network, TrainLog)> {
    config.validate()?;
    let stages = stage_specs(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut net = Network::from_layers(stages[0].clone(), build_layers(&stages[0], &mut rng)?, config.seed)?;
    for (i, stage_spec) in stages.iter().enumerate() {
        if i > 0 {
            net = grow(&net, stage_spec, &mut rng)?;
        }
        let label = format!("stage{}", i + 1);
        let seed = config.seed.wrapping_add(1 + i as u64);
        train_model(&mut net, data, config, config.iterations, &label, seed, &mut log)?;
    }
    let seed = config.seed.wrapping_add(1 + stages.len() as u64);
    train_model(&mut net, data, config, config.finetune_iterations, "finetune", seed, &mut log)?;
    Ok((net, log))
}
