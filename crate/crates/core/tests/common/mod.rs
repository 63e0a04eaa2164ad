//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use fcnn_core::network::Layer;
use fcnn_core::tensor::maxpool_forward;
use fcnn_core::training::cross_entropy_loss;
use fcnn_core::{init_network, parse_spec, Network, NetworkSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(lo..hi))
}

/// A random spec in the supported geometry: odd stride-1 convolutions,
/// 2×2 pools, ReLUs, closed by a 1×1 decision conv and a sigmoid.
pub fn random_spec(rng: &mut impl Rng, max_pools: usize) -> NetworkSpec {
    let mut tokens = Vec::new();
    let pools = rng.gen_range(0..=max_pools);
    let mut placed = 0;
    let blocks = rng.gen_range(1..=4);
    for b in 0..blocks {
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        tokens.push(format!("Conv({},{k},1)", rng.gen_range(1..=4)));
        tokens.push("ReLU".to_string());
        if placed < pools && (rng.gen_bool(0.6) || blocks - b <= pools - placed) {
            tokens.push(if rng.gen_bool(0.5) { "Pool(MAX,2,2)" } else { "Pool(AVE,2,2)" }.to_string());
            placed += 1;
        }
    }
    tokens.push("Conv(1,1,1)".into());
    tokens.push("Sig".into());
    parse_spec(&tokens.join(" - ")).unwrap()
}

/// Same spec with every convolution weight made positive, so that raising an
/// input pixel strictly raises every unit that can see it.
pub fn positive_network(spec: &NetworkSpec, seed: u64) -> Network {
    let mut net = init_network(spec, seed).unwrap();
    for i in net.conv_indices() {
        let p = net.conv_params_mut(i).unwrap();
        p.weights.iter_mut().for_each(|w| *w = w.abs() + 1e-3);
        p.bias.iter_mut().for_each(|b| *b = 0.01);
    }
    net
}

/// Horizontal footprint measured by perturbation: raise a whole input column
/// and see which output columns of the pre-sigmoid map move. Returns, for each
/// output column, the first and last input column that influences it.
pub fn measured_spans(net: &Network, height: usize, width: usize, seed: u64) -> Vec<Option<(usize, usize)>> {
    let mut r = rng(seed);
    let base = random_tensor(Shape::new(net.input_channels(), height, width), 0.1, 1.0, &mut r);
    let end = net.layers().len() - usize::from(matches!(net.layers().last(), Some(Layer::Sigmoid)));
    let logits = |x: &Tensor| net.forward_range(x, 0, end, false).unwrap().0;
    let y0 = logits(&base);
    let mut spans: Vec<Option<(usize, usize)>> = vec![None; y0.width()];
    for col in 0..width {
        let mut x = base.clone();
        for c in 0..x.channels() {
            for y in 0..height {
                x.set(c, y, col, x.get(c, y, col) + 1e4);
            }
        }
        let y1 = logits(&x);
        for (ox, span) in spans.iter_mut().enumerate() {
            if (0..y0.height()).any(|oy| y1.get(0, oy, ox) != y0.get(0, oy, ox)) {
                *span = Some(span.map_or((col, col), |(lo, _)| (lo, col)));
            }
        }
    }
    spans
}

/// Receptive field, stride and first-pixel offset implied by measured spans,
/// read from an output column whose span is not clipped by the image border.
pub fn footprint(net: &Network, height: usize, width: usize, seed: u64) -> (usize, usize, isize) {
    let spans = measured_spans(net, height, width, seed);
    let ox = spans
        .iter()
        .enumerate()
        .position(|(i, s)| {
            i > 0 && matches!(s, Some((lo, hi)) if *lo > 0 && *hi + 1 < width) && matches!(spans.get(i + 1), Some(Some(_)))
        })
        .expect("an output column away from the border");
    let (lo, hi) = spans[ox].unwrap();
    let (next_lo, _) = spans[ox + 1].unwrap();
    let stride = next_lo - lo;
    (hi - lo + 1, stride, lo as isize - (ox * stride) as isize)
}

/// Mean loss of a network on one sample, for finite differences.
pub fn net_loss(net: &Network, input: &Tensor, label: &Tensor) -> f64 {
    cross_entropy_loss(&net.predict(input).unwrap(), label).unwrap().0
}

/// ReLU signs and max-pool winners along a forward pass; a finite difference is
/// only meaningful when both sides of the step share this pattern.
pub fn kink_pattern(net: &Network, input: &Tensor) -> Vec<Vec<usize>> {
    let (_, acts) = net.forward(input, true).unwrap();
    let acts = acts.unwrap();
    let mut pattern = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let x = acts.layer_input(i).unwrap();
        match layer {
            Layer::Relu => pattern.push(x.data().iter().map(|&v| usize::from(v > 0.0)).collect()),
            Layer::MaxPool { kernel, stride } => {
                pattern.push(maxpool_forward(x, *kernel, *stride).unwrap().1.winners().to_vec())
            }
            _ => {}
        }
    }
    pattern
}

/// Relative error with a floor on the denominator for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Brute-force AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// `W·x + b` by explicit loops.
pub fn dense(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter().enumerate().map(|(r, b)| b + (0..x.len()).map(|c| weights[r * x.len() + c] * x[c]).sum::<f64>()).collect()
}

/// Step of the fourth-order central difference.
pub const FD_STEP: f64 = 1e-4;
/// Offsets (in units of [`FD_STEP`]) at which the stencil evaluates.
pub const FD_OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// Fourth-order central difference `(8(f(h) − f(−h)) − (f(2h) − f(−2h))) / 12h`.
pub fn central_difference(f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Whether every stencil point shares the base pattern of ReLU signs and pool winners.
pub fn smooth_along(base: &[Vec<usize>], at: impl Fn(f64) -> Vec<Vec<usize>>) -> bool {
    FD_OFFSETS.iter().all(|&k| at(k * FD_STEP) == base)
}
