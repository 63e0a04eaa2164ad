//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL line
//! each. Exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{
    central_difference, dense, footprint, kink_pattern, net_loss, pairwise_auc, positive_network, random_tensor,
    relative_error, rng, smooth_along,
};
use fcnn_core::evalbench::{benchmark, interior_discrepancy, patch_scan, roc_auc};
use fcnn_core::netspec::{receptive_field, DEFAULT_SPEC};
use fcnn_core::network::fc_as_conv;
use fcnn_core::pipeline::{run_pipeline, PipelineConfig, PipelineReport};
use fcnn_core::scenedata::Cue;
use fcnn_core::tensor::conv2d_forward;
use fcnn_core::training::{cross_entropy_loss, pool_labels};
use fcnn_core::{init_network, parse_spec, NetworkSpec, Shape, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn default_spec(channels: usize) -> NetworkSpec {
    parse_spec(DEFAULT_SPEC).unwrap().with_input_channels(channels)
}

fn fc_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let extent = r.gen_range(1..=6);
        let shape = Shape::new(r.gen_range(1..=8), extent, extent);
        let rows = r.gen_range(1..=16);
        let weights: Vec<f64> = (0..rows * shape.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..rows).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = random_tensor(shape, -1.0, 1.0, &mut r);
        let y = conv2d_forward(&x, &fc_as_conv(&weights, &bias, shape).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(dense(&weights, &bias, x.data())) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-12 && secs < 1.0, format!("100 cases, max |diff| {worst:.2e}, {secs:.3} s"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let net = init_network(&default_spec(3), 21).unwrap();
    let mut r = rng(2);
    let x = random_tensor(Shape::new(3, 16, 16), 0.0, 1.0, &mut r);
    let t = random_tensor(Shape::new(1, 4, 4), 0.0, 1.0, &mut r);
    let (out, acts) = net.forward(&x, true).unwrap();
    let (_, dl) = cross_entropy_loss(&out, &t).unwrap();
    let grads = net.backward_range(acts.as_ref(), &dl, true).unwrap();
    let base = kink_pattern(&net, &x);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut check = |analytic: f64, smooth: bool, numeric: &dyn Fn() -> f64| {
        if !smooth {
            skipped += 1;
            return;
        }
        worst = worst.max(relative_error(analytic, numeric(), 1e-8));
        checked += 1;
    };
    for layer in net.conv_indices() {
        let g = grads.layers[layer].as_ref().unwrap();
        let mut picks: Vec<(bool, usize)> = (0..24).map(|_| (false, r.gen_range(0..g.weights.len()))).collect();
        picks.extend((0..8).map(|_| (true, r.gen_range(0..g.bias.len()))));
        for (is_bias, i) in picks {
            let shifted = |h: f64| {
                let mut n = net.clone();
                let p = n.conv_params_mut(layer).unwrap();
                if is_bias {
                    p.bias[i] += h
                } else {
                    p.weights[i] += h
                }
                n
            };
            let analytic = if is_bias { g.bias[i] } else { g.weights[i] };
            let smooth = smooth_along(&base, |h| kink_pattern(&shifted(h), &x));
            check(analytic, smooth, &|| central_difference(|h| net_loss(&shifted(h), &x, &t)));
        }
    }
    let gi = grads.input.unwrap();
    for _ in 0..48 {
        let i = r.gen_range(0..x.data().len());
        let shifted = |h: f64| {
            let mut xx = x.clone();
            xx.data_mut()[i] += h;
            xx
        };
        let smooth = smooth_along(&base, |h| kink_pattern(&net, &shifted(h)));
        check(gi.data()[i], smooth, &|| central_difference(|h| net_loss(&net, &shifted(h), &t)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 60.0 && checked > 0,
        format!("{checked} coordinates ({skipped} kinked skipped), max rel err {worst:.2e}, {secs:.1} s"),
    )
}

fn receptive_field_check() -> Outcome {
    let g = receptive_field(&default_spec(1)).unwrap();
    let (rf, stride, first) = footprint(&positive_network(&default_spec(1), 3), 4, 128, 3);
    outcome(
        g.receptive_field() == 54 && g.output_stride() == 4 && (rf, stride) == (54, 4) && first == g.first_pixel(),
        format!(
            "netspec R={} stride={}; measured footprint R={rf} stride={stride} first_pixel={first}",
            g.receptive_field(),
            g.output_stride()
        ),
    )
}

fn patch_scan_check(out: &Path) -> Outcome {
    let spec = default_spec(1);
    let g = receptive_field(&spec).unwrap();
    let mut r = rng(4);
    let scan_diff = |patch: usize, count: u64, r: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let mut worst = 0.0f64;
        for k in 0..count {
            let net = init_network(&spec, 400 + k).unwrap();
            let image = random_tensor(Shape::new(1, 72, 72), 0.0, 1.0, r);
            let full = net.predict(&image).unwrap();
            let scan = patch_scan(&net, &image, patch, 4).unwrap();
            worst = worst.max(interior_discrepancy(&g, &full, &scan, 72, 72).unwrap());
        }
        worst
    };
    let d56 = scan_diff(56, 20, &mut r);
    let (exact, _) = g.exact_scan_patch();
    let d_exact = scan_diff(exact, 5, &mut r);

    let sizes = [(112, 112), (160, 160), (224, 224)];
    let report = benchmark(&init_network(&spec, 5).unwrap(), &sizes, 3, 56, 5).unwrap();
    std::fs::write(out.join("bench.csv"), report.to_csv()).unwrap();
    let speedups: Vec<f64> = sizes.iter().map(|&(h, w)| report.speedup(h, w).unwrap()).collect();
    let grows = speedups.windows(2).all(|w| w[1] > w[0]);
    let big = speedups[2] > 10.0;
    outcome(
        d56 < 1e-9 && big && grows,
        format!(
            "patch 56 max interior diff {d56:.3e} over 20 nets (tol 1e-9); patch {exact} diff {d_exact:.3e}; \
             speedups {} (>10x at 224: {big}, increasing: {grows})",
            sizes
                .iter()
                .zip(&speedups)
                .map(|((h, w), s)| format!("{h}x{w}={s:.1}x"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn equivariance_check() -> Outcome {
    let spec = default_spec(1);
    let g = receptive_field(&spec).unwrap();
    let mut r = rng(5);
    let (h, w) = (96, 96);
    let mut compared = 0;
    let mut mismatches = 0;
    for k in 0..10 {
        let net = init_network(&spec, 500 + k).unwrap();
        let big = random_tensor(Shape::new(1, h, w + 4), 0.0, 1.0, &mut r);
        let a = net.predict(&big.crop(0, 0, h, w).unwrap()).unwrap();
        let b = net.predict(&big.crop(0, 4, h, w).unwrap()).unwrap();
        let cols = g.interior_cells(w);
        for y in g.interior_cells(h) {
            for x in cols.start..cols.end - 1 {
                compared += 1;
                if b.get(0, y, x) != a.get(0, y, x + 1) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0 && compared > 0, format!("10 nets, {compared} interior cells, {mismatches} not bit-equal"))
}

fn loss_arithmetic() -> Outcome {
    let t = Tensor::from_vec(Shape::new(1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let perfect = cross_entropy_loss(&t, &t).unwrap().0;
    let half = Tensor::filled(Shape::new(1, 1, 1), 0.5);
    let ln2 = cross_entropy_loss(&half, &half).unwrap().0;
    let checker = Tensor::from_fn(Shape::new(1, 8, 8), |_, y, x| ((y + x) % 2) as f64);
    let pooled = pool_labels(&checker).unwrap();
    let pass = perfect.abs() < 1e-12
        && (ln2 - std::f64::consts::LN_2).abs() < 1e-12
        && pooled.data().iter().all(|&v| v == 0.5);
    outcome(pass, format!("t=o loss {perfect:.3e}, ln2 case {ln2:.15}, checkerboard pooled {:?}", pooled.data()))
}

fn roc_check() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let levels = if trial % 2 == 0 { 1_000_000 } else { 25 };
        let scores: Vec<f64> = (0..1000).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..1000).map(|_| r.gen_bool(0.3)).collect();
        worst = worst.max((roc_auc(&scores, &labels).unwrap().auc - pairwise_auc(&scores, &labels)).abs());
    }
    let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
    let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    let a_perfect = roc_auc(&perfect, &labels).unwrap().auc;
    let a_const = roc_auc(&vec![0.4; 100], &labels).unwrap().auc;
    outcome(
        worst < 1e-12 && a_perfect == 1.0 && a_const == 0.5,
        format!("20 sets of 1000 points, max |diff| {worst:.2e}; perfect {a_perfect}, constant {a_const}"),
    )
}

fn pipeline_check(report: &PipelineReport, seconds: f64) -> Outcome {
    let auc = |n: &str| report.auc(n);
    let best_branch = Cue::ALL.iter().map(|c| auc(c.name())).fold(f64::MIN, f64::max);
    let fusion_ok = ["input", "feature", "decision"].iter().all(|n| auc(n) >= best_branch - 0.02);
    let trained = ["appearance", "motion", "structure", "input", "feature", "decision"];
    let beats = trained.iter().all(|n| auc(n) > auc("baseline"));
    let s = &report.summary;
    let disjoint = s.train_scenes.iter().all(|t| !s.test_scenes.contains(t));
    let split = s.train_scenes.len() == 10 && s.test_scenes.len() == 2;
    let iters = PipelineConfig::default().branch_iterations().unwrap();
    let aucs = fcnn_core::pipeline::MODEL_NAMES.iter().map(|n| format!("{n}={:.4}", auc(n))).collect::<Vec<_>>();
    outcome(
        fusion_ok && beats && disjoint && split && iters <= 2000 && seconds < 1800.0,
        format!(
            "AUC {}; fusion >= best branch ({best_branch:.4}) - 0.02: {fusion_ok}; all beat baseline: {beats}; \
             scenes 10/2 disjoint: {}; {iters} iterations per branch; {seconds:.0} s",
            aucs.join(" "),
            disjoint && split
        ),
    )
}

fn files_with(dir: &Path, pred: &dyn Fn(&str) -> bool, found: &mut BTreeMap<PathBuf, Vec<u8>>, root: &Path) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_with(&p, pred, found, root);
        } else if pred(p.file_name().unwrap().to_str().unwrap()) {
            found.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
}

fn determinism_check(a: &Path, b: &Path) -> Outcome {
    let pick = |n: &str| n.ends_with(".ckpt") || n.ends_with("_auc.json");
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    files_with(a, &pick, &mut fa, a);
    files_with(b, &pick, &mut fb, b);
    let differing: Vec<String> =
        fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = fa.keys().eq(fb.keys());
    outcome(
        same_set && differing.is_empty() && !fa.is_empty(),
        format!("{} checkpoint/AUC files compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

fn freeze_check(report: &PipelineReport) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, snaps) in [("feature", &report.feature_snapshots), ("decision", &report.decision_snapshots)] {
        let get = |stage: &str| snaps.iter().find(|s| s.stage == stage).and_then(|s| s.branch(Cue::Appearance));
        let same = matches!((get("initial"), get("motion")), (Some(a), Some(b)) if a == b);
        let moved = get("motion") != get("global");
        pass &= same;
        notes.push(format!("{name}: appearance identical across motion stage {same}, changed by global stage {moved}"));
    }
    outcome(pass, notes.join("; "))
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out).unwrap();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    };

    report(1, "fc-as-conv", fc_equivalence());
    report(2, "gradients", gradient_check());
    report(3, "receptive-field", receptive_field_check());
    report(4, "patch-scan", patch_scan_check(&out));
    report(5, "equivariance", equivariance_check());
    report(6, "loss-arithmetic", loss_arithmetic());
    report(7, "roc-auc", roc_check());

    let run = |dir: &str| {
        let path = out.join(dir);
        let _ = std::fs::remove_dir_all(&path);
        let start = Instant::now();
        let r = run_pipeline(&PipelineConfig::default(), &path).unwrap();
        (path, r, start.elapsed().as_secs_f64())
    };
    let (dir_a, first, secs) = run("run_a");
    report(8, "end-to-end", pipeline_check(&first, secs));
    let (dir_b, _, _) = run("run_b");
    report(9, "determinism", determinism_check(&dir_a, &dir_b));
    report(10, "freeze-contract", freeze_check(&first));

    println!("{} of 10 criteria failed; artifacts in {}", failures, out.display());
    if failures > 0 {
        std::process::exit(1);
    }
}
