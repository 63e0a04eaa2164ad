use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fcnn_core::evalbench::{
    benchmark, evaluate_clips, evaluate_maps, overlay, write_overlays, CueScorer, IntensityBaseline, Resolution, Scorer,
};
use fcnn_core::fusion::{build_decision_fusion, build_feature_fusion, input_fusion_spec, multistage_train, Branch, Combiner, MultiBranchNetwork};
use fcnn_core::netspec::{parse_spec, receptive_field, DEFAULT_SPEC};
use fcnn_core::network::{init_network, load_checkpoint, save_checkpoint, Network};
use fcnn_core::pipeline::{run_pipeline, training_samples, InputFusionInit, PipelineConfig, MODEL_NAMES};
use fcnn_core::scenedata::{build_dataset, cue_stack, load_clip, read_pgm, write_pgm, write_ppm, Cue, LoadedClip, SceneConfig, SceneManifest, Split, SplitRatios};
use fcnn_core::training::{layerwise_pretrain, Sample, TrainConfig};
use fcnn_core::{NetworkSpec, Tensor};

use crate::{
    BenchArgs, Cli, CombinerArg, Command, CueArg, EvalArgs, GenDataArgs, InferArgs, OracleArg, PipelineArgs, ResolutionArg,
    RfArgs, SchemeArg, TrainArgs, TrainOverrides,
};

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads(cli.deterministic)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Rf(a) => rf(a),
        Command::Pipeline(a) => pipeline(cli, a),
    }
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let cap = match std::env::var("FCNN_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).with_context(|| format!("FCNN_THREADS=`{v}` is not a positive integer"))?),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { cap };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn cue(c: CueArg) -> Cue {
    match c {
        CueArg::Appearance => Cue::Appearance,
        CueArg::Motion => Cue::Motion,
        CueArg::Structure => Cue::Structure,
    }
}

fn spec_or_default(text: Option<&str>) -> Result<NetworkSpec> {
    Ok(parse_spec(text.unwrap_or(DEFAULT_SPEC))?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Record the invocation (including the seed) next to the outputs.
fn write_run(out: &Path, cli: &Cli) -> Result<()> {
    let run = serde_json::json!({ "version": env!("CARGO_PKG_VERSION"), "invocation": cli });
    write(&out.join("run.json"), &serde_json::to_string_pretty(&run)?)
}

fn apply(overrides: &TrainOverrides, mut config: TrainConfig, seed: u64) -> Result<TrainConfig> {
    config.seed = seed;
    if let Some(v) = overrides.lr {
        config.learning_rate = v;
    }
    if let Some(v) = overrides.momentum {
        config.momentum = v;
    }
    if let Some(v) = overrides.iters {
        config.iterations = v;
    }
    if let Some(v) = overrides.finetune_iters {
        config.finetune_iterations = v;
    }
    if let Some(v) = overrides.batch {
        config.batch_size = v;
    }
    if let Some(v) = overrides.crop {
        config.crop_size = v;
    }
    if let Some(v) = overrides.crops_per_frame {
        config.crops_per_frame = v;
    }
    config.validate()?;
    Ok(config)
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    if a.scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let ratios = SplitRatios { train: a.split, val: 1.0 - a.split - a.test, test: a.test };
    let scene = SceneConfig { height: a.height, width: a.width, frames: a.frames, ..SceneConfig::default() };
    let m = build_dataset(&a.out, a.scenes, a.clips_per_scene, ratios, cli.seed, &scene)?;
    write_run(&a.out, cli)?;
    println!(
        "scenes: train={} val={} test={}; clips: {}; manifest: {}",
        m.scenes_in(Split::Train).len(),
        m.scenes_in(Split::Val).len(),
        m.scenes_in(Split::Test).len(),
        m.clips.len(),
        a.out.join(SceneManifest::FILE_NAME).display()
    );
    Ok(())
}

fn load_split(manifest: &SceneManifest, split: Split) -> Result<Vec<LoadedClip>> {
    let clips = manifest.clips_in(split).map(|e| load_clip(manifest, e)).collect::<fcnn_core::Result<Vec<_>>>()?;
    if clips.is_empty() {
        bail!("manifest has no {split:?} clips");
    }
    Ok(clips)
}

fn load_branches(dir: &Path) -> Result<Vec<Branch>> {
    Cue::ALL
        .iter()
        .map(|&c| {
            let path = dir.join(format!("{c}.ckpt"));
            if !path.exists() {
                bail!("fusion needs pre-trained branches: {} is missing (train it with --cue {c})", path.display());
            }
            Ok(Branch::new(c, load_checkpoint(&path)?)?)
        })
        .collect()
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let config = apply(&a.train, TrainConfig::default(), cli.seed)?;
    let branch_dir = match (a.scheme, &a.checkpoint) {
        (Some(SchemeArg::Feature | SchemeArg::Decision), None) => {
            bail!("feature and decision fusion need pre-trained branches: pass --checkpoint DIR with appearance.ckpt, motion.ckpt, structure.ckpt")
        }
        (_, dir) => dir.clone(),
    };
    let branches = branch_dir.as_deref().map(load_branches).transpose()?;
    let manifest = SceneManifest::load(&a.manifest)?;
    let clips = load_split(&manifest, Split::Train)?;
    let samples = training_samples(&clips, &config)?;
    create_dir(&a.out)?;

    let (name, log) = match (a.cue, a.scheme) {
        (Some(c), _) => {
            let c = cue(c);
            let data = samples.iter().map(|s| s.select_channels(c.channel(), c.channel() + 1)).collect::<fcnn_core::Result<Vec<Sample>>>()?;
            let spec = spec_or_default(a.spec.as_deref())?.with_input_channels(1);
            let (net, log) = layerwise_pretrain(&spec, &data, &config)?;
            save_checkpoint(&net, &a.out.join(format!("{c}.ckpt")))?;
            (c.to_string(), log)
        }
        (None, Some(SchemeArg::Input)) => {
            let spec = match &a.spec {
                Some(s) => parse_spec(s)?.with_input_channels(3),
                None => input_fusion_spec(&[1, 1, 1])?,
            };
            let (net, log) = layerwise_pretrain(&spec, &samples, &config)?;
            save_checkpoint(&net, &a.out.join("input.ckpt"))?;
            ("input".to_string(), log)
        }
        (None, Some(scheme)) => {
            let branches = branches.expect("checked above");
            let (mbn, name) = match scheme {
                SchemeArg::Feature => (build_feature_fusion(branches)?, "feature"),
                _ => {
                    let combiner = match a.combiner {
                        CombinerArg::Learned => Combiner::Learned,
                        CombinerArg::Average => Combiner::Average,
                    };
                    (build_decision_fusion(branches, combiner)?, "decision")
                }
            };
            let result = multistage_train(mbn, &samples, &config)?;
            result.model.save(&a.out.join(name), cli.seed)?;
            (name.to_string(), result.log)
        }
        (None, None) => unreachable!("clap requires --cue or --scheme"),
    };
    log.write_csv(&a.out.join(format!("{name}_loss.csv")))?;
    write_run(&a.out, cli)?;
    let losses = log.losses();
    println!(
        "{name}: {} iterations, loss {:.4} -> {:.4}, stages {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        log.stages().join(",")
    );
    Ok(())
}

/// A trained model of any kind, ready to score cue stacks.
enum Model {
    Single(Network, Option<Cue>),
    Multi(MultiBranchNetwork),
}

impl Model {
    fn load(path: &Path, cue_arg: Option<CueArg>) -> Result<Model> {
        if path.is_dir() {
            return Ok(Model::Multi(MultiBranchNetwork::load(path)?));
        }
        let net = load_checkpoint(path)?;
        let c = match (net.input_channels(), cue_arg) {
            (3, None) => None,
            (3, Some(_)) => bail!("{} takes all three cues; drop --cue", path.display()),
            (1, c) => Some(c.map(cue).or_else(|| cue_from_name(path)).unwrap_or(Cue::Appearance)),
            (n, _) => bail!("{} takes {n} input channels; expected 1 or 3", path.display()),
        };
        Ok(Model::Single(net, c))
    }

    fn scorer(&self) -> Box<dyn Scorer + '_> {
        match self {
            Model::Single(net, Some(c)) => Box::new(CueScorer { net, cue: *c }),
            Model::Single(net, None) => Box::new(NetRef(net)),
            Model::Multi(m) => Box::new(MultiRef(m)),
        }
    }
}

struct NetRef<'a>(&'a Network);

impl Scorer for NetRef<'_> {
    fn score(&self, cues: &Tensor) -> fcnn_core::Result<Tensor> {
        self.0.score(cues)
    }
}

struct MultiRef<'a>(&'a MultiBranchNetwork);

impl Scorer for MultiRef<'_> {
    fn score(&self, cues: &Tensor) -> fcnn_core::Result<Tensor> {
        self.0.score(cues)
    }
}

fn cue_from_name(path: &Path) -> Option<Cue> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint, a.cue)?;
    let frames = a.frames.iter().map(|p| read_pgm(p)).collect::<fcnn_core::Result<Vec<_>>>()?;
    let index = a.label_index.unwrap_or(frames.len() - 1);
    let stack = cue_stack(&frames, index)?;
    let started = Instant::now();
    let pred = model.scorer().score(&stack)?;
    let seconds = started.elapsed().as_secs_f64();
    create_dir(&a.out)?;
    write_pgm(&a.out.join("prob.pgm"), &pred)?;
    write_ppm(&a.out.join("overlay.ppm"), &overlay(&stack, &pred)?)?;
    println!(
        "input {}x{} -> output {}x{}; {:.3} s",
        stack.height(),
        stack.width(),
        pred.height(),
        pred.width(),
        seconds
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let manifest = SceneManifest::load(&a.manifest)?;
    let clips = load_split(&manifest, Split::Test)?;
    let resolution = match a.resolution {
        ResolutionArg::Pixel => Resolution::Pixel,
        ResolutionArg::Output => Resolution::Output,
    };
    let report = if let Some(o) = a.oracle {
        let invert = matches!(o, OracleArg::Inverted);
        evaluate_maps(&clips, |c| Ok(if invert { c.label.map(|v| 1.0 - v) } else { c.label.clone() }), resolution)?
    } else if a.baseline {
        let baseline = IntensityBaseline::fit(&load_split(&manifest, Split::Train)?)?;
        if a.overlays {
            write_overlays(&baseline, &clips, &a.out.join("overlays"))?;
        }
        evaluate_clips(&baseline, &clips, resolution)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a model");
        let model = Model::load(path, a.cue)?;
        let scorer = model.scorer();
        if a.overlays {
            write_overlays(scorer.as_ref(), &clips, &a.out.join("overlays"))?;
        }
        evaluate_clips(scorer.as_ref(), &clips, resolution)?
    };
    report.write(&a.out, &a.name, cli.seed)?;
    write_run(&a.out, cli)?;
    println!("{}: pooled AUC {:.6} over {} scenes", a.name, report.pooled.auc, report.per_scene.len());
    Ok(())
}

fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|s| {
            let (h, w) = s.trim().split_once(['x', 'X']).with_context(|| format!("size `{s}` is not HxW"))?;
            Ok((h.trim().parse().with_context(|| format!("bad height in `{s}`"))?, w.trim().parse().with_context(|| format!("bad width in `{s}`"))?))
        })
        .collect()
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let net = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => init_network(&spec_or_default(a.spec.as_deref())?.with_input_channels(1), cli.seed)?,
    };
    let sizes = parse_sizes(&a.sizes)?;
    let report = benchmark(&net, &sizes, a.reps, a.patch, cli.seed)?;
    create_dir(&a.out)?;
    write(&a.out.join("bench.csv"), &report.to_csv())?;
    write_run(&a.out, cli)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn rf(a: &RfArgs) -> Result<()> {
    let spec = spec_or_default(a.spec.as_deref())?;
    let g = receptive_field(&spec)?;
    print!("{}", g.table());
    println!("receptive_field={} output_stride={}", g.receptive_field(), g.output_stride());
    Ok(())
}

fn pipeline(cli: &Cli, a: &PipelineArgs) -> Result<()> {
    let mut config = PipelineConfig::default().with_seed(cli.seed);
    config.branch = apply(&a.train, config.branch.clone(), cli.seed)?;
    if let Some(n) = a.fusion_iters {
        config.fusion.iterations = n;
    }
    if a.warm_input {
        config.input_fusion_init = InputFusionInit::Appearance;
    }
    create_dir(&a.out)?;
    let report = run_pipeline(&config, &a.out)?;
    write_run(&a.out, cli)?;
    for name in MODEL_NAMES {
        println!("{name:>10}: AUC {:.4}", report.auc(name));
    }
    Ok(())
}
