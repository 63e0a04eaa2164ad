//! End-to-end desk-scale experiment: synthetic data, three single-cue
//! branches, the three fusion schemes, a raw-intensity baseline, and pooled
//! test AUC for all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{evaluate_clips, CueScorer, EvalReport, IntensityBaseline, Resolution, Scorer};
use crate::fusion::{
    build_decision_fusion, build_feature_fusion, input_fusion_spec, multistage_train, widen_input, Branch, Combiner,
    StageSnapshot,
};
use crate::netspec::NetworkSpec;
use crate::network::{save_checkpoint, Network};
use crate::scenedata::{build_dataset, load_clip, Cue, LoadedClip, SceneConfig, SceneManifest, Split, SplitRatios};
use crate::training::{augment, layerwise_pretrain, train_model, Sample, TrainConfig, TrainLog};

/// How the input-fusion network is initialised before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFusionInit {
    /// Layer-wise pre-training of a fresh 3-channel network.
    Scratch,
    /// The trained appearance branch with zero filters on the other cues, then fine-tuned.
    Appearance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenes: usize,
    pub clips_per_scene: usize,
    pub ratios: SplitRatios,
    pub scene: SceneConfig,
    /// Branch pre-training; `iterations` per layer-wise stage plus `finetune_iterations`.
    pub branch: TrainConfig,
    /// Cascade fine-tuning; `iterations` per branch stage, `finetune_iterations` for the global stage.
    pub fusion: TrainConfig,
    pub input_fusion_init: InputFusionInit,
    pub resolution: Resolution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            scenes: 12,
            clips_per_scene: 2,
            ratios: SplitRatios { train: 10.0 / 12.0, val: 0.0, test: 2.0 / 12.0 },
            scene: SceneConfig::default(),
            branch: TrainConfig { iterations: 150, finetune_iterations: 250, ..TrainConfig::default() },
            fusion: TrainConfig { iterations: 100, finetune_iterations: 150, learning_rate: 0.005, ..TrainConfig::default() },
            input_fusion_init: InputFusionInit::Scratch,
            resolution: Resolution::Pixel,
        }
    }
}

impl PipelineConfig {
    /// Same run with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.branch.seed = seed;
        self.fusion.seed = seed;
        self
    }

    /// Iterations spent on one single-cue branch.
    pub fn branch_iterations(&self) -> Result<usize> {
        let stages = crate::training::stage_specs(&NetworkSpec::default_with_channels(1))?.len();
        Ok(stages * self.branch.iterations + self.branch.finetune_iterations)
    }
}

/// Names used for models in reports, in report order.
pub const MODEL_NAMES: [&str; 7] = ["baseline", "appearance", "motion", "structure", "input", "feature", "decision"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub resolution: Resolution,
    pub train_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
    pub baseline_inverted: bool,
    /// Pooled test AUC per model.
    pub auc: BTreeMap<String, f64>,
    /// Stage order of each cascade.
    pub cascade_stages: Vec<String>,
}

pub struct PipelineReport {
    pub summary: PipelineSummary,
    pub reports: BTreeMap<String, EvalReport>,
    pub logs: BTreeMap<String, TrainLog>,
    /// Snapshots of the feature-fusion cascade.
    pub feature_snapshots: Vec<StageSnapshot>,
    /// Snapshots of the decision-fusion cascade.
    pub decision_snapshots: Vec<StageSnapshot>,
    pub seconds: BTreeMap<String, f64>,
}

impl PipelineReport {
    pub fn auc(&self, name: &str) -> f64 {
        self.summary.auc.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// Random crops of every clip's cue stack with the mask pooled to the output grid.
pub fn training_samples(clips: &[LoadedClip], config: &TrainConfig) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for clip in clips {
        out.extend(augment(&clip.cues()?, &clip.label, config, &mut rng)?);
    }
    Ok(out)
}

fn select(samples: &[Sample], cue: Cue) -> Result<Vec<Sample>> {
    samples.iter().map(|s| s.select_channels(cue.channel(), cue.channel() + 1)).collect()
}

fn load_split(manifest: &SceneManifest, split: Split) -> Result<Vec<LoadedClip>> {
    manifest.clips_in(split).map(|e| load_clip(manifest, e)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Run everything under `out`:
/// `data/` (dataset), `checkpoints/`, `logs/`, `eval/` (ROC CSV, AUC JSON),
/// `summary.json` and `timings.json`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    let mut seconds = BTreeMap::new();
    let mut tick = Instant::now();
    let mut lap = |name: &str, seconds: &mut BTreeMap<String, f64>| {
        seconds.insert(name.to_string(), tick.elapsed().as_secs_f64());
        tick = Instant::now();
    };

    let data_dir = mkdir(&out.join("data"))?;
    let ckpt_dir = mkdir(&out.join("checkpoints"))?;
    let log_dir = mkdir(&out.join("logs"))?;
    let eval_dir = mkdir(&out.join("eval"))?;

    let manifest = build_dataset(&data_dir, config.scenes, config.clips_per_scene, config.ratios, config.seed, &config.scene)?;
    let train_clips = load_split(&manifest, Split::Train)?;
    let test_clips = load_split(&manifest, Split::Test)?;
    if train_clips.is_empty() || test_clips.is_empty() {
        return Err(Error::Data("pipeline needs both training and test scenes".into()));
    }
    let samples = training_samples(&train_clips, &config.branch)?;
    lap("data", &mut seconds);

    let mut logs = BTreeMap::new();
    let mut reports = BTreeMap::new();
    let record = |name: &str, scorer: &dyn Scorer, reports: &mut BTreeMap<String, EvalReport>| -> Result<()> {
        let r = evaluate_clips(scorer, &test_clips, config.resolution)?;
        r.write(&eval_dir, name, config.seed)?;
        reports.insert(name.to_string(), r);
        Ok(())
    };

    let baseline = IntensityBaseline::fit(&train_clips)?;
    record("baseline", &baseline, &mut reports)?;

    let mut branches = Vec::new();
    for cue in Cue::ALL {
        let data = select(&samples, cue)?;
        let (net, log) = layerwise_pretrain(&NetworkSpec::default_with_channels(1), &data, &config.branch)?;
        save_checkpoint(&net, &ckpt_dir.join(format!("{cue}.ckpt")))?;
        log.write_csv(&log_dir.join(format!("{cue}_loss.csv")))?;
        logs.insert(cue.to_string(), log);
        record(cue.name(), &CueScorer { net: &net, cue }, &mut reports)?;
        branches.push(Branch::new(cue, net)?);
        lap(cue.name(), &mut seconds);
    }

    let input_net = train_input_fusion(config, &branches[0].net, &samples, &mut logs)?;
    save_checkpoint(&input_net, &ckpt_dir.join("input.ckpt"))?;
    logs["input"].write_csv(&log_dir.join("input_loss.csv"))?;
    record("input", &input_net, &mut reports)?;
    lap("input", &mut seconds);

    let feature = multistage_train(build_feature_fusion(branches.clone())?, &samples, &config.fusion)?;
    feature.model.save(&ckpt_dir.join("feature"), config.seed)?;
    feature.log.write_csv(&log_dir.join("feature_loss.csv"))?;
    record("feature", &feature.model, &mut reports)?;
    logs.insert("feature".into(), feature.log);
    lap("feature", &mut seconds);

    let decision = multistage_train(build_decision_fusion(branches, Combiner::Learned)?, &samples, &config.fusion)?;
    decision.model.save(&ckpt_dir.join("decision"), config.seed)?;
    decision.log.write_csv(&log_dir.join("decision_loss.csv"))?;
    record("decision", &decision.model, &mut reports)?;
    let cascade_stages = decision.log.stages();
    logs.insert("decision".into(), decision.log);
    lap("decision", &mut seconds);

    let summary = PipelineSummary {
        seed: config.seed,
        resolution: config.resolution,
        train_scenes: manifest.scenes_in(Split::Train),
        test_scenes: manifest.scenes_in(Split::Test),
        baseline_inverted: baseline.invert,
        auc: reports.iter().map(|(k, r)| (k.clone(), r.pooled.auc)).collect(),
        cascade_stages,
    };
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_text(&out.join("timings.json"), &serde_json::to_string_pretty(&seconds)?)?;
    Ok(PipelineReport {
        summary,
        reports,
        logs,
        feature_snapshots: feature.snapshots,
        decision_snapshots: decision.snapshots,
        seconds,
    })
}

fn train_input_fusion(
    config: &PipelineConfig,
    appearance: &Network,
    samples: &[Sample],
    logs: &mut BTreeMap<String, TrainLog>,
) -> Result<Network> {
    let spec = input_fusion_spec(&[1, 1, 1])?;
    let (net, log) = match config.input_fusion_init {
        InputFusionInit::Scratch => layerwise_pretrain(&spec, samples, &config.branch)?,
        InputFusionInit::Appearance => {
            let mut net = widen_input(appearance, spec.input_channels, Cue::Appearance.channel())?;
            let mut log = TrainLog::default();
            let iters = config.fusion.finetune_iterations + 2 * config.fusion.iterations;
            train_model(&mut net, samples, &config.fusion, iters, "finetune", config.fusion.seed.wrapping_add(50), &mut log)?;
            (net, log)
        }
    };
    logs.insert("input".into(), log);
    Ok(net)
}
