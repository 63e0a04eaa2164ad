//! Multi-cue fusion: one network on stacked cues (input fusion), a shared
//! pointwise head over tapped branch features (feature fusion), or a combiner
//! over branch decisions (decision fusion), plus the cascaded schedule that
//! adds and tunes branches one at a time.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalbench::Scorer;
use crate::netspec::{parse_spec, NetworkSpec};
use crate::network::{load_checkpoint, save_checkpoint, Activations, Layer, Network};
use crate::scenedata::Cue;
use crate::tensor::{concat_channels, ConvGrads, ConvParams, Tensor};
use crate::training::{cross_entropy_loss, train_model, Model, ParamSlot, Sample, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionScheme {
    Input,
    Feature,
    Decision,
}

impl std::str::FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "input" => Ok(FusionScheme::Input),
            "feature" => Ok(FusionScheme::Feature),
            "decision" => Ok(FusionScheme::Decision),
            other => Err(Error::invalid(format!("unknown fusion scheme `{other}` (input|feature|decision)"))),
        }
    }
}

impl std::fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionScheme::Input => "input",
            FusionScheme::Feature => "feature",
            FusionScheme::Decision => "decision",
        })
    }
}

/// How decision fusion merges branch maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    Learned,
    Average,
}

/// A single-cue network. Its input is channel `cue.channel()` of a cue stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub cue: Cue,
    pub net: Network,
}

impl Branch {
    pub fn new(cue: Cue, net: Network) -> Result<Branch> {
        if net.input_channels() != 1 {
            return Err(Error::shape(format!("{cue} branch must take one channel, got {}", net.input_channels())));
        }
        Ok(Branch { cue, net })
    }

    /// Index of the final decision convolution; feature fusion taps its input.
    fn tap(&self) -> Result<usize> {
        let spec = self.net.spec();
        let last = *self.net.conv_indices().last().ok_or_else(|| Error::invalid("branch has no convolution"))?;
        let p = self.net.conv_params(last).expect("conv index");
        if p.kernel != 1 || p.out_channels != 1 || last + 2 != spec.layers.len() || !spec.ends_with_sigmoid() {
            return Err(Error::invalid(format!(
                "{} branch must end in a 1x1 single-output convolution and a sigmoid",
                self.cue
            )));
        }
        Ok(last)
    }

    fn tap_width(&self) -> Result<usize> {
        Ok(self.net.conv_params(self.tap()?).expect("conv index").in_channels)
    }

    fn input(&self, stack: &Tensor) -> Result<Tensor> {
        let c = self.cue.channel();
        if stack.channels() <= c {
            return Err(Error::Data(format!("input has {} channels, no {} cue", stack.channels(), self.cue)));
        }
        stack.slice_channels(c, c + 1)
    }
}

fn head_spec(width: usize) -> NetworkSpec {
    parse_spec("Conv(1,1,1) - Sig").expect("head spec").with_input_channels(width)
}

fn head_network(weights: Vec<f64>, bias: f64, seed: u64) -> Result<Network> {
    let width = weights.len();
    let params = ConvParams::from_parts(weights, vec![bias], width, 1, 1, 0)?;
    Network::from_layers(head_spec(width), vec![Layer::Conv(params), Layer::Sigmoid], seed)
}

/// Channel count of the stacked input expected by input fusion.
pub fn input_fusion_spec(channel_counts: &[usize]) -> Result<NetworkSpec> {
    if channel_counts.is_empty() || channel_counts.contains(&0) {
        return Err(Error::invalid("input fusion needs at least one cue with at least one channel"));
    }
    Ok(NetworkSpec::default_with_channels(channel_counts.iter().sum()))
}

/// Default-architecture network over the concatenated cue channels.
pub fn build_input_fusion(channel_counts: &[usize], seed: u64) -> Result<Network> {
    crate::network::init_network(&input_fusion_spec(channel_counts)?, seed)
}

/// Copy of `net` that accepts `total` input channels, using the original
/// first-layer filters on channels `offset..offset + net.input_channels()` and
/// zero weights on the rest.
pub fn widen_input(net: &Network, total: usize, offset: usize) -> Result<Network> {
    let cin = net.input_channels();
    if offset + cin > total {
        return Err(Error::invalid(format!("channels {offset}..{} exceed {total}", offset + cin)));
    }
    let first = *net.conv_indices().first().ok_or_else(|| Error::invalid("network has no convolution"))?;
    let mut layers = net.layers().to_vec();
    if let Layer::Conv(p) = &layers[first] {
        let k2 = p.kernel * p.kernel;
        let mut w = vec![0.0; p.out_channels * total * k2];
        for o in 0..p.out_channels {
            let src = &p.weights[o * cin * k2..(o + 1) * cin * k2];
            let dst = (o * total + offset) * k2;
            w[dst..dst + cin * k2].copy_from_slice(src);
        }
        layers[first] = Layer::Conv(ConvParams::from_parts(w, p.bias.clone(), total, p.kernel, p.stride, p.padding)?);
    }
    Network::from_layers(net.spec().clone().with_input_channels(total), layers, net.seed())
}

/// Branches plus a pointwise head (feature or decision fusion).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBranchNetwork {
    scheme: FusionScheme,
    combiner: Combiner,
    branches: Vec<Branch>,
    head: Network,
    /// Only the first `active` branches contribute; the rest feed zeros.
    active: usize,
}

struct Trace {
    branch_acts: Vec<Option<Activations>>,
    head_acts: Option<Activations>,
}

impl MultiBranchNetwork {
    fn check_branches(branches: &[Branch]) -> Result<()> {
        if branches.is_empty() {
            return Err(Error::invalid("fusion needs at least one branch"));
        }
        for (i, b) in branches.iter().enumerate() {
            if branches[..i].iter().any(|o| o.cue == b.cue) {
                return Err(Error::invalid(format!("duplicate {} branch", b.cue)));
            }
            if b.net.spec().total_stride() != branches[0].net.spec().total_stride() {
                return Err(Error::shape("branches must share output geometry"));
            }
            b.tap()?;
        }
        Ok(())
    }

    /// Feature fusion over the inputs of each branch's final 1×1 convolution.
    /// The head starts as the first branch's own decision layer with zero
    /// weights on the other branches, so the fused output initially equals
    /// the first branch's output.
    pub fn feature(branches: Vec<Branch>) -> Result<Self> {
        Self::check_branches(&branches)?;
        let widths = branches.iter().map(Branch::tap_width).collect::<Result<Vec<_>>>()?;
        let first = branches[0].net.conv_params(branches[0].tap()?).expect("tap").clone();
        let mut weights = vec![0.0; widths.iter().sum()];
        weights[..widths[0]].copy_from_slice(&first.weights);
        let head = head_network(weights, first.bias[0], branches[0].net.seed())?;
        let active = branches.len();
        Ok(MultiBranchNetwork { scheme: FusionScheme::Feature, combiner: Combiner::Learned, branches, head, active })
    }

    /// Decision fusion over branch sigmoid maps. The learned combiner starts
    /// as an increasing function of the first branch only.
    pub fn decision(branches: Vec<Branch>, combiner: Combiner) -> Result<Self> {
        Self::check_branches(&branches)?;
        let mut weights = vec![0.0; branches.len()];
        weights[0] = 4.0;
        let head = head_network(weights, -2.0, branches[0].net.seed())?;
        let active = branches.len();
        Ok(MultiBranchNetwork { scheme: FusionScheme::Decision, combiner, branches, head, active })
    }

    pub fn scheme(&self) -> FusionScheme {
        self.scheme
    }

    pub fn combiner(&self) -> Combiner {
        self.combiner
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, cue: Cue) -> Option<&Branch> {
        self.branches.iter().find(|b| b.cue == cue)
    }

    pub fn head(&self) -> &Network {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Network {
        &mut self.head
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn set_active(&mut self, n: usize) -> Result<()> {
        if n == 0 || n > self.branches.len() {
            return Err(Error::invalid(format!("cannot activate {n} of {} branches", self.branches.len())));
        }
        self.active = n;
        Ok(())
    }

    /// Column range of the head belonging to branch `i`.
    fn head_columns(&self, i: usize) -> Result<std::ops::Range<usize>> {
        let width = |b: &Branch| match self.scheme {
            FusionScheme::Feature => b.tap_width(),
            _ => Ok(1),
        };
        let mut start = 0;
        for b in &self.branches[..i] {
            start += width(b)?;
        }
        Ok(start..start + width(&self.branches[i])?)
    }

    /// Drop the last branch and its head columns.
    pub fn remove_last_branch(&mut self) -> Result<Branch> {
        if self.branches.len() < 2 {
            return Err(Error::invalid("cannot remove the only branch"));
        }
        let cols = self.head_columns(self.branches.len() - 1)?;
        let p = self.head.conv_params(0).expect("head conv");
        let mut w = p.weights.clone();
        w.truncate(cols.start);
        let head = head_network(w, p.bias[0], self.head.seed())?;
        let branch = self.branches.pop().expect("non-empty");
        self.head = head;
        self.active = self.active.min(self.branches.len());
        Ok(branch)
    }

    pub fn set_branch_frozen(&mut self, i: usize, frozen: bool) {
        let net = &mut self.branches[i].net;
        if frozen {
            net.freeze_all();
        } else {
            net.unfreeze_all();
        }
    }

    fn trainable_head(&self) -> bool {
        !(self.scheme == FusionScheme::Decision && self.combiner == Combiner::Average)
    }

    fn branch_features(&self, i: usize, stack: &Tensor, keep: bool) -> Result<(Tensor, Option<Activations>)> {
        let b = &self.branches[i];
        let x = b.input(stack)?;
        b.net.output_shape(x.shape())?;
        match self.scheme {
            FusionScheme::Feature => b.net.forward_range(&x, 0, b.tap()?, keep),
            _ => b.net.forward(&x, keep),
        }
    }

    fn forward_impl(&self, stack: &Tensor, keep: bool) -> Result<(Tensor, Option<Trace>)> {
        let mut feats = Vec::with_capacity(self.branches.len());
        let mut branch_acts = Vec::with_capacity(self.branches.len());
        for i in 0..self.branches.len() {
            if i < self.active {
                let trace = keep && !self.branches[i].net.all_frozen();
                let (f, a) = self.branch_features(i, stack, trace)?;
                feats.push(f);
                branch_acts.push(a);
            } else {
                let shape = feats[0].shape();
                let width = self.head_columns(i)?.len();
                feats.push(Tensor::zeros(crate::tensor::Shape::new(width, shape.height, shape.width)));
                branch_acts.push(None);
            }
        }
        if !self.trainable_head() {
            let n = self.active as f64;
            let mut out = Tensor::zeros(feats[0].shape());
            for f in &feats[..self.active] {
                out.data_mut().iter_mut().zip(f.data()).for_each(|(o, v)| *o += v);
            }
            out.data_mut().iter_mut().for_each(|o| *o /= n);
            return Ok((out, keep.then_some(Trace { branch_acts, head_acts: None })));
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let joined = concat_channels(&refs)?;
        let (out, head_acts) = self.head.forward(&joined, keep)?;
        Ok((out, keep.then_some(Trace { branch_acts, head_acts })))
    }

    pub fn predict(&self, stack: &Tensor) -> Result<Tensor> {
        self.forward_impl(stack, false).map(|(o, _)| o)
    }

    /// Outputs of every active branch as a standalone network.
    pub fn branch_outputs(&self, stack: &Tensor) -> Result<Vec<Tensor>> {
        self.branches[..self.active].iter().map(|b| b.net.predict(&b.input(stack)?)).collect()
    }

    fn slot_counts(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.net.conv_indices().len()).collect()
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<FusionManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut branches = Vec::new();
        for b in &self.branches {
            let file = format!("{}.ckpt", b.cue);
            save_checkpoint(&b.net, &dir.join(&file))?;
            branches.push(FileEntry { cue: Some(b.cue), sha256: file_sha256(&dir.join(&file))?, file });
        }
        let file = "head.ckpt".to_string();
        save_checkpoint(&self.head, &dir.join(&file))?;
        let head = FileEntry { cue: None, sha256: file_sha256(&dir.join(&file))?, file };
        let manifest = FusionManifest {
            version: FUSION_MANIFEST_VERSION,
            scheme: self.scheme,
            combiner: self.combiner,
            active: self.active,
            seed,
            branches,
            head,
        };
        let path = dir.join(FusionManifest::FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Load from a directory written by [`save`](Self::save), checking file hashes.
    pub fn load(dir: &Path) -> Result<MultiBranchNetwork> {
        let path = dir.join(FusionManifest::FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: FusionManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        if m.version != FUSION_MANIFEST_VERSION {
            return Err(Error::Checkpoint { path, reason: format!("unsupported fusion manifest version {}", m.version) });
        }
        let verified = |e: &FileEntry| -> Result<Network> {
            let p = dir.join(&e.file);
            let actual = file_sha256(&p)?;
            if actual != e.sha256 {
                return Err(Error::Checkpoint { path: p, reason: "sha256 does not match the fusion manifest".into() });
            }
            load_checkpoint(&p)
        };
        let branches = m
            .branches
            .iter()
            .map(|e| {
                let cue = e.cue.ok_or_else(|| Error::Checkpoint { path: path.clone(), reason: "branch without cue".into() })?;
                Branch::new(cue, verified(e)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::check_branches(&branches)?;
        let head = verified(&m.head)?;
        let mut mbn = MultiBranchNetwork { scheme: m.scheme, combiner: m.combiner, branches, head, active: 1 };
        mbn.set_active(m.active)?;
        let expected: usize = (0..mbn.branches.len()).map(|i| mbn.head_columns(i).map(|r| r.len())).sum::<Result<_>>()?;
        if mbn.head.input_channels() != expected {
            return Err(Error::Checkpoint {
                path,
                reason: format!("head takes {} channels, branches provide {expected}", mbn.head.input_channels()),
            });
        }
        Ok(mbn)
    }
}

pub fn build_feature_fusion(branches: Vec<Branch>) -> Result<MultiBranchNetwork> {
    MultiBranchNetwork::feature(branches)
}

pub fn build_decision_fusion(branches: Vec<Branch>, combiner: Combiner) -> Result<MultiBranchNetwork> {
    MultiBranchNetwork::decision(branches, combiner)
}

impl Model for MultiBranchNetwork {
    fn sample_loss_grads(&self, sample: &Sample) -> Result<(f64, Vec<Option<ConvGrads>>)> {
        let (out, trace) = self.forward_impl(&sample.input, true)?;
        let trace = trace.expect("traced forward");
        let (loss, grad) = cross_entropy_loss(&out, &sample.label)?;
        let counts = self.slot_counts();
        let mut slots: Vec<Option<ConvGrads>> = Vec::with_capacity(counts.iter().sum::<usize>() + 1);

        let (branch_grads, head_slots): (Vec<Option<Tensor>>, Vec<Option<ConvGrads>>) = if self.trainable_head() {
            let need_input = (0..self.active).any(|i| !self.branches[i].net.all_frozen());
            let hg = self.head.backward_range(trace.head_acts.as_ref(), &grad, need_input)?;
            let split = match &hg.input {
                Some(g) => (0..self.branches.len())
                    .map(|i| {
                        let cols = self.head_columns(i)?;
                        g.slice_channels(cols.start, cols.end).map(Some)
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![None; self.branches.len()],
            };
            (split, self.head.slot_grads(&hg))
        } else {
            let share = grad.map(|g| g / self.active as f64);
            ((0..self.branches.len()).map(|i| (i < self.active).then(|| share.clone())).collect(), vec![None])
        };
        for (i, b) in self.branches.iter().enumerate() {
            match (&trace.branch_acts[i], &branch_grads[i]) {
                (Some(acts), Some(g)) => {
                    let bg = b.net.backward_range(Some(acts), g, false)?;
                    slots.extend(b.net.slot_grads(&bg));
                }
                _ => slots.extend(std::iter::repeat_n(None, counts[i])),
            }
        }
        slots.extend(head_slots);
        Ok((loss, slots))
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let active = self.active;
        let head_frozen = !self.trainable_head();
        let mut slots = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            for mut s in b.net.param_slots() {
                s.frozen |= i >= active;
                slots.push(s);
            }
        }
        for mut s in self.head.param_slots() {
            s.frozen |= head_frozen;
            slots.push(s);
        }
        slots
    }
}

impl Scorer for MultiBranchNetwork {
    fn score(&self, cues: &Tensor) -> Result<Tensor> {
        self.predict(cues)
    }
}

/// Checkpoint bytes of every branch and the head at one point of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot {
    pub stage: String,
    pub branches: Vec<(Cue, Vec<u8>)>,
    pub head: Vec<u8>,
}

impl StageSnapshot {
    fn of(stage: &str, mbn: &MultiBranchNetwork) -> Self {
        StageSnapshot {
            stage: stage.to_string(),
            branches: mbn.branches.iter().map(|b| (b.cue, b.net.to_checkpoint_bytes())).collect(),
            head: mbn.head.to_checkpoint_bytes(),
        }
    }

    pub fn branch(&self, cue: Cue) -> Option<&[u8]> {
        self.branches.iter().find(|(c, _)| *c == cue).map(|(_, b)| b.as_slice())
    }
}

#[derive(Debug)]
pub struct MultistageResult {
    pub model: MultiBranchNetwork,
    pub log: TrainLog,
    /// `initial`, then one snapshot after each stage.
    pub snapshots: Vec<StageSnapshot>,
}

/// Stage labels of the cascade, in execution order.
pub const CASCADE_STAGES: [&str; 3] = ["motion", "structure", "global"];

/// Cascaded fine-tuning of an [appearance, motion, structure] model:
/// motion with appearance frozen, then structure with appearance and motion
/// frozen, then every branch and the head together. `data` holds cue-stack
/// samples; `config.iterations` steps per branch stage and
/// `config.finetune_iterations` for the global stage.
pub fn multistage_train(mut mbn: MultiBranchNetwork, data: &[Sample], config: &TrainConfig) -> Result<MultistageResult> {
    let order: Vec<Cue> = mbn.branches.iter().map(|b| b.cue).collect();
    if order != Cue::ALL {
        return Err(Error::invalid(format!("cascade expects appearance, motion, structure branches, got {order:?}")));
    }
    if data.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    if let Some(s) = data.iter().find(|s| s.input.channels() < Cue::ALL.len()) {
        return Err(Error::Data(format!(
            "missing cue data: samples carry {} channels, the cascade needs {}",
            s.input.channels(),
            Cue::ALL.len()
        )));
    }
    let mut log = TrainLog::default();
    let mut snapshots = vec![StageSnapshot::of("initial", &mbn)];
    for (k, stage) in CASCADE_STAGES.iter().enumerate() {
        let (active, frozen, iters) = match k {
            0 => (2, 1, config.iterations),
            1 => (3, 2, config.iterations),
            _ => (3, 0, config.finetune_iterations),
        };
        mbn.set_active(active)?;
        for i in 0..mbn.branches.len() {
            mbn.set_branch_frozen(i, i < frozen);
        }
        train_model(&mut mbn, data, config, iters, stage, config.seed.wrapping_add(100 + k as u64), &mut log)?;
        snapshots.push(StageSnapshot::of(stage, &mbn));
    }
    for i in 0..mbn.branches.len() {
        mbn.set_branch_frozen(i, false);
    }
    Ok(MultistageResult { model: mbn, log, snapshots })
}

pub const FUSION_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<Cue>,
    pub file: String,
    pub sha256: String,
}

/// Ties branch and head checkpoints of a multi-branch model together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub version: u32,
    pub scheme: FusionScheme,
    pub combiner: Combiner,
    pub active: usize,
    pub seed: u64,
    pub branches: Vec<FileEntry>,
    pub head: FileEntry,
}

impl FusionManifest {
    pub const FILE_NAME: &'static str = "fusion.json";
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}
