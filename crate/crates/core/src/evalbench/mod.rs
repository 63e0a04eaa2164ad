//! Pixel-level ROC evaluation, prediction upsampling, the patch-scan
//! reference implementation and the full-frame vs. scan benchmark.

mod roc;
mod scan;

pub use roc::{roc_auc, RocCurve};
pub use scan::{benchmark, interior_discrepancy, patch_scan, BenchMode, BenchReport, BenchRow, ScanPlan};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::scenedata::{write_pgm, write_ppm, Cue, LoadedClip};
use crate::tensor::{avgpool_forward, concat_channels, Shape, Tensor};

/// Nearest-neighbour upsampling: every cell becomes a `factor × factor` block.
pub fn upsample_prediction(pred: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    let s = pred.shape();
    Ok(Tensor::from_fn(Shape::new(s.channels, s.height * factor, s.width * factor), |c, y, x| {
        pred.get(c, y / factor, x / factor)
    }))
}

/// Block average; inverse of [`upsample_prediction`] on its image.
pub fn downsample_mean(map: &Tensor, factor: usize) -> Result<Tensor> {
    avgpool_forward(map, factor, factor)
}

/// Whether ROC is computed on input pixels or on output-grid cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    #[default]
    Pixel,
    Output,
}

/// Anything that turns a clip's cue stack into a crowd score map. The map may
/// be at pixel resolution or any integer fraction of it.
pub trait Scorer: Sync {
    fn score(&self, cues: &Tensor) -> Result<Tensor>;
}

/// A network fed with the cue stack's channels in order (3-channel input fusion).
impl Scorer for Network {
    fn score(&self, cues: &Tensor) -> Result<Tensor> {
        self.predict(cues)
    }
}

/// A single-cue branch network.
pub struct CueScorer<'a> {
    pub net: &'a Network,
    pub cue: Cue,
}

impl Scorer for CueScorer<'_> {
    fn score(&self, cues: &Tensor) -> Result<Tensor> {
        let c = self.cue.channel();
        self.net.predict(&cues.slice_channels(c, c + 1)?)
    }
}

/// Raw appearance intensity (or its complement) as the crowd score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBaseline {
    pub invert: bool,
}

impl IntensityBaseline {
    /// Pick the polarity with the higher pooled AUC on `clips`.
    pub fn fit(clips: &[LoadedClip]) -> Result<Self> {
        let plain = evaluate_clips(&IntensityBaseline { invert: false }, clips, Resolution::Pixel)?;
        Ok(IntensityBaseline { invert: plain.pooled.auc < 0.5 })
    }
}

impl Scorer for IntensityBaseline {
    fn score(&self, cues: &Tensor) -> Result<Tensor> {
        let a = cues.slice_channels(0, 1)?;
        Ok(if self.invert { a.map(|v| 1.0 - v) } else { a })
    }
}

/// Score map and binary truth for one clip at the requested resolution.
fn clip_scores(map: Tensor, clip: &LoadedClip, resolution: Resolution) -> Result<(Vec<f64>, Vec<bool>)> {
    let (h, w) = (clip.label.height(), clip.label.width());
    if map.channels() != 1 || map.height() == 0 || h % map.height() != 0 || h / map.height() != w / map.width().max(1) {
        return Err(Error::shape(format!("score map {} does not tile a {h}x{w} frame", map.shape())));
    }
    let factor = h / map.height();
    let (scores, truth) = match resolution {
        Resolution::Pixel => (upsample_prediction(&map, factor)?, clip.label.clone()),
        Resolution::Output => {
            let m = match factor {
                4 => map,
                1 | 2 => downsample_mean(&map, 4 / factor)?,
                _ => return Err(Error::shape(format!("score map {} is coarser than the output grid", map.shape()))),
            };
            (m, downsample_mean(&clip.label, 4)?)
        }
    };
    Ok((scores.into_vec(), truth.data().iter().map(|&v| v >= 0.5).collect()))
}

/// Pooled and per-scene ROC over a set of clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution: Resolution,
    pub pooled: RocCurve,
    /// Scenes containing only one class are omitted.
    pub per_scene: BTreeMap<usize, RocCurve>,
}

#[derive(Serialize)]
struct AucSummary<'a> {
    name: &'a str,
    seed: u64,
    resolution: Resolution,
    pooled_auc: f64,
    per_scene_auc: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn auc_json(&self, name: &str, seed: u64) -> Result<String> {
        let s = AucSummary {
            name,
            seed,
            resolution: self.resolution,
            pooled_auc: self.pooled.auc,
            per_scene_auc: self.per_scene.iter().map(|(k, v)| (*k, v.auc)).collect(),
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }

    /// Writes `{name}_roc.csv` and `{name}_auc.json` into `dir`.
    pub fn write(&self, dir: &Path, name: &str, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let roc = dir.join(format!("{name}_roc.csv"));
        std::fs::write(&roc, self.pooled.to_csv()).map_err(|e| Error::io(&roc, e))?;
        let auc = dir.join(format!("{name}_auc.json"));
        std::fs::write(&auc, self.auc_json(name, seed)?).map_err(|e| Error::io(&auc, e))
    }
}

pub fn evaluate_clips(scorer: &dyn Scorer, clips: &[LoadedClip], resolution: Resolution) -> Result<EvalReport> {
    evaluate_maps(clips, |c| scorer.score(&c.cues()?), resolution)
}

/// Evaluate arbitrary per-clip score maps, e.g. oracles built from the labels.
pub fn evaluate_maps<F>(clips: &[LoadedClip], score: F, resolution: Resolution) -> Result<EvalReport>
where
    F: Fn(&LoadedClip) -> Result<Tensor> + Sync,
{
    if clips.is_empty() {
        return Err(Error::Data("no clips to evaluate".into()));
    }
    let per_clip: Vec<Result<(Vec<f64>, Vec<bool>)>> =
        clips.par_iter().map(|c| clip_scores(score(c)?, c, resolution)).collect();
    let mut all_s = Vec::new();
    let mut all_l = Vec::new();
    let mut by_scene: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (clip, r) in clips.iter().zip(per_clip) {
        let (s, l) = r?;
        let e = by_scene.entry(clip.entry.scene_id).or_default();
        e.0.extend_from_slice(&s);
        e.1.extend_from_slice(&l);
        all_s.extend(s);
        all_l.extend(l);
    }
    let pooled = roc_auc(&all_s, &all_l)?;
    let per_scene = by_scene
        .into_iter()
        .filter_map(|(id, (s, l))| roc_auc(&s, &l).ok().map(|r| (id, r)))
        .collect();
    Ok(EvalReport { resolution, pooled, per_scene })
}

/// Evaluate on every clip of the manifest's test split.
pub fn evaluate(scorer: &dyn Scorer, manifest: &crate::scenedata::SceneManifest, resolution: Resolution) -> Result<EvalReport> {
    let clips = manifest
        .clips_in(crate::scenedata::Split::Test)
        .map(|e| crate::scenedata::load_clip(manifest, e))
        .collect::<Result<Vec<_>>>()?;
    evaluate_clips(scorer, &clips, resolution)
}

/// Frame in gray with red tint where the upsampled prediction is at least 0.5.
pub fn overlay(frame: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let factor = frame.height() / pred.height().max(1);
    let up = upsample_prediction(pred, factor.max(1))?;
    if up.height() != frame.height() || up.width() != frame.width() {
        return Err(Error::shape(format!("prediction {} does not tile frame {}", pred.shape(), frame.shape())));
    }
    let hit = |y, x| up.get(0, y, x) >= 0.5;
    let g = frame.slice_channels(0, 1)?;
    let r = Tensor::from_fn(g.shape(), |_, y, x| if hit(y, x) { 0.5 + 0.5 * g.get(0, y, x) } else { g.get(0, y, x) });
    let gb = Tensor::from_fn(g.shape(), |_, y, x| if hit(y, x) { 0.5 * g.get(0, y, x) } else { g.get(0, y, x) });
    concat_channels(&[&r, &gb, &gb])
}

/// Write `{clip}_prob.pgm` (probability × 255) and `{clip}_overlay.ppm`.
pub fn write_overlays(scorer: &dyn Scorer, clips: &[LoadedClip], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for clip in clips {
        let cues = clip.cues()?;
        let pred = scorer.score(&cues)?;
        write_pgm(&dir.join(format!("{}_prob.pgm", clip.entry.clip_id)), &pred)?;
        write_ppm(&dir.join(format!("{}_overlay.ppm", clip.entry.clip_id)), &overlay(&cues, &pred)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_then_average_is_identity() {
        let t = Tensor::from_fn(Shape::new(1, 3, 5), |_, y, x| (y * 5 + x) as f64 * 0.37);
        let up = upsample_prediction(&t, 4).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 12, 20));
        assert!(downsample_mean(&up, 4).unwrap().max_abs_diff(&t) < 1e-14);
        let one = upsample_prediction(&Tensor::filled(Shape::new(1, 1, 1), 0.3), 4).unwrap();
        assert_eq!(one, Tensor::filled(Shape::new(1, 4, 4), 0.3));
    }

    #[test]
    fn overlay_tints_hits() {
        let frame = Tensor::filled(Shape::new(1, 2, 4), 0.4);
        let mut pred = Tensor::zeros(Shape::new(1, 1, 2));
        pred.set(0, 0, 1, 0.9);
        let o = overlay(&frame, &pred).unwrap();
        assert_eq!(o.channels(), 3);
        assert_eq!(o.get(0, 0, 0), 0.4);
        assert!((o.get(0, 0, 3) - 0.7).abs() < 1e-12);
        assert!((o.get(1, 0, 3) - 0.2).abs() < 1e-12);
    }
}
