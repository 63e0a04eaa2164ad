use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cue_stack, generate_clip, rasterize_polygons, read_pgm, write_pgm, Polygon, SceneConfig, Texture};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fractions of scenes per split. Train and test counts are rounded; val takes the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn counts(&self, n_scenes: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios {}/{}/{} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        let n = n_scenes as f64;
        let train = ((n * self.train).round() as usize).min(n_scenes);
        let test = ((n * self.test).round() as usize).min(n_scenes - train);
        Ok((train, n_scenes - train - test, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: usize,
    pub split: Split,
    pub texture: Texture,
    pub perspective: f64,
}

/// One clip on disk. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub scene_id: usize,
    pub split: Split,
    pub frames: Vec<String>,
    pub label_frame_index: usize,
    /// Region outlines (train and val clips).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygons: Option<String>,
    /// Pixel mask (test clips).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Precomputed edge map used in place of the built-in structure channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub ratios: SplitRatios,
    pub scenes: Vec<SceneEntry>,
    pub clips: Vec<ClipEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl SceneManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<SceneManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SceneManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest schema {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn scenes_in(&self, split: Split) -> Vec<usize> {
        self.scenes.iter().filter(|s| s.split == split).map(|s| s.scene_id).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Clip read back from disk with its label rasterised to a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClip {
    pub entry: ClipEntry,
    pub frames: Vec<Tensor>,
    pub label: Tensor,
    pub edges: Option<Tensor>,
}

impl LoadedClip {
    /// Appearance, motion and structure channels of the labelled frame.
    pub fn cues(&self) -> Result<Tensor> {
        let stack = cue_stack(&self.frames, self.entry.label_frame_index)?;
        match &self.edges {
            None => Ok(stack),
            Some(e) => concat_channels(&[&stack.slice_channels(0, 2)?, e]),
        }
    }
}

pub fn load_clip(manifest: &SceneManifest, entry: &ClipEntry) -> Result<LoadedClip> {
    let frames = entry.frames.iter().map(|f| read_pgm(&manifest.resolve(f))).collect::<Result<Vec<_>>>()?;
    let first = frames.first().ok_or_else(|| Error::Data(format!("clip {} has no frames", entry.clip_id)))?;
    let (h, w) = (first.height(), first.width());
    if entry.label_frame_index >= frames.len() {
        return Err(Error::Data(format!("clip {}: label frame index out of range", entry.clip_id)));
    }
    let label = match (&entry.mask, &entry.polygons) {
        (Some(m), _) => read_pgm(&manifest.resolve(m))?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        (None, Some(p)) => {
            let path = manifest.resolve(p);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let polys: Vec<Polygon> =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            rasterize_polygons(&polys, h, w)?
        }
        (None, None) => return Err(Error::Data(format!("clip {} has no label", entry.clip_id))),
    };
    if label.height() != h || label.width() != w {
        return Err(Error::Data(format!("clip {}: label size differs from frame size", entry.clip_id)));
    }
    let edges = entry.edges.as_ref().map(|e| read_pgm(&manifest.resolve(e))).transpose()?;
    Ok(LoadedClip { entry: entry.clone(), frames, label, edges })
}

fn scene_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(scene as u64 * 1_000_003 + 1)
}

/// Generate `n_scenes × clips_per_scene` clips under `dir` and write `dir/manifest.json`.
///
/// Scenes (not clips) are assigned to splits, so no scene appears in two splits.
/// Train and val clips are labelled with polygons, test clips with pixel masks.
pub fn build_dataset(
    dir: &Path,
    n_scenes: usize,
    clips_per_scene: usize,
    ratios: SplitRatios,
    seed: u64,
    base: &SceneConfig,
) -> Result<SceneManifest> {
    if n_scenes == 0 || clips_per_scene == 0 {
        return Err(Error::invalid("dataset needs at least one scene and one clip per scene"));
    }
    base.validate()?;
    let (n_train, n_val, _) = ratios.counts(n_scenes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Test; n_scenes];
    for (rank, &s) in order.iter().enumerate() {
        split_of[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let textures = [Texture::Flat, Texture::Stripes, Texture::Blobs];
    let scenes: Vec<SceneEntry> = (0..n_scenes)
        .map(|scene_id| SceneEntry {
            scene_id,
            split: split_of[scene_id],
            texture: textures[rng.gen_range(0..textures.len())],
            perspective: rng.gen_range(1.5..3.0),
        })
        .collect();

    let jobs: Vec<(usize, usize, SceneConfig)> = scenes
        .iter()
        .flat_map(|s| {
            let mut srng = ChaCha8Rng::seed_from_u64(scene_seed(seed, s.scene_id));
            let background_seed = srng.gen();
            (0..clips_per_scene)
                .map(|c| {
                    let cfg = SceneConfig {
                        seed: srng.gen(),
                        density: base.density * srng.gen_range(0.5..1.5),
                        fraction_stationary: srng.gen_range(0.1..0.6),
                        perspective: s.perspective,
                        texture: s.texture,
                        background_seed,
                        ..base.clone()
                    };
                    (s.scene_id, c, cfg)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clips = jobs
        .par_iter()
        .map(|(scene_id, c, cfg)| write_clip(dir, *scene_id, *c, split_of[*scene_id], cfg))
        .collect::<Result<Vec<_>>>()?;

    let manifest = SceneManifest {
        schema_version: MANIFEST_VERSION,
        seed,
        height: base.height,
        width: base.width,
        ratios,
        scenes,
        clips,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join(SceneManifest::FILE_NAME))?;
    Ok(manifest)
}

fn write_clip(dir: &Path, scene_id: usize, c: usize, split: Split, cfg: &SceneConfig) -> Result<ClipEntry> {
    let clip_id = format!("s{scene_id:03}_c{c:02}");
    let clip_dir = dir.join(&clip_id);
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let clip = generate_clip(cfg)?;
    let mut frames = Vec::with_capacity(clip.frames.len());
    for (i, f) in clip.frames.iter().enumerate() {
        let rel = format!("{clip_id}/frame_{i:02}.pgm");
        write_pgm(&dir.join(&rel), f)?;
        frames.push(rel);
    }
    let (polygons, mask) = if split == Split::Test {
        let rel = format!("{clip_id}/mask.pgm");
        write_pgm(&dir.join(&rel), &clip.mask)?;
        (None, Some(rel))
    } else {
        let rel = format!("{clip_id}/polygons.json");
        let path = dir.join(&rel);
        std::fs::write(&path, serde_json::to_string(&clip.polygons)?).map_err(|e| Error::io(&path, e))?;
        (Some(rel), None)
    };
    Ok(ClipEntry { clip_id, scene_id, split, frames, label_frame_index: clip.label_frame_index, polygons, mask, edges: None })
}
