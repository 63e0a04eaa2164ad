use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{receptive_field, GeometryReport};
use crate::network::Network;
use crate::tensor::{Shape, Tensor};

/// Which output unit of a patch stands in for the scanned site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanPlan {
    pub patch: usize,
    pub stride: usize,
    /// Patch output unit whose receptive field is closest to the patch centre.
    pub center_cell: usize,
}

impl ScanPlan {
    pub fn new(geometry: &GeometryReport, patch: usize, stride: usize) -> Result<ScanPlan> {
        let jump = geometry.output_stride();
        if stride != jump {
            return Err(Error::invalid(format!("scan stride {stride} must equal the output stride {jump}")));
        }
        if patch == 0 || patch % jump != 0 {
            return Err(Error::Geometry(format!("patch {patch} must be a positive multiple of {jump}")));
        }
        let r = geometry.receptive_field() as f64;
        let f = geometry.first_pixel() as f64;
        let ideal = ((patch as f64 - 1.0) / 2.0 - f - (r - 1.0) / 2.0) / jump as f64;
        let center_cell = (ideal.round().max(0.0) as usize).min(patch / jump - 1);
        Ok(ScanPlan { patch, stride, center_cell })
    }

    /// Whether the centre unit's receptive field fits inside the patch.
    pub fn is_exact(&self, geometry: &GeometryReport) -> bool {
        let (lo, hi) = geometry.input_span(self.center_cell);
        lo >= 0 && hi < self.patch as isize
    }
}

/// Patch-by-patch reference: for every output cell, crop the zero-padded
/// patch around its input site, run the whole network, keep one value.
pub fn patch_scan(net: &Network, image: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    let geometry = receptive_field(net.spec())?;
    let plan = ScanPlan::new(&geometry, patch, stride)?;
    let out_shape = net.output_shape(image.shape())?;
    let mut out = Tensor::zeros(out_shape);
    let offset = (plan.center_cell * stride) as isize;
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            let crop = image.crop_padded((oy * stride) as isize - offset, (ox * stride) as isize - offset, patch, patch);
            let y = net.predict(&crop)?;
            for c in 0..out_shape.channels {
                out.set(c, oy, ox, y.get(c, plan.center_cell, plan.center_cell));
            }
        }
    }
    Ok(out)
}

/// Largest difference between two output maps over cells whose receptive
/// field lies inside an input of `input_h × input_w`.
pub fn interior_discrepancy(geometry: &GeometryReport, a: &Tensor, b: &Tensor, input_h: usize, input_w: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("cannot compare {} with {}", a.shape(), b.shape())));
    }
    let mut worst = 0.0f64;
    for c in 0..a.channels() {
        for y in geometry.interior_cells(input_h) {
            for x in geometry.interior_cells(input_w) {
                worst = worst.max((a.get(c, y, x) - b.get(c, y, x)).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    FullFrame,
    PatchScan,
}

impl BenchMode {
    fn name(self) -> &'static str {
        match self {
            BenchMode::FullFrame => "full_frame",
            BenchMode::PatchScan => "patch_scan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub mode: BenchMode,
    pub median_seconds: f64,
    /// Patch-scan time over full-frame time (same on both rows of a size).
    pub speedup: f64,
    pub max_interior_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub patch: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("height,width,mode,median_seconds,speedup,max_interior_diff,patch\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.3},{:.3e},{}\n",
                r.height,
                r.width,
                r.mode.name(),
                r.median_seconds,
                r.speedup,
                r.max_interior_diff,
                self.patch
            ));
        }
        s
    }

    pub fn speedup(&self, height: usize, width: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.height == height && r.width == width).map(|r| r.speedup)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Median wall-clock of full-frame inference and patch scanning per input size,
/// on uniform random images drawn from `seed`.
pub fn benchmark(net: &Network, sizes: &[(usize, usize)], repetitions: usize, patch: usize, seed: u64) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::invalid("benchmark needs at least one repetition"));
    }
    let geometry = receptive_field(net.spec())?;
    let stride = geometry.output_stride();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len() * 2);
    for &(h, w) in sizes {
        let image = Tensor::from_fn(Shape::new(net.input_channels(), h, w), |_, _, _| rng.gen_range(0.0..1.0));
        let mut full_t = Vec::with_capacity(repetitions);
        let mut scan_t = Vec::with_capacity(repetitions);
        let mut diff = 0.0f64;
        for _ in 0..repetitions {
            let (full, tf) = timed(|| net.predict(&image))?;
            let (scan, ts) = timed(|| patch_scan(net, &image, patch, stride))?;
            full_t.push(tf);
            scan_t.push(ts);
            diff = diff.max(interior_discrepancy(&geometry, &full, &scan, h, w)?);
        }
        let (mf, ms) = (median(full_t), median(scan_t));
        let speedup = ms / mf;
        for (mode, t) in [(BenchMode::FullFrame, mf), (BenchMode::PatchScan, ms)] {
            rows.push(BenchRow { height: h, width: w, mode, median_seconds: t, speedup, max_interior_diff: diff });
        }
    }
    Ok(BenchReport { patch, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{parse_spec, NetworkSpec};
    use crate::network::init_network;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, h, w), |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn plan_for_default_net() {
        let g = receptive_field(&NetworkSpec::default_with_channels(1)).unwrap();
        let p56 = ScanPlan::new(&g, 56, 4).unwrap();
        assert_eq!(p56.center_cell, 7);
        assert!(!p56.is_exact(&g));
        let p60 = ScanPlan::new(&g, 60, 4).unwrap();
        assert_eq!(p60.center_cell, 7);
        assert!(p60.is_exact(&g));
        assert!(ScanPlan::new(&g, 58, 4).is_err());
        assert!(ScanPlan::new(&g, 56, 2).is_err());
    }

    #[test]
    fn exact_patch_matches_full_frame_on_small_net() {
        let spec = parse_spec("Conv(3,3,1) - ReLU - Pool(MAX,2,2) - Conv(2,3,1) - ReLU - Conv(1,1,1) - Sig").unwrap();
        let g = receptive_field(&spec).unwrap();
        let (patch, _) = g.exact_scan_patch();
        let net = init_network(&spec, 4).unwrap();
        let img = image(20, 24, 1);
        let full = net.predict(&img).unwrap();
        let scan = patch_scan(&net, &img, patch, 2).unwrap();
        assert_eq!(scan.shape(), full.shape());
        assert!(interior_discrepancy(&g, &full, &scan, 20, 24).unwrap() < 1e-12);
    }

    #[test]
    fn report_has_two_rows_per_size() {
        let spec = parse_spec("Conv(2,3,1) - ReLU - Pool(MAX,2,2) - Conv(1,1,1) - Sig").unwrap();
        let net = init_network(&spec, 0).unwrap();
        let r = benchmark(&net, &[(8, 8), (12, 16)], 1, 8, 0).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.to_csv().lines().count(), 5);
    }
}
