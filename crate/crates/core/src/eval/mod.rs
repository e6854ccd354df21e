//! Benchmark evaluation: luminance metrics, per-dataset reports and timing.

pub mod metrics;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{concatenate, s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use metrics::{gaussian_window, psnr_y, rgb_to_y, ssim_y};
pub use report::{ImageMetrics, MetricsReport, TileSpec, TimingReport};

use crate::data::{bicubic_resize, bilinear_resize, save_png, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::SsiuModel;
use crate::Image;

/// Anything that maps an LR image to an image `scale()` times larger.
pub trait SuperResolver {
    fn scale(&self) -> usize;
    fn super_resolve(&self, lr: &Image) -> Result<Image>;
    fn parameter_count(&self) -> Option<usize> {
        None
    }
    fn flops_1280x720(&self) -> Option<u64> {
        None
    }
}

impl SuperResolver for SsiuModel {
    fn scale(&self) -> usize {
        SsiuModel::scale(self)
    }
    fn super_resolve(&self, lr: &Image) -> Result<Image> {
        self.forward(lr)
    }
    fn parameter_count(&self) -> Option<usize> {
        Some(self.count_parameters())
    }
    fn flops_1280x720(&self) -> Option<u64> {
        self.flops(720, 1280).ok().map(|r| r.total)
    }
}

/// Parameter-free reference upsamplers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bicubic,
    Bilinear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Interpolation::Bicubic),
            "bilinear" => Ok(Interpolation::Bilinear),
            other => Err(Error::invalid(format!(
                "unknown interpolation `{other}` (expected bicubic or bilinear)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterpolationBaseline {
    pub kind: Interpolation,
    pub scale: usize,
}

impl SuperResolver for InterpolationBaseline {
    fn scale(&self) -> usize {
        self.scale
    }
    fn super_resolve(&self, lr: &Image) -> Result<Image> {
        let (_, h, w) = lr.dim();
        let (oh, ow) = (h * self.scale, w * self.scale);
        match self.kind {
            Interpolation::Bicubic => bicubic_resize(lr, oh, ow),
            Interpolation::Bilinear => bilinear_resize(lr, oh, ow),
        }
    }
    fn parameter_count(&self) -> Option<usize> {
        Some(0)
    }
}

/// `"cpu (<model>, <n> threads)"` from `/proc/cpuinfo` where readable.
pub fn device_description() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|m| m.trim().to_string())
    });
    match model {
        Some(m) => format!("cpu ({m}, {threads} threads)"),
        None => format!("cpu ({threads} threads)"),
    }
}

/// Peak resident set size of this process in bytes (Linux `VmHWM`).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut v: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < len).collect();
    v.push(len - tile);
    v
}

/// Runs `model` on overlapping LR tiles and averages the HR outputs where
/// they overlap.
pub fn tiled_super_resolve<M: SuperResolver + ?Sized>(model: &M, lr: &Image, spec: TileSpec) -> Result<Image> {
    if spec.tile == 0 || spec.overlap >= spec.tile {
        return Err(Error::invalid("tile must exceed overlap"));
    }
    let (c, h, w) = lr.dim();
    let s = model.scale();
    let mut acc = Array3::<f64>::zeros((c, h * s, w * s));
    let mut hits = Array3::<f64>::zeros((1, h * s, w * s));
    for &top in &tile_starts(h, spec.tile, spec.overlap) {
        for &left in &tile_starts(w, spec.tile, spec.overlap) {
            let (th, tw) = (spec.tile.min(h), spec.tile.min(w));
            let patch = lr.slice(s![.., top..top + th, left..left + tw]).to_owned();
            let out = model.super_resolve(&patch)?;
            let region = s![.., top * s..(top + th) * s, left * s..(left + tw) * s];
            let mut a = acc.slice_mut(region);
            a += &out;
            hits.slice_mut(region).mapv_inplace(|v| v + 1.0);
        }
    }
    let hits = hits.index_axis(Axis(0), 0).to_owned();
    for mut plane in acc.axis_iter_mut(Axis(0)) {
        plane /= &hits;
    }
    Ok(acc)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub tile: Option<TileSpec>,
    /// Directory for side-by-side `bicubic | model | HR` PNGs.
    pub comparison_dir: Option<PathBuf>,
    /// Centre-crop side (HR pixels) of the comparison panels.
    pub comparison_crop: Option<usize>,
}

fn centre_crop(img: &Image, side: Option<usize>) -> Image {
    let (_, h, w) = img.dim();
    match side {
        Some(n) if n < h || n < w => {
            let (ch, cw) = (n.min(h), n.min(w));
            let (t, l) = ((h - ch) / 2, (w - cw) / 2);
            img.slice(s![.., t..t + ch, l..l + cw]).to_owned()
        }
        _ => img.clone(),
    }
}

/// Whole-image (or tiled) inference over every pair of `dataset`, clamped
/// to `[0, 1]`, scored with `shave = scale`.
pub fn evaluate<M: SuperResolver + ?Sized>(
    model: &M,
    dataset: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let scale = model.scale();
    if scale != dataset.scale {
        return Err(Error::invalid(format!(
            "model scale x{scale} does not match dataset scale x{}",
            dataset.scale
        )));
    }
    let missing: Vec<PathBuf> = dataset
        .entries
        .iter()
        .flat_map(|e| {
            let lr = e.lr.clone().unwrap_or_else(|| dataset.lr_dir().join(format!("{}.png", e.name)));
            [e.hr.clone(), lr]
        })
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let pair = dataset.load(i)?.to_pair();
        let start = Instant::now();
        let sr = match opts.tile {
            Some(t) => tiled_super_resolve(model, &pair.lr, t)?,
            None => model.super_resolve(&pair.lr)?,
        };
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        let sr = sr.mapv(|v| v.clamp(0.0, 1.0));
        let psnr = psnr_y(&sr, &pair.hr, scale)?;
        let ssim = ssim_y(&sr, &pair.hr, scale)?;
        let name = dataset.entries[i].name.clone();
        if let Some(dir) = &opts.comparison_dir {
            let (_, h, w) = pair.hr.dim();
            let bic = bicubic_resize(&pair.lr, h, w)?;
            let panels: Vec<Image> = [&bic, &sr, &pair.hr]
                .iter()
                .map(|p| centre_crop(p, opts.comparison_crop))
                .collect();
            let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
            let strip = concatenate(Axis(2), &views).map_err(|e| Error::invalid(e.to_string()))?;
            save_png(&strip, &dir.join(format!("{name}_x{scale}_compare.png")))?;
        }
        rows.push(ImageMetrics {
            name,
            psnr,
            ssim,
            elapsed_ms,
        });
    }
    let dataset_name = format!("{}/{}", dataset.root.display(), dataset.split);
    let mut report = MetricsReport::new(dataset_name, scale, device_description(), opts.tile, rows);
    report.parameters = model.parameter_count();
    report.flops = model.flops_1280x720();
    Ok(report)
}

/// One warm-up forward, then `n_runs` serial timed forwards on uniform
/// random `3×h×w` inputs.
pub fn time_inference<M: SuperResolver + ?Sized>(
    model: &M,
    h: usize,
    w: usize,
    n_runs: usize,
    seed: u64,
) -> Result<TimingReport> {
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = || Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>());
    model.super_resolve(&input())?;
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let x = input();
        let start = Instant::now();
        let out = model.super_resolve(&x)?;
        runs.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(TimingReport::from_runs(h, w, runs, peak_rss_bytes()))
}
