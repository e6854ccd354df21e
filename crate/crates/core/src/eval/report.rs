use serde_json::{json, Value};

/// Tiled inference geometry in LR pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub tile: usize,
    pub overlap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub scale: usize,
    pub device: String,
    pub tile: Option<TileSpec>,
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms: f64,
    pub parameters: Option<usize>,
    /// FLOPs for a 1280×720 output.
    pub flops: Option<u64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// JSON has no infinities; they are written as strings.
pub(crate) fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricsReport {
    pub fn new(
        dataset: impl Into<String>,
        scale: usize,
        device: impl Into<String>,
        tile: Option<TileSpec>,
        images: Vec<ImageMetrics>,
    ) -> Self {
        let mean_psnr = mean(images.iter().map(|r| r.psnr));
        let mean_ssim = mean(images.iter().map(|r| r.ssim));
        let mean_ms = mean(images.iter().map(|r| r.elapsed_ms));
        MetricsReport {
            dataset: dataset.into(),
            scale,
            device: device.into(),
            tile,
            images,
            mean_psnr,
            mean_ssim,
            mean_ms,
            parameters: None,
            flops: None,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("dataset {}  x{}  device {}\n", self.dataset, self.scale, self.device);
        if let Some(t) = self.tile {
            s.push_str(&format!("TILED inference: tile {} overlap {} (LR pixels)\n", t.tile, t.overlap));
        }
        s.push_str(&format!("{:<24} {:>10} {:>8} {:>10}\n", "image", "PSNR(Y)", "SSIM(Y)", "ms"));
        for r in &self.images {
            s.push_str(&format!(
                "{:<24} {:>10} {:>8.4} {:>10.1}\n",
                r.name,
                fmt_psnr(r.psnr),
                r.ssim,
                r.elapsed_ms
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>10} {:>8.4} {:>10.1}\n",
            "mean",
            fmt_psnr(self.mean_psnr),
            self.mean_ssim,
            self.mean_ms
        ));
        if let Some(p) = self.parameters {
            s.push_str(&format!("parameters {p} ({:.2} K)\n", p as f64 / 1e3));
        }
        if let Some(f) = self.flops {
            s.push_str(&format!("FLOPs at 1280x720 output {:.2} G\n", f as f64 / 1e9));
        }
        s
    }

    /// One `image` record per row followed by one `summary` record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.images {
            let v = json!({
                "kind": "image",
                "dataset": self.dataset,
                "name": r.name,
                "psnr": num(r.psnr),
                "ssim": num(r.ssim),
                "elapsed_ms": num(r.elapsed_ms),
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = json!({
            "kind": "summary",
            "dataset": self.dataset,
            "scale": self.scale,
            "device": self.device,
            "tiled": self.tile.map(|t| json!({"tile": t.tile, "overlap": t.overlap})),
            "images": self.images.len(),
            "mean_psnr": num(self.mean_psnr),
            "mean_ssim": num(self.mean_ssim),
            "mean_ms": num(self.mean_ms),
            "parameters": self.parameters,
            "flops_1280x720": self.flops,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub height: usize,
    pub width: usize,
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Peak resident set size of the process (`VmHWM`), where available.
    pub peak_rss_bytes: Option<u64>,
}

impl TimingReport {
    pub fn from_runs(height: usize, width: usize, runs_ms: Vec<f64>, peak_rss_bytes: Option<u64>) -> Self {
        let n = runs_ms.len() as f64;
        let mean_ms = runs_ms.iter().sum::<f64>() / n;
        let std_ms = if runs_ms.len() > 1 {
            (runs_ms.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        TimingReport {
            height,
            width,
            runs_ms,
            mean_ms,
            std_ms,
            peak_rss_bytes,
        }
    }

    pub fn to_text(&self) -> String {
        let mem = match self.peak_rss_bytes {
            Some(b) => format!("{:.1} MiB peak RSS", b as f64 / (1024.0 * 1024.0)),
            None => "peak memory unavailable".into(),
        };
        format!(
            "{}x{} input: {:.2} ms mean, {:.2} ms std over {} runs; {}\n",
            self.width,
            self.height,
            self.mean_ms,
            self.std_ms,
            self.runs_ms.len(),
            mem
        )
    }
}
