//! Training: composite L1 + frequency loss, cosine-annealed Adam, seeded
//! patch batches, periodic validation and checkpoints.
//!
//! Every sample of every batch draws from its own generator seeded by
//! `(train.seed, iteration, slot)`, so batches are identical whether they
//! are assembled serially or by parallel loader threads.

mod adam;
pub mod loss;

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    fft_with_grad, l1_with_grad, loss_fft, loss_l1, total_loss, total_loss_with_grad,
    FftLossKind, LossParts,
};

use crate::blocks::{to_array3, to_tensor};
use crate::checkpoint;
use crate::config::RunDirs;
use crate::data::{SampleInfo, SrPair, StoredPair};
use crate::error::{Error, Result};
use crate::eval::psnr_y;
use crate::eval::report::num;
use crate::model::SsiuModel;
use crate::nn::{Graph, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr_final + ½(lr_init − lr_final)(1 + cos(π·it/total_iters))`.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_lr: usize,
    pub total_iters: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub schedule: Schedule,
    /// Weight of the frequency loss.
    pub lambda_f: f64,
    pub fft_loss: FftLossKind,
    pub adam: AdamConfig,
    /// Global gradient-norm limit; `0` disables clipping.
    pub grad_clip: f64,
    /// Seed of patch sampling and augmentation.
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Batch-assembly threads; ignored in deterministic mode.
    pub loader_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 40,
            patch_lr: 64,
            total_iters: 500_000,
            lr_init: 1e-3,
            lr_final: 1e-6,
            schedule: Schedule::Cosine,
            lambda_f: 0.01,
            fft_loss: FftLossKind::Complex,
            adam: AdamConfig::default(),
            grad_clip: 0.0,
            seed: 0,
            checkpoint_every: 5000,
            log_every: 100,
            loader_workers: 2,
        }
    }
}

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: format!("train.{field}"),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be positive"));
        }
        if self.patch_lr == 0 {
            return Err(field_err("patch_lr", "must be positive"));
        }
        if self.total_iters == 0 {
            return Err(field_err("total_iters", "must be positive"));
        }
        if !(self.lr_final > 0.0 && self.lr_final.is_finite()) {
            return Err(field_err("lr_final", "must be positive"));
        }
        if !(self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return Err(field_err("lr_init", "must be >= lr_final"));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(field_err("lambda_f", "must be >= 0"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(field_err("adam.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(field_err("adam.beta2", "must be in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(field_err("adam.eps", "must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(field_err("grad_clip", "must be >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(field_err("checkpoint_every", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(field_err("log_every", "must be positive"));
        }
        Ok(())
    }
}

/// Learning rate before update `iter` (`0 ≤ iter ≤ total_iters`).
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::invalid(format!(
            "iteration {iter} beyond total_iters {}",
            cfg.total_iters
        )));
    }
    let t = iter as f64 / cfg.total_iters as f64;
    Ok(match cfg.schedule {
        Schedule::Cosine => {
            cfg.lr_final
                + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, iteration: usize, slot: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(iteration as u64)) ^ slot as u64)
}

/// Training and held-out pairs.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<StoredPair>,
    pub val: Vec<StoredPair>,
}

fn draw_sample(data: &[StoredPair], cfg: &TrainConfig, iteration: usize, slot: usize) -> Result<(SrPair, SampleInfo)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, iteration, slot));
    let image = rng.gen_range(0..data.len());
    let (pair, (top, left), augmentation) = data[image].sample_with_origin(cfg.patch_lr, &mut rng)?;
    Ok((
        pair,
        SampleInfo {
            image,
            top,
            left,
            augmentation,
        },
    ))
}

/// The `batch_size` samples of update `iteration`.
pub fn assemble_batch(
    data: &[StoredPair],
    cfg: &TrainConfig,
    iteration: usize,
    workers: usize,
) -> Result<Vec<(SrPair, SampleInfo)>> {
    let n = cfg.batch_size;
    if workers <= 1 || n == 1 {
        return (0..n).map(|b| draw_sample(data, cfg, iteration, b)).collect();
    }
    let workers = workers.min(n);
    let mut slots: Vec<Option<Result<(SrPair, SampleInfo)>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|t| {
                scope.spawn(move || {
                    (t..n)
                        .step_by(workers)
                        .map(|b| (b, draw_sample(data, cfg, iteration, b)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (b, r) in h.join().expect("loader thread panicked") {
                slots[b] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn sample_gradients(model: &SsiuModel, pair: &SrPair, cfg: &TrainConfig) -> Result<(LossParts, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new(&model.params);
    let y = tape.input(to_tensor(&pair.lr));
    let out = model.forward_graph(&mut tape, &y);
    let pred = to_array3(tape.value(&out).clone());
    let (p, g) = total_loss_with_grad(&pred, &pair.hr, cfg.lambda_f, cfg.fft_loss)?;
    let root = tape.scalar_loss(&out, p.total, g.into_dyn());
    let tg = tape.backward(&root);
    let grads = model.params.ids().map(|id| tg.of_param(id).cloned()).collect();
    Ok((p, grads))
}

/// Batch-mean loss and its gradient for every parameter tensor (ordered
/// like `model.params.ids()`). Samples are differentiated on up to
/// `threads` threads and reduced in sample order, so the result does not
/// depend on `threads`.
pub fn batch_gradients(
    model: &SsiuModel,
    batch: &[SrPair],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<(LossParts, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
    let mut parts = LossParts {
        total: 0.0,
        l1: 0.0,
        fft: 0.0,
    };
    let mut add = |(p, g): (LossParts, Vec<Option<Tensor>>)| {
        parts.total += p.total * inv;
        parts.l1 += p.l1 * inv;
        parts.fft += p.fft * inv;
        for (acc, d) in grads.iter_mut().zip(g) {
            if let Some(d) = d {
                acc.scaled_add(inv, &d);
            }
        }
    };
    let threads = threads.clamp(1, batch.len());
    if threads == 1 {
        for pair in batch {
            add(sample_gradients(model, pair, cfg)?);
        }
    } else {
        let chunk = batch.len().div_ceil(threads);
        let results: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|p| sample_gradients(model, p, cfg)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient thread panicked")).collect()
        });
        for r in results {
            for sample in r? {
                add(sample);
            }
        }
    }
    Ok((parts, grads))
}

fn clip_global_norm(grads: &mut [Tensor], limit: f64) {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
}

/// Mean luminance PSNR (shave = scale) over whole validation images.
pub fn validation_psnr(model: &SsiuModel, val: &[StoredPair]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in val {
        let pair = p.to_pair();
        let sr = model.forward(&pair.lr)?.mapv(|v| v.clamp(0.0, 1.0));
        total += psnr_y(&sr, &pair.hr, pair.scale)?;
    }
    Ok(Some(total / val.len() as f64))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed updates.
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub fft: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        json!({
            "iteration": self.iteration,
            "loss": num(self.loss),
            "l1": num(self.l1),
            "fft": num(self.fft),
            "lr": num(self.lr),
            "val_psnr": self.val_psnr.map(num),
        })
        .to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints and logs go; nothing is written when absent.
    pub dirs: Option<&'a RunDirs>,
    /// Forces serial batch assembly.
    pub deterministic: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// One record per update.
    pub history: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_failure(
    dirs: Option<&RunDirs>,
    iteration: usize,
    lr: f64,
    parts: &LossParts,
    batch: &[(SrPair, SampleInfo)],
    data: &[StoredPair],
) -> String {
    let ids: Vec<String> = batch
        .iter()
        .map(|(_, s)| format!("{}@({},{})", data[s.image].name, s.top, s.left))
        .collect();
    let message = format!(
        "non-finite loss {} (l1 {}, fft {}) at lr {lr:e}; batch [{}]",
        parts.total,
        parts.l1,
        parts.fft,
        ids.join(", ")
    );
    if let Some(d) = dirs {
        let dump = json!({
            "iteration": iteration,
            "lr": lr,
            "loss": num(parts.total),
            "l1": num(parts.l1),
            "fft": num(parts.fft),
            "batch": batch.iter().map(|(_, s)| json!({
                "image": s.image,
                "name": data[s.image].name,
                "top": s.top,
                "left": s.left,
                "flip": s.augmentation.flip,
                "rotations": s.augmentation.rotations,
            })).collect::<Vec<_>>(),
        });
        let path = d.logs.join("failure.json");
        if let Err(e) = std::fs::write(&path, format!("{dump:#}\n")) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
    message
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:07}.ckpt")
}

/// Runs `cfg.total_iters` Adam updates on `model`.
pub fn train(
    model: &mut SsiuModel,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for p in data.train.iter().chain(&data.val) {
        if p.scale != model.scale() {
            return Err(Error::invalid(format!(
                "{} is a x{} pair but the model is x{}",
                p.name,
                p.scale,
                model.scale()
            )));
        }
    }
    if let Some(p) = data
        .train
        .iter()
        .find(|p| p.lr.height < cfg.patch_lr || p.lr.width < cfg.patch_lr)
    {
        return Err(Error::invalid(format!(
            "{} LR {}x{} is smaller than patch_lr {}",
            p.name, p.lr.height, p.lr.width, cfg.patch_lr
        )));
    }
    let workers = if opts.deterministic { 1 } else { cfg.loader_workers };
    let grad_threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut log_file = match opts.dirs {
        Some(d) => {
            let path = d.logs.join("metrics.jsonl");
            Some(File::create(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };
    let mut adam = Adam::new(cfg.adam.clone(), &model.params);
    let mut outcome = TrainOutcome::default();
    for it in 0..cfg.total_iters {
        let lr = lr_at(it, cfg)?;
        let batch = assemble_batch(&data.train, cfg, it, workers)?;
        let pairs: Vec<SrPair> = batch.iter().map(|(p, _)| p.clone()).collect();
        let (parts, mut grads) = batch_gradients(model, &pairs, cfg, grad_threads)?;
        let finite_grads = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !parts.total.is_finite() || !finite_grads {
            let message = write_failure(opts.dirs, it + 1, lr, &parts, &batch, &data.train);
            return Err(Error::NumericalFailure {
                iteration: it + 1,
                message,
            });
        }
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        adam.update(&mut model.params, &grads, lr);
        let step = it + 1;
        let mut record = MetricsRecord {
            iteration: step,
            loss: parts.total,
            l1: parts.l1,
            fft: parts.fft,
            lr,
            val_psnr: None,
        };
        if step % cfg.checkpoint_every == 0 || step == cfg.total_iters {
            record.val_psnr = validation_psnr(model, &data.val)?;
            if let Some(d) = opts.dirs {
                let path = d.checkpoints.join(checkpoint_name(step));
                checkpoint::save(model, &path)?;
                outcome.checkpoints.push(path);
            }
        }
        if let Some(f) = log_file.as_mut() {
            if step == 1 || step % cfg.log_every == 0 || record.val_psnr.is_some() {
                writeln!(f, "{}", record.to_json()).map_err(|e| Error::io("metrics.jsonl", e))?;
            }
        }
        log::debug!("iter {step} loss {:.6} lr {lr:.3e}", parts.total);
        outcome.history.push(record);
    }
    if let Some(d) = opts.dirs {
        let last = d.checkpoints.join("final.ckpt");
        checkpoint::save(model, &last)?;
        outcome.checkpoints.push(last);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests;
