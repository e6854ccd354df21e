//! End-to-end acceptance suite. Every criterion prints one line,
//! `PASS`, `FAIL` or `BLOCKED`, followed by its measurement; the test fails
//! if any criterion fails. Blocked criteria lack external inputs (see
//! `SSIU_DESK_DATA`).

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssiu_core::blocks::{AttentionMode, Esam, EsamConfig, MoeFs, MoeFsConfig, Msgm, MsgmConfig};
use ssiu_core::config::RunConfig;
use ssiu_core::data::{bicubic_resize, bilinear_resize, synthetic_scene, write_synthetic_split};
use ssiu_core::eval::{psnr_y, ssim_y};
use ssiu_core::hqs::suite::run_suite;
use ssiu_core::model::estimate_flops;
use ssiu_core::nn::gradcheck::{check_gradients, GradCheckOptions, GraphFn, L1Target, WeightedSum};
use ssiu_core::nn::{Graph, ParamStore, Tensor};
use ssiu_core::{SsiuConfig, SsiuModel};

/// Root holding `train/HR` (DIV2K training images) and `Set5/HR`.
const DESK_DATA_VAR: &str = "SSIU_DESK_DATA";

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match v {
        Verdict::Pass(d) => ("PASS", d, true),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Blocked(d) => ("BLOCKED", d, true),
    };
    // Written to the raw handle so the lines survive output capture.
    let _ = writeln!(std::io::stderr(), "[{tag}] {id} {name} ({secs:.1} s): {detail}");
    ok
}

fn verdict(o: Outcome) -> Verdict {
    match o {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let report = run_suite(0, 20, 1e-4);
    let elapsed = start.elapsed();
    let worst = report.rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let passed = report.rows.iter().filter(|r| r.passed).count();
    check(
        report.rows.len() == 20 && report.all_passed() && elapsed < Duration::from_secs(10),
        format!("{passed}/20 instances within 1e-4, worst linf {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn randomize(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
}

struct MsgmFn(Msgm);
impl GraphFn for MsgmFn {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
        self.0.forward(g, &x[0])
    }
}

struct EsamFn(Esam);
impl GraphFn for EsamFn {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
        self.0.forward(g, &x[0])
    }
}

struct MoeFn(MoeFs);
impl GraphFn for MoeFn {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
        self.0.forward(g, x)
    }
}

struct ModelFn<'a>(&'a SsiuModel);
impl GraphFn for ModelFn<'_> {
    fn eval<G: Graph>(&self, g: &mut G, x: &[G::V]) -> G::V {
        self.0.forward_graph(g, &x[0])
    }
}

fn small_esam(channels: usize) -> EsamConfig {
    EsamConfig {
        channels,
        pool_kernel: 2,
        pool_stride: 2,
        block_size: 4,
        overlap: 2,
        num_heads: 2,
    }
}

fn tiny_model_config(scale: usize) -> SsiuConfig {
    let mut c = SsiuConfig::with_scale(scale);
    c.channels = 8;
    c.num_stages = 2;
    c.moe_taps = vec![1, 2];
    c.msgm.hidden_channels = 8;
    c.esam.block_size = 4;
    c.esam.num_heads = 2;
    c
}

/// At least 200 coordinates per module, 95% within relative error 1e-4
/// (1e-3 end to end, where the L1 kink sits closer to sampled points).
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |what: &str, r: ssiu_core::nn::gradcheck::GradCheckReport| {
        ok &= r.checked() >= 200 && r.pass_rate() >= 0.95;
        lines.push(format!("{what} {:.1}% of {}", 100.0 * r.pass_rate(), r.checked()));
    };

    let mut store = ParamStore::new();
    let cfg = MsgmConfig {
        channels: 4,
        hidden_channels: 6,
        dw_kernel: 3,
    };
    let m = Msgm::new(&mut store, "m", &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    randomize(&mut store, 2);
    record(
        "msgm",
        check_gradients(&MsgmFn(m), &WeightedSum { seed: 3 }, &store, &[random(4, &[4, 6, 7])], &opts),
    );

    for (mode, shape) in [(AttentionMode::Sparse, [4, 9, 11]), (AttentionMode::Dense, [4, 6, 7])] {
        let mut store = ParamStore::new();
        let e = Esam::new(&mut store, "e", &small_esam(4), mode, &mut ChaCha8Rng::seed_from_u64(5));
        randomize(&mut store, 6);
        record(
            &format!("esam-{mode:?}").to_lowercase(),
            check_gradients(&EsamFn(e), &WeightedSum { seed: 7 }, &store, &[random(8, &shape)], &opts),
        );
    }

    let mut store = ParamStore::new();
    let cfg = MoeFsConfig {
        channels: 4,
        num_experts: 3,
    };
    let m = MoeFs::new(&mut store, "moe", &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    randomize(&mut store, 10);
    let inputs: Vec<Tensor> = (0..3).map(|i| random(11 + i, &[4, 5, 5])).collect();
    record("moe-fs", check_gradients(&MoeFn(m), &WeightedSum { seed: 12 }, &store, &inputs, &opts));

    let mut model = SsiuModel::build(&tiny_model_config(2), 18).unwrap();
    randomize(&mut model.params, 19);
    let x = random(20, &[3, 8, 8]) * 0.4 + 0.5;
    let target = random(21, &[3, 16, 16]) * 0.5;
    let e2e = GradCheckOptions {
        rel_tol: 1e-3,
        ..opts
    };
    record(
        "end-to-end",
        check_gradients(&ModelFn(&model), &L1Target(target), &model.params, &[x], &e2e),
    );

    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    check(ok, format!("{}; {:.1} s", lines.join(", "), elapsed.as_secs_f64()))
}

fn normalization() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let esam = Esam::new(&mut store, "e", &small_esam(8), AttentionMode::Sparse, &mut rng);
    let moe = MoeFs::new(
        &mut store,
        "moe",
        &MoeFsConfig {
            channels: 8,
            num_experts: 3,
        },
        &mut rng,
    );
    randomize(&mut store, 31);
    let (mut worst_row, mut worst_gate, mut rows, mut pixels) = (0.0f64, 0.0f64, 0usize, 0usize);
    for i in 0..100u64 {
        let (h, w) = (8 + (i as usize % 7), 9 + (i as usize % 5));
        let amp = 1.0 + (i % 4) as f64 * 3.0;
        let x = (random(100 + i, &[8, h, w]) * amp).into_dimensionality().unwrap();
        let (_, probe) = esam.apply_traced(&store, &x).unwrap();
        for row in probe.rows() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
        let alphas: Vec<Array3<f64>> = (0..3)
            .map(|k| (random(1000 + 3 * i + k, &[8, h, w]) * amp).into_dimensionality().unwrap())
            .collect();
        let (_, gates) = moe.apply_traced(&store, &alphas).unwrap();
        let total = gates.iter().fold(Array3::<f64>::zeros(gates[0].raw_dim()), |a, g| a + g);
        for v in total.iter() {
            worst_gate = worst_gate.max((v - 1.0).abs());
            pixels += 1;
        }
    }
    check(
        worst_row < 1e-6 && worst_gate < 1e-6,
        format!(
            "100 inputs: {rows} attention rows (max |sum-1| {worst_row:.1e}), {pixels} gate pixels (max |sum-1| {worst_gate:.1e})"
        ),
    )
}

fn zero_network_identity() -> Outcome {
    let mut worst = 0.0f64;
    for (i, scale) in [2usize, 3, 4, 4, 2, 3, 4, 2, 3, 4].into_iter().enumerate() {
        let mut model = SsiuModel::build(&SsiuConfig::with_scale(scale), i as u64).unwrap();
        model.params.fill_zero();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let (h, w) = (rng.gen_range(6..20), rng.gen_range(6..20));
        let x = Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>());
        let out = model.forward(&x).unwrap();
        let reference = bilinear_resize(&x, h * scale, w * scale).unwrap();
        let diff = (&out - &reference).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(diff);
    }
    check(worst == 0.0, format!("10 images at x2/x3/x4, max |SR - bilinear| = {worst:e}"))
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn parameter_budget() -> Outcome {
    let x4 = SsiuModel::build(&SsiuConfig::default(), 0).unwrap().count_parameters() as f64;
    let x2 = SsiuModel::build(&SsiuConfig::with_scale(2), 0).unwrap().count_parameters() as f64;
    let flops = estimate_flops(&SsiuConfig::default(), 720, 1280).unwrap().total as f64;
    let committed_x4 = RunConfig::load(&config_path("x4.toml"), &[]).unwrap().model;
    let committed_x2 = RunConfig::load(&config_path("x2.toml"), &[]).unwrap().model;
    let committed = committed_x4 == SsiuConfig::default() && committed_x2 == SsiuConfig::with_scale(2);
    check(
        (x4 / 794e3 - 1.0).abs() <= 0.10
            && (x2 / 778e3 - 1.0).abs() <= 0.10
            && (flops / 49e9 - 1.0).abs() <= 0.15
            && committed,
        format!(
            "x4 {:.2} K ({:+.1}%), x2 {:.2} K ({:+.1}%), x4 1280x720 {:.2} G ({:+.1}%), committed configs match defaults: {committed}",
            x4 / 1e3,
            100.0 * (x4 / 794e3 - 1.0),
            x2 / 1e3,
            100.0 * (x2 / 778e3 - 1.0),
            flops / 1e9,
            100.0 * (flops / 49e9 - 1.0)
        ),
    )
}

fn ablation() -> Outcome {
    let sparse = SsiuConfig::default();
    let dense = SsiuConfig {
        attention_mode: AttentionMode::Dense,
        ..sparse.clone()
    };
    let no_moe = SsiuConfig {
        use_moe_fs: false,
        ..sparse.clone()
    };
    let s = estimate_flops(&sparse, 720, 1280).unwrap();
    let d = estimate_flops(&dense, 720, 1280).unwrap();
    let reduction = 1.0 - s.attention as f64 / d.attention as f64;
    let added = sparse.param_count() as f64 / no_moe.param_count() as f64 - 1.0;
    check(
        d.total > s.total && reduction >= 0.05 && added > 0.0 && added < 0.03,
        format!(
            "total {:.2} G dense vs {:.2} G sparse, attention reduced {:.1}%, MoE-FS adds {:.2}% parameters",
            d.gflops(),
            s.gflops(),
            100.0 * reduction,
            100.0 * added
        ),
    )
}

fn ssiu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssiu"))
        .args(args)
        .env_remove("SSIU_DEVICE")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary_psnr(report: &Path) -> f64 {
    let text = fs::read_to_string(report).unwrap();
    let line = text.lines().find(|l| l.contains("\"kind\":\"summary\"")).expect("summary line");
    let rest = line.split("\"mean_psnr\":").nth(1).unwrap();
    rest.split(',').next().unwrap().trim_matches('"').parse().unwrap()
}

fn desk_training() -> Verdict {
    let Some(root) = std::env::var_os(DESK_DATA_VAR).map(PathBuf::from) else {
        return Verdict::Blocked(format!(
            "needs {DESK_DATA_VAR} pointing at a root with train/HR (DIV2K) and Set5/HR; not set"
        ));
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut psnr = Vec::new();
    let start = Instant::now();
    for (label, lambda) in [("fft", "0.01"), ("nofft", "0")] {
        let run = tmp.path().join(label);
        let o = ssiu(&[
            "train",
            "--config",
            s(&config_path("desk_x2.toml")),
            "--set",
            &format!("data.root={}", s(&root)),
            "--set",
            &format!("output_dir={}", s(&run)),
            "--set",
            &format!("train.lambda_f={lambda}"),
        ]);
        if !o.status.success() {
            return Verdict::Fail(format!("{label} training failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let report = tmp.path().join(format!("{label}.jsonl"));
        let o = ssiu(&[
            "eval",
            "--checkpoint",
            s(&run.join("checkpoints/final.ckpt")),
            "--dataset",
            s(&root),
            "--split",
            "Set5",
            "--report",
            s(&report),
        ]);
        if !o.status.success() {
            return Verdict::Fail(format!("{label} eval failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        psnr.push(summary_psnr(&report));
    }
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    let report = tmp.path().join("bicubic.jsonl");
    let o = ssiu(&[
        "eval", "--baseline", "bicubic", "--scale", "2", "--dataset", s(&root), "--split", "Set5", "--report", s(&report),
    ]);
    if !o.status.success() {
        return Verdict::Fail(format!("bicubic eval failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let bicubic = summary_psnr(&report);
    let (fft, nofft) = (psnr[0], psnr[1]);
    verdict(check(
        fft - bicubic >= 0.8 && fft - nofft >= -0.05 && hours < 12.0,
        format!(
            "Set5 x2: FFT-loss {fft:.3} dB, no FFT-loss {nofft:.3} dB, bicubic {bicubic:.3} dB; {hours:.2} h per two runs"
        ),
    ))
}

/// Straight per-pixel luma.
fn luma(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    let mut y = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            y[[i, j]] = (16.0 + 65.481 * img[[0, i, j]] + 128.553 * img[[1, i, j]] + 24.966 * img[[2, i, j]]) / 255.0;
        }
    }
    y
}

fn loop_psnr(a: &Array3<f64>, b: &Array3<f64>, shave: usize) -> f64 {
    let (ya, yb) = (luma(a), luma(b));
    let (h, w) = ya.dim();
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in shave..h - shave {
        for j in shave..w - shave {
            let d = ya[[i, j]] - yb[[i, j]];
            sum += d * d;
            n += 1.0;
        }
    }
    10.0 * (n / sum).log10()
}

/// Windowed statistics computed directly with a 2-D 11×11 Gaussian.
fn loop_ssim(a: &Array3<f64>, b: &Array3<f64>, shave: usize) -> f64 {
    let (ya, yb) = (luma(a), luma(b));
    let (h, w) = ya.dim();
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in kernel.iter_mut().enumerate() {
        for (v, k) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *k = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0.0;
    for i in shave..h - shave - 10 {
        for j in shave..w - shave - 10 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let k = kernel[u][v] / total;
                    let (p, q) = (ya[[i + u, j + v]], yb[[i + u, j + v]]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn metric_trust() -> Outcome {
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for i in 0..10u64 {
        let (h, w) = (40 + 4 * i as usize, 36 + 6 * i as usize);
        let hr = synthetic_scene(60 + i, h, w);
        let scale = 2 + (i as usize % 3);
        let pred = if i % 2 == 0 {
            let lr = bicubic_resize(&hr, h / scale, w / scale).unwrap();
            bicubic_resize(&lr, h, w).unwrap()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(70 + i);
            hr.mapv(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
        };
        dp = dp.max((psnr_y(&pred, &hr, scale).unwrap() - loop_psnr(&pred, &hr, scale)).abs());
        ds = ds.max((ssim_y(&pred, &hr, scale).unwrap() - loop_ssim(&pred, &hr, scale)).abs());
    }
    check(
        dp <= 0.01 && ds <= 1e-4,
        format!("10 fixture pairs: max PSNR gap {dp:.2e} dB, max SSIM gap {ds:.2e}"),
    )
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_split(&data, "train", 4, 48, 48, 1).unwrap();
    write_synthetic_split(&data, "val", 1, 32, 32, 2).unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = ssiu(&[
            "train",
            "--config",
            s(&config_path("toy.toml")),
            "--set",
            &format!("data.root={}", s(&data)),
            "--set",
            &format!("output_dir={}", s(&out)),
            "--set",
            "train.loader_workers=4",
            "--deterministic",
        ]);
        if !o.status.success() {
            return Err(format!("run {run} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let mut ckpts: Vec<(String, Vec<u8>)> = fs::read_dir(out.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        ckpts.sort();
        files.push(ckpts);
    }
    let n = files[0].len();
    check(
        n >= 2 && files[0] == files[1],
        format!("{n} checkpoints per run, byte-identical: {}", files[0] == files[1]),
    )
}

#[test]
fn acceptance() {
    let results = [
        run(1, "oracle agreement", || verdict(oracle_agreement())),
        run(2, "gradient fidelity", || verdict(gradient_fidelity())),
        run(3, "normalization invariants", || verdict(normalization())),
        run(4, "zero-network identity", || verdict(zero_network_identity())),
        run(5, "parameter and FLOP budget", || verdict(parameter_budget())),
        run(6, "ablation directions", || verdict(ablation())),
        run(7, "desk-scale training", desk_training),
        run(8, "metric trust", || verdict(metric_trust())),
        run(9, "reproducibility", || verdict(reproducibility())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
