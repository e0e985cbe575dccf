//! Acceptance criteria, one status line each.
//!
//! `cargo test -p longhorn-core --test acceptance` runs the fast criteria.
//! Criteria 9, 11 and 12 train full models for hours; pass `-- --full` or
//! set `LONGHORN_ACCEPT_FULL=1` to include them. Numeric arguments select
//! criteria, e.g. `-- 5 8`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use longhorn_core::autodiff::ParamRegistry;
use longhorn_core::baselines::{griffin_step, gla_step, la_step, retnet_step};
use longhorn_core::kernel::{KernelConfig, KernelKind};
use longhorn_core::longhorn::{make_scan_elements, step_exact, LonghornParams};
use longhorn_core::model::{generate_full_recompute, Model, ModelConfig};
use longhorn_core::scan::scan;
use longhorn_core::tasks::{extrapolation_sets, LmCorpus, MqarSpec, BYTE_VOCAB};
use longhorn_core::train::{evaluate, EvalResult, Task, TrainConfig, Trainer, MQAR_LR_GRID};
use longhorn_core::{HasParams, Precision, Scalar, ScanElement, ScanMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Measured but not gating on this machine.
    Info,
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
            Status::Skipped => "SKIP",
        })
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    /// `ok` must hold and the criterion must finish within `budget`.
    fn timed(ok: bool, elapsed: Duration, budget: Duration, detail: String) -> Self {
        let in_time = elapsed <= budget;
        let mut detail = format!("{detail}; {:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
        if !in_time {
            detail.push_str(" (over budget)");
        }
        Outcome::check(ok && in_time, detail)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    expensive: bool,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "closed-form optimality", expensive: false, run: optimality },
    Criterion { id: 2, name: "contraction identity", expensive: false, run: contraction },
    Criterion { id: 3, name: "Sherman-Morrison consistency", expensive: false, run: sherman_morrison },
    Criterion { id: 4, name: "transition stability", expensive: false, run: stability },
    Criterion { id: 5, name: "scan equivalence", expensive: false, run: scan_equivalence },
    Criterion { id: 6, name: "model gradient check", expensive: false, run: gradient_check },
    Criterion { id: 7, name: "objective consistency", expensive: false, run: objective_consistency },
    Criterion { id: 8, name: "decode equals recompute", expensive: false, run: decode_equivalence },
    Criterion { id: 9, name: "MQAR recall", expensive: true, run: mqar_recall },
    Criterion { id: 10, name: "parameter economy", expensive: false, run: parameter_economy },
    Criterion { id: 11, name: "length extrapolation", expensive: true, run: length_extrapolation },
    Criterion { id: 12, name: "LM quality ordering", expensive: true, run: quality_ordering },
    Criterion { id: 13, name: "scan performance", expensive: false, run: scan_performance },
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in CRITERIA {
            println!("criterion_{:02}: test", c.id);
        }
        return ExitCode::SUCCESS;
    }
    let full = args.iter().any(|a| a == "--full")
        || std::env::var("LONGHORN_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();

    let mut failed = 0;
    for c in CRITERIA {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let out = if c.expensive && !full && !selected.contains(&c.id) {
            Outcome {
                status: Status::Skipped,
                detail: "multi-hour training run; pass --full to include".into(),
            }
        } else {
            (c.run)()
        };
        if out.status == Status::Fail {
            failed += 1;
        }
        println!("{} criterion {:>2} {:<30} {}", out.status, c.id, c.name, out.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------------------
// Draw helpers and test-side oracles

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.gen();
        if v > 0.0 {
            return v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `‖s − s_prev‖² + β(sᵀk − x)²`.
fn regression_loss(s: &[f64], s_prev: &[f64], k: &[f64], x: f64, beta: f64) -> f64 {
    let reg: f64 = s.iter().zip(s_prev).map(|(a, b)| (a - b).powi(2)).sum();
    reg + beta * (dot(s, k) - x).powi(2)
}

fn regression_grad(s: &[f64], s_prev: &[f64], k: &[f64], x: f64, beta: f64) -> Vec<f64> {
    let r = dot(s, k) - x;
    s.iter().zip(s_prev).zip(k).map(|((a, b), kj)| 2.0 * (a - b) + 2.0 * beta * r * kj).collect()
}

struct RegressionDraw {
    s_prev: Vec<f64>,
    k: Vec<f64>,
    x: f64,
    beta: f64,
}

fn regression_draw(rng: &mut ChaCha8Rng) -> RegressionDraw {
    let m = rng.gen_range(1..=64);
    RegressionDraw {
        s_prev: normal(m, rng),
        k: normal(m, rng),
        x: normal(1, rng)[0],
        beta: open_unit(rng),
    }
}

// ---------------------------------------------------------------------------
// 1–4: closed-form update

fn optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let (mut worst_grad, mut violations) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let d = regression_draw(&mut rng);
        let s = step_exact(&d.s_prev, &d.k, d.x, d.beta);
        worst_grad = worst_grad.max(inf_norm(&regression_grad(&s, &d.s_prev, &d.k, d.x, d.beta)));
        let at_s = regression_loss(&s, &d.s_prev, &d.k, d.x, d.beta);
        if at_s > regression_loss(&d.s_prev, &d.s_prev, &d.k, d.x, d.beta) {
            violations += 1;
        }
        for _ in 0..100 {
            let p: Vec<f64> = s.iter().map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
            if at_s > regression_loss(&p, &d.s_prev, &d.k, d.x, d.beta) {
                violations += 1;
            }
        }
    }
    Outcome::timed(
        worst_grad <= 1e-8 && violations == 0,
        start.elapsed(),
        Duration::from_secs(5),
        format!("max ‖∇L‖∞ {worst_grad:.2e} (tol 1e-8), {violations} points below the update out of 101000"),
    )
}

fn contraction() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = regression_draw(&mut rng);
        let s = step_exact(&d.s_prev, &d.k, d.x, d.beta);
        let after = (dot(&s, &d.k) - d.x).abs() * (1.0 + d.beta * dot(&d.k, &d.k));
        let before = (dot(&d.s_prev, &d.k) - d.x).abs();
        worst = worst.max(rel_err(after, before));
    }
    Outcome::timed(
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(1),
        format!("max rel error {worst:.2e} (tol 1e-10)"),
    )
}

fn sherman_morrison() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = regression_draw(&mut rng);
        let s = step_exact(&d.s_prev, &d.k, d.x, d.beta);
        let sk = dot(&s, &d.k);
        for j in 0..s.len() {
            let lhs = s[j] + d.beta * d.k[j] * sk;
            let rhs = d.s_prev[j] + d.beta * d.k[j] * d.x;
            worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }
    }
    Outcome::timed(
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(1),
        format!("max error {worst:.2e} (tol 1e-10)"),
    )
}

fn stability() -> Outcome {
    let start = Instant::now();
    let (d, m) = (16, 16);
    let steps = 1_000_000usize.div_ceil(d * m);
    let mut rng = rng(4);
    let params = LonghornParams::<f64>::init(&mut ParamRegistry::new(), "fuzz", d, m, None, &mut rng).unwrap();
    let mut x = Tensor::<f64>::randn(&[steps, d], 1.0, &mut rng);
    for t in 0..steps {
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        x.row_mut(t).iter_mut().for_each(|v| *v *= scale);
    }
    let elems = make_scan_elements(&x, &params).unwrap();
    let (mut lo, mut hi, mut bad) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for e in &elems {
        for &a in e.a.data() {
            if !(a > 0.0 && a <= 1.0) {
                bad += 1;
            }
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    Outcome::timed(
        bad == 0,
        start.elapsed(),
        Duration::from_secs(5),
        format!("{} entries in [{lo:.3e}, {hi}], {bad} outside (0,1]", steps * d * m),
    )
}

// ---------------------------------------------------------------------------
// 5: scan modes

fn max_state_diff<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).as_f64())
        .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

fn scan_disagreement<F: Scalar>(t_len: usize, d: usize, m: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let params = LonghornParams::<F>::init(&mut ParamRegistry::new(), "scan", d, m, None, &mut rng).unwrap();
    let x = Tensor::<F>::randn(&[t_len, d], 1.0, &mut rng);
    let elems: Vec<ScanElement<F>> = make_scan_elements(&x, &params).unwrap();
    let s0 = Tensor::zeros(&[d, m]);
    let seq = scan(&elems, &s0, ScanMode::Sequential).unwrap();
    let par = scan(&elems, &s0, ScanMode::Parallel).unwrap();
    let chunked = scan(&elems, &s0, ScanMode::Chunked(64)).unwrap();
    max_state_diff(&seq, &par).max(max_state_diff(&seq, &chunked))
}

fn scan_equivalence() -> Outcome {
    let start = Instant::now();
    let e64 = scan_disagreement::<f64>(4096, 64, 16, 5);
    let e32 = scan_disagreement::<f32>(4096, 64, 16, 5);
    Outcome::timed(
        e64 <= 1e-10 && e32 <= 1e-4,
        start.elapsed(),
        Duration::from_secs(30),
        format!("max-abs 64-bit {e64:.2e} (tol 1e-10), 32-bit {e32:.2e} (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 6: gradients

fn mean_cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / targets.len() as f64
}

fn nudge(model: &mut Model<f64>, slot: usize, i: usize, delta: f64) {
    let mut n = 0;
    model.visit_mut(&mut |p| {
        if n == slot {
            p.value.data_mut()[i] += delta;
        }
        n += 1;
    });
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab: 16,
        layers: 2,
        d_model: 8,
        state_dim: 4,
        context: 16,
        precision: Precision::F64,
        seed: 6,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::init(&cfg).unwrap();
    let mut rng = rng(6);
    let tokens: Vec<usize> = (0..16).map(|_| rng.gen_range(0..16)).collect();
    let targets: Vec<usize> = (0..16).map(|_| rng.gen_range(0..16)).collect();
    let mut grads = model.zero_grads();
    model
        .loss_and_grads(&tokens, &targets, &[1.0; 16], ScanMode::Parallel, &mut grads)
        .unwrap();

    let mut slots = Vec::new();
    model.visit(&mut |p| slots.push((p.id, p.value.len())));
    let h = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (slot, &(id, len)) in slots.iter().enumerate() {
        for i in 0..len {
            let mut loss_at = |delta: f64| {
                nudge(&mut model, slot, i, delta);
                let l = mean_cross_entropy(&model.forward(&tokens, ScanMode::Sequential).unwrap(), &targets);
                nudge(&mut model, slot, i, -delta);
                l
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            worst = worst.max(rel_err(grads.get(id).data()[i], numeric));
            count += 1;
        }
    }
    Outcome::timed(
        worst <= 1e-4,
        start.elapsed(),
        Duration::from_secs(120),
        format!("{count} entries in {} tensors, max rel error {worst:.2e} (tol 1e-4)", slots.len()),
    )
}

// ---------------------------------------------------------------------------
// 7: objectives from the update table

fn objective_consistency() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(7);
    let mut worst = [0.0f64; 5];
    for _ in 0..200 {
        let m = rng.gen_range(1..=64);
        let s_prev = normal(m, &mut rng);
        let k = normal(m, &mut rng);
        let x = normal(1, &mut rng)[0];
        let x_vec = normal(m, &mut rng);
        let beta = open_unit(&mut rng);
        let gamma = open_unit(&mut rng);
        let alpha: Vec<f64> = (0..m).map(|_| open_unit(&mut rng)).collect();
        let gate: Vec<f64> = (0..m).map(|_| open_unit(&mut rng)).collect();

        // ∇ of ‖s − s_prev‖² − 2⟨sᵀk, x⟩
        let s = la_step(&s_prev, &k, x);
        let g: Vec<f64> = (0..m).map(|j| 2.0 * (s[j] - s_prev[j]) - 2.0 * k[j] * x).collect();
        worst[0] = worst[0].max(inf_norm(&g));

        // ∇ of γ‖s − s_prev‖² + (1−γ)‖s‖² − 2⟨sᵀk, x⟩
        let s = retnet_step(&s_prev, &k, x, gamma);
        let g: Vec<f64> = (0..m)
            .map(|j| 2.0 * gamma * (s[j] - s_prev[j]) + 2.0 * (1.0 - gamma) * s[j] - 2.0 * k[j] * x)
            .collect();
        worst[1] = worst[1].max(inf_norm(&g));

        // ∇ of (s − s_prev)ᵀdiag(α)(s − s_prev) + sᵀdiag(1−α)s − 2⟨sᵀk, x⟩
        let s = gla_step(&s_prev, &k, x, &alpha);
        let g: Vec<f64> = (0..m)
            .map(|j| 2.0 * alpha[j] * (s[j] - s_prev[j]) + 2.0 * (1.0 - alpha[j]) * s[j] - 2.0 * k[j] * x)
            .collect();
        worst[2] = worst[2].max(inf_norm(&g));

        // ∇ of ‖√α⊙(s − s_prev)‖² + ‖√(1−α)⊙s‖² − 2Σ √(1−α)⊙s⊙i⊙x
        let s = griffin_step(&s_prev, &x_vec, &alpha, &gate);
        let g: Vec<f64> = (0..m)
            .map(|j| {
                2.0 * alpha[j] * (s[j] - s_prev[j]) + 2.0 * (1.0 - alpha[j]) * s[j]
                    - 2.0 * (1.0 - alpha[j]).sqrt() * gate[j] * x_vec[j]
            })
            .collect();
        worst[3] = worst[3].max(inf_norm(&g));

        let s = step_exact(&s_prev, &k, x, beta);
        worst[4] = worst[4].max(inf_norm(&regression_grad(&s, &s_prev, &k, x, beta)));
    }
    let names = ["la", "retnet", "gla", "griffin", "longhorn"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::timed(
        worst.iter().all(|&w| w <= 1e-8),
        start.elapsed(),
        Duration::from_secs(10),
        format!("max ‖∇L‖∞ over 200 draws: {detail} (tol 1e-8)"),
    )
}

// ---------------------------------------------------------------------------
// 8: decoding

fn decode_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab: 64,
        layers: 2,
        d_model: 32,
        state_dim: 8,
        context: 512,
        seed: 8,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::init(&cfg).unwrap();
    let mut rng = rng(8);
    let prompt: Vec<usize> = (0..8).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let cached = model.generate(&prompt, 256).unwrap();
    let full = generate_full_recompute(&model, &prompt, 256).unwrap();
    let first_diff = cached.iter().zip(&full).position(|(a, b)| a != b);
    Outcome::timed(
        cached == full && cached.len() == prompt.len() + 256,
        start.elapsed(),
        Duration::from_secs(60),
        match first_diff {
            None => "256 greedy tokens identical".into(),
            Some(i) => format!("diverged at position {i}"),
        },
    )
}

// ---------------------------------------------------------------------------
// 9: MQAR

/// Kernel config whose parameter count is closest to `target`, searching
/// widths in steps of 8.
fn matched_width(base: &ModelConfig, kind: KernelKind, target: usize) -> ModelConfig {
    (1..=base.d_model / 4)
        .map(|i| ModelConfig {
            d_model: 8 * i,
            kernel: KernelConfig { kind, ..base.kernel },
            ..base.clone()
        })
        .min_by_key(|c| c.count_params().abs_diff(target))
        .expect("non-empty search")
}

fn best_of_grid(cfg: &ModelConfig, task: impl Fn() -> Task<'static>, train: &TrainConfig) -> (f64, EvalResult) {
    MQAR_LR_GRID
        .iter()
        .map(|&lr| {
            let model = Model::<f32>::init(cfg).unwrap();
            let t = TrainConfig { peak_lr: lr, final_lr: lr / 10.0, ..train.clone() };
            (lr, Trainer::new(model, task(), t).unwrap().run().unwrap())
        })
        .max_by(|a, b| a.1.accuracy.total_cmp(&b.1.accuracy))
        .unwrap()
}

fn mqar_recall() -> Outcome {
    let spec = MqarSpec {
        seq_len: 128,
        pairs: 8,
        queries: 8,
        ..MqarSpec::default()
    };
    let base = ModelConfig {
        vocab: spec.vocab(),
        context: spec.seq_len,
        layers: 2,
        d_model: 128,
        state_dim: 16,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 64,
        eval_interval: 20_000,
        eval_size: 1024,
        ..TrainConfig::with_total(20_000)
    };
    let target = base.count_params();
    let mut results = Vec::new();
    for kind in KernelKind::ALL {
        let cfg = matched_width(&base, kind, target);
        let spec = spec.clone();
        let (lr, r) = best_of_grid(&cfg, move || Task::Mqar(spec.clone()), &train);
        results.push((kind, cfg.d_model, cfg.count_params(), lr, r.accuracy));
    }
    let longhorn = results[0].4;
    let best_baseline = results[1..].iter().map(|r| r.4).fold(0.0, f64::max);
    let table = results
        .iter()
        .map(|(k, d, n, lr, acc)| format!("{k}(d={d},{n} params,lr={lr:e}) {acc:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::check(
        longhorn >= 0.99 && longhorn - best_baseline >= -0.01,
        format!("recall {table}"),
    )
}

// ---------------------------------------------------------------------------
// 10: parameter counts

fn parameter_economy() -> Outcome {
    let base = ModelConfig {
        vocab: BYTE_VOCAB,
        layers: 2,
        d_model: 64,
        state_dim: 16,
        ..ModelConfig::default()
    };
    let mamba = ModelConfig {
        kernel: KernelConfig { kind: KernelKind::Mamba, ..base.kernel },
        ..base.clone()
    };
    let counted = |c: &ModelConfig| Model::<f32>::init(c).unwrap().param_count();
    let (n_longhorn, n_mamba) = (counted(&base), counted(&mamba));
    let formula_agrees = n_longhorn == base.count_params() && n_mamba == mamba.count_params();
    let floor = base.layers * base.d_model * base.state_dim;
    Outcome::check(
        formula_agrees && n_mamba > n_longhorn && n_mamba - n_longhorn >= floor,
        format!(
            "longhorn {n_longhorn}, mamba {n_mamba}, difference {} (needs ≥ L·d·m = {floor}); counts match instantiated models: {formula_agrees}",
            n_mamba.saturating_sub(n_longhorn)
        ),
    )
}

// ---------------------------------------------------------------------------
// 11–12: byte-level language modeling

/// Documents named by `LONGHORN_CORPUS` (colon-separated), else the
/// workspace's top-level markdown and the text files under `examples/`.
fn corpus_files() -> Vec<PathBuf> {
    if let Ok(list) = std::env::var("LONGHORN_CORPUS") {
        return std::env::split_paths(&list).collect();
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "md"))
        .collect();
    let mut stack = vec![root.join("examples")];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if std::fs::read_to_string(&p).is_ok() {
                files.push(p);
            }
        }
    }
    files.sort();
    files
}

fn lm_config(kind: KernelKind) -> ModelConfig {
    ModelConfig {
        vocab: BYTE_VOCAB,
        layers: 2,
        d_model: 256,
        context: 256,
        kernel: KernelConfig { kind, ..KernelConfig::default() },
        ..ModelConfig::default()
    }
}

fn train_lm(kind: KernelKind, corpus: &LmCorpus) -> Model<f32> {
    let train = TrainConfig {
        eval_interval: 1000,
        eval_size: 256,
        ..TrainConfig::with_total(10_000)
    };
    let model = Model::<f32>::init(&lm_config(kind)).unwrap();
    let task = Task::Lm { corpus, context: 256 };
    let mut trainer = Trainer::new(model, task, train).unwrap();
    trainer.run().unwrap();
    trainer.model
}

fn length_extrapolation() -> Outcome {
    let corpus = LmCorpus::from_files(&corpus_files(), 0.1).unwrap();
    let model = train_lm(KernelKind::Longhorn, &corpus);
    let sets = extrapolation_sets(&corpus, 256, &[1, 2, 4, 8, 16]).unwrap();
    let ppl: Vec<(usize, f64)> = sets
        .iter()
        .map(|s| (s.context, evaluate(&model, &s.windows, ScanMode::Parallel).unwrap().perplexity()))
        .collect();
    let base = ppl[0].1;
    let worst = ppl.iter().map(|p| p.1).fold(0.0, f64::max);
    let table = ppl.iter().map(|(c, p)| format!("{c}:{p:.3}")).collect::<Vec<_>>().join(" ");
    Outcome::check(
        ppl[4].1 <= 1.15 * base && worst <= 1.15 * base,
        format!("perplexity {table}; max/base {:.3} (tol 1.15)", worst / base),
    )
}

fn quality_ordering() -> Outcome {
    let corpus = LmCorpus::from_files(&corpus_files(), 0.1).unwrap();
    let val = Task::Lm { corpus: &corpus, context: 256 }.val_set(0, 0).unwrap();
    let losses: Vec<(KernelKind, f64)> = KernelKind::ALL
        .into_iter()
        .map(|k| (k, evaluate(&train_lm(k, &corpus), &val, ScanMode::Parallel).unwrap().loss))
        .collect();
    let of = |k| losses.iter().find(|(kind, _)| *kind == k).unwrap().1;
    let (longhorn, la) = (of(KernelKind::Longhorn), of(KernelKind::La));
    let table = losses.iter().map(|(k, l)| format!("{k} {l:.4}")).collect::<Vec<_>>().join(", ");
    Outcome::check(
        longhorn <= la - 0.01,
        format!("val loss {table}; la − longhorn {:.4} (needs ≥ 0.01)", la - longhorn),
    )
}

// ---------------------------------------------------------------------------
// 13: scan wall time

fn median_ms(mut f: impl FnMut(), repeats: usize) -> f64 {
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[repeats / 2]
}

fn scan_performance() -> Outcome {
    let (t_len, d, m) = (4096, 256, 16);
    let mut rng = rng(13);
    let params = LonghornParams::<f32>::init(&mut ParamRegistry::new(), "perf", d, m, None, &mut rng).unwrap();
    let x = Tensor::<f32>::randn(&[t_len, d], 1.0, &mut rng);
    let elems = make_scan_elements(&x, &params).unwrap();
    let s0 = Tensor::zeros(&[d, m]);
    let seq = median_ms(|| drop(std::hint::black_box(scan(&elems, &s0, ScanMode::Sequential).unwrap())), 3);
    let par = median_ms(|| drop(std::hint::black_box(scan(&elems, &s0, ScanMode::Parallel).unwrap())), 3);
    let threads = rayon::current_num_threads();
    let ratio = par / seq;
    let detail = format!("parallel/sequential {ratio:.2} ({par:.1} ms / {seq:.1} ms) with {threads} threads (bound 0.5)");
    if threads >= 4 {
        Outcome::check(ratio <= 0.5, detail)
    } else {
        Outcome {
            status: Status::Info,
            detail: format!("{detail}; needs ≥ 4 threads to gate"),
        }
    }
}
