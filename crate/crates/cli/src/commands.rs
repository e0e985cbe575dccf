use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use longhorn_core::autodiff::ParamRegistry;
use longhorn_core::checkpoint::{self, read_manifest};
use longhorn_core::longhorn::{make_scan_elements, LonghornParams};
use longhorn_core::model::{Model, ModelConfig};
use longhorn_core::scan;
use longhorn_core::tasks::{self, Example, LmCorpus, BYTE_VOCAB, SENTINEL};
use longhorn_core::train::{evaluate, EvalResult, MetricRecord, Task, TrainConfig, Trainer};
use longhorn_core::verify::{self, VerifyOptions};
use longhorn_core::{HasParams, Precision, Scalar, ScanMode, Tensor};

use crate::config::{make_run_dir, parse_scan, LmSection, RunConfig};
use crate::CliError;

const MIN_CORPUS_BYTES: u64 = 5 << 20;

/// Run `$body` with `$F` bound to the element type for `$precision`.
macro_rules! with_precision {
    ($precision:expr, $F:ident => $body:expr) => {
        match $precision {
            Precision::F32 => {
                type $F = f32;
                $body
            }
            Precision::F64 => {
                type $F = f64;
                $body
            }
        }
    };
}

pub fn verify(cfg: &RunConfig, flip_delta: bool) -> Result<(), CliError> {
    let dir = make_run_dir(cfg, "verify")?;
    let report = verify::run(VerifyOptions {
        seed: cfg.run.seed,
        flip_delta,
    })?;
    let mut w = csv::Writer::from_path(dir.join("verify.csv"))?;
    w.write_record(["check", "passed", "error", "tolerance", "margin", "detail"])?;
    for c in &report {
        println!("{c}");
        w.write_record([
            c.name.to_string(),
            c.passed().to_string(),
            format!("{:e}", c.error),
            format!("{:e}", c.tolerance),
            format!("{:e}", c.margin()),
            c.detail.clone(),
        ])?;
    }
    w.flush()?;
    let failed: Vec<&str> = report.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    println!("{} checks, {} failed; report in {}", report.len(), failed.len(), dir.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}

fn print_progress(rec: &MetricRecord) {
    if rec.split == "val" {
        println!(
            "step {:>7}  lr {:.3e}  val {:<10} {:.6}  tokens {}",
            rec.step, rec.lr, rec.metric, rec.value, rec.tokens
        );
    }
}

fn train_one<F: Scalar>(
    model_cfg: &ModelConfig,
    task: Task<'_>,
    train: TrainConfig,
    dir: &Path,
) -> Result<EvalResult, CliError> {
    let model = Model::<F>::init(model_cfg)?;
    println!(
        "{} kernel, {} parameters, {}-bit, output {}",
        model_cfg.kernel.kind,
        model.param_count(),
        F::BITS,
        dir.display()
    );
    let mut trainer = Trainer::new(model, task, train)?
        .with_output(dir)?
        .with_progress(print_progress);
    Ok(trainer.run()?)
}

pub fn train_mqar(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.mqar_spec()?;
    let model_cfg = cfg.model_config(spec.vocab(), spec.seq_len)?;
    let train = cfg.train_config()?;
    let dir = make_run_dir(cfg, "train-mqar")?;
    let precision = cfg.precision()?;
    if cfg.mqar.lr_grid.is_empty() {
        let r = with_precision!(precision, F => train_one::<F>(&model_cfg, Task::Mqar(spec), train, &dir)?);
        println!("final recall {:.4}  loss {:.4}", r.accuracy, r.loss);
        return Ok(());
    }
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["peak_lr", "val_loss", "val_accuracy"])?;
    let mut best: Option<(f64, EvalResult)> = None;
    for &lr in &cfg.mqar.lr_grid {
        let t = TrainConfig {
            peak_lr: lr,
            final_lr: train.final_lr.min(lr),
            ..train.clone()
        };
        let sub = dir.join(format!("lr-{lr:e}"));
        let r = with_precision!(precision, F => train_one::<F>(&model_cfg, Task::Mqar(spec.clone()), t, &sub)?);
        w.write_record([format!("{lr:e}"), format!("{:?}", r.loss), format!("{:?}", r.accuracy)])?;
        w.flush()?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| (r.accuracy, -r.loss) > (b.accuracy, -b.loss));
        if better {
            best = Some((lr, r));
        }
    }
    let (lr, r) = best.expect("non-empty grid");
    println!("best lr {lr:e}: recall {:.4}  loss {:.4}", r.accuracy, r.loss);
    Ok(())
}

fn load_corpus(lm: &LmSection) -> Result<LmCorpus, CliError> {
    if lm.corpus.is_empty() {
        return Err(CliError::Config("no corpus: set lm.corpus or pass --corpus".into()));
    }
    let mut bytes = 0;
    for p in &lm.corpus {
        bytes += std::fs::metadata(p)
            .map_err(|e| CliError::Config(format!("corpus {}: {e}", p.display())))?
            .len();
    }
    if bytes < MIN_CORPUS_BYTES {
        eprintln!("warning: corpus is {bytes} bytes; at least 5 MiB is recommended");
    }
    Ok(LmCorpus::from_files(&lm.corpus, lm.val_fraction)?)
}

pub fn train_lm(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.lm)?;
    let model_cfg = cfg.model_config(BYTE_VOCAB, cfg.lm.context)?;
    let train = cfg.train_config()?;
    let dir = make_run_dir(cfg, "train-lm")?;
    let task = Task::Lm {
        corpus: &corpus,
        context: cfg.lm.context,
    };
    let r = with_precision!(cfg.precision()?, F => train_one::<F>(&model_cfg, task, train, &dir)?);
    println!("final val loss {:.4}  perplexity {:.3}", r.loss, r.perplexity());
    Ok(())
}

/// Corpus settings from the training run that produced `ckpt`, if any.
fn training_lm_section(ckpt: &Path) -> Option<LmSection> {
    let run_dir = ckpt.parent()?.parent()?;
    RunConfig::load(&run_dir.join("config.toml")).ok().map(|c| c.lm)
}

fn checkpoint_path(p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    p.clone()
        .ok_or_else(|| CliError::Config("no checkpoint: pass --checkpoint".into()))
}

pub fn eval_extrapolate(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = checkpoint_path(&cfg.eval.checkpoint)?;
    let manifest = read_manifest(&ckpt)?;
    let lm = if cfg.lm.corpus.is_empty() {
        training_lm_section(&ckpt).unwrap_or_else(|| cfg.lm.clone())
    } else {
        cfg.lm.clone()
    };
    let corpus = load_corpus(&lm)?;
    let mode = parse_scan(&cfg.eval.scan_mode, "eval.scan_mode")?;
    let dir = make_run_dir(cfg, "eval-extrapolate")?;
    with_precision!(manifest.config.precision, F => extrapolate::<F>(cfg, &ckpt, &corpus, mode, &dir))
}

fn extrapolate<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    corpus: &LmCorpus,
    mode: ScanMode,
    dir: &Path,
) -> Result<(), CliError> {
    let model = checkpoint::load::<F>(ckpt)?.model;
    let base = model.config.context;
    let sets = tasks::extrapolation_sets(corpus, base, &cfg.eval.factors)?;
    let mut w = csv::Writer::from_path(dir.join("extrapolation.csv"))?;
    w.write_record(["factor", "context", "windows", "tokens", "loss", "perplexity"])?;
    println!("{:>6} {:>8} {:>8} {:>10} {:>10} {:>12}", "factor", "context", "windows", "tokens", "loss", "perplexity");
    for mut set in sets {
        if cfg.eval.max_windows > 0 {
            set.windows.truncate(cfg.eval.max_windows);
        }
        let r = evaluate(&model, &set.windows, mode)?;
        println!(
            "{:>6} {:>8} {:>8} {:>10} {:>10.5} {:>12.4}",
            set.factor,
            set.context,
            set.windows.len(),
            set.scored_tokens(),
            r.loss,
            r.perplexity()
        );
        w.write_record([
            set.factor.to_string(),
            set.context.to_string(),
            set.windows.len().to_string(),
            set.scored_tokens().to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.perplexity()),
        ])?;
    }
    w.flush()?;
    if cfg.eval.decode_check {
        let longest = cfg.eval.factors.iter().max().copied().unwrap_or(1);
        let window = &tasks::val_windows(corpus, base * longest)?[0];
        let (scan_ppl, decode_ppl) = decode_vs_scan(&model, window, mode)?;
        let mut w = csv::Writer::from_path(dir.join("decode_check.csv"))?;
        w.write_record(["context", "scan_perplexity", "decode_perplexity", "abs_diff"])?;
        w.write_record([
            window.tokens.len().to_string(),
            format!("{scan_ppl:?}"),
            format!("{decode_ppl:?}"),
            format!("{:e}", (scan_ppl - decode_ppl).abs()),
        ])?;
        w.flush()?;
        println!(
            "decode check at {}: scan {scan_ppl:.5}, decode {decode_ppl:.5}, diff {:.2e}",
            window.tokens.len(),
            (scan_ppl - decode_ppl).abs()
        );
    }
    println!("results in {}", dir.display());
    Ok(())
}

/// Perplexity of one window from the batched forward pass and from
/// token-by-token decoding.
pub fn decode_vs_scan<F: Scalar>(model: &Model<F>, ex: &Example, mode: ScanMode) -> Result<(f64, f64), CliError> {
    let scan_loss = evaluate(model, std::slice::from_ref(ex), mode)?.loss;
    let mut dec = model.decoder();
    let mut nll = 0.0;
    for (&tok, &y) in ex.tokens.iter().zip(&ex.targets) {
        let logits: Vec<f64> = dec.step(tok)?.iter().map(|v| v.as_f64()).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        nll += lse - logits[y];
    }
    Ok((scan_loss.exp(), (nll / ex.tokens.len() as f64).exp()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench_scan(cfg: &RunConfig) -> Result<(), CliError> {
    let b = &cfg.bench;
    if b.lengths.is_empty() || b.lengths.contains(&0) || b.d == 0 || b.m == 0 || b.repeats == 0 || b.chunk == 0 {
        return Err(CliError::Config("bench: lengths, d, m, repeats and chunk must be positive".into()));
    }
    let dir = make_run_dir(cfg, "bench-scan")?;
    with_precision!(cfg.precision()?, F => bench_scan_with::<F>(cfg, &dir))
}

fn bench_scan_with<F: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let b = &cfg.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let params = LonghornParams::<F>::init(&mut ParamRegistry::new(), "bench", b.d, b.m, None, &mut rng)?;
    let threads = rayon::current_num_threads();
    let mut w = csv::Writer::from_path(dir.join("bench_scan.csv"))?;
    w.write_record(["t", "mode", "d", "m", "threads", "median_ms", "tokens_per_s"])?;
    println!("{:>6} {:>12} {:>12} {:>14}", "T", "mode", "median_ms", "tokens/s");
    for &t_len in &b.lengths {
        let x = Tensor::<F>::randn(&[t_len, b.d], 1.0, &mut rng);
        let elems = make_scan_elements(&x, &params)?;
        let s0 = Tensor::zeros(&[b.d, b.m]);
        let mut seq_ms = None;
        for mode in [ScanMode::Sequential, ScanMode::Parallel, ScanMode::Chunked(b.chunk)] {
            let times = (0..b.repeats)
                .map(|_| {
                    let start = Instant::now();
                    let states = scan::scan(&elems, &s0, mode)?;
                    std::hint::black_box(&states);
                    Ok(start.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let ms = median(times);
            let seq = *seq_ms.get_or_insert(ms);
            let rate = t_len as f64 / (ms / 1e3);
            println!("{t_len:>6} {:>12} {ms:>12.3} {rate:>14.0}  speedup {:.2}x", mode.to_string(), seq / ms);
            w.write_record([
                t_len.to_string(),
                mode.to_string(),
                b.d.to_string(),
                b.m.to_string(),
                threads.to_string(),
                format!("{ms:.6}"),
                format!("{rate:.1}"),
            ])?;
        }
    }
    w.flush()?;
    println!("{threads} worker threads; results in {}", dir.display());
    Ok(())
}

/// Byte models read the prompt as text; other vocabularies as
/// whitespace-separated ids.
fn encode_prompt(prompt: &str, vocab: usize) -> Result<Vec<usize>, CliError> {
    if vocab == BYTE_VOCAB {
        let mut ids: Vec<usize> = prompt.bytes().map(usize::from).collect();
        if ids.is_empty() {
            ids.push(SENTINEL);
        }
        return Ok(ids);
    }
    let ids = prompt
        .split_whitespace()
        .map(|s| s.parse::<usize>().ok().filter(|&i| i < vocab))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CliError::Config(format!("prompt must be token ids below {vocab}")))?;
    if ids.is_empty() {
        return Err(CliError::Config("empty prompt".into()));
    }
    Ok(ids)
}

fn decode_ids(ids: &[usize], vocab: usize) -> String {
    if vocab == BYTE_VOCAB {
        let bytes: Vec<u8> = ids.iter().map(|&t| if t == SENTINEL { b'\n' } else { t as u8 }).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = checkpoint_path(&cfg.sample.checkpoint)?;
    let manifest = read_manifest(&ckpt)?;
    let vocab = manifest.config.vocab;
    let prompt = encode_prompt(&cfg.sample.prompt, vocab)?;
    let dir = make_run_dir(cfg, "sample")?;
    let ids = with_precision!(manifest.config.precision, F => {
        checkpoint::load::<F>(&ckpt)?.model.generate(&prompt, cfg.sample.steps)?
    });
    let text = decode_ids(&ids, vocab);
    std::fs::write(dir.join("sample.txt"), &text)?;
    println!("{text}");
    Ok(())
}
