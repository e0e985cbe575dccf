//! Token models: embedding, a stack of residual blocks and a tied output
//! head.
//!
//! Each block computes, on the normalised input `n = rmsnorm(h)`,
//! `h + W_out( kernel(silu(conv(W_in n))) ⊙ silu(W_gate n) )`
//! where the kernel is Longhorn or one of the baselines running over the
//! `E·d` expanded channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradStore, HasParams, NodeId, Param, ParamRegistry, Tape};
use crate::error::{dim_err, Error, Result};
use crate::kernel::{KernelConfig, KernelKind, KernelParams};
use crate::linear::init_weight;
use crate::recurrence::{decode_layer, record_layer};
use crate::scalar::{silu, Precision, Scalar};
use crate::scan::ScanMode;
use crate::tensor::{conv_row, matvec, rmsnorm_row, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    /// Residual stream width `d`.
    pub d_model: usize,
    /// State width `m` per channel.
    pub state_dim: usize,
    /// Channel expansion `E`; the kernel runs over `E·d` channels.
    pub expand: usize,
    pub conv_width: usize,
    pub context: usize,
    pub kernel: KernelConfig,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 256,
            layers: 2,
            d_model: 64,
            state_dim: 16,
            expand: 2,
            conv_width: 4,
            context: 256,
            kernel: KernelConfig::default(),
            tie_embeddings: true,
            norm_eps: 1e-5,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Expanded channel count `E·d`.
    pub fn inner_dim(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("context", self.context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidArgument("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Parameters of one kernel over `E·d` channels.
    pub fn kernel_params(&self) -> usize {
        let dd = self.inner_dim();
        let m = self.state_dim;
        let rank = self.kernel.rank.resolve(dd);
        let square = match rank {
            None => dd * dd,
            Some(r) => 2 * r * dd,
        };
        let gate = match rank {
            None => m * dd,
            Some(r) => {
                let r = r.min(m);
                r * (dd + m)
            }
        };
        match self.kernel.kind {
            KernelKind::Longhorn => 2 * m * dd + square,
            KernelKind::La | KernelKind::RetNet => 2 * m * dd,
            KernelKind::Gla => 2 * m * dd + gate,
            KernelKind::Griffin => 2 * square,
            KernelKind::Hgrn2 => m * dd + gate,
            KernelKind::Mamba => 2 * m * dd + square + dd + dd * m + dd,
        }
    }

    /// Parameters of one block.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        let dd = self.inner_dim();
        d + 2 * dd * d + self.conv_width * dd + dd + dd * d + self.kernel_params()
    }

    /// Total parameter count, derived from the configuration alone.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        let head = if self.tie_embeddings { 0 } else { self.vocab * d };
        self.vocab * d + head + d + self.layers * self.block_params()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub norm: Param<F>,
    /// `[E·d × d]`
    pub w_in: Param<F>,
    /// `[E·d × d]`
    pub w_gate: Param<F>,
    /// `[w × E·d]`
    pub conv_kernel: Param<F>,
    pub conv_bias: Param<F>,
    pub kernel: KernelParams<F>,
    /// `[d × E·d]`
    pub w_out: Param<F>,
}

impl<F: Scalar> BlockParams<F> {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, reg: &mut ParamRegistry, prefix: &str, rng: &mut R) -> Result<Self> {
        let (d, dd, w) = (cfg.d_model, cfg.inner_dim(), cfg.conv_width);
        let norm = reg.register(format!("{prefix}.norm"), Tensor::ones(&[d]));
        let w_in = init_weight(reg, format!("{prefix}.w_in"), dd, d, rng);
        let w_gate = init_weight(reg, format!("{prefix}.w_gate"), dd, d, rng);
        let conv_kernel = reg.register(
            format!("{prefix}.conv_kernel"),
            Tensor::uniform(&[w, dd], 1.0 / (w as f64).sqrt(), rng),
        );
        let conv_bias = reg.register(format!("{prefix}.conv_bias"), Tensor::zeros(&[dd]));
        let kernel = KernelParams::init(&cfg.kernel, reg, &format!("{prefix}.kernel"), dd, cfg.state_dim, rng)?;
        let w_out = init_weight(reg, format!("{prefix}.w_out"), d, dd, rng);
        Ok(BlockParams {
            norm,
            w_in,
            w_gate,
            conv_kernel,
            conv_bias,
            kernel,
            w_out,
        })
    }

    /// Record `h [T×d] → h + f(norm(h))`.
    pub fn record(&self, tape: &mut Tape<F>, h: NodeId, eps: F, mode: ScanMode) -> Result<NodeId> {
        let gain = tape.param(&self.norm);
        let n = tape.rmsnorm(h, gain, eps)?;
        let w_in = tape.param(&self.w_in);
        let u = tape.matmul_nt(n, w_in)?;
        let ck = tape.param(&self.conv_kernel);
        let cb = tape.param(&self.conv_bias);
        let c = tape.causal_conv1d(u, ck, cb)?;
        let s = tape.silu(c);
        let o = record_layer(self.kernel.layer(), tape, s, mode, &mut Vec::new())?;
        let w_gate = tape.param(&self.w_gate);
        let z = tape.matmul_nt(n, w_gate)?;
        let g = tape.silu(z);
        let y = tape.mul(o, g)?;
        let w_out = tape.param(&self.w_out);
        let out = tape.matmul_nt(y, w_out)?;
        tape.add(h, out)
    }
}

impl<F: Scalar> HasParams<F> for BlockParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.norm);
        f(&self.w_in);
        f(&self.w_gate);
        f(&self.conv_kernel);
        f(&self.conv_bias);
        self.kernel.visit(f);
        f(&self.w_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.norm);
        f(&mut self.w_in);
        f(&mut self.w_gate);
        f(&mut self.conv_kernel);
        f(&mut self.conv_bias);
        self.kernel.visit_mut(f);
        f(&mut self.w_out);
    }
}

/// Tape-free block forward.
pub fn block_forward<F: Scalar>(h: &Tensor<F>, block: &BlockParams<F>, eps: F, mode: ScanMode) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let hn = tape.input(h.clone());
    let out = block.record(&mut tape, hn, eps, mode)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    /// `[V×d]`
    pub embedding: Param<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: Param<F>,
    /// Separate output projection when embeddings are untied.
    pub head: Option<Param<F>>,
    registry: ParamRegistry,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if F::BITS != config.precision.bits() {
            return Err(Error::InvalidArgument(format!(
                "model built with {} but config asks for {}-bit",
                F::NAME,
                config.precision.bits()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut reg = ParamRegistry::new();
        let d = config.d_model;
        let embedding = reg.register("embedding", Tensor::randn(&[config.vocab, d], 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|l| BlockParams::init(config, &mut reg, &format!("blocks.{l}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = reg.register("final_norm", Tensor::ones(&[d]));
        let head = (!config.tie_embeddings).then(|| init_weight(&mut reg, "head".into(), config.vocab, d, &mut rng));
        Ok(Model {
            config: config.clone(),
            embedding,
            blocks,
            final_norm,
            head,
            registry: reg,
        })
    }

    pub fn param_names(&self) -> &[String] {
        self.registry.names()
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        self.registry.shapes()
    }

    pub fn zero_grads(&self) -> GradStore<F> {
        GradStore::zeros(self.param_shapes())
    }

    fn eps(&self) -> F {
        F::lit(self.config.norm_eps)
    }

    fn head_weight(&self) -> &Param<F> {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("tokens"));
        }
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(t) => Err(Error::InvalidArgument(format!("token id {t} outside vocab {}", self.config.vocab))),
            None => Ok(()),
        }
    }

    /// Record the logits `[T×V]` for `tokens`.
    pub fn record(&self, tape: &mut Tape<F>, tokens: &[usize], mode: ScanMode) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let table = tape.param(&self.embedding);
        let mut h = tape.embedding(table, tokens)?;
        for block in &self.blocks {
            h = block.record(tape, h, self.eps(), mode)?;
        }
        let gain = tape.param(&self.final_norm);
        let n = tape.rmsnorm(h, gain, self.eps())?;
        let head = match &self.head {
            Some(w) => tape.param(w),
            None => table,
        };
        tape.matmul_nt(n, head)
    }

    pub fn forward(&self, tokens: &[usize], mode: ScanMode) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let logits = self.record(&mut tape, tokens, mode)?;
        Ok(tape.value(logits).clone())
    }

    /// Masked mean cross-entropy; parameter gradients are added to `grads`.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[usize],
        mask: &[F],
        mode: ScanMode,
        grads: &mut GradStore<F>,
    ) -> Result<F> {
        let mut tape = Tape::new();
        let logits = self.record(&mut tape, tokens, mode)?;
        let loss = tape.cross_entropy(logits, targets, mask)?;
        tape.backward_into(loss, grads)?;
        Ok(tape.value(loss).data()[0])
    }

    pub fn decoder(&self) -> Decoder<'_, F> {
        Decoder::new(self)
    }

    /// Greedy continuation of `prompt` by `steps` tokens using constant-memory
    /// decoding.
    pub fn generate(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        let mut out = prompt.to_vec();
        if steps == 0 {
            return Ok(out);
        }
        let mut dec = self.decoder();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.step(t)?;
        }
        for i in 0..steps {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < steps {
                logits = dec.step(next)?;
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> HasParams<F> for Model<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.embedding);
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.final_norm);
        if let Some(h) = &self.head {
            f(h);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.embedding);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            f(h);
        }
    }
}

/// Index of the first maximum.
pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct LayerCache<F> {
    /// Last `w−1` conv inputs, oldest first.
    history: Vec<Vec<F>>,
    state: Vec<F>,
}

/// Recurrent inference: per-token cost and memory independent of position.
pub struct Decoder<'a, F> {
    model: &'a Model<F>,
    layers: Vec<LayerCache<F>>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(model: &'a Model<F>) -> Self {
        let layers = model
            .blocks
            .iter()
            .map(|b| {
                let (d, m) = b.kernel.layer().state_shape();
                LayerCache {
                    history: Vec::with_capacity(model.config.conv_width),
                    state: vec![F::zero(); d * m],
                }
            })
            .collect();
        Decoder { model, layers }
    }

    /// Values carried between steps.
    pub fn state_len(&self) -> usize {
        let w = self.model.config.conv_width;
        self.layers
            .iter()
            .map(|l| l.state.len() + (w - 1) * self.model.config.inner_dim())
            .sum()
    }

    /// Consume one token and return the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<F>> {
        let model = self.model;
        let cfg = &model.config;
        if token >= cfg.vocab {
            return Err(Error::InvalidArgument(format!("token id {token} outside vocab {}", cfg.vocab)));
        }
        let eps = model.eps();
        let (d, dd, w) = (cfg.d_model, cfg.inner_dim(), cfg.conv_width);
        let mut h = model.embedding.row(token).to_vec();
        let mut n = vec![F::zero(); d];
        let mut u = vec![F::zero(); dd];
        let mut c = vec![F::zero(); dd];
        let mut o = vec![F::zero(); dd];
        let mut z = vec![F::zero(); dd];
        let mut out = vec![F::zero(); d];
        for (block, cache) in model.blocks.iter().zip(&mut self.layers) {
            rmsnorm_row(&h, block.norm.data(), eps, &mut n);
            matvec(&block.w_in, &n, &mut u);
            let seen = cache.history.len();
            conv_row(
                |s| {
                    // tap w−1 is the current step; earlier taps walk back in time
                    let back = w - 1 - s;
                    if back == 0 {
                        Some(u.as_slice())
                    } else if back <= seen {
                        Some(cache.history[seen - back].as_slice())
                    } else {
                        None
                    }
                },
                &block.conv_kernel,
                block.conv_bias.data(),
                &mut c,
            );
            if w > 1 {
                if cache.history.len() == w - 1 {
                    cache.history.remove(0);
                }
                cache.history.push(u.clone());
            }
            c.iter_mut().for_each(|v| *v = silu(*v));
            decode_layer(block.kernel.layer(), &mut cache.state, &c, &mut o)?;
            matvec(&block.w_gate, &n, &mut z);
            for (oi, &zi) in o.iter_mut().zip(&z) {
                *oi *= silu(zi);
            }
            matvec(&block.w_out, &o, &mut out);
            for (hi, &oi) in h.iter_mut().zip(&out) {
                *hi += oi;
            }
        }
        rmsnorm_row(&h, model.final_norm.data(), eps, &mut n);
        let mut logits = vec![F::zero(); cfg.vocab];
        matvec(model.head_weight(), &n, &mut logits);
        Ok(logits)
    }
}

/// Greedy decoding by recomputing the full forward pass at every step.
pub fn generate_full_recompute<F: Scalar>(model: &Model<F>, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    for _ in 0..steps {
        let logits = model.forward(&out, ScanMode::Sequential)?;
        out.push(argmax(logits.row(out.len() - 1)));
    }
    Ok(out)
}

pub(crate) fn check_config_shapes<F: Scalar>(model: &Model<F>, shapes: &[(String, Vec<usize>)]) -> Result<()> {
    let names = model.param_names();
    let expected = model.param_shapes();
    if shapes.len() != names.len() {
        return Err(Error::Checkpoint(format!("{} tensors, expected {}", shapes.len(), names.len())));
    }
    for ((name, shape), (ename, eshape)) in shapes.iter().zip(names.iter().zip(expected)) {
        if name != ename || shape != eshape {
            return Err(dim_err(
                "checkpoint",
                format!("{name} {shape:?} does not match {ename} {eshape:?}"),
            ));
        }
    }
    Ok(())
}
