//! Comparison recurrences: linear attention, RetNet, GLA, Griffin, HGRN2 and
//! diagonal Mamba.
//!
//! The free functions are single-step updates on explicit states. The
//! `*Rule` types feed the same updates through the fused recurrence op, and
//! the `*Params` types own the projections that produce their inputs.

use rand::Rng;

use crate::autodiff::{HasParams, NodeId, Param, ParamId, ParamRegistry, Tape};
use crate::error::{dim_err, Error, Result};
use crate::linear::{init_weight, Projection};
use crate::longhorn::step_exact;
use crate::recurrence::{RecurrentLayer, StepRule};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{matvec, Tensor};

// ---------------------------------------------------------------------------
// Single steps

/// `s + kx`.
pub fn la_step<F: Scalar>(s: &[F], k: &[F], x: F) -> Vec<F> {
    s.iter().zip(k).map(|(&si, &kj)| si + kj * x).collect()
}

/// `γs + kx`.
pub fn retnet_step<F: Scalar>(s: &[F], k: &[F], x: F, gamma: F) -> Vec<F> {
    s.iter().zip(k).map(|(&si, &kj)| gamma * si + kj * x).collect()
}

/// `diag(α)s + kx`.
pub fn gla_step<F: Scalar>(s: &[F], k: &[F], x: F, alpha: &[F]) -> Vec<F> {
    s.iter()
        .zip(k)
        .zip(alpha)
        .map(|((&si, &kj), &a)| a * si + kj * x)
        .collect()
}

/// `α⊙s + √(1−α)⊙i⊙x`.
pub fn griffin_step<F: Scalar>(s: &[F], x: &[F], alpha: &[F], gate: &[F]) -> Vec<F> {
    s.iter()
        .zip(x)
        .zip(alpha)
        .zip(gate)
        .map(|(((&si, &xi), &a), &g)| a * si + (F::one() - a).sqrt() * g * xi)
        .collect()
}

/// `(1⊗f)⊙S + i⊗(1−f)` with `S: [d×m]`, `f ∈ R^m`, `i ∈ R^d`.
pub fn hgrn2_step<F: Scalar>(state: &Tensor<F>, forget: &[F], input: &[F]) -> Result<Tensor<F>> {
    let (d, m) = (state.rows(), state.cols());
    if forget.len() != m || input.len() != d {
        return Err(dim_err(
            "hgrn2_step",
            format!("state [{d}×{m}], f {}, i {}", forget.len(), input.len()),
        ));
    }
    let mut out = state.clone();
    for i in 0..d {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = forget[j] * *o + input[i] * (F::one() - forget[j]);
        }
    }
    Ok(out)
}

/// `exp(A⊙(Δ⊗1))⊙S + (Δ⊙x)⊗k`. Rejects positive entries of `A`.
pub fn mamba_diag_step<F: Scalar>(
    state: &Tensor<F>,
    x: &[F],
    a: &Tensor<F>,
    delta: &[F],
    k: &[F],
) -> Result<Tensor<F>> {
    let (d, m) = (state.rows(), state.cols());
    if a.shape() != state.shape() || x.len() != d || delta.len() != d || k.len() != m {
        return Err(dim_err(
            "mamba_diag_step",
            format!("state {:?}, A {:?}, x {}, Δ {}, k {}", state.shape(), a.shape(), x.len(), delta.len(), k.len()),
        ));
    }
    if a.data().iter().any(|&v| v > F::zero()) {
        return Err(Error::InvalidArgument("mamba A must be non-positive".into()));
    }
    let mut out = state.clone();
    for i in 0..d {
        let dx = delta[i] * x[i];
        let a_row = a.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (a_row[j] * delta[i]).exp() * *o + dx * k[j];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Objectives

/// Recurrences with an online-learning objective whose minimizer is the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    La,
    RetNet,
    Gla,
    Griffin,
    Longhorn,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::La,
        ObjectiveKind::RetNet,
        ObjectiveKind::Gla,
        ObjectiveKind::Griffin,
        ObjectiveKind::Longhorn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::La => "la",
            ObjectiveKind::RetNet => "retnet",
            ObjectiveKind::Gla => "gla",
            ObjectiveKind::Griffin => "griffin",
            ObjectiveKind::Longhorn => "longhorn",
        }
    }
}

impl TryFrom<crate::kernel::KernelKind> for ObjectiveKind {
    type Error = Error;

    fn try_from(kind: crate::kernel::KernelKind) -> Result<Self> {
        use crate::kernel::KernelKind as K;
        match kind {
            K::La => Ok(ObjectiveKind::La),
            K::RetNet => Ok(ObjectiveKind::RetNet),
            K::Gla => Ok(ObjectiveKind::Gla),
            K::Griffin => Ok(ObjectiveKind::Griffin),
            K::Longhorn => Ok(ObjectiveKind::Longhorn),
            K::Hgrn2 | K::Mamba => Err(Error::Unsupported(format!("{} has no online-learning objective", kind.name()))),
        }
    }
}

/// One random instance of the per-step inputs shared by all objectives.
/// Griffin reads the vector target `x_vec`; the others read the scalar `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveDraw {
    pub s_prev: Vec<f64>,
    pub k: Vec<f64>,
    pub x: f64,
    pub x_vec: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: Vec<f64>,
    pub gate: Vec<f64>,
}

impl ObjectiveDraw {
    /// Entries `N(0,1)`; `β, γ, α, i` uniform in `(0,1)`.
    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
        let s_prev = normal(m);
        let k = normal(m);
        let x_vec = normal(m);
        let x = normal(1)[0];
        let mut unit = || -> f64 {
            loop {
                let v: f64 = rng.gen();
                if v > 0.0 {
                    return v;
                }
            }
        };
        let beta = unit();
        let gamma = unit();
        let alpha = (0..m).map(|_| unit()).collect();
        let gate = (0..m).map(|_| unit()).collect();
        ObjectiveDraw {
            s_prev,
            k,
            x,
            x_vec,
            beta,
            gamma,
            alpha,
            gate,
        }
    }

    pub fn dim(&self) -> usize {
        self.s_prev.len()
    }
}

/// The kind's update applied to the draw.
pub fn objective_update(kind: ObjectiveKind, d: &ObjectiveDraw) -> Vec<f64> {
    match kind {
        ObjectiveKind::La => la_step(&d.s_prev, &d.k, d.x),
        ObjectiveKind::RetNet => retnet_step(&d.s_prev, &d.k, d.x, d.gamma),
        ObjectiveKind::Gla => gla_step(&d.s_prev, &d.k, d.x, &d.alpha),
        ObjectiveKind::Griffin => griffin_step(&d.s_prev, &d.x_vec, &d.alpha, &d.gate),
        ObjectiveKind::Longhorn => step_exact(&d.s_prev, &d.k, d.x, d.beta),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L_t(s)` for the kind.
pub fn objective_value(kind: ObjectiveKind, d: &ObjectiveDraw, s: &[f64]) -> f64 {
    let diff2 = |i: usize| (s[i] - d.s_prev[i]).powi(2);
    let n = s.len();
    match kind {
        ObjectiveKind::La => (0..n).map(diff2).sum::<f64>() - 2.0 * dot(s, &d.k) * d.x,
        ObjectiveKind::RetNet => {
            d.gamma * (0..n).map(diff2).sum::<f64>() + (1.0 - d.gamma) * dot(s, s) - 2.0 * dot(s, &d.k) * d.x
        }
        ObjectiveKind::Gla => (0..n)
            .map(|i| d.alpha[i] * diff2(i) + (1.0 - d.alpha[i]) * s[i] * s[i] - 2.0 * s[i] * d.k[i] * d.x)
            .sum(),
        ObjectiveKind::Griffin => (0..n)
            .map(|i| {
                let a = d.alpha[i];
                a * diff2(i) + (1.0 - a) * s[i] * s[i] - 2.0 * (1.0 - a).sqrt() * s[i] * d.gate[i] * d.x_vec[i]
            })
            .sum(),
        ObjectiveKind::Longhorn => crate::longhorn::objective(s, &d.s_prev, &d.k, d.x, d.beta),
    }
}

/// `∇_s L_t(s)`.
pub fn objective_gradient(kind: ObjectiveKind, d: &ObjectiveDraw, s: &[f64]) -> Vec<f64> {
    let n = s.len();
    match kind {
        ObjectiveKind::La => (0..n).map(|i| 2.0 * (s[i] - d.s_prev[i]) - 2.0 * d.k[i] * d.x).collect(),
        ObjectiveKind::RetNet => (0..n)
            .map(|i| 2.0 * d.gamma * (s[i] - d.s_prev[i]) + 2.0 * (1.0 - d.gamma) * s[i] - 2.0 * d.k[i] * d.x)
            .collect(),
        ObjectiveKind::Gla => (0..n)
            .map(|i| {
                let a = d.alpha[i];
                2.0 * a * (s[i] - d.s_prev[i]) + 2.0 * (1.0 - a) * s[i] - 2.0 * d.k[i] * d.x
            })
            .collect(),
        ObjectiveKind::Griffin => (0..n)
            .map(|i| {
                let a = d.alpha[i];
                2.0 * a * (s[i] - d.s_prev[i]) + 2.0 * (1.0 - a) * s[i]
                    - 2.0 * (1.0 - a).sqrt() * d.gate[i] * d.x_vec[i]
            })
            .collect(),
        ObjectiveKind::Longhorn => crate::longhorn::objective_grad(s, &d.s_prev, &d.k, d.x, d.beta),
    }
}

/// `∇²_s L_t`, constant in `s` for every kind.
pub fn objective_hessian(kind: ObjectiveKind, d: &ObjectiveDraw) -> Vec<Vec<f64>> {
    let n = d.dim();
    let mut h = vec![vec![0.0; n]; n];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 2.0;
        if kind == ObjectiveKind::Longhorn {
            for (j, v) in row.iter_mut().enumerate() {
                *v += 2.0 * d.beta * d.k[i] * d.k[j];
            }
        }
    }
    h
}

/// `‖∇L_t‖∞` at the kind's update output.
pub fn objective_consistency(kind: ObjectiveKind, draw: &ObjectiveDraw) -> f64 {
    let s = objective_update(kind, draw);
    objective_gradient(kind, draw, &s)
        .iter()
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Same check keyed by kernel kind; HGRN2 and Mamba have no objective.
pub fn kernel_objective_consistency(kind: crate::kernel::KernelKind, draw: &ObjectiveDraw) -> Result<f64> {
    Ok(objective_consistency(ObjectiveKind::try_from(kind)?, draw))
}

// ---------------------------------------------------------------------------
// Step rules

fn check_rows<F: Scalar>(name: &'static str, inputs: &[&Tensor<F>], n: usize) -> Result<usize> {
    if inputs.len() != n {
        return Err(dim_err(name, format!("expected {n} inputs, got {}", inputs.len())));
    }
    let t = inputs[0].rows();
    if inputs[0].rank() != 2 || inputs.iter().any(|x| x.rank() != 2 || x.rows() != t) {
        let shapes: Vec<_> = inputs.iter().map(|x| x.shape().to_vec()).collect();
        return Err(dim_err(name, format!("inputs must be [T×·] with equal T: {shapes:?}")));
    }
    Ok(t)
}

fn outer_grads<F: Scalar>(x: &[F], k: &[F], db: &[F], dx: &mut [F], dk: &mut [F]) {
    let m = k.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &db[i * m..(i + 1) * m];
        let mut acc = F::zero();
        for j in 0..m {
            acc += row[j] * k[j];
            dk[j] += row[j] * xi;
        }
        dx[i] += acc;
    }
}

/// LA (`gamma = None`) and RetNet: inputs `[x, q, k]`.
pub struct LinearAttnRule<F> {
    pub gamma: Option<F>,
}

impl<F: Scalar> StepRule<F> for LinearAttnRule<F> {
    fn name(&self) -> &'static str {
        if self.gamma.is_some() {
            "retnet"
        } else {
            "la"
        }
    }

    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize {
        inputs[2].cols()
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        check_rows(self.name(), inputs, 3)?;
        if inputs[1].cols() != inputs[2].cols() {
            return Err(dim_err(self.name(), "q and k widths differ"));
        }
        Ok(())
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let m = k.len();
        a.fill(self.gamma.unwrap_or(F::one()));
        for (i, &xi) in x.iter().enumerate() {
            for (bj, &kj) in b[i * m..(i + 1) * m].iter_mut().zip(k) {
                *bj = xi * kj;
            }
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, _da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let (gx, rest) = grads.split_at_mut(1);
        outer_grads(inputs[0].row(t), inputs[2].row(t), db, gx[0].row_mut(t), rest[1].row_mut(t));
    }
}

/// GLA: inputs `[x, q, k, g]`, decay `α = σ(g)` per key dimension.
pub struct GlaRule;

impl<F: Scalar> StepRule<F> for GlaRule {
    fn name(&self) -> &'static str {
        "gla"
    }

    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize {
        inputs[2].cols()
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        check_rows("gla", inputs, 4)?;
        let m = inputs[2].cols();
        if inputs[1].cols() != m || inputs[3].cols() != m {
            return Err(dim_err("gla", "q, k and gate widths differ"));
        }
        Ok(())
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let g = inputs[3].row(t);
        let m = k.len();
        for (i, &xi) in x.iter().enumerate() {
            let (ar, br) = (&mut a[i * m..(i + 1) * m], &mut b[i * m..(i + 1) * m]);
            for j in 0..m {
                ar[j] = sigmoid(g[j]);
                br[j] = xi * k[j];
            }
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let g = inputs[3].row(t);
        let m = g.len();
        {
            let (gx, rest) = grads.split_at_mut(1);
            outer_grads(inputs[0].row(t), inputs[2].row(t), db, gx[0].row_mut(t), rest[1].row_mut(t));
        }
        let dg = grads[3].row_mut(t);
        for j in 0..m {
            let alpha = sigmoid(g[j]);
            let mut acc = F::zero();
            for i in 0..da.len() / m {
                acc += da[i * m + j];
            }
            dg[j] += acc * alpha * (F::one() - alpha);
        }
    }
}

/// Griffin: inputs `[x, z_a, z_i]`, a single state column and no query.
/// `α = σ(z_a)`, `i = σ(z_i)` and `1 − α` is taken as `σ(−z_a)`.
pub struct GriffinRule;

impl<F: Scalar> StepRule<F> for GriffinRule {
    fn name(&self) -> &'static str {
        "griffin"
    }

    fn state_cols(&self, _inputs: &[&Tensor<F>]) -> usize {
        1
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        check_rows("griffin", inputs, 3)?;
        if inputs.iter().any(|x| x.cols() != inputs[0].cols()) {
            return Err(dim_err("griffin", "gate widths must equal the channel count"));
        }
        Ok(())
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let za = inputs[1].row(t);
        let zi = inputs[2].row(t);
        for i in 0..x.len() {
            a[i] = sigmoid(za[i]);
            b[i] = sigmoid(-za[i]).sqrt() * sigmoid(zi[i]) * x[i];
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let x = inputs[0].row(t);
        let za = inputs[1].row(t);
        let zi = inputs[2].row(t);
        let half = F::lit(0.5);
        for i in 0..x.len() {
            let alpha = sigmoid(za[i]);
            let c = sigmoid(-za[i]).sqrt();
            let gate = sigmoid(zi[i]);
            grads[0].row_mut(t)[i] += db[i] * c * gate;
            grads[1].row_mut(t)[i] += da[i] * alpha * (F::one() - alpha) - db[i] * gate * x[i] * c * alpha * half;
            grads[2].row_mut(t)[i] += db[i] * c * x[i] * gate * (F::one() - gate);
        }
    }
}

/// HGRN2: inputs `[x, q, z_f]`, forget gate `f = σ(z_f)` per state column
/// and the channel stream as the input vector.
pub struct Hgrn2Rule;

impl<F: Scalar> StepRule<F> for Hgrn2Rule {
    fn name(&self) -> &'static str {
        "hgrn2"
    }

    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize {
        inputs[1].cols()
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        check_rows("hgrn2", inputs, 3)?;
        if inputs[1].cols() != inputs[2].cols() {
            return Err(dim_err("hgrn2", "q and forget widths differ"));
        }
        Ok(())
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let zf = inputs[2].row(t);
        let m = zf.len();
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..m {
                a[i * m + j] = sigmoid(zf[j]);
                b[i * m + j] = xi * sigmoid(-zf[j]);
            }
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let x = inputs[0].row(t);
        let zf = inputs[2].row(t);
        let m = zf.len();
        let mut dz = vec![F::zero(); m];
        for (i, &xi) in x.iter().enumerate() {
            let mut dx = F::zero();
            for j in 0..m {
                let idx = i * m + j;
                dx += db[idx] * sigmoid(-zf[j]);
                dz[j] += da[idx] - db[idx] * xi;
            }
            grads[0].row_mut(t)[i] += dx;
        }
        let gz = grads[2].row_mut(t);
        for j in 0..m {
            let f = sigmoid(zf[j]);
            gz[j] += dz[j] * f * (F::one() - f);
        }
    }
}

/// Diagonal Mamba: inputs `[x, q, k, z, a_log, dt_bias]` with
/// `Δ = softplus(z + dt_bias)` and `A = −exp(a_log)`.
pub struct MambaRule;

impl<F: Scalar> StepRule<F> for MambaRule {
    fn name(&self) -> &'static str {
        "mamba"
    }

    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize {
        inputs[2].cols()
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        check_rows("mamba", &inputs[..4], 4)?;
        if inputs.len() != 6 {
            return Err(dim_err("mamba", format!("expected 6 inputs, got {}", inputs.len())));
        }
        let (d, m) = (inputs[0].cols(), inputs[2].cols());
        let ok = inputs[1].cols() == m
            && inputs[3].cols() == d
            && inputs[4].shape() == [d, m]
            && inputs[5].shape() == [d];
        if ok {
            Ok(())
        } else {
            let shapes: Vec<_> = inputs.iter().map(|x| x.shape().to_vec()).collect();
            Err(dim_err("mamba", format!("bad shapes {shapes:?}")))
        }
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let z = inputs[3].row(t);
        let a_log = inputs[4].data();
        let bias = inputs[5].data();
        let m = k.len();
        for i in 0..x.len() {
            let delta = softplus(z[i] + bias[i]);
            let dx = delta * x[i];
            for j in 0..m {
                let idx = i * m + j;
                a[idx] = (-a_log[idx].exp() * delta).exp();
                b[idx] = dx * k[j];
            }
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let z = inputs[3].row(t);
        let a_log = inputs[4].data();
        let bias = inputs[5].data();
        let m = k.len();
        let mut dk = vec![F::zero(); m];
        for i in 0..x.len() {
            let pre = z[i] + bias[i];
            let delta = softplus(pre);
            let mut d_delta = F::zero();
            let mut dx = F::zero();
            for j in 0..m {
                let idx = i * m + j;
                let a_cont = -a_log[idx].exp();
                let decay = (a_cont * delta).exp();
                let de = da[idx] * decay;
                d_delta += de * a_cont + db[idx] * x[i] * k[j];
                grads[4].data_mut()[idx] += de * delta * a_cont;
                dx += db[idx] * delta * k[j];
                dk[j] += db[idx] * delta * x[i];
            }
            grads[0].row_mut(t)[i] += dx;
            let dpre = d_delta * sigmoid(pre);
            grads[3].row_mut(t)[i] += dpre;
            grads[5].data_mut()[i] += dpre;
        }
        let gk = grads[2].row_mut(t);
        for j in 0..m {
            gk[j] += dk[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

fn track<F: Scalar>(tape: &mut Tape<F>, p: &Param<F>, nodes: &mut Vec<(ParamId, NodeId)>) -> NodeId {
    let n = tape.param(p);
    nodes.push((p.id, n));
    n
}

fn row_tensor<F: Scalar>(v: Vec<F>) -> Tensor<F> {
    let n = v.len();
    Tensor::new(vec![1, n], v).expect("row shape")
}

fn project_row<F: Scalar>(w: &Tensor<F>, x: &[F]) -> Tensor<F> {
    let mut out = vec![F::zero(); w.rows()];
    matvec(w, x, &mut out);
    row_tensor(out)
}

fn projection_row<F: Scalar>(p: &Projection<F>, x: &[F]) -> Tensor<F> {
    let mut out = vec![F::zero(); p.out_dim()];
    p.apply_row(x, &mut out);
    row_tensor(out)
}

/// Query/key projections for LA (`gamma = None`) and RetNet.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttnParams<F> {
    pub w_q: Param<F>,
    pub w_k: Param<F>,
    pub gamma: Option<F>,
}

impl<F: Scalar> LinearAttnParams<F> {
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        gamma: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(g) = gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::InvalidArgument(format!("retnet gamma {g} outside (0,1]")));
            }
        }
        Ok(LinearAttnParams {
            w_q: init_weight(reg, format!("{prefix}.w_q"), m, d, rng),
            w_k: init_weight(reg, format!("{prefix}.w_k"), m, d, rng),
            gamma: gamma.map(F::lit),
        })
    }
}

impl<F: Scalar> HasParams<F> for LinearAttnParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.w_q);
        f(&self.w_k);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
    }
}

impl<F: Scalar> RecurrentLayer<F> for LinearAttnParams<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(LinearAttnRule { gamma: self.gamma })
    }

    fn query_index(&self) -> Option<usize> {
        Some(1)
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.w_q.cols(), self.w_q.rows())
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let wq = track(tape, &self.w_q, nodes);
        let wk = track(tape, &self.w_k, nodes);
        Ok(vec![tape.matmul_nt(x, wq)?, tape.matmul_nt(x, wk)?])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        vec![project_row(&self.w_q, x), project_row(&self.w_k, x)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlaParams<F> {
    pub w_q: Param<F>,
    pub w_k: Param<F>,
    /// `[m×d]` gate logits.
    pub w_alpha: Projection<F>,
}

impl<F: Scalar> GlaParams<F> {
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GlaParams {
            w_q: init_weight(reg, format!("{prefix}.w_q"), m, d, rng),
            w_k: init_weight(reg, format!("{prefix}.w_k"), m, d, rng),
            w_alpha: Projection::init(reg, &format!("{prefix}.w_alpha"), m, d, rank.map(|r| r.min(m)), rng)?,
        })
    }
}

impl<F: Scalar> HasParams<F> for GlaParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.w_q);
        f(&self.w_k);
        self.w_alpha.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        self.w_alpha.visit_mut(f);
    }
}

impl<F: Scalar> RecurrentLayer<F> for GlaParams<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(GlaRule)
    }

    fn query_index(&self) -> Option<usize> {
        Some(1)
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.w_q.cols(), self.w_q.rows())
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let wq = track(tape, &self.w_q, nodes);
        let wk = track(tape, &self.w_k, nodes);
        let q = tape.matmul_nt(x, wq)?;
        let k = tape.matmul_nt(x, wk)?;
        let g = self.w_alpha.record(tape, x, nodes)?;
        Ok(vec![q, k, g])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        vec![
            project_row(&self.w_q, x),
            project_row(&self.w_k, x),
            projection_row(&self.w_alpha, x),
        ]
    }
}

/// Recurrence and input gates, each `[d×d]` and optionally low rank.
#[derive(Debug, Clone, PartialEq)]
pub struct GriffinParams<F> {
    pub w_a: Projection<F>,
    pub w_i: Projection<F>,
}

impl<F: Scalar> GriffinParams<F> {
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GriffinParams {
            w_a: Projection::init(reg, &format!("{prefix}.w_a"), d, d, rank, rng)?,
            w_i: Projection::init(reg, &format!("{prefix}.w_i"), d, d, rank, rng)?,
        })
    }
}

impl<F: Scalar> HasParams<F> for GriffinParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        self.w_a.visit(f);
        self.w_i.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.w_a.visit_mut(f);
        self.w_i.visit_mut(f);
    }
}

impl<F: Scalar> RecurrentLayer<F> for GriffinParams<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(GriffinRule)
    }

    fn query_index(&self) -> Option<usize> {
        None
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.w_a.out_dim(), 1)
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let za = self.w_a.record(tape, x, nodes)?;
        let zi = self.w_i.record(tape, x, nodes)?;
        Ok(vec![za, zi])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        vec![projection_row(&self.w_a, x), projection_row(&self.w_i, x)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hgrn2Params<F> {
    pub w_q: Param<F>,
    /// `[m×d]` forget-gate logits.
    pub w_f: Projection<F>,
}

impl<F: Scalar> Hgrn2Params<F> {
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Hgrn2Params {
            w_q: init_weight(reg, format!("{prefix}.w_q"), m, d, rng),
            w_f: Projection::init(reg, &format!("{prefix}.w_f"), m, d, rank.map(|r| r.min(m)), rng)?,
        })
    }
}

impl<F: Scalar> HasParams<F> for Hgrn2Params<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.w_q);
        self.w_f.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w_q);
        self.w_f.visit_mut(f);
    }
}

impl<F: Scalar> RecurrentLayer<F> for Hgrn2Params<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(Hgrn2Rule)
    }

    fn query_index(&self) -> Option<usize> {
        Some(1)
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.w_q.cols(), self.w_q.rows())
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let wq = track(tape, &self.w_q, nodes);
        let q = tape.matmul_nt(x, wq)?;
        let zf = self.w_f.record(tape, x, nodes)?;
        Ok(vec![q, zf])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        vec![project_row(&self.w_q, x), projection_row(&self.w_f, x)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams<F> {
    pub w_q: Param<F>,
    pub w_k: Param<F>,
    /// `[d×d]` step-size logits, optionally low rank.
    pub w_dt: Projection<F>,
    pub dt_bias: Param<F>,
    /// `A = −exp(a_log)`, `[d×m]`.
    pub a_log: Param<F>,
    /// Skip weight `D`.
    pub skip: Param<F>,
}

/// Inverse of softplus, for bias initialisation.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<F: Scalar> MambaParams<F> {
    /// `A[i][j] = −(j+1)`, `D = 1`, and a bias placing `Δ` log-uniformly in
    /// `[0.01, 0.1]` at zero input.
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let w_q = init_weight(reg, format!("{prefix}.w_q"), m, d, rng);
        let w_k = init_weight(reg, format!("{prefix}.w_k"), m, d, rng);
        let w_dt = Projection::init(reg, &format!("{prefix}.w_dt"), d, d, rank, rng)?;
        let (lo, hi) = (0.01f64.ln(), 0.1f64.ln());
        let bias: Vec<f64> = (0..d).map(|_| softplus_inv(rng.gen_range(lo..hi).exp())).collect();
        let dt_bias = reg.register(format!("{prefix}.dt_bias"), Tensor::from_f64(&[d], &bias)?);
        let a_log: Vec<f64> = (0..d * m).map(|idx| ((idx % m + 1) as f64).ln()).collect();
        let a_log = reg.register(format!("{prefix}.a_log"), Tensor::from_f64(&[d, m], &a_log)?);
        let skip = reg.register(format!("{prefix}.skip"), Tensor::ones(&[d]));
        Ok(MambaParams {
            w_q,
            w_k,
            w_dt,
            dt_bias,
            a_log,
            skip,
        })
    }

    /// `A = −exp(a_log)`.
    pub fn decay_matrix(&self) -> Tensor<F> {
        self.a_log.map(|v| -v.exp())
    }
}

impl<F: Scalar> HasParams<F> for MambaParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.w_q);
        f(&self.w_k);
        self.w_dt.visit(f);
        f(&self.dt_bias);
        f(&self.a_log);
        f(&self.skip);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        self.w_dt.visit_mut(f);
        f(&mut self.dt_bias);
        f(&mut self.a_log);
        f(&mut self.skip);
    }
}

impl<F: Scalar> RecurrentLayer<F> for MambaParams<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(MambaRule)
    }

    fn query_index(&self) -> Option<usize> {
        Some(1)
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.w_q.cols(), self.w_q.rows())
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let wq = track(tape, &self.w_q, nodes);
        let wk = track(tape, &self.w_k, nodes);
        let q = tape.matmul_nt(x, wq)?;
        let k = tape.matmul_nt(x, wk)?;
        let z = self.w_dt.record(tape, x, nodes)?;
        let a_log = track(tape, &self.a_log, nodes);
        let bias = track(tape, &self.dt_bias, nodes);
        Ok(vec![q, k, z, a_log, bias])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        vec![
            project_row(&self.w_q, x),
            project_row(&self.w_k, x),
            projection_row(&self.w_dt, x),
            self.a_log.value.clone(),
            self.dt_bias.value.clone(),
        ]
    }

    fn skip(&self) -> Option<&Param<F>> {
        Some(&self.skip)
    }
}
