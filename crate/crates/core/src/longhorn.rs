//! The Longhorn layer.
//!
//! Each channel `i` of the input `x_t ∈ R^d` drives its own state row
//! `s_i ∈ R^m`, updated as the exact minimizer of
//! `‖s − s_prev‖² + β(sᵀk − x)²`, which in closed form is
//! `s = s_prev + Δ(x − s_prevᵀk)k` with `Δ = β/(1 + βkᵀk)`. Training uses the
//! diagonal form `S' = (1 − Δ⊗k²) ⊙ S + (Δ⊙x) ⊗ k` so that states compose
//! through the scan engine; the readout is `o = Sq`.

use rand::Rng;

use crate::autodiff::{HasParams, NodeId, Param, ParamId, ParamRegistry, Tape};
use crate::linear::{init_weight, Projection};
use crate::error::{dim_err, Result};
use crate::recurrence::{decode_layer, readout, record_layer, RecurrenceOp, RecurrentLayer, StepRule};
use crate::scalar::{sigmoid, Scalar};
use crate::scan::{apply_into, ScanElement, ScanMode};
use crate::tensor::{matvec, Tensor};

/// Default low rank for the β projection.
pub fn default_beta_rank(d: usize) -> usize {
    (d / 16).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LonghornParams<F> {
    /// `[m×d]`
    pub w_q: Param<F>,
    /// `[m×d]`
    pub w_k: Param<F>,
    /// `[d×d]`, optionally low rank.
    pub w_beta: Projection<F>,
}

impl<F: Scalar> LonghornParams<F> {
    /// Uniform `±1/√fan_in` weights. `beta_rank: None` gives a dense `W_β`.
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        beta_rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(dim_err("longhorn", "d and m must be positive"));
        }
        let w_q = init_weight(reg, format!("{prefix}.w_q"), m, d, rng);
        let w_k = init_weight(reg, format!("{prefix}.w_k"), m, d, rng);
        let w_beta = Projection::init(reg, &format!("{prefix}.w_beta"), d, d, beta_rank, rng)?;
        Ok(LonghornParams { w_q, w_k, w_beta })
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn m(&self) -> usize {
        self.w_q.rows()
    }

    /// Record `x [T×d] → o [T×d]` on the tape.
    pub fn record(&self, tape: &mut Tape<F>, x: NodeId, mode: ScanMode) -> Result<NodeId> {
        record_layer(self, tape, x, mode, &mut Vec::new())
    }
}

impl<F: Scalar> RecurrentLayer<F> for LonghornParams<F> {
    fn rule(&self) -> Box<dyn StepRule<F>> {
        Box::new(LonghornRule)
    }

    fn query_index(&self) -> Option<usize> {
        Some(1)
    }

    fn state_shape(&self) -> (usize, usize) {
        (self.d(), self.m())
    }

    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<Vec<NodeId>> {
        let wq = tape.param(&self.w_q);
        let wk = tape.param(&self.w_k);
        nodes.push((self.w_q.id, wq));
        nodes.push((self.w_k.id, wk));
        let q = tape.matmul_nt(x, wq)?;
        let k = tape.matmul_nt(x, wk)?;
        let p = self.w_beta.record(tape, x, nodes)?;
        Ok(vec![q, k, p])
    }

    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>> {
        let (d, m) = (self.d(), self.m());
        let mut q = vec![F::zero(); m];
        let mut k = vec![F::zero(); m];
        let mut p = vec![F::zero(); d];
        matvec(&self.w_q, x, &mut q);
        matvec(&self.w_k, x, &mut k);
        self.w_beta.apply_row(x, &mut p);
        [(m, q), (m, k), (d, p)]
            .into_iter()
            .map(|(n, v)| Tensor::new(vec![1, n], v).expect("row shape"))
            .collect()
    }
}

impl<F: Scalar> HasParams<F> for LonghornParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.w_q);
        f(&self.w_k);
        self.w_beta.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        self.w_beta.visit_mut(f);
    }
}

/// Per-step quantities for one input row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs<F> {
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub beta: Vec<F>,
    pub delta: Vec<F>,
    pub x: Vec<F>,
}

/// Recurrent memory `S ∈ R^{d×m}`, zero at sequence start.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix<F> {
    pub s: Tensor<F>,
}

impl<F: Scalar> StateMatrix<F> {
    pub fn zeros(d: usize, m: usize) -> Self {
        StateMatrix {
            s: Tensor::zeros(&[d, m]),
        }
    }
}

#[inline]
fn key_energy<F: Scalar>(k: &[F]) -> F {
    k.iter().fold(F::zero(), |acc, &v| acc + v * v)
}

#[inline]
fn step_size<F: Scalar>(beta: F, kk: F) -> F {
    beta / (F::one() + beta * kk)
}

/// Row `i` of the diagonal transition: `a_j = 1 − Δ_i k_j²`, `b_j = (Δ_i x_i) k_j`.
#[inline]
fn fill_row<F: Scalar>(delta: F, x: F, k: &[F], a: &mut [F], b: &mut [F]) {
    let dx = delta * x;
    for ((aj, bj), &kj) in a.iter_mut().zip(b.iter_mut()).zip(k) {
        *aj = F::one() - delta * (kj * kj);
        *bj = dx * kj;
    }
}

pub fn project<F: Scalar>(x: &[F], params: &LonghornParams<F>) -> StepInputs<F> {
    let (d, m) = (params.d(), params.m());
    let mut q = vec![F::zero(); m];
    let mut k = vec![F::zero(); m];
    let mut beta = vec![F::zero(); d];
    matvec(&params.w_q, x, &mut q);
    matvec(&params.w_k, x, &mut k);
    params.w_beta.apply_row(x, &mut beta);
    beta.iter_mut().for_each(|b| *b = sigmoid(*b));
    let kk = key_energy(&k);
    let delta = beta.iter().map(|&b| step_size(b, kk)).collect();
    StepInputs {
        q,
        k,
        beta,
        delta,
        x: x.to_vec(),
    }
}

/// `‖s − s_prev‖² + β(sᵀk − x)²`.
pub fn objective<F: Scalar>(s: &[F], s_prev: &[F], k: &[F], x: F, beta: F) -> F {
    let reg = s
        .iter()
        .zip(s_prev)
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let r = dot(s, k) - x;
    reg + beta * r * r
}

/// Gradient of [`objective`] with respect to `s`.
pub fn objective_grad<F: Scalar>(s: &[F], s_prev: &[F], k: &[F], x: F, beta: F) -> Vec<F> {
    let two = F::lit(2.0);
    let r = dot(s, k) - x;
    s.iter()
        .zip(s_prev)
        .zip(k)
        .map(|((&si, &pi), &ki)| two * (si - pi) + two * beta * r * ki)
        .collect()
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Closed-form minimizer of [`objective`]: `s_prev + Δ(x − s_prevᵀk)k`.
pub fn step_exact<F: Scalar>(s_prev: &[F], k: &[F], x: F, beta: F) -> Vec<F> {
    step_exact_signed(s_prev, k, x, beta, false)
}

/// [`step_exact`] with an optional sign flip on `Δ`, used to show that the
/// verification suite catches a broken update.
#[doc(hidden)]
pub fn step_exact_signed<F: Scalar>(s_prev: &[F], k: &[F], x: F, beta: F, flip_delta: bool) -> Vec<F> {
    let mut delta = step_size(beta, key_energy(k));
    if flip_delta {
        delta = -delta;
    }
    let r = x - dot(s_prev, k);
    s_prev.iter().zip(k).map(|(&s, &kj)| s + delta * r * kj).collect()
}

pub fn step_diagonal<F: Scalar>(state: &StateMatrix<F>, inputs: &StepInputs<F>) -> Result<StateMatrix<F>> {
    let (d, m) = (state.s.rows(), state.s.cols());
    if inputs.k.len() != m || inputs.delta.len() != d || inputs.x.len() != d {
        return Err(dim_err(
            "step_diagonal",
            format!(
                "state [{d}×{m}] vs k {}, Δ {}, x {}",
                inputs.k.len(),
                inputs.delta.len(),
                inputs.x.len()
            ),
        ));
    }
    let mut next = Tensor::zeros(&[d, m]);
    let mut a = vec![F::zero(); m];
    let mut b = vec![F::zero(); m];
    for i in 0..d {
        fill_row(inputs.delta[i], inputs.x[i], &inputs.k, &mut a, &mut b);
        apply_into(&a, &b, state.s.row(i), next.row_mut(i));
    }
    Ok(StateMatrix { s: next })
}

/// Scan elements for a whole sequence `x [T×d]`.
pub fn make_scan_elements<F: Scalar>(x: &Tensor<F>, params: &LonghornParams<F>) -> Result<Vec<ScanElement<F>>> {
    let (q, k, p) = projections(x, params)?;
    let inputs = [x, &q, &k, &p];
    LonghornRule.validate(&inputs)?;
    let (d, m) = (params.d(), params.m());
    Ok((0..x.rows())
        .map(|t| {
            let mut a = Tensor::zeros(&[d, m]);
            let mut b = Tensor::zeros(&[d, m]);
            LonghornRule.element(&inputs, t, a.data_mut(), b.data_mut());
            ScanElement { a, b }
        })
        .collect())
}

fn projections<F: Scalar>(x: &Tensor<F>, params: &LonghornParams<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if x.rank() != 2 || x.cols() != params.d() {
        return Err(dim_err("longhorn", format!("input {:?}, expected [T×{}]", x.shape(), params.d())));
    }
    let q = x.matmul_nt(&params.w_q)?;
    let k = x.matmul_nt(&params.w_k)?;
    let p = params.w_beta.apply(x)?;
    Ok((q, k, p))
}

/// Outputs `o_{1:T}` for `x [T×d]`, starting from a zero state.
pub fn forward_sequence<F: Scalar>(x: &Tensor<F>, params: &LonghornParams<F>, mode: ScanMode) -> Result<Tensor<F>> {
    let (q, k, p) = projections(x, params)?;
    let mut op = RecurrenceOp::new(Box::new(LonghornRule), Some(1), mode);
    Ok(op.run(&[x, &q, &k, &p])?.0)
}

/// One constant-memory step: project, update `state` in place, return `o_t`.
pub fn decode_step<F: Scalar>(state: &mut StateMatrix<F>, x: &[F], params: &LonghornParams<F>) -> Result<Vec<F>> {
    if state.s.shape() != [params.d(), params.m()] {
        return Err(dim_err("decode_step", format!("state {:?}", state.s.shape())));
    }
    let mut out = vec![F::zero(); params.d()];
    decode_layer(params, state.s.data_mut(), x, &mut out)?;
    Ok(out)
}

/// Gradients of `Σ_t ⟨grad_out_t, o_t⟩` for a single layer.
#[derive(Debug, Clone)]
pub struct SequenceGrads<F> {
    pub x: Tensor<F>,
    pub params: Vec<(ParamId, Tensor<F>)>,
}

pub fn backward_sequence<F: Scalar>(
    x: &Tensor<F>,
    params: &LonghornParams<F>,
    mode: ScanMode,
    grad_out: &Tensor<F>,
) -> Result<SequenceGrads<F>> {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let mut nodes = Vec::new();
    let out = record_layer(params, &mut tape, xn, mode, &mut nodes)?;
    let grads = tape.backward_seeded(out, grad_out.clone())?;
    let grad_of = |n: NodeId| {
        grads
            .wrt(n)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(n).shape()))
    };
    Ok(SequenceGrads {
        x: grad_of(xn),
        params: nodes.into_iter().map(|(id, n)| (id, grad_of(n))).collect(),
    })
}

/// Step rule over inputs `[x, q, k, p]` with `p` the pre-sigmoid β logits.
pub struct LonghornRule;

impl<F: Scalar> StepRule<F> for LonghornRule {
    fn name(&self) -> &'static str {
        "longhorn"
    }

    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize {
        inputs[2].cols()
    }

    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()> {
        if inputs.len() != 4 {
            return Err(dim_err("longhorn", format!("expected 4 inputs, got {}", inputs.len())));
        }
        let (x, q, k, p) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let t = x.rows();
        let ok = x.rank() == 2
            && q.rank() == 2
            && k.rank() == 2
            && p.rank() == 2
            && q.shape() == k.shape()
            && p.shape() == x.shape()
            && k.rows() == t;
        if ok {
            Ok(())
        } else {
            Err(dim_err(
                "longhorn",
                format!(
                    "x {:?}, q {:?}, k {:?}, β {:?}",
                    x.shape(),
                    q.shape(),
                    k.shape(),
                    p.shape()
                ),
            ))
        }
    }

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let p = inputs[3].row(t);
        let m = k.len();
        let kk = key_energy(k);
        for i in 0..x.len() {
            let delta = step_size(sigmoid(p[i]), kk);
            fill_row(delta, x[i], k, &mut a[i * m..(i + 1) * m], &mut b[i * m..(i + 1) * m]);
        }
    }

    fn element_backward(&self, inputs: &[&Tensor<F>], t: usize, da: &[F], db: &[F], grads: &mut [Tensor<F>]) {
        let x = inputs[0].row(t);
        let k = inputs[2].row(t);
        let p = inputs[3].row(t);
        let m = k.len();
        let two = F::lit(2.0);
        let kk = key_energy(k);
        let mut dk = vec![F::zero(); m];
        let mut dkk = F::zero();
        for i in 0..x.len() {
            let beta = sigmoid(p[i]);
            let denom = F::one() + beta * kk;
            let delta = beta / denom;
            let da_row = &da[i * m..(i + 1) * m];
            let db_row = &db[i * m..(i + 1) * m];
            let mut d_delta = F::zero();
            let mut dx = F::zero();
            for j in 0..m {
                let kj = k[j];
                d_delta += db_row[j] * x[i] * kj - da_row[j] * kj * kj;
                dx += db_row[j] * delta * kj;
                dk[j] += db_row[j] * delta * x[i] - two * da_row[j] * delta * kj;
            }
            grads[0].row_mut(t)[i] += dx;
            let d_beta = d_delta / (denom * denom);
            grads[3].row_mut(t)[i] += d_beta * beta * (F::one() - beta);
            dkk -= d_delta * delta * delta;
        }
        let gk = grads[2].row_mut(t);
        for j in 0..m {
            gk[j] += dk[j] + two * k[j] * dkk;
        }
    }
}

/// `o = S q` for an explicit state; exposed for oracles.
pub fn state_readout<F: Scalar>(state: &StateMatrix<F>, q: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); state.s.rows()];
    readout(state.s.data(), Some(q), state.s.cols(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::scan_sequential;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn layer(d: usize, m: usize, rank: Option<usize>, seed: u64) -> LonghornParams<f64> {
        let mut reg = ParamRegistry::new();
        LonghornParams::init(&mut reg, "l", d, m, rank, &mut rng(seed)).unwrap()
    }

    /// Minimizes the objective by conjugate gradients on its normal equations
    /// `(I + βkkᵀ) s = s_prev + βkx`, using only matrix-free products.
    fn minimize_oracle(s_prev: &[f64], k: &[f64], x: f64, beta: f64) -> Vec<f64> {
        let n = s_prev.len();
        let apply = |v: &[f64]| -> Vec<f64> {
            let kv: f64 = k.iter().zip(v).map(|(a, b)| a * b).sum();
            v.iter().zip(k).map(|(vi, ki)| vi + beta * kv * ki).collect()
        };
        let rhs: Vec<f64> = s_prev.iter().zip(k).map(|(s, ki)| s + beta * ki * x).collect();
        let mut s = vec![0.0; n];
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        for _ in 0..4 * n {
            if rr < 1e-30 {
                break;
            }
            let ap = apply(&p);
            let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                s[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            for i in 0..n {
                p[i] = r[i] + rr_new / rr * p[i];
            }
            rr = rr_new;
        }
        s
    }

    #[test]
    fn project_zero_input() {
        let p = layer(4, 3, Some(1), 1);
        let inp = project(&[0.0; 4], &p);
        assert!(inp.q.iter().chain(&inp.k).all(|&v| v == 0.0));
        assert!(inp.beta.iter().all(|&b| b == 0.5));
        assert!(inp.delta.iter().all(|&d| d == 0.5));
    }

    #[test]
    fn large_keys_shrink_delta() {
        let beta = 0.7;
        let mut last = 1.0;
        for scale in [1e1, 1e3, 1e6] {
            let d = step_size(beta, key_energy(&[scale, scale]));
            assert!(d < last);
            last = d;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn project_matches_direct_formula() {
        for rank in [None, Some(1)] {
            let p = layer(2, 2, rank, 7);
            let x = [0.3, -1.2];
            let inp = project(&x, &p);
            let w = |t: &Tensor<f64>, i: usize, j: usize| t.data()[i * t.cols() + j];
            let wq = &p.w_q.value;
            let wk = &p.w_k.value;
            let q = [w(wq, 0, 0) * x[0] + w(wq, 0, 1) * x[1], w(wq, 1, 0) * x[0] + w(wq, 1, 1) * x[1]];
            let k = [w(wk, 0, 0) * x[0] + w(wk, 0, 1) * x[1], w(wk, 1, 0) * x[0] + w(wk, 1, 1) * x[1]];
            let wb = match &p.w_beta {
                Projection::Dense(m) => m.value.clone(),
                Projection::Factored { down, up } => up.value.matmul(&down.value).unwrap(),
            };
            let kk = k[0] * k[0] + k[1] * k[1];
            for i in 0..2 {
                let z = w(&wb, i, 0) * x[0] + w(&wb, i, 1) * x[1];
                let beta = 1.0 / (1.0 + (-z).exp());
                assert!((inp.beta[i] - beta).abs() < 1e-12);
                assert!((inp.delta[i] - beta / (1.0 + beta * kk)).abs() < 1e-12);
                assert!((inp.q[i] - q[i]).abs() < 1e-12);
                assert!((inp.k[i] - k[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let s = [0.4, -1.0];
        assert_eq!(objective(&s, &s, &[1.0, 2.0], 3.0, 0.0), 0.0);
        let r: f64 = 0.4 + -2.0 - 3.0;
        assert!((objective(&s, &s, &[1.0, 2.0], 3.0, 0.6) - 0.6 * r * r).abs() < 1e-15);
        let v: f64 = objective(&[4.0 / 3.0, 1.0 / 3.0], &[1.0, 0.0], &[1.0, 1.0], 2.0, 1.0);
        assert!((v - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn step_exact_examples() {
        let s_prev = [0.5, -2.0, 1.0];
        assert_eq!(step_exact(&s_prev, &[1.0, 1.0, 1.0], 3.0, 0.0), s_prev.to_vec());
        assert_eq!(step_exact(&s_prev, &[0.0; 3], 3.0, 0.9), s_prev.to_vec());

        let s: Vec<f64> = step_exact(&[1.0, 0.0], &[1.0, 1.0], 2.0, 1.0);
        assert!((s[0] - 4.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let err = s[0] + s[1] - 2.0;
        assert!((err + 1.0 / 3.0).abs() < 1e-15);
        assert!((err - (1.0 - 2.0) / 3.0).abs() < 1e-15);
        let oracle = minimize_oracle(&[1.0, 0.0], &[1.0, 1.0], 2.0, 1.0);
        assert!(s.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn step_exact_matches_numeric_minimizer() {
        let mut r = rng(3);
        for m in [1, 4, 17, 64] {
            let s_prev = normals(m, &mut r);
            let k = normals(m, &mut r);
            let x: f64 = StandardNormal.sample(&mut r);
            let beta = r.gen_range(0.01..0.99);
            let s = step_exact(&s_prev, &k, x, beta);
            let oracle = minimize_oracle(&s_prev, &k, x, beta);
            let diff = s.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "m={m} diff={diff}");
        }
    }

    #[test]
    fn flipped_delta_is_not_optimal() {
        let s: Vec<f64> = step_exact_signed(&[1.0, 0.0], &[1.0, 1.0], 2.0, 1.0, true);
        let g: Vec<f64> = objective_grad(&s, &[1.0, 0.0], &[1.0, 1.0], 2.0, 1.0);
        assert!(g.iter().any(|v| v.abs() > 0.1));
    }

    fn inputs_for(delta: Vec<f64>, x: Vec<f64>, k: Vec<f64>) -> StepInputs<f64> {
        StepInputs {
            q: vec![0.0; k.len()],
            beta: delta.clone(),
            k,
            delta,
            x,
        }
    }

    #[test]
    fn step_diagonal_examples() {
        let mut st = StateMatrix::zeros(2, 3);
        st.s.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let same = step_diagonal(&st, &inputs_for(vec![0.0, 0.0], vec![1.0, 2.0], vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(same, st);

        let z = StateMatrix::zeros(1, 2);
        let out = step_diagonal(&z, &inputs_for(vec![0.25], vec![2.0], vec![1.0, -3.0])).unwrap();
        assert_eq!(out.s.data(), &[0.5, -1.5]);

        let mut s1 = StateMatrix::zeros(1, 2);
        s1.s.data_mut()[0] = 1.0;
        let out = step_diagonal(&s1, &inputs_for(vec![1.0 / 3.0], vec![2.0], vec![1.0, 1.0])).unwrap();
        assert!((out.s.data()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((out.s.data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let bad = step_diagonal(&s1, &inputs_for(vec![0.1], vec![2.0], vec![1.0]));
        assert!(bad.is_err());
    }

    #[test]
    fn scan_of_elements_equals_step_loop() {
        let p = layer(5, 3, Some(1), 11);
        let x = Tensor::<f64>::randn(&[5, 5], 1.0, &mut rng(12));
        let elems = make_scan_elements(&x, &p).unwrap();
        let states = scan_sequential(&elems, &Tensor::zeros(&[5, 3])).unwrap();
        let mut st = StateMatrix::zeros(5, 3);
        for t in 0..5 {
            st = step_diagonal(&st, &project(x.row(t), &p)).unwrap();
            assert_eq!(st.s, states[t]);
        }
    }

    #[test]
    fn forward_t1_closed_form() {
        let p = layer(4, 3, Some(2), 5);
        let x = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng(6));
        let o = forward_sequence(&x, &p, ScanMode::Sequential).unwrap();
        let inp = project(x.row(0), &p);
        let kq: f64 = inp.k.iter().zip(&inp.q).map(|(a, b)| a * b).sum();
        for i in 0..4 {
            let want = inp.delta[i] * inp.x[i] * kq;
            assert!((o.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_query_weights_give_zero_output() {
        let mut p = layer(4, 3, None, 5);
        p.w_q.value.fill(0.0);
        let x = Tensor::<f64>::randn(&[9, 4], 1.0, &mut rng(6));
        let o = forward_sequence(&x, &p, ScanMode::Parallel).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_modes_agree_on_sequence() {
        let p = layer(8, 4, Some(1), 21);
        let x = Tensor::<f64>::randn(&[64, 8], 1.0, &mut rng(22));
        let seq = forward_sequence(&x, &p, ScanMode::Sequential).unwrap();
        for mode in [ScanMode::Parallel, ScanMode::Chunked(16)] {
            let o = forward_sequence(&x, &p, mode).unwrap();
            assert!(o.max_abs_diff(&seq) <= 1e-10);
        }
    }

    #[test]
    fn decode_matches_sequence_path() {
        let p = layer(6, 4, Some(1), 31);
        let mut st = StateMatrix::zeros(6, 4);
        assert!(decode_step(&mut st, &[0.0; 6], &p).unwrap().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::randn(&[256, 6], 1.0, &mut rng(32));
        let seq = forward_sequence(&x, &p, ScanMode::Sequential).unwrap();
        let mut st = StateMatrix::zeros(6, 4);
        for t in 0..256 {
            let o = decode_step(&mut st, x.row(t), &p).unwrap();
            assert_eq!(o.as_slice(), seq.row(t), "step {t}");
        }
        let one = forward_sequence(&Tensor::new(vec![1, 6], x.row(0).to_vec()).unwrap(), &p, ScanMode::Sequential)
            .unwrap();
        assert_eq!(one.row(0), seq.row(0));
    }

    #[test]
    fn backward_zero_seed_gives_zero_grads() {
        let p = layer(4, 2, Some(1), 41);
        let x = Tensor::<f64>::randn(&[7, 4], 1.0, &mut rng(42));
        let g = backward_sequence(&x, &p, ScanMode::Sequential, &Tensor::zeros(&[7, 4])).unwrap();
        assert_eq!(g.x.max_abs(), 0.0);
        assert!(g.params.iter().all(|(_, t)| t.max_abs() == 0.0));
    }

    /// Single step on direct inputs: `o_i = Δ_i x_i (kᵀq)`.
    #[test]
    fn single_step_adjoint_matches_symbolic() {
        use crate::autodiff::CustomOp;
        let mut r = rng(51);
        let (d, m) = (3, 4);
        let x = Tensor::<f64>::randn(&[1, d], 1.0, &mut r);
        let q = Tensor::<f64>::randn(&[1, m], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[1, m], 1.0, &mut r);
        let pl = Tensor::<f64>::randn(&[1, d], 1.0, &mut r);
        let g = Tensor::<f64>::randn(&[1, d], 1.0, &mut r);
        let mut op = RecurrenceOp::new(Box::new(LonghornRule), Some(1), ScanMode::Sequential);
        let inputs = [&x, &q, &k, &pl];
        let out = op.forward(&inputs).unwrap();
        let grads = op.backward(&inputs, &out, &g).unwrap();

        let (xv, qv, kv, pv, gv) = (x.data(), q.data(), k.data(), pl.data(), g.data());
        let kk: f64 = kv.iter().map(|v| v * v).sum();
        let kq: f64 = kv.iter().zip(qv).map(|(a, b)| a * b).sum();
        let beta: Vec<f64> = pv.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let delta: Vec<f64> = beta.iter().map(|b| b / (1.0 + b * kk)).collect();
        for i in 0..d {
            assert!((grads[0].data()[i] - gv[i] * delta[i] * kq).abs() < 1e-12);
            let ddelta_dp = beta[i] * (1.0 - beta[i]) / (1.0 + beta[i] * kk).powi(2);
            assert!((grads[3].data()[i] - gv[i] * xv[i] * kq * ddelta_dp).abs() < 1e-12);
        }
        for j in 0..m {
            let dq: f64 = (0..d).map(|i| gv[i] * delta[i] * xv[i] * kv[j]).sum();
            assert!((grads[1].data()[j] - dq).abs() < 1e-12);
            let dk: f64 = (0..d)
                .map(|i| gv[i] * xv[i] * (delta[i] * qv[j] - kq * 2.0 * delta[i] * delta[i] * kv[j]))
                .sum();
            assert!((grads[2].data()[j] - dk).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_forward_context_is_an_error() {
        use crate::autodiff::CustomOp;
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let op = RecurrenceOp::new(Box::new(LonghornRule), Some(1), ScanMode::Sequential);
        let inputs = [&x, &q, &q, &x];
        assert!(op.backward(&inputs, &x, &x).is_err());
    }

    /// Central differences on `⟨G, o(x)⟩` across checkpoint boundaries.
    #[test]
    fn sequence_grads_match_finite_differences() {
        let (t_len, d, m) = (70, 3, 2);
        let mut p = layer(d, m, Some(1), 61);
        let x = Tensor::<f64>::randn(&[t_len, d], 0.7, &mut rng(62));
        let g = Tensor::<f64>::randn(&[t_len, d], 1.0, &mut rng(63));
        let loss = |x: &Tensor<f64>, p: &LonghornParams<f64>| -> f64 {
            let o = forward_sequence(x, p, ScanMode::Sequential).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let grads = backward_sequence(&x, &p, ScanMode::Parallel, &g).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for idx in [0, 5, 64 * d + 1, t_len * d - 1] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            assert!(rel(grads.x.data()[idx], num) < 1e-6, "x[{idx}]");
        }
        for (slot, (pid, grad)) in grads.params.iter().enumerate() {
            for idx in 0..grad.len() {
                let bump = |p: &mut LonghornParams<f64>, delta: f64| {
                    let mut k = 0;
                    p.visit_mut(&mut |w| {
                        if k == slot {
                            assert_eq!(w.id, *pid);
                            w.value.data_mut()[idx] += delta;
                        }
                        k += 1;
                    });
                };
                bump(&mut p, h);
                let up = loss(&x, &p);
                bump(&mut p, -2.0 * h);
                let down = loss(&x, &p);
                bump(&mut p, h);
                let num = (up - down) / (2.0 * h);
                assert!(rel(grad.data()[idx], num) < 1e-6, "param {slot}[{idx}]: {} vs {num}", grad.data()[idx]);
            }
        }
    }

    #[test]
    fn dense_and_factored_param_counts() {
        let dense = layer(32, 16, None, 1);
        let fact = layer(32, 16, Some(default_beta_rank(32)), 1);
        assert_eq!(dense.param_count(), 2 * 16 * 32 + 32 * 32);
        assert_eq!(fact.param_count(), 2 * 16 * 32 + 2 * 2 * 32);
        let mut reg = ParamRegistry::new();
        assert!(LonghornParams::<f64>::init(&mut reg, "x", 4, 2, Some(5), &mut rng(0)).is_err());
    }

    fn draw(m: usize, seed: u64) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let mut r = rng(seed);
        let s_prev = normals(m, &mut r);
        let k = normals(m, &mut r);
        let x: f64 = StandardNormal.sample(&mut r);
        let beta = r.gen_range(1e-6..1.0);
        (s_prev, k, x, beta)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn exact_step_is_optimal(m in 1usize..=64, seed in any::<u64>()) {
            let (s_prev, k, x, beta) = draw(m, seed);
            let s = step_exact(&s_prev, &k, x, beta);
            let r: f64 = s.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() - x;
            let grad_inf = s.iter().zip(&s_prev).zip(&k)
                .map(|((si, pi), ki)| (2.0 * (si - pi) + 2.0 * beta * r * ki).abs())
                .fold(0.0, f64::max);
            prop_assert!(grad_inf <= 1e-8, "grad {}", grad_inf);
            let best = objective(&s, &s_prev, &k, x, beta);
            prop_assert!(best <= objective(&s_prev, &s_prev, &k, x, beta));
            let mut pr = rng(seed ^ 0x5eed);
            for _ in 0..100 {
                let u = normals(m, &mut pr);
                let moved: Vec<f64> = s.iter().zip(&u).map(|(a, b)| a + 1e-3 * b).collect();
                prop_assert!(best <= objective(&moved, &s_prev, &k, x, beta));
            }
        }

        #[test]
        fn prediction_error_contracts(m in 1usize..=64, seed in any::<u64>()) {
            let (s_prev, k, x, beta) = draw(m, seed);
            let s = step_exact(&s_prev, &k, x, beta);
            let dot = |a: &[f64]| a.iter().zip(&k).map(|(u, v)| u * v).sum::<f64>();
            let kk = dot(&k);
            let before = dot(&s_prev) - x;
            let after = dot(&s) - x;
            let lhs = after.abs() * (1.0 + beta * kk);
            prop_assert!((lhs - before.abs()).abs() <= 1e-10 * before.abs().max(1e-300));
            prop_assert!(after.abs() < before.abs() || before == 0.0);
        }

        #[test]
        fn sherman_morrison_system_holds(m in 1usize..=64, seed in any::<u64>()) {
            let (s_prev, k, x, beta) = draw(m, seed);
            let s = step_exact(&s_prev, &k, x, beta);
            let ks: f64 = k.iter().zip(&s).map(|(a, b)| a * b).sum();
            for i in 0..m {
                let lhs = s[i] + beta * k[i] * ks;
                let rhs = s_prev[i] + beta * k[i] * x;
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn transitions_stay_in_unit_interval(seed in any::<u64>(), m in 1usize..=32, z in -30.0f64..30.0) {
            let mut r = rng(seed);
            let k: Vec<f64> = (0..m).map(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                n * 10f64.powf(r.gen_range(-3.0..3.0))
            }).collect();
            let beta = sigmoid(z);
            let mut a = vec![0.0; m];
            let mut b = vec![0.0; m];
            fill_row(step_size(beta, key_energy(&k)), 1.0, &k, &mut a, &mut b);
            prop_assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0), "{:?}", a);
        }
    }
}
