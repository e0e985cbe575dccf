//! Fused tape op for a diagonal recurrence with a query readout
//! `o_t = S_t q_t`.
//!
//! Each kernel supplies a [`StepRule`] that turns per-step inputs into a
//! scan element `(a_t, b_t)` and maps `(∂a_t, ∂b_t)` back onto those inputs.
//! Forward runs through the scan engine in any [`ScanMode`]; backward
//! re-derives states from checkpoints and runs the reverse-time adjoint
//! `dS_{t−1} = a_t ⊙ dS_t`, `da_t = S_{t−1} ⊙ dS_t`, `db_t = dS_t`.

use crate::autodiff::{CustomOp, HasParams, NodeId, Param, ParamId, Tape};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::scan::{apply_into, scan, ScanElement, ScanMode};
use crate::tensor::Tensor;

/// States are re-derived in blocks of this many steps during backward.
pub const CHECKPOINT_EVERY: usize = 64;

/// Per-kernel recurrence: how inputs at step `t` form `(a_t, b_t)`.
///
/// `inputs[0]` is always `[T×D]`; the state is `[D×m]`.
pub trait StepRule<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// State width `m` implied by the inputs.
    fn state_cols(&self, inputs: &[&Tensor<F>]) -> usize;

    /// Check input shapes once before a sweep.
    fn validate(&self, inputs: &[&Tensor<F>]) -> Result<()>;

    fn element(&self, inputs: &[&Tensor<F>], t: usize, a: &mut [F], b: &mut [F]);

    /// Accumulate into `grads` (one tensor per input, same shapes) the
    /// contribution of step `t` given `∂L/∂a_t` and `∂L/∂b_t`.
    fn element_backward(
        &self,
        inputs: &[&Tensor<F>],
        t: usize,
        da: &[F],
        db: &[F],
        grads: &mut [Tensor<F>],
    );
}

/// `out[i] = Σⱼ S[i][j]·q[j]`, or the single state column when there is no
/// query.
#[inline]
pub fn readout<F: Scalar>(state: &[F], q: Option<&[F]>, m: usize, out: &mut [F]) {
    match q {
        Some(q) => {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &state[i * m..(i + 1) * m];
                let mut acc = F::zero();
                for (&s, &qj) in row.iter().zip(q) {
                    acc += s * qj;
                }
                *o = acc;
            }
        }
        None => out.copy_from_slice(state),
    }
}

pub struct RecurrenceOp<F: Scalar> {
    rule: Box<dyn StepRule<F>>,
    query: Option<usize>,
    mode: ScanMode,
    checkpoints: Vec<Vec<F>>,
}

impl<F: Scalar> RecurrenceOp<F> {
    pub fn new(rule: Box<dyn StepRule<F>>, query: Option<usize>, mode: ScanMode) -> Self {
        RecurrenceOp {
            rule,
            query,
            mode,
            checkpoints: Vec::new(),
        }
    }

    fn dims(&self, inputs: &[&Tensor<F>]) -> Result<(usize, usize, usize)> {
        self.rule.validate(inputs)?;
        let t_len = inputs[0].rows();
        let d = inputs[0].cols();
        let m = self.rule.state_cols(inputs);
        if self.query.is_none() && m != 1 {
            return Err(dim_err(self.rule.name(), "readout without query needs a single state column"));
        }
        if let Some(qi) = self.query {
            let q = inputs[qi];
            if q.rows() != t_len || q.cols() != m {
                return Err(dim_err(
                    self.rule.name(),
                    format!("query {:?}, expected [{t_len}×{m}]", q.shape()),
                ));
            }
        }
        Ok((t_len, d, m))
    }

    /// All states `S_1..S_T` and the outputs, via the configured scan mode.
    pub fn run(&mut self, inputs: &[&Tensor<F>]) -> Result<(Tensor<F>, Vec<Vec<F>>)> {
        let (t_len, d, m) = self.dims(inputs)?;
        let n = d * m;
        let mut out = Tensor::zeros(&[t_len, d]);
        let mut checkpoints = Vec::with_capacity(t_len.div_ceil(CHECKPOINT_EVERY));
        let q_row = |t: usize| self.query.map(|qi| inputs[qi].row(t));
        match self.mode {
            ScanMode::Sequential => {
                let mut s = vec![F::zero(); n];
                let mut next = vec![F::zero(); n];
                let mut a = vec![F::zero(); n];
                let mut b = vec![F::zero(); n];
                for t in 0..t_len {
                    if t % CHECKPOINT_EVERY == 0 {
                        checkpoints.push(s.clone());
                    }
                    self.rule.element(inputs, t, &mut a, &mut b);
                    apply_into(&a, &b, &s, &mut next);
                    std::mem::swap(&mut s, &mut next);
                    readout(&s, q_row(t), m, out.row_mut(t));
                }
            }
            mode => {
                let mut elems = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let mut a = Tensor::zeros(&[d, m]);
                    let mut b = Tensor::zeros(&[d, m]);
                    self.rule.element(inputs, t, a.data_mut(), b.data_mut());
                    elems.push(ScanElement { a, b });
                }
                let s0 = Tensor::zeros(&[d, m]);
                let states = scan(&elems, &s0, mode)?;
                for t in 0..t_len {
                    if t % CHECKPOINT_EVERY == 0 {
                        let prev = if t == 0 { s0.data() } else { states[t - 1].data() };
                        checkpoints.push(prev.to_vec());
                    }
                    readout(states[t].data(), q_row(t), m, out.row_mut(t));
                }
            }
        }
        Ok((out, checkpoints))
    }
}

impl<F: Scalar> CustomOp<F> for RecurrenceOp<F> {
    fn name(&self) -> &'static str {
        self.rule.name()
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let (out, checkpoints) = self.run(inputs)?;
        self.checkpoints = checkpoints;
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>> {
        let (t_len, d, m) = self.dims(inputs)?;
        if self.checkpoints.len() != t_len.div_ceil(CHECKPOINT_EVERY) {
            return Err(dim_err(self.rule.name(), "backward called without forward context"));
        }
        let n = d * m;
        let mut grads: Vec<Tensor<F>> = inputs.iter().map(|x| Tensor::zeros(x.shape())).collect();
        let mut ds = vec![F::zero(); n];
        let mut da = vec![F::zero(); n];

        for (block, ckpt) in self.checkpoints.iter().enumerate().rev() {
            let start = block * CHECKPOINT_EVERY;
            let end = (start + CHECKPOINT_EVERY).min(t_len);
            let len = end - start;
            // states[k] = S_{start+k-1}, k = 0..=len; decays kept for the sweep
            let mut states = Vec::with_capacity(len + 1);
            let mut decays = Vec::with_capacity(len);
            states.push(ckpt.clone());
            let mut b = vec![F::zero(); n];
            for t in start..end {
                let mut a = vec![F::zero(); n];
                self.rule.element(inputs, t, &mut a, &mut b);
                let mut next = vec![F::zero(); n];
                apply_into(&a, &b, states.last().expect("state"), &mut next);
                states.push(next);
                decays.push(a);
            }
            for t in (start..end).rev() {
                let k = t - start;
                let s_t = &states[k + 1];
                let s_prev = &states[k];
                let go = grad_output.row(t);
                match self.query {
                    Some(qi) => {
                        let q = inputs[qi].row(t);
                        let dq = grads[qi].row_mut(t);
                        for i in 0..d {
                            let g = go[i];
                            let row = &s_t[i * m..(i + 1) * m];
                            let drow = &mut ds[i * m..(i + 1) * m];
                            for j in 0..m {
                                dq[j] += row[j] * g;
                                drow[j] += g * q[j];
                            }
                        }
                    }
                    None => {
                        for (dsi, &g) in ds.iter_mut().zip(go) {
                            *dsi += g;
                        }
                    }
                }
                for ((dai, &dsi), &sp) in da.iter_mut().zip(&ds).zip(s_prev) {
                    *dai = dsi * sp;
                }
                self.rule.element_backward(inputs, t, &da, &ds, &mut grads);
                for (dsi, &a) in ds.iter_mut().zip(&decays[k]) {
                    *dsi *= a;
                }
            }
        }
        Ok(grads)
    }
}

/// One recurrent step on single-row inputs, for constant-memory decoding.
/// Uses the same element and readout arithmetic as the fused op.
pub fn decode_step_with<F: Scalar>(
    rule: &dyn StepRule<F>,
    inputs: &[&Tensor<F>],
    query: Option<usize>,
    state: &mut [F],
    out: &mut [F],
) {
    let n = state.len();
    let m = rule.state_cols(inputs);
    let mut a = vec![F::zero(); n];
    let mut b = vec![F::zero(); n];
    rule.element(inputs, 0, &mut a, &mut b);
    let prev = state.to_vec();
    apply_into(&a, &b, &prev, state);
    readout(state, query.map(|qi| inputs[qi].row(0)), m, out);
}

/// A layer whose output is a [`RecurrenceOp`] over its own projections of
/// the channel stream `x`.
pub trait RecurrentLayer<F: Scalar>: HasParams<F> + Send + Sync {
    fn rule(&self) -> Box<dyn StepRule<F>>;

    /// Index of the query among the rule inputs, if the readout uses one.
    fn query_index(&self) -> Option<usize>;

    /// `(d, m)` of the state.
    fn state_shape(&self) -> (usize, usize);

    /// Rule inputs after `x`, recorded on the tape. Parameter nodes are
    /// appended to `nodes`.
    fn record_inputs(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>)
        -> Result<Vec<NodeId>>;

    /// Rule inputs after `x` for a single row, with the same arithmetic as
    /// [`record_inputs`](Self::record_inputs).
    fn row_inputs(&self, x: &[F]) -> Vec<Tensor<F>>;

    /// Per-channel skip weight added as `o + x⊙D`.
    fn skip(&self) -> Option<&Param<F>> {
        None
    }
}

/// Record `x [T×d] → o [T×d]`.
pub fn record_layer<F: Scalar>(
    layer: &dyn RecurrentLayer<F>,
    tape: &mut Tape<F>,
    x: NodeId,
    mode: ScanMode,
    nodes: &mut Vec<(ParamId, NodeId)>,
) -> Result<NodeId> {
    let mut inputs = vec![x];
    inputs.extend(layer.record_inputs(tape, x, nodes)?);
    let op = RecurrenceOp::new(layer.rule(), layer.query_index(), mode);
    let out = tape.custom(&inputs, Box::new(op))?;
    match layer.skip() {
        Some(skip) => {
            let w = tape.param(skip);
            nodes.push((skip.id, w));
            let direct = tape.mul(x, w)?;
            tape.add(out, direct)
        }
        None => Ok(out),
    }
}

/// Tape-free sequence forward from a zero state.
pub fn forward_layer<F: Scalar>(layer: &dyn RecurrentLayer<F>, x: &Tensor<F>, mode: ScanMode) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let out = record_layer(layer, &mut tape, xn, mode, &mut Vec::new())?;
    Ok(tape.value(out).clone())
}

/// One decoding step: updates `state` (`d·m` values) and writes `o_t`.
pub fn decode_layer<F: Scalar>(layer: &dyn RecurrentLayer<F>, state: &mut [F], x: &[F], out: &mut [F]) -> Result<()> {
    let (d, m) = layer.state_shape();
    if x.len() != d || state.len() != d * m || out.len() != d {
        return Err(dim_err(
            "decode",
            format!("x {}, state {}, out {} vs [{d}×{m}]", x.len(), state.len(), out.len()),
        ));
    }
    let mut inputs = vec![Tensor::new(vec![1, d], x.to_vec())?];
    inputs.extend(layer.row_inputs(x));
    let refs: Vec<&Tensor<F>> = inputs.iter().collect();
    let rule = layer.rule();
    rule.validate(&refs)?;
    decode_step_with(rule.as_ref(), &refs, layer.query_index(), state, out);
    if let Some(skip) = layer.skip() {
        for ((o, &xi), &w) in out.iter_mut().zip(x).zip(skip.data()) {
            *o += xi * w;
        }
    }
    Ok(())
}
