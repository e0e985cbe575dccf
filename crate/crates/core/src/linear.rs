//! Bias-free linear maps stored `[out×in]`, dense or as a rank-`r` product.

use rand::Rng;

use crate::autodiff::{NodeId, Param, ParamId, ParamRegistry, Tape};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{matvec, Tensor};

/// Uniform `±1/√fan_in` weight of shape `[rows×fan_in]`.
pub fn init_weight<F: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry,
    name: String,
    rows: usize,
    fan_in: usize,
    rng: &mut R,
) -> Param<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    reg.register(name, Tensor::uniform(&[rows, fan_in], bound, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection<F> {
    Dense(Param<F>),
    /// `W = up · down` with `down: [r×in]`, `up: [out×r]`.
    Factored { down: Param<F>, up: Param<F> },
}

impl<F: Scalar> Projection<F> {
    /// `rank: None` gives a dense map.
    pub fn init<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        out: usize,
        input: usize,
        rank: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        match rank {
            None => Ok(Projection::Dense(init_weight(reg, name.to_string(), out, input, rng))),
            Some(r) => {
                if r == 0 || r > input.min(out) {
                    return Err(dim_err("projection", format!("rank {r} outside 1..={}", input.min(out))));
                }
                Ok(Projection::Factored {
                    down: init_weight(reg, format!("{name}_down"), r, input, rng),
                    up: init_weight(reg, format!("{name}_up"), out, r, rng),
                })
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.rows(),
            Projection::Factored { up, .. } => up.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.cols(),
            Projection::Factored { down, .. } => down.cols(),
        }
    }

    /// One input row; same arithmetic as [`record`](Self::record).
    pub fn apply_row(&self, x: &[F], out: &mut [F]) {
        match self {
            Projection::Dense(w) => matvec(w, x, out),
            Projection::Factored { down, up } => {
                let mut h = vec![F::zero(); down.rows()];
                matvec(down, x, &mut h);
                matvec(up, &h, out);
            }
        }
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Projection::Dense(w) => x.matmul_nt(w),
            Projection::Factored { down, up } => x.matmul_nt(down)?.matmul_nt(up),
        }
    }

    /// `x [T×in] → [T×out]`. Parameter nodes are appended to `nodes`.
    pub fn record(&self, tape: &mut Tape<F>, x: NodeId, nodes: &mut Vec<(ParamId, NodeId)>) -> Result<NodeId> {
        let mut param = |tape: &mut Tape<F>, p: &Param<F>| {
            let n = tape.param(p);
            nodes.push((p.id, n));
            n
        };
        match self {
            Projection::Dense(w) => {
                let w = param(tape, w);
                tape.matmul_nt(x, w)
            }
            Projection::Factored { down, up } => {
                let down = param(tape, down);
                let up = param(tape, up);
                let h = tape.matmul_nt(x, down)?;
                tape.matmul_nt(h, up)
            }
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        match self {
            Projection::Dense(w) => f(w),
            Projection::Factored { down, up } => {
                f(down);
                f(up);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        match self {
            Projection::Dense(w) => f(w),
            Projection::Factored { down, up } => {
                f(down);
                f(up);
            }
        }
    }
}
