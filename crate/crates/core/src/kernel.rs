//! Selection of the sequence-mixing recurrence used inside a block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{HasParams, Param, ParamRegistry};
use crate::baselines::{GlaParams, GriffinParams, Hgrn2Params, LinearAttnParams, MambaParams};
use crate::error::{Error, Result};
use crate::longhorn::LonghornParams;
use crate::recurrence::RecurrentLayer;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Longhorn,
    La,
    RetNet,
    Gla,
    Griffin,
    Hgrn2,
    Mamba,
}

impl KernelKind {
    pub const ALL: [KernelKind; 7] = [
        KernelKind::Longhorn,
        KernelKind::La,
        KernelKind::RetNet,
        KernelKind::Gla,
        KernelKind::Griffin,
        KernelKind::Hgrn2,
        KernelKind::Mamba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Longhorn => "longhorn",
            KernelKind::La => "la",
            KernelKind::RetNet => "retnet",
            KernelKind::Gla => "gla",
            KernelKind::Griffin => "griffin",
            KernelKind::Hgrn2 => "hgrn2",
            KernelKind::Mamba => "mamba",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown kernel {s:?}")))
    }
}

/// Rank of the gate/step-size projections (`W_β`, GLA `α`, Griffin gates,
/// HGRN2 forget gate, Mamba `Δ`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankChoice {
    /// `max(1, d/16)`.
    Auto,
    Dense,
    Fixed(usize),
}

impl RankChoice {
    pub fn resolve(self, d: usize) -> Option<usize> {
        match self {
            RankChoice::Auto => Some(crate::longhorn::default_beta_rank(d)),
            RankChoice::Dense => None,
            RankChoice::Fixed(r) => Some(r),
        }
    }
}

impl fmt::Display for RankChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankChoice::Auto => f.write_str("auto"),
            RankChoice::Dense => f.write_str("dense"),
            RankChoice::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for RankChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RankChoice::Auto),
            "dense" => Ok(RankChoice::Dense),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&r| r > 0)
                .map(RankChoice::Fixed)
                .ok_or_else(|| Error::InvalidArgument(format!("rank must be auto, dense or a positive integer, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub rank: RankChoice,
    pub retnet_gamma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kind: KernelKind::Longhorn,
            rank: RankChoice::Auto,
            retnet_gamma: 1.0 - 1.0 / 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelParams<F> {
    Longhorn(LonghornParams<F>),
    LinearAttn(LinearAttnParams<F>),
    Gla(GlaParams<F>),
    Griffin(GriffinParams<F>),
    Hgrn2(Hgrn2Params<F>),
    Mamba(MambaParams<F>),
}

impl<F: Scalar> KernelParams<F> {
    /// Kernel over `d` channels with state width `m`.
    pub fn init<R: Rng + ?Sized>(
        cfg: &KernelConfig,
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rank = cfg.rank.resolve(d);
        Ok(match cfg.kind {
            KernelKind::Longhorn => KernelParams::Longhorn(LonghornParams::init(reg, prefix, d, m, rank, rng)?),
            KernelKind::La => KernelParams::LinearAttn(LinearAttnParams::init(reg, prefix, d, m, None, rng)?),
            KernelKind::RetNet => {
                KernelParams::LinearAttn(LinearAttnParams::init(reg, prefix, d, m, Some(cfg.retnet_gamma), rng)?)
            }
            KernelKind::Gla => KernelParams::Gla(GlaParams::init(reg, prefix, d, m, rank, rng)?),
            KernelKind::Griffin => KernelParams::Griffin(GriffinParams::init(reg, prefix, d, rank, rng)?),
            KernelKind::Hgrn2 => KernelParams::Hgrn2(Hgrn2Params::init(reg, prefix, d, m, rank, rng)?),
            KernelKind::Mamba => KernelParams::Mamba(MambaParams::init(reg, prefix, d, m, rank, rng)?),
        })
    }

    pub fn layer(&self) -> &dyn RecurrentLayer<F> {
        match self {
            KernelParams::Longhorn(p) => p,
            KernelParams::LinearAttn(p) => p,
            KernelParams::Gla(p) => p,
            KernelParams::Griffin(p) => p,
            KernelParams::Hgrn2(p) => p,
            KernelParams::Mamba(p) => p,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn RecurrentLayer<F> {
        match self {
            KernelParams::Longhorn(p) => p,
            KernelParams::LinearAttn(p) => p,
            KernelParams::Gla(p) => p,
            KernelParams::Griffin(p) => p,
            KernelParams::Hgrn2(p) => p,
            KernelParams::Mamba(p) => p,
        }
    }
}

impl<F: Scalar> HasParams<F> for KernelParams<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        match self {
            KernelParams::Longhorn(p) => p.visit(f),
            KernelParams::LinearAttn(p) => p.visit(f),
            KernelParams::Gla(p) => p.visit(f),
            KernelParams::Griffin(p) => p.visit(f),
            KernelParams::Hgrn2(p) => p.visit(f),
            KernelParams::Mamba(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.layer_mut().visit_mut(f)
    }
}
