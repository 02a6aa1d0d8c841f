use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Group tag reserved for attention parameters.
pub const ATTENTION_GROUP: &str = "attention";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyMode {
    L1,
    L2,
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(PenaltyMode::L1),
            "l2" => Ok(PenaltyMode::L2),
            other => Err(Error::Config(format!("unknown penalty mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScope {
    All,
    ExcludeAttention,
}

impl std::str::FromStr for PenaltyScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PenaltyScope::All),
            "exclude-attention" | "subset" => Ok(PenaltyScope::ExcludeAttention),
            other => Err(Error::Config(format!("unknown penalty scope `{other}`"))),
        }
    }
}

/// `strength · Σ penalty(w)` over in-scope entries. L1 sums absolute values,
/// L2 sums squares (no ½).
pub fn regularization_penalty(
    g: &mut Graph,
    params: &ParameterSet,
    mode: PenaltyMode,
    strength: f64,
    scope: PenaltyScope,
) -> Result<Var> {
    if !(strength >= 0.0) {
        return Err(Error::invalid(format!("penalty strength must be >= 0, got {strength}")));
    }
    let mut total: Option<Var> = None;
    if strength > 0.0 {
        for id in params.ids() {
            if scope == PenaltyScope::ExcludeAttention && params.group(id) == ATTENTION_GROUP {
                continue;
            }
            let w = g.param(params, id);
            let t = match mode {
                PenaltyMode::L1 => g.abs(w)?,
                PenaltyMode::L2 => g.square(w)?,
            };
            let s = g.sum(t)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }
    match total {
        Some(t) => g.scale(t, strength),
        None => Ok(g.scalar(0.0)),
    }
}
