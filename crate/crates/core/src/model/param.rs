use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Names one parameter tensor of a [`MoEModel`](super::MoEModel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embed,
    Router(usize),
    ExpertUp(usize, usize),
    ExpertDown(usize, usize),
    SharedUp(usize, usize),
    SharedDown(usize, usize),
    Head,
}

impl ParamId {
    /// Layer the tensor lives in, if any.
    pub fn layer(self) -> Option<usize> {
        match self {
            ParamId::Embed | ParamId::Head => None,
            ParamId::Router(l)
            | ParamId::ExpertUp(l, _)
            | ParamId::ExpertDown(l, _)
            | ParamId::SharedUp(l, _)
            | ParamId::SharedDown(l, _) => Some(l),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Embed => write!(f, "embed"),
            ParamId::Router(l) => write!(f, "layers.{l}.router"),
            ParamId::ExpertUp(l, e) => write!(f, "layers.{l}.experts.{e}.up"),
            ParamId::ExpertDown(l, e) => write!(f, "layers.{l}.experts.{e}.down"),
            ParamId::SharedUp(l, s) => write!(f, "layers.{l}.shared.{s}.up"),
            ParamId::SharedDown(l, s) => write!(f, "layers.{l}.shared.{s}.down"),
            ParamId::Head => write!(f, "head"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown tensor name `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["embed"] => Ok(ParamId::Embed),
            ["head"] => Ok(ParamId::Head),
            ["layers", l, "router"] => Ok(ParamId::Router(num(l)?)),
            ["layers", l, "experts", e, "up"] => Ok(ParamId::ExpertUp(num(l)?, num(e)?)),
            ["layers", l, "experts", e, "down"] => Ok(ParamId::ExpertDown(num(l)?, num(e)?)),
            ["layers", l, "shared", e, "up"] => Ok(ParamId::SharedUp(num(l)?, num(e)?)),
            ["layers", l, "shared", e, "down"] => Ok(ParamId::SharedDown(num(l)?, num(e)?)),
            _ => Err(bad()),
        }
    }
}
