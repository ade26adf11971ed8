//! The optimizer variants compared against ConBO.
//!
//! Every variant is an [`Engine`] configured by its [`EngineKind`]; they share
//! the ask/tell protocol, the candidate grid and the random-exploration rule.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    /// Population network plus user GP, generative replay with variance filter.
    Conbo,
    /// ConBO with the population model in control for the whole session.
    ConboNoGp,
    /// ConBO replaying every stored prediction regardless of variance.
    ConboNoFilter,
    /// Population network adapted online only, never retrained between users.
    BnnNoReplay,
    /// Population network retrained between users on all raw observations.
    BnnDirectReplay,
    /// One GP over every observation of every user.
    SingleGp,
    /// Transfer acquisition: averaged prior-user EI blended with the user GP.
    Taf,
    /// A fresh GP per user with a fixed number of random explorations.
    StandardBo,
}

impl EngineKind {
    pub const ALL: [EngineKind; 8] = [
        EngineKind::Conbo,
        EngineKind::ConboNoGp,
        EngineKind::ConboNoFilter,
        EngineKind::BnnNoReplay,
        EngineKind::BnnDirectReplay,
        EngineKind::SingleGp,
        EngineKind::Taf,
        EngineKind::StandardBo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Conbo => "conbo",
            EngineKind::ConboNoGp => "conbo_no_gp",
            EngineKind::ConboNoFilter => "conbo_no_filter",
            EngineKind::BnnNoReplay => "bnn_no_replay",
            EngineKind::BnnDirectReplay => "bnn_direct_replay",
            EngineKind::SingleGp => "single_gp",
            EngineKind::Taf => "taf",
            EngineKind::StandardBo => "standard_bo",
        }
    }

    /// Kinds that carry a population network.
    pub fn uses_population(self) -> bool {
        matches!(
            self,
            EngineKind::Conbo
                | EngineKind::ConboNoGp
                | EngineKind::ConboNoFilter
                | EngineKind::BnnNoReplay
                | EngineKind::BnnDirectReplay
        )
    }

    /// Kinds retrained by generative replay from the GP library.
    pub fn uses_replay(self) -> bool {
        matches!(self, EngineKind::Conbo | EngineKind::ConboNoGp | EngineKind::ConboNoFilter)
    }

    /// Kinds that keep every finished user's GP.
    pub fn keeps_library(self) -> bool {
        self.uses_replay() || self == EngineKind::Taf
    }

    /// Kinds that fit a GP to the current user's observations.
    pub fn fits_user_gp(self) -> bool {
        self.keeps_library() || self == EngineKind::StandardBo
    }

    /// Whether random explorations shrink from user to user.
    pub fn decays_exploration(self) -> bool {
        self != EngineKind::StandardBo
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownEngine(s.to_string()))
    }
}

/// Builds an engine of `kind` from a preset's engine settings.
pub fn make_engine(kind: EngineKind, config: &EngineConfig, seed: u64) -> Result<Engine> {
    Engine::new(kind, config.clone(), seed)
}

/// Like [`make_engine`] with the kind given by name.
pub fn make_engine_named(kind: &str, config: &EngineConfig, seed: u64) -> Result<Engine> {
    make_engine(kind.parse()?, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in EngineKind::ALL {
            assert_eq!(k.name().parse::<EngineKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!(matches!("nope".parse::<EngineKind>(), Err(Error::UnknownEngine(_))));
    }
}
