use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Heterogeneity level a strategy federates across.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Width,
    Depth,
    Topology,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Width => "width",
            Level::Depth => "depth",
            Level::Topology => "topology",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "width" => Ok(Level::Width),
            "depth" => Ok(Level::Depth),
            "topology" => Ok(Level::Topology),
            _ => Err(Error::InvalidArgument(format!("unknown heterogeneity level `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Fjord,
    Sheterofl,
    Fedrolex,
    Fedepth,
    Inclusivefl,
    Depthfl,
    Fedproto,
    Fedet,
    FedavgFull,
    FedavgSmallest,
}

impl StrategyId {
    pub const ALL: [StrategyId; 10] = [
        StrategyId::Fjord,
        StrategyId::Sheterofl,
        StrategyId::Fedrolex,
        StrategyId::Fedepth,
        StrategyId::Inclusivefl,
        StrategyId::Depthfl,
        StrategyId::Fedproto,
        StrategyId::Fedet,
        StrategyId::FedavgFull,
        StrategyId::FedavgSmallest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Fjord => "fjord",
            StrategyId::Sheterofl => "sheterofl",
            StrategyId::Fedrolex => "fedrolex",
            StrategyId::Fedepth => "fedepth",
            StrategyId::Inclusivefl => "inclusivefl",
            StrategyId::Depthfl => "depthfl",
            StrategyId::Fedproto => "fedproto",
            StrategyId::Fedet => "fedet",
            StrategyId::FedavgFull => "fedavg_full",
            StrategyId::FedavgSmallest => "fedavg_smallest",
        }
    }

    /// Heterogeneity level of an MHFL strategy; `None` for the baselines.
    pub fn level(self) -> Option<Level> {
        match self {
            StrategyId::Fjord | StrategyId::Sheterofl | StrategyId::Fedrolex => Some(Level::Width),
            StrategyId::Fedepth | StrategyId::Inclusivefl | StrategyId::Depthfl => Some(Level::Depth),
            StrategyId::Fedproto | StrategyId::Fedet => Some(Level::Topology),
            StrategyId::FedavgFull | StrategyId::FedavgSmallest => None,
        }
    }

    pub fn is_baseline(self) -> bool {
        self.level().is_none()
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// A strategy evaluated at a heterogeneity level. Baselines take the level
/// from the experiment; MHFL strategies always run at their own level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub strategy: StrategyId,
    pub level: Level,
}

impl Arm {
    pub fn new(strategy: StrategyId, level: Level) -> Self {
        Arm {
            strategy,
            level: strategy.level().unwrap_or(level),
        }
    }

    /// `sheterofl`, or `fedavg_smallest@depth` for baselines.
    pub fn label(&self) -> String {
        if self.strategy.is_baseline() {
            format!("{}@{}", self.strategy, self.level)
        } else {
            self.strategy.to_string()
        }
    }

    pub fn baseline(&self) -> Arm {
        Arm::new(StrategyId::FedavgSmallest, self.level)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
