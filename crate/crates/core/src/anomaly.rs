use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::Direction;
use crate::store::MetricKind;

/// The three availability-threatening anomaly types, each bound to one call
/// metric and one propagation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnomalyType {
    Performance,
    Reliability,
    Traffic,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 3] = [AnomalyType::Performance, AnomalyType::Reliability, AnomalyType::Traffic];

    pub fn metric(self) -> MetricKind {
        match self {
            AnomalyType::Performance => MetricKind::Rt,
            AnomalyType::Reliability => MetricKind::Ec,
            AnomalyType::Traffic => MetricKind::Qps,
        }
    }

    /// Where the anomaly travels: slow or failing callees hurt their callers
    /// (callee to caller), while traffic changes flow from caller to callee.
    pub fn propagation(self) -> Direction {
        match self {
            AnomalyType::Performance | AnomalyType::Reliability => Direction::Upstream,
            AnomalyType::Traffic => Direction::Downstream,
        }
    }

    /// Side of a service on which its cause must be searched, i.e. the
    /// opposite of the propagation direction.
    pub fn search_direction(self) -> Direction {
        self.propagation().reverse()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyType::Performance => "Performance",
            AnomalyType::Reliability => "Reliability",
            AnomalyType::Traffic => "Traffic",
        }
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnomalyType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "performance" => Ok(AnomalyType::Performance),
            "reliability" => Ok(AnomalyType::Reliability),
            "traffic" => Ok(AnomalyType::Traffic),
            other => Err(format!("unknown anomaly type '{other}'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bindings_are_fixed() {
        assert_eq!(AnomalyType::Performance.metric(), MetricKind::Rt);
        assert_eq!(AnomalyType::Reliability.metric(), MetricKind::Ec);
        assert_eq!(AnomalyType::Traffic.metric(), MetricKind::Qps);
        assert_eq!(AnomalyType::Performance.search_direction(), Direction::Downstream);
        assert_eq!(AnomalyType::Reliability.search_direction(), Direction::Downstream);
        assert_eq!(AnomalyType::Traffic.search_direction(), Direction::Upstream);
    }
}
