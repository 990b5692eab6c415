//! The bundled ten-service example system.
//!
//! S5 is the entry service. A traffic drop starts at S1 and reaches S5
//! through S4; slow calls from S7 to S9 and S10 reach S5 through S7. The
//! uncorrelated variant adds opposite-phase oscillations to S1->S4 and
//! S4->S5 before the drop, so the two calls no longer move together.

use std::path::Path;

use super::scenario::{ScenarioConfig, ScenarioFile, TopologySource};
use super::Topology;
use crate::error::{Error, Result};

pub const TOPOLOGY_JSON: &str = include_str!("../../scenarios/ten_service_topology.json");
pub const SCENARIO_JSON: &str = include_str!("../../scenarios/ten_service.json");
pub const UNCORRELATED_JSON: &str = include_str!("../../scenarios/ten_service_uncorrelated.json");

fn parse(text: &str, what: &str) -> Result<ScenarioConfig> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: what.into(),
        source: e,
    })?;
    let ScenarioFile::Scenario(mut cfg) = file else {
        return Err(Error::Config(format!("{what} is not a single scenario")));
    };
    match &cfg.topology {
        TopologySource::Fixture(p) if p == Path::new("ten_service_topology.json") => {
            let t: Topology = serde_json::from_str(TOPOLOGY_JSON).map_err(|e| Error::Parse {
                what: "ten_service topology".into(),
                source: e,
            })?;
            t.validate()?;
            cfg.topology = TopologySource::Inline(t);
        }
        _ => return Err(Error::Config(format!("{what} must use the bundled topology"))),
    }
    Ok(cfg)
}

pub fn scenario(uncorrelated: bool) -> Result<ScenarioConfig> {
    if uncorrelated {
        parse(UNCORRELATED_JSON, "ten_service_uncorrelated scenario")
    } else {
        parse(SCENARIO_JSON, "ten_service scenario")
    }
}
