//! The localization pipeline: call graph, propagation analysis, ranking.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detection::{DetectionConfig, Detector};
use crate::error::{Error, Result};
use crate::graph::CallGraph;
use crate::models::DetectorModels;
use crate::propagation::{analyze, PropagationConfig, PropagationResult};
use crate::ranking::{rank_candidates, RankedCandidate};
use crate::store::MetricStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub detection_window_minutes: usize,
    pub rt_threshold_ms: f64,
    pub traffic_correlation_threshold: f64,
    pub moving_average_window: usize,
    pub pruning_threshold: f64,
    pub call_window_minutes: usize,
    pub metric_window_minutes: usize,
    /// Directory holding `rt_model.json` and `ec_model.json`.
    pub models_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let d = DetectionConfig::default();
        Self {
            detection_window_minutes: d.detection_window_minutes,
            rt_threshold_ms: d.rt_threshold_ms,
            traffic_correlation_threshold: d.traffic_correlation_threshold,
            moving_average_window: d.moving_average_window,
            pruning_threshold: PropagationConfig::default().pruning_threshold,
            call_window_minutes: 30,
            metric_window_minutes: 60,
            models_dir: None,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn detection(&self) -> DetectionConfig {
        DetectionConfig {
            detection_window_minutes: self.detection_window_minutes,
            rt_threshold_ms: self.rt_threshold_ms,
            traffic_correlation_threshold: self.traffic_correlation_threshold,
            moving_average_window: self.moving_average_window,
        }
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            pruning_threshold: self.pruning_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.call_window_minutes == 0 {
            return Err(Error::Config("call_window_minutes must be positive".into()));
        }
        if self.metric_window_minutes < 3 {
            return Err(Error::Config("metric_window_minutes must be at least 3".into()));
        }
        self.detection().validate(self.metric_window_minutes)?;
        self.propagation().validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("engine config {}", path.display()),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub initial_service: String,
    pub incident_minute: i64,
    pub business_metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub incident: Incident,
    pub ranked: Vec<RankedCandidate>,
    pub analysis: PropagationResult,
    pub graph_services: usize,
    pub graph_edges: usize,
    /// Edge histories pulled from the store during analysis.
    pub edge_pulls: u64,
    /// Set when no candidate could be produced.
    pub diagnostic: Option<String>,
    pub wall_time_seconds: f64,
}

impl Localization {
    fn empty(incident: &Incident, diagnostic: String, started: Instant) -> Self {
        Self {
            incident: incident.clone(),
            ranked: Vec::new(),
            analysis: PropagationResult {
                initial_service: incident.initial_service.clone(),
                entry_verdicts: Vec::new(),
                chains: Vec::new(),
                candidates: Vec::new(),
                detector_calls: 0,
                edges_examined: 0,
            },
            graph_services: 0,
            graph_edges: 0,
            edge_pulls: 0,
            diagnostic: Some(diagnostic),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Localizes the root cause of `incident` from the data in `store`.
pub fn localize(
    store: &MetricStore,
    incident: &Incident,
    config: &EngineConfig,
    models: Option<&DetectorModels>,
) -> Result<Localization> {
    let started = Instant::now();
    config.validate()?;
    let graph = CallGraph::build(
        store,
        incident.incident_minute,
        config.call_window_minutes,
        config.metric_window_minutes,
    );
    if graph.edges().is_empty() {
        return Ok(Localization::empty(
            incident,
            "no service calls observed in the call window".into(),
            started,
        ));
    }
    if !graph.contains(&incident.initial_service) {
        return Err(Error::invalid(format!(
            "initial service '{}' has no calls in the call window",
            incident.initial_service
        )));
    }
    let business = graph
        .business_series(&incident.initial_service, &incident.business_metric)
        .values;
    let detection = config.detection();
    let detector = Detector::new(&detection, models);
    let analysis = analyze(
        &graph,
        &incident.initial_service,
        &detector,
        &business,
        &config.propagation(),
    )?;
    let ranked = rank_candidates(&analysis.candidates, &graph, &business)?;
    let diagnostic = if ranked.is_empty() {
        Some(if analysis.chains.is_empty() {
            "no anomalous calls next to the initial service".to_string()
        } else {
            "propagation chains produced no endpoints".to_string()
        })
    } else {
        None
    };
    Ok(Localization {
        incident: incident.clone(),
        ranked,
        graph_services: graph.nodes().len(),
        graph_edges: graph.edges().len(),
        edge_pulls: graph.pulls(),
        analysis,
        diagnostic,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = EngineConfig::default();
        assert_eq!(c.rt_threshold_ms, 50.0);
        assert_eq!(c.traffic_correlation_threshold, 0.9);
        assert_eq!(c.pruning_threshold, 0.7);
        assert_eq!(c.call_window_minutes, 30);
        assert_eq!(c.metric_window_minutes, 60);
        assert_eq!(c.detection_window_minutes, 10);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_config_field_is_rejected() {
        let err = serde_json::from_str::<EngineConfig>("{\"pruning\": 0.5}");
        assert!(err.is_err());
        let ok: EngineConfig = serde_json::from_str("{\"pruning_threshold\": 0.5}").unwrap();
        assert_eq!(ok.pruning_threshold, 0.5);
        assert_eq!(ok.call_window_minutes, 30);
    }

    #[test]
    fn empty_store_gives_diagnostic() {
        let store = MetricStore::new();
        let inc = Incident {
            initial_service: "S5".into(),
            incident_minute: 100,
            business_metric: "orders".into(),
        };
        let r = localize(&store, &inc, &EngineConfig::default(), None).unwrap();
        assert!(r.ranked.is_empty());
        assert!(r.diagnostic.is_some());
    }
}
