//! Per-edge anomaly detectors for the three anomaly types.

pub mod features;

use serde::{Deserialize, Serialize};

pub use features::{
    extract_ec_features, extract_rt_features, ComparisonPeriod, EcFeatureVector, RtFeatureVector, EC_FEATURES,
    RT_FEATURES,
};

use crate::anomaly::AnomalyType;
use crate::error::{Error, Result};
use crate::graph::CallGraph;
use crate::models::{DetectorModels, ForestClassifier, OneClassSeparator};
use crate::stats::{pearson, three_sigma_outliers};
use crate::store::{EdgeKey, MetricKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub detection_window_minutes: usize,
    pub rt_threshold_ms: f64,
    pub traffic_correlation_threshold: f64,
    pub moving_average_window: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            detection_window_minutes: 10,
            rt_threshold_ms: 50.0,
            traffic_correlation_threshold: 0.9,
            moving_average_window: 10,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self, metric_window: usize) -> Result<()> {
        if self.detection_window_minutes == 0 || self.detection_window_minutes >= metric_window {
            return Err(Error::Config(format!(
                "detection_window_minutes must be in 1..{metric_window}"
            )));
        }
        if self.moving_average_window == 0 || self.moving_average_window > metric_window - self.detection_window_minutes
        {
            return Err(Error::Config("moving_average_window out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.traffic_correlation_threshold) {
            return Err(Error::Config("traffic_correlation_threshold must be in [0, 1]".into()));
        }
        if !self.rt_threshold_ms.is_finite() || self.rt_threshold_ms < 0.0 {
            return Err(Error::Config("rt_threshold_ms must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub edge: EdgeKey,
    pub anomaly_type: AnomalyType,
    pub anomalous: bool,
    /// The edge lacked history and was treated as normal.
    pub skipped: bool,
}

/// Runs the three detectors against edges of one call graph.
pub struct Detector<'a> {
    pub config: &'a DetectionConfig,
    pub models: Option<&'a DetectorModels>,
}

impl<'a> Detector<'a> {
    pub fn new(config: &'a DetectionConfig, models: Option<&'a DetectorModels>) -> Self {
        Self { config, models }
    }

    fn models(&self) -> Result<&'a DetectorModels> {
        self.models
            .ok_or_else(|| Error::Config("RT/EC detection requires trained models".into()))
    }

    fn verdict(edge: &EdgeKey, t: AnomalyType, anomalous: Option<bool>) -> AnomalyVerdict {
        AnomalyVerdict {
            edge: edge.clone(),
            anomaly_type: t,
            anomalous: anomalous.unwrap_or(false),
            skipped: anomalous.is_none(),
        }
    }

    /// Flags the edge when the one-class model rejects its RT features and
    /// the detection window runs slower on average than some comparison
    /// period's peak moving average.
    pub fn detect_performance(&self, graph: &CallGraph<'_>, edge: &EdgeKey) -> Result<AnomalyVerdict> {
        let models = self.models()?;
        let h = graph.history(edge, MetricKind::Rt)?;
        let anomalous = match extract_rt_features(&h, self.config)? {
            None => None,
            Some(f) => Some(performance_rule(&f, &models.rt)?),
        };
        Ok(Self::verdict(edge, AnomalyType::Performance, anomalous))
    }

    /// Flags the edge when the forest votes anomalous and the window shows
    /// some rise in errors.
    pub fn detect_reliability(&self, graph: &CallGraph<'_>, edge: &EdgeKey) -> Result<AnomalyVerdict> {
        let models = self.models()?;
        let ec = graph.history(edge, MetricKind::Ec)?;
        let rt = graph.history(edge, MetricKind::Rt)?;
        let anomalous = match extract_ec_features(&ec, &rt, self.config)? {
            None => None,
            Some(f) => Some(reliability_rule(&f, &models.ec)?),
        };
        Ok(Self::verdict(edge, AnomalyType::Reliability, anomalous))
    }

    /// 3-sigma outliers in the window's QPS, gated on correlation between
    /// the hour's QPS and the business metric.
    pub fn detect_traffic(&self, graph: &CallGraph<'_>, edge: &EdgeKey, business: &[f64]) -> Result<AnomalyVerdict> {
        let h = graph.history(edge, MetricKind::Qps)?;
        let dw = self.config.detection_window_minutes;
        if !h.has_data_before(h.incident_minute - dw as i64) {
            return Ok(Self::verdict(edge, AnomalyType::Traffic, None));
        }
        let anomalous = traffic_anomalous(
            h.metric_series(),
            business,
            dw,
            self.config.traffic_correlation_threshold,
        )?;
        Ok(Self::verdict(edge, AnomalyType::Traffic, Some(anomalous)))
    }

    pub fn detect(
        &self,
        graph: &CallGraph<'_>,
        edge: &EdgeKey,
        t: AnomalyType,
        business: &[f64],
    ) -> Result<AnomalyVerdict> {
        match t {
            AnomalyType::Performance => self.detect_performance(graph, edge),
            AnomalyType::Reliability => self.detect_reliability(graph, edge),
            AnomalyType::Traffic => self.detect_traffic(graph, edge, business),
        }
    }
}

/// RT verdict from extracted features.
pub fn performance_rule(f: &RtFeatureVector, model: &OneClassSeparator) -> Result<bool> {
    Ok(f.max_ratio_of_avg() > 1.0 && model.is_outlier(&f.values)?)
}

/// EC verdict from extracted features.
pub fn reliability_rule(f: &EcFeatureVector, model: &ForestClassifier) -> Result<bool> {
    Ok(f.has_error_evidence() && model.predict(&f.values)?)
}

/// The traffic rule on a metric-window QPS series whose last `window`
/// values are the detection window.
pub fn traffic_anomalous(qps: &[f64], business: &[f64], window: usize, threshold: f64) -> Result<bool> {
    if window == 0 || window + 2 > qps.len() {
        return Err(Error::invalid(
            "traffic: detection window must leave at least two reference minutes",
        ));
    }
    let split = qps.len() - window;
    if three_sigma_outliers(&qps[..split], &qps[split..])?.is_empty() {
        return Ok(false);
    }
    Ok(pearson(qps, business)?.abs() >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drop_series(base: f64, frac: f64) -> Vec<f64> {
        (0..60)
            .map(|i| {
                if i >= 50 {
                    base * (1.0 - frac)
                } else {
                    base + (i % 3) as f64
                }
            })
            .collect()
    }

    #[test]
    fn flat_traffic_is_normal() {
        assert!(!traffic_anomalous(&[100.0; 60], &[5.0; 60], 10, 0.9).unwrap());
    }

    #[test]
    fn lockstep_drop_is_anomalous() {
        let qps = drop_series(100.0, 0.8);
        let biz: Vec<f64> = qps.iter().map(|q| 3.0 * q).collect();
        assert!(traffic_anomalous(&qps, &biz, 10, 0.9).unwrap());
    }

    #[test]
    fn flat_business_fails_gate() {
        let qps = drop_series(100.0, 0.8);
        assert!(!traffic_anomalous(&qps, &[7.0; 60], 10, 0.9).unwrap());
        // gate disabled: reduces to the outlier test
        assert!(traffic_anomalous(&qps, &[7.0; 60], 10, 0.0).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(DetectionConfig::default().validate(60).is_ok());
        let bad = DetectionConfig {
            traffic_correlation_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate(60).is_err());
        let bad = DetectionConfig {
            detection_window_minutes: 60,
            ..Default::default()
        };
        assert!(bad.validate(60).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn zero_threshold_is_pure_outlier_test(
                qps in prop::collection::vec(0.0f64..100.0, 60),
                biz in prop::collection::vec(0.0f64..100.0, 60),
            ) {
                let gated = traffic_anomalous(&qps, &biz, 10, 0.0).unwrap();
                let plain = !three_sigma_outliers(&qps[..50], &qps[50..]).unwrap().is_empty();
                prop_assert_eq!(gated, plain);
            }
        }
    }
}
