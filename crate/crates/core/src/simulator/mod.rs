//! Synthetic microservice systems with injected faults and known root
//! causes.

pub mod baseline;
pub mod corpus;
pub mod fault;
pub mod scenario;
pub mod ten_service;
pub mod topology;

use std::f64::consts::TAU;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use baseline::{Baseline, BaselineParams};
pub use fault::{FaultPlan, FaultSpec};
pub use scenario::{ScenarioConfig, ScenarioFile, SimulatedIncident, SuiteConfig};
pub use topology::{generate_topology, Topology, TopologyParams};

use crate::anomaly::AnomalyType;
use crate::error::Result;
use crate::graph::{MINUTES_PER_DAY, MINUTES_PER_WEEK};
use crate::store::{BusinessRecord, CallRecord, EdgeKey, MetricStore};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RootCause {
    pub service: String,
    pub anomaly_type: AnomalyType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub incident_minute: i64,
    pub initial_service: String,
    pub business_metric: String,
    pub root_causes: Vec<RootCause>,
}

/// A sinusoid added to an edge's QPS after business metrics are derived, so
/// it perturbs the call metric without touching the business metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpsOverlay {
    pub edge: EdgeKey,
    pub start_minute: i64,
    pub minutes: usize,
    /// Whole periods over `minutes`, so the overlay has zero mean.
    pub periods: u32,
    /// Amplitude as a fraction of the edge's base QPS; negative flips sign.
    pub relative_amplitude: f64,
}

impl QpsOverlay {
    fn value(&self, base_qps: f64, minute: i64) -> f64 {
        let t = minute - self.start_minute;
        if t < 0 || t >= self.minutes as i64 {
            return 0.0;
        }
        let phase = TAU * self.periods as f64 * t as f64 / self.minutes as f64;
        self.relative_amplitude * base_qps * phase.sin()
    }
}

/// Minute ranges an analysis at `incident_minute` reads: the recent two
/// hours and the comparison hours one day and one week earlier.
pub fn incident_coverage(incident_minute: i64) -> Vec<Range<i64>> {
    vec![
        incident_minute - MINUTES_PER_WEEK - 60..incident_minute - MINUTES_PER_WEEK,
        incident_minute - MINUTES_PER_DAY - 60..incident_minute - MINUTES_PER_DAY,
        incident_minute - 130..incident_minute,
    ]
}

fn merge(mut ranges: Vec<Range<i64>>) -> Vec<Range<i64>> {
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<i64>> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

/// A topology with its baseline, faults and overlays; materializes metric
/// records for any minute range.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub topology: Topology,
    pub baseline: Baseline,
    pub faults: Vec<FaultPlan>,
    pub overlays: Vec<QpsOverlay>,
    pub business_metric: String,
}

impl Simulation {
    pub fn new(topology: Topology, baseline: Baseline, business_metric: impl Into<String>) -> Self {
        Self {
            topology,
            baseline,
            faults: Vec::new(),
            overlays: Vec::new(),
            business_metric: business_metric.into(),
        }
    }

    /// Compiles and adds a fault.
    pub fn inject(&mut self, spec: FaultSpec) -> Result<&FaultPlan> {
        let base_rt = self
            .baseline
            .edges
            .get(&spec.root_edge)
            .map(|p| p.base_rt_ms)
            .unwrap_or(0.0);
        let plan = FaultPlan::compile(spec, &self.topology, base_rt)?;
        self.faults.push(plan);
        Ok(self.faults.last().unwrap())
    }

    pub fn call_record(&self, edge: &EdgeKey, minute: i64) -> CallRecord {
        let mut point = self.baseline.edge_point(edge, minute);
        let base_qps = self.baseline.edges[edge].base_qps;
        let factor: f64 = self.faults.iter().map(|f| f.qps_factor(edge, minute)).product();
        let overlay: f64 = self
            .overlays
            .iter()
            .filter(|o| &o.edge == edge)
            .map(|o| o.value(base_qps, minute))
            .sum();
        let request_count = ((point.qps * factor + overlay) * 60.0).round().max(1.0);
        point.qps = request_count / 60.0;
        for f in &self.faults {
            f.apply_quality(edge, minute, &mut point, request_count);
        }
        CallRecord {
            minute,
            caller: edge.caller.clone(),
            callee: edge.callee.clone(),
            rt_ms: point.rt_ms,
            error_count: point.error_count.min(request_count),
            qps: point.qps,
            request_count,
        }
    }

    pub fn business_record(&self, entry: &str, minute: i64) -> BusinessRecord {
        let inbound: f64 = self.baseline.inbound[entry]
            .iter()
            .map(|e| {
                let factor: f64 = self
                    .faults
                    .iter()
                    .filter(|f| f.spec.affects_business)
                    .map(|f| f.qps_factor(e, minute))
                    .product();
                self.baseline.edge_point(e, minute).qps * factor
            })
            .sum();
        let dip: f64 = self.faults.iter().map(|f| f.business_factor(entry, minute)).product();
        let value = self.baseline.entries[entry].per_qps * inbound * self.baseline.business_noise(entry, minute) * dip;
        BusinessRecord {
            minute,
            service: entry.to_string(),
            metric_name: self.business_metric.clone(),
            value,
        }
    }

    /// Writes every call and business record for the given minute ranges.
    pub fn fill_store(&self, store: &mut MetricStore, ranges: &[Range<i64>]) -> Result<()> {
        for r in merge(ranges.to_vec()) {
            for edge in self.baseline.edges.keys() {
                for m in r.clone() {
                    store.ingest_call(self.call_record(edge, m))?;
                }
            }
            for entry in self.baseline.entries.keys() {
                for m in r.clone() {
                    store.ingest_business(self.business_record(entry, m))?;
                }
            }
        }
        Ok(())
    }

    pub fn store_for(&self, ranges: &[Range<i64>]) -> Result<MetricStore> {
        let mut store = MetricStore::new();
        self.fill_store(&mut store, ranges)?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{MetricKind, SeriesKey};

    fn sim(params: BaselineParams) -> Simulation {
        let t = generate_topology(
            &TopologyParams {
                n_services: 15,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let b = Baseline::new(&t, params, 3).unwrap();
        Simulation::new(t, b, "orders")
    }

    fn leaf_fault(s: &Simulation, t: AnomalyType, magnitude: f64) -> FaultSpec {
        // a performance fault on a call into an entry's callee
        let entry = &s.topology.entry_services[0];
        let edge = s.topology.edges.iter().find(|e| &e.caller == entry).unwrap().clone();
        FaultSpec {
            root_service: edge.callee.clone(),
            root_edge: edge,
            anomaly_type: t,
            onset_minute: 11_000,
            magnitude,
            attenuation: 0.8,
            lag_minutes: 1,
            max_hops: None,
            affects_business: true,
            business_dip: 0.3,
        }
    }

    #[test]
    fn windowed_matches_full_coverage() {
        let s = sim(BaselineParams::default());
        let full = s.store_for(&[10_000..11_600]).unwrap();
        let windowed = s.store_for(&incident_coverage(11_500)).unwrap();
        let e = s.topology.edges[0].clone();
        for kind in MetricKind::ALL {
            let k = SeriesKey::Edge(e.clone(), kind);
            assert_eq!(
                full.query_window(&k, 11_500, 130),
                windowed.query_window(&k, 11_500, 130)
            );
        }
    }

    #[test]
    fn unit_magnitude_leaves_stream_identical() {
        let base = sim(BaselineParams::default());
        let mut faulted = base.clone();
        let spec = leaf_fault(&faulted, AnomalyType::Performance, 1.0);
        faulted.inject(spec).unwrap();
        let a = base.store_for(&[10_990..11_020]).unwrap();
        let b = faulted.store_for(&[10_990..11_020]).unwrap();
        assert_eq!(a.records(), b.records());
    }

    #[test]
    fn performance_fault_elevates_path_with_attenuation() {
        let mut s = sim(BaselineParams::flat());
        let spec = leaf_fault(&s, AnomalyType::Performance, 6.0);
        let plan = s.inject(spec).unwrap().clone();
        let before = s.baseline.clone();
        let mut increases: Vec<(usize, f64)> = plan
            .affected
            .iter()
            .map(|(e, h)| {
                let after = s.call_record(e, 11_100).rt_ms;
                let base = before.edge_point(e, 11_100).rt_ms;
                (h.hop, after - base)
            })
            .collect();
        increases.sort_by_key(|x| x.0);
        for w in increases.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(w[0].1 > w[1].1);
            }
            assert!(w[0].1 > 0.0);
        }
    }

    #[test]
    fn traffic_drop_tracks_business() {
        let mut s = sim(BaselineParams::default());
        let entry = s.topology.entry_services[0].clone();
        let edge = s.topology.edges.iter().find(|e| e.callee == entry).unwrap().clone();
        s.inject(FaultSpec {
            root_service: edge.caller.clone(),
            root_edge: edge.clone(),
            anomaly_type: AnomalyType::Traffic,
            onset_minute: 11_052,
            magnitude: 0.2,
            attenuation: 0.8,
            lag_minutes: 0,
            max_hops: None,
            affects_business: true,
            business_dip: 0.3,
        })
        .unwrap();
        let store = s.store_for(&[10_990..11_060]).unwrap();
        let qps = store.query_window(&SeriesKey::Edge(edge, MetricKind::Qps), 11_060, 60);
        let biz = store.query_window(
            &SeriesKey::Business {
                service: entry,
                metric: "orders".into(),
            },
            11_060,
            60,
        );
        let r = crate::stats::pearson(&qps.values, &biz.values).unwrap();
        assert!(r.abs() >= 0.9, "{r}");
    }

    #[test]
    fn no_leakage_off_path() {
        let base = sim(BaselineParams::default());
        let mut s = base.clone();
        let spec = leaf_fault(&s, AnomalyType::Reliability, 8.0);
        let plan = s.inject(spec).unwrap().clone();
        for e in &s.topology.edges {
            if plan.affected.contains_key(e) {
                continue;
            }
            for m in 11_000..11_030 {
                assert_eq!(s.call_record(e, m), base.call_record(e, m));
            }
        }
    }

    #[test]
    fn deterministic_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let s = sim(BaselineParams::default());
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        s.store_for(&incident_coverage(11_000))
            .unwrap()
            .save_jsonl(&p1)
            .unwrap();
        s.store_for(&incident_coverage(11_000))
            .unwrap()
            .save_jsonl(&p2)
            .unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
