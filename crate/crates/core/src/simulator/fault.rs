//! Fault injection with hop-by-hop propagation.
//!
//! A fault deforms its root edge from the onset minute and spreads along the
//! anomaly's propagation direction: slow or failing calls make the caller's
//! own inbound calls slow or failing, while a traffic change on a call
//! changes the callee's outbound traffic. Each hop scales the deformation by
//! the attenuation factor and delays it by the lag.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::baseline::EdgePoint;
use super::topology::Topology;
use crate::anomaly::AnomalyType;
use crate::error::{Error, Result};
use crate::store::EdgeKey;

fn default_attenuation() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

fn default_dip() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub root_service: String,
    pub root_edge: EdgeKey,
    pub anomaly_type: AnomalyType,
    pub onset_minute: i64,
    /// Multiplier: RT and error rate grow with `magnitude - 1`; QPS is
    /// scaled by `magnitude` at the root edge.
    pub magnitude: f64,
    #[serde(default = "default_attenuation")]
    pub attenuation: f64,
    #[serde(default)]
    pub lag_minutes: i64,
    /// Stop spreading after this many hops from the root edge.
    #[serde(default)]
    pub max_hops: Option<usize>,
    /// Whether reached entry services' business metrics react.
    #[serde(default = "default_true")]
    pub affects_business: bool,
    /// Relative business drop caused by performance or reliability faults.
    #[serde(default = "default_dip")]
    pub business_dip: f64,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        let expected_root = match self.anomaly_type {
            AnomalyType::Traffic => &self.root_edge.caller,
            _ => &self.root_edge.callee,
        };
        if *expected_root != self.root_service {
            return Err(Error::Simulation(format!(
                "{} fault rooted at {} must use an edge whose {} is the root (got {})",
                self.anomaly_type,
                self.root_service,
                if self.anomaly_type == AnomalyType::Traffic {
                    "caller"
                } else {
                    "callee"
                },
                self.root_edge
            )));
        }
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(Error::Simulation("magnitude must be finite and >= 0".into()));
        }
        if self.anomaly_type != AnomalyType::Traffic && self.magnitude < 1.0 {
            return Err(Error::Simulation(
                "performance/reliability magnitude must be >= 1".into(),
            ));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(Error::Simulation("attenuation must be in (0, 1]".into()));
        }
        if self.lag_minutes < 0 {
            return Err(Error::Simulation("lag_minutes must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.business_dip) {
            return Err(Error::Simulation("business_dip must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub hop: usize,
    pub onset_minute: i64,
    pub scale: f64,
}

/// A fault resolved against a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub spec: FaultSpec,
    /// Base RT of the root edge, which sets the absolute RT increase.
    pub root_base_rt_ms: f64,
    pub affected: BTreeMap<EdgeKey, Hop>,
    /// Entry services reached, with the minute the fault arrives there.
    pub reached_entries: BTreeMap<String, i64>,
}

fn has_cycle(edges: &BTreeSet<&EdgeKey>) -> bool {
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in edges {
        out.entry(&e.caller).or_default().push(&e.callee);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    for &start in out.keys() {
        if state.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        state.insert(start, 1);
        while let Some((node, i)) = stack.pop() {
            let next = out.get(node).and_then(|v| v.get(i)).copied();
            match next {
                Some(n) => {
                    stack.push((node, i + 1));
                    match state.get(n).copied().unwrap_or(0) {
                        1 => return true,
                        0 => {
                            state.insert(n, 1);
                            stack.push((n, 0));
                        }
                        _ => {}
                    }
                }
                None => {
                    state.insert(node, 2);
                }
            }
        }
    }
    false
}

impl FaultPlan {
    pub fn compile(spec: FaultSpec, topology: &Topology, root_base_rt_ms: f64) -> Result<Self> {
        spec.validate()?;
        if !topology.edges.contains(&spec.root_edge) {
            return Err(Error::Simulation(format!(
                "root edge {} not in topology",
                spec.root_edge
            )));
        }
        let callers = topology.callers();
        let callees = topology.callees();
        let mut affected: BTreeMap<EdgeKey, Hop> = BTreeMap::new();
        let mut queue = VecDeque::from([(spec.root_edge.clone(), 0usize)]);
        let hop_of = |h: usize| Hop {
            hop: h,
            onset_minute: spec.onset_minute + h as i64 * spec.lag_minutes,
            scale: spec.attenuation.powi(h as i32),
        };
        affected.insert(spec.root_edge.clone(), hop_of(0));
        while let Some((edge, h)) = queue.pop_front() {
            if spec.max_hops.is_some_and(|m| h >= m) {
                continue;
            }
            let next = match spec.anomaly_type {
                AnomalyType::Traffic => callees.get(edge.callee.as_str()),
                _ => callers.get(edge.caller.as_str()),
            };
            for &e in next.into_iter().flatten() {
                if !affected.contains_key(e) {
                    affected.insert(e.clone(), hop_of(h + 1));
                    queue.push_back((e.clone(), h + 1));
                }
            }
        }
        if has_cycle(&affected.keys().collect()) {
            return Err(Error::Simulation(format!(
                "fault at {} propagates around a call cycle",
                spec.root_edge
            )));
        }

        let mut reached_entries: BTreeMap<String, i64> = BTreeMap::new();
        for entry in &topology.entry_services {
            let arrival = affected
                .iter()
                .filter(|(e, _)| match spec.anomaly_type {
                    AnomalyType::Traffic => &e.callee == entry,
                    _ => &e.caller == entry,
                })
                .map(|(_, h)| h.onset_minute)
                .min();
            if let Some(a) = arrival {
                reached_entries.insert(entry.clone(), a);
            }
        }
        if spec.affects_business && reached_entries.is_empty() {
            return Err(Error::Simulation(format!(
                "fault at {} reaches no entry service",
                spec.root_edge
            )));
        }
        Ok(Self {
            spec,
            root_base_rt_ms,
            affected,
            reached_entries,
        })
    }

    /// Traffic factor applied to an edge's QPS at a minute (1 if unaffected).
    pub fn qps_factor(&self, edge: &EdgeKey, minute: i64) -> f64 {
        if self.spec.anomaly_type != AnomalyType::Traffic {
            return 1.0;
        }
        match self.affected.get(edge) {
            Some(h) if minute >= h.onset_minute => 1.0 + (self.spec.magnitude - 1.0) * h.scale,
            _ => 1.0,
        }
    }

    /// Applies RT and EC deformation; `request_count` is already final.
    pub fn apply_quality(&self, edge: &EdgeKey, minute: i64, point: &mut EdgePoint, request_count: f64) {
        let Some(h) = self.affected.get(edge) else { return };
        if minute < h.onset_minute {
            return;
        }
        let m = self.spec.magnitude;
        match self.spec.anomaly_type {
            AnomalyType::Performance => point.rt_ms += (m - 1.0) * self.root_base_rt_ms * h.scale,
            AnomalyType::Reliability => {
                let extra = 0.01 * (m - 1.0) * h.scale * request_count;
                point.error_count = (point.error_count + extra).round().min(request_count);
            }
            AnomalyType::Traffic => {}
        }
    }

    /// Business multiplier from a performance or reliability fault at an
    /// entry service.
    pub fn business_factor(&self, entry: &str, minute: i64) -> f64 {
        if !self.spec.affects_business || self.spec.anomaly_type == AnomalyType::Traffic {
            return 1.0;
        }
        match self.reached_entries.get(entry) {
            Some(&arrival) if minute >= arrival => 1.0 - self.spec.business_dip * (self.spec.magnitude - 1.0).min(1.0),
            _ => 1.0,
        }
    }
}
