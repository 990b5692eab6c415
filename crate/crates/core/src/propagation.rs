//! Anomaly propagation chain analysis.
//!
//! Detectors first run on every edge touching the initial anomalous service.
//! Each anomalous neighbor whose side matches the anomaly's propagation
//! direction seeds a chain, which is then grown breadth-first toward the
//! anomaly's source. A neighbor joins when its connecting edge is anomalous
//! for the chain's type and its metric series correlates with the edge the
//! chain arrived through. Chain endpoints become root-cause candidates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyType;
use crate::detection::{AnomalyVerdict, Detector};
use crate::error::{Error, Result};
use crate::graph::{CallGraph, Direction};
use crate::stats::pearson;
use crate::store::EdgeKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Minimum correlation between consecutive chain edges; `<= 0` turns
    /// pruning off.
    pub pruning_threshold: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { pruning_threshold: 0.7 }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.pruning_threshold.is_finite() || self.pruning_threshold > 1.0 {
            return Err(Error::Config("pruning_threshold must be finite and <= 1".into()));
        }
        Ok(())
    }

    pub fn pruning_enabled(&self) -> bool {
        self.pruning_threshold > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainMember {
    pub service: String,
    /// Edge through which the service joined the chain.
    pub via_edge: EdgeKey,
    /// Member the service was reached from; `None` for the chain origin.
    pub parent: Option<String>,
    pub depth: usize,
}

/// One neighbor considered while extending a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionStep {
    pub from: String,
    pub to: String,
    pub edge: EdgeKey,
    pub anomalous: bool,
    pub skipped: bool,
    /// Correlation with the arrival edge; absent when the detector did not
    /// flag the edge or pruning is off.
    pub correlation: Option<f64>,
    /// Anomalous and not pruned.
    pub accepted: bool,
    /// The target joined the chain through this step.
    pub joined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationChain {
    pub anomaly_type: AnomalyType,
    pub origin: String,
    pub members: Vec<ChainMember>,
    pub steps: Vec<ExtensionStep>,
}

impl PropagationChain {
    pub fn member(&self, service: &str) -> Option<&ChainMember> {
        self.members.iter().find(|m| m.service == service)
    }

    fn is_ancestor(&self, ancestor: &str, of: &str) -> bool {
        let mut cur = self.member(of).and_then(|m| m.parent.as_deref());
        while let Some(s) = cur {
            if s == ancestor {
                return true;
            }
            cur = self.member(s).and_then(|m| m.parent.as_deref());
        }
        false
    }

    /// Members with no accepted extension other than back toward their own
    /// ancestors.
    pub fn endpoints(&self) -> Vec<&ChainMember> {
        self.members
            .iter()
            .filter(|m| {
                self.steps
                    .iter()
                    .filter(|s| s.accepted && s.from == m.service)
                    .all(|s| self.is_ancestor(&s.to, &m.service))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateRootCause {
    pub service: String,
    pub anomaly_type: AnomalyType,
    pub terminal_edge: EdgeKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub initial_service: String,
    /// Verdicts on every edge touching the initial service.
    pub entry_verdicts: Vec<AnomalyVerdict>,
    pub chains: Vec<PropagationChain>,
    pub candidates: Vec<CandidateRootCause>,
    pub detector_calls: usize,
    /// Distinct edges any detector examined.
    pub edges_examined: usize,
}

#[derive(Debug, Clone)]
struct Seed {
    anomaly_type: AnomalyType,
    origin: String,
    edge: EdgeKey,
}

/// Runs every detector on every edge of `initial` and returns the seeds
/// whose side matches the anomaly's propagation direction.
fn entry_node_analysis(
    graph: &CallGraph<'_>,
    initial: &str,
    detector: &Detector<'_>,
    business: &[f64],
) -> Result<(Vec<AnomalyVerdict>, Vec<Seed>)> {
    let mut verdicts = Vec::new();
    let mut seeds = Vec::new();
    for side in [Direction::Upstream, Direction::Downstream] {
        for (neighbor, edge) in graph.neighbors(initial, side)? {
            for t in AnomalyType::ALL {
                let v = detector.detect(graph, &edge, t, business)?;
                // A neighbor on side X can only have caused the anomaly if
                // the type propagates away from X.
                if v.anomalous && t.search_direction() == side {
                    seeds.push(Seed {
                        anomaly_type: t,
                        origin: neighbor.clone(),
                        edge: edge.clone(),
                    });
                }
                verdicts.push(v);
            }
        }
    }
    Ok((verdicts, seeds))
}

fn extend_chain(
    graph: &CallGraph<'_>,
    initial: &str,
    seed: &Seed,
    detector: &Detector<'_>,
    business: &[f64],
    config: &PropagationConfig,
) -> Result<PropagationChain> {
    let t = seed.anomaly_type;
    let metric = t.metric();
    let mut chain = PropagationChain {
        anomaly_type: t,
        origin: seed.origin.clone(),
        members: vec![ChainMember {
            service: seed.origin.clone(),
            via_edge: seed.edge.clone(),
            parent: None,
            depth: 0,
        }],
        steps: Vec::new(),
    };
    let mut in_chain: BTreeSet<String> = BTreeSet::from([seed.origin.clone()]);
    let mut frontier: VecDeque<usize> = VecDeque::from([0]);
    while let Some(idx) = frontier.pop_front() {
        let current = chain.members[idx].clone();
        let arrival = graph.edge_series(&current.via_edge, metric)?;
        for (next, edge) in graph.neighbors(&current.service, t.search_direction())? {
            if next == initial {
                continue;
            }
            let v = detector.detect(graph, &edge, t, business)?;
            let mut correlation = None;
            let mut accepted = v.anomalous;
            if v.anomalous && config.pruning_enabled() {
                let r = pearson(&graph.edge_series(&edge, metric)?.values, &arrival.values)?;
                correlation = Some(r);
                accepted = r >= config.pruning_threshold;
            }
            let joined = accepted && !in_chain.contains(&next);
            if joined {
                in_chain.insert(next.clone());
                chain.members.push(ChainMember {
                    service: next.clone(),
                    via_edge: edge.clone(),
                    parent: Some(current.service.clone()),
                    depth: current.depth + 1,
                });
                frontier.push_back(chain.members.len() - 1);
            }
            chain.steps.push(ExtensionStep {
                from: current.service.clone(),
                to: next,
                edge,
                anomalous: v.anomalous,
                skipped: v.skipped,
                correlation,
                accepted,
                joined,
            });
        }
    }
    Ok(chain)
}

/// Chain endpoints as candidates, one per (service, type), sorted.
pub fn collect_candidates(chains: &[PropagationChain]) -> Vec<CandidateRootCause> {
    let mut best: BTreeMap<(String, AnomalyType), EdgeKey> = BTreeMap::new();
    for chain in chains {
        for m in chain.endpoints() {
            best.entry((m.service.clone(), chain.anomaly_type))
                .and_modify(|e| {
                    if m.via_edge < *e {
                        *e = m.via_edge.clone();
                    }
                })
                .or_insert_with(|| m.via_edge.clone());
        }
    }
    best.into_iter()
        .map(|((service, anomaly_type), terminal_edge)| CandidateRootCause {
            service,
            anomaly_type,
            terminal_edge,
        })
        .collect()
}

/// Full propagation analysis from `initial`.
pub fn analyze(
    graph: &CallGraph<'_>,
    initial: &str,
    detector: &Detector<'_>,
    business: &[f64],
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    config.validate()?;
    if !graph.contains(initial) {
        return Err(Error::invalid(format!("service '{initial}' is not in the call graph")));
    }
    let (entry_verdicts, seeds) = entry_node_analysis(graph, initial, detector, business)?;
    let chains: Vec<PropagationChain> = seeds
        .par_iter()
        .map(|s| extend_chain(graph, initial, s, detector, business, config))
        .collect::<Result<_>>()?;
    let candidates = collect_candidates(&chains);

    let mut examined: BTreeSet<&EdgeKey> = entry_verdicts.iter().map(|v| &v.edge).collect();
    let mut detector_calls = entry_verdicts.len();
    for c in &chains {
        detector_calls += c.steps.len();
        examined.extend(c.steps.iter().map(|s| &s.edge));
    }
    let edges_examined = examined.len();
    Ok(PropagationResult {
        initial_service: initial.to_string(),
        entry_verdicts,
        chains,
        candidates,
        detector_calls,
        edges_examined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(a: &str, b: &str) -> EdgeKey {
        EdgeKey::new(a, b).unwrap()
    }

    fn member(s: &str, via: EdgeKey, parent: Option<&str>, depth: usize) -> ChainMember {
        ChainMember {
            service: s.into(),
            via_edge: via,
            parent: parent.map(String::from),
            depth,
        }
    }

    fn step(from: &str, to: &str, accepted: bool) -> ExtensionStep {
        ExtensionStep {
            from: from.into(),
            to: to.into(),
            edge: e(from, to),
            anomalous: accepted,
            skipped: false,
            correlation: None,
            accepted,
            joined: false,
        }
    }

    #[test]
    fn endpoints_of_linear_and_cyclic_chains() {
        // a -> b accepted, b -> a accepted (cycle back to ancestor)
        let chain = PropagationChain {
            anomaly_type: AnomalyType::Performance,
            origin: "a".into(),
            members: vec![
                member("a", e("x", "a"), None, 0),
                member("b", e("a", "b"), Some("a"), 1),
            ],
            steps: vec![step("a", "b", true), step("b", "a", true)],
        };
        let ends: Vec<_> = chain.endpoints().iter().map(|m| m.service.clone()).collect();
        assert_eq!(ends, ["b"]);
    }

    #[test]
    fn diamond_keeps_only_the_sink() {
        let chain = PropagationChain {
            anomaly_type: AnomalyType::Performance,
            origin: "a".into(),
            members: vec![
                member("a", e("x", "a"), None, 0),
                member("b", e("a", "b"), Some("a"), 1),
                member("c", e("a", "c"), Some("a"), 1),
                member("d", e("b", "d"), Some("b"), 2),
            ],
            steps: vec![
                step("a", "b", true),
                step("a", "c", true),
                step("b", "d", true),
                step("c", "d", true),
            ],
        };
        let ends: Vec<_> = chain.endpoints().iter().map(|m| m.service.clone()).collect();
        assert_eq!(ends, ["d"]);
    }

    #[test]
    fn rejected_steps_do_not_block_endpoints() {
        let chain = PropagationChain {
            anomaly_type: AnomalyType::Traffic,
            origin: "a".into(),
            members: vec![member("a", e("a", "x"), None, 0)],
            steps: vec![step("a", "b", false)],
        };
        assert_eq!(collect_candidates(&[chain]).len(), 1);
    }

    #[test]
    fn candidates_deduplicate_on_service_and_type() {
        let mk = |via: EdgeKey| PropagationChain {
            anomaly_type: AnomalyType::Performance,
            origin: "z".into(),
            members: vec![member("z", via, None, 0)],
            steps: vec![],
        };
        let c = collect_candidates(&[mk(e("y", "z")), mk(e("b", "z"))]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].terminal_edge, e("b", "z"));
        assert!(collect_candidates(&[]).is_empty());
    }
}
