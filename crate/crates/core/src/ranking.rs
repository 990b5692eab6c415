//! Orders candidates by how closely their terminal-edge metric tracks the
//! initial service's business metric.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::CallGraph;
use crate::propagation::CandidateRootCause;
use crate::stats::pearson;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    #[serde(flatten)]
    pub candidate: CandidateRootCause,
    /// Absolute Pearson correlation with the business metric.
    pub score: f64,
    pub rank: usize,
}

/// Sorts scored candidates (score descending, then service id and type
/// name ascending) and assigns ranks from 1.
pub fn rank_scored(mut scored: Vec<(CandidateRootCause, f64)>) -> Vec<RankedCandidate> {
    scored.sort_by(|(a, sa), (b, sb)| {
        sb.total_cmp(sa)
            .then_with(|| a.service.cmp(&b.service))
            .then_with(|| a.anomaly_type.as_str().cmp(b.anomaly_type.as_str()))
    });
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (candidate, score))| RankedCandidate {
            candidate,
            score,
            rank: i + 1,
        })
        .collect()
}

pub fn rank_candidates(
    candidates: &[CandidateRootCause],
    graph: &CallGraph<'_>,
    business: &[f64],
) -> Result<Vec<RankedCandidate>> {
    let scored = candidates
        .iter()
        .map(|c| {
            let series = graph.edge_series(&c.terminal_edge, c.anomaly_type.metric())?;
            Ok((c.clone(), pearson(business, &series.values)?.abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_scored(scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::AnomalyType;
    use crate::graph::CallGraph;
    use crate::store::{BusinessRecord, CallRecord, EdgeKey, MetricStore};

    fn cand(s: &str, t: AnomalyType) -> CandidateRootCause {
        CandidateRootCause {
            service: s.into(),
            anomaly_type: t,
            terminal_edge: EdgeKey::new("x", s).unwrap(),
        }
    }

    #[test]
    fn single_candidate_ranks_first() {
        let r = rank_scored(vec![(cand("a", AnomalyType::Traffic), 0.01)]);
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn ties_break_by_service_then_type() {
        let r = rank_scored(vec![
            (cand("b", AnomalyType::Performance), 0.5),
            (cand("a", AnomalyType::Traffic), 0.5),
            (cand("a", AnomalyType::Reliability), 0.5),
        ]);
        let order: Vec<_> = r
            .iter()
            .map(|c| (c.candidate.service.as_str(), c.candidate.anomaly_type))
            .collect();
        assert_eq!(
            order,
            [
                ("a", AnomalyType::Reliability),
                ("a", AnomalyType::Traffic),
                ("b", AnomalyType::Performance)
            ]
        );
    }

    #[test]
    fn affine_business_image_outranks_noise() {
        let mut store = MetricStore::new();
        let business: Vec<f64> = (0..60).map(|m| if m >= 50 { 20.0 } else { 100.0 }).collect();
        for m in 0..60i64 {
            let ec_a = 3.0 * (100.0 - business[m as usize]);
            let ec_b = ((m * 7919) % 13) as f64;
            for (callee, ec) in [("a", ec_a), ("b", ec_b)] {
                store
                    .ingest_call(CallRecord {
                        minute: m,
                        caller: "x".into(),
                        callee: callee.into(),
                        rt_ms: 10.0,
                        error_count: ec,
                        qps: 10.0,
                        request_count: 600.0,
                    })
                    .unwrap();
            }
            store
                .ingest_business(BusinessRecord {
                    minute: m,
                    service: "x".into(),
                    metric_name: "orders".into(),
                    value: business[m as usize],
                })
                .unwrap();
        }
        let g = CallGraph::build(&store, 60, 30, 60);
        let biz = g.business_series("x", "orders").values;
        let cands = [cand("b", AnomalyType::Reliability), cand("a", AnomalyType::Reliability)];
        let r = rank_candidates(&cands, &g, &biz).unwrap();
        assert_eq!(r[0].candidate.service, "a");
        assert!((r[0].score - 1.0).abs() < 1e-9);
        assert!(r.iter().all(|c| (0.0..=1.0).contains(&c.score)));
        // affine transform of the business series leaves the order intact
        let biz2: Vec<f64> = biz.iter().map(|v| -4.0 * v + 3.0).collect();
        let r2 = rank_candidates(&cands, &g, &biz2).unwrap();
        assert_eq!(
            r.iter().map(|c| &c.candidate).collect::<Vec<_>>(),
            r2.iter().map(|c| &c.candidate).collect::<Vec<_>>()
        );
        assert!(rank_candidates(&[], &g, &biz).unwrap().is_empty());
    }
}
