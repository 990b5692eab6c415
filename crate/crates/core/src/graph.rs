//! Per-incident service call graph.
//!
//! The edge set is fixed when the graph is built (calls seen in the call
//! window before the incident). Metric histories are pulled from the store
//! only when the analysis first touches an edge, then cached.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Series;
use crate::store::{EdgeKey, MetricKind, MetricStore, SeriesKey, Window};

pub const MINUTES_PER_DAY: i64 = 1440;
pub const MINUTES_PER_WEEK: i64 = 7 * MINUTES_PER_DAY;

/// Side of a service: upstream = its callers, downstream = its callees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upstream,
    Downstream,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::Upstream => Direction::Downstream,
            Direction::Downstream => Direction::Upstream,
        }
    }
}

/// Everything the detectors read about one (edge, metric) pair, fetched in
/// a single store read.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeHistory {
    pub kind: MetricKind,
    pub incident_minute: i64,
    pub metric_window: usize,
    /// `[incident - 2 * metric_window - 1, incident)`.
    pub recent: Series,
    /// The metric window shifted back one day; `None` if that predates the
    /// edge's data.
    pub prev_day: Option<Series>,
    /// The metric window shifted back one week; `None` if unavailable.
    pub prev_week: Option<Series>,
    /// Request counts aligned with `recent`, for EC histories.
    pub recent_requests: Option<Series>,
    /// Earliest minute with any record for the edge.
    pub first_minute: Option<i64>,
}

impl EdgeHistory {
    pub fn recent_span(metric_window: usize) -> usize {
        2 * metric_window + 1
    }

    /// Pull the history for `edge` from the store in one read.
    pub fn load(
        store: &MetricStore,
        edge: &EdgeKey,
        kind: MetricKind,
        incident_minute: i64,
        metric_window: usize,
    ) -> Self {
        let windows = [
            Window::new(incident_minute, Self::recent_span(metric_window)),
            Window::new(incident_minute - MINUTES_PER_DAY, metric_window),
            Window::new(incident_minute - MINUTES_PER_WEEK, metric_window),
        ];
        let first = store.first_minute(edge);
        let mut fetch = store.fetch_edge(edge, kind, &windows);
        let available = |start: i64| first.is_some_and(|f| f <= start);
        let prev_week = fetch.values.pop().filter(|_| available(windows[2].start()));
        let prev_day = fetch.values.pop().filter(|_| available(windows[1].start()));
        let recent = fetch.values.pop().expect("recent window requested");
        let recent_requests = fetch.requests.map(|mut r| r.swap_remove(0));
        Self {
            kind,
            incident_minute,
            metric_window,
            recent,
            prev_day,
            prev_week,
            recent_requests,
            first_minute: first,
        }
    }

    /// Values over `[incident - offset_end - len, incident - offset_end)`.
    pub fn recent_range(&self, len: usize, offset_end: usize) -> &[f64] {
        let end = self.incident_minute - offset_end as i64;
        self.recent
            .slice_minutes(end - len as i64, end)
            .expect("range inside recent span")
    }

    /// True if the edge has any data before `minute`.
    pub fn has_data_before(&self, minute: i64) -> bool {
        self.first_minute.is_some_and(|f| f < minute)
    }

    /// The metric window ending at the incident.
    pub fn metric_series(&self) -> &[f64] {
        self.recent_range(self.metric_window, 0)
    }
}

pub struct CallGraph<'s> {
    store: &'s MetricStore,
    incident_minute: i64,
    call_window_minutes: usize,
    metric_window_minutes: usize,
    nodes: BTreeSet<String>,
    edges: BTreeSet<EdgeKey>,
    callees: BTreeMap<String, BTreeSet<String>>,
    callers: BTreeMap<String, BTreeSet<String>>,
    cache: RwLock<HashMap<(EdgeKey, MetricKind), Arc<EdgeHistory>>>,
    pulls: AtomicU64,
}

impl<'s> CallGraph<'s> {
    pub fn build(
        store: &'s MetricStore,
        incident_minute: i64,
        call_window_minutes: usize,
        metric_window_minutes: usize,
    ) -> Self {
        let edges = store.edges_active(incident_minute, call_window_minutes);
        let mut nodes = BTreeSet::new();
        let mut callees: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut callers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &edges {
            nodes.insert(e.caller.clone());
            nodes.insert(e.callee.clone());
            callees.entry(e.caller.clone()).or_default().insert(e.callee.clone());
            callers.entry(e.callee.clone()).or_default().insert(e.caller.clone());
        }
        Self {
            store,
            incident_minute,
            call_window_minutes,
            metric_window_minutes,
            nodes,
            edges,
            callees,
            callers,
            cache: RwLock::new(HashMap::new()),
            pulls: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &'s MetricStore {
        self.store
    }

    pub fn incident_minute(&self) -> i64 {
        self.incident_minute
    }

    pub fn call_window_minutes(&self) -> usize {
        self.call_window_minutes
    }

    pub fn metric_window_minutes(&self) -> usize {
        self.metric_window_minutes
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<EdgeKey> {
        &self.edges
    }

    pub fn contains(&self, service: &str) -> bool {
        self.nodes.contains(service)
    }

    pub fn has_edge(&self, edge: &EdgeKey) -> bool {
        self.edges.contains(edge)
    }

    /// Callers (upstream) or callees (downstream) of `service`, sorted by id.
    pub fn neighbors(&self, service: &str, direction: Direction) -> Result<Vec<(String, EdgeKey)>> {
        if !self.contains(service) {
            return Err(Error::invalid(format!("service '{service}' is not in the call graph")));
        }
        let side = match direction {
            Direction::Upstream => self.callers.get(service),
            Direction::Downstream => self.callees.get(service),
        };
        Ok(side
            .into_iter()
            .flatten()
            .map(|other| {
                let edge = match direction {
                    Direction::Upstream => EdgeKey {
                        caller: other.clone(),
                        callee: service.to_string(),
                    },
                    Direction::Downstream => EdgeKey {
                        caller: service.to_string(),
                        callee: other.clone(),
                    },
                };
                (other.clone(), edge)
            })
            .collect())
    }

    /// Cached history for an edge metric; the first access reads the store.
    pub fn history(&self, edge: &EdgeKey, kind: MetricKind) -> Result<Arc<EdgeHistory>> {
        if !self.has_edge(edge) {
            return Err(Error::invalid(format!("edge {edge} is not in the call graph")));
        }
        let key = (edge.clone(), kind);
        if let Some(h) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(h));
        }
        // Concurrent misses may both load; the store is immutable during
        // analysis so both loads are identical and the first insert wins.
        let loaded = Arc::new(EdgeHistory::load(
            self.store,
            edge,
            kind,
            self.incident_minute,
            self.metric_window_minutes,
        ));
        self.pulls.fetch_add(1, Ordering::Relaxed);
        let mut cache = self.cache.write().expect("cache lock");
        Ok(Arc::clone(cache.entry(key).or_insert(loaded)))
    }

    /// The metric-window series of an edge, ending at the incident minute.
    pub fn edge_series(&self, edge: &EdgeKey, kind: MetricKind) -> Result<Series> {
        let h = self.history(edge, kind)?;
        Ok(Series {
            start_minute: self.incident_minute - self.metric_window_minutes as i64,
            values: h.metric_series().to_vec(),
        })
    }

    pub fn business_series(&self, service: &str, metric: &str) -> Series {
        self.store.query_window(
            &SeriesKey::Business {
                service: service.to_string(),
                metric: metric.to_string(),
            },
            self.incident_minute,
            self.metric_window_minutes,
        )
    }

    /// Number of (edge, metric) histories pulled from the store so far.
    pub fn pulls(&self) -> u64 {
        self.pulls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::CallRecord;

    fn store_with(edges: &[(&str, &str)], minutes: std::ops::Range<i64>) -> MetricStore {
        let mut s = MetricStore::new();
        for &(a, b) in edges {
            for m in minutes.clone() {
                s.ingest_call(CallRecord {
                    minute: m,
                    caller: a.into(),
                    callee: b.into(),
                    rt_ms: 10.0 + m as f64,
                    error_count: 0.0,
                    qps: 1.0,
                    request_count: 60.0,
                })
                .unwrap();
            }
        }
        s
    }

    const TEN_SERVICE: [(&str, &str); 8] = [
        ("S1", "S4"),
        ("S4", "S5"),
        ("S5", "S7"),
        ("S6", "S7"),
        ("S7", "S9"),
        ("S7", "S10"),
        ("S2", "S5"),
        ("S5", "S8"),
    ];

    #[test]
    fn empty_store_gives_empty_graph() {
        let s = MetricStore::new();
        let g = CallGraph::build(&s, 100, 30, 60);
        assert!(g.nodes().is_empty());
        assert!(g.edges().is_empty());
    }

    #[test]
    fn ten_service_topology() {
        let s = store_with(&TEN_SERVICE, 0..100);
        let g = CallGraph::build(&s, 100, 30, 60);
        assert_eq!(g.edges().len(), 8);
        assert_eq!(g.nodes().len(), 9);
        let names = |v: Vec<(String, EdgeKey)>| v.into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(g.neighbors("S5", Direction::Upstream).unwrap()), ["S2", "S4"]);
        assert_eq!(names(g.neighbors("S5", Direction::Downstream).unwrap()), ["S7", "S8"]);
        assert_eq!(names(g.neighbors("S7", Direction::Downstream).unwrap()), ["S10", "S9"]);
        assert!(g.neighbors("S3", Direction::Upstream).is_err());
        assert_eq!(s.read_count(), 0, "building must not read metric series");
    }

    #[test]
    fn call_window_boundary() {
        let mut s = store_with(&[("a", "b")], 69..70);
        s.ingest_call(CallRecord {
            minute: 70,
            caller: "c".into(),
            callee: "d".into(),
            rt_ms: 1.0,
            error_count: 0.0,
            qps: 1.0,
            request_count: 60.0,
        })
        .unwrap();
        // incident 100, window [70, 100): minute 69 is 31 minutes before.
        let g = CallGraph::build(&s, 100, 30, 60);
        assert_eq!(g.edges().len(), 1);
        assert!(g.has_edge(&EdgeKey::new("c", "d").unwrap()));
    }

    #[test]
    fn edge_series_is_cached_and_matches_store() {
        let s = store_with(&TEN_SERVICE, 0..200);
        let g = CallGraph::build(&s, 200, 30, 60);
        let e = EdgeKey::new("S5", "S7").unwrap();
        let a = g.edge_series(&e, MetricKind::Rt).unwrap();
        let b = g.edge_series(&e, MetricKind::Rt).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert_eq!(g.pulls(), 1);
        let direct = s.query_window(&SeriesKey::Edge(e.clone(), MetricKind::Rt), 200, 60);
        assert_eq!(a, direct);
        assert!(g
            .edge_series(&EdgeKey::new("S1", "S9").unwrap(), MetricKind::Rt)
            .is_err());
    }

    #[test]
    fn history_availability_flags() {
        let s = store_with(&[("a", "b")], 0..3000);
        let g = CallGraph::build(&s, 3000, 30, 60);
        let h = g.history(&EdgeKey::new("a", "b").unwrap(), MetricKind::Ec).unwrap();
        assert!(h.prev_day.is_some());
        assert!(h.prev_week.is_none());
        assert!(h.recent_requests.is_some());
        assert!(h.has_data_before(2990));
        assert!(!h.has_data_before(0));
        assert_eq!(h.recent.len(), 121);
    }

    #[test]
    fn isolated_and_cyclic_graphs() {
        let s = store_with(&[("a", "b"), ("b", "a")], 0..10);
        let g = CallGraph::build(&s, 10, 30, 60);
        assert_eq!(g.neighbors("a", Direction::Upstream).unwrap().len(), 1);
        assert_eq!(g.neighbors("a", Direction::Downstream).unwrap().len(), 1);
    }

    #[test]
    fn neighbors_consistent_with_edges() {
        let s = store_with(&TEN_SERVICE, 0..50);
        let g = CallGraph::build(&s, 50, 30, 60);
        for n in g.nodes() {
            for (up, e) in g.neighbors(n, Direction::Upstream).unwrap() {
                assert!(g.has_edge(&e) && e.caller == up && &e.callee == n);
            }
            for (down, e) in g.neighbors(n, Direction::Downstream).unwrap() {
                assert!(g.has_edge(&e) && e.callee == down && &e.caller == n);
            }
        }
        let leaf = g.neighbors("S9", Direction::Downstream).unwrap();
        assert!(leaf.is_empty());
    }
}
