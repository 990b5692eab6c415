//! Minute-bucketed in-memory store for service-call and business metrics.
//!
//! Windows are half-open `[end - length, end)`. Missing minutes are filled
//! on read: error counts, QPS and request counts become 0 (no calls), while
//! response times and business values carry the last observed value
//! forward (0 if nothing was observed before the window).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Series;

/// A directed service call `caller -> callee`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub caller: String,
    pub callee: String,
}

impl EdgeKey {
    pub fn new(caller: impl Into<String>, callee: impl Into<String>) -> Result<Self> {
        let caller = caller.into();
        let callee = callee.into();
        if caller.is_empty() || callee.is_empty() {
            return Err(Error::Rejected("service identifiers must be non-empty".into()));
        }
        if caller == callee {
            return Err(Error::Rejected(format!("self-call on {caller}")));
        }
        Ok(Self { caller, callee })
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.caller, self.callee)
    }
}

/// Per-call quality metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "RT")]
    Rt,
    #[serde(rename = "EC")]
    Ec,
    #[serde(rename = "QPS")]
    Qps,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Rt, MetricKind::Ec, MetricKind::Qps];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Rt => "RT",
            MetricKind::Ec => "EC",
            MetricKind::Qps => "QPS",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub minute: i64,
    pub caller: String,
    pub callee: String,
    pub rt_ms: f64,
    pub error_count: f64,
    pub qps: f64,
    pub request_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusinessRecord {
    pub minute: i64,
    pub service: String,
    pub metric_name: String,
    pub value: f64,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Call(CallRecord),
    Business(BusinessRecord),
}

impl CallRecord {
    pub fn edge(&self) -> Result<EdgeKey> {
        EdgeKey::new(self.caller.clone(), self.callee.clone())
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("rt_ms", self.rt_ms),
            ("error_count", self.error_count),
            ("qps", self.qps),
            ("request_count", self.request_count),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Rejected(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.error_count > self.request_count {
            return Err(Error::Rejected(format!(
                "error_count {} exceeds request_count {}",
                self.error_count, self.request_count
            )));
        }
        let expected = self.qps * 60.0;
        let scale = expected.max(self.request_count);
        if scale > 0.0 && (self.request_count - expected).abs() > 0.01 * scale {
            return Err(Error::Rejected(format!(
                "request_count {} inconsistent with qps {} (expected ~{})",
                self.request_count, self.qps, expected
            )));
        }
        Ok(())
    }
}

/// What a window query addresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SeriesKey {
    Edge(EdgeKey, MetricKind),
    /// Per-minute request counts of an edge (carried alongside EC).
    Requests(EdgeKey),
    Business {
        service: String,
        metric: String,
    },
}

/// A half-open minute range `[end - len, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub end: i64,
    pub len: usize,
}

impl Window {
    pub fn new(end: i64, len: usize) -> Self {
        Self { end, len }
    }

    pub fn start(&self) -> i64 {
        self.end - self.len as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CallPoint {
    rt_ms: f64,
    error_count: f64,
    qps: f64,
    request_count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Rt,
    Ec,
    Qps,
    Requests,
}

impl Field {
    fn of(kind: MetricKind) -> Self {
        match kind {
            MetricKind::Rt => Field::Rt,
            MetricKind::Ec => Field::Ec,
            MetricKind::Qps => Field::Qps,
        }
    }

    fn get(self, p: &CallPoint) -> f64 {
        match self {
            Field::Rt => p.rt_ms,
            Field::Ec => p.error_count,
            Field::Qps => p.qps,
            Field::Requests => p.request_count,
        }
    }

    fn forward_fills(self) -> bool {
        matches!(self, Field::Rt)
    }
}

/// Result of one multi-window edge read.
#[derive(Debug, Clone)]
pub struct EdgeFetch {
    pub values: Vec<Series>,
    /// Request counts over the same windows; present for EC reads.
    pub requests: Option<Vec<Series>>,
}

#[derive(Debug, Default)]
pub struct MetricStore {
    calls: HashMap<EdgeKey, BTreeMap<i64, CallPoint>>,
    business: HashMap<(String, String), BTreeMap<i64, f64>>,
    reads: AtomicU64,
}

impl Clone for MetricStore {
    fn clone(&self) -> Self {
        Self {
            calls: self.calls.clone(),
            business: self.business.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&mut self, record: Record) -> Result<()> {
        match record {
            Record::Call(c) => self.ingest_call(c),
            Record::Business(b) => self.ingest_business(b),
        }
    }

    pub fn ingest_call(&mut self, rec: CallRecord) -> Result<()> {
        rec.validate()?;
        let edge = rec.edge()?;
        self.calls.entry(edge).or_default().insert(
            rec.minute,
            CallPoint {
                rt_ms: rec.rt_ms,
                error_count: rec.error_count,
                qps: rec.qps,
                request_count: rec.request_count,
            },
        );
        Ok(())
    }

    pub fn ingest_business(&mut self, rec: BusinessRecord) -> Result<()> {
        if rec.service.is_empty() || rec.metric_name.is_empty() {
            return Err(Error::Rejected("business record needs service and metric_name".into()));
        }
        if !rec.value.is_finite() {
            return Err(Error::Rejected(format!(
                "business value must be finite, got {}",
                rec.value
            )));
        }
        self.business
            .entry((rec.service, rec.metric_name))
            .or_default()
            .insert(rec.minute, rec.value);
        Ok(())
    }

    pub fn ingest_all(&mut self, records: impl IntoIterator<Item = Record>) -> Result<()> {
        for r in records {
            self.ingest(r)?;
        }
        Ok(())
    }

    /// Number of read operations served so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn reset_read_count(&self) {
        self.reads.store(0, Ordering::Relaxed);
    }

    pub fn edge_count(&self) -> usize {
        self.calls.len()
    }

    pub fn record_count(&self) -> usize {
        self.calls.values().map(BTreeMap::len).sum::<usize>() + self.business.values().map(BTreeMap::len).sum::<usize>()
    }

    /// Earliest minute with any record for the edge.
    pub fn first_minute(&self, edge: &EdgeKey) -> Option<i64> {
        self.calls.get(edge)?.keys().next().copied()
    }

    pub fn query_window(&self, key: &SeriesKey, end_minute: i64, length: usize) -> Series {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.window_unchecked(key, Window::new(end_minute, length.max(1)))
    }

    /// Several windows of one edge metric in a single read. EC reads also
    /// return request counts, which the error-rate feature needs.
    pub fn fetch_edge(&self, edge: &EdgeKey, kind: MetricKind, windows: &[Window]) -> EdgeFetch {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let points = self.calls.get(edge);
        let values = windows
            .iter()
            .map(|w| edge_window(points, Field::of(kind), *w))
            .collect();
        let requests = (kind == MetricKind::Ec).then(|| {
            windows
                .iter()
                .map(|w| edge_window(points, Field::Requests, *w))
                .collect()
        });
        EdgeFetch { values, requests }
    }

    fn window_unchecked(&self, key: &SeriesKey, w: Window) -> Series {
        match key {
            SeriesKey::Edge(edge, kind) => edge_window(self.calls.get(edge), Field::of(*kind), w),
            SeriesKey::Requests(edge) => edge_window(self.calls.get(edge), Field::Requests, w),
            SeriesKey::Business { service, metric } => {
                let map = self.business.get(&(service.clone(), metric.clone()));
                fill_window(map, w, true, |v| *v)
            }
        }
    }

    /// Edges with at least one call (request_count > 0) in `[end - length, end)`.
    pub fn edges_active(&self, window_end: i64, length: usize) -> BTreeSet<EdgeKey> {
        let start = window_end - length as i64;
        self.calls
            .iter()
            .filter(|(_, pts)| pts.range(start..window_end).any(|(_, p)| p.request_count > 0.0))
            .map(|(e, _)| e.clone())
            .collect()
    }

    /// Every stored record, in a stable order (calls by edge then minute,
    /// then business records by key then minute).
    pub fn records(&self) -> Vec<Record> {
        let mut edges: Vec<_> = self.calls.iter().collect();
        edges.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = Vec::with_capacity(self.record_count());
        for (edge, pts) in edges {
            for (&minute, p) in pts {
                out.push(Record::Call(CallRecord {
                    minute,
                    caller: edge.caller.clone(),
                    callee: edge.callee.clone(),
                    rt_ms: p.rt_ms,
                    error_count: p.error_count,
                    qps: p.qps,
                    request_count: p.request_count,
                }));
            }
        }
        let mut biz: Vec<_> = self.business.iter().collect();
        biz.sort_by(|a, b| a.0.cmp(b.0));
        for ((service, metric), pts) in biz {
            for (&minute, &value) in pts {
                out.push(Record::Business(BusinessRecord {
                    minute,
                    service: service.clone(),
                    metric_name: metric.clone(),
                    value,
                }));
            }
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Parse {
                what: "record".into(),
                source: e,
            })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        store.ingest_jsonl(path)?;
        Ok(store)
    }

    pub fn ingest_jsonl(&mut self, path: &Path) -> Result<()> {
        let reader = BufReader::new(File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
                path: path.display().to_string(),
                line: i + 1,
                source: e,
            })?;
            self.ingest(rec).map_err(|e| match e {
                Error::Rejected(msg) => Error::Rejected(format!("{}: line {}: {}", path.display(), i + 1, msg)),
                other => other,
            })?;
        }
        Ok(())
    }
}

fn edge_window(points: Option<&BTreeMap<i64, CallPoint>>, field: Field, w: Window) -> Series {
    fill_window(points, w, field.forward_fills(), |p| field.get(p))
}

fn fill_window<T>(points: Option<&BTreeMap<i64, T>>, w: Window, forward_fill: bool, get: impl Fn(&T) -> f64) -> Series {
    let start = w.start();
    let mut values = Vec::with_capacity(w.len);
    let Some(points) = points else {
        return Series {
            start_minute: start,
            values: vec![0.0; w.len],
        };
    };
    let mut last = if forward_fill {
        points.range(..start).next_back().map(|(_, p)| get(p)).unwrap_or(0.0)
    } else {
        0.0
    };
    let mut iter = points.range(start..w.end).peekable();
    for minute in start..w.end {
        match iter.peek() {
            Some((&m, p)) if m == minute => {
                let v = get(p);
                values.push(v);
                last = v;
                iter.next();
            }
            _ => values.push(if forward_fill { last } else { 0.0 }),
        }
    }
    Series {
        start_minute: start,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(minute: i64, caller: &str, callee: &str, rt: f64, ec: f64, qps: f64) -> CallRecord {
        CallRecord {
            minute,
            caller: caller.into(),
            callee: callee.into(),
            rt_ms: rt,
            error_count: ec,
            qps,
            request_count: qps * 60.0,
        }
    }

    fn rt_key(a: &str, b: &str) -> SeriesKey {
        SeriesKey::Edge(EdgeKey::new(a, b).unwrap(), MetricKind::Rt)
    }

    #[test]
    fn read_your_write_and_overwrite() {
        let mut s = MetricStore::new();
        s.ingest_call(call(5, "a", "b", 5.0, 0.0, 1.0)).unwrap();
        assert_eq!(s.query_window(&rt_key("a", "b"), 6, 1).values, vec![5.0]);
        s.ingest_call(call(5, "a", "b", 7.0, 0.0, 1.0)).unwrap();
        assert_eq!(s.query_window(&rt_key("a", "b"), 6, 1).values, vec![7.0]);
    }

    #[test]
    fn sixty_minutes_in_order() {
        let mut s = MetricStore::new();
        for m in (0..60).rev() {
            s.ingest_call(call(m, "a", "b", m as f64, 0.0, 1.0)).unwrap();
        }
        let series = s.query_window(&rt_key("a", "b"), 60, 60);
        assert_eq!(series.start_minute, 0);
        assert_eq!(series.values, (0..60).map(|m| m as f64).collect::<Vec<_>>());
    }

    #[test]
    fn empty_store_fills_zeros() {
        let s = MetricStore::new();
        let e = EdgeKey::new("a", "b").unwrap();
        for kind in MetricKind::ALL {
            let series = s.query_window(&SeriesKey::Edge(e.clone(), kind), 100, 30);
            assert_eq!(series.values, vec![0.0; 30]);
            assert_eq!(series.start_minute, 70);
        }
    }

    #[test]
    fn rt_gap_is_forward_filled_and_counts_zero_filled() {
        let mut s = MetricStore::new();
        s.ingest_call(call(0, "a", "b", 10.0, 2.0, 1.0)).unwrap();
        s.ingest_call(call(2, "a", "b", 30.0, 4.0, 1.0)).unwrap();
        assert_eq!(s.query_window(&rt_key("a", "b"), 3, 3).values, vec![10.0, 10.0, 30.0]);
        let ec = SeriesKey::Edge(EdgeKey::new("a", "b").unwrap(), MetricKind::Ec);
        assert_eq!(s.query_window(&ec, 3, 3).values, vec![2.0, 0.0, 4.0]);
        // forward fill looks before the window start
        assert_eq!(s.query_window(&rt_key("a", "b"), 2, 1).values, vec![10.0]);
    }

    #[test]
    fn rejects_invalid_records() {
        let mut s = MetricStore::new();
        let mut bad = call(0, "a", "b", 1.0, 0.0, 1.0);
        bad.error_count = 100.0;
        assert!(matches!(s.ingest_call(bad), Err(Error::Rejected(_))));
        let mut bad = call(0, "a", "b", 1.0, 0.0, 1.0);
        bad.request_count = 30.0;
        assert!(s.ingest_call(bad).is_err());
        assert!(s.ingest_call(call(0, "a", "a", 1.0, 0.0, 1.0)).is_err());
        assert!(s.ingest_call(call(0, "", "a", 1.0, 0.0, 1.0)).is_err());
        assert!(s.ingest_call(call(0, "a", "b", -1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn edges_active_boundaries() {
        let mut s = MetricStore::new();
        assert!(s.edges_active(30, 30).is_empty());
        s.ingest_call(call(10, "a", "b", 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(s.edges_active(30, 30).len(), 1);
        assert!(s.edges_active(60, 30).is_empty());
        // zero-traffic records do not make an edge active
        s.ingest_call(call(40, "c", "d", 1.0, 0.0, 0.0)).unwrap();
        assert!(s.edges_active(60, 30).is_empty());
    }

    #[test]
    fn business_window() {
        let mut s = MetricStore::new();
        for m in 0..3 {
            s.ingest_business(BusinessRecord {
                minute: m,
                service: "S5".into(),
                metric_name: "orders".into(),
                value: 100.0 + m as f64,
            })
            .unwrap();
        }
        let key = SeriesKey::Business {
            service: "S5".into(),
            metric: "orders".into(),
        };
        assert_eq!(s.query_window(&key, 4, 4).values, vec![100.0, 101.0, 102.0, 102.0]);
    }

    #[test]
    fn fetch_edge_counts_one_read() {
        let mut s = MetricStore::new();
        s.ingest_call(call(0, "a", "b", 1.0, 1.0, 1.0)).unwrap();
        let e = EdgeKey::new("a", "b").unwrap();
        let f = s.fetch_edge(&e, MetricKind::Ec, &[Window::new(1, 1), Window::new(10, 5)]);
        assert_eq!(s.read_count(), 1);
        assert_eq!(f.values.len(), 2);
        assert_eq!(f.requests.unwrap()[0].values, vec![60.0]);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut s = MetricStore::new();
        s.ingest_call(call(3, "a", "b", 0.1 + 0.2, 1.0, 1.0 / 3.0)).unwrap();
        s.ingest_business(BusinessRecord {
            minute: 3,
            service: "a".into(),
            metric_name: "orders".into(),
            value: 1e-17,
        })
        .unwrap();
        s.save_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\":\"call\""));
        assert!(text.contains("\"kind\":\"business\""));
        let loaded = MetricStore::load_jsonl(&path).unwrap();
        assert_eq!(loaded.records(), s.records());

        std::fs::write(&path, "{\"kind\":\"call\",\"minute\":1}\n").unwrap();
        let err = MetricStore::load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
