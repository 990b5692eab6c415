//! Labelled detector cases cut from simulated systems.
//!
//! Each case is a small call chain with its own service names and its own
//! incident minute. Labels come from the injected faults only: a case is
//! anomalous exactly when a fault of the detector's type is active on the
//! probed edge at the incident. Training and held-out incident minutes are
//! drawn from disjoint ranges far enough apart that no metric minute is
//! shared between the two splits.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{MagnitudeRanges, Span};
use super::{incident_coverage, Baseline, BaselineParams, FaultSpec, Simulation, Topology};
use crate::anomaly::AnomalyType;
use crate::detection::{extract_ec_features, extract_rt_features, DetectionConfig};
use crate::error::{Error, Result};
use crate::graph::{CallGraph, EdgeHistory};
use crate::store::{EdgeKey, MetricKind, MetricStore};

pub const CORPUS_FILE: &str = "corpus.json";

/// Incident minutes for training cases (days 8 to 15).
pub const TRAIN_MINUTES: Range<i64> = 11_520..23_040;
/// Incident minutes for held-out cases; their lookback starts at 23040.
pub const HELDOUT_MINUTES: Range<i64> = 33_180..44_640;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub baseline: BaselineParams,
    /// Share of normal cases drawn from a noise-free baseline.
    pub quiet_fraction: f64,
    pub rt_train_normal: usize,
    pub rt_heldout_normal: usize,
    pub rt_heldout_anomalous: usize,
    pub ec_train_cases: usize,
    /// Positive to negative ratio.
    pub ec_train_ratio: [usize; 2],
    pub ec_heldout_cases: usize,
    pub ec_heldout_ratio: [usize; 2],
    /// Share of EC negatives that carry a short error burst ending before
    /// the incident.
    pub benign_burst_fraction: f64,
    pub traffic_heldout_anomalous: usize,
    pub traffic_heldout_normal: usize,
    pub magnitudes: MagnitudeRanges,
    pub attenuation: f64,
    /// Hops between the fault's root edge and the probed edge, inclusive.
    pub max_hops: usize,
    pub lag_minutes: Span<i64>,
    /// How long before the incident the fault reaches the probed edge.
    pub onset_lead_minutes: Span<i64>,
    pub traffic_onset_lead_minutes: Span<i64>,
    /// Smallest relative business change for a traffic case to count as an
    /// incident.
    pub min_business_impact: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            baseline: BaselineParams::default(),
            quiet_fraction: 0.1,
            rt_train_normal: 800,
            rt_heldout_normal: 200,
            rt_heldout_anomalous: 200,
            ec_train_cases: 1000,
            ec_train_ratio: [1, 3],
            ec_heldout_cases: 400,
            ec_heldout_ratio: [5, 3],
            benign_burst_fraction: 0.2,
            traffic_heldout_anomalous: 100,
            traffic_heldout_normal: 100,
            magnitudes: MagnitudeRanges::default(),
            attenuation: 0.8,
            max_hops: 3,
            lag_minutes: [0, 3],
            onset_lead_minutes: [3, 31],
            traffic_onset_lead_minutes: [3, 11],
            min_business_impact: 0.15,
        }
    }
}

/// One feature vector with its label and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledCase {
    pub id: String,
    pub edge: EdgeKey,
    pub incident_minute: i64,
    pub features: Vec<f64>,
    pub anomalous: bool,
}

/// Inputs of the rule-based traffic detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficCase {
    pub id: String,
    pub edge: EdgeKey,
    pub incident_minute: i64,
    pub qps: Vec<f64>,
    pub business: Vec<f64>,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub rt_train: Vec<LabelledCase>,
    pub rt_heldout: Vec<LabelledCase>,
    pub ec_train: Vec<LabelledCase>,
    pub ec_heldout: Vec<LabelledCase>,
    pub traffic_heldout: Vec<TrafficCase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Heldout,
}

impl Split {
    fn minutes(self) -> Range<i64> {
        match self {
            Split::Train => TRAIN_MINUTES,
            Split::Heldout => HELDOUT_MINUTES,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

/// Positive count for `total` cases at ratio `pos:neg`.
fn positives(total: usize, [pos, neg]: [usize; 2]) -> usize {
    if pos + neg == 0 {
        return 0;
    }
    ((total * pos) as f64 / (pos + neg) as f64).round() as usize
}

fn draw_f(rng: &mut ChaCha8Rng, [lo, hi]: Span<f64>) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn draw_i(rng: &mut ChaCha8Rng, [lo, hi]: Span<i64>) -> i64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// What a chain case injects.
enum Injection {
    None,
    Fault {
        anomaly_type: AnomalyType,
    },
    /// Extra errors on the probed edge for a few minutes, over before the
    /// incident.
    Burst,
}

struct ChainCase {
    sim: Simulation,
    probe: EdgeKey,
    incident_minute: i64,
    /// Probed-edge minutes and extra errors for a benign burst.
    burst: Option<(Range<i64>, f64)>,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.baseline.validate()?;
        if !(0.0..=1.0).contains(&self.quiet_fraction) || !(0.0..=1.0).contains(&self.benign_burst_fraction) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.onset_lead_minutes[0] < 1 || self.traffic_onset_lead_minutes[0] < 1 {
            return Err(Error::Config(
                "faults must start at least a minute before the incident".into(),
            ));
        }
        if self.lag_minutes[0] < 0 {
            return Err(Error::Config("lag must be non-negative".into()));
        }
        Ok(())
    }

    fn rng(&self, split: Split, detector: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((detector << 40) ^ ((split == Split::Heldout) as u64) << 32 ^ index as u64);
        rng
    }

    fn baseline_for(&self, rng: &mut ChaCha8Rng) -> BaselineParams {
        if rng.random_bool(self.quiet_fraction) {
            BaselineParams {
                diurnal_amplitude: 0.0,
                weekly_amplitude: 0.0,
                rt_noise: 0.0,
                qps_noise: 0.0,
                ec_burst_probability: 0.0,
                business_noise: 0.0,
                ..self.baseline.clone()
            }
        } else {
            self.baseline.clone()
        }
    }

    fn magnitude(&self, t: AnomalyType, rng: &mut ChaCha8Rng) -> f64 {
        match t {
            AnomalyType::Performance => draw_f(rng, self.magnitudes.performance),
            AnomalyType::Reliability => draw_f(rng, self.magnitudes.reliability),
            AnomalyType::Traffic => {
                if rng.random_bool(0.5) {
                    draw_f(rng, self.magnitudes.traffic_drop)
                } else {
                    draw_f(rng, self.magnitudes.traffic_surge)
                }
            }
        }
    }

    /// A chain `s0 -> s1 -> ... -> s(h+1)` probed at `s0 -> s1`, with any
    /// fault rooted at the far end `h` hops away.
    fn chain_case(&self, id: &str, split: Split, injection: Injection, rng: &mut ChaCha8Rng) -> Result<ChainCase> {
        let minutes = split.minutes();
        let incident_minute = rng.random_range(minutes);
        let hops = rng.random_range(0..=self.max_hops);
        let services: Vec<String> = (0..hops + 2).map(|i| format!("{id}-s{i}")).collect();
        let edges: Vec<EdgeKey> = services
            .windows(2)
            .map(|w| EdgeKey::new(w[0].clone(), w[1].clone()))
            .collect::<Result<_>>()?;
        let probe = edges[0].clone();
        let root_edge = edges[hops].clone();
        let topology = Topology::new(services, edges, Vec::new())?;
        let params = self.baseline_for(rng);
        let baseline = Baseline::new(&topology, params, rng.random())?;
        let mut sim = Simulation::new(topology, baseline, "orders");
        let mut burst = None;
        match injection {
            Injection::None => {}
            Injection::Fault { anomaly_type } => {
                let lag = draw_i(rng, self.lag_minutes);
                let lead = draw_i(rng, self.onset_lead_minutes);
                let magnitude = self.magnitude(anomaly_type, rng);
                sim.inject(FaultSpec {
                    root_service: root_edge.callee.clone(),
                    root_edge,
                    anomaly_type,
                    onset_minute: incident_minute - lead - hops as i64 * lag,
                    magnitude,
                    attenuation: self.attenuation,
                    lag_minutes: lag,
                    max_hops: None,
                    affects_business: false,
                    business_dip: 0.0,
                })?;
            }
            Injection::Burst => {
                let len = rng.random_range(1..=2);
                let end = incident_minute - rng.random_range(1..=15);
                let m = self.magnitude(AnomalyType::Reliability, rng);
                let scale = self.attenuation.powi(hops as i32);
                burst = Some((end - len..end, 0.01 * (m - 1.0) * scale));
            }
        }
        Ok(ChainCase {
            sim,
            probe,
            incident_minute,
            burst,
        })
    }

    /// A store holding only the probed edge over the incident's lookback.
    fn probe_store(case: &ChainCase) -> Result<MetricStore> {
        let mut store = MetricStore::new();
        for r in incident_coverage(case.incident_minute) {
            for m in r {
                let mut rec = case.sim.call_record(&case.probe, m);
                if let Some((range, rate)) = &case.burst {
                    if range.contains(&m) {
                        rec.error_count = (rec.error_count + rate * rec.request_count)
                            .round()
                            .min(rec.request_count);
                    }
                }
                store.ingest_call(rec)?;
            }
        }
        Ok(store)
    }

    fn rt_case(
        &self,
        split: Split,
        index: usize,
        anomalous: bool,
        det: &DetectionConfig,
        mw: usize,
    ) -> Result<LabelledCase> {
        let mut rng = self.rng(split, 1, index);
        let id = format!("rt-{}-{index:05}", split.tag());
        let injection = if anomalous {
            Injection::Fault {
                anomaly_type: AnomalyType::Performance,
            }
        } else {
            Injection::None
        };
        let case = self.chain_case(&id, split, injection, &mut rng)?;
        let store = Self::probe_store(&case)?;
        let h = EdgeHistory::load(&store, &case.probe, MetricKind::Rt, case.incident_minute, mw);
        let f = extract_rt_features(&h, det)?
            .ok_or_else(|| Error::Simulation(format!("{id}: probe edge lacks history")))?;
        Ok(LabelledCase {
            id,
            edge: case.probe,
            incident_minute: case.incident_minute,
            features: f.values.to_vec(),
            anomalous,
        })
    }

    fn ec_case(
        &self,
        split: Split,
        index: usize,
        anomalous: bool,
        det: &DetectionConfig,
        mw: usize,
    ) -> Result<LabelledCase> {
        let mut rng = self.rng(split, 2, index);
        let id = format!("ec-{}-{index:05}", split.tag());
        let injection = if anomalous {
            Injection::Fault {
                anomaly_type: AnomalyType::Reliability,
            }
        } else if rng.random_bool(self.benign_burst_fraction) {
            Injection::Burst
        } else {
            Injection::None
        };
        let case = self.chain_case(&id, split, injection, &mut rng)?;
        let store = Self::probe_store(&case)?;
        let ec = EdgeHistory::load(&store, &case.probe, MetricKind::Ec, case.incident_minute, mw);
        let rt = EdgeHistory::load(&store, &case.probe, MetricKind::Rt, case.incident_minute, mw);
        let f = extract_ec_features(&ec, &rt, det)?
            .ok_or_else(|| Error::Simulation(format!("{id}: probe edge lacks history")))?;
        Ok(LabelledCase {
            id,
            edge: case.probe,
            incident_minute: case.incident_minute,
            features: f.values.to_vec(),
            anomalous,
        })
    }

    /// Callers `c1..ck` of an entry service `e`, which calls a leaf. The
    /// probed edge is `c1 -> e`. Anomalous cases change its traffic;
    /// normal cases either change nothing or change another inbound call.
    fn traffic_case(&self, index: usize, anomalous: bool, mw: usize) -> Result<TrafficCase> {
        let split = Split::Heldout;
        let mut rng = self.rng(split, 3, index);
        let id = format!("qps-{}-{index:05}", split.tag());
        let k = rng.random_range(1..=3usize);
        let entry = format!("{id}-e");
        let mut services: Vec<String> = (1..=k).map(|i| format!("{id}-c{i}")).collect();
        services.push(entry.clone());
        services.push(format!("{id}-l"));
        let mut edges: Vec<EdgeKey> = (0..k)
            .map(|i| EdgeKey::new(services[i].clone(), entry.clone()))
            .collect::<Result<_>>()?;
        edges.push(EdgeKey::new(entry.clone(), format!("{id}-l"))?);
        let probe = edges[0].clone();
        let topology = Topology::new(services, edges.clone(), vec![entry.clone()])?;
        let params = self.baseline_for(&mut rng);

        for _ in 0..200 {
            let incident_minute = rng.random_range(HELDOUT_MINUTES);
            let baseline = Baseline::new(&topology, params.clone(), rng.random())?;
            let mut sim = Simulation::new(topology.clone(), baseline, "orders");
            let target = if anomalous {
                Some(probe.clone())
            } else if k > 1 && rng.random_bool(0.5) {
                Some(edges[rng.random_range(1..k)].clone())
            } else {
                None
            };
            if let Some(edge) = target {
                let lead = draw_i(&mut rng, self.traffic_onset_lead_minutes);
                let magnitude = self.magnitude(AnomalyType::Traffic, &mut rng);
                sim.inject(FaultSpec {
                    root_service: edge.caller.clone(),
                    root_edge: edge,
                    anomaly_type: AnomalyType::Traffic,
                    onset_minute: incident_minute - lead,
                    magnitude,
                    attenuation: self.attenuation,
                    lag_minutes: 0,
                    max_hops: None,
                    affects_business: true,
                    business_dip: 0.0,
                })?;
                if anomalous && business_impact(&sim, &entry, incident_minute - 1) < self.min_business_impact {
                    continue;
                }
            }
            let store = sim.store_for(&incident_coverage(incident_minute))?;
            let graph = CallGraph::build(&store, incident_minute, 30, mw);
            let qps = graph.history(&probe, MetricKind::Qps)?.metric_series().to_vec();
            let business = graph.business_series(&entry, "orders").values;
            return Ok(TrafficCase {
                id,
                edge: probe,
                incident_minute,
                qps,
                business,
                anomalous,
            });
        }
        Err(Error::Simulation(format!(
            "{id}: no traffic change with enough business impact"
        )))
    }

    pub fn generate(&self, det: &DetectionConfig, metric_window: usize) -> Result<Corpus> {
        self.validate()?;
        det.validate(metric_window)?;
        let rt_train = (0..self.rt_train_normal)
            .into_par_iter()
            .map(|i| self.rt_case(Split::Train, i, false, det, metric_window))
            .collect::<Result<Vec<_>>>()?;
        let rt_total = self.rt_heldout_normal + self.rt_heldout_anomalous;
        let rt_heldout = (0..rt_total)
            .into_par_iter()
            .map(|i| self.rt_case(Split::Heldout, i, i < self.rt_heldout_anomalous, det, metric_window))
            .collect::<Result<Vec<_>>>()?;
        let ec_train_pos = positives(self.ec_train_cases, self.ec_train_ratio);
        let ec_train = (0..self.ec_train_cases)
            .into_par_iter()
            .map(|i| self.ec_case(Split::Train, i, i < ec_train_pos, det, metric_window))
            .collect::<Result<Vec<_>>>()?;
        let ec_held_pos = positives(self.ec_heldout_cases, self.ec_heldout_ratio);
        let ec_heldout = (0..self.ec_heldout_cases)
            .into_par_iter()
            .map(|i| self.ec_case(Split::Heldout, i, i < ec_held_pos, det, metric_window))
            .collect::<Result<Vec<_>>>()?;
        let traffic_total = self.traffic_heldout_anomalous + self.traffic_heldout_normal;
        let traffic_heldout = (0..traffic_total)
            .into_par_iter()
            .map(|i| self.traffic_case(i, i < self.traffic_heldout_anomalous, metric_window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            config: self.clone(),
            rt_train,
            rt_heldout,
            ec_train,
            ec_heldout,
            traffic_heldout,
        })
    }
}

/// Relative change of an entry's business metric caused by the faults.
pub fn business_impact(sim: &Simulation, entry: &str, minute: i64) -> f64 {
    let faulted = sim.business_record(entry, minute).value;
    let clean = Simulation::new(sim.topology.clone(), sim.baseline.clone(), sim.business_metric.clone())
        .business_record(entry, minute)
        .value;
    if clean == 0.0 {
        return 0.0;
    }
    ((faulted - clean) / clean).abs()
}

impl Corpus {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            what: "corpus".into(),
            source: e,
        })?;
        std::fs::write(dir.join(CORPUS_FILE), text)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_FILE);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("corpus {}", path.display()),
            source: e,
        })
    }

    /// Every minute read by a case of the given cases, as one interval per
    /// case and lookback window.
    pub fn covered_minutes<'a>(cases: impl IntoIterator<Item = &'a LabelledCase>) -> Vec<Range<i64>> {
        cases
            .into_iter()
            .flat_map(|c| incident_coverage(c.incident_minute))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            rt_train_normal: 40,
            rt_heldout_normal: 10,
            rt_heldout_anomalous: 10,
            ec_train_cases: 80,
            ec_heldout_cases: 40,
            traffic_heldout_anomalous: 10,
            traffic_heldout_normal: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn ratios_follow_config() {
        let c = small().generate(&DetectionConfig::default(), 60).unwrap();
        let pos = c.ec_train.iter().filter(|x| x.anomalous).count();
        assert_eq!(pos, 20);
        assert_eq!(c.ec_train.len() - pos, 60);
        let held = c.ec_heldout.iter().filter(|x| x.anomalous).count();
        assert_eq!(held, 25);
        assert!(c.rt_train.iter().all(|x| !x.anomalous));
        assert_eq!(c.traffic_heldout.len(), 20);
    }

    #[test]
    fn splits_share_no_minutes() {
        let c = small().generate(&DetectionConfig::default(), 60).unwrap();
        let train = Corpus::covered_minutes(c.rt_train.iter().chain(&c.ec_train));
        let held = Corpus::covered_minutes(c.rt_heldout.iter().chain(&c.ec_heldout));
        let train_end = train.iter().map(|r| r.end).max().unwrap();
        let held_start = held.iter().map(|r| r.start).min().unwrap();
        assert!(train_end <= held_start, "{train_end} > {held_start}");
    }

    #[test]
    fn deterministic() {
        let a = small().generate(&DetectionConfig::default(), 60).unwrap();
        let b = small().generate(&DetectionConfig::default(), 60).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_ratio_rounding() {
        assert_eq!(positives(1000, [1, 3]), 250);
        assert_eq!(positives(400, [5, 3]), 250);
        assert_eq!(positives(10, [0, 0]), 0);
    }
}
