//! Scenario files: a single hand-specified system, or a suite of generated
//! single-fault incidents.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_topology, incident_coverage, Baseline, BaselineParams, FaultPlan, FaultSpec, GroundTruth, QpsOverlay,
    RootCause, Simulation, Topology, TopologyParams,
};
use crate::anomaly::AnomalyType;
use crate::error::{Error, Result};
use crate::store::{EdgeKey, MetricStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySource {
    Generate(TopologyParams),
    /// JSON topology file, relative to the scenario file.
    Fixture(PathBuf),
    Inline(Topology),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Every minute from 0 up to the end of the given day count.
    Full { days: u32 },
    /// Only the minutes an analysis of the incident reads.
    Incident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentSpec {
    pub initial_service: String,
    pub incident_minute: i64,
}

fn default_metric() -> String {
    "orders".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub topology: TopologySource,
    #[serde(default)]
    pub baseline: BaselineParams,
    #[serde(default = "default_metric")]
    pub business_metric: String,
    pub faults: Vec<FaultSpec>,
    pub incident: IncidentSpec,
    pub coverage: Coverage,
    #[serde(default)]
    pub overlays: Vec<QpsOverlay>,
}

/// Inclusive-exclusive range as a two-element array.
pub type Span<T> = [T; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnitudeRanges {
    pub performance: Span<f64>,
    pub reliability: Span<f64>,
    /// Traffic drops (multiplier below 1).
    pub traffic_drop: Span<f64>,
    /// Traffic surges (multiplier above 1).
    pub traffic_surge: Span<f64>,
}

impl Default for MagnitudeRanges {
    fn default() -> Self {
        Self {
            performance: [4.0, 10.0],
            reliability: [4.0, 10.0],
            traffic_drop: [0.1, 0.4],
            traffic_surge: [2.5, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    pub seed: u64,
    pub incidents: usize,
    /// Types assigned round-robin to incidents.
    pub anomaly_types: Vec<AnomalyType>,
    pub topology: TopologyParams,
    pub baseline: BaselineParams,
    pub business_metric: String,
    pub magnitudes: MagnitudeRanges,
    pub attenuation: f64,
    /// Per-hop lag for performance and reliability faults; traffic
    /// changes reach every hop in the same minute.
    pub lag_minutes: Span<i64>,
    /// Minutes between the fault reaching the initial service and the
    /// incident report.
    pub report_delay_minutes: i64,
    /// Earlier, unrelated faults of the same type next to the fault path.
    pub distractors: usize,
    pub distractor_lead_minutes: Span<i64>,
    pub distractor_hops: Span<usize>,
    /// Range of incident minutes (at least a week plus an hour in).
    pub incident_minutes: Span<i64>,
    /// Smallest relative business change at the initial service for a
    /// fault to count as an incident.
    pub min_business_impact: f64,
    /// Services required between the initial service and the root along
    /// the fault path.
    pub min_intermediate_services: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            name: "suite".into(),
            seed: 0,
            incidents: 10,
            anomaly_types: AnomalyType::ALL.to_vec(),
            topology: TopologyParams::default(),
            baseline: BaselineParams::default(),
            business_metric: default_metric(),
            magnitudes: MagnitudeRanges::default(),
            attenuation: 0.8,
            lag_minutes: [0, 3],
            report_delay_minutes: 8,
            distractors: 0,
            distractor_lead_minutes: [30, 46],
            distractor_hops: [2, 4],
            incident_minutes: [10_300, 11_500],
            min_business_impact: 0.15,
            min_intermediate_services: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioFile {
    Scenario(ScenarioConfig),
    Suite(SuiteConfig),
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut file: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("scenario {}", path.display()),
            source: e,
        })?;
        if let ScenarioFile::Scenario(s) = &mut file {
            s.resolve_fixture(path.parent().unwrap_or(Path::new(".")))?;
        }
        Ok(file)
    }

    /// The built-in presets by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ten_service" => Ok(ScenarioFile::Scenario(super::ten_service::scenario(false)?)),
            "ten_service_uncorrelated" => Ok(ScenarioFile::Scenario(super::ten_service::scenario(true)?)),
            "noise_free" => Ok(ScenarioFile::Suite(SuiteConfig::noise_free())),
            "noisy" => Ok(ScenarioFile::Suite(SuiteConfig::noisy())),
            "sweep" => Ok(ScenarioFile::Suite(SuiteConfig::sweep())),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Loads a preset name or a path.
    pub fn from_arg(arg: &str) -> Result<Self> {
        let path = Path::new(arg);
        if path.exists() {
            Self::load(path)
        } else {
            Self::preset(arg)
        }
    }

    pub fn incidents(&self) -> Result<Vec<SimulatedIncident>> {
        match self {
            ScenarioFile::Scenario(s) => Ok(vec![s.build()?]),
            ScenarioFile::Suite(s) => (0..s.incidents).into_par_iter().map(|i| s.generate(i)).collect(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ScenarioFile::Scenario(s) => s.seed,
            ScenarioFile::Suite(s) => s.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ScenarioFile::Scenario(s) => s.seed = seed,
            ScenarioFile::Suite(s) => s.seed = seed,
        }
    }
}

/// One incident with its data and ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedIncident {
    pub name: String,
    pub simulation: Simulation,
    pub truth: GroundTruth,
    pub store: MetricStore,
}

impl ScenarioConfig {
    pub fn resolve_fixture(&mut self, base_dir: &Path) -> Result<()> {
        if let TopologySource::Fixture(p) = &self.topology {
            let t = Topology::load(&base_dir.join(p))?;
            self.topology = TopologySource::Inline(t);
        }
        Ok(())
    }

    pub fn build(&self) -> Result<SimulatedIncident> {
        let topology = match &self.topology {
            TopologySource::Generate(p) => generate_topology(p, self.seed)?,
            TopologySource::Inline(t) => {
                t.validate()?;
                t.clone()
            }
            TopologySource::Fixture(p) => {
                return Err(Error::Config(format!("unresolved topology fixture {}", p.display())))
            }
        };
        let baseline = Baseline::new(&topology, self.baseline.clone(), self.seed)?;
        let mut sim = Simulation::new(topology, baseline, self.business_metric.clone());
        for f in &self.faults {
            sim.inject(f.clone())?;
        }
        sim.overlays = self.overlays.clone();
        for o in &sim.overlays {
            if !sim.baseline.edges.contains_key(&o.edge) {
                return Err(Error::Simulation(format!("overlay edge {} not in topology", o.edge)));
            }
        }
        if !sim.topology.entry_services.contains(&self.incident.initial_service) {
            return Err(Error::Simulation(format!(
                "initial service {} is not an entry service",
                self.incident.initial_service
            )));
        }
        let t = self.incident.incident_minute;
        let ranges = match self.coverage {
            Coverage::Full { days } => vec![0..days as i64 * crate::graph::MINUTES_PER_DAY],
            Coverage::Incident => incident_coverage(t),
        };
        let store = sim.store_for(&ranges)?;
        let mut root_causes: Vec<RootCause> = sim
            .faults
            .iter()
            .filter(|f| f.spec.affects_business)
            .map(|f| RootCause {
                service: f.spec.root_service.clone(),
                anomaly_type: f.spec.anomaly_type,
            })
            .collect();
        root_causes.sort();
        root_causes.dedup();
        Ok(SimulatedIncident {
            name: self.name.clone(),
            truth: GroundTruth {
                incident_minute: t,
                initial_service: self.incident.initial_service.clone(),
                business_metric: self.business_metric.clone(),
                root_causes,
            },
            simulation: sim,
            store,
        })
    }
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

impl SuiteConfig {
    /// Flat, noise-free baselines.
    pub fn noise_free() -> Self {
        Self {
            name: "noise_free".into(),
            seed: 11,
            incidents: 50,
            baseline: BaselineParams::flat(),
            ..Self::default()
        }
    }

    pub fn noisy() -> Self {
        Self {
            name: "noisy".into(),
            seed: 23,
            incidents: 75,
            ..Self::default()
        }
    }

    /// Noisy incidents plus distractor faults next to the fault path.
    pub fn sweep() -> Self {
        Self {
            name: "sweep".into(),
            seed: 37,
            incidents: 30,
            distractors: 6,
            min_intermediate_services: 2,
            topology: TopologyParams {
                n_services: 120,
                ..TopologyParams::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anomaly_types.is_empty() {
            return Err(Error::Config("anomaly_types must not be empty".into()));
        }
        let [lo, hi] = self.incident_minutes;
        if lo < crate::graph::MINUTES_PER_WEEK + 130 || hi < lo {
            return Err(Error::Config(
                "incident_minutes must start at least a week and two hours in".into(),
            ));
        }
        if self.lag_minutes[0] < 0 || self.report_delay_minutes < 0 {
            return Err(Error::Config("lags and delays must be non-negative".into()));
        }
        Ok(())
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

    fn fault_spec(&self, edge: &EdgeKey, t: AnomalyType, magnitude: f64, lag: i64) -> FaultSpec {
        FaultSpec {
            root_service: match t {
                AnomalyType::Traffic => edge.caller.clone(),
                _ => edge.callee.clone(),
            },
            root_edge: edge.clone(),
            anomaly_type: t,
            onset_minute: 0,
            magnitude,
            attenuation: self.attenuation,
            lag_minutes: lag,
            max_hops: None,
            affects_business: true,
            business_dip: 0.3,
        }
    }

    /// Generates incident `index`: its own topology, one fault, and
    /// optional distractors.
    pub fn generate(&self, index: usize) -> Result<SimulatedIncident> {
        self.validate()?;
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.anomaly_types[index % self.anomaly_types.len()];
        let lag = if t == AnomalyType::Traffic {
            0
        } else {
            draw_i(&mut rng, self.lag_minutes)
        };
        let incident_minute = draw_i(&mut rng, self.incident_minutes);

        // Some topologies offer no usable fault of the requested type (every
        // candidate runs into a call cycle or misses the entry services);
        // those are redrawn.
        let mut chosen = None;
        for attempt in 0..50u64 {
            let topo_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let topology = generate_topology(&self.topology, topo_seed)?;
            let baseline = Baseline::new(&topology, self.baseline.clone(), topo_seed)?;
            let mut edges = topology.edges.clone();
            edges.shuffle(&mut rng);
            for edge in &edges {
                let magnitude = self.magnitude(t, &mut rng);
                let spec = self.fault_spec(edge, t, magnitude, lag);
                let Ok(probe) = FaultPlan::compile(spec.clone(), &topology, 0.0) else {
                    continue;
                };
                let (initial, &arrival) = probe
                    .reached_entries
                    .iter()
                    .min_by_key(|(name, a)| (**a, (*name).clone()))
                    .unwrap();
                if chain_services(&probe, initial).len() < 2 + self.min_intermediate_services {
                    continue;
                }
                let onset = incident_minute - self.report_delay_minutes - arrival;
                let spec = FaultSpec {
                    onset_minute: onset,
                    ..spec
                };
                let initial = initial.clone();
                let mut trial = Simulation::new(topology.clone(), baseline.clone(), self.business_metric.clone());
                trial.inject(spec.clone())?;
                if super::corpus::business_impact(&trial, &initial, incident_minute - 1) < self.min_business_impact {
                    continue;
                }
                chosen = Some((spec, initial, topology.clone(), baseline.clone()));
                break;
            }
            if chosen.is_some() {
                break;
            }
        }
        let Some((spec, initial, topology, baseline)) = chosen else {
            return Err(Error::Simulation(format!(
                "incident {index}: no usable {t} fault in 50 topologies"
            )));
        };

        let mut sim = Simulation::new(topology, baseline, self.business_metric.clone());
        let main = sim.inject(spec.clone())?.clone();
        for _ in 0..self.distractors {
            if let Some(d) = self.distractor(&sim, &main, &initial, incident_minute, &mut rng) {
                sim.inject(d)?;
            }
        }
        let store = sim.store_for(&incident_coverage(incident_minute))?;
        Ok(SimulatedIncident {
            name: format!("{}-{index:03}", self.name),
            truth: GroundTruth {
                incident_minute,
                initial_service: initial,
                business_metric: self.business_metric.clone(),
                root_causes: vec![RootCause {
                    service: spec.root_service,
                    anomaly_type: t,
                }],
            },
            simulation: sim,
            store,
        })
    }

    /// A fault of the same type that starts well before the main one and
    /// reaches an intermediate service of the main fault path through an
    /// off-path call, without reaching the initial service or any
    /// main-path call.
    fn distractor(
        &self,
        sim: &Simulation,
        main: &FaultPlan,
        initial: &str,
        incident_minute: i64,
        rng: &mut ChaCha8Rng,
    ) -> Option<FaultSpec> {
        let t = main.spec.anomaly_type;
        let topo = &sim.topology;
        let callees = topo.callees();
        let callers = topo.callers();
        let on_path: BTreeSet<&str> = main
            .affected
            .keys()
            .flat_map(|e| [e.caller.as_str(), e.callee.as_str()])
            .filter(|s| *s != initial)
            .collect();
        let anchors: Vec<&str> = chain_services(main, initial)
            .into_iter()
            .filter(|s| *s != initial && *s != main.spec.root_service)
            .collect();
        let taken: BTreeSet<&EdgeKey> = sim.faults.iter().flat_map(|f| f.affected.keys()).collect();
        for _ in 0..100 {
            let anchor = *anchors.choose(rng)?;
            let hops =
                rng.random_range(self.distractor_hops[0]..self.distractor_hops[1].max(self.distractor_hops[0] + 1));
            // Walk away from the anchor in the direction the chain searches.
            let mut path: Vec<EdgeKey> = Vec::new();
            let mut visited: BTreeSet<&str> = BTreeSet::from([anchor, initial]);
            let mut cur = anchor;
            for _ in 0..hops {
                let options: Vec<&EdgeKey> = match t {
                    AnomalyType::Traffic => callers.get(cur),
                    _ => callees.get(cur),
                }
                .into_iter()
                .flatten()
                .copied()
                .filter(|e| {
                    let other = if t == AnomalyType::Traffic {
                        &e.caller
                    } else {
                        &e.callee
                    };
                    !visited.contains(other.as_str()) && !on_path.contains(other.as_str()) && !taken.contains(e)
                })
                .collect();
                let Some(&e) = options.choose(rng) else { break };
                let other = if t == AnomalyType::Traffic {
                    e.caller.as_str()
                } else {
                    e.callee.as_str()
                };
                visited.insert(other);
                path.push(e.clone());
                cur = other;
            }
            if path.len() < hops.max(1) {
                continue;
            }
            let root_edge = path.last().unwrap().clone();
            let lead = draw_i(rng, self.distractor_lead_minutes);
            let spec = FaultSpec {
                onset_minute: incident_minute - self.report_delay_minutes - lead,
                max_hops: Some(path.len() - 1),
                affects_business: false,
                lag_minutes: 0,
                ..self.fault_spec(&root_edge, t, self.magnitude(t, rng), 0)
            };
            let Ok(plan) = FaultPlan::compile(spec.clone(), topo, 0.0) else {
                continue;
            };
            let clean = plan
                .affected
                .keys()
                .all(|e| !taken.contains(e) && e.caller != initial && e.callee != initial);
            if clean {
                return Some(spec);
            }
        }
        None
    }
}

/// Services reachable from `initial` by walking affected calls against the
/// fault's propagation direction, i.e. the services an analysis starting at
/// `initial` can follow toward the root.
pub fn chain_services<'a>(plan: &'a FaultPlan, initial: &'a str) -> BTreeSet<&'a str> {
    let traffic = plan.spec.anomaly_type == AnomalyType::Traffic;
    let mut seen = BTreeSet::from([initial]);
    let mut stack = vec![initial];
    while let Some(s) = stack.pop() {
        for e in plan.affected.keys() {
            let (from, to) = if traffic {
                (&e.callee, &e.caller)
            } else {
                (&e.caller, &e.callee)
            };
            if from == s && seen.insert(to.as_str()) {
                stack.push(to.as_str());
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_incidents_are_deterministic_and_labelled() {
        let cfg = SuiteConfig {
            incidents: 6,
            ..SuiteConfig::noisy()
        };
        for i in 0..6 {
            let a = cfg.generate(i).unwrap();
            let b = cfg.generate(i).unwrap();
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.store.records(), b.store.records());
            assert_eq!(a.truth.root_causes.len(), 1);
            assert_eq!(a.truth.root_causes[0].anomaly_type, cfg.anomaly_types[i % 3]);
            let main = &a.simulation.faults[0];
            assert_eq!(
                main.reached_entries[&a.truth.initial_service] + 8,
                a.truth.incident_minute
            );
        }
    }

    #[test]
    fn distractors_stay_off_the_fault_path() {
        let cfg = SuiteConfig {
            incidents: 6,
            ..SuiteConfig::sweep()
        };
        let mut total = 0;
        for i in 0..6 {
            let inc = cfg.generate(i).unwrap();
            let main = &inc.simulation.faults[0];
            for d in &inc.simulation.faults[1..] {
                total += 1;
                assert!(!d.spec.affects_business);
                for e in d.affected.keys() {
                    assert!(!main.affected.contains_key(e));
                    assert!(e.caller != inc.truth.initial_service && e.callee != inc.truth.initial_service);
                }
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn presets_resolve() {
        for name in [
            "noise_free",
            "noisy",
            "sweep",
            "ten_service",
            "ten_service_uncorrelated",
        ] {
            ScenarioFile::preset(name).unwrap();
        }
        assert!(ScenarioFile::preset("nope").is_err());
    }

    #[test]
    fn suite_config_round_trips_through_json() {
        let f = ScenarioFile::Suite(SuiteConfig::sweep());
        let text = serde_json::to_string_pretty(&f).unwrap();
        let back: ScenarioFile = serde_json::from_str(&text).unwrap();
        assert_eq!(f, back);
    }
}
