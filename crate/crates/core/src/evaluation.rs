//! Accuracy, detector quality, pruning sweeps and scaling runs.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{
    performance_rule, reliability_rule, traffic_anomalous, DetectionConfig, EcFeatureVector, RtFeatureVector,
    EC_FEATURES, RT_FEATURES,
};
use crate::engine::{localize, EngineConfig, Incident};
use crate::error::{Error, Result};
use crate::models::{DetectorModels, ForestClassifier, ForestParams, OneClassParams, OneClassSeparator};
use crate::ranking::RankedCandidate;
use crate::simulator::corpus::{Corpus, CorpusConfig, LabelledCase};
use crate::simulator::{GroundTruth, SimulatedIncident, SuiteConfig};

/// Outcome of localizing one incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueResult {
    pub name: String,
    pub ground_truth: GroundTruth,
    pub ranked: Vec<RankedCandidate>,
    pub wall_time_seconds: f64,
    pub edges_examined: usize,
    pub detector_calls: usize,
    /// Set when localization failed; the issue then counts as a miss.
    pub error: Option<String>,
}

impl IssueResult {
    /// 1-based rank of the first candidate matching a true root cause in
    /// both service and anomaly type.
    pub fn first_hit(&self) -> Option<usize> {
        self.ranked
            .iter()
            .find(|c| {
                self.ground_truth
                    .root_causes
                    .iter()
                    .any(|t| t.service == c.candidate.service && t.anomaly_type == c.candidate.anomaly_type)
            })
            .map(|c| c.rank)
    }
}

fn first_hits(results: &[IssueResult]) -> Result<Vec<Option<usize>>> {
    if results.is_empty() {
        return Err(Error::invalid("no results to score"));
    }
    Ok(results.iter().map(IssueResult::first_hit).collect())
}

/// Share of issues with a true root cause in the top `k`.
pub fn hr_at_k(results: &[IssueResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let hits = first_hits(results)?;
    Ok(hits.iter().filter(|h| h.is_some_and(|r| r <= k)).count() as f64 / hits.len() as f64)
}

/// Mean reciprocal rank of the first true root cause, 0 when absent.
pub fn mrr(results: &[IssueResult]) -> Result<f64> {
    let hits = first_hits(results)?;
    Ok(hits.iter().map(|h| h.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub issues: usize,
    pub failures: usize,
    pub hr_at_1: f64,
    pub hr_at_3: f64,
    pub hr_at_5: f64,
    pub mrr: f64,
    pub mean_wall_time_seconds: f64,
    pub mean_edges_examined: f64,
    pub total_edges_examined: usize,
    pub mean_detector_calls: f64,
}

impl BenchmarkSummary {
    pub fn from_results(results: &[IssueResult]) -> Result<Self> {
        let n = results.len() as f64;
        let total_edges: usize = results.iter().map(|r| r.edges_examined).sum();
        Ok(Self {
            issues: results.len(),
            failures: results.iter().filter(|r| r.error.is_some()).count(),
            hr_at_1: hr_at_k(results, 1)?,
            hr_at_3: hr_at_k(results, 3)?,
            hr_at_5: hr_at_k(results, 5)?,
            mrr: mrr(results)?,
            mean_wall_time_seconds: results.iter().map(|r| r.wall_time_seconds).sum::<f64>() / n,
            mean_edges_examined: total_edges as f64 / n,
            total_edges_examined: total_edges,
            mean_detector_calls: results.iter().map(|r| r.detector_calls).sum::<usize>() as f64 / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub summary: BenchmarkSummary,
    pub results: Vec<IssueResult>,
}

pub fn evaluate_incident(
    incident: &SimulatedIncident,
    config: &EngineConfig,
    models: Option<&DetectorModels>,
) -> IssueResult {
    let truth = &incident.truth;
    let query = Incident {
        initial_service: truth.initial_service.clone(),
        incident_minute: truth.incident_minute,
        business_metric: truth.business_metric.clone(),
    };
    match localize(&incident.store, &query, config, models) {
        Ok(loc) => IssueResult {
            name: incident.name.clone(),
            ground_truth: truth.clone(),
            ranked: loc.ranked,
            wall_time_seconds: loc.wall_time_seconds.max(f64::MIN_POSITIVE),
            edges_examined: loc.analysis.edges_examined,
            detector_calls: loc.analysis.detector_calls,
            error: None,
        },
        Err(e) => IssueResult {
            name: incident.name.clone(),
            ground_truth: truth.clone(),
            ranked: Vec::new(),
            wall_time_seconds: f64::MIN_POSITIVE,
            edges_examined: 0,
            detector_calls: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Localizes every incident (in parallel) and aggregates.
pub fn run_benchmark(
    incidents: &[SimulatedIncident],
    config: &EngineConfig,
    models: Option<&DetectorModels>,
) -> Result<BenchmarkReport> {
    config.validate()?;
    let results: Vec<IssueResult> = incidents
        .par_iter()
        .map(|inc| evaluate_incident(inc, config, models))
        .collect();
    for r in results.iter().filter(|r| r.error.is_some()) {
        log::warn!("{}: {}", r.name, r.error.as_deref().unwrap_or_default());
    }
    Ok(BenchmarkReport {
        summary: BenchmarkSummary::from_results(&results)?,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub hr_at_3: f64,
    pub mrr: f64,
    pub mean_wall_time_seconds: f64,
    pub total_edges_examined: usize,
    pub mean_edges_examined: f64,
    pub mean_detector_calls: f64,
}

/// One benchmark per pruning threshold.
pub fn sweep_pruning_threshold(
    incidents: &[SimulatedIncident],
    thresholds: &[f64],
    config: &EngineConfig,
    models: Option<&DetectorModels>,
) -> Result<Vec<SweepPoint>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    thresholds
        .iter()
        .map(|&t| {
            let cfg = EngineConfig {
                pruning_threshold: t,
                ..config.clone()
            };
            let s = run_benchmark(incidents, &cfg, models)?.summary;
            Ok(SweepPoint {
                threshold: t,
                hr_at_3: s.hr_at_3,
                mrr: s.mrr,
                mean_wall_time_seconds: s.mean_wall_time_seconds,
                total_edges_examined: s.total_edges_examined,
                mean_edges_examined: s.mean_edges_examined,
                mean_detector_calls: s.mean_detector_calls,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out =
        String::from("threshold,hr_at_3,mrr,mean_wall_time_seconds,total_edges_examined,mean_edges_examined\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.threshold, p.hr_at_3, p.mrr, p.mean_wall_time_seconds, p.total_edges_examined, p.mean_edges_examined
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub services: usize,
    pub edges: usize,
    pub incidents: usize,
    pub mean_wall_time_seconds: f64,
    pub median_wall_time_seconds: f64,
    pub hr_at_3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(x, y)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("linear fit needs two or more paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (intercept + slope * a)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Fit of mean wall time against service count.
    pub fit: LinearFit,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Simulates `faults_per_size` incidents per system size from `suite` and
/// times their localizations one at a time.
pub fn scaling_run(
    sizes: &[usize],
    faults_per_size: usize,
    suite: &SuiteConfig,
    config: &EngineConfig,
    models: Option<&DetectorModels>,
) -> Result<ScalingReport> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sizes must be strictly ascending"));
    }
    if faults_per_size == 0 {
        return Err(Error::invalid("faults_per_size must be at least 1"));
    }
    config.validate()?;
    let mut points = Vec::new();
    for &n in sizes {
        let mut s = suite.clone();
        s.topology.n_services = n;
        s.incidents = faults_per_size;
        s.name = format!("{}-{n}", suite.name);
        let incidents: Vec<SimulatedIncident> = (0..faults_per_size)
            .into_par_iter()
            .map(|i| s.generate(i))
            .collect::<Result<_>>()?;
        let results: Vec<IssueResult> = incidents
            .iter()
            .map(|inc| evaluate_incident(inc, config, models))
            .collect();
        let mut times: Vec<f64> = results.iter().map(|r| r.wall_time_seconds).collect();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        points.push(ScalingPoint {
            services: n,
            edges: incidents[0].simulation.topology.edges.len(),
            incidents: faults_per_size,
            mean_wall_time_seconds: mean,
            median_wall_time_seconds: median(&mut times),
            hr_at_3: hr_at_k(&results, 3)?,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.services as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_wall_time_seconds).collect();
    let fit = linear_fit(&x, &y)?;
    Ok(ScalingReport { points, fit })
}

pub fn scaling_csv(report: &ScalingReport) -> String {
    let mut out = String::from("services,edges,incidents,mean_wall_time_seconds,median_wall_time_seconds,hr_at_3\n");
    for p in &report.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.services, p.edges, p.incidents, p.mean_wall_time_seconds, p.median_wall_time_seconds, p.hr_at_3
        );
    }
    out
}

pub fn benchmark_table(report: &BenchmarkReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>5} {:>6}", "issue", "rank", "edges");
    for r in &report.results {
        let rank = match (&r.error, r.first_hit()) {
            (Some(_), _) => "err".to_string(),
            (None, Some(k)) => k.to_string(),
            (None, None) => "-".to_string(),
        };
        let _ = writeln!(out, "{:<24} {:>5} {:>6}", r.name, rank, r.edges_examined);
    }
    let _ = writeln!(
        out,
        "\nissues {}  failures {}  HR@1 {:.3}  HR@3 {:.3}  HR@5 {:.3}  MRR {:.3}  mean edges {:.1}",
        s.issues, s.failures, s.hr_at_1, s.hr_at_3, s.hr_at_5, s.mrr, s.mean_edges_examined
    );
    out
}

/// Confusion counts and the derived scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorQuality {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub fpr: f64,
}

impl DetectorQuality {
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let recall = ratio(tp, tp + fneg);
        let precision = ratio(tp, tp + fp);
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fneg,
            recall,
            precision,
            f1,
            fpr: ratio(fp, fp + tn),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub performance: DetectorQuality,
    pub reliability: DetectorQuality,
    pub traffic: DetectorQuality,
}

impl DetectorReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>9} {:>6} {:>6}\n",
            "detector", "Recall", "Precision", "F1", "FPR"
        );
        for (name, q) in [
            ("performance", &self.performance),
            ("reliability", &self.reliability),
            ("traffic", &self.traffic),
        ] {
            let _ = writeln!(
                out,
                "{:<12} {:>8.3} {:>9.3} {:>6.3} {:>6.3}",
                name, q.recall, q.precision, q.f1, q.fpr
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub one_class: OneClassParams,
    pub forest: ForestParams,
}

impl Default for TrainParams {
    /// A wide kernel and a 1% training outlier budget keep the RT false
    /// positive rate near 1% on held-out normal cases.
    fn default() -> Self {
        Self {
            one_class: OneClassParams {
                nu: 0.01,
                gamma: Some(0.01),
                ..OneClassParams::default()
            },
            forest: ForestParams::default(),
        }
    }
}

fn rows(cases: &[LabelledCase]) -> (Vec<Vec<f64>>, Vec<bool>) {
    (
        cases.iter().map(|c| c.features.clone()).collect(),
        cases.iter().map(|c| c.anomalous).collect(),
    )
}

/// Fits the RT model on the normal training cases and the EC model on all
/// EC training cases.
pub fn train_models(corpus: &Corpus, params: &TrainParams) -> Result<DetectorModels> {
    let normal: Vec<Vec<f64>> = corpus
        .rt_train
        .iter()
        .filter(|c| !c.anomalous)
        .map(|c| c.features.clone())
        .collect();
    let rt = OneClassSeparator::train(&normal, &params.one_class)?;
    let (x, y) = rows(&corpus.ec_train);
    let ec = ForestClassifier::train(&x, &y, &params.forest)?;
    Ok(DetectorModels { rt, ec })
}

/// Corpus generation plus training, as one reproducible config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus: CorpusConfig,
    pub training: TrainParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub corpus: Corpus,
    pub models: DetectorModels,
    pub report: DetectorReport,
}

impl TrainConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("train config {}", path.display()),
            source: e,
        })
    }

    /// Generates the corpus with `engine`'s detection settings, trains both
    /// models and scores every detector on the held-out cases.
    pub fn run(&self, engine: &EngineConfig) -> Result<TrainOutcome> {
        engine.validate()?;
        let detection = engine.detection();
        let corpus = self.corpus.generate(&detection, engine.metric_window_minutes)?;
        let models = train_models(&corpus, &self.training)?;
        let report = evaluate_detectors(&corpus, &models, &detection)?;
        Ok(TrainOutcome { corpus, models, report })
    }
}

fn rt_vector(c: &LabelledCase) -> Result<RtFeatureVector> {
    let values: [f64; RT_FEATURES] = c
        .features
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid(format!("{}: expected {RT_FEATURES} RT features", c.id)))?;
    Ok(RtFeatureVector {
        values,
        degraded: false,
    })
}

fn ec_vector(c: &LabelledCase) -> Result<EcFeatureVector> {
    let values: [f64; EC_FEATURES] = c
        .features
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid(format!("{}: expected {EC_FEATURES} EC features", c.id)))?;
    Ok(EcFeatureVector {
        values,
        degraded: false,
    })
}

/// Held-out quality of the three detectors, using the same decision rules
/// as localization.
pub fn evaluate_detectors(
    corpus: &Corpus,
    models: &DetectorModels,
    detection: &DetectionConfig,
) -> Result<DetectorReport> {
    let rt = corpus
        .rt_heldout
        .iter()
        .map(|c| Ok((performance_rule(&rt_vector(c)?, &models.rt)?, c.anomalous)))
        .collect::<Result<Vec<_>>>()?;
    let ec = corpus
        .ec_heldout
        .iter()
        .map(|c| Ok((reliability_rule(&ec_vector(c)?, &models.ec)?, c.anomalous)))
        .collect::<Result<Vec<_>>>()?;
    let qps = corpus
        .traffic_heldout
        .iter()
        .map(|c| {
            let p = traffic_anomalous(
                &c.qps,
                &c.business,
                detection.detection_window_minutes,
                detection.traffic_correlation_threshold,
            )?;
            Ok((p, c.anomalous))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectorReport {
        performance: DetectorQuality::from_predictions(rt),
        reliability: DetectorQuality::from_predictions(ec),
        traffic: DetectorQuality::from_predictions(qps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::AnomalyType;
    use crate::propagation::CandidateRootCause;
    use crate::simulator::RootCause;
    use crate::store::EdgeKey;

    fn result(truth: (&str, AnomalyType), ranked: &[(&str, AnomalyType)]) -> IssueResult {
        IssueResult {
            name: "x".into(),
            ground_truth: GroundTruth {
                incident_minute: 0,
                initial_service: "e".into(),
                business_metric: "m".into(),
                root_causes: vec![RootCause {
                    service: truth.0.into(),
                    anomaly_type: truth.1,
                }],
            },
            ranked: ranked
                .iter()
                .enumerate()
                .map(|(i, (s, t))| RankedCandidate {
                    candidate: CandidateRootCause {
                        service: s.to_string(),
                        anomaly_type: *t,
                        terminal_edge: EdgeKey::new("e", *s).unwrap(),
                    },
                    score: 1.0,
                    rank: i + 1,
                })
                .collect(),
            wall_time_seconds: 0.1,
            edges_examined: 1,
            detector_calls: 1,
            error: None,
        }
    }

    use AnomalyType::*;

    #[test]
    fn mrr_with_missing() {
        let rs = vec![
            result(("a", Traffic), &[("a", Traffic)]),
            result(("a", Traffic), &[("b", Traffic), ("a", Traffic)]),
            result(("a", Traffic), &[("b", Traffic)]),
        ];
        assert!((mrr(&rs).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn type_must_match() {
        let r = result(("a", Traffic), &[("a", Performance)]);
        assert_eq!(r.first_hit(), None);
    }

    #[test]
    fn hr_counts() {
        let rs = vec![
            result(("a", Traffic), &[("a", Traffic)]),
            result(("a", Traffic), &[("b", Traffic), ("c", Traffic), ("a", Traffic)]),
            result(("a", Traffic), &[("b", Traffic)]),
            result(("a", Traffic), &[]),
        ];
        assert_eq!(hr_at_k(&rs, 3).unwrap(), 0.5);
        assert_eq!(hr_at_k(&rs, 1).unwrap(), 0.25);
        assert!(hr_at_k(&rs, 0).is_err());
        assert!(hr_at_k(&[], 1).is_err());
        assert!(mrr(&[]).is_err());
    }

    #[test]
    fn quality_scores() {
        let q = DetectorQuality::from_predictions([(true, true), (true, false), (false, false), (false, true)]);
        assert_eq!(q.recall, 0.5);
        assert_eq!(q.precision, 0.5);
        assert_eq!(q.fpr, 0.5);
        assert_eq!(q.f1, 0.5);
    }

    #[test]
    fn perfect_line_fit() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hr_monotone_and_bounds_mrr(ranks in prop::collection::vec(prop::option::of(1usize..8), 1..30)) {
                let names = ["a", "b", "c", "d", "x", "f", "g", "h"];
                let rs: Vec<IssueResult> = ranks.iter().map(|r| {
                    let list: Vec<(&str, AnomalyType)> = match r {
                        Some(k) => (0..*k).map(|i| if i + 1 == *k { ("t", Traffic) } else { (names[i], Traffic) }).collect(),
                        None => vec![("a", Traffic)],
                    };
                    result(("t", Traffic), &list)
                }).collect();
                let mut prev = 0.0;
                for k in 1..10 {
                    let h = hr_at_k(&rs, k).unwrap();
                    prop_assert!(h >= prev);
                    prev = h;
                }
                prop_assert!(mrr(&rs).unwrap() <= hr_at_k(&rs, 8).unwrap() + 1e-12);
            }
        }
    }
}
