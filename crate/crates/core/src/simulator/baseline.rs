//! Fault-free metric streams.
//!
//! Each edge gets a random profile (base RT and QPS, phases). Minute values
//! come from a ChaCha stream keyed by the edge and positioned by minute, so
//! any subset of minutes can be generated independently and matches a full
//! run exactly.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::topology::Topology;
use crate::error::{Error, Result};
use crate::graph::{MINUTES_PER_DAY, MINUTES_PER_WEEK};
use crate::store::EdgeKey;

/// RNG words reserved per minute.
const WORDS_PER_MINUTE: u128 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub rt_base_ms: [f64; 2],
    pub qps_base: [f64; 2],
    /// Relative amplitude of the daily cycle.
    pub diurnal_amplitude: f64,
    /// Relative amplitude of the weekly cycle.
    pub weekly_amplitude: f64,
    /// Relative standard deviation of per-minute RT noise.
    pub rt_noise: f64,
    pub qps_noise: f64,
    /// Per-minute probability of an error burst.
    pub ec_burst_probability: f64,
    pub ec_burst_mean: f64,
    pub business_noise: f64,
    /// Business units per inbound query, drawn per entry service.
    pub business_per_qps: [f64; 2],
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            rt_base_ms: [10.0, 120.0],
            qps_base: [5.0, 200.0],
            diurnal_amplitude: 0.3,
            weekly_amplitude: 0.1,
            rt_noise: 0.05,
            qps_noise: 0.05,
            ec_burst_probability: 0.02,
            ec_burst_mean: 3.0,
            business_noise: 0.02,
            business_per_qps: [0.5, 2.0],
        }
    }
}

impl BaselineParams {
    /// No noise, no cycles, no error bursts: every series is flat.
    pub fn flat() -> Self {
        Self {
            diurnal_amplitude: 0.0,
            weekly_amplitude: 0.0,
            rt_noise: 0.0,
            qps_noise: 0.0,
            ec_burst_probability: 0.0,
            business_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rt_base_ms", self.rt_base_ms),
            ("qps_base", self.qps_base),
            ("business_per_qps", self.business_per_qps),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Simulation(format!("{name} must be a positive range")));
            }
        }
        let rel = [
            self.diurnal_amplitude,
            self.weekly_amplitude,
            self.rt_noise,
            self.qps_noise,
            self.business_noise,
        ];
        if rel.iter().any(|v| !(0.0..0.9).contains(v)) {
            return Err(Error::Simulation(
                "relative amplitudes and noise must lie in [0, 0.9)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ec_burst_probability) || !(self.ec_burst_mean > 0.0) {
            return Err(Error::Simulation("invalid error-burst parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProfile {
    pub base_rt_ms: f64,
    pub base_qps: f64,
    pub diurnal_phase: f64,
    pub weekly_phase: f64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryProfile {
    pub per_qps: f64,
    pub stream: u64,
}

/// Baseline values of one edge at one minute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePoint {
    pub rt_ms: f64,
    pub error_count: f64,
    pub qps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub params: BaselineParams,
    pub seed: u64,
    pub edges: BTreeMap<EdgeKey, EdgeProfile>,
    pub entries: BTreeMap<String, EntryProfile>,
    /// Inbound edges per entry service.
    pub inbound: BTreeMap<String, Vec<EdgeKey>>,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl Baseline {
    pub fn new(topology: &Topology, params: BaselineParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted = topology.edges.clone();
        sorted.sort();
        let mut edges = BTreeMap::new();
        for e in sorted {
            let profile = EdgeProfile {
                base_rt_ms: uniform(&mut rng, params.rt_base_ms),
                base_qps: uniform(&mut rng, params.qps_base),
                diurnal_phase: rng.random_range(0.0..TAU),
                weekly_phase: rng.random_range(0.0..TAU),
                stream: rng.random(),
            };
            edges.insert(e, profile);
        }
        let mut entries = BTreeMap::new();
        let mut inbound = BTreeMap::new();
        let mut entry_names = topology.entry_services.clone();
        entry_names.sort();
        for s in entry_names {
            entries.insert(
                s.clone(),
                EntryProfile {
                    per_qps: uniform(&mut rng, params.business_per_qps),
                    stream: rng.random(),
                },
            );
            let ins: Vec<EdgeKey> = edges.keys().filter(|e| e.callee == s).cloned().collect();
            inbound.insert(s, ins);
        }
        Ok(Self {
            params,
            seed,
            edges,
            entries,
            inbound,
        })
    }

    fn minute_rng(&self, stream: u64, minute: i64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream);
        rng.set_word_pos(minute.rem_euclid(1 << 40) as u128 * WORDS_PER_MINUTE);
        rng
    }

    fn cycles(&self, p: &EdgeProfile, minute: i64) -> f64 {
        let day = TAU * (minute.rem_euclid(MINUTES_PER_DAY) as f64) / MINUTES_PER_DAY as f64;
        let week = TAU * (minute.rem_euclid(MINUTES_PER_WEEK) as f64) / MINUTES_PER_WEEK as f64;
        (1.0 + self.params.diurnal_amplitude * (day + p.diurnal_phase).sin())
            * (1.0 + self.params.weekly_amplitude * (week + p.weekly_phase).sin())
    }

    pub fn edge_point(&self, edge: &EdgeKey, minute: i64) -> EdgePoint {
        let p = &self.edges[edge];
        let prm = &self.params;
        let mut rng = self.minute_rng(p.stream, minute);
        let z_rt: f64 = StandardNormal.sample(&mut rng);
        let z_qps: f64 = StandardNormal.sample(&mut rng);
        let burst: f64 = rng.random();
        let load = self.cycles(p, minute);
        let qps = (p.base_qps * load * (1.0 + prm.qps_noise * z_qps)).max(p.base_qps * 0.05);
        let rt = (p.base_rt_ms * (1.0 + 0.5 * (load - 1.0)) * (1.0 + prm.rt_noise * z_rt)).max(0.1);
        let error_count = if burst < prm.ec_burst_probability {
            let size: f64 = Exp::new(1.0 / prm.ec_burst_mean).unwrap().sample(&mut rng);
            1.0 + size.floor()
        } else {
            0.0
        };
        EdgePoint {
            rt_ms: rt,
            error_count,
            qps,
        }
    }

    /// Multiplicative business noise for an entry service at a minute.
    pub fn business_noise(&self, entry: &str, minute: i64) -> f64 {
        let p = &self.entries[entry];
        let mut rng = self.minute_rng(p.stream, minute);
        let z: f64 = StandardNormal.sample(&mut rng);
        1.0 + self.params.business_noise * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::topology::{generate_topology, TopologyParams};

    fn setup(params: BaselineParams) -> (Topology, Baseline) {
        let t = generate_topology(
            &TopologyParams {
                n_services: 12,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let b = Baseline::new(&t, params, 9).unwrap();
        (t, b)
    }

    #[test]
    fn minute_values_independent_of_generation_order() {
        let (t, b) = setup(BaselineParams::default());
        let e = &t.edges[0];
        let forward: Vec<EdgePoint> = (0..50).map(|m| b.edge_point(e, m)).collect();
        let backward: Vec<EdgePoint> = (0..50).rev().map(|m| b.edge_point(e, m)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
    }

    #[test]
    fn ec_mostly_zero_over_a_week() {
        let (t, b) = setup(BaselineParams::default());
        let e = &t.edges[0];
        let zeros = (0..MINUTES_PER_WEEK)
            .filter(|&m| b.edge_point(e, m).error_count == 0.0)
            .count();
        assert!(zeros as f64 / MINUTES_PER_WEEK as f64 >= 0.9);
    }

    #[test]
    fn rt_repeats_day_to_day() {
        let params = BaselineParams::default();
        let (t, b) = setup(params.clone());
        let e = &t.edges[0];
        let base = b.edges[e].base_rt_ms;
        let diff: f64 = (0..1440)
            .map(|m| (b.edge_point(e, 10_000 + m).rt_ms - b.edge_point(e, 10_000 + m - 1440).rt_ms).abs())
            .sum::<f64>()
            / 1440.0;
        assert!(diff < 3.0 * params.rt_noise * base * 1.5, "{diff}");
    }

    #[test]
    fn hourly_qps_roughly_symmetric() {
        let (t, b) = setup(BaselineParams::default());
        let e = &t.edges[0];
        // QPS around one hour, detrended by the deterministic cycle.
        let p = &b.edges[e];
        let resid: Vec<f64> = (0..600)
            .map(|m| b.edge_point(e, m).qps / (p.base_qps * b.cycles(p, m)) - 1.0)
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();
        let skew = resid.iter().map(|r| ((r - mean) / sd).powi(3)).sum::<f64>() / resid.len() as f64;
        assert!(skew.abs() < 0.5, "{skew}");
    }

    #[test]
    fn flat_params_give_constant_series() {
        let (t, b) = setup(BaselineParams::flat());
        let e = &t.edges[0];
        let first = b.edge_point(e, 0);
        assert!((0..3000).all(|m| b.edge_point(e, m) == first));
        assert_eq!(first.error_count, 0.0);
    }
}
