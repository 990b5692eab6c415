//! Layered service topologies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EdgeKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyParams {
    pub n_services: usize,
    /// Mean number of callees per non-leaf service.
    pub avg_out_degree: f64,
    /// Share of extra edges that skip one or more layers.
    pub cross_layer_fraction: f64,
    /// Share of extra edges pointing back to an earlier layer.
    pub back_edge_fraction: f64,
    /// Share of eligible services that carry a business metric.
    pub entry_fraction: f64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            n_services: 40,
            avg_out_degree: 2.0,
            cross_layer_fraction: 0.15,
            back_edge_fraction: 0.05,
            entry_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub services: Vec<String>,
    pub edges: Vec<EdgeKey>,
    pub entry_services: Vec<String>,
}

impl Topology {
    pub fn new(services: Vec<String>, edges: Vec<EdgeKey>, entry_services: Vec<String>) -> Result<Self> {
        let t = Self {
            services,
            edges,
            entry_services,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let names: BTreeSet<&String> = self.services.iter().collect();
        if names.len() != self.services.len() {
            return Err(Error::Simulation("duplicate service names".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.caller == e.callee {
                return Err(Error::Simulation(format!("self-call on {}", e.caller)));
            }
            if !names.contains(&e.caller) || !names.contains(&e.callee) {
                return Err(Error::Simulation(format!("edge {e} references an unknown service")));
            }
            if !seen.insert(e) {
                return Err(Error::Simulation(format!("duplicate edge {e}")));
            }
        }
        for s in &self.entry_services {
            if !names.contains(s) {
                return Err(Error::Simulation(format!("entry service {s} is unknown")));
            }
        }
        if !self.is_connected() {
            return Err(Error::Simulation("topology is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        if self.services.is_empty() {
            return true;
        }
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(&e.caller).or_default().push(&e.callee);
            adj.entry(&e.callee).or_default().push(&e.caller);
        }
        let mut seen = BTreeSet::from([self.services[0].as_str()]);
        let mut stack = vec![self.services[0].as_str()];
        while let Some(s) = stack.pop() {
            for &n in adj.get(s).into_iter().flatten() {
                if seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == self.services.len()
    }

    pub fn callers(&self) -> BTreeMap<&str, Vec<&EdgeKey>> {
        let mut m: BTreeMap<&str, Vec<&EdgeKey>> = BTreeMap::new();
        for e in &self.edges {
            m.entry(e.callee.as_str()).or_default().push(e);
        }
        m
    }

    pub fn callees(&self) -> BTreeMap<&str, Vec<&EdgeKey>> {
        let mut m: BTreeMap<&str, Vec<&EdgeKey>> = BTreeMap::new();
        for e in &self.edges {
            m.entry(e.caller.as_str()).or_default().push(e);
        }
        m
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("topology {}", path.display()),
            source: e,
        })?;
        t.validate()?;
        Ok(t)
    }
}

fn layer_count(n: usize) -> usize {
    n.min(2 + ((n as f64).log2() / 2.0).floor() as usize)
}

/// Layer 0 holds gateways, the last layer leaf services. Every service
/// below layer 0 gets a caller from the layer above, and every gateway calls
/// the first service of layer 1, so the result is connected. Extra edges
/// bring the mean out-degree of non-leaf services to the target.
pub fn generate_topology(params: &TopologyParams, seed: u64) -> Result<Topology> {
    let n = params.n_services;
    if n < 2 {
        return Err(Error::Simulation("a topology needs at least 2 services".into()));
    }
    if !(params.avg_out_degree >= 1.0) || params.avg_out_degree > (n - 1) as f64 {
        return Err(Error::Simulation(format!(
            "avg_out_degree {} infeasible for {n} services",
            params.avg_out_degree
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(4);
    let services: Vec<String> = (0..n).map(|i| format!("svc{i:0width$}")).collect();

    let layers = layer_count(n);
    let first = ((n as f64 / (2 * layers) as f64).round() as usize).clamp(1, n - (layers - 1));
    let rest = n - first;
    let mut layer_of = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = vec![(0..first).collect()];
    let per = rest / (layers - 1);
    let extra = rest % (layers - 1);
    let mut next = first;
    for k in 1..layers {
        let size = per + usize::from(k > layers - 1 - extra);
        members.push((next..next + size).collect());
        for i in next..next + size {
            layer_of[i] = k;
        }
        next += size;
    }

    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &g in &members[0] {
        edges.insert((g, members[1][0]));
    }
    for k in 1..layers {
        for &s in &members[k] {
            let has_caller = edges.iter().any(|&(_, c)| c == s);
            if !has_caller {
                let caller = *members[k - 1].choose(&mut rng).unwrap();
                edges.insert((caller, s));
            }
        }
    }

    let non_leaf: Vec<usize> = (0..n).filter(|&i| layer_of[i] + 1 < layers).collect();
    let target = (params.avg_out_degree * non_leaf.len() as f64).round() as usize;
    let mut attempts = 0;
    while edges.len() < target && attempts < 50 * target.max(1) {
        attempts += 1;
        let u: f64 = rng.random();
        let (a, b) = if u < params.back_edge_fraction && layers > 1 {
            let a = rng.random_range(first..n);
            let lower: Vec<usize> = (0..n).filter(|&j| layer_of[j] < layer_of[a]).collect();
            (a, *lower.choose(&mut rng).unwrap())
        } else if u < params.back_edge_fraction + params.cross_layer_fraction && layers > 2 {
            let a = *non_leaf.choose(&mut rng).unwrap();
            let far: Vec<usize> = (0..n).filter(|&j| layer_of[j] > layer_of[a] + 1).collect();
            match far.choose(&mut rng) {
                Some(&b) => (a, b),
                None => continue,
            }
        } else {
            let a = *non_leaf.choose(&mut rng).unwrap();
            (a, *members[layer_of[a] + 1].choose(&mut rng).unwrap())
        };
        if a != b {
            edges.insert((a, b));
        }
    }

    let edge_keys: Vec<EdgeKey> = edges
        .iter()
        .map(|&(a, b)| EdgeKey {
            caller: services[a].clone(),
            callee: services[b].clone(),
        })
        .collect();
    let has_caller: BTreeSet<usize> = edges.iter().map(|&(_, b)| b).collect();
    let has_callee: BTreeSet<usize> = edges.iter().map(|&(a, _)| a).collect();
    let mut eligible: Vec<usize> = has_caller.intersection(&has_callee).copied().collect();
    if eligible.is_empty() {
        eligible = has_caller.iter().copied().collect();
    }
    eligible.shuffle(&mut rng);
    let n_entries = ((params.entry_fraction * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut entries: Vec<usize> = eligible[..n_entries].to_vec();
    entries.sort_unstable();
    Topology::new(
        services.clone(),
        edge_keys,
        entries.into_iter().map(|i| services[i].clone()).collect(),
    )
}
