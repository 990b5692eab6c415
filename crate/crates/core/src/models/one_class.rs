//! One-class SVM with an RBF kernel, trained by SMO on the dual problem
//!
//! ```text
//! min 1/2 a'Qa   s.t.  0 <= a_i <= 1/(nu n),  sum a_i = 1
//! ```
//!
//! Inputs are standardized per feature before training and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_TRAINING_CASES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneClassParams {
    pub nu: f64,
    /// Kernel width; `None` picks `1 / (d * mean standardized variance)`.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for OneClassParams {
    fn default() -> Self {
        Self {
            nu: 0.05,
            gamma: None,
            tolerance: 1e-4,
            max_iterations: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &[Vec<f64>]) -> Self {
        let d = data[0].len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; d];
        for row in data {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for row in data {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneClassSeparator {
    pub gamma: f64,
    pub nu: f64,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub standardizer: Standardizer,
    /// Number of SMO iterations used in training.
    pub iterations: usize,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl OneClassSeparator {
    pub fn train(cases: &[Vec<f64>], params: &OneClassParams) -> Result<Self> {
        let n = cases.len();
        if n < MIN_TRAINING_CASES {
            return Err(Error::Training(format!(
                "one-class training needs at least {MIN_TRAINING_CASES} cases, got {n}"
            )));
        }
        let d = cases[0].len();
        if d == 0 || cases.iter().any(|c| c.len() != d) {
            return Err(Error::Training("training vectors must share a non-zero arity".into()));
        }
        if cases.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Training("training vectors contain non-finite values".into()));
        }
        if cases.iter().all(|c| c == &cases[0]) {
            return Err(Error::Training("all training vectors are identical".into()));
        }
        if !(params.nu > 0.0 && params.nu <= 1.0) {
            return Err(Error::Training(format!("nu must be in (0, 1], got {}", params.nu)));
        }

        let standardizer = Standardizer::fit(cases);
        let x: Vec<Vec<f64>> = cases.iter().map(|c| standardizer.apply(c)).collect();
        let gamma = match params.gamma {
            Some(g) if g > 0.0 => g,
            Some(g) => return Err(Error::Training(format!("gamma must be positive, got {g}"))),
            None => {
                let mut var = 0.0;
                for j in 0..d {
                    let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                    var += x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
                }
                1.0 / (d as f64 * (var / d as f64))
            }
        };

        let c = 1.0 / (params.nu * n as f64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
        let mut alpha = vec![0.0; n];
        let mut remaining = 1.0f64;
        for &i in &order {
            if remaining <= 0.0 {
                break;
            }
            let a = c.min(remaining);
            alpha[i] = a;
            remaining -= a;
        }

        let column = |i: usize| -> Vec<f64> { x.iter().map(|r| rbf(gamma, &x[i], r)).collect() };
        let mut grad = vec![0.0; n];
        for i in (0..n).filter(|&i| alpha[i] > 0.0) {
            let col = column(i);
            for (g, k) in grad.iter_mut().zip(&col) {
                *g += alpha[i] * k;
            }
        }

        let mut iterations = 0;
        while iterations < params.max_iterations {
            // i: may increase, smallest gradient; j: may decrease, largest.
            let mut i_best = None;
            let mut j_best = None;
            for k in 0..n {
                if alpha[k] < c && i_best.is_none_or(|i: usize| grad[k] < grad[i]) {
                    i_best = Some(k);
                }
                if alpha[k] > 0.0 && j_best.is_none_or(|j: usize| grad[k] > grad[j]) {
                    j_best = Some(k);
                }
            }
            let (Some(i), Some(j)) = (i_best, j_best) else { break };
            if grad[j] - grad[i] < params.tolerance {
                break;
            }
            iterations += 1;
            let ci = column(i);
            let cj = column(j);
            let eta = (ci[i] + cj[j] - 2.0 * ci[j]).max(1e-12);
            let t = ((grad[j] - grad[i]) / eta).min(c - alpha[i]).min(alpha[j]);
            alpha[i] += t;
            alpha[j] -= t;
            if alpha[j] < 1e-15 {
                alpha[j] = 0.0;
            }
            for k in 0..n {
                grad[k] += t * (ci[k] - cj[k]);
            }
        }

        let eps = 1e-12 * c;
        let free: Vec<f64> = (0..n)
            .filter(|&k| alpha[k] > eps && alpha[k] < c - eps)
            .map(|k| grad[k])
            .collect();
        let rho = if free.is_empty() {
            let lower = (0..n)
                .filter(|&k| alpha[k] >= c - eps)
                .map(|k| grad[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let upper = (0..n)
                .filter(|&k| alpha[k] <= eps)
                .map(|k| grad[k])
                .fold(f64::INFINITY, f64::min);
            match (lower.is_finite(), upper.is_finite()) {
                (true, true) => 0.5 * (lower + upper),
                (true, false) => lower,
                (false, true) => upper,
                (false, false) => 0.0,
            }
        } else {
            // Lower edge of the free band, so margin vectors score >= 0.
            free.iter().copied().fold(f64::INFINITY, f64::min)
        };

        let mut support_vectors = Vec::new();
        let mut alphas = Vec::new();
        for k in 0..n {
            if alpha[k] > 0.0 {
                support_vectors.push(x[k].clone());
                alphas.push(alpha[k]);
            }
        }
        Ok(Self {
            gamma,
            nu: params.nu,
            support_vectors,
            alphas,
            rho,
            standardizer,
            iterations,
        })
    }

    pub fn arity(&self) -> usize {
        self.standardizer.mean.len()
    }

    /// Signed decision value; negative means outside the learned region.
    pub fn decision(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.arity() {
            return Err(Error::invalid(format!(
                "one-class model expects {} features, got {}",
                self.arity(),
                v.len()
            )));
        }
        let z = self.standardizer.apply(v);
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.alphas)
            .map(|(sv, a)| a * rbf(self.gamma, sv, &z))
            .sum();
        Ok(s - self.rho)
    }

    pub fn is_outlier(&self, v: &[f64]) -> Result<bool> {
        Ok(self.decision(v)? < 0.0)
    }
}
