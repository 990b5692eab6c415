//! Bagged CART classifier with Gini splits and majority vote.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_TRAINING_CASES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        anomalous: bool,
    },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, v: &[f64]) -> bool {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { anomalous } => return *anomalous,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if v[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestClassifier {
    pub arity: usize,
    pub max_depth: usize,
    pub seed: u64,
    pub trees: Vec<TreeNode>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    arity: usize,
    max_depth: usize,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        TreeNode::Leaf {
            anomalous: 2 * pos > idx.len(),
        }
    }

    fn build(&self, idx: &mut [usize], depth: usize) -> TreeNode {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.max_depth || pos == 0 || pos == n || n < 2 {
            return self.leaf(idx);
        }
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..self.arity {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left_pos = 0;
            for k in 0..n - 1 {
                if self.y[idx[k]] {
                    left_pos += 1;
                }
                let (a, b) = (self.x[idx[k]][f], self.x[idx[k + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                let imp = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr)) / n as f64;
                if best.is_none_or(|(bi, _, _)| imp < bi) {
                    best = Some((imp, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((imp, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        if imp >= parent - 1e-12 {
            return self.leaf(idx);
        }
        let mut left: Vec<usize> = Vec::new();
        let mut right: Vec<usize> = Vec::new();
        for &i in idx.iter() {
            if self.x[i][feature] <= threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.build(&mut left, depth + 1)),
            right: Box::new(self.build(&mut right, depth + 1)),
        }
    }
}

impl ForestClassifier {
    pub fn train(x: &[Vec<f64>], y: &[bool], params: &ForestParams) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::Training("feature and label counts differ".into()));
        }
        if n < MIN_TRAINING_CASES {
            return Err(Error::Training(format!(
                "forest training needs at least {MIN_TRAINING_CASES} cases, got {n}"
            )));
        }
        if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
            return Err(Error::Training("forest training needs both classes".into()));
        }
        let arity = x[0].len();
        if arity == 0 || x.iter().any(|r| r.len() != arity) {
            return Err(Error::Training("training vectors must share a non-zero arity".into()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Training("training vectors contain non-finite values".into()));
        }
        if params.n_trees == 0 || params.max_depth == 0 {
            return Err(Error::Training("n_trees and max_depth must be positive".into()));
        }
        let builder = Builder {
            x,
            y,
            arity,
            max_depth: params.max_depth,
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(t as u64);
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                builder.build(&mut idx, 0)
            })
            .collect();
        Ok(Self {
            arity,
            max_depth: params.max_depth,
            seed: params.seed,
            trees,
        })
    }

    /// Number of trees voting anomalous.
    pub fn votes(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.arity {
            return Err(Error::invalid(format!(
                "forest expects {} features, got {}",
                self.arity,
                v.len()
            )));
        }
        Ok(self.trees.iter().filter(|t| t.predict(v)).count())
    }

    /// Strict majority; ties are not anomalous.
    pub fn predict(&self, v: &[f64]) -> Result<bool> {
        Ok(2 * self.votes(v)? > self.trees.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let pos = rng.random_bool(0.4);
            let v = if pos {
                rng.random_range(1.0..5.0)
            } else {
                rng.random_range(-5.0..0.0)
            };
            x.push(vec![v]);
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn one_dimensional_separable() {
        let (x, y) = separable(200, 1);
        let f = ForestClassifier::train(&x, &y, &ForestParams::default()).unwrap();
        let (tx, ty) = separable(200, 2);
        let correct = tx.iter().zip(&ty).filter(|(v, l)| f.predict(v).unwrap() == **l).count();
        assert_eq!(correct, 200);
        assert!(f.trees.iter().all(|t| t.depth() <= 6));
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = separable(200, 3);
        let p = ForestParams {
            seed: 9,
            ..Default::default()
        };
        let a = ForestClassifier::train(&x, &y, &p).unwrap();
        let b = ForestClassifier::train(&x, &y, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![1.0]; 60];
        assert!(ForestClassifier::train(&x, &[false; 60], &ForestParams::default()).is_err());
    }

    #[test]
    fn tie_is_not_anomalous() {
        let f = ForestClassifier {
            arity: 1,
            max_depth: 1,
            seed: 0,
            trees: vec![TreeNode::Leaf { anomalous: true }, TreeNode::Leaf { anomalous: false }],
        };
        assert!(!f.predict(&[0.0]).unwrap());
        assert!(f.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let y: Vec<bool> = x.iter().map(|v| v[0] + 0.5 * v[1] > 0.3).collect();
        let tf = |v: &Vec<f64>| vec![v[0].exp(), v[1] * v[1] * v[1]];
        let xt: Vec<Vec<f64>> = x.iter().map(tf).collect();
        let p = ForestParams {
            seed: 1,
            ..Default::default()
        };
        let a = ForestClassifier::train(&x, &y, &p).unwrap();
        let b = ForestClassifier::train(&xt, &y, &p).unwrap();
        for v in &x {
            assert_eq!(a.predict(v).unwrap(), b.predict(&tf(v)).unwrap());
        }
        let probes: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let agree = probes
            .iter()
            .filter(|v| a.predict(v).unwrap() == b.predict(&tf(v)).unwrap())
            .count();
        // Midpoint thresholds differ after a nonlinear transform, so probes
        // falling between two adjacent training values may disagree.
        assert!(agree >= 490, "{agree}");
    }
}
