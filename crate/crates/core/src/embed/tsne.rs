//! Exact O(n²) t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EmbedError;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const KL_EVERY: usize = 50;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn validate(&self, n: usize) -> Result<(), EmbedError> {
        if n < 5 {
            return Err(EmbedError::TooFewPoints(n));
        }
        let bad = |msg: String| Err(EmbedError::InvalidParams(msg));
        if !(self.perplexity > 1.0 && self.perplexity < (n - 1) as f64 / 3.0) {
            return bad(format!(
                "perplexity {} must lie in (1, {:.3}) for {n} points",
                self.perplexity,
                (n - 1) as f64 / 3.0
            ));
        }
        if self.iterations < 250 {
            return bad(format!("iterations {} < 250", self.iterations));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration >= 1.0) {
            return bad("learning rate must be positive and exaggeration at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckpoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P||Q) against the unexaggerated P, every 50 iterations.
    pub kl_trace: Vec<KlCheckpoint>,
    pub final_kl: f64,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace
            .iter()
            .find(|c| c.iteration == iteration)
            .map(|c| c.kl)
    }
}

pub fn squared_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Conditional affinities p(j|i) with per-row Gaussian precision found by
/// bisection so the row entropy (nats) matches `ln(perplexity)`. Returns the
/// rows and the entropy each one achieved.
pub fn conditional_affinities(dist: &[Vec<f64>], perplexity: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = dist.len();
    let target = perplexity.ln();
    let mut rows = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        let d_min = others.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = others.iter().map(|d| d - d_min).collect();
        let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MAX_BISECTIONS {
            let (h, p) = row_entropy(&shifted, beta);
            let better = best
                .as_ref()
                .is_none_or(|(bh, _)| (h - target).abs() < (bh - target).abs());
            if better {
                best = Some((h, p));
            }
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            // entropy falls as precision rises
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let (h, p) = best.expect("at least one bisection step");
        let mut row = vec![0.0; n];
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            row[j] = p[k];
        }
        rows.push(row);
        entropies.push(h);
    }
    (rows, entropies)
}

fn row_entropy(shifted: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut p: Vec<f64> = shifted.iter().map(|d| (-beta * d).exp()).collect();
    let sum: f64 = p.iter().sum();
    let weighted: f64 = shifted.iter().zip(&p).map(|(d, v)| d * v).sum();
    let h = sum.ln() + beta * weighted / sum;
    for v in &mut p {
        *v /= sum;
    }
    (h, p)
}

/// Symmetrized joint affinities `(p(j|i) + p(i|j)) / 2n`.
pub fn joint_probabilities(conditional: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = conditional.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = (conditional[i][j] + conditional[j][i]) / (2.0 * n as f64);
        }
    }
    p
}

fn student_t(y: &[[f64; 2]]) -> (Vec<Vec<f64>>, f64) {
    let n = y.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i][j] = v;
            num[j][i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[Vec<f64>], num: &[Vec<f64>], sum: f64) -> f64 {
    let mut kl = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            let pij = p[i][j];
            if i != j && pij > 0.0 {
                let q = (num[i][j] / sum).max(f64::MIN_POSITIVE);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Runs exact t-SNE on `x`. Updates use momentum plus the usual per-coordinate
/// adaptive gains.
pub fn tsne(x: &[Vec<f64>], params: &TsneParams) -> Result<TsneResult, EmbedError> {
    let n = x.len();
    params.validate(n)?;
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(EmbedError::DimensionMismatch("ragged input vectors".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    if x.iter().all(|r| r == &x[0]) {
        return Err(EmbedError::DegenerateGeometry);
    }
    let dist = squared_distances(x);
    let (cond, _) = conditional_affinities(&dist, params.perplexity);
    let p = joint_probabilities(&cond);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut trace = Vec::new();

    for it in 1..=params.iterations {
        let exaggerate = it <= params.exaggeration_iterations;
        let ex = if exaggerate {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if exaggerate {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        let (num, sum) = student_t(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = (ex * p[i][j] - num[i][j] / sum) * num[i][j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let grad = 4.0 * g[k];
                gains[i][k] = if (grad > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(MIN_GAIN)
                };
                velocity[i][k] =
                    momentum * velocity[i][k] - params.learning_rate * gains[i][k] * grad;
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = [0, 1].map(|k| y.iter().map(|v| v[k]).sum::<f64>() / n as f64);
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        if it % KL_EVERY == 0 || it == params.iterations {
            let (num, sum) = student_t(&y);
            trace.push(KlCheckpoint {
                iteration: it,
                kl: kl_divergence(&p, &num, sum),
            });
        }
    }
    let final_kl = trace.last().map_or(f64::NAN, |c| c.kl);
    Ok(TsneResult {
        coords: y,
        kl_trace: trace,
        final_kl,
    })
}
