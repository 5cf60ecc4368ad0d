//! Inverse-probability-weighted Bradley-Terry fitting on a vote slice.
//!
//! Scores are on the natural-log logistic scale:
//! `Pr(a beats b) = exp(θ_a) / (exp(θ_a) + exp(θ_b))`, and Elo ratings are
//! the affine map `400·θ + 1000`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::votes::{Outcome, StratumKey, Vote};

pub const DEFAULT_TIE_WEIGHT: f64 = 0.5;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Bound on |θ| for models whose likelihood has no finite maximizer.
pub const DEFAULT_THETA_MAX: f64 = 10.0;

pub const ELO_SCALE: f64 = 400.0;
pub const ELO_OFFSET: f64 = 1000.0;

/// Numerically stable logistic `1 / (1 + e^{-x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn elo_from_theta(theta: f64) -> f64 {
    ELO_SCALE * theta + ELO_OFFSET
}

/// Probability that the higher-rated side wins given an Elo difference.
pub fn elo_win_prob(delta_elo: f64) -> f64 {
    logistic(delta_elo / ELO_SCALE)
}

/// IPW win weights for one slice of votes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    models: Vec<String>,
    index: HashMap<String, usize>,
    /// `(winner, loser)` model indices → weight.
    weights: BTreeMap<(usize, usize), f64>,
    /// Unordered pair `(lo, hi)` → share of slice votes comparing the pair.
    pair_freq: BTreeMap<(usize, usize), f64>,
    n_votes: usize,
}

impl PairWeights {
    /// Builds weights directly, e.g. `[("m1", "m2", 3.0), ("m2", "m1", 1.0)]`.
    /// `pair_freq` is derived from the weight mass of each unordered pair.
    pub fn from_weights<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str, f64)>) -> Result<Self> {
        let mut pw = Self::empty();
        for (a, b, w) in entries {
            if a == b {
                return Err(Error::validation(format!("self pair `{a}`")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(format!(
                    "weight {w} for ({a}, {b}) is not a finite non-negative number"
                )));
            }
            let ia = pw.intern(a);
            let ib = pw.intern(b);
            *pw.weights.entry((ia, ib)).or_insert(0.0) += w;
        }
        let mut mass: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&(a, b), &w) in &pw.weights {
            *mass.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
        let total: f64 = mass.values().sum();
        if total > 0.0 {
            pw.pair_freq = mass.into_iter().filter(|(_, m)| *m > 0.0).map(|(k, m)| (k, m / total)).collect();
        }
        pw.reindex();
        Ok(pw)
    }

    fn empty() -> Self {
        Self {
            models: Vec::new(),
            index: HashMap::new(),
            weights: BTreeMap::new(),
            pair_freq: BTreeMap::new(),
            n_votes: 0,
        }
    }

    fn intern(&mut self, m: &str) -> usize {
        if let Some(&i) = self.index.get(m) {
            return i;
        }
        self.models.push(m.to_string());
        self.index.insert(m.to_string(), self.models.len() - 1);
        self.models.len() - 1
    }

    /// Re-orders models alphabetically so output does not depend on vote order.
    fn reindex(&mut self) {
        let mut order: Vec<usize> = (0..self.models.len()).collect();
        order.sort_by(|&a, &b| self.models[a].cmp(&self.models[b]));
        let mut remap = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        self.models = order.iter().map(|&i| self.models[i].clone()).collect();
        self.index = self.models.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        self.weights = self.weights.iter().map(|(&(a, b), &w)| ((remap[a], remap[b]), w)).collect();
        self.pair_freq = self
            .pair_freq
            .iter()
            .map(|(&(a, b), &f)| {
                let (x, y) = (remap[a], remap[b]);
                ((x.min(y), x.max(y)), f)
            })
            .collect();
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn n_votes(&self) -> usize {
        self.n_votes
    }

    /// `w_ab`: IPW weight of `a` beating `b`.
    pub fn weight(&self, a: &str, b: &str) -> f64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&ia), Some(&ib)) => self.weights.get(&(ia, ib)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// `P̂({a, b})`.
    pub fn pair_freq(&self, a: &str, b: &str) -> f64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&ia), Some(&ib)) => self.pair_freq.get(&(ia.min(ib), ia.max(ib))).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn pair_freqs(&self) -> impl Iterator<Item = ((&str, &str), f64)> {
        self.pair_freq.iter().map(|(&(a, b), &f)| ((self.models[a].as_str(), self.models[b].as_str()), f))
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.values().sum()
    }

    fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.iter().filter(|(_, &w)| w > 0.0).map(|(&(a, b), &w)| (a, b, w))
    }
}

/// IPW weights for a slice. Ties add `tie_weight / P̂` in both directions;
/// `BothBad` votes are skipped and do not count toward `P̂`.
pub fn compute_weights<'a>(slice: impl IntoIterator<Item = &'a Vote>, tie_weight: f64) -> Result<PairWeights> {
    if !(tie_weight >= 0.0 && tie_weight.is_finite()) {
        return Err(Error::validation(format!("tie weight {tie_weight} must be non-negative")));
    }
    let votes: Vec<&Vote> = slice.into_iter().filter(|v| !v.is_excluded()).collect();
    if votes.is_empty() {
        return Err(Error::Empty("slice has no decisive or tie votes".into()));
    }
    let mut pw = PairWeights::empty();
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut resolved = Vec::with_capacity(votes.len());
    for v in &votes {
        let a = pw.intern(&v.model_a);
        let b = pw.intern(&v.model_b);
        *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        resolved.push((a, b, v.outcome));
    }
    let n = votes.len() as f64;
    for (a, b, outcome) in resolved {
        let p = counts[&(a.min(b), a.max(b))] as f64 / n;
        let inv = 1.0 / p;
        match outcome {
            Outcome::AWins => *pw.weights.entry((a, b)).or_insert(0.0) += inv,
            Outcome::BWins => *pw.weights.entry((b, a)).or_insert(0.0) += inv,
            Outcome::Tie => {
                *pw.weights.entry((a, b)).or_insert(0.0) += tie_weight * inv;
                *pw.weights.entry((b, a)).or_insert(0.0) += tie_weight * inv;
            }
            Outcome::BothBad => unreachable!("excluded above"),
        }
    }
    pw.pair_freq = counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect();
    pw.n_votes = votes.len();
    pw.reindex();
    Ok(pw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    /// Some score hit the ±θ_max bound; the fit is then never `converged`.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtRanking {
    pub scores: BTreeMap<String, f64>,
    pub elo: BTreeMap<String, f64>,
    pub fit: FitReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub theta_max: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, theta_max: DEFAULT_THETA_MAX }
    }
}

impl BtRanking {
    /// Ranking from raw scores; centers them and derives Elo ratings.
    pub fn from_scores(scores: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut scores: BTreeMap<String, f64> = scores.into_iter().collect();
        let mean = if scores.is_empty() { 0.0 } else { scores.values().sum::<f64>() / scores.len() as f64 };
        for s in scores.values_mut() {
            *s -= mean;
        }
        let elo = scores.iter().map(|(m, &t)| (m.clone(), elo_from_theta(t))).collect();
        Self { scores, elo, fit: FitReport { iterations: 0, final_grad_norm: 0.0, converged: true, clamped: false } }
    }

    pub fn theta(&self, model: &str) -> Option<f64> {
        self.scores.get(model).copied()
    }

    pub fn contains(&self, model: &str) -> bool {
        self.scores.contains_key(model)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Models sorted by descending score, ties by name.
    pub fn ordering(&self) -> Vec<&str> {
        let mut v: Vec<(&str, f64)> = self.scores.iter().map(|(m, &t)| (m.as_str(), t)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().map(|(m, _)| m).collect()
    }
}

/// `Pr(a beats b)` under the ranking.
pub fn win_prob(r: &BtRanking, a: &str, b: &str) -> Result<f64> {
    if a == b {
        return Err(Error::validation(format!("win_prob of `{a}` against itself")));
    }
    let ta = r.theta(a).ok_or_else(|| Error::UnknownModel(a.to_string()))?;
    let tb = r.theta(b).ok_or_else(|| Error::UnknownModel(b.to_string()))?;
    Ok(logistic(ta - tb))
}

fn theta_vector(theta: &BTreeMap<String, f64>, pw: &PairWeights) -> Result<Vec<f64>> {
    pw.models.iter().map(|m| theta.get(m).copied().ok_or_else(|| Error::UnknownModel(m.clone()))).collect()
}

fn ll_vec(theta: &[f64], pw: &PairWeights) -> f64 {
    pw.edges().map(|(a, b, w)| w * log_logistic(theta[a] - theta[b])).sum()
}

fn grad_vec(theta: &[f64], pw: &PairWeights, out: &mut [f64]) {
    out.iter_mut().for_each(|g| *g = 0.0);
    for (a, b, w) in pw.edges() {
        let g = w * logistic(theta[b] - theta[a]);
        out[a] += g;
        out[b] -= g;
    }
}

/// `ℓ(θ) = Σ w_ab · ln σ(θ_a − θ_b)`.
pub fn log_likelihood(theta: &BTreeMap<String, f64>, pw: &PairWeights) -> Result<f64> {
    Ok(ll_vec(&theta_vector(theta, pw)?, pw))
}

/// Analytic gradient of [`log_likelihood`].
pub fn log_likelihood_gradient(theta: &BTreeMap<String, f64>, pw: &PairWeights) -> Result<BTreeMap<String, f64>> {
    let t = theta_vector(theta, pw)?;
    let mut g = vec![0.0; t.len()];
    grad_vec(&t, pw, &mut g);
    Ok(pw.models.iter().cloned().zip(g).collect())
}

/// Maximizes the IPW log-likelihood.
///
/// Diagonally preconditioned gradient ascent with Armijo backtracking,
/// starting from θ = 0. Convergence is tested on the ∞-norm of the gradient
/// of `ℓ / Σw`, which makes `tol` independent of slice size. Scores are
/// projected onto `[-θ_max, θ_max]` and centered to zero mean at the end.
pub fn fit_bt(pw: &PairWeights, tol: f64, max_iter: usize) -> Result<BtRanking> {
    fit_bt_with(pw, FitOptions { tol, max_iter, ..FitOptions::default() })
}

pub fn fit_bt_with(pw: &PairWeights, opts: FitOptions) -> Result<BtRanking> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::validation("tolerance must be positive"));
    }
    let n = pw.models.len();
    let total = pw.total_weight();
    let scale = if total > 0.0 { 1.0 / total } else { 1.0 };
    let bound = opts.theta_max;

    let mut theta = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut dir = vec![0.0; n];

    let projected = |theta: &[f64], grad: &[f64], i: usize| -> f64 {
        let g = grad[i];
        if (theta[i] >= bound && g > 0.0) || (theta[i] <= -bound && g < 0.0) {
            0.0
        } else {
            g
        }
    };

    let mut ll = ll_vec(&theta, pw) * scale;
    grad_vec(&theta, pw, &mut grad);
    let mut iterations = 0;
    let mut gnorm;
    loop {
        gnorm = (0..n).map(|i| projected(&theta, &grad, i).abs()).fold(0.0, f64::max) * scale;
        if gnorm <= opts.tol || iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        diag.iter_mut().for_each(|d| *d = 0.0);
        for (a, b, w) in pw.edges() {
            let p = logistic(theta[a] - theta[b]);
            let h = w * p * (1.0 - p);
            diag[a] += h;
            diag[b] += h;
        }
        let floor = 1e-12 * total.max(1.0);
        for i in 0..n {
            dir[i] = projected(&theta, &grad, i) / diag[i].max(floor);
        }
        let slope: f64 = (0..n).map(|i| grad[i] * dir[i]).sum::<f64>() * scale;

        let mut step = 1.0;
        let mut accepted = false;
        let mut next_grad = vec![0.0; n];
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = (theta[i] + step * dir[i]).clamp(-bound, bound);
            }
            let trial_ll = ll_vec(&trial, pw) * scale;
            let armijo = trial_ll >= ll + 1e-4 * step * slope;
            // Near the optimum ℓ differences fall below rounding; accept a step
            // that keeps ℓ within rounding and shrinks the gradient instead.
            let flat = trial_ll >= ll - 4.0 * f64::EPSILON * ll.abs().max(1.0);
            if armijo || flat {
                grad_vec(&trial, pw, &mut next_grad);
                let next_norm = (0..n).map(|i| projected(&trial, &next_grad, i).abs()).fold(0.0, f64::max) * scale;
                if armijo || next_norm < gnorm {
                    theta.copy_from_slice(&trial);
                    grad.copy_from_slice(&next_grad);
                    ll = trial_ll;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let clamped = theta.iter().any(|t| t.abs() >= bound);
    let mean = if n > 0 { theta.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let scores: BTreeMap<String, f64> = pw.models.iter().cloned().zip(theta.iter().map(|t| t - mean)).collect();
    let elo = scores.iter().map(|(m, &t)| (m.clone(), elo_from_theta(t))).collect();
    Ok(BtRanking {
        scores,
        elo,
        fit: FitReport { iterations, final_grad_norm: gnorm, converged: gnorm <= opts.tol && !clamped, clamped },
    })
}

/// On-disk ranking document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingExport {
    pub stratum: StratumKey,
    pub scores: BTreeMap<String, f64>,
    pub elo: BTreeMap<String, f64>,
    pub fit: FitReport,
    #[serde(default)]
    pub n_votes: usize,
}

impl RankingExport {
    pub fn new(stratum: StratumKey, ranking: &BtRanking, n_votes: usize) -> Self {
        Self { stratum, scores: ranking.scores.clone(), elo: ranking.elo.clone(), fit: ranking.fit.clone(), n_votes }
    }

    pub fn ranking(&self) -> BtRanking {
        BtRanking { scores: self.scores.clone(), elo: self.elo.clone(), fit: self.fit.clone() }
    }
}
