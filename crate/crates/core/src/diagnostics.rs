//! Heterogeneity statistics: vote cancellation, Elo spread, in-group fit and
//! win-probability distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bt::{win_prob, BtRanking};
use crate::error::{Error, Result};
use crate::votes::{StratumKey, Vote};

/// Share of decisive votes offset by an opposing vote on the same pair:
/// `Σ 2·min(w, l) / Σ (w + l)` over unordered pairs.
pub fn cancellation_rate<'a>(votes: impl IntoIterator<Item = &'a Vote>) -> Result<f64> {
    let mut pairs: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for v in votes {
        let Some((w, l)) = v.winner_loser() else { continue };
        let e = pairs.entry(if w < l { (w, l) } else { (l, w) }).or_default();
        if w < l {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let total: usize = pairs.values().map(|(a, b)| a + b).sum();
    if total == 0 {
        return Err(Error::Empty("no decisive votes".into()));
    }
    let offset: usize = pairs.values().map(|&(a, b)| 2 * a.min(b)).sum();
    Ok(offset as f64 / total as f64)
}

/// Max minus min Elo.
pub fn score_spread(r: &BtRanking) -> Result<f64> {
    if r.len() < 2 {
        return Err(Error::validation("score spread needs at least two models"));
    }
    let max = r.elo.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.elo.values().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InGroupPerformance {
    pub mean_winner_prob: f64,
    pub mean_log_loss: f64,
    pub n_evaluated: usize,
    /// Decisive votes skipped because the ranking lacks a model.
    pub n_missing: usize,
}

fn winner_prob(r: &BtRanking, v: &Vote) -> Option<f64> {
    let (w, l) = v.winner_loser()?;
    win_prob(r, w, l).ok()
}

/// Mean probability of the observed winner and mean `−ln p` over decisive votes.
pub fn ingroup_performance<'a>(r: &BtRanking, votes: impl IntoIterator<Item = &'a Vote>) -> Result<InGroupPerformance> {
    let (mut sum_p, mut sum_ll, mut n, mut missing) = (0.0, 0.0, 0, 0);
    for v in votes.into_iter().filter(|v| v.is_decisive()) {
        match winner_prob(r, v) {
            Some(p) => {
                sum_p += p;
                sum_ll -= p.ln();
                n += 1;
            }
            None => missing += 1,
        }
    }
    if n == 0 {
        return Err(Error::Empty("no decisive votes the ranking can score".into()));
    }
    Ok(InGroupPerformance {
        mean_winner_prob: sum_p / n as f64,
        mean_log_loss: sum_ll / n as f64,
        n_evaluated: n,
        n_missing: missing,
    })
}

/// Fraction of scorable decisive votes whose winner gets probability ≥ `p`.
pub fn confidence_threshold_fraction<'a>(r: &BtRanking, votes: impl IntoIterator<Item = &'a Vote>, p: f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for v in votes {
        if let Some(q) = winner_prob(r, v) {
            n += 1;
            hit += (q >= p) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Equal-width histogram on [0, 1]; the last bin includes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::validation("histogram needs at least two bins"));
        }
        Ok(Self { edges: (0..=bins).map(|k| k as f64 / bins as f64).collect(), counts: vec![0; bins] })
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let k = ((x * bins as f64).floor() as usize).min(bins - 1);
        self.counts[k] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Winner-probability histograms of each ranking on its own slice, grouped
/// by the ranking's stratification dimension.
pub fn winprob_density(
    rankings: &[(StratumKey, &BtRanking, Vec<&Vote>)],
    bins: usize,
) -> Result<BTreeMap<String, Histogram>> {
    let mut out = BTreeMap::new();
    for (key, r, votes) in rankings {
        let h = match out.entry(key.dimension.name()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(Histogram::new(bins)?),
        };
        for v in votes {
            if let Some(p) = winner_prob(r, v) {
                h.add(p);
            }
        }
    }
    Ok(out)
}

/// One diagnostics row per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDiagnostics {
    pub key: StratumKey,
    pub n_votes: usize,
    pub spread_elo: f64,
    pub mean_winner_prob: f64,
    pub mean_log_loss: f64,
    pub cancellation_rate: f64,
}

pub fn stratum_diagnostics<'a>(
    key: &StratumKey,
    r: &BtRanking,
    votes: impl IntoIterator<Item = &'a Vote> + Clone,
) -> Result<StratumDiagnostics> {
    let perf = ingroup_performance(r, votes.clone())?;
    Ok(StratumDiagnostics {
        key: key.clone(),
        n_votes: perf.n_evaluated,
        spread_elo: score_spread(r).unwrap_or(0.0),
        mean_winner_prob: perf.mean_winner_prob,
        mean_log_loss: perf.mean_log_loss,
        cancellation_rate: cancellation_rate(votes).unwrap_or(0.0),
    })
}
