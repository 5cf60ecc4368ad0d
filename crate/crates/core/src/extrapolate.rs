//! Per-LLM satisfaction probabilities extrapolated from an ensemble of
//! rankings.
//!
//! Each vote induces a posterior over rankings proportional to how well each
//! ranking predicts it. An LLM satisfies the vote with the posterior
//! probability that it is at least as good as the observed winner.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bt::{logistic, win_prob, BtRanking};
use crate::coverage::{ErrorMatrix, MISSING};
use crate::error::{Error, Result};
use crate::votes::Vote;

/// How a ranking that lacks a score for the LLM or the winner contributes to
/// the satisfaction probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingScore {
    /// Contribute its posterior mass times 0.5.
    #[default]
    Half,
    /// Drop it and renormalize over rankings that score both.
    Renormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPosterior {
    pub vote_id: usize,
    /// Ranking id → posterior weight; only rankings scoring both vote models.
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmErrorRow {
    pub vote_id: usize,
    pub errors: BTreeMap<String, f64>,
}

fn decisive(v: &Vote) -> Result<(&str, &str)> {
    v.winner_loser().ok_or_else(|| Error::validation(format!("vote {} is not decisive", v.id)))
}

/// Probability the ranking assigns to the observed outcome; `None` if it
/// lacks either model.
pub fn vote_accuracy(r: &BtRanking, v: &Vote) -> Result<Option<f64>> {
    let (winner, loser) = decisive(v)?;
    if !(r.contains(winner) && r.contains(loser)) {
        return Ok(None);
    }
    win_prob(r, winner, loser).map(Some)
}

pub fn ranking_posterior(rankings: &[(String, BtRanking)], v: &Vote) -> Result<RankingPosterior> {
    let mut weights = BTreeMap::new();
    for (id, r) in rankings {
        if let Some(p) = vote_accuracy(r, v)? {
            weights.insert(id.clone(), p);
        }
    }
    let total: f64 = weights.values().sum();
    if weights.is_empty() || total <= 0.0 {
        return Err(Error::validation(format!("no ranking scores both models of vote {}", v.id)));
    }
    for w in weights.values_mut() {
        *w /= total;
    }
    Ok(RankingPosterior { vote_id: v.id, weights })
}

/// Probability that `llm` is at least as good as the winner of `v`.
pub fn llm_satisfaction(
    rankings: &[(String, BtRanking)],
    posterior: &RankingPosterior,
    v: &Vote,
    llm: &str,
    mode: MissingScore,
) -> Result<f64> {
    let (winner, _) = decisive(v)?;
    if llm == winner {
        return Ok(1.0);
    }
    let (mut q, mut mass) = (0.0, 0.0);
    for (id, r) in rankings {
        let Some(&sigma) = posterior.weights.get(id) else { continue };
        match (r.theta(winner), r.theta(llm)) {
            (Some(ta), Some(tl)) => {
                q += sigma * logistic(tl - ta);
                mass += sigma;
            }
            _ if mode == MissingScore::Half => {
                q += sigma * 0.5;
                mass += sigma;
            }
            _ => {}
        }
    }
    Ok(if mass > 0.0 { (q / mass).clamp(0.0, 1.0) } else { 0.5 })
}

/// One error row; `None` entries mark LLMs no posterior ranking can assess.
pub fn llm_error_row(
    rankings: &[(String, BtRanking)],
    v: &Vote,
    llms: &[String],
    mode: MissingScore,
) -> Result<LlmErrorRow> {
    let (winner, _) = decisive(v)?;
    let posterior = match ranking_posterior(rankings, v) {
        Ok(p) => Some(p),
        Err(Error::Validation(_)) => None,
        Err(e) => return Err(e),
    };
    let mut errors = BTreeMap::new();
    for llm in llms {
        let e = match &posterior {
            _ if llm == winner => 0.0,
            Some(p) => 1.0 - llm_satisfaction(rankings, p, v, llm, mode)?,
            None => MISSING,
        };
        errors.insert(llm.clone(), e);
    }
    Ok(LlmErrorRow { vote_id: v.id, errors })
}

/// `err[i][ℓ] = 1 − q(i, ℓ)` over decisive votes and the given LLMs.
///
/// Votes that no ranking can score get MISSING entries except for the
/// winner column, which is always 0.
pub fn llm_error_matrix(
    rankings: &[(String, BtRanking)],
    votes: &[&Vote],
    llms: &[String],
    mode: MissingScore,
) -> Result<ErrorMatrix> {
    let rows: Vec<Vec<f64>> = votes
        .par_iter()
        .map(|v| llm_error_row(rankings, v, llms, mode).map(|row| llms.iter().map(|l| row.errors[l]).collect()))
        .collect::<Result<_>>()?;
    let item_ids = votes.iter().map(|v| v.id.to_string()).collect();
    ErrorMatrix::new(item_ids, llms.to_vec(), rows.into_iter().flatten().collect())
}

/// Every model scored by at least one ranking, sorted.
pub fn ensemble_models(rankings: &[(String, BtRanking)]) -> Vec<String> {
    let set: std::collections::BTreeSet<&String> = rankings.iter().flat_map(|(_, r)| r.scores.keys()).collect();
    set.into_iter().cloned().collect()
}

/// One row of an LLM ordering table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmOrderingRow {
    pub rank: usize,
    pub llm: String,
    pub coverage: f64,
}

/// Cumulative λ-coverage of the LLMs in the given order.
pub fn ordering_table(em: &ErrorMatrix, order: &[usize], lambda: f64) -> Vec<LlmOrderingRow> {
    (1..=order.len())
        .map(|k| LlmOrderingRow {
            rank: k,
            llm: em.model_ids()[order[k - 1]].clone(),
            coverage: crate::coverage::coverage_fraction(em, &order[..k], lambda),
        })
        .collect()
}
