//! Synthetic vote data drawn from a known mixture of Bradley-Terry
//! subpopulations, plus a small biased tabular generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bt::logistic;
use crate::error::{Error, Result};
use crate::votes::{Outcome, Vote, VoteSet};

const BASE_TIMESTAMP: i64 = 1_700_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subpopulation {
    pub name: String,
    pub weight: f64,
    pub theta: BTreeMap<String, f64>,
    pub languages: Vec<String>,
    #[serde(default)]
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSampling {
    #[default]
    Uniform,
    /// Pair `k` in sorted order drawn with weight `(k + 1)^-alpha`.
    PowerLaw { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub subpopulations: Vec<Subpopulation>,
    pub n_votes: usize,
    #[serde(default)]
    pub pair_sampling: PairSampling,
    #[serde(default)]
    pub tie_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSubpopulation {
    pub name: String,
    pub weight: f64,
    /// Generating scores, centered to mean zero.
    pub theta: BTreeMap<String, f64>,
    pub n_votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub subpopulations: Vec<TrueSubpopulation>,
    /// Subpopulation index per vote id.
    pub vote_subpopulation: Vec<usize>,
}

impl GroundTruth {
    pub fn write_json<W: Write>(&self, mut sink: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut sink, self)?;
        writeln!(sink)?;
        Ok(())
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subpopulations.is_empty() {
            return Err(Error::validation("mixture has no subpopulations"));
        }
        let total: f64 = self.subpopulations.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("subpopulation weights sum to {total}, not 1")));
        }
        for s in &self.subpopulations {
            if !(s.weight > 0.0 && s.weight <= 1.0) {
                return Err(Error::validation(format!("weight of `{}` outside (0, 1]", s.name)));
            }
            if s.theta.len() < 2 {
                return Err(Error::validation(format!("`{}` needs at least two models", s.name)));
            }
            if s.theta.values().any(|t| !t.is_finite()) {
                return Err(Error::validation(format!("`{}` has a non-finite score", s.name)));
            }
            if s.languages.is_empty() {
                return Err(Error::validation(format!("`{}` has no languages", s.name)));
            }
        }
        if !(0.0..0.5).contains(&self.tie_rate) {
            return Err(Error::validation(format!("tie rate {} outside [0, 0.5)", self.tie_rate)));
        }
        if let PairSampling::PowerLaw { alpha } = self.pair_sampling {
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(Error::validation("power-law exponent must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

type PairSampler = (Vec<(usize, usize)>, WeightedIndex<f64>);

fn pair_sampler(models: &[&String], sampling: PairSampling) -> Result<PairSampler> {
    let pairs: Vec<(usize, usize)> =
        (0..models.len()).flat_map(|a| (a + 1..models.len()).map(move |b| (a, b))).collect();
    let weights: Vec<f64> = match sampling {
        PairSampling::Uniform => vec![1.0; pairs.len()],
        PairSampling::PowerLaw { alpha } => (0..pairs.len()).map(|k| ((k + 1) as f64).powf(-alpha)).collect(),
    };
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::validation(e.to_string()))?;
    Ok((pairs, dist))
}

/// Draws `n_votes` votes: subpopulation by weight, an unordered pair by the
/// sampling scheme, a random side assignment, then a tie or a logistic
/// winner under that subpopulation's scores.
pub fn generate(spec: &MixtureSpec) -> Result<(VoteSet, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pick_sub = WeightedIndex::new(spec.subpopulations.iter().map(|s| s.weight))
        .map_err(|e| Error::validation(e.to_string()))?;
    let samplers = spec
        .subpopulations
        .iter()
        .map(|s| {
            let models: Vec<&String> = s.theta.keys().collect();
            pair_sampler(&models, spec.pair_sampling).map(|p| (models, p))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut votes = Vec::with_capacity(spec.n_votes);
    let mut labels = Vec::with_capacity(spec.n_votes);
    let mut counts = vec![0; spec.subpopulations.len()];
    for id in 0..spec.n_votes {
        let s = pick_sub.sample(&mut rng);
        let sub = &spec.subpopulations[s];
        let (models, (pairs, dist)) = &samplers[s];
        let (i, j) = pairs[dist.sample(&mut rng)];
        let (a, b) = if rng.random::<bool>() { (models[i], models[j]) } else { (models[j], models[i]) };
        let outcome = if rng.random::<f64>() < spec.tie_rate {
            Outcome::Tie
        } else if rng.random::<f64>() < logistic(sub.theta[a] - sub.theta[b]) {
            Outcome::AWins
        } else {
            Outcome::BWins
        };
        let language = sub.languages[rng.random_range(0..sub.languages.len())].clone();
        let tasks: BTreeSet<String> = if sub.tasks.is_empty() {
            BTreeSet::new()
        } else {
            BTreeSet::from([sub.tasks[rng.random_range(0..sub.tasks.len())].clone()])
        };
        votes.push(Vote {
            id,
            model_a: a.clone(),
            model_b: b.clone(),
            outcome,
            language,
            tasks,
            timestamp: BASE_TIMESTAMP + 60 * id as i64,
            extra: BTreeMap::from([("subpopulation".to_string(), sub.name.clone())]),
        });
        labels.push(s);
        counts[s] += 1;
    }

    let truth = GroundTruth {
        seed: spec.seed,
        subpopulations: spec
            .subpopulations
            .iter()
            .zip(&counts)
            .map(|(s, &n)| {
                let mean = s.theta.values().sum::<f64>() / s.theta.len() as f64;
                TrueSubpopulation {
                    name: s.name.clone(),
                    weight: s.weight,
                    theta: s.theta.iter().map(|(m, t)| (m.clone(), t - mean)).collect(),
                    n_votes: n,
                }
            })
            .collect(),
        vote_subpopulation: labels,
    };
    Ok((VoteSet::new(votes)?, truth))
}

/// Languages used by the presets, one per subpopulation.
pub const PRESET_LANGUAGES: [&str; 5] = ["English", "German", "Japanese", "Spanish", "Tamil"];

/// Five subpopulations over ten models arranged on a ring.
///
/// Subpopulation `s` compares only models `2s … 2s+3 (mod 10)` with scores
/// 3, 0, 6, 9, so each adjacent window reverses the pair it shares with its
/// neighbour and no global ordering fits everyone.
pub fn ring_mixture(n_votes: usize, seed: u64) -> MixtureSpec {
    let scores = [3.0, 0.0, 6.0, 9.0];
    let subpopulations = (0..5)
        .map(|s| Subpopulation {
            name: format!("ring{s}"),
            weight: 0.2,
            theta: (0..4).map(|k| (format!("m{}", (2 * s + k) % 10), scores[k])).collect(),
            languages: vec![PRESET_LANGUAGES[s].to_string()],
            tasks: vec!["general".into(), "code".into()],
        })
        .collect();
    MixtureSpec { subpopulations, n_votes, pair_sampling: PairSampling::Uniform, tie_rate: 0.0, seed }
}

/// Two subpopulations with exactly reversed preferences over the same models.
pub fn mirror_mixture(n_models: usize, gap: f64, n_votes: usize, seed: u64) -> MixtureSpec {
    let theta = |sign: f64| -> BTreeMap<String, f64> {
        (0..n_models).map(|k| (format!("m{k}"), sign * gap * k as f64)).collect()
    };
    MixtureSpec {
        subpopulations: vec![
            Subpopulation {
                name: "up".into(),
                weight: 0.5,
                theta: theta(1.0),
                languages: vec![PRESET_LANGUAGES[0].into()],
                tasks: Vec::new(),
            },
            Subpopulation {
                name: "down".into(),
                weight: 0.5,
                theta: theta(-1.0),
                languages: vec![PRESET_LANGUAGES[1].into()],
                tasks: Vec::new(),
            },
        ],
        n_votes,
        pair_sampling: PairSampling::Uniform,
        tie_rate: 0.0,
        seed,
    }
}

pub const TABULAR_COLUMNS: [&str; 7] =
    ["age", "age_cat", "sex", "race", "priors_count", "charge_degree", "two_year_recid"];

/// Writes a recidivism-style CSV with a planted group disparity: the label
/// base rate depends on race beyond what age and priors explain.
pub fn write_biased_tabular<W: Write>(sink: W, n: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TABULAR_COLUMNS).map_err(csv_err)?;
    let races = WeightedIndex::new([0.5, 0.34, 0.16]).map_err(|e| Error::validation(e.to_string()))?;
    let race_names = ["African-American", "Caucasian", "Hispanic"];
    for _ in 0..n {
        let age: u32 = rng.random_range(18..70);
        let sex = if rng.random::<f64>() < 0.8 { "Male" } else { "Female" };
        let race = race_names[races.sample(&mut rng)];
        let priors: u32 = {
            // geometric-ish count
            let mut k = 0;
            while k < 30 && rng.random::<f64>() < 0.6 {
                k += 1;
            }
            k
        };
        let charge = if rng.random::<f64>() < 0.65 { "F" } else { "M" };
        let age_cat = match age {
            ..25 => "Less than 25",
            25..=45 => "25 - 45",
            _ => "Greater than 45",
        };
        let group_shift = match race {
            "African-American" => 0.9,
            "Caucasian" => -0.4,
            _ => 0.0,
        };
        let logit = -0.6 + 0.35 * priors as f64 - 0.045 * (age as f64 - 35.0)
            + group_shift
            + if charge == "F" { 0.2 } else { 0.0 };
        let label = (rng.random::<f64>() < logistic(logit)) as u8;
        w.write_record([
            age.to_string(),
            age_cat.to_string(),
            sex.to_string(),
            race.to_string(),
            priors.to_string(),
            charge.to_string(),
            label.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
