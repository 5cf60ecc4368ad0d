//! Ranking coverage over heterogeneous preference data.
//!
//! Fits Bradley-Terry rankings to pairwise votes, measures how well a set of
//! rankings covers individual votes, and selects small portfolios of
//! rankings that cover most of the population.

pub mod bt;
pub mod coverage;
pub mod diagnostics;
pub mod error;
pub mod extrapolate;
pub mod fairness;
pub mod lp;
pub mod select;
pub mod synth;
pub mod votes;

pub use bt::{
    compute_weights, fit_bt, fit_bt_with, win_prob, BtRanking, FitOptions, FitReport, PairWeights, RankingExport,
};
pub use coverage::{
    build_error_matrix, coverage_fraction, ranking_error, ErrorMatrix, Portfolio, PortfolioStep, MISSING,
};
pub use diagnostics::{cancellation_rate, confidence_threshold_fraction, ingroup_performance, score_spread};
pub use error::{Error, Result};
pub use extrapolate::{llm_error_matrix, ranking_posterior, MissingScore};
pub use fairness::{build_ensemble, classifier_error_matrix, eo_gap, ClassifierModel, TabularDataset};
pub use select::{
    build_cover_sets, exact_select, greedy_select, lp_relax_and_round, phase2_min_mse, CoverSets, Method,
    SelectionExport, SelectionResult,
};
pub use synth::{generate, GroundTruth, MixtureSpec, PairSampling};
pub use votes::{stratify, Dimension, FamilyMap, Format, Outcome, Stratum, StratumKey, Vote, VoteSet};
