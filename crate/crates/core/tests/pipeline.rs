use std::collections::BTreeMap;

use covrank::bt::{compute_weights, fit_bt, win_prob, BtRanking, DEFAULT_MAX_ITER, DEFAULT_TOL};
use covrank::coverage::{build_error_matrix, coverage_fraction, stream_error_matrix, ErrorMatrix};
use covrank::extrapolate::{ensemble_models, llm_error_matrix, MissingScore};
use covrank::select::{build_cover_sets, greedy_select, lp_relax_and_round, phase2_min_mse};
use covrank::synth::{generate, ring_mixture, MixtureSpec, PairSampling, Subpopulation};
use covrank::votes::{stratify, Dimension, Vote, VoteSet};

fn fit(votes: impl IntoIterator<Item = impl std::borrow::Borrow<Vote>>) -> BtRanking {
    let owned: Vec<Vote> = votes.into_iter().map(|v| v.borrow().clone()).collect();
    fit_bt(&compute_weights(&owned, 0.5).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
}

fn strata_rankings(vs: &VoteSet) -> Vec<(String, BtRanking)> {
    let mut out = vec![("global".to_string(), fit(vs.votes()))];
    for s in stratify(vs, &Dimension::Language, 50) {
        out.push((s.key.to_string(), fit(vs.slice(&s))));
    }
    out
}

#[test]
fn fitted_probabilities_converge_with_many_votes_per_pair() {
    let theta: BTreeMap<String, f64> =
        [("a", 0.8), ("b", 0.0), ("c", -0.5)].iter().map(|(m, t)| (m.to_string(), *t)).collect();
    let spec = MixtureSpec {
        subpopulations: vec![Subpopulation {
            name: "one".into(),
            weight: 1.0,
            theta: theta.clone(),
            languages: vec!["English".into()],
            tasks: Vec::new(),
        }],
        n_votes: 18_000,
        pair_sampling: PairSampling::Uniform,
        tie_rate: 0.0,
        seed: 21,
    };
    let (vs, _) = generate(&spec).unwrap();
    let r = fit(vs.votes());
    let truth = BtRanking::from_scores(theta);
    for a in ["a", "b", "c"] {
        for b in ["a", "b", "c"] {
            if a != b {
                let diff = (win_prob(&r, a, b).unwrap() - win_prob(&truth, a, b).unwrap()).abs();
                assert!(diff < 0.02, "{a} vs {b}: {diff}");
            }
        }
    }
}

#[test]
fn ring_pipeline_selects_language_rankings() {
    let (vs, _) = generate(&ring_mixture(10_000, 8)).unwrap();
    let rankings = strata_rankings(&vs);
    assert_eq!(rankings.len(), 6);
    let votes: Vec<&Vote> = vs.decisive().collect();
    let em = build_error_matrix(&rankings, &votes).unwrap();

    let cs = build_cover_sets(&em, 0.35).unwrap();
    let greedy = greedy_select(&cs, 0.95).unwrap();
    assert!(greedy.portfolio.model_ids.iter().all(|id| id.starts_with("language=")));
    assert!(coverage_fraction(&em, &[0], 0.35) < 0.5);

    let lp = lp_relax_and_round(&cs, 0.95).unwrap();
    assert!(lp.certificate.unwrap() <= greedy.k() as f64 + 1e-9);

    let phase2 = phase2_min_mse(&em, 0.35, 0.95, greedy.k(), None, 0).unwrap();
    assert!(phase2.portfolio.nu_achieved >= 0.95);
}

#[test]
fn streamed_matrix_matches_in_memory_one() {
    let (vs, _) = generate(&ring_mixture(1_500, 2)).unwrap();
    let rankings = strata_rankings(&vs);
    let votes: Vec<&Vote> = vs.decisive().collect();
    let em = build_error_matrix(&rankings, &votes).unwrap();
    let mut whole = Vec::new();
    em.write_binary(&mut whole).unwrap();
    let mut streamed = Vec::new();
    stream_error_matrix(&rankings, &votes, &mut streamed, 97).unwrap();
    assert_eq!(whole, streamed);
    let back = ErrorMatrix::read_binary(streamed.as_slice()).unwrap();
    assert_eq!(back.n_items(), votes.len());
}

#[test]
fn single_ranking_llm_errors_are_loss_probabilities() {
    let (vs, _) = generate(&ring_mixture(800, 4)).unwrap();
    let global = vec![("global".to_string(), fit(vs.votes()))];
    let llms = ensemble_models(&global);
    let votes: Vec<&Vote> = vs.decisive().collect();
    let em = llm_error_matrix(&global, &votes, &llms, MissingScore::Half).unwrap();
    for (i, v) in votes.iter().enumerate() {
        let (winner, _) = v.winner_loser().unwrap();
        for (j, llm) in llms.iter().enumerate() {
            let expected = if llm == winner { 0.0 } else { 1.0 - win_prob(&global[0].1, llm, winner).unwrap() };
            assert!((em.value(i, j) - expected).abs() < 1e-12);
        }
    }
}
