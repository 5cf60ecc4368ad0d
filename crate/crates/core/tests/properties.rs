use std::collections::{BTreeMap, BTreeSet};

use covrank::bt::{
    compute_weights, elo_win_prob, fit_bt, log_likelihood, log_likelihood_gradient, win_prob, BtRanking, PairWeights,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use covrank::coverage::{coverage_fraction, covers, ranking_error, ErrorMatrix};
use covrank::diagnostics::{cancellation_rate, score_spread};
use covrank::extrapolate::{llm_satisfaction, ranking_posterior, MissingScore};
use covrank::fairness::eo_gap;
use covrank::select::{
    build_cover_sets, coverage_target, exact_select, greedy_select, lp_relax_and_round, CoverSets, DEFAULT_EXACT_BUDGET,
};
use covrank::votes::{stratify, Dimension, FamilyMap, Format, Outcome, Vote, VoteSet};
use proptest::prelude::*;

const MODELS: [&str; 5] = ["alpha", "beta", "gamma", "delta", "eps"];
const LANGS: [&str; 4] = ["English", "German", "Dutch", "Tamil"];
const TASKS: [&str; 3] = ["code", "math", "creative"];

fn arb_vote() -> impl Strategy<Value = (usize, usize, u8, usize, Vec<bool>, i64)> {
    (0..5usize, 1..5usize, 0..4u8, 0..4usize, prop::collection::vec(any::<bool>(), 3), 0..2_000_000_000i64)
}

fn arb_voteset() -> impl Strategy<Value = VoteSet> {
    prop::collection::vec(arb_vote(), 1..40).prop_map(|rows| {
        let votes = rows
            .into_iter()
            .enumerate()
            .map(|(id, (a, off, o, l, t, ts))| Vote {
                id,
                model_a: MODELS[a].into(),
                model_b: MODELS[(a + off) % 5].into(),
                outcome: [Outcome::AWins, Outcome::BWins, Outcome::Tie, Outcome::BothBad][o as usize],
                language: LANGS[l].into(),
                tasks: TASKS.iter().zip(&t).filter(|(_, on)| **on).map(|(s, _)| s.to_string()).collect(),
                timestamp: ts,
                extra: BTreeMap::from([("source".to_string(), format!("s{}", id % 3))]),
            })
            .collect();
        VoteSet::new(votes).unwrap()
    })
}

fn ranking(scores: &[f64]) -> BtRanking {
    BtRanking::from_scores(scores.iter().enumerate().map(|(k, &t)| (MODELS[k].to_string(), t)))
}

fn decisive(w: &str, l: &str) -> Vote {
    Vote {
        id: 0,
        model_a: w.into(),
        model_b: l.into(),
        outcome: Outcome::AWins,
        language: "English".into(),
        tasks: BTreeSet::new(),
        timestamp: 0,
        extra: BTreeMap::new(),
    }
}

fn arb_matrix() -> impl Strategy<Value = ErrorMatrix> {
    (1..12usize, 1..6usize).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop::option::weighted(0.9, 0.0..=1.0f64), n * m).prop_map(move |cells| {
            let rows: Vec<Vec<Option<f64>>> = cells.chunks(m).map(<[_]>::to_vec).collect();
            ErrorMatrix::from_rows(&rows).unwrap()
        })
    })
}

fn arb_cover_instance() -> impl Strategy<Value = (CoverSets, f64)> {
    (1..=12usize, 1..=40usize, 0..3usize).prop_flat_map(|(m, n, nu)| {
        prop::collection::vec(prop::collection::vec(any::<bool>(), n), m).prop_map(move |masks| {
            let sets = masks.iter().map(|mask| (0..n).filter(|&i| mask[i]).collect()).collect();
            (CoverSets::new(0.5, n, sets).unwrap(), [0.8, 0.9, 1.0][nu])
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_and_csv_round_trip(vs in arb_voteset()) {
        for format in [Format::JsonLines, Format::Csv] {
            let mut buf = Vec::new();
            vs.write(&mut buf, format).unwrap();
            let back = VoteSet::parse(buf.as_slice(), format).unwrap();
            prop_assert_eq!(back.votes(), vs.votes());
        }
    }

    #[test]
    fn strata_members_satisfy_their_selector(vs in arb_voteset(), dim in 0..6usize) {
        let dims = [Dimension::Global, Dimension::Language, Dimension::Family, Dimension::Task,
            Dimension::FamilyXTask, Dimension::LanguageXTask];
        for s in stratify(&vs, &dims[dim], 1) {
            for id in &s.member_ids {
                prop_assert!(s.key.matches(vs.get(*id).unwrap(), FamilyMap::shipped()));
            }
        }
    }

    #[test]
    fn family_counts_sum_language_counts(vs in arb_voteset()) {
        let fams = FamilyMap::shipped();
        let langs = stratify(&vs, &Dimension::Language, 1);
        for f in stratify(&vs, &Dimension::Family, 1) {
            let total: usize = langs
                .iter()
                .filter(|l| fams.family(&l.key.values[0]) == f.key.values[0])
                .map(|l| l.member_ids.len())
                .sum();
            prop_assert_eq!(total, f.member_ids.len());
        }
    }

    #[test]
    fn likelihood_is_translation_invariant(
        scores in prop::collection::vec(-3.0..3.0f64, 5),
        weights in prop::collection::vec(0.0..5.0f64, 20),
        shift in -50.0..50.0f64,
    ) {
        let mut entries = Vec::new();
        let mut k = 0;
        for a in MODELS {
            for b in MODELS {
                if a != b {
                    entries.push((a, b, weights[k]));
                    k += 1;
                }
            }
        }
        let pw = PairWeights::from_weights(entries).unwrap();
        let theta: BTreeMap<String, f64> = MODELS.iter().zip(&scores).map(|(m, &t)| (m.to_string(), t)).collect();
        let shifted: BTreeMap<String, f64> = theta.iter().map(|(m, t)| (m.clone(), t + shift)).collect();
        let (l0, l1) = (log_likelihood(&theta, &pw).unwrap(), log_likelihood(&shifted, &pw).unwrap());
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0.abs()));
        let g = log_likelihood_gradient(&theta, &pw).unwrap();
        prop_assert!(g.values().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn two_model_fit_is_monotone_in_win_ratio(w12 in 0.5..50.0f64, w21 in 0.5..50.0f64, bump in 0.1..10.0f64) {
        let fit = |a: f64, b: f64| {
            let pw = PairWeights::from_weights([("x", "y", a), ("y", "x", b)]).unwrap();
            let r = fit_bt(&pw, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            r.scores["x"] - r.scores["y"]
        };
        prop_assert!(fit(w12 + bump, w21) > fit(w12, w21));
    }

    #[test]
    fn fitted_rankings_round_trip_through_elo(
        outcomes in prop::collection::vec((0..4usize, 1..4usize, any::<bool>()), 8..60),
    ) {
        let votes: Vec<Vote> = outcomes
            .iter()
            .enumerate()
            .map(|(id, &(a, off, aw))| Vote {
                id,
                outcome: if aw { Outcome::AWins } else { Outcome::BWins },
                ..decisive(MODELS[a], MODELS[(a + off) % 4])
            })
            .collect();
        let r = fit_bt(&compute_weights(&votes, 0.5).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for a in r.scores.keys() {
            for b in r.scores.keys().filter(|b| *b != a) {
                let direct = win_prob(&r, a, b).unwrap();
                prop_assert!((direct - elo_win_prob(r.elo[a] - r.elo[b])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cover_matches_score_margin(tw in -4.0..4.0f64, tl in -4.0..4.0f64, lambda in 0.01..0.99f64) {
        let r = BtRanking::from_scores([("w".to_string(), tw), ("l".to_string(), tl)]);
        let err = ranking_error(&r, &decisive("w", "l")).unwrap();
        let margin = tw - tl;
        let threshold = ((1.0 - lambda) / lambda).ln();
        // the two forms agree away from floating-point noise at the boundary
        prop_assume!((margin - threshold).abs() > 1e-9);
        prop_assert_eq!(covers(err, lambda), margin >= threshold);
    }

    #[test]
    fn coverage_monotone_in_lambda_and_selection(em in arb_matrix(), l1 in 0.0..1.0f64, l2 in 0.0..1.0f64) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let all: Vec<usize> = (0..em.n_models()).collect();
        for k in 0..=all.len() {
            let sel = &all[..k];
            prop_assert!(coverage_fraction(&em, sel, lo) <= coverage_fraction(&em, sel, hi));
            if k > 0 {
                prop_assert!(coverage_fraction(&em, &all[..k - 1], lo) <= coverage_fraction(&em, sel, lo));
            }
        }
    }

    #[test]
    fn coverage_gain_is_diminishing(em in arb_matrix(), lambda in 0.0..1.0f64) {
        let m = em.n_models();
        let x = m - 1;
        for t in 0..x {
            for s in 0..=t {
                let small: Vec<usize> = (0..s).collect();
                let big: Vec<usize> = (0..t).collect();
                let gain = |set: &[usize]| {
                    let mut with = set.to_vec();
                    with.push(x);
                    coverage_fraction(&em, &with, lambda) - coverage_fraction(&em, set, lambda)
                };
                prop_assert!(gain(&small) + 1e-12 >= gain(&big));
            }
        }
    }

    #[test]
    fn matrix_formats_round_trip(em in arb_matrix()) {
        let mut bin = Vec::new();
        em.write_binary(&mut bin).unwrap();
        let back = ErrorMatrix::read_binary(bin.as_slice()).unwrap();
        for i in 0..em.n_items() {
            for j in 0..em.n_models() {
                let (a, b) = (em.value(i, j), back.value(i, j));
                prop_assert!((a.is_nan() && b.is_nan()) || (a as f32) as f64 == b);
            }
        }
        let mut text = Vec::new();
        em.write_csv(&mut text).unwrap();
        prop_assert_eq!(ErrorMatrix::read_csv(text.as_slice()).unwrap(), em);
    }

    #[test]
    fn selectors_are_feasible_and_ordered((cs, nu) in arb_cover_instance()) {
        let g = match greedy_select(&cs, nu) {
            Ok(g) => g,
            Err(covrank::Error::Infeasible { max_nu, .. }) => {
                prop_assert!(max_nu < nu);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let need = coverage_target(nu, cs.n_items);
        let e = exact_select(&cs, nu, DEFAULT_EXACT_BUDGET).unwrap();
        let lp = lp_relax_and_round(&cs, nu).unwrap();
        for r in [&g, &e, &lp] {
            prop_assert!(r.portfolio.nu_achieved * cs.n_items as f64 + 1e-9 >= need as f64);
            prop_assert!(coverage_of(&cs, &r.portfolio.model_ids) >= nu - 1e-9);
        }
        prop_assert!(e.optimal);
        prop_assert!(e.k() <= g.k());
        prop_assert!(lp.certificate.unwrap() <= e.k() as f64 + 1e-7);
        prop_assert!(e.k() <= lp.k());
        prop_assert_eq!(greedy_select(&cs, nu).unwrap(), g);
    }

    #[test]
    fn cover_sets_agree_with_coverage_fraction(em in arb_matrix(), lambda in 0.0..1.0f64) {
        let cs = build_cover_sets(&em, lambda).unwrap();
        for j in 0..em.n_models() {
            let frac = cs.sets[j].len() as f64 / em.n_items() as f64;
            prop_assert!((frac - coverage_fraction(&em, &[j], lambda)).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_normalizes_and_satisfaction_is_monotone(
        rankings in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 5), 1..5),
        which in 0..5usize,
        raise in 0.01..3.0f64,
    ) {
        let rs: Vec<(String, BtRanking)> =
            rankings.iter().enumerate().map(|(k, s)| (format!("r{k}"), ranking(s))).collect();
        let v = decisive("alpha", "beta");
        let post = ranking_posterior(&rs, &v).unwrap();
        prop_assert!((post.weights.values().sum::<f64>() - 1.0).abs() < 1e-9);
        for llm in &MODELS[2..] {
            let q = llm_satisfaction(&rs, &post, &v, llm, MissingScore::Half).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
            let k = which % rs.len();
            let mut up = rs.clone();
            let mut scores = up[k].1.scores.clone();
            *scores.get_mut(*llm).unwrap() += raise;
            up[k].1 = BtRanking::from_scores(scores);
            // the posterior over rankings depends only on alpha and beta, which keep their gap
            let q_up = llm_satisfaction(&up, &post, &v, llm, MissingScore::Half).unwrap();
            prop_assert!(q_up + 1e-12 >= q);
        }
    }

    #[test]
    fn cancellation_is_bounded_and_orientation_free(vs in arb_voteset()) {
        let Ok(rate) = cancellation_rate(vs.votes()) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&rate));
        let swapped: Vec<Vote> = vs
            .votes()
            .iter()
            .rev()
            .map(|v| Vote {
                model_a: v.model_b.clone(),
                model_b: v.model_a.clone(),
                outcome: match v.outcome {
                    Outcome::AWins => Outcome::BWins,
                    Outcome::BWins => Outcome::AWins,
                    o => o,
                },
                ..v.clone()
            })
            .collect();
        prop_assert_eq!(cancellation_rate(&swapped).unwrap(), rate);
    }

    #[test]
    fn spread_ignores_shift(scores in prop::collection::vec(-3.0..3.0f64, 2..5), shift in -10.0..10.0f64) {
        let a = score_spread(&ranking(&scores)).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert!((a - score_spread(&ranking(&shifted)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn eo_gap_bounded_and_label_free(
        rows in prop::collection::vec((0.0..1.0f64, 0..2u8, 0..3usize), 1..60),
    ) {
        let preds: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let names = ["a", "b", "c"];
        let groups: Vec<String> = rows.iter().map(|r| names[r.2].to_string()).collect();
        let renamed: Vec<String> = rows.iter().map(|r| format!("g{}", 2 - r.2)).collect();
        let gap = eo_gap(&preds, &labels, &groups, 0.5);
        prop_assert!((0.0..=2.0).contains(&gap));
        prop_assert_eq!(gap, eo_gap(&preds, &labels, &renamed, 0.5));
    }
}

/// Independent re-count of the items covered by the named candidates.
fn coverage_of(cs: &CoverSets, ids: &[String]) -> f64 {
    let covered: BTreeSet<usize> = ids
        .iter()
        .flat_map(|id| cs.sets[cs.candidate_ids.iter().position(|c| c == id).unwrap()].iter().copied())
        .collect();
    covered.len() as f64 / cs.n_items as f64
}
