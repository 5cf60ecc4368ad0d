//! Vote pipeline: fit, coverage, select, llm-portfolio.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use covrank::bt::{compute_weights, fit_bt_with, BtRanking, FitOptions, RankingExport};
use covrank::coverage::{coverage_curve, stream_error_matrix, ErrorMatrix};
use covrank::diagnostics::{confidence_threshold_fraction, stratum_diagnostics, winprob_density};
use covrank::extrapolate::{ensemble_models, llm_error_matrix, ordering_table, LlmOrderingRow};
use covrank::select::{
    build_cover_sets, exact_select, greedy_max_coverage, greedy_order, greedy_select, lp_relax_and_round,
    phase2_min_mse, CoverSets, SelectionExport, SelectionResult,
};
use covrank::votes::{stratify_with, FamilyMap, Format, StratumKey, Vote, VoteSet};
use covrank::Error;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{create, fresh_dir, lambda_stem, num, read_json, write_json, Table};

pub fn load_votes(cfg: &RunConfig) -> Result<VoteSet> {
    let path = cfg.votes_path()?;
    let format = match cfg.input.format.as_deref() {
        Some("csv") => Format::Csv,
        Some("jsonl") | Some("json") => Format::JsonLines,
        Some(other) => return Err(Error::Validation(format!("unknown vote format `{other}`")).into()),
        None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => Format::Csv,
        None => Format::JsonLines,
    };
    let f = File::open(path).with_context(|| format!("opening votes {}", path.display()))?;
    let vs = VoteSet::parse(BufReader::new(f), format).with_context(|| format!("reading votes {}", path.display()))?;
    info!("{} votes over {} models", vs.len(), vs.models().len());
    Ok(vs)
}

fn families(cfg: &RunConfig) -> Result<FamilyMap> {
    match &cfg.input.families {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(FamilyMap::from_csv(BufReader::new(f))?)
        }
        None => Ok(FamilyMap::shipped().clone()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    stratum: StratumKey,
    file: String,
    n_votes: usize,
}

fn rankings_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("rankings")
}

fn matrix_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("coverage").join("error_matrix.bin")
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let vs = load_votes(cfg)?;
    let fams = families(cfg)?;
    let opts = FitOptions { tol: cfg.fit.tol, max_iter: cfg.fit.max_iter, theta_max: cfg.fit.theta_max };
    let fit = |votes: Vec<&Vote>| -> covrank::Result<(BtRanking, usize)> {
        let pw = compute_weights(votes, cfg.fit.tie_weight)?;
        Ok((fit_bt_with(&pw, opts)?, pw.n_votes()))
    };

    let dims = cfg.fit.dimensions()?;
    let mut jobs: Vec<(StratumKey, Vec<&Vote>)> = vec![(StratumKey::global(), vs.included().collect())];
    for dim in &dims {
        let strata = stratify_with(&vs, dim, cfg.fit.min_votes, &fams);
        if strata.is_empty() {
            warn!("no `{dim}` stratum has {} votes", cfg.fit.min_votes);
        }
        jobs.extend(strata.into_iter().map(|s| (s.key, s.member_ids.iter().filter_map(|&id| vs.get(id)).collect())));
    }
    let fitted: Vec<_> = jobs.into_par_iter().map(|(key, votes)| (key, fit(votes))).collect();

    let dir = rankings_dir(cfg);
    fresh_dir(&dir)?;
    let mut index = Vec::new();
    let mut stems = BTreeSet::new();
    for (key, res) in fitted {
        let (r, n_votes) = match res {
            Ok(x) => x,
            Err(e) if key != StratumKey::global() => {
                warn!("skipping {key}: {e}");
                continue;
            }
            Err(e) => return Err(anyhow::Error::from(e).context("fitting the global ranking")),
        };
        if !r.fit.converged {
            warn!("{key}: fit stopped after {} iterations (gradient {:.2e})", r.fit.iterations, r.fit.final_grad_norm);
        }
        let mut stem = key.file_stem();
        let mut n = 1;
        while !stems.insert(stem.clone()) {
            n += 1;
            stem = format!("{}-{n}", key.file_stem());
        }
        let file = format!("{stem}.json");
        write_json(&dir.join(&file), &RankingExport::new(key.clone(), &r, n_votes))?;
        index.push(IndexEntry { stratum: key, file, n_votes });
    }
    if index.len() == 1 && !dims.is_empty() {
        warn!("no eligible strata; only the global ranking was written");
    }
    info!("wrote {} rankings", index.len());
    write_json(&dir.join("index.json"), &index)
}

/// Rankings written by `fit`, global first, keyed by their stratum string.
pub fn load_rankings(cfg: &RunConfig) -> Result<Vec<(StratumKey, BtRanking)>> {
    let dir = rankings_dir(cfg);
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::Validation(format!("no rankings under {}; run `fit` first", dir.display())).into());
    }
    let index: Vec<IndexEntry> = read_json(&index_path)?;
    index
        .into_iter()
        .map(|e| {
            let r: RankingExport = read_json(&dir.join(&e.file))?;
            Ok((e.stratum, r.ranking()))
        })
        .collect()
}

fn named(rankings: &[(StratumKey, BtRanking)]) -> Vec<(String, BtRanking)> {
    rankings.iter().map(|(k, r)| (k.to_string(), r.clone())).collect()
}

pub fn load_matrix(path: &Path) -> Result<ErrorMatrix> {
    if !path.exists() {
        return Err(Error::Validation(format!("no error matrix at {}; run `coverage` first", path.display())).into());
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ErrorMatrix::read_binary(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Share of the decisive votes a ranking scores whose pair never met inside
/// the ranking's own stratum; those errors rest on the fitted order alone.
fn uncompared_fraction(r: &BtRanking, slice: &[&Vote], votes: &[&Vote]) -> f64 {
    let pair = |v: &Vote| {
        let (a, b) = (v.model_a.as_str(), v.model_b.as_str());
        if a < b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    };
    let seen: BTreeSet<(String, String)> = slice.iter().map(|v| pair(v)).collect();
    let scored: Vec<&&Vote> = votes.iter().filter(|v| r.contains(&v.model_a) && r.contains(&v.model_b)).collect();
    if scored.is_empty() {
        return f64::NAN;
    }
    scored.iter().filter(|v| !seen.contains(&pair(v))).count() as f64 / scored.len() as f64
}

pub fn cmd_coverage(cfg: &RunConfig) -> Result<()> {
    let vs = load_votes(cfg)?;
    let fams = families(cfg)?;
    let rankings = load_rankings(cfg)?;
    let ranked = named(&rankings);
    let votes: Vec<&Vote> = vs.decisive().collect();
    if votes.is_empty() {
        return Err(Error::Empty("no decisive votes".into()).into());
    }

    let dir = cfg.out.join("coverage");
    fresh_dir(&dir)?;
    let path = matrix_path(cfg);
    if cfg.coverage.stream {
        let mut w = create(&path)?;
        stream_error_matrix(&ranked, &votes, &mut w, cfg.coverage.chunk_rows)?;
        std::io::Write::flush(&mut w)?;
    } else {
        let em = covrank::build_error_matrix(&ranked, &votes)?;
        let mut w = create(&path)?;
        em.write_binary(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    // downstream numbers always come from the stored matrix
    let em = load_matrix(&path)?;
    if cfg.coverage.csv {
        let mut w = create(&dir.join("error_matrix.csv"))?;
        em.write_csv(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }

    let slices: Vec<Vec<&Vote>> =
        rankings.par_iter().map(|(key, _)| vs.included().filter(|v| key.matches(v, &fams)).collect()).collect();
    let rows: Vec<Vec<String>> = rankings
        .par_iter()
        .zip(&slices)
        .map(|((key, r), slice)| {
            let d = stratum_diagnostics(key, r, slice.iter().copied())?;
            let conf = confidence_threshold_fraction(r, slice.iter().copied(), cfg.coverage.confidence);
            let uncompared = uncompared_fraction(r, slice, &votes);
            Ok(vec![
                key.to_string(),
                d.n_votes.to_string(),
                num(d.spread_elo),
                num(d.mean_winner_prob),
                num(d.mean_log_loss),
                num(d.cancellation_rate),
                num(conf),
                num(uncompared),
            ])
        })
        .collect::<covrank::Result<_>>()?;
    let mut t = Table::create(
        &dir.join("diagnostics.csv"),
        &[
            "stratum",
            "n_votes",
            "spread_elo",
            "mean_winner_prob",
            "mean_log_loss",
            "cancellation_rate",
            "confident_fraction",
            "uncompared_fraction",
        ],
    )?;
    for r in &rows {
        t.row(r)?;
    }
    t.finish()?;

    let density_in: Vec<_> = rankings.iter().zip(&slices).map(|((k, r), s)| (k.clone(), r, s.clone())).collect();
    let density = winprob_density(&density_in, cfg.coverage.density_bins)?;
    let mut t = Table::create(&dir.join("winprob_density.csv"), &["dimension", "bin_lo", "bin_hi", "count"])?;
    for (dim, h) in &density {
        for (k, c) in h.counts.iter().enumerate() {
            t.row(&[dim.clone(), num(h.edges[k]), num(h.edges[k + 1]), c.to_string()])?;
        }
    }
    t.finish()?;

    let lambdas = &cfg.coverage.lambdas;
    let mut t = Table::create(&dir.join("coverage_curve.csv"), &["ranking", "lambda", "coverage"])?;
    for j in 0..em.n_models() {
        for (l, c) in coverage_curve(&em, &[j], lambdas)? {
            t.row(&[em.model_ids()[j].clone(), num(l), num(c)])?;
        }
    }
    let all: Vec<usize> = (0..em.n_models()).collect();
    let ensemble = coverage_curve(&em, &all, lambdas)?;
    for &(l, c) in &ensemble {
        t.row(&["ensemble".to_string(), num(l), num(c)])?;
    }
    t.finish()?;

    #[derive(Serialize)]
    struct Summary {
        n_items: usize,
        n_rankings: usize,
        n_models: usize,
        rankings: Vec<String>,
        ensemble_coverage: Vec<(f64, f64)>,
    }
    write_json(
        &dir.join("summary.json"),
        &Summary {
            n_items: em.n_items(),
            n_rankings: em.n_models(),
            n_models: ensemble_models(&ranked).len(),
            rankings: em.model_ids().to_vec(),
            ensemble_coverage: ensemble,
        },
    )
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum SelectRecord {
    Ok(SelectionExport),
    Infeasible { method: String, lambda: f64, nu: f64, reason: String, max_nu: f64 },
    Skipped { method: String, lambda: f64, nu: f64, reason: String },
}

impl SelectRecord {
    fn from_result(method: &str, lambda: f64, nu: f64, r: covrank::Result<SelectionResult>) -> covrank::Result<Self> {
        match r {
            Ok(r) => Ok(SelectRecord::Ok(SelectionExport::from(&r))),
            Err(Error::Infeasible { reason, max_nu }) => {
                Ok(SelectRecord::Infeasible { method: method.into(), lambda, nu, reason, max_nu })
            }
            Err(e) => Err(e),
        }
    }

    fn csv_row(&self) -> Vec<String> {
        match self {
            SelectRecord::Ok(e) => vec![
                num(e.lambda),
                "ok".into(),
                e.k.to_string(),
                num(e.nu_achieved),
                num(e.objective),
                e.certificate.map_or(String::new(), num),
                e.optimal.to_string(),
                e.selected.join(";"),
            ],
            SelectRecord::Infeasible { lambda, max_nu, .. } => {
                vec![
                    num(*lambda),
                    "infeasible".into(),
                    String::new(),
                    num(*max_nu),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]
            }
            SelectRecord::Skipped { lambda, .. } => {
                vec![
                    num(*lambda),
                    "skipped".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]
            }
        }
    }
}

fn lp_allowed(cs: &CoverSets, cfg: &RunConfig) -> Option<String> {
    let p = cs.n_patterns();
    (p > cfg.select.lp_max_patterns)
        .then(|| format!("{p} distinct cover patterns exceed select.lp_max_patterns = {}", cfg.select.lp_max_patterns))
}

fn select_at(em: &ErrorMatrix, lambda: f64, cfg: &RunConfig) -> covrank::Result<Vec<(String, SelectRecord)>> {
    let nu = cfg.select.nu;
    let cs = build_cover_sets(em, lambda)?;
    let greedy = greedy_select(&cs, nu);
    let mut lp: Option<covrank::Result<SelectionResult>> = None;
    let mut out = Vec::new();
    for m in &cfg.select.methods {
        let rec = match m.as_str() {
            "greedy" => SelectRecord::from_result(m, lambda, nu, greedy.clone_ok())?,
            "exact" => SelectRecord::from_result(m, lambda, nu, exact_select(&cs, nu, cfg.select.exact_budget))?,
            "lp" => match lp_allowed(&cs, cfg) {
                Some(reason) => SelectRecord::Skipped { method: m.clone(), lambda, nu, reason },
                None => {
                    let r = lp.get_or_insert_with(|| lp_relax_and_round(&cs, nu));
                    SelectRecord::from_result(m, lambda, nu, r.clone_ok())?
                }
            },
            "phase2" => {
                let base = match (&lp, &greedy) {
                    (Some(Ok(r)), _) | (_, Ok(r)) => Some(r),
                    _ => None,
                };
                match base {
                    Some(b) => {
                        let ids: Vec<&str> = b.portfolio.model_ids.iter().map(String::as_str).collect();
                        let start = em.indices_of(&ids)?;
                        let r = phase2_min_mse(em, lambda, nu, b.k(), Some(&start), cfg.seed);
                        SelectRecord::from_result(m, lambda, nu, r)?
                    }
                    None => SelectRecord::from_result(m, lambda, nu, greedy.clone_ok())?,
                }
            }
            other => return Err(Error::Validation(format!("unknown selection method `{other}`"))),
        };
        out.push((m.clone(), rec));
    }
    Ok(out)
}

trait CloneOk {
    fn clone_ok(&self) -> covrank::Result<SelectionResult>;
}

impl CloneOk for covrank::Result<SelectionResult> {
    /// Clones the result; errors are rebuilt since `Error` is not `Clone`.
    fn clone_ok(&self) -> covrank::Result<SelectionResult> {
        match self {
            Ok(r) => Ok(r.clone()),
            Err(Error::Infeasible { reason, max_nu }) => {
                Err(Error::Infeasible { reason: reason.clone(), max_nu: *max_nu })
            }
            Err(e) => Err(Error::Validation(e.to_string())),
        }
    }
}

/// Greedy portfolio at `lambda`, or the maximum-coverage greedy picks when
/// the target is out of reach.
fn greedy_or_best(cs: &CoverSets, nu: f64) -> covrank::Result<Vec<usize>> {
    match greedy_select(cs, nu) {
        Ok(r) => Ok(picks_of(cs, &r)),
        Err(Error::Infeasible { .. }) => {
            warn!("ν = {nu} is out of reach at λ = {}; using the maximum-coverage picks", cs.lambda);
            Ok(greedy_max_coverage(cs))
        }
        Err(e) => Err(e),
    }
}

fn picks_of(cs: &CoverSets, r: &SelectionResult) -> Vec<usize> {
    r.portfolio
        .model_ids
        .iter()
        .map(|id| cs.candidate_ids.iter().position(|c| c == id).expect("selected ids come from the candidates"))
        .collect()
}

pub fn cmd_select(cfg: &RunConfig) -> Result<()> {
    let em = load_matrix(&matrix_path(cfg))?;
    let dir = cfg.out.join("select");
    fresh_dir(&dir)?;
    let per_lambda: Vec<Vec<(String, SelectRecord)>> =
        cfg.coverage.lambdas.par_iter().map(|&l| select_at(&em, l, cfg)).collect::<covrank::Result<_>>()?;

    let mut any_ok = false;
    let mut any_infeasible = false;
    for m in &cfg.select.methods {
        let mut t = Table::create(
            &dir.join(format!("{m}.csv")),
            &["lambda", "status", "k", "nu_achieved", "objective", "certificate", "optimal", "selected"],
        )?;
        for (l, recs) in cfg.coverage.lambdas.iter().zip(&per_lambda) {
            let rec = &recs.iter().find(|(name, _)| name == m).expect("one record per method").1;
            any_ok |= matches!(rec, SelectRecord::Ok(_));
            any_infeasible |= matches!(rec, SelectRecord::Infeasible { .. });
            write_json(&dir.join(m).join(format!("{}.json", lambda_stem(*l))), rec)?;
            t.row(&rec.csv_row())?;
        }
        t.finish()?;
    }

    // global vs the greedy portfolio chosen at curve_lambda, across the grid
    let cs = build_cover_sets(&em, cfg.select.curve_lambda)?;
    let picks = greedy_or_best(&cs, cfg.select.nu)?;
    let portfolio = coverage_curve(&em, &picks, &cfg.coverage.lambdas)?;
    let global = em.model_index("global").map(|g| coverage_curve(&em, &[g], &cfg.coverage.lambdas)).transpose()?;
    let mut t = Table::create(&dir.join("coverage_vs_lambda.csv"), &["lambda", "global", "portfolio"])?;
    for (i, &(l, c)) in portfolio.iter().enumerate() {
        let g = global.as_ref().map_or("NA".to_string(), |g| num(g[i].1));
        t.row(&[num(l), g, num(c)])?;
    }
    t.finish()?;
    let ids: Vec<&String> = picks.iter().map(|&j| &cs.candidate_ids[j]).collect();
    write_json(&dir.join("curve_portfolio.json"), &ids)?;

    if !any_ok && any_infeasible {
        return Err(Error::Infeasible {
            reason: format!("no portfolio reaches ν = {} at any λ", cfg.select.nu),
            max_nu: f64::NAN,
        }
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct OrderingExport<'a> {
    source: &'a str,
    rankings: Vec<String>,
    ranking_lambda: f64,
    eval_lambda: f64,
    rows: &'a [LlmOrderingRow],
}

pub fn cmd_llm_portfolio(cfg: &RunConfig) -> Result<()> {
    let vs = load_votes(cfg)?;
    let rankings = named(&load_rankings(cfg)?);
    let em = load_matrix(&matrix_path(cfg))?;
    let votes: Vec<&Vote> = vs.decisive().collect();
    let llms = ensemble_models(&rankings);
    let lc = &cfg.llm;
    let dir = cfg.out.join("llm");
    fresh_dir(&dir)?;

    let cs = build_cover_sets(&em, lc.ranking_lambda)?;
    let mut sources: Vec<(&str, Vec<usize>)> = vec![("greedy", greedy_or_best(&cs, cfg.select.nu)?)];
    match lp_allowed(&cs, cfg) {
        Some(reason) => warn!("skipping the LP-derived ordering: {reason}"),
        None => {
            let picks = match lp_relax_and_round(&cs, cfg.select.nu) {
                Ok(r) => picks_of(&cs, &r),
                Err(Error::Infeasible { .. }) => greedy_max_coverage(&cs),
                Err(e) => return Err(e.into()),
            };
            sources.push(("lp", picks));
        }
    }

    let mut tables: Vec<(&str, Vec<String>, Vec<LlmOrderingRow>)> = Vec::new();
    for (source, picks) in sources {
        let sub: Vec<(String, BtRanking)> = picks
            .iter()
            .map(|&j| {
                let id = &cs.candidate_ids[j];
                rankings.iter().find(|(k, _)| k == id).cloned().ok_or_else(|| Error::UnknownModel(id.clone()))
            })
            .collect::<covrank::Result<_>>()?;
        let llm_em = llm_error_matrix(&sub, &votes, &llms, lc.missing)?;
        let order = greedy_order(&build_cover_sets(&llm_em, lc.eval_lambda)?, lc.k);
        let ids = sub.into_iter().map(|(k, _)| k).collect();
        tables.push((source, ids, ordering_table(&llm_em, &order, lc.eval_lambda)));
    }

    let global = rankings
        .iter()
        .find(|(k, _)| k == "global")
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Validation("no global ranking".into()))?;
    let full = llm_error_matrix(&rankings, &votes, &llms, lc.missing)?;
    let mut by_elo: Vec<(&String, f64)> = global.elo.iter().map(|(m, &e)| (m, e)).collect();
    by_elo.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let order: Vec<usize> = by_elo.iter().take(lc.k).filter_map(|(m, _)| full.model_index(m)).collect();
    tables.push((
        "global",
        rankings.iter().map(|(k, _)| k.clone()).collect(),
        ordering_table(&full, &order, lc.eval_lambda),
    ));

    let mut t = Table::create(&dir.join("orderings.csv"), &["source", "rank", "llm", "coverage"])?;
    for (source, ids, rows) in &tables {
        for r in rows {
            t.row(&[source.to_string(), r.rank.to_string(), r.llm.clone(), num(r.coverage)])?;
        }
        write_json(
            &dir.join(format!("{source}.json")),
            &OrderingExport {
                source,
                rankings: ids.clone(),
                ranking_lambda: lc.ranking_lambda,
                eval_lambda: lc.eval_lambda,
                rows,
            },
        )?;
    }
    t.finish()
}
