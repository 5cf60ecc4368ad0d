//! Tabular pipeline: fairness-regularized ensemble, coverage, uncovered
//! profiles and false positive rates.

use std::fs::File;
use std::io::{BufReader, Write};

use anyhow::{Context, Result};
use covrank::coverage::coverage_fraction;
use covrank::fairness::{
    build_ensemble_with, classifier_error_matrix, fpr_report, portfolio_predictions, uncovered_profile, CellSpec,
    ClassifierModel, TabularDataset, TrainOptions,
};
use covrank::select::{build_cover_sets, greedy_max_coverage, greedy_select};
use covrank::{Error, ErrorMatrix};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{create, fresh_dir, lambda_stem, num, write_json, Table};

/// Greedy (λ, ν) picks, or the maximum-coverage picks when ν is out of reach.
fn portfolio_at(em: &ErrorMatrix, lambda: f64, nu: f64) -> covrank::Result<(Vec<usize>, bool)> {
    let cs = build_cover_sets(em, lambda)?;
    match greedy_select(&cs, nu) {
        Ok(r) => {
            let ids: Vec<&str> = r.portfolio.model_ids.iter().map(String::as_str).collect();
            Ok((em.indices_of(&ids)?, true))
        }
        Err(Error::Infeasible { .. }) => Ok((greedy_max_coverage(&cs), false)),
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    id: &'a str,
    iterations: usize,
    converged: bool,
    final_bce: f64,
    eo_gaps: &'a std::collections::BTreeMap<String, f64>,
}

pub fn cmd_compas(cfg: &RunConfig) -> Result<()> {
    let cc = &cfg.compas;
    let path =
        cc.data.as_deref().ok_or_else(|| Error::Validation("no tabular data given (compas.data or --data)".into()))?;
    let mut schema = cc.schema.clone();
    for g in &cc.groupings {
        if !schema.groups.contains(g) {
            schema.groups.push(g.clone());
        }
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ds =
        TabularDataset::from_csv(BufReader::new(f), &schema).with_context(|| format!("reading {}", path.display()))?;
    info!("{} rows, {} features", ds.len(), ds.n_features());

    let opts = TrainOptions { max_iter: cc.max_iter, threshold: cc.threshold, ..TrainOptions::default() };
    let models = build_ensemble_with(&ds, &cc.mu_grid, &cc.groupings, cfg.seed, &opts)?;
    let n_unconverged = models.iter().filter(|m| !m.report.converged).count();
    if n_unconverged > 0 {
        warn!("{n_unconverged} of {} models hit max_iter", models.len());
    }
    let em = classifier_error_matrix(&models, &ds)?;

    let dir = cfg.out.join("compas");
    fresh_dir(&dir)?;
    write_json(&dir.join("models.json"), &models)?;
    write_json(&dir.join("preprocessing.json"), &ds.preprocessing)?;
    let summaries: Vec<ModelSummary> = models
        .iter()
        .map(|m| ModelSummary {
            id: &m.id,
            iterations: m.report.iterations,
            converged: m.report.converged,
            final_bce: m.report.final_bce,
            eo_gaps: &m.report.eo_gaps,
        })
        .collect();
    write_json(&dir.join("training.json"), &summaries)?;
    let mut w = create(&dir.join("error_matrix.bin"))?;
    em.write_binary(&mut w)?;
    w.flush()?;

    let all: Vec<usize> = (0..em.n_models()).collect();
    let mut t = Table::create(
        &dir.join("coverage_by_lambda.csv"),
        &["lambda", "status", "k", "nu_achieved", "ensemble_coverage", "selected"],
    )?;
    for &l in &cc.lambdas {
        let cs = build_cover_sets(&em, l)?;
        let ens = num(coverage_fraction(&em, &all, l));
        match greedy_select(&cs, cc.nu) {
            Ok(r) => t.row(&[
                num(l),
                "ok".into(),
                r.k().to_string(),
                num(r.portfolio.nu_achieved),
                ens,
                r.portfolio.model_ids.join(";"),
            ])?,
            Err(Error::Infeasible { max_nu, .. }) => {
                t.row(&[num(l), "infeasible".into(), String::new(), num(max_nu), ens, String::new()])?
            }
            Err(e) => return Err(e.into()),
        }
    }
    t.finish()?;

    let cells = CellSpec { sex_column: cc.sex_column.clone(), race_column: cc.race_column.clone() };
    for &l in &cc.profile_lambdas {
        let (picks, reached) = portfolio_at(&em, l, cc.nu)?;
        if !reached {
            warn!("ν = {} is out of reach at λ = {l}; profiling the maximum-coverage portfolio", cc.nu);
        }
        let profile = uncovered_profile(&em, &picks, l, &ds, &cells)?;
        let stem = lambda_stem(l);

        let mut header = vec!["model"];
        header.extend(profile.assignment.cells.iter().map(String::as_str));
        let mut t = Table::create(&dir.join(format!("assignment_{stem}.csv")), &header)?;
        for row in &profile.assignment.rows {
            let mut fields = vec![row.model.clone()];
            fields.extend(row.counts.iter().map(usize::to_string));
            t.row(&fields)?;
        }
        t.finish()?;

        let mut header = vec!["row"];
        header.extend(ds.columns.iter().map(String::as_str));
        let mut t = Table::create(&dir.join(format!("uncovered_{stem}.csv")), &header)?;
        for &i in &profile.uncovered {
            let mut fields = vec![i.to_string()];
            fields.extend(ds.raw[i].iter().cloned());
            t.row(&fields)?;
        }
        t.finish()?;
        write_json(&dir.join(format!("profile_{stem}.json")), &profile)?;
    }

    write_fpr(cfg, &models, &em, &ds, &cells)
}

fn write_fpr(
    cfg: &RunConfig,
    models: &[ClassifierModel],
    em: &ErrorMatrix,
    ds: &TabularDataset,
    cells: &CellSpec,
) -> Result<()> {
    let cc = &cfg.compas;
    let mut rows = vec![fpr_report(&models[0].id, &models[0].predict(ds), ds, cells, cc.threshold)];
    for &l in &cc.fpr_lambdas {
        let (picks, reached) = portfolio_at(em, l, 1.0)?;
        if !reached {
            warn!("full coverage is out of reach at λ = {l}; using the maximum-coverage portfolio");
        }
        let preds = portfolio_predictions(models, &picks, ds);
        rows.push(fpr_report(&format!("λ={l:.2}"), &preds, ds, cells, cc.threshold));
    }
    let mut header = vec!["portfolio".to_string(), "overall".to_string()];
    header.extend(rows[0].cells.iter().map(|(c, _)| c.clone()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::create(&cfg.out.join("compas").join("fpr.csv"), &header)?;
    for r in &rows {
        let mut fields = vec![r.label.clone()];
        fields.extend(r.formatted());
        t.row(&fields)?;
    }
    t.finish()
}
