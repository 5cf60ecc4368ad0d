//! Logistic-regression ensembles with equalized-odds regularization, and the
//! coverage reports built on them.

use std::collections::BTreeMap;
use std::io::Read;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bt::{log_logistic, logistic};
use crate::coverage::ErrorMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 50.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const NO_MODEL: &str = "No model";

/// μ ∈ {10, 20, …, 300}.
pub fn default_mu_grid() -> Vec<f64> {
    (1..=30).map(|k| 10.0 * k as f64).collect()
}

pub fn default_groupings() -> Vec<String> {
    vec!["sex".into(), "race".into()]
}

/// Column roles for reading a tabular CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSchema {
    pub label: String,
    pub groups: Vec<String>,
    /// Feature columns; every non-label column when empty.
    pub features: Vec<String>,
    /// Columns treated as categorical even if they parse as numbers.
    pub categorical: Vec<String>,
    pub exclude: Vec<String>,
}

impl Default for TabularSchema {
    fn default() -> Self {
        Self {
            label: "two_year_recid".into(),
            groups: default_groupings(),
            features: Vec::new(),
            categorical: Vec::new(),
            exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericScaling {
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub imputed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoding {
    pub column: String,
    /// All levels, sorted; the first is the dropped reference level.
    pub levels: Vec<String>,
}

/// Record of how raw columns became model inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub label: String,
    pub numeric: Vec<NumericScaling>,
    pub categorical: Vec<CategoricalEncoding>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub feature_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub groups: BTreeMap<String, Vec<String>>,
    /// Original columns and values, kept for reporting.
    pub columns: Vec<String>,
    pub raw: Vec<Vec<String>>,
    pub preprocessing: Preprocessing,
}

impl TabularDataset {
    /// Dataset from already-numeric features.
    pub fn new(x: Vec<Vec<f64>>, y: Vec<u8>, groups: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let n = y.len();
        if x.len() != n || groups.values().any(|g| g.len() != n) {
            return Err(Error::validation("features, labels and groups differ in row count"));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::validation("labels must be 0 or 1"));
        }
        let d = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::validation("ragged feature rows"));
        }
        let feature_names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let columns: Vec<String> = feature_names.iter().cloned().chain(groups.keys().cloned()).collect();
        let raw = (0..n)
            .map(|i| x[i].iter().map(|v| v.to_string()).chain(groups.values().map(|g| g[i].clone())).collect())
            .collect();
        Ok(Self {
            preprocessing: Preprocessing { feature_names: feature_names.clone(), ..Default::default() },
            feature_names,
            x,
            y,
            groups,
            columns,
            raw,
        })
    }

    /// Reads a headered CSV, one-hot encodes categorical columns (dropping
    /// the first sorted level), mean-imputes and z-scores numeric columns.
    pub fn from_csv<R: Read>(source: R, schema: &TabularSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(source);
        let columns: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let col = |name: &str| {
            columns.iter().position(|c| c == name).ok_or_else(|| Error::validation(format!("missing column `{name}`")))
        };
        let label_col = col(&schema.label)?;
        let group_cols: Vec<(String, usize)> =
            schema.groups.iter().map(|g| col(g).map(|i| (g.clone(), i))).collect::<Result<_>>()?;
        let feature_cols: Vec<usize> = if schema.features.is_empty() {
            (0..columns.len()).filter(|&i| i != label_col && !schema.exclude.contains(&columns[i])).collect()
        } else {
            schema.features.iter().map(|f| col(f)).collect::<Result<_>>()?
        };

        let mut raw = Vec::new();
        let mut y = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let row: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
            if row.len() != columns.len() {
                return Err(Error::Parse { line, message: "wrong number of fields".into() });
            }
            y.push(
                parse_label(&row[label_col]).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("label `{}` is not binary", row[label_col]),
                })?,
            );
            raw.push(row);
        }
        if raw.is_empty() {
            return Err(Error::Empty("tabular dataset has no rows".into()));
        }

        let n = raw.len();
        let mut x = vec![Vec::new(); n];
        let mut prep = Preprocessing { label: schema.label.clone(), ..Default::default() };
        for &c in &feature_cols {
            let name = &columns[c];
            let values: Vec<&str> = raw.iter().map(|r| r[c].as_str()).collect();
            let numeric: Option<Vec<Option<f64>>> = (!schema.categorical.contains(name))
                .then(|| {
                    values
                        .iter()
                        .map(|v| if v.is_empty() { Some(None) } else { v.parse::<f64>().ok().map(Some) })
                        .collect()
                })
                .flatten();
            match numeric {
                Some(vals) if vals.iter().any(Option::is_some) => {
                    let present: Vec<f64> = vals.iter().flatten().copied().collect();
                    let mean = present.iter().sum::<f64>() / present.len() as f64;
                    let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / present.len() as f64;
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    for (row, v) in x.iter_mut().zip(&vals) {
                        row.push((v.unwrap_or(mean) - mean) / std);
                    }
                    prep.feature_names.push(name.clone());
                    prep.numeric.push(NumericScaling {
                        column: name.clone(),
                        mean,
                        std,
                        imputed: vals.iter().filter(|v| v.is_none()).count(),
                    });
                }
                _ => {
                    let mut levels: Vec<String> = values.iter().map(|s| s.to_string()).collect();
                    levels.sort();
                    levels.dedup();
                    for level in levels.iter().skip(1) {
                        for (row, v) in x.iter_mut().zip(&values) {
                            row.push(if v == level { 1.0 } else { 0.0 });
                        }
                        prep.feature_names.push(format!("{name}={level}"));
                    }
                    prep.categorical.push(CategoricalEncoding { column: name.clone(), levels });
                }
            }
        }
        let groups = group_cols.into_iter().map(|(g, c)| (g, raw.iter().map(|r| r[c].clone()).collect())).collect();
        Ok(Self { feature_names: prep.feature_names.clone(), x, y, groups, columns, raw, preprocessing: prep })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn raw_value(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.raw[row][c].as_str())
    }

    fn grouping(&self, name: &str) -> Result<&[String]> {
        self.groups.get(name).map(Vec::as_slice).ok_or_else(|| Error::validation(format!("unknown grouping `{name}`")))
    }
}

fn parse_label(s: &str) -> Option<u8> {
    match s.to_ascii_lowercase().as_str() {
        "0" | "0.0" | "false" | "no" => Some(0),
        "1" | "1.0" | "true" | "yes" => Some(1),
        _ => None,
    }
}

/// Hard equalized-odds gap: spread of TPR plus spread of FPR across groups.
pub fn eo_gap(preds: &[f64], labels: &[u8], groups: &[String], threshold: f64) -> f64 {
    let rates = group_rates(labels, groups, |i| if preds[i] >= threshold { 1.0 } else { 0.0 });
    let spread = |v: &[f64]| {
        if v.len() < 2 {
            0.0
        } else {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
        }
    };
    if rates.groups < 2 {
        warn!("equalized-odds gap over fewer than two groups is 0");
    }
    spread(&rates.tpr) + spread(&rates.fpr)
}

struct GroupRates {
    groups: usize,
    tpr: Vec<f64>,
    fpr: Vec<f64>,
}

fn group_rates(labels: &[u8], groups: &[String], value: impl Fn(usize) -> f64) -> GroupRates {
    let mut cells: BTreeMap<&str, [(f64, usize); 2]> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let e = &mut cells.entry(g.as_str()).or_default()[labels[i] as usize];
        e.0 += value(i);
        e.1 += 1;
    }
    let mut rates = GroupRates { groups: cells.len(), tpr: Vec::new(), fpr: Vec::new() };
    for (g, [neg, pos]) in &cells {
        if pos.1 == 0 || neg.1 == 0 {
            warn!("group `{g}` lacks positive or negative rows; skipping it in one rate term");
        }
        if pos.1 > 0 {
            rates.tpr.push(pos.0 / pos.1 as f64);
        }
        if neg.1 > 0 {
            rates.fpr.push(neg.0 / neg.1 as f64);
        }
    }
    rates
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    PlainBce,
    EoRegularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub mu: f64,
    pub grouping: Option<String>,
}

impl Objective {
    pub fn plain() -> Self {
        Self { kind: ObjectiveKind::PlainBce, mu: 0.0, grouping: None }
    }

    pub fn eo(grouping: &str, mu: f64) -> Self {
        Self { kind: ObjectiveKind::EoRegularized, mu, grouping: Some(grouping.to_string()) }
    }

    /// Display id such as `Global` or `Sex(110)`.
    pub fn model_id(&self) -> String {
        match (&self.kind, &self.grouping) {
            (ObjectiveKind::EoRegularized, Some(g)) => {
                let mut name: Vec<char> = g.chars().collect();
                if let Some(c) = name.first_mut() {
                    *c = c.to_ascii_uppercase();
                }
                format!("{}({})", name.into_iter().collect::<String>(), fmt_mu(self.mu))
            }
            _ => "Global".into(),
        }
    }
}

fn fmt_mu(mu: f64) -> String {
    if mu.fract() == 0.0 {
        format!("{mu:.0}")
    } else {
        mu.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient ∞-norm falls below this.
    pub tol: f64,
    /// Temperature of the smoothed max and min in the fairness surrogate.
    pub tau: f64,
    /// Box bound on every weight and the bias.
    pub weight_bound: f64,
    pub threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-6, tau: DEFAULT_TAU, weight_bound: 20.0, threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_bce: f64,
    /// Hard equalized-odds gap for every grouping in the dataset.
    pub eo_gaps: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub id: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective: Objective,
    pub report: TrainReport,
}

impl ClassifierModel {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        logistic(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    pub fn predict(&self, ds: &TabularDataset) -> Vec<f64> {
        ds.x.iter().map(|x| self.predict_one(x)).collect()
    }
}

struct Problem<'a> {
    ds: &'a TabularDataset,
    mu: f64,
    tau: f64,
    /// Per row: index into `cells` for the fairness term.
    cell_of: Vec<usize>,
    /// (group index, label) per cell with its size.
    cells: Vec<(usize, u8, usize)>,
    n_groups: usize,
}

impl<'a> Problem<'a> {
    fn new(ds: &'a TabularDataset, objective: &Objective, tau: f64) -> Result<Self> {
        let mut p = Self { ds, mu: 0.0, tau, cell_of: Vec::new(), cells: Vec::new(), n_groups: 0 };
        if objective.kind == ObjectiveKind::PlainBce || objective.mu == 0.0 {
            return Ok(p);
        }
        let grouping =
            objective.grouping.as_deref().ok_or_else(|| Error::validation("regularized objective needs a grouping"))?;
        let labels = ds.grouping(grouping)?;
        let names: BTreeMap<&str, usize> = {
            let mut set: Vec<&str> = labels.iter().map(String::as_str).collect();
            set.sort_unstable();
            set.dedup();
            set.into_iter().enumerate().map(|(i, g)| (g, i)).collect()
        };
        let mut index: BTreeMap<(usize, u8), usize> = BTreeMap::new();
        for (i, g) in labels.iter().enumerate() {
            let key = (names[g.as_str()], ds.y[i]);
            let next = index.len();
            let c = *index.entry(key).or_insert(next);
            if c == p.cells.len() {
                p.cells.push((key.0, key.1, 0));
            }
            p.cells[c].2 += 1;
            p.cell_of.push(c);
        }
        p.mu = objective.mu;
        p.n_groups = names.len();
        Ok(p)
    }

    /// Loss and gradient with respect to `[weights…, bias]`.
    fn eval(&self, params: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let ds = self.ds;
        let n = ds.len() as f64;
        let d = ds.n_features();
        let z: Vec<f64> =
            ds.x.iter().map(|x| params[d] + params[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect();
        let mut loss = 0.0;
        let mut dz = vec![0.0; z.len()];
        for (i, &zi) in z.iter().enumerate() {
            let y = ds.y[i] as f64;
            loss -= y * log_logistic(zi) + (1.0 - y) * log_logistic(-zi);
            dz[i] = (logistic(zi) - y) / n;
        }
        loss /= n;

        if self.mu > 0.0 {
            let h: Vec<f64> = z.iter().map(|&v| logistic(v)).collect();
            let mut sums = vec![0.0; self.cells.len()];
            for (i, &c) in self.cell_of.iter().enumerate() {
                sums[c] += h[i];
            }
            // per label: values over groups present in that label
            let mut cell_grad = vec![0.0; self.cells.len()];
            for label in [0u8, 1] {
                let members: Vec<usize> = (0..self.cells.len()).filter(|&c| self.cells[c].1 == label).collect();
                if members.len() < 2 {
                    continue;
                }
                let vals: Vec<f64> = members.iter().map(|&c| sums[c] / self.cells[c].2 as f64).collect();
                let (smax, wmax) = soft_extreme(&vals, self.tau);
                let (nmin, wmin) = soft_extreme(&vals.iter().map(|v| -v).collect::<Vec<_>>(), self.tau);
                loss += self.mu * (smax + nmin);
                for (k, &c) in members.iter().enumerate() {
                    cell_grad[c] = self.mu * (wmax[k] - wmin[k]) / self.cells[c].2 as f64;
                }
            }
            for (i, &c) in self.cell_of.iter().enumerate() {
                dz[i] += cell_grad[c] * h[i] * (1.0 - h[i]);
            }
        }

        let mut grad = vec![0.0; d + 1];
        if want_grad {
            for (x, g) in ds.x.iter().zip(&dz) {
                for (gj, xj) in grad.iter_mut().zip(x) {
                    *gj += g * xj;
                }
                grad[d] += g;
            }
        }
        (loss, grad)
    }
}

/// Log-sum-exp smooth maximum and its softmax weights.
fn soft_extreme(v: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (tau * (x - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln() / tau, e.iter().map(|x| x / s).collect())
}

pub fn train_classifier(ds: &TabularDataset, objective: &Objective, seed: u64) -> Result<ClassifierModel> {
    train_classifier_with(ds, objective, seed, &TrainOptions::default())
}

/// Projected gradient descent with Armijo backtracking on
/// `BCE + μ·EO_soft`. The penalty is omitted entirely when μ = 0.
pub fn train_classifier_with(
    ds: &TabularDataset,
    objective: &Objective,
    seed: u64,
    opts: &TrainOptions,
) -> Result<ClassifierModel> {
    if objective.mu.is_nan() || objective.mu < 0.0 {
        return Err(Error::validation(format!("μ = {} must be non-negative", objective.mu)));
    }
    if ds.is_empty() {
        return Err(Error::Empty("no training rows".into()));
    }
    let problem = Problem::new(ds, objective, opts.tau)?;
    let d = ds.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = opts.weight_bound;
    let project = |p: &mut Vec<f64>| p.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
    let mut params: Vec<f64> = (0..=d).map(|_| rng.random_range(-0.01..0.01)).collect();

    let (mut loss, mut grad) = problem.eval(&params, true);
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let pg = params.iter().zip(&grad).map(|(p, g)| (p - (p - g).clamp(-bound, bound)).abs()).fold(0.0, f64::max);
        if pg <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while step > 1e-14 {
            let mut cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            project(&mut cand);
            let decrease: f64 = params.iter().zip(&cand).zip(&grad).map(|((p, c), g)| g * (p - c)).sum();
            let (cl, _) = problem.eval(&cand, false);
            if cl <= loss - 1e-4 * decrease {
                params = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent possible within rounding; treat as stationary
            converged = true;
            break;
        }
        (loss, grad) = problem.eval(&params, true);
        step = (step * 2.0).min(1e3);
    }

    let bias = params.pop().unwrap_or(0.0);
    let mut model = ClassifierModel {
        id: objective.model_id(),
        weights: params,
        bias,
        objective: objective.clone(),
        report: TrainReport { iterations, converged, final_bce: 0.0, eo_gaps: BTreeMap::new() },
    };
    let preds = model.predict(ds);
    model.report.final_bce = bce(&preds, &ds.y);
    for (g, labels) in &ds.groups {
        model.report.eo_gaps.insert(g.clone(), eo_gap(&preds, &ds.y, labels, opts.threshold));
    }
    Ok(model)
}

fn bce(preds: &[f64], y: &[u8]) -> f64 {
    let eps = 1e-15;
    preds
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / preds.len().max(1) as f64
}

/// One plain model plus one regularized model per (grouping, μ), in that order.
pub fn build_ensemble(
    ds: &TabularDataset,
    mu_grid: &[f64],
    groupings: &[String],
    seed: u64,
) -> Result<Vec<ClassifierModel>> {
    build_ensemble_with(ds, mu_grid, groupings, seed, &TrainOptions::default())
}

pub fn build_ensemble_with(
    ds: &TabularDataset,
    mu_grid: &[f64],
    groupings: &[String],
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<ClassifierModel>> {
    let mut jobs = vec![Objective::plain()];
    for g in groupings {
        ds.grouping(g)?;
        jobs.extend(mu_grid.iter().map(|&mu| Objective::eo(g, mu)));
    }
    jobs.par_iter().map(|o| train_classifier_with(ds, o, seed, opts)).collect()
}

/// `err[i][j] = |h_j(x_i) − y_i|`.
pub fn classifier_error_matrix(models: &[ClassifierModel], ds: &TabularDataset) -> Result<ErrorMatrix> {
    let preds: Vec<Vec<f64>> = models.par_iter().map(|m| m.predict(ds)).collect();
    let mut err = Vec::with_capacity(ds.len() * models.len());
    for i in 0..ds.len() {
        for p in &preds {
            err.push((p[i] - ds.y[i] as f64).abs().clamp(0.0, 1.0));
        }
    }
    let items = (0..ds.len()).map(|i| i.to_string()).collect();
    ErrorMatrix::new(items, models.iter().map(|m| m.id.clone()).collect(), err)
}

/// Sex and race columns defining the reporting cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSpec {
    pub sex_column: String,
    pub race_column: String,
}

impl Default for CellSpec {
    fn default() -> Self {
        Self { sex_column: "sex".into(), race_column: "race".into() }
    }
}

const RACE_BUCKETS: [(&str, &str); 2] = [("african-american", "AA"), ("caucasian", "C")];

impl CellSpec {
    fn sex_code(v: &str) -> String {
        match v.to_ascii_lowercase().as_str() {
            "f" | "female" => "F".into(),
            "m" | "male" => "M".into(),
            _ => v.to_string(),
        }
    }

    fn race_code(v: &str) -> &'static str {
        let lower = v.to_ascii_lowercase();
        RACE_BUCKETS.iter().find(|(name, _)| *name == lower).map_or("O", |(_, code)| code)
    }

    /// Cell label such as `F-AA`, or `None` if the dataset lacks the columns.
    pub fn cell(&self, ds: &TabularDataset, row: usize) -> Option<String> {
        let sex = ds.raw_value(row, &self.sex_column)?;
        let race = ds.raw_value(row, &self.race_column)?;
        Some(format!("{}-{}", Self::sex_code(sex), Self::race_code(race)))
    }

    /// Cells ordered race-major: F-AA, M-AA, F-C, M-C, F-O, M-O, then any
    /// other sex codes.
    pub fn labels(&self, ds: &TabularDataset) -> Vec<String> {
        let mut sexes: Vec<String> = vec!["F".into(), "M".into()];
        for i in 0..ds.len() {
            if let Some(s) = ds.raw_value(i, &self.sex_column).map(Self::sex_code) {
                if !sexes.contains(&s) {
                    sexes.push(s);
                }
            }
        }
        ["AA", "C", "O"].iter().flat_map(|r| sexes.iter().map(move |s| format!("{s}-{r}"))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub model: String,
    pub counts: Vec<usize>,
}

/// Per model, how many individuals it is assigned in each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTable {
    pub cells: Vec<String>,
    pub rows: Vec<AssignmentRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub column: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncoveredProfile {
    pub lambda: f64,
    pub n_individuals: usize,
    /// Row indices no portfolio model covers.
    pub uncovered: Vec<usize>,
    pub cell_counts: BTreeMap<String, usize>,
    /// Uncovered share of each cell's population.
    pub cell_fractions: BTreeMap<String, f64>,
    pub label_rate: Option<f64>,
    pub numeric: Vec<ColumnSummary>,
    pub assignment: AssignmentTable,
}

/// Index of the portfolio model with the smallest error on `row`, earliest on ties.
fn best_model(em: &ErrorMatrix, portfolio: &[usize], row: usize) -> Option<usize> {
    portfolio
        .iter()
        .copied()
        .filter(|&j| !em.value(row, j).is_nan())
        .min_by(|&a, &b| em.value(row, a).total_cmp(&em.value(row, b)))
}

/// Assigns each individual to its best covering portfolio model and
/// profiles the ones no model λ-covers.
pub fn uncovered_profile(
    em: &ErrorMatrix,
    portfolio: &[usize],
    lambda: f64,
    ds: &TabularDataset,
    cells: &CellSpec,
) -> Result<UncoveredProfile> {
    if em.n_items() != ds.len() {
        return Err(Error::validation("error matrix and dataset differ in row count"));
    }
    let labels = cells.labels(ds);
    let mut table: Vec<Vec<usize>> = vec![vec![0; labels.len()]; portfolio.len() + 1];
    let mut uncovered = Vec::new();
    let mut population: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..ds.len() {
        let cell = cells.cell(ds, i);
        if let Some(c) = &cell {
            *population.entry(c.clone()).or_default() += 1;
        }
        let slot = match best_model(em, portfolio, i) {
            Some(j) if em.value(i, j) <= lambda => portfolio.iter().position(|&p| p == j).unwrap_or(0),
            _ => {
                uncovered.push(i);
                portfolio.len()
            }
        };
        if let Some(k) = cell.and_then(|c| labels.iter().position(|l| *l == c)) {
            table[slot][k] += 1;
        }
    }

    let mut cell_counts = BTreeMap::new();
    for &i in &uncovered {
        if let Some(c) = cells.cell(ds, i) {
            *cell_counts.entry(c).or_insert(0) += 1;
        }
    }
    let cell_fractions = cell_counts.iter().map(|(c, &k)| (c.clone(), k as f64 / population[c] as f64)).collect();
    let label_rate = (!uncovered.is_empty())
        .then(|| uncovered.iter().map(|&i| ds.y[i] as f64).sum::<f64>() / uncovered.len() as f64);
    let mut numeric = Vec::new();
    if !uncovered.is_empty() {
        for (c, name) in ds.columns.iter().enumerate() {
            let vals: Option<Vec<f64>> = uncovered.iter().map(|&i| ds.raw[i][c].parse::<f64>().ok()).collect();
            if let Some(v) = vals {
                numeric.push(ColumnSummary {
                    column: name.clone(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }
    let names = portfolio.iter().map(|&j| em.model_ids()[j].clone()).chain([NO_MODEL.to_string()]);
    let rows = names.zip(table).map(|(model, counts)| AssignmentRow { model, counts }).collect();
    Ok(UncoveredProfile {
        lambda,
        n_individuals: ds.len(),
        uncovered,
        cell_counts,
        cell_fractions,
        label_rate,
        numeric,
        assignment: AssignmentTable { cells: labels, rows },
    })
}

/// Predictions where each individual is scored by the portfolio model with
/// the smallest error on them.
pub fn portfolio_predictions(models: &[ClassifierModel], portfolio: &[usize], ds: &TabularDataset) -> Vec<f64> {
    let preds: Vec<Vec<f64>> = portfolio.iter().map(|&j| models[j].predict(ds)).collect();
    (0..ds.len())
        .map(|i| {
            let y = ds.y[i] as f64;
            preds.iter().map(|p| p[i]).min_by(|a, b| (a - y).abs().total_cmp(&(b - y).abs())).unwrap_or(f64::NAN)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprRow {
    pub label: String,
    pub overall: Option<f64>,
    /// Per cell; `None` when the cell has no negative rows.
    pub cells: Vec<(String, Option<f64>)>,
}

impl FprRow {
    /// Values rounded to three decimals, `NA` where undefined.
    pub fn formatted(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
        std::iter::once(f(self.overall)).chain(self.cells.iter().map(|(_, v)| f(*v))).collect()
    }
}

/// Overall and per-cell false positive rate of thresholded predictions.
pub fn fpr_report(label: &str, preds: &[f64], ds: &TabularDataset, cells: &CellSpec, threshold: f64) -> FprRow {
    let labels = cells.labels(ds);
    let mut fp = vec![0usize; labels.len()];
    let mut neg = vec![0usize; labels.len()];
    let (mut all_fp, mut all_neg) = (0, 0);
    for (i, &p) in preds.iter().enumerate().take(ds.len()) {
        if ds.y[i] != 0 {
            continue;
        }
        let pos = p >= threshold;
        all_neg += 1;
        all_fp += pos as usize;
        if let Some(k) = cells.cell(ds, i).and_then(|c| labels.iter().position(|l| *l == c)) {
            neg[k] += 1;
            fp[k] += pos as usize;
        }
    }
    let rate = |f: usize, n: usize| (n > 0).then(|| f as f64 / n as f64);
    FprRow {
        label: label.to_string(),
        overall: rate(all_fp, all_neg),
        cells: labels.into_iter().enumerate().map(|(k, l)| (l, rate(fp[k], neg[k]))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn eo_gap_examples() {
        let labels = [1, 1, 0, 1, 1, 0];
        let g = groups(&["a", "a", "a", "b", "b", "b"]);
        // identical predictions per group
        let same = [0.9, 0.9, 0.1, 0.9, 0.9, 0.1];
        assert_eq!(eo_gap(&same, &labels, &g, 0.5), 0.0);
        // TPR a = 1.0, TPR b = 0.5, FPR both 0
        let preds = [0.9, 0.9, 0.1, 0.9, 0.1, 0.1];
        assert_eq!(eo_gap(&preds, &labels, &g, 0.5), 0.5);
        assert_eq!(eo_gap(&preds, &labels, &groups(&["x"; 6]), 0.5), 0.0);
        // renaming groups changes nothing
        let renamed = groups(&["q", "q", "q", "p", "p", "p"]);
        assert_eq!(eo_gap(&preds, &labels, &renamed, 0.5), 0.5);
    }

    #[test]
    fn ensemble_ids_and_sizes() {
        assert_eq!(default_mu_grid().len(), 30);
        assert_eq!(Objective::plain().model_id(), "Global");
        assert_eq!(Objective::eo("race", 300.0).model_id(), "Race(300)");
        let ds = TabularDataset::new(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![0, 0, 1, 1],
            BTreeMap::from([("sex".to_string(), groups(&["F", "M", "F", "M"]))]),
        )
        .unwrap();
        let opts = TrainOptions { max_iter: 20, ..Default::default() };
        assert_eq!(build_ensemble_with(&ds, &[10.0], &["sex".into()], 0, &opts).unwrap().len(), 2);
        assert_eq!(build_ensemble_with(&ds, &[], &["sex".into()], 0, &opts).unwrap().len(), 1);
    }

    #[test]
    fn soft_extreme_gradient_matches_differences() {
        let v = [0.2, 0.5, 0.45];
        let (s, w) = soft_extreme(&v, 50.0);
        assert!(s >= 0.5 && s < 0.5 + (3f64).ln() / 50.0 + 1e-12);
        for k in 0..3 {
            let mut up = v;
            up[k] += 1e-6;
            let mut dn = v;
            dn[k] -= 1e-6;
            let fd = (soft_extreme(&up, 50.0).0 - soft_extreme(&dn, 50.0).0) / 2e-6;
            assert!((fd - w[k]).abs() < 1e-6);
        }
    }

    fn biased_toy() -> TabularDataset {
        // x0 carries signal, x1 flags group b whose labels skew positive
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        for i in 0..400 {
            let b = i % 2 == 1;
            let x0: f64 = rng.random_range(-2.0..2.0);
            let x1 = if b { 1.0 } else { -1.0 };
            let label = rng.random::<f64>() < logistic(1.5 * x0 + 1.2 * x1);
            x.push(vec![x0, x1]);
            y.push(label as u8);
            g.push(if b { "b" } else { "a" }.to_string());
        }
        TabularDataset::new(x, y, BTreeMap::from([("grp".to_string(), g)])).unwrap()
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let ds = biased_toy();
        let p = Problem::new(&ds, &Objective::eo("grp", 5.0), 50.0).unwrap();
        let params = vec![0.3, -0.2, 0.1];
        let (_, g) = p.eval(&params, true);
        for k in 0..3 {
            let mut up = params.clone();
            up[k] += 1e-6;
            let mut dn = params.clone();
            dn[k] -= 1e-6;
            let fd = (p.eval(&up, false).0 - p.eval(&dn, false).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn zero_mu_matches_plain() {
        let ds = biased_toy();
        let a = train_classifier(&ds, &Objective::plain(), 3).unwrap();
        let b = train_classifier(&ds, &Objective::eo("grp", 0.0), 3).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn separable_toy_reaches_low_bce() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i < 20 { -1.0 } else { 1.0 }, (i % 3) as f64]).collect();
        let y = (0..40).map(|i| (i >= 20) as u8).collect();
        let ds = TabularDataset::new(x, y, BTreeMap::new()).unwrap();
        let m = train_classifier(&ds, &Objective::plain(), 0).unwrap();
        assert!(m.report.final_bce < 0.05, "{}", m.report.final_bce);
    }

    #[test]
    fn strong_penalty_shrinks_gap() {
        let ds = biased_toy();
        let plain = train_classifier(&ds, &Objective::plain(), 0).unwrap();
        let fair = train_classifier(&ds, &Objective::eo("grp", 300.0), 0).unwrap();
        assert!(fair.report.eo_gaps["grp"] < plain.report.eo_gaps["grp"]);
    }

    #[test]
    fn error_matrix_entries() {
        let ds = TabularDataset::new(vec![vec![0.0], vec![0.0]], vec![1, 0], BTreeMap::new()).unwrap();
        let m = ClassifierModel {
            id: "Global".into(),
            weights: vec![0.0],
            bias: 0.0,
            objective: Objective::plain(),
            report: TrainReport { iterations: 0, converged: true, final_bce: 0.0, eo_gaps: BTreeMap::new() },
        };
        let em = classifier_error_matrix(std::slice::from_ref(&m), &ds).unwrap();
        assert_eq!(em.value(0, 0), 0.5);
        assert_eq!(em.value(1, 0), 0.5);
        let mut shifted = m;
        shifted.bias = (0.55f64 / 0.45).ln();
        let em = classifier_error_matrix(&[shifted], &ds).unwrap();
        assert!((em.value(0, 0) - 0.45).abs() < 1e-12);
    }

    fn cell_dataset() -> TabularDataset {
        let csv = "age,sex,race,priors,label\n\
                   20,Female,African-American,0,1\n\
                   30,Male,Caucasian,2,0\n\
                   40,Male,Hispanic,1,0\n\
                   50,Female,Caucasian,5,0\n";
        let schema = TabularSchema { label: "label".into(), ..Default::default() };
        TabularDataset::from_csv(csv.as_bytes(), &schema).unwrap()
    }

    #[test]
    fn csv_encoding() {
        let ds = cell_dataset();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.y, vec![1, 0, 0, 0]);
        assert!(ds.feature_names.contains(&"race=Caucasian".to_string()));
        assert!(!ds.feature_names.contains(&"race=African-American".to_string()));
        let age = &ds.preprocessing.numeric[0];
        assert_eq!((age.column.as_str(), age.mean), ("age", 35.0));
        let mean0: f64 = ds.x.iter().map(|r| r[0]).sum::<f64>() / 4.0;
        assert!(mean0.abs() < 1e-12);
        assert_eq!(CellSpec::default().labels(&ds), ["F-AA", "M-AA", "F-C", "M-C", "F-O", "M-O"]);
        assert_eq!(CellSpec::default().cell(&ds, 2).unwrap(), "M-O");
    }

    #[test]
    fn fpr_examples() {
        let ds = cell_dataset();
        let cells = CellSpec::default();
        let zero = fpr_report("none", &[0.0; 4], &ds, &cells, 0.5);
        assert_eq!(zero.overall, Some(0.0));
        let one = fpr_report("all", &[1.0; 4], &ds, &cells, 0.5);
        assert_eq!(one.overall, Some(1.0));
        for (c, v) in &one.cells {
            match c.as_str() {
                "M-C" | "M-O" | "F-C" => assert_eq!(*v, Some(1.0)),
                _ => assert_eq!(*v, None),
            }
        }
        assert_eq!(one.formatted()[0], "1.000");
    }

    #[test]
    fn uncovered_cluster_is_reported() {
        let ds = cell_dataset();
        // model 0 misses rows 2 and 3; model 1 misses everything
        let em = ErrorMatrix::from_rows(&[
            vec![Some(0.1), Some(0.9)],
            vec![Some(0.2), Some(0.9)],
            vec![Some(0.8), Some(0.9)],
            vec![Some(0.7), Some(0.9)],
        ])
        .unwrap();
        let p = uncovered_profile(&em, &[0, 1], 0.4, &ds, &CellSpec::default()).unwrap();
        assert_eq!(p.uncovered, vec![2, 3]);
        assert_eq!(p.cell_fractions["M-O"], 1.0);
        let last = p.assignment.rows.last().unwrap();
        assert_eq!(last.model, NO_MODEL);
        assert_eq!(last.counts.iter().sum::<usize>(), 2);
        assert_eq!(p.assignment.rows.len(), 3);

        let full = uncovered_profile(&em, &[0], 1.0, &ds, &CellSpec::default()).unwrap();
        assert!(full.uncovered.is_empty());
    }
}
