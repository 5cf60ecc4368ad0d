use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covrank::extrapolate::MissingScore;
use covrank::fairness::{default_groupings, default_mu_grid, TabularSchema};
use covrank::select::default_lambda_grid;
use covrank::synth::MixtureSpec;
use covrank::votes::Dimension;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "COVRANK_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub input: InputConfig,
    pub fit: FitConfig,
    pub coverage: CoverageConfig,
    pub select: SelectConfig,
    pub llm: LlmConfig,
    pub compas: CompasConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 0,
            out: PathBuf::from("covrank-out"),
            input: InputConfig::default(),
            fit: FitConfig::default(),
            coverage: CoverageConfig::default(),
            select: SelectConfig::default(),
            llm: LlmConfig::default(),
            compas: CompasConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub votes: Option<PathBuf>,
    /// `jsonl` or `csv`; inferred from the extension when unset.
    pub format: Option<String>,
    /// Language to family table replacing the shipped one.
    pub families: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub schemes: Vec<String>,
    pub min_votes: usize,
    pub tie_weight: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub theta_max: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            schemes: ["language", "family", "task", "family_x_task", "language_x_task"].map(String::from).to_vec(),
            min_votes: covrank::votes::DEFAULT_MIN_VOTES,
            tie_weight: covrank::bt::DEFAULT_TIE_WEIGHT,
            tol: covrank::bt::DEFAULT_TOL,
            max_iter: covrank::bt::DEFAULT_MAX_ITER,
            theta_max: covrank::bt::DEFAULT_THETA_MAX,
        }
    }
}

impl FitConfig {
    pub fn dimensions(&self) -> Result<Vec<Dimension>> {
        self.schemes
            .iter()
            .map(|s| s.parse::<Dimension>().map_err(Into::into))
            .filter(|d| !matches!(d, Ok(Dimension::Global)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub lambdas: Vec<f64>,
    /// Write the matrix in row chunks instead of building it in memory.
    pub stream: bool,
    pub chunk_rows: usize,
    /// Also write the matrix as CSV.
    pub csv: bool,
    pub confidence: f64,
    pub density_bins: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambda_grid(),
            stream: false,
            chunk_rows: 10_000,
            csv: false,
            confidence: 0.7,
            density_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub nu: f64,
    /// Any of `greedy`, `lp`, `exact`, `phase2`.
    pub methods: Vec<String>,
    pub exact_budget: usize,
    /// LP relaxations with more distinct cover patterns than this are skipped.
    pub lp_max_patterns: usize,
    /// λ at which the greedy portfolio's coverage curve is reported.
    pub curve_lambda: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            nu: 0.95,
            methods: vec!["greedy".into(), "lp".into()],
            exact_budget: covrank::select::DEFAULT_EXACT_BUDGET,
            lp_max_patterns: 2_000,
            curve_lambda: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// λ at which the ranking portfolios are selected.
    pub ranking_lambda: f64,
    /// λ at which LLM coverage is evaluated.
    pub eval_lambda: f64,
    pub k: usize,
    pub missing: MissingScore,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self { ranking_lambda: 0.05, eval_lambda: 0.20, k: 10, missing: MissingScore::Half }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompasConfig {
    pub data: Option<PathBuf>,
    pub schema: TabularSchema,
    pub mu_grid: Vec<f64>,
    pub groupings: Vec<String>,
    pub lambdas: Vec<f64>,
    pub nu: f64,
    pub threshold: f64,
    pub max_iter: usize,
    /// λ values at which uncovered individuals are profiled.
    pub profile_lambdas: Vec<f64>,
    /// λ values of the full-coverage portfolios compared on false positive rate.
    pub fpr_lambdas: Vec<f64>,
    pub sex_column: String,
    pub race_column: String,
}

impl Default for CompasConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: TabularSchema::default(),
            mu_grid: default_mu_grid(),
            groupings: default_groupings(),
            lambdas: default_lambda_grid(),
            nu: 0.9,
            threshold: 0.5,
            max_iter: 1000,
            profile_lambdas: vec![0.4],
            fpr_lambdas: vec![0.8, 0.7, 0.6, 0.5],
            sex_column: "sex".into(),
            race_column: "race".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `ring` or `mirror`; ignored when `spec` is set.
    pub preset: String,
    pub n_votes: usize,
    /// Mixture spec as JSON or TOML.
    pub spec: Option<PathBuf>,
    /// Rows of synthetic tabular data to emit alongside the votes; 0 for none.
    pub tabular_rows: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { preset: "ring".into(), n_votes: 50_000, spec: None, tabular_rows: 0 }
    }
}

impl SynthConfig {
    pub fn mixture(&self, seed: u64) -> Result<MixtureSpec> {
        if let Some(path) = &self.spec {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec: MixtureSpec = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| covrank::Error::Validation(e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| covrank::Error::Validation(e.to_string()))?
            };
            spec.seed = seed;
            return Ok(spec);
        }
        match self.preset.as_str() {
            "ring" => Ok(covrank::synth::ring_mixture(self.n_votes, seed)),
            "mirror" => Ok(covrank::synth::mirror_mixture(6, 0.8, self.n_votes, seed)),
            other => Err(covrank::Error::Validation(format!("unknown synth preset `{other}`")).into()),
        }
    }
}

/// Parses `key.path=value` into a TOML value, falling back to a string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| covrank::Error::Validation(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("split of non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(covrank::Error::Validation(format!("`{p}` is not a table"))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Config file, then `key=value` overrides. The output root comes from
    /// `out`, else the environment, else the config file.
    pub fn load(path: Option<&Path>, overrides: &[String], out: Option<PathBuf>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| covrank::Error::Validation(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| covrank::Error::Validation(format!("config: {e}")))?;
        if let Some(o) = out {
            cfg.out = o;
        } else if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.out = PathBuf::from(env);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| -> Result<()> { Err(covrank::Error::Validation(m).into()) };
        if !(self.select.nu > 0.0 && self.select.nu <= 1.0) {
            return bad(format!("select.nu = {} outside (0, 1]", self.select.nu));
        }
        for &l in self.coverage.lambdas.iter().chain(&self.compas.lambdas) {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("λ = {l} outside [0, 1]"));
            }
        }
        if self.coverage.lambdas.windows(2).any(|w| w[0] > w[1]) {
            return bad("coverage.lambdas must be sorted".into());
        }
        for m in &self.select.methods {
            if !["greedy", "lp", "exact", "phase2"].contains(&m.as_str()) {
                return bad(format!("unknown selection method `{m}`"));
            }
        }
        if !(0.0..=1.0).contains(&self.fit.tie_weight) {
            return bad(format!("fit.tie_weight = {} outside [0, 1]", self.fit.tie_weight));
        }
        self.fit.dimensions()?;
        Ok(())
    }

    pub fn votes_path(&self) -> Result<&Path> {
        self.input
            .votes
            .as_deref()
            .ok_or_else(|| covrank::Error::Validation("no vote file given (input.votes or --votes)".into()).into())
    }
}
