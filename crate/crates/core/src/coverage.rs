//! Error matrices and λ-coverage.
//!
//! An [`ErrorMatrix`] holds `err[i][j]`, the error of candidate `j` on item
//! `i`, in `[0, 1]`. Missing entries (a ranking that does not score one of the
//! vote's models) are stored as NaN and never count as covered.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bt::{logistic, BtRanking};
use crate::error::{Error, Result};
use crate::votes::Vote;

/// Sentinel for a missing error entry.
pub const MISSING: f64 = f64::NAN;

const MAGIC: &[u8; 8] = b"CVRKEM01";

#[derive(Debug, Clone)]
pub struct ErrorMatrix {
    item_ids: Vec<String>,
    model_ids: Vec<String>,
    err: Vec<f64>,
}

impl PartialEq for ErrorMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.item_ids == other.item_ids
            && self.model_ids == other.model_ids
            && self.err.len() == other.err.len()
            && self.err.iter().zip(&other.err).all(|(a, b)| a.to_bits() == b.to_bits() || a == b)
    }
}

impl ErrorMatrix {
    /// `err` is row-major, `item_ids.len() × model_ids.len()`.
    pub fn new(item_ids: Vec<String>, model_ids: Vec<String>, err: Vec<f64>) -> Result<Self> {
        if err.len() != item_ids.len() * model_ids.len() {
            return Err(Error::validation(format!(
                "matrix has {} entries, expected {} × {}",
                err.len(),
                item_ids.len(),
                model_ids.len()
            )));
        }
        if let Some(bad) = err.iter().find(|e| !e.is_nan() && !(0.0..=1.0).contains(*e)) {
            return Err(Error::validation(format!("error value {bad} outside [0, 1]")));
        }
        Ok(Self { item_ids, model_ids, err })
    }

    /// Builds from rows; `None` marks a missing entry.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::validation("ragged rows"));
        }
        let err = rows.iter().flatten().map(|e| e.unwrap_or(MISSING)).collect();
        Self::new((0..rows.len()).map(|i| i.to_string()).collect(), (0..m).map(|j| j.to_string()).collect(), err)
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == id)
    }

    pub fn indices_of(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.model_index(id).ok_or_else(|| Error::UnknownModel(id.to_string()))).collect()
    }

    /// Raw entry; NaN when missing.
    pub fn value(&self, item: usize, model: usize) -> f64 {
        self.err[item * self.model_ids.len() + model]
    }

    pub fn get(&self, item: usize, model: usize) -> Option<f64> {
        let e = self.value(item, model);
        (!e.is_nan()).then_some(e)
    }

    pub fn row(&self, item: usize) -> &[f64] {
        let m = self.model_ids.len();
        &self.err[item * m..(item + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_items()).map(move |i| self.row(i))
    }

    pub fn column(&self, model: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_items()).map(move |i| self.value(i, model))
    }

    /// Sub-matrix keeping the given columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> ErrorMatrix {
        let err = self.rows().flat_map(|row| cols.iter().map(move |&c| row[c])).collect();
        ErrorMatrix {
            item_ids: self.item_ids.clone(),
            model_ids: cols.iter().map(|&c| self.model_ids[c].clone()).collect(),
            err,
        }
    }

    /// Minimum non-missing error over `selected` per row (NaN if none).
    pub fn row_minima(&self, selected: &[usize]) -> Vec<f64> {
        self.rows()
            .map(|row| {
                selected.iter().map(|&j| row[j]).filter(|e| !e.is_nan()).fold(f64::NAN, |acc, e| {
                    if acc.is_nan() || e < acc {
                        e
                    } else {
                        acc
                    }
                })
            })
            .collect()
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, &self.item_ids, &self.model_ids)?;
        let mut buf = Vec::with_capacity(self.err.len() * 4);
        for &e in &self.err {
            buf.extend_from_slice(&(e as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::validation("not an error-matrix file (bad magic)"));
        }
        let n_items = read_u64(&mut r)? as usize;
        let n_models = read_u64(&mut r)? as usize;
        let item_ids = (0..n_items).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let model_ids = (0..n_models).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut bytes = vec![0u8; n_items * n_models * 4];
        r.read_exact(&mut bytes)?;
        let err = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::new(item_ids, model_ids, err)
    }

    /// CSV with an `item` column followed by one column per model; missing
    /// entries are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["item".to_string()];
        header.extend(self.model_ids.iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for (id, row) in self.item_ids.iter().zip(self.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|e| if e.is_nan() { String::new() } else { format!("{e}") }));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let model_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut item_ids = Vec::new();
        let mut err = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            item_ids.push(rec.get(0).unwrap_or_default().to_string());
            for cell in rec.iter().skip(1) {
                let cell = cell.trim();
                err.push(if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    MISSING
                } else {
                    cell.parse::<f64>()
                        .map_err(|_| Error::Parse { line: i + 2, message: format!("`{cell}` is not a number") })?
                });
            }
        }
        Self::new(item_ids, model_ids, err)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_header<W: Write>(w: &mut W, items: &[String], models: &[String]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    w.write_all(&(models.len() as u64).to_le_bytes())?;
    for s in items.iter().chain(models) {
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(s.as_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let mut s = vec![0u8; u32::from_le_bytes(b) as usize];
    r.read_exact(&mut s)?;
    String::from_utf8(s).map_err(|e| Error::validation(e.to_string()))
}

/// Probability the ranking assigns to the vote's loser winning.
/// `Ok(None)` when the ranking lacks a score for either model.
pub fn ranking_error(r: &BtRanking, v: &Vote) -> Result<Option<f64>> {
    let (winner, loser) =
        v.winner_loser().ok_or_else(|| Error::validation(format!("vote {} is not decisive", v.id)))?;
    Ok(match (r.theta(winner), r.theta(loser)) {
        (Some(tw), Some(tl)) => Some(logistic(tl - tw)),
        _ => None,
    })
}

/// λ-cover test; inclusive at the boundary, never true for a missing entry.
pub fn covers(err: Option<f64>, lambda: f64) -> bool {
    err.is_some_and(|e| e <= lambda)
}

fn covers_raw(e: f64, lambda: f64) -> bool {
    e <= lambda
}

/// `err[i][j] = ranking_error(rankings[j], votes[i])`, evaluated over every
/// vote for every ranking.
pub fn build_error_matrix(rankings: &[(String, BtRanking)], votes: &[&Vote]) -> Result<ErrorMatrix> {
    check_decisive(votes)?;
    let err: Vec<f64> =
        votes.par_iter().flat_map_iter(|v| rankings.iter().map(move |(_, r)| error_entry(r, v))).collect();
    ErrorMatrix::new(
        votes.iter().map(|v| v.id.to_string()).collect(),
        rankings.iter().map(|(id, _)| id.clone()).collect(),
        err,
    )
}

fn check_decisive(votes: &[&Vote]) -> Result<()> {
    match votes.iter().find(|v| !v.is_decisive()) {
        Some(v) => Err(Error::validation(format!("vote {} is not decisive", v.id))),
        None => Ok(()),
    }
}

fn error_entry(r: &BtRanking, v: &Vote) -> f64 {
    ranking_error(r, v).ok().flatten().unwrap_or(MISSING)
}

/// Writes the binary matrix for `rankings × votes` in row chunks without
/// materializing the whole matrix.
pub fn stream_error_matrix<W: Write>(
    rankings: &[(String, BtRanking)],
    votes: &[&Vote],
    mut w: W,
    chunk_rows: usize,
) -> Result<()> {
    check_decisive(votes)?;
    let items: Vec<String> = votes.iter().map(|v| v.id.to_string()).collect();
    let models: Vec<String> = rankings.iter().map(|(id, _)| id.clone()).collect();
    write_header(&mut w, &items, &models)?;
    for chunk in votes.chunks(chunk_rows.max(1)) {
        let bytes: Vec<u8> = chunk
            .par_iter()
            .flat_map_iter(|v| rankings.iter().flat_map(move |(_, r)| (error_entry(r, v) as f32).to_le_bytes()))
            .collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Fraction of items λ-covered by at least one selected column.
pub fn coverage_fraction(em: &ErrorMatrix, selected: &[usize], lambda: f64) -> f64 {
    if em.n_items() == 0 {
        return 0.0;
    }
    let covered = em.rows().filter(|row| selected.iter().any(|&j| covers_raw(row[j], lambda))).count();
    covered as f64 / em.n_items() as f64
}

/// [`coverage_fraction`] keyed by model id.
pub fn coverage_fraction_ids(em: &ErrorMatrix, selected: &[&str], lambda: f64) -> Result<f64> {
    Ok(coverage_fraction(em, &em.indices_of(selected)?, lambda))
}

/// Coverage at each λ of an ascending grid.
pub fn coverage_curve(em: &ErrorMatrix, selected: &[usize], lambdas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if lambdas.windows(2).any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt())) {
        return Err(Error::validation("λ grid must be sorted ascending"));
    }
    let n = em.n_items();
    let mut minima: Vec<f64> = em.row_minima(selected).into_iter().filter(|e| !e.is_nan()).collect();
    minima.sort_by(f64::total_cmp);
    Ok(lambdas
        .iter()
        .map(|&lambda| {
            let covered = minima.partition_point(|&e| e <= lambda);
            (lambda, if n == 0 { 0.0 } else { covered as f64 / n as f64 })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStep {
    pub model_id: String,
    pub marginal_covered: usize,
    pub cumulative_fraction: f64,
}

/// An ordered selection of candidates with per-pick coverage bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub model_ids: Vec<String>,
    pub steps: Vec<PortfolioStep>,
    pub lambda: f64,
    pub nu_target: f64,
    pub nu_achieved: f64,
}

impl Portfolio {
    /// Recomputes steps for `picks` (column indices, in pick order).
    pub fn from_picks(em: &ErrorMatrix, picks: &[usize], lambda: f64, nu_target: f64) -> Self {
        let n = em.n_items();
        let mut covered = vec![false; n];
        let mut total = 0usize;
        let mut steps = Vec::with_capacity(picks.len());
        for &j in picks {
            let mut marginal = 0;
            for (i, c) in covered.iter_mut().enumerate() {
                if !*c && covers_raw(em.value(i, j), lambda) {
                    *c = true;
                    marginal += 1;
                }
            }
            total += marginal;
            steps.push(PortfolioStep {
                model_id: em.model_ids()[j].clone(),
                marginal_covered: marginal,
                cumulative_fraction: if n == 0 { 0.0 } else { total as f64 / n as f64 },
            });
        }
        Self {
            model_ids: picks.iter().map(|&j| em.model_ids()[j].clone()).collect(),
            nu_achieved: steps.last().map_or(0.0, |s| s.cumulative_fraction),
            steps,
            lambda,
            nu_target,
        }
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }
}
