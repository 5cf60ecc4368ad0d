//! Minimum-size (λ, ν)-portfolio selection.
//!
//! Every selector works on [`CoverSets`]: for each candidate, the items whose
//! error is at most λ. The coverage target is `⌈ν·n⌉` items.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{ErrorMatrix, Portfolio, PortfolioStep};
use crate::error::{Error, Result};
use crate::lp::{LinearProgram, LpOutcome, Relation};

/// Default node budget for [`exact_select`].
pub const DEFAULT_EXACT_BUDGET: usize = 10_000_000;
/// Candidate count up to which phase 2 is solved exactly.
pub const PHASE2_EXACT_LIMIT: usize = 25;
pub const PHASE2_MAX_PASSES: usize = 1_000;

/// Default λ grid: 0.05, 0.10, …, 0.50, then 0.6, 0.7, 0.8, 0.9.
pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=10).map(|k| k as f64 * 0.05).collect();
    grid.extend([0.6, 0.7, 0.8, 0.9]);
    grid.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

/// Number of items a (λ, ν)-portfolio must cover.
pub fn coverage_target(nu: f64, n_items: usize) -> usize {
    // the epsilon absorbs representation error such as 0.95 * 40 = 38.000…01
    ((nu * n_items as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits {
    words: Vec<u64>,
}

impl Bits {
    fn new(n: usize) -> Self {
        Self { words: vec![0; n.div_ceil(64)] }
    }

    fn from_items(n: usize, items: &[usize]) -> Self {
        let mut b = Self::new(n);
        for &i in items {
            b.words[i / 64] |= 1 << (i % 64);
        }
        b
    }

    fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn gain(&self, covered: &Bits) -> usize {
        self.words.iter().zip(&covered.words).map(|(a, c)| (a & !c).count_ones() as usize).sum()
    }

    fn union_with(&mut self, other: &Bits) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    fn union_count(&self, other: &Bits) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }
}

/// Per-candidate λ-cover sets derived from an error matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSets {
    pub lambda: f64,
    pub n_items: usize,
    pub candidate_ids: Vec<String>,
    /// Sorted item indices covered by each candidate.
    pub sets: Vec<Vec<usize>>,
}

impl CoverSets {
    /// Builds cover sets directly; ids default to the candidate index.
    pub fn new(lambda: f64, n_items: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        let ids = (0..sets.len()).map(|j| j.to_string()).collect();
        Self::with_ids(lambda, n_items, ids, sets)
    }

    pub fn with_ids(
        lambda: f64,
        n_items: usize,
        candidate_ids: Vec<String>,
        mut sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if candidate_ids.len() != sets.len() {
            return Err(Error::validation("candidate ids and sets differ in length"));
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
            if s.last().is_some_and(|&i| i >= n_items) {
                return Err(Error::validation(format!("item id out of range (n = {n_items})")));
            }
        }
        Ok(Self { lambda, n_items, candidate_ids, sets })
    }

    pub fn n_candidates(&self) -> usize {
        self.sets.len()
    }

    /// Distinct non-empty sets of candidates covering a common item; the
    /// LP relaxation has one coverage variable per pattern.
    pub fn n_patterns(&self) -> usize {
        item_patterns(self).len()
    }

    fn bits(&self) -> Vec<Bits> {
        self.sets.iter().map(|s| Bits::from_items(self.n_items, s)).collect()
    }

    fn union_size(&self) -> usize {
        let mut all = Bits::new(self.n_items);
        for b in self.bits() {
            all.union_with(&b);
        }
        all.count()
    }

    fn check_feasible(&self, need: usize) -> Result<()> {
        let union = self.union_size();
        if union < need {
            let max_nu = if self.n_items == 0 { 0.0 } else { union as f64 / self.n_items as f64 };
            return Err(Error::Infeasible {
                reason: format!("candidates jointly cover {union} of the {need} required items"),
                max_nu,
            });
        }
        Ok(())
    }

    /// Portfolio bookkeeping for picks in the given order.
    pub fn portfolio(&self, picks: &[usize], nu: f64) -> Portfolio {
        let mut covered = Bits::new(self.n_items);
        let mut steps = Vec::with_capacity(picks.len());
        let mut total = 0;
        let bits = self.bits();
        for &j in picks {
            let gain = bits[j].gain(&covered);
            covered.union_with(&bits[j]);
            total += gain;
            steps.push(PortfolioStep {
                model_id: self.candidate_ids[j].clone(),
                marginal_covered: gain,
                cumulative_fraction: frac(total, self.n_items),
            });
        }
        Portfolio {
            model_ids: picks.iter().map(|&j| self.candidate_ids[j].clone()).collect(),
            nu_achieved: steps.last().map_or(0.0, |s| s.cumulative_fraction),
            steps,
            lambda: self.lambda,
            nu_target: nu,
        }
    }
}

fn frac(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// `sets[j] = {i : err[i][j] ≤ λ}`.
pub fn build_cover_sets(em: &ErrorMatrix, lambda: f64) -> Result<CoverSets> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("λ = {lambda} outside [0, 1]")));
    }
    let sets = (0..em.n_models()).map(|j| (0..em.n_items()).filter(|&i| em.value(i, j) <= lambda).collect()).collect();
    CoverSets::with_ids(lambda, em.n_items(), em.model_ids().to_vec(), sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Greedy,
    ExactIP,
    LpRounded,
    Phase2Mse,
}

impl Method {
    pub fn slug(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::ExactIP => "exact",
            Method::LpRounded => "lp",
            Method::Phase2Mse => "phase2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub portfolio: Portfolio,
    pub method: Method,
    /// Portfolio size, or mean squared error for phase 2.
    pub objective: f64,
    /// LP lower bound on the optimal size, when one was computed.
    pub certificate: Option<f64>,
    /// Whether the selector proved its result optimal.
    pub optimal: bool,
    /// Fractional candidate values of the LP relaxation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_values: Option<Vec<f64>>,
}

impl SelectionResult {
    fn plain(portfolio: Portfolio, method: Method, optimal: bool) -> Self {
        let objective = portfolio.len() as f64;
        Self { portfolio, method, objective, certificate: None, optimal, lp_values: None }
    }

    pub fn k(&self) -> usize {
        self.portfolio.len()
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::validation(format!("ν = {nu} outside (0, 1]")));
    }
    Ok(())
}

/// Greedy partial set cover: repeatedly take the candidate covering the most
/// uncovered items (lowest index on ties) until `⌈ν·n⌉` items are covered.
pub fn greedy_select(cs: &CoverSets, nu: f64) -> Result<SelectionResult> {
    check_nu(nu)?;
    let need = coverage_target(nu, cs.n_items);
    cs.check_feasible(need)?;
    let picks = greedy_picks(&cs.bits(), cs.n_items, need);
    Ok(SelectionResult::plain(cs.portfolio(&picks, nu), Method::Greedy, false))
}

/// Greedy picks until no candidate adds coverage.
pub fn greedy_max_coverage(cs: &CoverSets) -> Vec<usize> {
    greedy_picks(&cs.bits(), cs.n_items, cs.n_items)
}

/// First `k` greedy picks regardless of any coverage target. Once nothing
/// adds coverage the remaining picks follow candidate order.
pub fn greedy_order(cs: &CoverSets, k: usize) -> Vec<usize> {
    let bits = cs.bits();
    let mut picks = greedy_picks(&bits, cs.n_items, cs.n_items);
    picks.extend((0..bits.len()).filter(|j| !picks.contains(j)).collect::<Vec<_>>());
    picks.truncate(k);
    picks
}

fn greedy_picks(bits: &[Bits], n: usize, need: usize) -> Vec<usize> {
    let mut covered = Bits::new(n);
    let mut count = 0;
    let mut picks = Vec::new();
    while count < need {
        let mut best: Option<(usize, usize)> = None;
        for (j, b) in bits.iter().enumerate() {
            let g = b.gain(&covered);
            if g > 0 && best.is_none_or(|(_, bg)| g > bg) {
                best = Some((j, g));
            }
        }
        let Some((j, g)) = best else { break };
        covered.union_with(&bits[j]);
        count += g;
        picks.push(j);
    }
    picks
}

/// Minimum-cardinality selection by depth-first branch-and-bound.
///
/// Starts from the greedy solution as incumbent and prunes with
/// `⌈remaining / best marginal⌉`. `optimal` is false when the node budget ran
/// out before the search completed.
pub fn exact_select(cs: &CoverSets, nu: f64, budget: usize) -> Result<SelectionResult> {
    check_nu(nu)?;
    let need = coverage_target(nu, cs.n_items);
    cs.check_feasible(need)?;
    let bits = cs.bits();
    let mut order: Vec<usize> = (0..bits.len()).collect();
    order.sort_by(|&a, &b| bits[b].count().cmp(&bits[a].count()).then(a.cmp(&b)));
    let sorted: Vec<Bits> = order.iter().map(|&j| bits[j].clone()).collect();

    let mut search = Search {
        sets: &sorted,
        need,
        best: greedy_picks(&sorted, cs.n_items, need),
        nodes: 0,
        budget,
        exhausted: false,
    };
    let mut chosen = Vec::new();
    search.dfs(0, &Bits::new(cs.n_items), 0, &mut chosen);
    let mut picks: Vec<usize> = search.best.iter().map(|&p| order[p]).collect();
    picks.sort_unstable();
    let optimal = !search.exhausted;
    Ok(SelectionResult::plain(cs.portfolio(&picks, nu), Method::ExactIP, optimal))
}

struct Search<'a> {
    sets: &'a [Bits],
    need: usize,
    best: Vec<usize>,
    nodes: usize,
    budget: usize,
    exhausted: bool,
}

impl Search<'_> {
    fn dfs(&mut self, from: usize, covered: &Bits, count: usize, chosen: &mut Vec<usize>) {
        if count >= self.need {
            if chosen.len() < self.best.len() {
                self.best = chosen.clone();
            }
            return;
        }
        if self.exhausted || chosen.len() + 1 >= self.best.len() {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        let gains: Vec<usize> = self.sets[from..].iter().map(|b| b.gain(covered)).collect();
        let max_gain = gains.iter().copied().max().unwrap_or(0);
        if max_gain == 0 {
            return;
        }
        let lower = (self.need - count).div_ceil(max_gain);
        if chosen.len() + lower >= self.best.len() {
            return;
        }
        for (offset, &g) in gains.iter().enumerate() {
            if g == 0 {
                continue;
            }
            let j = from + offset;
            let mut next = covered.clone();
            next.union_with(&self.sets[j]);
            chosen.push(j);
            self.dfs(j + 1, &next, count + g, chosen);
            chosen.pop();
            if self.exhausted {
                return;
            }
        }
    }
}

/// Covering-candidate pattern of every coverable item, with multiplicities.
fn item_patterns(cs: &CoverSets) -> std::collections::BTreeMap<Vec<usize>, usize> {
    let mut patterns: Vec<Vec<usize>> = vec![Vec::new(); cs.n_items];
    for (j, set) in cs.sets.iter().enumerate() {
        for &i in set {
            patterns[i].push(j);
        }
    }
    let mut groups = std::collections::BTreeMap::new();
    for p in patterns.into_iter().filter(|p| !p.is_empty()) {
        *groups.entry(p).or_insert(0) += 1;
    }
    groups
}

/// LP relaxation of the covering program followed by continuous-threshold
/// rounding (add candidates by decreasing fractional value until covered).
///
/// Items with identical cover patterns share one coverage variable weighted
/// by their multiplicity; this gives the same optimum with fewer rows.
pub fn lp_relax_and_round(cs: &CoverSets, nu: f64) -> Result<SelectionResult> {
    check_nu(nu)?;
    let need = coverage_target(nu, cs.n_items);
    cs.check_feasible(need)?;
    let m = cs.n_candidates();

    let groups = item_patterns(cs);

    // variables: t_0..t_{m-1}, then one u per group
    let mut lp = LinearProgram::new(m + groups.len());
    for t in lp.objective.iter_mut().take(m) {
        *t = 1.0;
    }
    lp.add(groups.values().enumerate().map(|(g, &c)| (m + g, c as f64)).collect(), Relation::Ge, need as f64);
    for (g, pattern) in groups.keys().enumerate() {
        let mut row = vec![(m + g, 1.0)];
        row.extend(pattern.iter().map(|&j| (j, -1.0)));
        lp.add(row, Relation::Le, 0.0);
        lp.add(vec![(m + g, 1.0)], Relation::Le, 1.0);
    }
    for j in 0..m {
        lp.add(vec![(j, 1.0)], Relation::Le, 1.0);
    }
    let (x, bound) = match lp.solve()? {
        LpOutcome::Optimal { x, objective } => (x, objective),
        LpOutcome::Infeasible | LpOutcome::Unbounded => {
            return Err(Error::Infeasible { reason: "LP relaxation infeasible".into(), max_nu: 0.0 });
        }
    };
    let t: Vec<f64> = x[..m].iter().map(|v| v.clamp(0.0, 1.0)).collect();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| t[b].total_cmp(&t[a]).then(a.cmp(&b)));
    let bits = cs.bits();
    let mut covered = Bits::new(cs.n_items);
    let mut picks = Vec::new();
    for j in order {
        if covered.count() >= need {
            break;
        }
        covered.union_with(&bits[j]);
        picks.push(j);
    }
    let portfolio = cs.portfolio(&picks, nu);
    let optimal = picks.len() as f64 <= (bound - 1e-7).ceil();
    Ok(SelectionResult {
        objective: portfolio.len() as f64,
        portfolio,
        method: Method::LpRounded,
        certificate: Some(bound),
        optimal,
        lp_values: Some(t),
    })
}

/// Size-`k` (λ, ν)-portfolio minimizing `Σ_i min_{j∈P} err[i][j]² / n`.
///
/// Missing entries count as error 1. Solved by branch-and-bound when there
/// are at most [`PHASE2_EXACT_LIMIT`] candidates, otherwise by
/// first-improvement swap search from `start`.
pub fn phase2_min_mse(
    em: &ErrorMatrix,
    lambda: f64,
    nu: f64,
    k: usize,
    start: Option<&[usize]>,
    seed: u64,
) -> Result<SelectionResult> {
    check_nu(nu)?;
    let m = em.n_models();
    let n = em.n_items();
    if k == 0 || k > m {
        return Err(Error::validation(format!("portfolio size {k} not in 1..={m}")));
    }
    let need = coverage_target(nu, n);
    let cs = build_cover_sets(em, lambda)?;
    let ctx = MseContext::new(em, &cs);

    let (picks, optimal) = if m <= PHASE2_EXACT_LIMIT {
        let mut bb = Phase2Search::new(&ctx, k, need);
        let mut chosen = Vec::new();
        bb.dfs(0, &vec![f64::INFINITY; n], &Bits::new(n), &mut chosen);
        match bb.best {
            Some((picks, _)) => (picks, true),
            None => return Err(no_feasible(k)),
        }
    } else {
        let start = start.ok_or_else(|| Error::validation("local search needs a starting portfolio"))?;
        (ctx.local_search(start, k, need, seed).ok_or_else(|| no_feasible(k))?, false)
    };
    let mse = ctx.mse(&picks);
    let portfolio = cs.portfolio(&picks, nu);
    Ok(SelectionResult {
        portfolio,
        method: Method::Phase2Mse,
        objective: mse,
        certificate: None,
        optimal,
        lp_values: None,
    })
}

fn no_feasible(k: usize) -> Error {
    Error::Infeasible { reason: format!("no feasible portfolio of size {k}"), max_nu: 0.0 }
}

struct MseContext {
    n: usize,
    m: usize,
    /// Column-major squared errors.
    sq: Vec<Vec<f64>>,
    bits: Vec<Bits>,
}

impl MseContext {
    fn new(em: &ErrorMatrix, cs: &CoverSets) -> Self {
        let sq =
            (0..em.n_models()).map(|j| em.column(j).map(|e| if e.is_nan() { 1.0 } else { e * e }).collect()).collect();
        Self { n: em.n_items(), m: em.n_models(), sq, bits: cs.bits() }
    }

    fn mse(&self, picks: &[usize]) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.n).map(|i| picks.iter().map(|&j| self.sq[j][i]).fold(f64::INFINITY, f64::min)).sum();
        total / self.n as f64
    }

    fn coverage(&self, picks: &[usize]) -> usize {
        let mut c = Bits::new(self.n);
        for &j in picks {
            c.union_with(&self.bits[j]);
        }
        c.count()
    }

    fn local_search(&self, start: &[usize], k: usize, need: usize, seed: u64) -> Option<Vec<usize>> {
        let mut current: Vec<usize> = start.to_vec();
        current.sort_unstable();
        current.dedup();
        if current.len() != k || current.iter().any(|&j| j >= self.m) || self.coverage(&current) < need {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best_total = self.mse(&current) * self.n as f64;
        for _ in 0..PHASE2_MAX_PASSES {
            let mut outside: Vec<usize> = (0..self.m).filter(|j| !current.contains(j)).collect();
            outside.shuffle(&mut rng);
            let mut improved = false;
            'positions: for pos in 0..current.len() {
                let rest: Vec<usize> = current.iter().enumerate().filter(|(p, _)| *p != pos).map(|(_, &j)| j).collect();
                let mut rest_min = vec![f64::INFINITY; self.n];
                let mut rest_cov = Bits::new(self.n);
                for &j in &rest {
                    for (r, s) in rest_min.iter_mut().zip(&self.sq[j]) {
                        *r = r.min(*s);
                    }
                    rest_cov.union_with(&self.bits[j]);
                }
                for &c in &outside {
                    if rest_cov.union_count(&self.bits[c]) < need {
                        continue;
                    }
                    let total: f64 = rest_min.iter().zip(&self.sq[c]).map(|(a, b)| a.min(*b)).sum();
                    if total < best_total - 1e-12 {
                        current[pos] = c;
                        current.sort_unstable();
                        best_total = total;
                        improved = true;
                        break 'positions;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        Some(current)
    }
}

struct Phase2Search<'a> {
    ctx: &'a MseContext,
    k: usize,
    need: usize,
    /// suffix_min[p][i] = min over candidates ≥ p of sq[·][i]
    suffix_min: Vec<Vec<f64>>,
    suffix_cov: Vec<Bits>,
    best: Option<(Vec<usize>, f64)>,
}

impl<'a> Phase2Search<'a> {
    fn new(ctx: &'a MseContext, k: usize, need: usize) -> Self {
        let (n, m) = (ctx.n, ctx.m);
        let mut suffix_min = vec![vec![f64::INFINITY; n]; m + 1];
        let mut suffix_cov = vec![Bits::new(n); m + 1];
        for p in (0..m).rev() {
            let mut row = suffix_min[p + 1].clone();
            for (r, s) in row.iter_mut().zip(&ctx.sq[p]) {
                *r = r.min(*s);
            }
            suffix_min[p] = row;
            let mut cov = suffix_cov[p + 1].clone();
            cov.union_with(&ctx.bits[p]);
            suffix_cov[p] = cov;
        }
        Self { ctx, k, need, suffix_min, suffix_cov, best: None }
    }

    fn dfs(&mut self, from: usize, cur_min: &[f64], covered: &Bits, chosen: &mut Vec<usize>) {
        if chosen.len() == self.k {
            if covered.count() >= self.need {
                let total: f64 = cur_min.iter().sum();
                if self.best.as_ref().is_none_or(|(_, b)| total < *b - 1e-12) {
                    self.best = Some((chosen.clone(), total));
                }
            }
            return;
        }
        let slots = self.k - chosen.len();
        if self.ctx.m - from < slots {
            return;
        }
        if covered.union_count(&self.suffix_cov[from]) < self.need {
            return;
        }
        if let Some((_, best)) = &self.best {
            let bound: f64 = cur_min.iter().zip(&self.suffix_min[from]).map(|(a, b)| a.min(*b)).sum();
            if bound >= *best - 1e-12 {
                return;
            }
        }
        for j in from..=(self.ctx.m - slots) {
            let next_min: Vec<f64> = cur_min.iter().zip(&self.ctx.sq[j]).map(|(a, b)| a.min(*b)).collect();
            let mut next_cov = covered.clone();
            next_cov.union_with(&self.ctx.bits[j]);
            chosen.push(j);
            self.dfs(j + 1, &next_min, &next_cov, chosen);
            chosen.pop();
        }
    }
}

/// Export shape for one selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExport {
    pub method: Method,
    pub lambda: f64,
    pub nu: f64,
    pub k: usize,
    pub selected: Vec<String>,
    pub coverage_steps: Vec<PortfolioStep>,
    pub nu_achieved: f64,
    pub objective: f64,
    pub certificate: Option<f64>,
    pub optimal: bool,
}

impl From<&SelectionResult> for SelectionExport {
    fn from(r: &SelectionResult) -> Self {
        Self {
            method: r.method,
            lambda: r.portfolio.lambda,
            nu: r.portfolio.nu_target,
            k: r.k(),
            selected: r.portfolio.model_ids.clone(),
            coverage_steps: r.portfolio.steps.clone(),
            nu_achieved: r.portfolio.nu_achieved,
            objective: r.objective,
            certificate: r.certificate,
            optimal: r.optimal,
        }
    }
}
