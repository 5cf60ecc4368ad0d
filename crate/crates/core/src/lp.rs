//! Dense two-phase tableau simplex.
//!
//! Adequate for the small, structured LPs built by the portfolio selector
//! (a few hundred rows). Bland's rule is used throughout, so the method
//! terminates on degenerate problems and the result is deterministic.

use crate::error::{Error, Result};

const EPS: f64 = 1e-9;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Sparse `(variable, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min c·x` subject to the constraints and `x ≥ 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

type Row = (Vec<(usize, f64)>, Relation, f64);

impl LinearProgram {
    pub fn new(n_vars: usize) -> Self {
        Self { objective: vec![0.0; n_vars], constraints: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn solve(&self) -> Result<LpOutcome> {
        Tableau::build(self)?.run(self)
    }
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    n_struct: usize,
    /// First artificial column; columns at or past it are artificial.
    first_art: usize,
    width: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Result<Self> {
        let n = lp.n_vars();
        for c in &lp.constraints {
            if let Some(&(j, _)) = c.coeffs.iter().find(|(j, _)| *j >= n) {
                return Err(Error::validation(format!("constraint references variable {j} of {n}")));
            }
        }
        // normalize to non-negative right-hand sides
        let normalized: Vec<Row> = lp
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let flipped = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (c.coeffs.iter().map(|&(j, a)| (j, -a)).collect(), flipped, -c.rhs)
                } else {
                    (c.coeffs.clone(), c.relation, c.rhs)
                }
            })
            .collect();
        let n_slack = normalized.iter().filter(|c| c.1 != Relation::Eq).count();
        let n_art = normalized.iter().filter(|c| c.1 != Relation::Le).count();
        let first_art = n + n_slack;
        let width = first_art + n_art + 1;
        let mut rows = Vec::with_capacity(normalized.len());
        let mut basis = Vec::with_capacity(normalized.len());
        let (mut slack, mut art) = (n, first_art);
        for (coeffs, rel, rhs) in normalized {
            let mut row = vec![0.0; width];
            for (j, a) in coeffs {
                row[j] += a;
            }
            row[width - 1] = rhs;
            match rel {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis.push(slack);
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art] = 1.0;
                    basis.push(art);
                    art += 1;
                }
                Relation::Eq => {
                    row[art] = 1.0;
                    basis.push(art);
                    art += 1;
                }
            }
            rows.push(row);
        }
        Ok(Self { rows, obj: vec![0.0; width], basis, n_struct: n, first_art, width })
    }

    fn rhs(&self) -> usize {
        self.width - 1
    }

    fn set_objective(&mut self, cost: impl Fn(usize) -> f64) {
        self.obj = (0..self.width).map(|j| if j == self.rhs() { 0.0 } else { cost(j) }).collect();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost(b);
            if cb != 0.0 {
                for (o, x) in self.obj.iter_mut().zip(&self.rows[r]) {
                    *o -= cb * x;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for x in self.rows[r].iter_mut() {
            *x /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * y;
                }
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (x, y) in self.obj.iter_mut().zip(&pivot_row) {
                *x -= f * y;
            }
        }
        self.basis[r] = c;
    }

    /// Runs Bland's-rule pivots over columns `< limit`. Returns false when unbounded.
    fn optimize(&mut self, limit: usize, pivots: &mut usize) -> Result<bool> {
        let rhs = self.rhs();
        loop {
            let Some(enter) = (0..limit).find(|&j| self.obj[j] < -EPS) else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                let a = row[enter];
                if a > EPS {
                    let ratio = row[rhs] / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - EPS || (ratio <= lratio + EPS && self.basis[r] < self.basis[lr]) {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Ok(false);
            };
            self.pivot(r, enter);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(Error::validation("simplex pivot limit exceeded"));
            }
        }
    }

    fn run(mut self, lp: &LinearProgram) -> Result<LpOutcome> {
        let mut pivots = 0;
        let first_art = self.first_art;
        if first_art < self.rhs() {
            self.set_objective(|j| if j >= first_art { 1.0 } else { 0.0 });
            self.optimize(self.rhs(), &mut pivots)?;
            let infeas = -self.obj[self.rhs()];
            if infeas > 1e-7 {
                return Ok(LpOutcome::Infeasible);
            }
            // drive remaining artificials out of the basis
            let mut r = 0;
            while r < self.rows.len() {
                if self.basis[r] >= first_art {
                    match (0..first_art).find(|&j| self.rows[r][j].abs() > EPS) {
                        Some(j) => self.pivot(r, j),
                        None => {
                            // redundant row
                            self.rows.remove(r);
                            self.basis.remove(r);
                            continue;
                        }
                    }
                }
                r += 1;
            }
        }
        let n = self.n_struct;
        self.set_objective(|j| if j < n { lp.objective[j] } else { 0.0 });
        if !self.optimize(first_art, &mut pivots)? {
            return Ok(LpOutcome::Unbounded);
        }
        let mut x = vec![0.0; n];
        for (r, &b) in self.basis.iter().enumerate() {
            if b < n {
                x[b] = self.rows[r][self.rhs()].max(0.0);
            }
        }
        let objective = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
        Ok(LpOutcome::Optimal { x, objective })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn optimal(o: LpOutcome) -> (Vec<f64>, f64) {
        match o {
            LpOutcome::Optimal { x, objective } => (x, objective),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn textbook_maximization() {
        // max 3x + 5y s.t. x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![-3.0, -5.0];
        lp.add(vec![(0, 1.0)], Relation::Le, 4.0);
        lp.add(vec![(1, 2.0)], Relation::Le, 12.0);
        lp.add(vec![(0, 3.0), (1, 2.0)], Relation::Le, 18.0);
        let (x, obj) = optimal(lp.solve().unwrap());
        assert_abs_diff_eq!(obj, -36.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[1], 6.0, epsilon = 1e-9);
    }

    #[test]
    fn ge_and_eq_rows() {
        // min x + y s.t. x + 2y ≥ 4, x - y = 1 → x = 2, y = 1
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![1.0, 1.0];
        lp.add(vec![(0, 1.0), (1, 2.0)], Relation::Ge, 4.0);
        lp.add(vec![(0, 1.0), (1, -1.0)], Relation::Eq, 1.0);
        let (x, obj) = optimal(lp.solve().unwrap());
        assert_abs_diff_eq!(obj, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(1);
        lp.objective = vec![1.0];
        lp.add(vec![(0, 1.0)], Relation::Le, 1.0);
        lp.add(vec![(0, 1.0)], Relation::Ge, 2.0);
        assert_eq!(lp.solve().unwrap(), LpOutcome::Infeasible);

        let mut lp = LinearProgram::new(1);
        lp.objective = vec![-1.0];
        lp.add(vec![(0, 1.0)], Relation::Ge, 0.0);
        assert_eq!(lp.solve().unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn negative_rhs_and_redundant_rows() {
        // min x s.t. -x ≤ -3 (x ≥ 3), x = 3 twice
        let mut lp = LinearProgram::new(1);
        lp.objective = vec![1.0];
        lp.add(vec![(0, -1.0)], Relation::Le, -3.0);
        lp.add(vec![(0, 1.0)], Relation::Eq, 3.0);
        lp.add(vec![(0, 1.0)], Relation::Eq, 3.0);
        let (x, obj) = optimal(lp.solve().unwrap());
        assert_abs_diff_eq!(x[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(obj, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn fractional_set_cover_triangle() {
        // cover {1,2,3} with A={1,2}, B={2,3}, C={1,3}: LP optimum is 1.5
        let mut lp = LinearProgram::new(3);
        lp.objective = vec![1.0; 3];
        lp.add(vec![(0, 1.0), (2, 1.0)], Relation::Ge, 1.0);
        lp.add(vec![(0, 1.0), (1, 1.0)], Relation::Ge, 1.0);
        lp.add(vec![(1, 1.0), (2, 1.0)], Relation::Ge, 1.0);
        let (_, obj) = optimal(lp.solve().unwrap());
        assert_abs_diff_eq!(obj, 1.5, epsilon = 1e-9);
    }
}
