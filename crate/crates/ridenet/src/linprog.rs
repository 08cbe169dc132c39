//! Dense two-phase simplex; Bland's rule guards against cycling on degenerate stretches.

use nalgebra::DMatrix;
use thiserror::Error;

/// Smallest magnitude accepted as a pivot element.
pub const PIVOT_TOL: f64 = 1e-10;
/// Phase-1 residual above which a problem is declared infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

const MAX_PIVOTS: usize = 200_000;
const DEGENERATE_RUN: usize = 50;
const TIE_TOL: f64 = 1e-12;
const SCALING_PASSES: usize = 4;
const PIVOT_ELEMENT_TOL: f64 = 1e-9;
const DROP_TOL: f64 = 1e-13;
const REFACTOR_EVERY: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("constraint {row} has {found} coefficients, expected {expected}")]
    Dimension {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("variable {0} has lower bound above upper bound")]
    Bounds(usize),
    #[error("simplex exceeded {0} pivots")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `maximize objective . x` subject to linear rows and per-variable bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// A problem over `n_vars` nonnegative variables with a zero objective.
    pub fn new(n_vars: usize) -> Self {
        LpProblem {
            objective: vec![0.0; n_vars],
            constraints: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n_vars],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    /// Adds a row given as sparse `(index, coefficient)` pairs; repeated indices accumulate.
    pub fn add_sparse(&mut self, terms: &[(usize, f64)], relation: Relation, rhs: f64) {
        let mut coeffs = vec![0.0; self.n_vars()];
        for &(j, a) in terms {
            coeffs[j] += a;
        }
        self.add(coeffs, relation, rhs);
    }

    /// Largest violation of rows and bounds at `x`, scaled by `1 + |rhs|` for rows.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.constraints {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
            let v = match c.relation {
                Relation::Le => (lhs - c.rhs).max(0.0),
                Relation::Ge => (c.rhs - lhs).max(0.0),
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v / (1.0 + c.rhs.abs()));
        }
        for (&xj, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - xj).max(xj - hi);
        }
        worst
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective".into()));
        }
        if self.bounds.len() != n {
            return Err(LpError::Dimension {
                row: usize::MAX,
                expected: n,
                found: self.bounds.len(),
            });
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY || lo.is_nan() || hi.is_nan() {
                return Err(LpError::Bounds(j));
            }
        }
        for (row, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != n {
                return Err(LpError::Dimension {
                    row,
                    expected: n,
                    found: c.coeffs.len(),
                });
            }
            if c.coeffs.iter().any(|a| !a.is_finite()) || !c.rhs.is_finite() {
                return Err(LpError::NonFinite(format!("constraint {row}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// How an original variable maps onto nonnegative standard-form columns.
enum VarMap {
    /// `x = offset + y`
    Shift { col: usize, offset: f64 },
    /// `x = offset - y`
    Mirror { col: usize, offset: f64 },
    /// `x = y_plus - y_minus`
    Split { plus: usize, minus: usize },
}

struct Tableau {
    /// Row-major `m x (n + 1)`; the last column holds the right-hand side.
    a: Vec<f64>,
    /// The initial tableau, used to rebuild `a` from the current basis.
    orig: Vec<f64>,
    m: usize,
    n: usize,
    basis: Vec<usize>,
}

impl Tableau {
    fn width(&self) -> usize {
        self.n + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.width() + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.n)
    }

    fn pivot(&mut self, obj: &mut [f64], row: usize, col: usize) {
        let w = self.width();
        let p = self.a[row * w + col];
        for v in &mut self.a[row * w..(row + 1) * w] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.a[row * w..(row + 1) * w].to_vec();
        for i in 0..self.m {
            if i == row {
                continue;
            }
            let factor = self.a[i * w + col];
            if factor != 0.0 {
                for (v, &pr) in self.a[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                    *v -= factor * pr;
                    if v.abs() < DROP_TOL {
                        *v = 0.0;
                    }
                }
                self.a[i * w + col] = 0.0;
            }
        }
        let factor = obj[col];
        if factor != 0.0 {
            for (v, &pr) in obj.iter_mut().zip(&pivot_row) {
                *v -= factor * pr;
            }
            obj[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Recomputes `B^-1 [A | b]` from the initial tableau to shed accumulated round-off.
    fn refactor(&mut self) {
        let (m, w) = (self.m, self.width());
        if m == 0 {
            return;
        }
        let orig = DMatrix::from_row_slice(m, w, &self.orig);
        let b = DMatrix::from_fn(m, m, |i, k| orig[(i, self.basis[k])]);
        let Some(x) = b.lu().solve(&orig) else {
            return;
        };
        for i in 0..m {
            for j in 0..w {
                let v = x[(i, j)];
                self.a[i * w + j] = if v.abs() < DROP_TOL { 0.0 } else { v };
            }
        }
        for (i, &col) in self.basis.iter().enumerate() {
            for k in 0..m {
                self.a[k * w + col] = if k == i { 1.0 } else { 0.0 };
            }
        }
    }

    /// Reduced-cost row `c_B B^-1 A - c` (plus objective value in the last slot) for maximizing `cost`.
    fn objective_row(&self, cost: &[f64]) -> Vec<f64> {
        let mut obj: Vec<f64> = cost.iter().map(|c| -c).collect();
        obj.push(0.0);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (j, v) in obj.iter_mut().enumerate() {
                    *v += cb * self.at(i, j);
                }
            }
        }
        obj
    }

    /// Textbook minimum-ratio row, ties to the smallest basic index.
    fn ratio_bland(&self, col: usize) -> Option<(usize, f64)> {
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let a = self.at(i, col);
            if a > PIVOT_ELEMENT_TOL {
                let ratio = self.rhs(i).max(0.0) / a;
                leave = match leave {
                    Some((k, best))
                        if !(ratio < best - 1e-12
                            || (ratio <= best + 1e-12 && self.basis[i] < self.basis[k])) =>
                    {
                        Some((k, best))
                    }
                    _ => Some((i, ratio)),
                };
            }
        }
        leave
    }

    /// Minimum-ratio row; near-ties go to the largest pivot element.
    fn ratio_stable(&self, col: usize) -> Option<(usize, f64)> {
        let ratio = |i: usize| self.rhs(i).max(0.0) / self.at(i, col);
        let rows = || (0..self.m).filter(|&i| self.at(i, col) > PIVOT_ELEMENT_TOL);
        let best = rows().map(ratio).fold(f64::INFINITY, f64::min);
        if best == f64::INFINITY {
            return None;
        }
        let slack = TIE_TOL * (1.0 + best);
        rows()
            .filter(|&i| ratio(i) <= best + slack)
            .max_by(|&i, &k| self.at(i, col).total_cmp(&self.at(k, col)))
            .map(|i| (i, ratio(i)))
    }

    /// Primal simplex with Dantzig pricing; after `DEGENERATE_RUN` consecutive degenerate
    /// pivots it switches to Bland's rule until the objective moves again.
    /// Returns `false` if unbounded.
    fn run(&mut self, cost: &[f64], allowed: &[bool]) -> Result<bool, LpError> {
        let mut obj = self.objective_row(cost);
        let mut degenerate = 0;
        let mut since_refactor = 0;
        for _ in 0..MAX_PIVOTS {
            if since_refactor >= REFACTOR_EVERY {
                self.refactor();
                obj = self.objective_row(cost);
                since_refactor = 0;
            }
            let bland = degenerate >= DEGENERATE_RUN;
            let candidates = (0..self.n).filter(|&j| allowed[j] && obj[j] < -PIVOT_TOL);
            let entering = if bland {
                candidates.min()
            } else {
                candidates.min_by(|&a, &b| obj[a].total_cmp(&obj[b]))
            };
            let Some(col) = entering else {
                if since_refactor == 0 {
                    return Ok(true);
                }
                since_refactor = REFACTOR_EVERY;
                continue;
            };
            let leave = if bland { self.ratio_bland(col) } else { self.ratio_stable(col) };
            match leave {
                None => return Ok(false),
                Some((row, ratio)) => {
                    if ratio <= 1e-12 {
                        degenerate += 1;
                    } else {
                        degenerate = 0;
                    }
                    self.pivot(&mut obj, row, col);
                    since_refactor += 1;
                }
            }
        }
        Err(LpError::IterationLimit(MAX_PIVOTS))
    }
}

/// Geometric row and column scaling followed by max-row normalization. Returns the column
/// factors: original structural value = factor * scaled value.
fn equilibrate(rows: &mut [(Vec<f64>, Relation, f64)], n_struct: usize) -> Vec<f64> {
    let mut col_scale = vec![1.0; n_struct];
    let spread = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals
            .filter(|a| *a != 0.0)
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), a| (lo.min(a.abs()), hi.max(a.abs())));
        if hi > 0.0 {
            1.0 / (lo * hi).sqrt()
        } else {
            1.0
        }
    };
    for _ in 0..SCALING_PASSES {
        for row in rows.iter_mut() {
            let k = spread(&mut row.0.iter().copied());
            row.0.iter_mut().for_each(|a| *a *= k);
            row.2 *= k;
        }
        for (j, cs) in col_scale.iter_mut().enumerate() {
            let k = spread(&mut rows.iter().map(|r| r.0[j]));
            rows.iter_mut().for_each(|r| r.0[j] *= k);
            *cs *= k;
        }
    }
    for row in rows.iter_mut() {
        let k = row.0.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        if k > 0.0 {
            row.0.iter_mut().for_each(|a| *a /= k);
            row.2 /= k;
        }
    }
    col_scale
}

/// Solves `problem`, returning a vertex-optimal point or an infeasible/unbounded status.
pub fn solve(problem: &LpProblem) -> Result<LpSolution, LpError> {
    problem.check()?;
    let n_orig = problem.n_vars();

    let mut maps = Vec::with_capacity(n_orig);
    let mut n_struct = 0;
    let mut upper_rows: Vec<(usize, f64)> = Vec::new();
    for &(lo, hi) in &problem.bounds {
        if lo.is_finite() {
            maps.push(VarMap::Shift {
                col: n_struct,
                offset: lo,
            });
            if hi.is_finite() {
                upper_rows.push((n_struct, hi - lo));
            }
            n_struct += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Mirror {
                col: n_struct,
                offset: hi,
            });
            n_struct += 1;
        } else {
            maps.push(VarMap::Split {
                plus: n_struct,
                minus: n_struct + 1,
            });
            n_struct += 2;
        }
    }

    // Rows in structural columns: coeffs, relation, rhs.
    let mut rows: Vec<(Vec<f64>, Relation, f64)> = Vec::new();
    for c in &problem.constraints {
        let mut coeffs = vec![0.0; n_struct];
        let mut rhs = c.rhs;
        for (j, &a) in c.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    coeffs[col] += a;
                    rhs -= a * offset;
                }
                VarMap::Mirror { col, offset } => {
                    coeffs[col] -= a;
                    rhs -= a * offset;
                }
                VarMap::Split { plus, minus } => {
                    coeffs[plus] += a;
                    coeffs[minus] -= a;
                }
            }
        }
        rows.push((coeffs, c.relation, rhs));
    }
    for &(col, cap) in &upper_rows {
        let mut coeffs = vec![0.0; n_struct];
        coeffs[col] = 1.0;
        rows.push((coeffs, Relation::Le, cap));
    }
    let col_scale = equilibrate(&mut rows, n_struct);
    for row in &mut rows {
        if row.2 < 0.0 {
            row.0.iter_mut().for_each(|a| *a = -*a);
            row.2 = -row.2;
            row.1 = match row.1 {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
    }

    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let n = n_struct + n_slack + n_art;
    let art_start = n_struct + n_slack;
    let mut tab = Tableau {
        a: vec![0.0; m * (n + 1)],
        orig: Vec::new(),
        m,
        n,
        basis: vec![0; m],
    };
    let w = n + 1;
    let (mut s, mut art) = (n_struct, art_start);
    for (i, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        tab.a[i * w..i * w + n_struct].copy_from_slice(coeffs);
        tab.a[i * w + n] = *rhs;
        match rel {
            Relation::Le => {
                tab.a[i * w + s] = 1.0;
                tab.basis[i] = s;
                s += 1;
            }
            Relation::Ge => {
                tab.a[i * w + s] = -1.0;
                s += 1;
                tab.a[i * w + art] = 1.0;
                tab.basis[i] = art;
                art += 1;
            }
            Relation::Eq => {
                tab.a[i * w + art] = 1.0;
                tab.basis[i] = art;
                art += 1;
            }
        }
    }
    tab.orig = tab.a.clone();

    if n_art > 0 {
        let cost: Vec<f64> = (0..n).map(|j| if j >= art_start { -1.0 } else { 0.0 }).collect();
        let all = vec![true; n];
        tab.run(&cost, &all)?;
        let mut obj = tab.objective_row(&cost);
        let infeasibility: f64 = (0..tab.m)
            .filter(|&i| tab.basis[i] >= art_start)
            .map(|i| tab.rhs(i))
            .sum();
        if infeasibility > FEASIBILITY_TOL {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: vec![f64::NAN; n_orig],
                objective: f64::NAN,
            });
        }
        // Artificials left basic at zero sit on redundant rows; they never move in phase 2.
        for i in 0..tab.m {
            if tab.basis[i] >= art_start {
                let col = (0..art_start)
                    .filter(|&j| tab.at(i, j).abs() > PIVOT_ELEMENT_TOL)
                    .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
                if let Some(j) = col {
                    tab.pivot(&mut obj, i, j);
                }
            }
        }
    }

    let mut cost = vec![0.0; n];
    for (j, &c) in problem.objective.iter().enumerate() {
        match maps[j] {
            VarMap::Shift { col, .. } => cost[col] += c,
            VarMap::Mirror { col, .. } => cost[col] -= c,
            VarMap::Split { plus, minus } => {
                cost[plus] += c;
                cost[minus] -= c;
            }
        }
    }
    for (c, k) in cost.iter_mut().zip(&col_scale) {
        *c *= k;
    }
    let allowed: Vec<bool> = (0..n).map(|j| j < art_start).collect();
    tab.refactor();
    if !tab.run(&cost, &allowed)? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![f64::NAN; n_orig],
            objective: f64::INFINITY,
        });
    }

    let mut y = vec![0.0; n];
    for i in 0..tab.m {
        y[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    for (v, k) in y.iter_mut().zip(&col_scale) {
        *v *= k;
    }
    let x: Vec<f64> = maps
        .iter()
        .zip(&problem.bounds)
        .map(|(map, &(lo, hi))| {
            let v = match *map {
                VarMap::Shift { col, offset } => offset + y[col],
                VarMap::Mirror { col, offset } => offset - y[col],
                VarMap::Split { plus, minus } => y[plus] - y[minus],
            };
            v.clamp(lo, hi)
        })
        .collect();
    let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
    })
}
