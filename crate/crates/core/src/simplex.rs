//! Self-contained dense two-phase simplex for the small LPs this crate
//! solves (a few thousand variables at most).
//!
//! Entering variables are picked by most-negative reduced cost; after a run
//! of non-improving (degenerate) pivots the solver switches to Bland's rule,
//! which guarantees termination.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimplexError {
    #[error("problem is infeasible (phase-1 objective {0})")]
    Infeasible(f64),
    #[error("problem is unbounded")]
    Unbounded,
    #[error("iteration limit {0} exceeded")]
    IterationLimit(usize),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// min c.x  subject to  A x = b, x >= 0, with b >= 0.
pub struct StandardForm {
    pub ncols: usize,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub objective: Vec<f64>,
}

pub struct Solution {
    pub objective: f64,
    pub x: Vec<f64>,
}

const TOL: f64 = 1e-9;
/// Degenerate pivots tolerated before switching to Bland's rule.
const STALL_LIMIT: usize = 64;

struct Tableau {
    nrows: usize,
    /// Structural + artificial columns.
    ncols: usize,
    a: Vec<f64>, // row-major, nrows x ncols
    b: Vec<f64>,
    basis: Vec<usize>,
    cost: Vec<f64>, // reduced-cost row
    obj: f64,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.ncols + c]
    }

    fn pivot(&mut self, prow: usize, pcol: usize) {
        let n = self.ncols;
        let inv = 1.0 / self.a[prow * n + pcol];
        for j in 0..n {
            self.a[prow * n + j] *= inv;
        }
        self.b[prow] *= inv;
        self.a[prow * n + pcol] = 1.0; // kill residual rounding on the pivot
        for r in 0..self.nrows {
            if r == prow {
                continue;
            }
            let factor = self.a[r * n + pcol];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                self.a[r * n + j] -= factor * self.a[prow * n + j];
            }
            self.a[r * n + pcol] = 0.0;
            self.b[r] -= factor * self.b[prow];
            if self.b[r] < 0.0 && self.b[r] > -TOL {
                self.b[r] = 0.0;
            }
        }
        let factor = self.cost[pcol];
        if factor != 0.0 {
            for j in 0..n {
                self.cost[j] -= factor * self.a[prow * n + j];
            }
            self.cost[pcol] = 0.0;
            self.obj -= factor * self.b[prow];
        }
        self.basis[prow] = pcol;
    }

    /// Runs simplex iterations until optimal. `allowed` limits entering
    /// columns (used to lock artificials out of phase 2).
    fn optimize(&mut self, allowed: usize) -> Result<(), SimplexError> {
        let max_iters = 200 * (self.nrows + self.ncols);
        let mut stall = 0usize;
        let mut bland = false;
        for _ in 0..max_iters {
            let pcol = if bland {
                (0..allowed).find(|&j| self.cost[j] < -TOL)
            } else {
                let mut best = None;
                let mut best_val = -TOL;
                for j in 0..allowed {
                    if self.cost[j] < best_val {
                        best_val = self.cost[j];
                        best = Some(j);
                    }
                }
                best
            };
            let Some(pcol) = pcol else {
                return Ok(());
            };

            // Ratio test; ties by smallest basic-variable index (Bland).
            let mut prow: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.nrows {
                let coeff = self.at(r, pcol);
                if coeff > TOL {
                    let ratio = self.b[r] / coeff;
                    let better = match prow {
                        None => true,
                        Some(cur) => {
                            ratio < best_ratio - TOL
                                || (ratio < best_ratio + TOL && self.basis[r] < self.basis[cur])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        prow = Some(r);
                    }
                }
            }
            let Some(prow) = prow else {
                return Err(SimplexError::Unbounded);
            };

            if best_ratio <= TOL {
                stall += 1;
                if stall >= STALL_LIMIT {
                    bland = true;
                }
            } else {
                stall = 0;
            }
            self.pivot(prow, pcol);
        }
        Err(SimplexError::IterationLimit(max_iters))
    }
}

pub fn solve(form: &StandardForm) -> Result<Solution, SimplexError> {
    let nrows = form.rows.len();
    if form.rhs.len() != nrows || form.objective.len() != form.ncols {
        return Err(SimplexError::Malformed("dimension mismatch".into()));
    }
    for row in &form.rows {
        if row.len() != form.ncols {
            return Err(SimplexError::Malformed("ragged row".into()));
        }
    }
    if form.rhs.iter().any(|&b| b < 0.0) {
        return Err(SimplexError::Malformed("rhs must be nonnegative".into()));
    }
    if nrows == 0 {
        return Ok(Solution { objective: 0.0, x: vec![0.0; form.ncols] });
    }

    let nstructural = form.ncols;
    let ncols = nstructural + nrows; // one artificial per row
    let mut a = vec![0.0; nrows * ncols];
    for (r, row) in form.rows.iter().enumerate() {
        a[r * ncols..r * ncols + nstructural].copy_from_slice(row);
        a[r * ncols + nstructural + r] = 1.0;
    }
    let mut t = Tableau {
        nrows,
        ncols,
        a,
        b: form.rhs.clone(),
        basis: (0..nrows).map(|r| nstructural + r).collect(),
        cost: vec![0.0; ncols],
        obj: 0.0,
    };

    // Phase 1: minimize the sum of artificials. Reduced costs for the
    // artificial basis: cost_j = -sum_r a[r][j], objective = -sum_r b[r].
    for j in 0..nstructural {
        let mut s = 0.0;
        for r in 0..nrows {
            s += t.at(r, j);
        }
        t.cost[j] = -s;
    }
    t.obj = -t.b.iter().sum::<f64>();
    t.optimize(nstructural)?;
    let phase1 = -t.obj;
    if phase1 > 1e-7 {
        return Err(SimplexError::Infeasible(phase1));
    }

    // Drive remaining artificials out of the basis (they sit at value 0).
    for r in 0..nrows {
        if t.basis[r] >= nstructural {
            if let Some(j) = (0..nstructural).find(|&j| t.at(r, j).abs() > 1e-7) {
                t.pivot(r, j);
            }
            // Otherwise the row is redundant; the artificial stays basic at 0
            // and is excluded from phase 2, so it never moves.
        }
    }

    // Phase 2: real objective.
    t.cost[..nstructural].copy_from_slice(&form.objective);
    for c in nstructural..ncols {
        t.cost[c] = 0.0;
    }
    t.obj = 0.0;
    for r in 0..nrows {
        let bv = t.basis[r];
        let factor = t.cost[bv];
        if factor != 0.0 {
            for j in 0..ncols {
                t.cost[j] -= factor * t.at(r, j);
            }
            t.cost[bv] = 0.0;
            t.obj -= factor * t.b[r];
        }
    }
    t.optimize(nstructural)?;

    let mut x = vec![0.0; nstructural];
    for r in 0..nrows {
        if t.basis[r] < nstructural {
            x[t.basis[r]] = t.b[r].max(0.0);
        }
    }
    let objective: f64 = form.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(Solution { objective, x })
}
