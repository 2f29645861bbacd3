//! Dense two-phase simplex for small problems
//! `min c^T x  s.t.  A x (<=|>=|=) b,  x >= 0`.
//!
//! Pivoting follows Bland's rule (lowest index enters, lowest basic index
//! leaves among ratio ties), so results are deterministic and cycling-free.

use crate::error::{Error, Result};

const EPS: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multipliers `y = c_B B^-1` per constraint: `<= 0` on `Le` rows and
    /// `>= 0` on `Ge` rows at a minimum.
    pub duals: Vec<f64>,
    pub pivots: usize,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
}

impl Tableau {
    fn width(&self) -> usize {
        self.obj.len() - 1
    }

    fn pivot(&mut self, r: usize, c: usize) {
        self.pivots += 1;
        let p = self.rows[r][c];
        self.rows[r].iter_mut().for_each(|v| *v /= p);
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r && row[c] != 0.0 {
                let k = row[c];
                row.iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= k * pv);
            }
        }
        let k = self.obj[c];
        if k != 0.0 {
            self.obj.iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= k * pv);
        }
        self.basis[r] = c;
    }

    /// Sets the objective row to `cost` reduced against the current basis.
    fn price(&mut self, cost: &[f64]) {
        self.obj = cost.to_vec();
        self.obj.push(0.0);
        for (r, &b) in self.basis.iter().enumerate() {
            let k = self.obj[b];
            if k != 0.0 {
                for (v, rv) in self.obj.iter_mut().zip(&self.rows[r]) {
                    *v -= k * rv;
                }
            }
        }
    }

    /// Runs simplex iterations over columns `< allowed`.
    fn optimize(&mut self, allowed: usize) -> Result<()> {
        let max_pivots = 50_000 + 100 * (self.rows.len() + self.width());
        loop {
            // reduced costs drift with the magnitude of the objective row
            let scale = 1.0 + self.obj.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let Some(enter) = (0..allowed).find(|&j| self.obj[j] < -EPS * scale) else {
                return Ok(());
            };
            let rhs = self.width();
            let mut leave: Option<(usize, f64)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                if row[enter] > EPS {
                    let ratio = row[rhs] / row[enter];
                    let better = match leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < best - EPS || (ratio <= best + EPS && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Lp("problem is unbounded".into()));
            };
            self.pivot(r, enter);
            if self.pivots > max_pivots {
                return Err(Error::Lp("pivot limit reached".into()));
            }
        }
    }
}

pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    let n = lp.objective.len();
    if lp.constraints.iter().any(|c| c.coeffs.len() != n) {
        return Err(Error::Shape("constraint width differs from objective".into()));
    }
    if lp
        .constraints
        .iter()
        .flat_map(|c| c.coeffs.iter().chain(std::iter::once(&c.rhs)))
        .chain(&lp.objective)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Lp("non-finite coefficient".into()));
    }

    // normalise to non-negative right-hand sides
    let cons: Vec<(Vec<f64>, Relation, f64)> = lp
        .constraints
        .iter()
        .map(|c| {
            if c.rhs < 0.0 {
                let rel = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (c.coeffs.iter().map(|v| -v).collect(), rel, -c.rhs)
            } else {
                (c.coeffs.clone(), c.relation, c.rhs)
            }
        })
        .collect();

    let m = cons.len();
    let n_slack = cons.iter().filter(|c| c.1 != Relation::Eq).count();
    let n_art = cons.iter().filter(|c| c.1 != Relation::Le).count();
    let art_start = n + n_slack;
    let width = art_start + n_art;

    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    // column holding +e_i for row i
    let mut unit_col = Vec::with_capacity(m);
    let (mut s, mut a) = (n, art_start);
    for (coeffs, rel, rhs) in &cons {
        let mut row = vec![0.0; width + 1];
        row[..n].copy_from_slice(coeffs);
        row[width] = *rhs;
        match rel {
            Relation::Le => {
                row[s] = 1.0;
                basis.push(s);
                unit_col.push(s);
                s += 1;
            }
            Relation::Ge => {
                row[s] = -1.0;
                s += 1;
                row[a] = 1.0;
                basis.push(a);
                unit_col.push(a);
                a += 1;
            }
            Relation::Eq => {
                row[a] = 1.0;
                basis.push(a);
                unit_col.push(a);
                a += 1;
            }
        }
        rows.push(row);
    }
    let mut tab = Tableau {
        rows,
        obj: vec![0.0; width + 1],
        basis,
        pivots: 0,
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; width];
        phase1[art_start..].iter_mut().for_each(|v| *v = 1.0);
        tab.price(&phase1);
        tab.optimize(width)?;
        let infeasibility = -tab.obj[width];
        if infeasibility > 1e-9 * (1.0 + cons.iter().map(|c| c.2).fold(0.0, f64::max)) {
            return Err(Error::Lp("problem is infeasible".into()));
        }
        // drive artificials out of the basis; drop redundant rows
        let mut r = 0;
        while r < tab.rows.len() {
            if tab.basis[r] >= art_start {
                if let Some(c) = (0..art_start).find(|&j| tab.rows[r][j].abs() > EPS) {
                    tab.pivot(r, c);
                } else {
                    tab.rows.remove(r);
                    tab.basis.remove(r);
                    continue;
                }
            }
            r += 1;
        }
    }

    let mut cost = lp.objective.clone();
    cost.resize(width, 0.0);
    tab.price(&cost);
    tab.optimize(art_start)?;

    let mut x = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rows[r][width].max(0.0);
        }
    }
    let objective = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
    let duals = lp
        .constraints
        .iter()
        .zip(&unit_col)
        .map(|(c, &col)| {
            let y = -tab.obj[col];
            if c.rhs < 0.0 {
                -y
            } else {
                y
            }
        })
        .collect();
    Ok(LpSolution {
        x,
        objective,
        duals,
        pivots: tab.pivots,
    })
}
