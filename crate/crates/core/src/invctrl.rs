//! Nonlinear controller: on-line inversion of the identified model over the
//! saturated input box.

use serde::{Deserialize, Serialize};

use crate::dataset::NormConstants;
use crate::error::{Error, Result};
use crate::sysid::{predict, PolyModel, RegressorWindow};

pub const DEFAULT_GRID_POINTS: usize = 33;
pub const DEFAULT_REFINE_ITERS: usize = 60;
pub const DEFAULT_TOL_U: f64 = 1e-8;
pub const DEFAULT_EVAL_BUDGET: u64 = 1_000_000;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    /// Tracking priority per output, in `[0, 1]`.
    pub zeta: Vec<f64>,
    /// Magnitude penalty per input.
    pub mu: Vec<f64>,
    /// Rate penalty per input.
    pub lambda: Vec<f64>,
    pub norm: NormConstants,
    pub grid_points: usize,
    pub refine_iters: usize,
    pub tol_u: f64,
    pub eval_budget: u64,
}

impl InversionConfig {
    /// Pure tracking (`zeta = 1`, no input penalties) with the given normalizers.
    pub fn tracking(norm: NormConstants) -> Self {
        let (n_y, n_u) = (norm.rho_y.len(), norm.rho_u.len());
        InversionConfig {
            zeta: vec![1.0; n_y],
            mu: vec![0.0; n_u],
            lambda: vec![0.0; n_u],
            norm,
            grid_points: DEFAULT_GRID_POINTS,
            refine_iters: DEFAULT_REFINE_ITERS,
            tol_u: DEFAULT_TOL_U,
            eval_budget: DEFAULT_EVAL_BUDGET,
        }
    }

    pub fn validate(&self, n_y: usize, n_u: usize) -> Result<()> {
        if self.zeta.len() != n_y || self.norm.rho_y.len() != n_y {
            return Err(Error::Shape(format!("zeta and rho_y need {n_y} entries")));
        }
        if self.mu.len() != n_u || self.lambda.len() != n_u || self.norm.rho_u.len() != n_u {
            return Err(Error::Shape(format!("mu, lambda and rho_u need {n_u} entries")));
        }
        if self.zeta.iter().any(|z| !(0.0..=1.0).contains(z)) {
            return Err(Error::Config("zeta entries must lie in [0, 1]".into()));
        }
        if self.mu.iter().chain(&self.lambda).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("mu and lambda entries must be finite and >= 0".into()));
        }
        if self.norm.rho_y.iter().chain(&self.norm.rho_u).any(|r| !(*r > 0.0)) {
            return Err(Error::Config("normalization constants must be positive".into()));
        }
        if self.grid_points < 3 || self.grid_points.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "grid_points must be odd and >= 3, got {}",
                self.grid_points
            )));
        }
        if !(self.tol_u > 0.0) {
            return Err(Error::Config("tol_u must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub u_nl: Vec<f64>,
    pub j_value: f64,
    pub evaluations: usize,
}

/// `J_t` with the regressor prefix flattened once.
struct Objective<'a> {
    f: &'a PolyModel,
    cfg: &'a InversionConfig,
    r_next: &'a [f64],
    u_prev: &'a [f64],
    flat: Vec<f64>,
    prefix: usize,
    phi: Vec<f64>,
    y_hat: Vec<f64>,
    evaluations: usize,
}

impl<'a> Objective<'a> {
    fn new(
        f: &'a PolyModel,
        q: &RegressorWindow,
        r_next: &'a [f64],
        u_prev: &'a [f64],
        cfg: &'a InversionConfig,
    ) -> Self {
        let mut flat = Vec::new();
        q.flatten_into(&vec![0.0; f.n_u()], &mut flat);
        let prefix = flat.len() - f.n_u();
        Objective {
            f,
            cfg,
            r_next,
            u_prev,
            flat,
            prefix,
            phi: Vec::new(),
            y_hat: vec![0.0; f.n_y()],
            evaluations: 0,
        }
    }

    fn eval(&mut self, u: &[f64]) -> f64 {
        self.evaluations += 1;
        self.flat[self.prefix..].copy_from_slice(u);
        self.f.predict_flat(&self.flat, &mut self.phi, &mut self.y_hat);
        let cfg = self.cfg;
        let mut j = 0.0;
        for i in 0..self.y_hat.len() {
            let d = self.r_next[i] - self.y_hat[i];
            j += cfg.zeta[i] / cfg.norm.rho_y[i] * d * d;
        }
        for (k, &uk) in u.iter().enumerate() {
            let du = uk - self.u_prev[k];
            j += cfg.mu[k] / cfg.norm.rho_u[k] * uk * uk + cfg.lambda[k] / cfg.norm.rho_u[k] * du * du;
        }
        j
    }
}

fn check_dims(
    f: &PolyModel,
    q: &RegressorWindow,
    r_next: &[f64],
    u_prev: &[f64],
    cfg: &InversionConfig,
) -> Result<()> {
    q.check(f.n(), f.n_y(), f.n_u())?;
    if r_next.len() != f.n_y() || u_prev.len() != f.n_u() {
        return Err(Error::Shape("reference or previous input has wrong length".into()));
    }
    cfg.validate(f.n_y(), f.n_u())
}

/// Tracking + magnitude + rate cost of a candidate input. The rate term is
/// taken against `u_prev`, the previously applied total input.
pub fn objective_j(
    f: &PolyModel,
    q: &RegressorWindow,
    r_next: &[f64],
    u_prev: &[f64],
    cfg: &InversionConfig,
    u_cand: &[f64],
) -> Result<f64> {
    check_dims(f, q, r_next, u_prev, cfg)?;
    if u_cand.len() != f.n_u() {
        return Err(Error::Shape("candidate input has wrong length".into()));
    }
    Ok(Objective::new(f, q, r_next, u_prev, cfg).eval(u_cand))
}

fn less(a: f64, b: f64) -> bool {
    // NaN never wins
    a < b || (b.is_nan() && !a.is_nan())
}

/// Grid search over `[-u_bar, u_bar]^{n_u}` followed by coordinate-wise
/// golden-section refinement around the best grid point.
pub fn solve_inversion(
    f: &PolyModel,
    q: &RegressorWindow,
    r_next: &[f64],
    u_prev: &[f64],
    u_bar: f64,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    check_dims(f, q, r_next, u_prev, cfg)?;
    if !(u_bar >= 0.0) || !u_bar.is_finite() {
        return Err(Error::Bound(format!("u_bar must be finite and >= 0, got {u_bar}")));
    }
    let n_u = f.n_u();
    let g = cfg.grid_points;
    let needed = (g as u128).checked_pow(n_u as u32).unwrap_or(u128::MAX);
    if needed > cfg.eval_budget as u128 {
        return Err(Error::Budget {
            needed,
            budget: cfg.eval_budget,
        });
    }
    let step = 2.0 * u_bar / (g - 1) as f64;
    let grid: Vec<f64> = (0..g)
        .map(|k| if k == g - 1 { u_bar } else { -u_bar + step * k as f64 })
        .collect();

    let mut obj = Objective::new(f, q, r_next, u_prev, cfg);
    // lexicographic scan, first coordinate slowest; strict improvement keeps
    // the smallest u among ties
    let mut idx = vec![0usize; n_u];
    let mut cand: Vec<f64> = vec![grid[0]; n_u];
    let mut best = cand.clone();
    let mut best_j = obj.eval(&cand);
    loop {
        let mut pos = n_u;
        while pos > 0 {
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < g {
                break;
            }
            idx[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
        for (c, &i) in cand.iter_mut().zip(&idx) {
            *c = grid[i];
        }
        let j = obj.eval(&cand);
        if less(j, best_j) {
            best_j = j;
            best.copy_from_slice(&cand);
        }
    }

    if u_bar > 0.0 {
        for _ in 0..cfg.refine_iters {
            let before = best_j;
            for c in 0..n_u {
                let lo = (best[c] - step).max(-u_bar);
                let hi = (best[c] + step).min(u_bar);
                let (x, j) = golden_coordinate(&mut obj, &best, c, lo, hi, cfg.tol_u);
                if less(j, best_j) {
                    best[c] = x;
                    best_j = j;
                }
            }
            if !less(best_j, before) {
                break;
            }
        }
    }

    let j_value = obj.eval(&best);
    Ok(InversionResult {
        u_nl: best,
        j_value,
        evaluations: obj.evaluations,
    })
}

/// Golden-section search on one coordinate; returns the best point seen.
fn golden_coordinate(
    obj: &mut Objective<'_>,
    base: &[f64],
    coord: usize,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> (f64, f64) {
    let mut point = base.to_vec();
    let mut eval = |x: f64, obj: &mut Objective<'_>| {
        point[coord] = x;
        obj.eval(&point)
    };
    let mut best = (a, eval(a, obj));
    let fb = eval(b, obj);
    if less(fb, best.1) {
        best = (b, fb);
    }
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = eval(x1, obj);
    let mut f2 = eval(x2, obj);
    for (x, fx) in [(x1, f1), (x2, f2)] {
        if less(fx, best.1) {
            best = (x, fx);
        }
    }
    while b - a > tol {
        if less(f1, f2) || f1 == f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = eval(x1, obj);
            if less(f1, best.1) {
                best = (x1, f1);
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = eval(x2, obj);
            if less(f2, best.1) {
                best = (x2, f2);
            }
        }
    }
    best
}

/// `r_{t+1} - f(q_t, u_t)` for the input actually applied.
pub fn predicted_error(
    f: &PolyModel,
    q: &RegressorWindow,
    r_next: &[f64],
    u_total: &[f64],
) -> Result<Vec<f64>> {
    if r_next.len() != f.n_y() {
        return Err(Error::Shape("reference has wrong length".into()));
    }
    let y = predict(f, q, u_total)?;
    Ok(r_next.iter().zip(y).map(|(r, y)| r - y).collect())
}
