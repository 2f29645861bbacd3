//! Sampled stability constants, the tracking-error bound and the checks
//! run against closed-loop traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invctrl::{solve_inversion, InversionConfig};
use crate::linctrl::PidGains;
use crate::plant::PlantSpec;
use crate::simloop::{saturate, SimulationTrace};
use crate::simplex::{self, Constraint, LinearProgram, Relation};
use crate::sysid::{PolyModel, RegressorWindow};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SAFETY_FACTOR: f64 = 1.2;
pub const DEFAULT_GRID_POINTS: usize = 17;
pub const DEFAULT_MAX_EXHAUSTIVE: u64 = 2_000_000;
pub const DEFAULT_RANDOM_SAMPLES: usize = 100_000;
pub const DEFAULT_INVERSION_SAMPLES: usize = 2_000;

pub const SOUNDNESS_NOTE: &str = "All constants are maxima over finite samples of the declared boxes, \
inflated by safety_factor where noted. They are empirical estimates, not formal bounds.";

/// Centred box `[-bound, bound]^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymBox {
    pub dim: usize,
    pub bound: f64,
}

impl SymBox {
    pub fn new(dim: usize, bound: f64) -> Self {
        SymBox { dim, bound }
    }
}

/// Grid density and fallback random sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub grid_points: usize,
    /// Largest number of pairs (or points) evaluated exhaustively; larger
    /// problems switch to `random_samples` uniform draws.
    pub max_exhaustive: u64,
    pub random_samples: usize,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            grid_points: DEFAULT_GRID_POINTS,
            max_exhaustive: DEFAULT_MAX_EXHAUSTIVE,
            random_samples: DEFAULT_RANDOM_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Exhaustive,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Inflated value.
    pub value: f64,
    /// Sampled maximum before inflation.
    pub raw: f64,
    pub mode: SampleMode,
    pub samples: u64,
}

fn linspace(b: f64, g: usize) -> Vec<f64> {
    if b == 0.0 {
        return vec![0.0];
    }
    (0..g)
        .map(|k| if k == g - 1 { b } else { -b + 2.0 * b * k as f64 / (g - 1) as f64 })
        .collect()
}

/// All points of the tensor grid over the concatenation of `boxes`.
fn tensor_grid(boxes: &[SymBox], g: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::new()];
    for b in boxes {
        let axis = linspace(b.bound, g);
        for _ in 0..b.dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
    }
    pts
}

fn grid_size(boxes: &[SymBox], g: usize) -> u128 {
    boxes.iter().fold(1u128, |acc, b| {
        let per = if b.bound == 0.0 { 1 } else { g as u128 };
        acc.saturating_mul(per.saturating_pow(b.dim as u32))
    })
}

fn draw(rng: &mut ChaCha8Rng, b: &SymBox) -> Vec<f64> {
    (0..b.dim)
        .map(|_| if b.bound > 0.0 { rng.gen_range(-b.bound..=b.bound) } else { 0.0 })
        .collect()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn check_sampling(s: &SamplingSpec, safety: f64) -> Result<()> {
    if s.grid_points < 2 {
        return Err(Error::Config("need at least 2 grid points per dimension".into()));
    }
    if !(safety >= 1.0) || !safety.is_finite() {
        return Err(Error::Config(format!("safety_factor must be >= 1, got {safety}")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericRange(format!("{what} is not finite")))
    }
}

/// Largest difference quotient of `delta` in its first argument over pairs
/// of output windows sharing an input window.
pub fn estimate_gamma_y(
    delta: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
    y_box: SymBox,
    u_box: SymBox,
    s: &SamplingSpec,
    safety_factor: f64,
) -> Result<Estimate> {
    check_sampling(s, safety_factor)?;
    if y_box.dim == 0 || !(y_box.bound > 0.0) {
        return Err(Error::DegenerateDomain("output box has zero volume".into()));
    }
    let g = s.grid_points;
    let p_y = grid_size(&[y_box], g);
    let p_u = grid_size(&[u_box], g);
    let pairs = p_u.saturating_mul(p_y.saturating_mul(p_y.saturating_sub(1)) / 2);

    let mut best = 0.0f64;
    let (mode, samples) = if pairs <= s.max_exhaustive as u128 {
        let ys = tensor_grid(&[y_box], g);
        for u in tensor_grid(&[u_box], g) {
            let vals: Vec<Vec<f64>> = ys.iter().map(|y| delta(y, &u)).collect();
            for i in 0..ys.len() {
                for j in i + 1..ys.len() {
                    let q = sup_diff(&vals[i], &vals[j]) / sup_diff(&ys[i], &ys[j]);
                    best = best.max(q);
                }
            }
        }
        (SampleMode::Exhaustive, pairs as u64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        for _ in 0..s.random_samples {
            let (y, y2, u) = (draw(&mut rng, &y_box), draw(&mut rng, &y_box), draw(&mut rng, &u_box));
            let d = sup_diff(&y, &y2);
            if d > 0.0 {
                best = best.max(sup_diff(&delta(&y, &u), &delta(&y2, &u)) / d);
            }
        }
        (SampleMode::Random, s.random_samples as u64)
    };
    let raw = finite(best, "gamma_y")?;
    Ok(Estimate {
        value: safety_factor * raw,
        raw,
        mode,
        samples,
    })
}

/// Largest `|g(y,u,xi) - g(y,u,0)| / |xi|` over the boxes.
pub fn estimate_gamma_xi(p: &PlantSpec, y_bar: f64, s: &SamplingSpec, safety_factor: f64) -> Result<Estimate> {
    check_sampling(s, safety_factor)?;
    p.validate()?;
    if p.n_xi == 0 || p.xi_bar == 0.0 {
        return Ok(Estimate {
            value: 0.0,
            raw: 0.0,
            mode: SampleMode::Exhaustive,
            samples: 0,
        });
    }
    let boxes = [
        SymBox::new(p.n * p.n_y, y_bar),
        SymBox::new(p.n * p.n_u, p.u_bar),
        SymBox::new(p.n * p.n_xi, p.xi_bar),
    ];
    let zero_xi = vec![vec![0.0; p.n_xi]; p.n];
    let quotient = |pt: &[f64]| -> f64 {
        let (y, rest) = pt.split_at(boxes[0].dim);
        let (u, xi) = rest.split_at(boxes[1].dim);
        let xn = sup_norm(xi);
        if xn == 0.0 {
            return 0.0;
        }
        let (yw, uw, xw) = (unflatten(y, p.n_y), unflatten(u, p.n_u), unflatten(xi, p.n_xi));
        sup_diff(&p.eval(&yw, &uw, &xw), &p.eval(&yw, &uw, &zero_xi)) / xn
    };
    let (best, mode, samples) = sample_max(&boxes, s, quotient);
    let raw = finite(best, "gamma_xi")?;
    Ok(Estimate {
        value: safety_factor * raw,
        raw,
        mode,
        samples,
    })
}

/// Largest `|delta(0, u)|` over the input box; no inflation.
pub fn estimate_delta_bar(
    delta: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
    y_dim: usize,
    u_box: SymBox,
    s: &SamplingSpec,
) -> Result<Estimate> {
    check_sampling(s, 1.0)?;
    let zero = vec![0.0; y_dim];
    let (best, mode, samples) = sample_max(&[u_box], s, |u| sup_norm(&delta(&zero, u)));
    let raw = finite(best, "delta_bar")?;
    Ok(Estimate {
        value: raw,
        raw,
        mode,
        samples,
    })
}

fn sample_max(boxes: &[SymBox], s: &SamplingSpec, f: impl Fn(&[f64]) -> f64) -> (f64, SampleMode, u64) {
    let size = grid_size(boxes, s.grid_points);
    if size <= s.max_exhaustive as u128 {
        let best = tensor_grid(boxes, s.grid_points).iter().map(|p| f(p)).fold(0.0, f64::max);
        (best, SampleMode::Exhaustive, size as u64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let mut best = 0.0f64;
        for _ in 0..s.random_samples {
            let pt: Vec<f64> = boxes.iter().flat_map(|b| draw(&mut rng, b)).collect();
            best = best.max(f(&pt));
        }
        (best, SampleMode::Random, s.random_samples as u64)
    }
}

/// Splits a flat most-recent-first window into `width`-sized entries.
pub fn unflatten(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Window length covering both the plant and the model.
pub fn residue_window(p: &PlantSpec, f: &PolyModel) -> usize {
    p.n.max(f.n())
}

/// `g(y, u, 0) - f(y, u)` on flat windows of [`residue_window`] entries.
pub fn residue<'a>(p: &'a PlantSpec, f: &'a PolyModel) -> impl Fn(&[f64], &[f64]) -> Vec<f64> + 'a {
    let zero_xi = vec![vec![0.0; p.n_xi]; p.n];
    move |y: &[f64], u: &[f64]| {
        let yw = unflatten(y, p.n_y);
        let uw = unflatten(u, p.n_u);
        let g = p.eval(&yw, &uw, &zero_xi);
        let q = RegressorWindow::new(yw[..f.n()].to_vec(), uw[1..f.n()].to_vec());
        let m = f.predict_raw(&q, &uw[0]);
        g.iter().zip(m).map(|(a, b)| a - b).collect()
    }
}

/// Operating-point box for the inversion constants. The last linear
/// command is drawn from `[-ulin_bound, ulin_bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointSampler {
    pub count: usize,
    pub seed: u64,
    pub y_bar: f64,
    pub r_bar: f64,
    pub u_bar: f64,
    pub ulin_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Output window, most recent first.
    pub y_win: Vec<Vec<f64>>,
    /// Reference window aligned with `y_win`.
    pub r_win: Vec<Vec<f64>>,
    pub r_next: Vec<f64>,
    /// Past applied inputs `u_{t-1}, ..`, at least one entry.
    pub u_hist: Vec<Vec<f64>>,
    pub u_lin_prev: Vec<f64>,
}

/// Length of the output and reference windows seen by the controller.
pub fn controller_window(f: &PolyModel, g: &PidGains) -> usize {
    f.n().max(g.n_theta + 1)
}

pub fn sample_operating_points(s: &OperatingPointSampler, f: &PolyModel, g: &PidGains) -> Vec<OperatingPoint> {
    let w = controller_window(f, g);
    let (n_y, n_u) = (f.n_y(), f.n_u());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let yb = SymBox::new(n_y, s.y_bar);
    let rb = SymBox::new(n_y, s.r_bar);
    let ub = SymBox::new(n_u, s.u_bar);
    let lb = SymBox::new(n_u, s.ulin_bound);
    (0..s.count)
        .map(|_| OperatingPoint {
            y_win: (0..w).map(|_| draw(&mut rng, &yb)).collect(),
            r_win: (0..w).map(|_| draw(&mut rng, &rb)).collect(),
            r_next: draw(&mut rng, &rb),
            u_hist: (0..f.n().saturating_sub(1).max(1)).map(|_| draw(&mut rng, &ub)).collect(),
            u_lin_prev: draw(&mut rng, &lb),
        })
        .collect()
}

/// `(|y window|, |r window|, |e_hat|)` for the combined controller at one point.
pub fn prediction_error_at(
    f: &PolyModel,
    inv: &InversionConfig,
    g: &PidGains,
    u_bar: f64,
    op: &OperatingPoint,
) -> Result<(f64, f64, f64)> {
    let n = f.n();
    if op.y_win.len() < n.max(g.n_theta + 1) || op.r_win.len() != op.y_win.len() || op.u_hist.is_empty() {
        return Err(Error::Shape("operating point windows are too short".into()));
    }
    let q = RegressorWindow::new(op.y_win[..n].to_vec(), op.u_hist[..n - 1].to_vec());
    let u_nl = solve_inversion(f, &q, &op.r_next, &op.u_hist[0], u_bar, inv)?.u_nl;
    let mut u_lin = op.u_lin_prev.clone();
    for (b, (y, r)) in g.b.iter().zip(op.y_win.iter().zip(&op.r_win)) {
        for (uk, row) in u_lin.iter_mut().zip(b) {
            *uk += row.iter().zip(r.iter().zip(y)).map(|(bij, (ri, yi))| bij * (ri - yi)).sum::<f64>();
        }
    }
    let sum: Vec<f64> = u_nl.iter().zip(&u_lin).map(|(a, b)| a + b).collect();
    let u = saturate(&sum, u_bar);
    let y_hat = f.predict_raw(&q, &u);
    let e_hat = sup_diff(&op.r_next, &y_hat);
    let a = op.y_win.iter().map(|v| sup_norm(v)).fold(0.0, f64::max);
    let b = op.r_win.iter().map(|v| sup_norm(v)).fold(0.0, f64::max);
    Ok((a, b, e_hat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConstants {
    #[serde(rename = "Gamma_y")]
    pub big_gamma_y: f64,
    #[serde(rename = "Gamma_s")]
    pub big_gamma_s: f64,
    #[serde(rename = "Lambda_e")]
    pub lambda_e: f64,
    pub samples: usize,
    /// Constraints left after dropping dominated and vacuous samples.
    pub active_samples: usize,
}

/// Smallest-weighted `(Gamma_y, Gamma_s, Lambda_e)` covering every
/// `(a, b, h)` sample with `a Gamma_y + b Gamma_s + Lambda_e >= h`.
pub fn fit_inversion_constants(samples: &[(f64, f64, f64)], r_bar: f64) -> Result<InversionConstants> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no operating points to fit".into()));
    }
    if samples.iter().any(|(a, b, h)| !(a.is_finite() && b.is_finite() && h.is_finite())) {
        return Err(Error::NumericRange("non-finite prediction error sample".into()));
    }
    // a constraint implied by a kept one is dropped
    let mut order: Vec<&(f64, f64, f64)> = samples.iter().filter(|s| s.2 > 0.0).collect();
    order.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.total_cmp(&y.0)).then(x.1.total_cmp(&y.1)));
    let mut kept: Vec<(f64, f64, f64)> = Vec::new();
    for s in order {
        if !kept.iter().any(|k| k.0 <= s.0 && k.1 <= s.1 && k.2 >= s.2) {
            kept.push(*s);
        }
    }
    let base = InversionConstants {
        big_gamma_y: 0.0,
        big_gamma_s: 0.0,
        lambda_e: 0.0,
        samples: samples.len(),
        active_samples: kept.len(),
    };
    if kept.is_empty() {
        return Ok(base);
    }
    let c_s = if r_bar > 0.0 { 0.1 / r_bar } else { 0.1 };
    // The dual has three rows and a feasible origin, so no phase one is
    // needed: max h^T z s.t. a^T z <= 1, b^T z <= c_s, 1^T z <= 0.01.
    let column = |k: usize| -> Vec<f64> { kept.iter().map(|s| [s.0, s.1, 1.0][k]).collect() };
    let dual = LinearProgram {
        objective: kept.iter().map(|s| -s.2).collect(),
        constraints: [1.0, c_s, 0.01]
            .iter()
            .enumerate()
            .map(|(k, rhs)| Constraint {
                coeffs: column(k),
                relation: Relation::Le,
                rhs: *rhs,
            })
            .collect(),
    };
    let sol = simplex::solve(&dual)?;
    let x: Vec<f64> = sol.duals.iter().map(|y| (-y).max(0.0)).collect();
    // tableau round-off must not leave a sample uncovered
    let slack = kept
        .iter()
        .map(|(a, b, h)| h - (a * x[0] + b * x[1] + x[2]))
        .fold(0.0, f64::max);
    Ok(InversionConstants {
        big_gamma_y: x[0],
        big_gamma_s: x[1],
        lambda_e: x[2] + slack,
        ..base
    })
}

/// Samples the operating-point box and fits the inversion constants.
pub fn estimate_inversion_constants(
    f: &PolyModel,
    inv: &InversionConfig,
    g: &PidGains,
    sampler: &OperatingPointSampler,
) -> Result<InversionConstants> {
    if g.n_u() != f.n_u() || g.n_y() != f.n_y() {
        return Err(Error::Shape("PID gains and model dimensions differ".into()));
    }
    let points = sample_operating_points(sampler, f, g);
    let samples = points
        .iter()
        .map(|op| prediction_error_at(f, inv, g, sampler.u_bar, op))
        .collect::<Result<Vec<_>>>()?;
    fit_inversion_constants(&samples, sampler.r_bar)
}

/// Primary constants from which every derived quantity is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primaries {
    pub gamma_y: f64,
    pub gamma_xi: f64,
    pub delta_bar: f64,
    #[serde(rename = "Gamma_y")]
    pub big_gamma_y: f64,
    #[serde(rename = "Gamma_s")]
    pub big_gamma_s: f64,
    #[serde(rename = "Lambda_e")]
    pub lambda_e: f64,
    pub r_bar: f64,
    pub xi_bar: f64,
    pub safety_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    #[serde(flatten)]
    pub primaries: Primaries,
    pub lambda_y: f64,
    pub lambda_r: f64,
    #[serde(rename = "Lambda_g")]
    pub big_lambda_g: f64,
    pub w: f64,
    pub e_bar: f64,
    #[serde(rename = "Gamma_r")]
    pub big_gamma_r: f64,
    #[serde(rename = "Gamma_xi")]
    pub big_gamma_xi: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
}

impl Primaries {
    pub fn lambda_y(&self) -> f64 {
        self.big_gamma_y + self.gamma_y
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.gamma_y,
            self.gamma_xi,
            self.delta_bar,
            self.big_gamma_y,
            self.big_gamma_s,
            self.lambda_e,
            self.r_bar,
            self.xi_bar,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NumericRange("constants must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Error bound and the derived gains; fails when `lambda_y >= 1`.
pub fn compute_error_bound(p: &Primaries) -> Result<StabilityConstants> {
    p.validate()?;
    let lambda_y = p.lambda_y();
    if lambda_y >= 1.0 {
        return Err(Error::AssumptionViolation(format!(
            "lambda_y = Gamma_y + gamma_y = {lambda_y} >= 1; model accuracy (gamma_y < 1) and \
             effective inversion (Gamma_y <= 1 - gamma_y) cannot both hold"
        )));
    }
    let lambda_r = lambda_y + p.big_gamma_s;
    let big_lambda_g = p.lambda_e + p.delta_bar;
    let w = lambda_r * p.r_bar + p.gamma_xi * p.xi_bar + big_lambda_g;
    let one_minus = 1.0 - lambda_y;
    Ok(StabilityConstants {
        primaries: *p,
        lambda_y,
        lambda_r,
        big_lambda_g,
        w,
        e_bar: w / one_minus,
        big_gamma_r: 1.0 + lambda_r / one_minus,
        big_gamma_xi: p.gamma_xi / one_minus,
        big_lambda: big_lambda_g / one_minus,
    })
}

impl StabilityConstants {
    /// True when the stored derived values equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        compute_error_bound(&self.primaries).is_ok_and(|c| c == *self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzStatus {
    HoldsByConstruction,
    SampledFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub holds: bool,
    /// Signed slack; absent when the bound is undefined.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub a1_lipschitz: LipschitzStatus,
    pub a2_model_accuracy: Check,
    pub a3_inversion: Check,
    pub a4_domain: Check,
    pub verdict: bool,
}

/// Evaluates the assumptions; `e_bar` is `None` when no bound exists.
pub fn assess(
    gamma_y: f64,
    big_gamma_y: f64,
    e_bar: Option<f64>,
    y_bar: f64,
    r_bar: f64,
    a1: LipschitzStatus,
) -> AssumptionReport {
    let m2 = 1.0 - gamma_y;
    let m3 = m2 - big_gamma_y;
    let a2 = Check {
        holds: gamma_y < 1.0,
        margin: Some(m2),
    };
    let a3 = Check {
        holds: big_gamma_y <= m2,
        margin: Some(m3),
    };
    let a4 = match e_bar {
        Some(e) => Check {
            holds: y_bar >= r_bar + e,
            margin: Some(y_bar - (r_bar + e)),
        },
        None => Check {
            holds: false,
            margin: None,
        },
    };
    AssumptionReport {
        a1_lipschitz: a1,
        verdict: a2.holds && a3.holds && a4.holds,
        a2_model_accuracy: a2,
        a3_inversion: a3,
        a4_domain: a4,
    }
}

pub fn check_assumptions(c: &StabilityConstants, y_bar: f64, a1: LipschitzStatus) -> AssumptionReport {
    let p = &c.primaries;
    assess(p.gamma_y, p.big_gamma_y, Some(c.e_bar), y_bar, p.r_bar, a1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub trace_id: String,
    pub max_abs_e: f64,
    pub e_bar: f64,
    pub satisfied: bool,
}

/// Compares `max_{t >= 1} |e_t|` against `e_bar`.
pub fn verify_tracking_bound(tr: &SimulationTrace, e_bar: f64, trace_id: &str) -> BoundCheck {
    let max_abs_e = tr
        .records
        .iter()
        .filter(|r| r.t >= 1)
        .map(|r| sup_norm(&r.e))
        .fold(0.0, f64::max);
    BoundCheck {
        trace_id: trace_id.to_string(),
        max_abs_e,
        e_bar,
        satisfied: max_abs_e <= e_bar,
    }
}

/// Per step `t`, whether `|e_{t+1}| <= lambda_y max_{k<window} |e_{t-k}| + w`.
/// `None` marks steps whose output window leaves `[-y_bar, y_bar]`; errors
/// and outputs before the first record count as zero and inside the box.
pub fn check_error_recursion(
    tr: &SimulationTrace,
    lambda_y: f64,
    w: f64,
    window: usize,
    y_bar: f64,
) -> Vec<Option<bool>> {
    let e: Vec<f64> = tr.records.iter().map(|r| sup_norm(&r.e)).collect();
    let y: Vec<f64> = tr.records.iter().map(|r| sup_norm(&r.y)).collect();
    (0..tr.records.len().saturating_sub(1))
        .map(|t| {
            let lo = (t + 1).saturating_sub(window.max(1));
            if y[lo..=t].iter().any(|v| *v > y_bar) {
                return None;
            }
            let past = e[lo..=t].iter().copied().fold(0.0, f64::max);
            Some(e[t + 1] <= lambda_y * past + w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCheck {
    pub max_abs_y: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `|y| <= Gamma_r |r| + Gamma_xi |xi| + Lambda` over the whole trace.
pub fn check_finite_gain(tr: &SimulationTrace, c: &StabilityConstants) -> GainCheck {
    let m = |f: fn(&crate::simloop::TraceRecord) -> &Vec<f64>| tr.records.iter().map(|r| sup_norm(f(r))).fold(0.0, f64::max);
    let max_abs_y = m(|r| &r.y);
    let bound = c.big_gamma_r * m(|r| &r.r) + c.big_gamma_xi * m(|r| &r.xi) + c.big_lambda;
    GainCheck {
        max_abs_y,
        bound,
        holds: max_abs_y <= bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub grid_points: usize,
    pub max_exhaustive: u64,
    pub random_samples: usize,
    pub gamma_y_mode: SampleMode,
    pub gamma_y_samples: u64,
    pub gamma_xi_mode: SampleMode,
    pub delta_bar_mode: SampleMode,
    pub inversion_samples: usize,
    pub inversion_active_samples: usize,
    pub seed: u64,
    pub safety_factor: f64,
    pub y_bar: f64,
    pub u_bar: f64,
    pub ulin_bound: f64,
    pub residue_window: usize,
    pub controller_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub schema_version: u32,
    pub primaries: Primaries,
    /// Absent when `lambda_y >= 1`.
    pub constants: Option<StabilityConstants>,
    pub report: AssumptionReport,
    pub bound_check: Option<BoundCheck>,
    pub provenance: Provenance,
    pub soundness_note: String,
}

impl StabilityCertificate {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Verdict and, when a trace was checked, the bound.
    pub fn passes(&self) -> bool {
        self.report.verdict && self.bound_check.as_ref().is_none_or(|b| b.satisfied)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifySpec {
    pub y_bar: f64,
    pub r_bar: f64,
    pub xi_bar: f64,
    pub sampling: SamplingSpec,
    pub safety_factor: f64,
    pub inversion_samples: usize,
    pub ulin_bound: f64,
}

/// Estimates every constant for the plant/model/controller triple.
pub fn certify(
    p: &PlantSpec,
    f: &PolyModel,
    inv: &InversionConfig,
    g: &PidGains,
    spec: &CertifySpec,
) -> Result<StabilityCertificate> {
    p.validate()?;
    if f.n_u() != p.n_u || f.n_y() != p.n_y {
        return Err(Error::Shape("model and plant dimensions differ".into()));
    }
    if spec.r_bar > spec.y_bar || !(spec.r_bar >= 0.0) {
        return Err(Error::Config("need 0 <= r_bar <= y_bar".into()));
    }
    if spec.xi_bar > p.xi_bar {
        return Err(Error::Config(format!("xi_bar {} exceeds the plant's {}", spec.xi_bar, p.xi_bar)));
    }
    inv.validate(p.n_y, p.n_u)?;
    let nw = residue_window(p, f);
    let delta = residue(p, f);
    let y_box = SymBox::new(nw * p.n_y, spec.y_bar);
    let u_box = SymBox::new(nw * p.n_u, p.u_bar);
    let gy = estimate_gamma_y(&delta, y_box, u_box, &spec.sampling, spec.safety_factor)?;
    let gxi = if spec.xi_bar > 0.0 {
        estimate_gamma_xi(p, spec.y_bar, &spec.sampling, spec.safety_factor)?
    } else {
        Estimate {
            value: 0.0,
            raw: 0.0,
            mode: SampleMode::Exhaustive,
            samples: 0,
        }
    };
    let db = estimate_delta_bar(&delta, y_box.dim, u_box, &spec.sampling)?;
    let sampler = OperatingPointSampler {
        count: spec.inversion_samples,
        seed: spec.sampling.seed ^ 0x9e37_79b9_7f4a_7c15,
        y_bar: spec.y_bar,
        r_bar: spec.r_bar,
        u_bar: p.u_bar,
        ulin_bound: spec.ulin_bound,
    };
    let ic = estimate_inversion_constants(f, inv, g, &sampler)?;
    let primaries = Primaries {
        gamma_y: gy.value,
        gamma_xi: gxi.value,
        delta_bar: db.value,
        big_gamma_y: ic.big_gamma_y,
        big_gamma_s: ic.big_gamma_s,
        lambda_e: ic.lambda_e,
        r_bar: spec.r_bar,
        xi_bar: spec.xi_bar,
        safety_factor: spec.safety_factor,
    };
    let a1 = if p.lipschitz_by_construction() {
        LipschitzStatus::HoldsByConstruction
    } else {
        LipschitzStatus::SampledFinite
    };
    let constants = compute_error_bound(&primaries).ok();
    let report = match &constants {
        Some(c) => check_assumptions(c, spec.y_bar, a1),
        None => assess(gy.value, ic.big_gamma_y, None, spec.y_bar, spec.r_bar, a1),
    };
    log::info!(
        "gamma_y={} gamma_xi={} delta_bar={} Gamma_y={} Gamma_s={} Lambda_e={} verdict={}",
        gy.value,
        gxi.value,
        db.value,
        ic.big_gamma_y,
        ic.big_gamma_s,
        ic.lambda_e,
        report.verdict
    );
    Ok(StabilityCertificate {
        schema_version: SCHEMA_VERSION,
        primaries,
        constants,
        report,
        bound_check: None,
        provenance: Provenance {
            grid_points: spec.sampling.grid_points,
            max_exhaustive: spec.sampling.max_exhaustive,
            random_samples: spec.sampling.random_samples,
            gamma_y_mode: gy.mode,
            gamma_y_samples: gy.samples,
            gamma_xi_mode: gxi.mode,
            delta_bar_mode: db.mode,
            inversion_samples: ic.samples,
            inversion_active_samples: ic.active_samples,
            seed: spec.sampling.seed,
            safety_factor: spec.safety_factor,
            y_bar: spec.y_bar,
            u_bar: p.u_bar,
            ulin_bound: spec.ulin_bound,
            residue_window: nw,
            controller_window: controller_window(f, g),
        },
        soundness_note: SOUNDNESS_NOTE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormConstants;
    use crate::plant::registry;
    use crate::simloop::TraceRecord;
    use proptest::prelude::*;
    use rand::Rng;

    fn sampling(g: usize) -> SamplingSpec {
        SamplingSpec {
            grid_points: g,
            ..SamplingSpec::default()
        }
    }

    fn scalar_boxes() -> (SymBox, SymBox) {
        (SymBox::new(1, 1.0), SymBox::new(1, 1.0))
    }

    #[test]
    fn gamma_y_of_linear_residue() {
        let (yb, ub) = scalar_boxes();
        let d = |y: &[f64], _: &[f64]| vec![0.3 * y[0]];
        let e = estimate_gamma_y(&d, yb, ub, &sampling(17), 1.2).unwrap();
        assert!((e.value - 0.36).abs() < 1e-9 && (e.raw - 0.3).abs() < 1e-9);
        let zero = |_: &[f64], _: &[f64]| vec![0.0];
        assert_eq!(estimate_gamma_y(&zero, yb, ub, &sampling(5), 1.2).unwrap().value, 0.0);
    }

    #[test]
    fn gamma_y_of_quadratic_residue() {
        let (yb, ub) = scalar_boxes();
        let d = |y: &[f64], _: &[f64]| vec![0.1 * y[0] * y[0]];
        let e = estimate_gamma_y(&d, yb, ub, &sampling(33), 1.0).unwrap();
        // best pair is (1, 1 - 1/16): 0.1 * (2 - 1/16)
        assert!((e.raw - 0.1 * (2.0 - 1.0 / 16.0)).abs() < 1e-12);
        assert!(e.raw <= 0.2);
    }

    #[test]
    fn gamma_y_nondecreasing_on_nested_grids() {
        let (yb, ub) = scalar_boxes();
        let d = |y: &[f64], u: &[f64]| vec![(2.0 * y[0]).sin() * 0.2 + 0.1 * y[0] * u[0]];
        let mut last = 0.0;
        for g in [3, 5, 9, 17, 33] {
            let v = estimate_gamma_y(&d, yb, ub, &sampling(g), 1.0).unwrap().raw;
            assert!(v >= last, "grid {g}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn gamma_y_random_mode_is_deterministic() {
        let y = SymBox::new(3, 1.0);
        let u = SymBox::new(3, 1.0);
        let s = SamplingSpec {
            grid_points: 17,
            max_exhaustive: 1000,
            random_samples: 5000,
            seed: 4,
        };
        let d = |y: &[f64], _: &[f64]| vec![0.25 * y[1]];
        let a = estimate_gamma_y(&d, y, u, &s, 1.0).unwrap();
        assert_eq!(a.mode, SampleMode::Random);
        assert_eq!(a, estimate_gamma_y(&d, y, u, &s, 1.0).unwrap());
        assert!(a.raw <= 0.25 + 1e-12 && a.raw > 0.2);
    }

    #[test]
    fn degenerate_output_box() {
        let d = |y: &[f64], _: &[f64]| y.to_vec();
        assert!(matches!(
            estimate_gamma_y(&d, SymBox::new(1, 0.0), SymBox::new(1, 1.0), &sampling(5), 1.0),
            Err(Error::DegenerateDomain(_))
        ));
    }

    #[test]
    fn gamma_xi_of_additive_disturbance() {
        let p = registry::scalar_linear();
        let e = estimate_gamma_xi(&p, 1.0, &sampling(9), 1.2).unwrap();
        assert!((e.value - 0.12).abs() < 1e-9);
        let quiet = PlantSpec { xi_bar: 0.0, ..p.clone() };
        assert_eq!(estimate_gamma_xi(&quiet, 1.0, &sampling(9), 1.2).unwrap().value, 0.0);
        let f = registry::scalar_linear_model(0.5, 0.3);
        let no_xi = registry::model_plus_residue(f, 0.1, 0.0, 1.0, 0.1);
        assert_eq!(estimate_gamma_xi(&no_xi, 1.0, &sampling(9), 1.2).unwrap().value, 0.0);
    }

    #[test]
    fn delta_bar_cases() {
        let ub = SymBox::new(1, 1.0);
        let c = |_: &[f64], _: &[f64]| vec![-0.07];
        assert!((estimate_delta_bar(&c, 1, ub, &sampling(5)).unwrap().value - 0.07).abs() < 1e-15);
        let lin = |y: &[f64], _: &[f64]| vec![0.3 * y[0]];
        assert_eq!(estimate_delta_bar(&lin, 1, ub, &sampling(5)).unwrap().value, 0.0);
        let q = |_: &[f64], u: &[f64]| vec![0.05 * u[0] * u[0]];
        assert!((estimate_delta_bar(&q, 1, ub, &sampling(33)).unwrap().value - 0.05).abs() < 1e-12);
    }

    #[test]
    fn residue_of_model_plus_residue_plant() {
        let f = registry::scalar_linear_model(0.4, 0.7);
        let p = registry::model_plus_residue(f.clone(), 0.2, 1.0, 1.0, 0.01);
        let d = residue(&p, &f);
        for (y, u) in [(0.5, -0.3), (-1.0, 1.0), (0.0, 0.9)] {
            assert!((d(&[y], &[u])[0] - 0.2 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn lp_single_constant_sample() {
        let c = fit_inversion_constants(&[(0.0, 0.0, 0.2)], 1.0).unwrap();
        assert_eq!((c.big_gamma_y, c.big_gamma_s), (0.0, 0.0));
        assert!((c.lambda_e - 0.2).abs() < 1e-12);
    }

    #[test]
    fn lp_prefers_reference_gain_when_error_tracks_reference() {
        // zero model: the prediction error equals the held reference
        let r_bar = 5.0;
        let f = PolyModel::zeros(1, 1, 1, 1).unwrap();
        let inv = InversionConfig::tracking(NormConstants::unit(1, 1));
        let g = PidGains::zeros(0, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..300)
            .map(|_| {
                let r = rng.gen_range(-r_bar..=r_bar);
                let op = OperatingPoint {
                    y_win: vec![vec![rng.gen_range(-5.0..=5.0)]],
                    r_win: vec![vec![r]],
                    r_next: vec![r],
                    u_hist: vec![vec![0.0]],
                    u_lin_prev: vec![0.0],
                };
                prediction_error_at(&f, &inv, &g, 1.0, &op).unwrap()
            })
            .collect();
        let c = fit_inversion_constants(&samples, r_bar).unwrap();
        assert!((c.big_gamma_s - 1.0).abs() < 1e-9, "{c:?}");
        assert!(c.big_gamma_y < 1e-12 && c.lambda_e < 1e-9);
    }

    #[test]
    fn exact_model_gives_zero_inversion_constants() {
        let f = registry::scalar_linear_model(0.5, 0.3);
        let inv = InversionConfig::tracking(NormConstants::unit(1, 1));
        let g = PidGains::zeros(1, 1, 1);
        let s = OperatingPointSampler {
            count: 300,
            seed: 2,
            y_bar: 0.2,
            r_bar: 0.1,
            u_bar: 1.0,
            ulin_bound: 0.0,
        };
        let c = estimate_inversion_constants(&f, &inv, &g, &s).unwrap();
        assert!(c.big_gamma_y <= 1e-6 && c.big_gamma_s <= 1e-6 && c.lambda_e <= 1e-6, "{c:?}");
    }

    #[test]
    fn lp_covers_every_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<_> = (0..500)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                (a, b, 0.3 * a + 0.2 * b * rng.gen::<f64>() + 0.01 * rng.gen::<f64>())
            })
            .collect();
        let c = fit_inversion_constants(&samples, 1.0).unwrap();
        for (a, b, h) in samples {
            assert!(a * c.big_gamma_y + b * c.big_gamma_s + c.lambda_e >= h);
        }
        assert!(c.active_samples < 500);
        assert!(fit_inversion_constants(&[], 1.0).is_err());
    }

    fn prim(gy: f64, gxi: f64, db: f64, gg: f64, gs: f64, le: f64, r: f64, xi: f64) -> Primaries {
        Primaries {
            gamma_y: gy,
            gamma_xi: gxi,
            delta_bar: db,
            big_gamma_y: gg,
            big_gamma_s: gs,
            lambda_e: le,
            r_bar: r,
            xi_bar: xi,
            safety_factor: 1.0,
        }
    }

    #[test]
    fn error_bound_by_hand() {
        // lambda_y = 0.5, lambda_r = 0.6, Lambda_g = 0.08
        let c = compute_error_bound(&prim(0.2, 0.2, 0.03, 0.3, 0.1, 0.05, 1.0, 0.1)).unwrap();
        assert!((c.lambda_y - 0.5).abs() < 1e-15 && (c.lambda_r - 0.6).abs() < 1e-15);
        assert!((c.e_bar - 1.4).abs() < 1e-12);
        assert!((c.big_gamma_r - (1.0 + 0.6 / 0.5)).abs() < 1e-12);
        assert!((c.big_gamma_xi - 0.4).abs() < 1e-12 && (c.big_lambda - 0.16).abs() < 1e-12);
        assert!(c.is_consistent());

        let zero = compute_error_bound(&prim(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(zero.e_bar, 0.0);
        assert!(matches!(
            compute_error_bound(&prim(0.5, 0.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0)),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn assumption_margins() {
        let r = assess(0.3, 0.5, Some(0.1), 1.0, 0.5, LipschitzStatus::HoldsByConstruction);
        assert!(r.a2_model_accuracy.holds && r.a3_inversion.holds && r.verdict);
        assert!((r.a2_model_accuracy.margin.unwrap() - 0.7).abs() < 1e-15);
        assert!((r.a3_inversion.margin.unwrap() - 0.2).abs() < 1e-12);
        assert!(!assess(1.2, 0.0, None, 1.0, 0.5, LipschitzStatus::HoldsByConstruction).a2_model_accuracy.holds);
        let r = assess(0.0, 0.0, Some(0.3), 1.0, 0.8, LipschitzStatus::SampledFinite);
        assert!(!r.a4_domain.holds && !r.verdict);
        assert!((r.a4_domain.margin.unwrap() + 0.1).abs() < 1e-12);
    }

    fn trace(e: &[f64]) -> SimulationTrace {
        SimulationTrace {
            n_y: 1,
            n_u: 1,
            n_xi: 1,
            records: e
                .iter()
                .enumerate()
                .map(|(t, e)| TraceRecord {
                    t,
                    r: vec![0.0],
                    y: vec![-e],
                    u_nl: vec![0.0],
                    u_lin: vec![0.0],
                    u: vec![0.0],
                    xi: vec![0.0],
                    e: vec![*e],
                })
                .collect(),
        }
    }

    #[test]
    fn tracking_bound_and_recursion() {
        let zero = trace(&[0.0; 10]);
        assert!(verify_tracking_bound(&zero, 0.0, "z").satisfied);
        assert!(check_error_recursion(&zero, 0.5, 0.0, 2, 1.0).iter().all(|f| *f == Some(true)));

        let spike = trace(&[0.0, 0.1, 0.5, 0.1, 0.0]);
        let b = verify_tracking_bound(&spike, 0.4, "s");
        assert!(!b.satisfied && b.max_abs_e == 0.5);
        let flags = check_error_recursion(&spike, 0.5, 0.1, 1, 1.0);
        assert_eq!(flags, vec![Some(true), Some(false), Some(true), Some(true)]);
        // |y| = 0.5 leaves a 0.4 box, so steps with it in the window are skipped
        let flags = check_error_recursion(&spike, 0.5, 0.1, 2, 0.4);
        assert_eq!(flags, vec![Some(true), Some(false), None, None]);
    }

    #[test]
    fn certificate_json_round_trip() {
        let f = registry::scalar_linear_model(0.1, 1.0);
        let p = registry::model_plus_residue(f.clone(), 0.2, 1.0, 1.0, 0.01);
        let inv = InversionConfig::tracking(NormConstants::unit(1, 1));
        let g = PidGains::zeros(1, 1, 1);
        let spec = CertifySpec {
            y_bar: 1.0,
            r_bar: 0.2,
            xi_bar: 0.01,
            sampling: sampling(17),
            safety_factor: 1.2,
            inversion_samples: 200,
            ulin_bound: 0.0,
        };
        let cert = certify(&p, &f, &inv, &g, &spec).unwrap();
        assert!((cert.primaries.gamma_y - 0.24).abs() < 1e-9);
        assert!((cert.primaries.gamma_xi - 1.2).abs() < 1e-9);
        assert!(cert.report.verdict, "{cert:?}");
        let text = cert.to_json_string().unwrap();
        assert!(text.contains("\"Gamma_y\"") && text.contains("soundness_note"));
        let back = StabilityCertificate::from_json_str(&text).unwrap();
        assert_eq!(back, cert);
        assert!(back.constants.unwrap().is_consistent());
    }

    proptest! {
        #[test]
        fn derived_constants_recompute_exactly(
            gy in 0.0..0.5f64, gxi in 0.0..2.0f64, db in 0.0..0.1f64,
            gg in 0.0..0.49f64, gs in 0.0..1.0f64, le in 0.0..0.1f64,
            r in 0.0..1.0f64, xi in 0.0..0.1f64,
        ) {
            let c = compute_error_bound(&prim(gy, gxi, db, gg, gs, le, r, xi)).unwrap();
            prop_assert!(c.is_consistent());
            let json = serde_json::to_string(&c).unwrap();
            let back: StabilityConstants = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, c);
            prop_assert!(c.e_bar >= 0.0 && c.e_bar.is_finite());
        }

        #[test]
        fn linear_residue_estimate_is_exact(c in -0.9..0.9f64, g in 2usize..12) {
            let (yb, ub) = scalar_boxes();
            let d = move |y: &[f64], _: &[f64]| vec![c * y[0]];
            let e = estimate_gamma_y(&d, yb, ub, &sampling(g), 1.0).unwrap();
            prop_assert!((e.raw - c.abs()).abs() < 1e-9);
        }
    }
}
