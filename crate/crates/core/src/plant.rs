//! Synthetic plants `y_{t+1} = g(y_t.., u_t.., xi_t..)` and the registry used
//! for identification and certification scenarios.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysid::{PolyModel, RegressorWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signal {
    Y,
    U,
    Xi,
}

/// `signal[channel](t - lag)^power`, channel 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Factor {
    pub signal: Signal,
    pub channel: usize,
    pub lag: usize,
    pub power: u32,
}

/// Product of factors; the empty product is the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Monomial(pub Vec<Factor>);

impl FromStr for Monomial {
    type Err = Error;

    /// Parses `"y1*u2^2*xi1(t-1)"`; `"1"` or `""` is the constant.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "1" {
            return Ok(Monomial::default());
        }
        let bad = |why: &str| Error::Config(format!("bad monomial '{s}': {why}"));
        let mut factors = Vec::new();
        for part in s.split('*') {
            let part = part.trim();
            let (base, power) = match part.split_once('^') {
                Some((b, p)) => (b.trim(), p.trim().parse::<u32>().map_err(|_| bad("power"))?),
                None => (part, 1),
            };
            let (name, lag) = match base.split_once('(') {
                Some((n, rest)) => {
                    let inner = rest.strip_suffix(')').ok_or_else(|| bad("missing ')'"))?.trim();
                    let lag = if inner == "t" {
                        0
                    } else {
                        inner
                            .strip_prefix("t-")
                            .and_then(|l| l.trim().parse::<usize>().ok())
                            .ok_or_else(|| bad("lag must read (t) or (t-k)"))?
                    };
                    (n.trim(), lag)
                }
                None => (base, 0),
            };
            let (signal, idx) = if let Some(i) = name.strip_prefix("xi") {
                (Signal::Xi, i)
            } else if let Some(i) = name.strip_prefix('y') {
                (Signal::Y, i)
            } else if let Some(i) = name.strip_prefix('u') {
                (Signal::U, i)
            } else {
                return Err(bad("signals are y<i>, u<j> or xi<k>"));
            };
            let channel = idx.parse::<usize>().ok().filter(|&c| c >= 1).ok_or_else(|| bad("channel index"))? - 1;
            if power > 0 {
                factors.push(Factor {
                    signal,
                    channel,
                    lag,
                    power,
                });
            }
        }
        Ok(Monomial(factors))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        for (k, fac) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, "*")?;
            }
            let name = match fac.signal {
                Signal::Y => "y",
                Signal::U => "u",
                Signal::Xi => "xi",
            };
            write!(f, "{name}{}", fac.channel + 1)?;
            if fac.lag > 0 {
                write!(f, "(t-{})", fac.lag)?;
            }
            if fac.power != 1 {
                write!(f, "^{}", fac.power)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantTerm {
    /// Output channel, 0-based.
    pub output: usize,
    pub coeff: f64,
    pub monomial: Monomial,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    /// Sum of polynomial terms in the windows.
    PolyNarx { terms: Vec<PlantTerm> },
    /// `g = f + R_y vec(y window) + c_0 + G_xi xi_t`, so the residue with
    /// respect to `f` is affine in the outputs with known Lipschitz constant.
    ModelPlusResidue {
        base: PolyModel,
        residue_y: Vec<Vec<f64>>,
        residue_c0: Vec<f64>,
        xi_gain: Vec<Vec<f64>>,
    },
    /// Scalar first-order plant given by a bilinear table over `(y_t, u_t)`
    /// (clamped outside the grid) plus `xi_gain * xi_t`.
    CustomTable {
        y_grid: Vec<f64>,
        u_grid: Vec<f64>,
        values: Vec<Vec<f64>>,
        xi_gain: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub n: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_xi: usize,
    pub u_bar: f64,
    pub xi_bar: f64,
    pub kind: PlantKind,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_u == 0 || self.n_y == 0 {
            return Err(Error::Config("plant order and dimensions must be >= 1".into()));
        }
        if !(self.u_bar >= 0.0) || !(self.xi_bar >= 0.0) {
            return Err(Error::Config("u_bar and xi_bar must be >= 0".into()));
        }
        match &self.kind {
            PlantKind::PolyNarx { terms } => {
                for term in terms {
                    if term.output >= self.n_y {
                        return Err(Error::Config(format!("term output {} out of range", term.output + 1)));
                    }
                    for fac in &term.monomial.0 {
                        let dim = match fac.signal {
                            Signal::Y => self.n_y,
                            Signal::U => self.n_u,
                            Signal::Xi => self.n_xi,
                        };
                        if fac.channel >= dim || fac.lag >= self.n {
                            return Err(Error::Config(format!(
                                "term '{}' references a channel or lag outside the plant",
                                term.monomial
                            )));
                        }
                    }
                }
            }
            PlantKind::ModelPlusResidue {
                base,
                residue_y,
                residue_c0,
                xi_gain,
            } => {
                if base.n() != self.n || base.n_u() != self.n_u || base.n_y() != self.n_y {
                    return Err(Error::Config("base model dimensions differ from the plant".into()));
                }
                if residue_y.len() != self.n_y || residue_y.iter().any(|r| r.len() != self.n * self.n_y) {
                    return Err(Error::Config(format!(
                        "residue_y must be {} x {}",
                        self.n_y,
                        self.n * self.n_y
                    )));
                }
                if residue_c0.len() != self.n_y {
                    return Err(Error::Config(format!("residue_c0 needs {} entries", self.n_y)));
                }
                if xi_gain.len() != self.n_y || xi_gain.iter().any(|r| r.len() != self.n_xi) {
                    return Err(Error::Config(format!("xi_gain must be {} x {}", self.n_y, self.n_xi)));
                }
            }
            PlantKind::CustomTable {
                y_grid,
                u_grid,
                values,
                ..
            } => {
                if self.n != 1 || self.n_u != 1 || self.n_y != 1 || self.n_xi > 1 {
                    return Err(Error::Config("custom-table plants are scalar and first order".into()));
                }
                let increasing = |g: &[f64]| g.len() >= 2 && g.windows(2).all(|w| w[1] > w[0]);
                if !increasing(y_grid) || !increasing(u_grid) {
                    return Err(Error::Config("table grids need >= 2 increasing points".into()));
                }
                if values.len() != y_grid.len() || values.iter().any(|r| r.len() != u_grid.len()) {
                    return Err(Error::Config("table values must be len(y_grid) x len(u_grid)".into()));
                }
            }
        }
        Ok(())
    }

    /// Whether Lipschitz continuity on compact boxes follows from the form of `g`.
    pub fn lipschitz_by_construction(&self) -> bool {
        !matches!(self.kind, PlantKind::CustomTable { .. })
    }

    /// Exact Lipschitz constant of the residue in the output window, when
    /// the plant is built around a known model.
    pub fn analytic_gamma_y(&self) -> Option<f64> {
        match &self.kind {
            PlantKind::ModelPlusResidue { residue_y, .. } => Some(
                residue_y
                    .iter()
                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        }
    }

    pub fn base_model(&self) -> Option<&PolyModel> {
        match &self.kind {
            PlantKind::ModelPlusResidue { base, .. } => Some(base),
            _ => None,
        }
    }

    /// `g` at windows ordered most recent first (`u_win[0] = u_t`).
    pub fn eval(&self, y_win: &[Vec<f64>], u_win: &[Vec<f64>], xi_win: &[Vec<f64>]) -> Vec<f64> {
        match &self.kind {
            PlantKind::PolyNarx { terms } => {
                let mut out = vec![0.0; self.n_y];
                for term in terms {
                    let v: f64 = term
                        .monomial
                        .0
                        .iter()
                        .map(|f| {
                            let x = match f.signal {
                                Signal::Y => y_win[f.lag][f.channel],
                                Signal::U => u_win[f.lag][f.channel],
                                Signal::Xi => xi_win.get(f.lag).and_then(|w| w.get(f.channel)).copied().unwrap_or(0.0),
                            };
                            x.powi(f.power as i32)
                        })
                        .product();
                    out[term.output] += term.coeff * v;
                }
                out
            }
            PlantKind::ModelPlusResidue {
                base,
                residue_y,
                residue_c0,
                xi_gain,
            } => {
                let q = RegressorWindow::new(y_win[..self.n].to_vec(), u_win[1..self.n].to_vec());
                let mut out = base.predict_raw(&q, &u_win[0]);
                let y_flat: Vec<f64> = y_win[..self.n].iter().flatten().copied().collect();
                for i in 0..self.n_y {
                    out[i] += residue_y[i].iter().zip(&y_flat).map(|(a, b)| a * b).sum::<f64>() + residue_c0[i];
                    if let Some(xi) = xi_win.first() {
                        out[i] += xi_gain[i].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                out
            }
            PlantKind::CustomTable {
                y_grid,
                u_grid,
                values,
                xi_gain,
            } => {
                let xi = xi_win.first().and_then(|v| v.first()).copied().unwrap_or(0.0);
                vec![bilinear(y_grid, u_grid, values, y_win[0][0], u_win[0][0]) + xi_gain * xi]
            }
        }
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let x = x.clamp(grid[0], grid[grid.len() - 1]);
    let k = grid.partition_point(|g| *g <= x).clamp(1, grid.len() - 1) - 1;
    let w = (x - grid[k]) / (grid[k + 1] - grid[k]);
    (k, w)
}

fn bilinear(yg: &[f64], ug: &[f64], v: &[Vec<f64>], y: f64, u: f64) -> f64 {
    let (i, wy) = bracket(yg, y);
    let (j, wu) = bracket(ug, u);
    (1.0 - wy) * ((1.0 - wu) * v[i][j] + wu * v[i][j + 1]) + wy * ((1.0 - wu) * v[i + 1][j] + wu * v[i + 1][j + 1])
}

/// One plant update; `t` only labels the error.
pub fn plant_step(
    p: &PlantSpec,
    y_win: &[Vec<f64>],
    u_win: &[Vec<f64>],
    xi_win: &[Vec<f64>],
    t: usize,
) -> Result<Vec<f64>> {
    if y_win.len() < p.n || u_win.len() < p.n {
        return Err(Error::Shape(format!("plant needs windows of length {}", p.n)));
    }
    if y_win.iter().any(|v| v.len() != p.n_y) || u_win.iter().any(|v| v.len() != p.n_u) {
        return Err(Error::Shape("plant windows have the wrong channel count".into()));
    }
    let y = p.eval(y_win, u_win, xi_win);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            t,
            message: "plant output is not finite".into(),
            partial: None,
        });
    }
    Ok(y)
}

pub mod registry {
    //! Plants with known structure. All of them have the origin as an
    //! equilibrium and are polynomial.

    use super::*;

    fn term(output: usize, coeff: f64, monomial: &str) -> PlantTerm {
        PlantTerm {
            output,
            coeff,
            monomial: monomial.parse().expect("registry monomial"),
        }
    }

    /// `y(t+1) = 0.5 y(t) + 0.3 u(t) + 0.1 xi(t)`.
    pub fn scalar_linear() -> PlantSpec {
        PlantSpec {
            n: 1,
            n_u: 1,
            n_y: 1,
            n_xi: 1,
            u_bar: 1.0,
            xi_bar: 0.01,
            kind: PlantKind::PolyNarx {
                terms: vec![term(0, 0.5, "y1"), term(0, 0.3, "u1"), term(0, 0.1, "xi1")],
            },
        }
    }

    /// Coefficients of [`scalar_linear`] over the `(1, y, u)` basis.
    pub fn scalar_linear_coefficients() -> Vec<(Vec<u32>, usize, f64)> {
        vec![(vec![0, 0], 0, 0.0), (vec![1, 0], 0, 0.5), (vec![0, 1], 0, 0.3)]
    }

    /// Two-input two-output quadratic NARX with cross couplings.
    pub fn mimo_cross() -> PlantSpec {
        PlantSpec {
            n: 1,
            n_u: 2,
            n_y: 2,
            n_xi: 2,
            u_bar: 1.0,
            xi_bar: 0.01,
            kind: PlantKind::PolyNarx {
                terms: mimo_cross_coefficients()
                    .into_iter()
                    .map(|(e, out, c)| PlantTerm {
                        output: out,
                        coeff: c,
                        monomial: monomial_from_exponent(&e, 1, 2, 2),
                    })
                    .chain([term(0, 0.05, "xi1"), term(1, 0.05, "xi2")])
                    .collect(),
            },
        }
    }

    /// Non-zero coefficients of [`mimo_cross`] over the degree-2 basis in
    /// `(y1, y2, u1, u2)`.
    pub fn mimo_cross_coefficients() -> Vec<(Vec<u32>, usize, f64)> {
        vec![
            (vec![1, 0, 0, 0], 0, 0.4),
            (vec![0, 1, 0, 0], 0, 0.1),
            (vec![0, 0, 1, 0], 0, 0.5),
            (vec![0, 0, 0, 1], 0, 0.1),
            (vec![1, 0, 1, 0], 0, 0.05),
            (vec![1, 0, 0, 0], 1, -0.1),
            (vec![0, 1, 0, 0], 1, 0.3),
            (vec![0, 0, 1, 0], 1, 0.2),
            (vec![0, 0, 0, 1], 1, 0.6),
            (vec![0, 0, 0, 2], 1, -0.05),
            (vec![0, 1, 0, 1], 1, 0.04),
        ]
    }

    /// Converts an exponent over the flattened regressor into plant factors.
    pub fn monomial_from_exponent(e: &[u32], n: usize, n_y: usize, n_u: usize) -> Monomial {
        let mut factors = Vec::new();
        for (c, &p) in e.iter().enumerate() {
            if p == 0 {
                continue;
            }
            let (signal, lag, channel) = if c < n * n_y {
                (Signal::Y, c / n_y, c % n_y)
            } else if c < n * n_y + (n - 1) * n_u {
                let k = c - n * n_y;
                (Signal::U, 1 + k / n_u, k % n_u)
            } else {
                (Signal::U, 0, c - n * n_y - (n - 1) * n_u)
            };
            factors.push(Factor {
                signal,
                channel,
                lag,
                power: p,
            });
        }
        Monomial(factors)
    }

    /// `y(t+1) = a y(t) + b u(t)` as a model.
    pub fn scalar_linear_model(a: f64, b: f64) -> PolyModel {
        let mut m = PolyModel::zeros(1, 1, 1, 1).expect("scalar model");
        m.set_coefficient(&[1, 0], 0, a).expect("y term");
        m.set_coefficient(&[0, 1], 0, b).expect("u term");
        m
    }

    /// Scalar plant `g = base + c_y y(t) + xi_gain xi(t)`; its residue
    /// against `base` is Lipschitz in `y` with constant `|c_y|`.
    pub fn model_plus_residue(base: PolyModel, c_y: f64, xi_gain: f64, u_bar: f64, xi_bar: f64) -> PlantSpec {
        PlantSpec {
            n: base.n(),
            n_u: 1,
            n_y: 1,
            n_xi: 1,
            u_bar,
            xi_bar,
            kind: PlantKind::ModelPlusResidue {
                residue_y: vec![{
                    let mut r = vec![0.0; base.n()];
                    r[0] = c_y;
                    r
                }],
                base,
                residue_c0: vec![0.0],
                xi_gain: vec![vec![xi_gain]],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_parsing() {
        let m: Monomial = "y1*u2^2*xi1(t-1)".parse().unwrap();
        assert_eq!(m.0.len(), 3);
        assert_eq!(m.0[1], Factor { signal: Signal::U, channel: 1, lag: 0, power: 2 });
        assert_eq!(m.0[2].lag, 1);
        assert_eq!(m.to_string(), "y1*u2^2*xi1(t-1)");
        assert_eq!("1".parse::<Monomial>().unwrap(), Monomial::default());
        assert!("z1".parse::<Monomial>().is_err());
        assert!("y0".parse::<Monomial>().is_err());
        assert!("y1(s)".parse::<Monomial>().is_err());
    }

    #[test]
    fn registry_plants_rest_at_origin() {
        for p in [
            registry::scalar_linear(),
            registry::mimo_cross(),
            registry::model_plus_residue(registry::scalar_linear_model(0.5, 0.3), 0.2, 1.0, 1.0, 0.01),
        ] {
            p.validate().unwrap();
            let y = vec![vec![0.0; p.n_y]; p.n];
            let u = vec![vec![0.0; p.n_u]; p.n];
            let xi = vec![vec![0.0; p.n_xi]; p.n];
            assert!(plant_step(&p, &y, &u, &xi, 0).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn scalar_linear_by_hand() {
        let p = registry::scalar_linear();
        let y = plant_step(&p, &[vec![1.0]], &[vec![1.0]], &[vec![1.0]], 0).unwrap();
        assert!((y[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn residue_plant_on_zero_base() {
        let base = PolyModel::zeros(1, 1, 1, 1).unwrap();
        let p = registry::model_plus_residue(base, 0.35, 0.0, 1.0, 0.0);
        for y in [-1.0, 0.25, 2.0] {
            let out = plant_step(&p, &[vec![y]], &[vec![0.7]], &[vec![0.0]], 0).unwrap();
            assert!((out[0] - 0.35 * y).abs() < 1e-15);
        }
        assert_eq!(p.analytic_gamma_y(), Some(0.35));
    }

    #[test]
    fn table_plant_interpolates() {
        let p = PlantSpec {
            n: 1,
            n_u: 1,
            n_y: 1,
            n_xi: 1,
            u_bar: 1.0,
            xi_bar: 0.1,
            kind: PlantKind::CustomTable {
                y_grid: vec![-1.0, 1.0],
                u_grid: vec![-1.0, 1.0],
                values: vec![vec![-1.0, 0.0], vec![0.0, 1.0]],
                xi_gain: 2.0,
            },
        };
        p.validate().unwrap();
        // bilinear of 0.5 y + 0.5 u
        let y = plant_step(&p, &[vec![0.2]], &[vec![0.4]], &[vec![0.1]], 0).unwrap();
        assert!((y[0] - (0.3 + 0.2)).abs() < 1e-12);
        let clamped = plant_step(&p, &[vec![5.0]], &[vec![1.0]], &[vec![0.0]], 0).unwrap();
        assert!((clamped[0] - 1.0).abs() < 1e-12);
        assert!(!p.lipschitz_by_construction());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut p = registry::scalar_linear();
        p.kind = PlantKind::PolyNarx {
            terms: vec![PlantTerm { output: 0, coeff: 1.0, monomial: "y1(t-1)".parse().unwrap() }],
        };
        assert!(p.validate().is_err());
        let mut p = registry::scalar_linear();
        p.n_y = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn diverging_output_is_reported() {
        let p = PlantSpec {
            kind: PlantKind::PolyNarx {
                terms: vec![PlantTerm { output: 0, coeff: 1.0, monomial: "y1^3".parse().unwrap() }],
            },
            ..registry::scalar_linear()
        };
        let err = plant_step(&p, &[vec![1e200]], &[vec![0.0]], &[vec![0.0]], 7).unwrap_err();
        assert!(matches!(err, Error::Divergence { t: 7, .. }));
    }
}
