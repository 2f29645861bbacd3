//! Linear controller: incremental extended PID and its virtual-reference
//! tuning from data.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// `u_t = u_{t-1} + sum_i B_i e_{t-i}`, `B_i` being `n_u x n_y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub n_theta: usize,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
}

impl PidGains {
    pub fn zeros(n_theta: usize, n_u: usize, n_y: usize) -> Self {
        PidGains {
            n_theta,
            b: vec![vec![vec![0.0; n_y]; n_u]; n_theta + 1],
        }
    }

    /// Rebuilds gains from `theta` in (i, row, column) order.
    pub fn from_theta(n_theta: usize, n_u: usize, n_y: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != n_u * n_y * (n_theta + 1) {
            return Err(Error::Shape(format!(
                "theta needs {} entries, got {}",
                n_u * n_y * (n_theta + 1),
                theta.len()
            )));
        }
        let b = theta
            .chunks(n_u * n_y)
            .map(|m| m.chunks(n_y).map(<[f64]>::to_vec).collect())
            .collect();
        Ok(PidGains { n_theta, b })
    }

    pub fn theta(&self) -> Vec<f64> {
        self.b.iter().flatten().flatten().copied().collect()
    }

    pub fn n_u(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn n_y(&self) -> usize {
        self.b.first().and_then(|m| m.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.len() != self.n_theta + 1 {
            return Err(Error::Schema(format!(
                "expected {} gain matrices, found {}",
                self.n_theta + 1,
                self.b.len()
            )));
        }
        let (n_u, n_y) = (self.n_u(), self.n_y());
        if n_u == 0 || n_y == 0 {
            return Err(Error::Schema("gain matrices must be non-empty".into()));
        }
        if self.b.iter().any(|m| m.len() != n_u || m.iter().any(|r| r.len() != n_y)) {
            return Err(Error::Schema("gain matrices must share one shape".into()));
        }
        if self.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericRange("gains must be finite".into()));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let g: PidGains = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    pub u_lin_prev: Vec<f64>,
    /// `e_{t-1}, .., e_{t-n_theta-1}` before a step; most recent first.
    pub e_hist: VecDeque<Vec<f64>>,
}

impl PidState {
    /// Controller at rest with zero-padded error history.
    pub fn new(g: &PidGains) -> Self {
        PidState {
            u_lin_prev: vec![0.0; g.n_u()],
            e_hist: std::iter::repeat_n(vec![0.0; g.n_y()], g.n_theta + 1).collect(),
        }
    }
}

pub fn pid_step(g: &PidGains, s: &PidState, e_t: &[f64]) -> (Vec<f64>, PidState) {
    let mut hist = s.e_hist.clone();
    hist.push_front(e_t.to_vec());
    hist.truncate(g.n_theta + 1);
    let mut u = s.u_lin_prev.clone();
    for (b, e) in g.b.iter().zip(&hist) {
        for (uk, row) in u.iter_mut().zip(b) {
            *uk += row.iter().zip(e).map(|(bij, ej)| bij * ej).sum::<f64>();
        }
    }
    let next = PidState {
        u_lin_prev: u.clone(),
        e_hist: hist,
    };
    (u, next)
}

/// Diagonal first-order reference model, channel `i` being
/// `(1 - a_i) z^-1 / (1 - a_i z^-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceModel {
    pub poles: Vec<f64>,
}

impl ReferenceModel {
    pub fn new(poles: Vec<f64>) -> Result<Self> {
        let m = ReferenceModel { poles };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poles.is_empty() {
            return Err(Error::Config("reference model needs at least one pole".into()));
        }
        if let Some(a) = self.poles.iter().find(|a| !(a.abs() < 1.0)) {
            return Err(Error::Config(format!("reference model pole {a} is not stable")));
        }
        Ok(())
    }
}

pub fn simulate_reference_model(m: &ReferenceModel, r: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    m.validate()?;
    if r.is_empty() {
        return Err(Error::InsufficientData("reference sequence is empty".into()));
    }
    let n = m.poles.len();
    if r.iter().any(|v| v.len() != n) {
        return Err(Error::Shape(format!("reference must have {n} channels")));
    }
    let mut y = Vec::with_capacity(r.len());
    y.push(vec![0.0; n]);
    for t in 0..r.len() - 1 {
        let next = (0..n)
            .map(|i| m.poles[i] * y[t][i] + (1.0 - m.poles[i]) * r[t][i])
            .collect();
        y.push(next);
    }
    Ok(y)
}

/// Off-line inversion of the reference model; returns `L - 1` samples.
pub fn virtual_reference(m: &ReferenceModel, y: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, usize)> {
    m.validate()?;
    if y.len() < 2 {
        return Err(Error::InsufficientData("virtual reference needs at least 2 samples".into()));
    }
    let n = m.poles.len();
    if y.iter().any(|v| v.len() != n) {
        return Err(Error::Shape(format!("output must have {n} channels")));
    }
    let rv: Vec<Vec<f64>> = y
        .windows(2)
        .map(|w| {
            (0..n)
                .map(|i| (w[1][i] - m.poles[i] * w[0][i]) / (1.0 - m.poles[i]))
                .collect()
        })
        .collect();
    let len = rv.len();
    Ok((rv, len))
}

#[derive(Debug, Clone)]
pub struct VrftFit {
    pub gains: PidGains,
    /// `J_VR` at the optimum.
    pub residual: f64,
    pub rows: usize,
}

/// Least-squares fit of the PID increments to the virtual error.
pub fn vrft_fit(
    m: &ReferenceModel,
    u_lin: &[Vec<f64>],
    y: &[Vec<f64>],
    n_theta: usize,
) -> Result<VrftFit> {
    if u_lin.len() != y.len() {
        return Err(Error::Shape("input and output sequences must be aligned".into()));
    }
    if y.len() < n_theta + 2 {
        return Err(Error::InsufficientData(format!(
            "need at least {} samples for n_theta={n_theta}",
            n_theta + 2
        )));
    }
    let n_y = m.poles.len();
    let n_u = u_lin.first().map_or(0, Vec::len);
    if n_u == 0 || u_lin.iter().any(|v| v.len() != n_u) {
        return Err(Error::Shape("input sequence has inconsistent channels".into()));
    }
    let (rv, valid) = virtual_reference(m, y)?;
    let ev: Vec<Vec<f64>> = (0..valid)
        .map(|t| (0..n_y).map(|i| rv[t][i] - y[t][i]).collect())
        .collect();

    let first = n_theta.max(1);
    if first >= valid {
        return Err(Error::InsufficientData(format!(
            "no complete regression rows for n_theta={n_theta} with {} samples",
            y.len()
        )));
    }
    let rows = valid - first;
    let cols = n_y * (n_theta + 1);
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DMatrix::zeros(rows, n_u);
    for (r, t) in (first..valid).enumerate() {
        for i in 0..=n_theta {
            for j in 0..n_y {
                a[(r, i * n_y + j)] = ev[t - i][j];
            }
        }
        for k in 0..n_u {
            b[(r, k)] = u_lin[t][k] - u_lin[t - 1][k];
        }
    }
    let x = linalg::least_squares(&a, &b, 0.0).map_err(|e| match e {
        Error::Singular(_) => Error::Singular(
            "virtual error regressors are rank deficient; use richer data or a smaller n_theta".into(),
        ),
        other => other,
    })?;
    let residual = (&a * &x - &b).norm_squared();
    let mut gains = PidGains::zeros(n_theta, n_u, n_y);
    for i in 0..=n_theta {
        for k in 0..n_u {
            for j in 0..n_y {
                gains.b[i][k][j] = x[(i * n_y + j, k)];
            }
        }
    }
    Ok(VrftFit {
        gains,
        residual,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pid_step_cases() {
        let g = PidGains::zeros(2, 1, 1);
        let mut s = PidState::new(&g);
        s.u_lin_prev = vec![0.7];
        let (u, _) = pid_step(&g, &s, &[3.0]);
        assert_eq!(u, vec![0.7]);

        let g = PidGains {
            n_theta: 1,
            b: vec![vec![vec![1.0]], vec![vec![-0.5]]],
        };
        let mut s = PidState::new(&g);
        s.e_hist = VecDeque::from(vec![vec![1.0], vec![0.0]]);
        let (u, s2) = pid_step(&g, &s, &[1.0]);
        assert_eq!(u, vec![0.5]);
        assert_eq!(s2.e_hist, VecDeque::from(vec![vec![1.0], vec![1.0]]));
        assert_eq!(s2.u_lin_prev, vec![0.5]);

        let mut s = PidState::new(&g);
        s.u_lin_prev = vec![0.2];
        for _ in 0..10 {
            let (u, next) = pid_step(&g, &s, &[0.0]);
            assert_eq!(u, vec![0.2]);
            s = next;
        }
    }

    #[test]
    fn theta_order() {
        let g = PidGains {
            n_theta: 1,
            b: vec![vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]]],
        };
        assert_eq!(g.theta(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(PidGains::from_theta(1, 1, 2, &g.theta()).unwrap(), g);
        let json = g.to_json_string().unwrap();
        assert!(json.contains("\"B\""));
        assert_eq!(PidGains::from_json_str(&json).unwrap(), g);
    }

    #[test]
    fn reference_model_cases() {
        let delay = ReferenceModel::new(vec![0.0]).unwrap();
        let r: Vec<Vec<f64>> = [1.0, 2.0, 3.0].iter().map(|v| vec![*v]).collect();
        assert_eq!(simulate_reference_model(&delay, &r).unwrap(), vec![vec![0.0], vec![1.0], vec![2.0]]);

        let m = ReferenceModel::new(vec![0.5]).unwrap();
        let y = simulate_reference_model(&m, &vec![vec![1.0]; 4]).unwrap();
        assert_eq!(y, vec![vec![0.0], vec![0.5], vec![0.75], vec![0.875]]);
        let y = simulate_reference_model(&m, &vec![vec![0.0]; 4]).unwrap();
        assert!(y.iter().all(|v| v[0] == 0.0));
        let long = simulate_reference_model(&m, &vec![vec![1.0]; 60]).unwrap();
        assert!((long[59][0] - 1.0).abs() < 1e-12);

        assert!(ReferenceModel::new(vec![1.0]).is_err());
        assert!(ReferenceModel::new(vec![-1.2]).is_err());
    }

    #[test]
    fn virtual_reference_cases() {
        let delay = ReferenceModel::new(vec![0.0]).unwrap();
        let (rv, n) = virtual_reference(&delay, &[vec![4.0], vec![5.0], vec![6.0]]).unwrap();
        assert_eq!((rv, n), (vec![vec![5.0], vec![6.0]], 2));
        let m = ReferenceModel::new(vec![0.5]).unwrap();
        let (rv, n) = virtual_reference(&m, &[vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!((rv, n), (vec![vec![2.0], vec![1.0]], 2));
        assert!(matches!(virtual_reference(&m, &[vec![0.0]]), Err(Error::InsufficientData(_))));
    }

    /// Loop in which the closed loop equals `M` exactly: `y = M r`,
    /// `u = PID(theta*) (r - y)`.
    fn matched_loop(theta: &PidGains, m: &ReferenceModel, len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_y = m.poles.len();
        let r: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..n_y).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y = simulate_reference_model(m, &r).unwrap();
        let mut s = PidState::new(theta);
        let mut u = Vec::new();
        for t in 0..len {
            let e: Vec<f64> = (0..n_y).map(|i| r[t][i] - y[t][i]).collect();
            let (ut, next) = pid_step(theta, &s, &e);
            u.push(ut);
            s = next;
        }
        (u, y)
    }

    #[test]
    fn vrft_recovers_generating_pid() {
        let m = ReferenceModel::new(vec![0.6, 0.3]).unwrap();
        let star = PidGains {
            n_theta: 2,
            b: vec![
                vec![vec![0.8, -0.1], vec![0.2, 0.5]],
                vec![vec![-0.4, 0.05], vec![0.0, -0.2]],
                vec![vec![0.1, 0.0], vec![-0.05, 0.02]],
            ],
        };
        let (u, y) = matched_loop(&star, &m, 200, 4);
        let fit = vrft_fit(&m, &u, &y, 2).unwrap();
        for (a, b) in fit.gains.theta().iter().zip(star.theta()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(fit.residual <= 1e-10);
    }

    #[test]
    fn vrft_trivial_cases() {
        let m = ReferenceModel::new(vec![0.5]).unwrap();
        let y: Vec<Vec<f64>> = (0..30).map(|t| vec![((t * 7) % 11) as f64 / 11.0]).collect();
        let fit = vrft_fit(&m, &vec![vec![0.0]; 30], &y, 1).unwrap();
        assert!(fit.gains.theta().iter().all(|v| v.abs() < 1e-12));

        // e^v = 1 throughout, increments of 0.3
        let delay = ReferenceModel::new(vec![0.0]).unwrap();
        let y: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let u: Vec<Vec<f64>> = (0..10).map(|t| vec![0.3 * t as f64]).collect();
        let fit = vrft_fit(&delay, &u, &y, 0).unwrap();
        assert!((fit.gains.b[0][0][0] - 0.3).abs() < 1e-12);

        assert!(matches!(vrft_fit(&m, &vec![vec![0.0]; 2], &vec![vec![0.0]; 2], 1), Err(Error::InsufficientData(_))));
        assert!(matches!(vrft_fit(&m, &vec![vec![1.0]; 20], &vec![vec![1.0]; 20], 1), Err(Error::Singular(_))));
    }

    proptest! {
        #[test]
        fn reference_model_inverts_exactly(
            a in -0.95f64..0.95,
            r in proptest::collection::vec(-2.0f64..2.0, 2..50),
        ) {
            let m = ReferenceModel::new(vec![a]).unwrap();
            let r: Vec<Vec<f64>> = r.into_iter().map(|v| vec![v]).collect();
            let y = simulate_reference_model(&m, &r).unwrap();
            let (rv, n) = virtual_reference(&m, &y).unwrap();
            prop_assert_eq!(n, r.len() - 1);
            for t in 0..n {
                prop_assert!((rv[t][0] - r[t][0]).abs() <= 1e-12);
            }
        }

        #[test]
        fn pid_step_is_linear(
            th in proptest::collection::vec(-2.0f64..2.0, 6),
            e in proptest::collection::vec(-1.0f64..1.0, 6),
            u0 in -1.0f64..1.0,
        ) {
            let g = PidGains::from_theta(2, 1, 2, &th).unwrap();
            let mut s = PidState::new(&g);
            s.u_lin_prev = vec![u0];
            s.e_hist = VecDeque::from(vec![vec![e[2], e[3]], vec![e[4], e[5]], vec![0.0, 0.0]]);
            let (u, _) = pid_step(&g, &s, &[e[0], e[1]]);
            let mut s2 = s.clone();
            s2.u_lin_prev = vec![2.0 * u0];
            s2.e_hist.iter_mut().flatten().for_each(|v| *v *= 2.0);
            let (u2, _) = pid_step(&g, &s2, &[2.0 * e[0], 2.0 * e[1]]);
            prop_assert!((u2[0] - 2.0 * u[0]).abs() <= 1e-12);
        }
    }
}
