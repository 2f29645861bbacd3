//! Polynomial NARX one-step predictor: basis enumeration, evaluation and
//! least-squares identification.
//!
//! The regressor fed to the basis is the flattened window
//! `(y_t, .., y_{t-n+1}, u_{t-1}, .., u_{t-n+1}, u_t)` with each vector
//! expanded channel by channel, so the current input always occupies the
//! trailing `n_u` coordinates.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_BASIS_CAP: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    m: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
}

/// `C(m + d, d)`, saturating.
pub fn monomial_count(m: usize, d: u32) -> u128 {
    let mut c: u128 = 1;
    for k in 1..=d as u128 {
        c = c.saturating_mul(m as u128 + k) / k;
    }
    c
}

/// Every multi-index of total degree `<= d` over `m` variables, graded, and
/// lexicographic (first variable highest) within a degree.
pub fn enumerate_monomials(m: usize, d: u32, cap: usize) -> Result<PolyBasis> {
    if m == 0 {
        return Err(Error::Shape("regressor dimension must be >= 1".into()));
    }
    if monomial_count(m, d) > cap as u128 {
        return Err(Error::BasisTooLarge { m, degree: d, cap });
    }
    fn fill(pos: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = remaining;
            out.push(cur.clone());
            return;
        }
        for e in (0..=remaining).rev() {
            cur[pos] = e;
            fill(pos + 1, remaining - e, cur, out);
        }
        cur[pos] = 0;
    }
    let mut exponents = Vec::with_capacity(monomial_count(m, d) as usize);
    let mut cur = vec![0; m];
    for deg in 0..=d {
        fill(0, deg, &mut cur, &mut exponents);
    }
    Ok(PolyBasis {
        m,
        degree: d,
        exponents,
    })
}

impl PolyBasis {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn index_of(&self, exponent: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e == exponent)
    }

    /// Monomial values at a flattened argument of length `m`.
    pub fn eval_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.m {
            return Err(Error::Shape(format!(
                "basis expects {} coordinates, got {}",
                self.m,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.degree as usize;
        // powers[c * (d + 1) + e] = x_c^e, with 0^0 = 1
        let mut powers = vec![1.0; self.m * (d + 1)];
        for (c, &xc) in x.iter().enumerate() {
            for e in 1..=d {
                powers[c * (d + 1) + e] = powers[c * (d + 1) + e - 1] * xc;
            }
        }
        for (slot, exp) in out.iter_mut().zip(&self.exponents) {
            *slot = exp
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(c, &e)| powers[c * (d + 1) + e as usize])
                .product();
        }
    }
}

/// Past outputs `y_t..y_{t-n+1}` and past inputs `u_{t-1}..u_{t-n+1}`,
/// most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorWindow {
    pub y_hist: Vec<Vec<f64>>,
    pub u_hist: Vec<Vec<f64>>,
}

impl RegressorWindow {
    pub fn new(y_hist: Vec<Vec<f64>>, u_hist: Vec<Vec<f64>>) -> Self {
        RegressorWindow { y_hist, u_hist }
    }

    pub fn zeros(n: usize, n_y: usize, n_u: usize) -> Self {
        RegressorWindow {
            y_hist: vec![vec![0.0; n_y]; n],
            u_hist: vec![vec![0.0; n_u]; n.saturating_sub(1)],
        }
    }

    /// Window ending at record `t` of a dataset (`t >= n - 1`).
    pub fn from_records(y: &[Vec<f64>], u: &[Vec<f64>], t: usize, n: usize) -> Self {
        RegressorWindow {
            y_hist: (0..n).map(|k| y[t - k].clone()).collect(),
            u_hist: (1..n).map(|k| u[t - k].clone()).collect(),
        }
    }

    pub fn check(&self, n: usize, n_y: usize, n_u: usize) -> Result<()> {
        if self.y_hist.len() != n || self.u_hist.len() + 1 != n.max(1) {
            return Err(Error::Shape(format!(
                "window needs {n} outputs and {} inputs, got {} and {}",
                n.saturating_sub(1),
                self.y_hist.len(),
                self.u_hist.len()
            )));
        }
        if self.y_hist.iter().any(|v| v.len() != n_y) || self.u_hist.iter().any(|v| v.len() != n_u) {
            return Err(Error::Shape("window vectors have the wrong channel count".into()));
        }
        Ok(())
    }

    /// Writes `(q, u)` flattened; `out` must hold `n * (n_y + n_u)` values.
    pub(crate) fn flatten_into(&self, u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for v in self.y_hist.iter().chain(&self.u_hist) {
            out.extend_from_slice(v);
        }
        out.extend_from_slice(u);
    }

    pub fn flatten(&self, u: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(u, &mut out);
        out
    }
}

pub fn eval_basis(b: &PolyBasis, q: &RegressorWindow, u: &[f64]) -> Result<Vec<f64>> {
    b.eval_flat(&q.flatten(u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    n: usize,
    n_u: usize,
    n_y: usize,
    basis: PolyBasis,
    /// `N x n_y`, column `i` predicts output channel `i`.
    alpha: Vec<Vec<f64>>,
    ridge: f64,
}

impl PolyModel {
    pub fn regressor_dim(n: usize, n_y: usize, n_u: usize) -> usize {
        n * (n_y + n_u)
    }

    /// All-zero model over the full basis of the given degree.
    pub fn zeros(n: usize, n_u: usize, n_y: usize, degree: u32) -> Result<Self> {
        if n == 0 || n_u == 0 || n_y == 0 {
            return Err(Error::Shape("order and dimensions must be >= 1".into()));
        }
        let basis = enumerate_monomials(Self::regressor_dim(n, n_y, n_u), degree, DEFAULT_BASIS_CAP)?;
        let alpha = vec![vec![0.0; n_y]; basis.len()];
        Ok(PolyModel {
            n,
            n_u,
            n_y,
            basis,
            alpha,
            ridge: 0.0,
        })
    }

    pub fn from_parts(
        n: usize,
        n_u: usize,
        n_y: usize,
        basis: PolyBasis,
        alpha: Vec<Vec<f64>>,
        ridge: f64,
    ) -> Result<Self> {
        if n == 0 || n_u == 0 || n_y == 0 {
            return Err(Error::Shape("order and dimensions must be >= 1".into()));
        }
        if basis.m() != Self::regressor_dim(n, n_y, n_u) {
            return Err(Error::Shape(format!(
                "basis dimension {} does not match n*(n_y+n_u) = {}",
                basis.m(),
                Self::regressor_dim(n, n_y, n_u)
            )));
        }
        if alpha.len() != basis.len() || alpha.iter().any(|r| r.len() != n_y) {
            return Err(Error::Shape(format!(
                "alpha must be {} x {n_y}",
                basis.len()
            )));
        }
        if alpha.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericRange("alpha has non-finite entries".into()));
        }
        Ok(PolyModel {
            n,
            n_u,
            n_y,
            basis,
            alpha,
            ridge,
        })
    }

    /// Sets the coefficient of one monomial for one output channel.
    pub fn set_coefficient(&mut self, exponent: &[u32], output: usize, value: f64) -> Result<()> {
        let k = self
            .basis
            .index_of(exponent)
            .ok_or_else(|| Error::Shape(format!("monomial {exponent:?} is not in the basis")))?;
        if output >= self.n_y {
            return Err(Error::Shape(format!("output {output} out of range")));
        }
        self.alpha[k][output] = value;
        Ok(())
    }

    pub fn coefficient(&self, exponent: &[u32], output: usize) -> Option<f64> {
        self.basis.index_of(exponent).map(|k| self.alpha[k][output])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn basis(&self) -> &PolyBasis {
        &self.basis
    }

    pub fn alpha(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Prediction at a flattened regressor without any finiteness check.
    pub(crate) fn predict_flat(&self, x: &[f64], phi: &mut Vec<f64>, out: &mut [f64]) {
        phi.resize(self.basis.len(), 0.0);
        self.basis.eval_into(x, phi);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (p, row) in phi.iter().zip(&self.alpha) {
            if *p == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * p;
            }
        }
    }

    pub fn predict_raw(&self, q: &RegressorWindow, u: &[f64]) -> Vec<f64> {
        let mut phi = Vec::new();
        let mut out = vec![0.0; self.n_y];
        self.predict_flat(&q.flatten(u), &mut phi, &mut out);
        out
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))? + "\n")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
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

pub fn predict(f: &PolyModel, q: &RegressorWindow, u: &[f64]) -> Result<Vec<f64>> {
    q.check(f.n, f.n_y, f.n_u)?;
    if u.len() != f.n_u {
        return Err(Error::Shape(format!("input has {} channels, model expects {}", u.len(), f.n_u)));
    }
    let y = f.predict_raw(q, u);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericRange("prediction overflowed; regressor too large".into()));
    }
    Ok(y)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n: usize,
    n_u: usize,
    n_y: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
    alpha: Vec<Vec<f64>>,
    ridge: f64,
}

impl From<&PolyModel> for ModelFile {
    fn from(m: &PolyModel) -> Self {
        ModelFile {
            n: m.n,
            n_u: m.n_u,
            n_y: m.n_y,
            degree: m.basis.degree,
            exponents: m.basis.exponents.clone(),
            alpha: m.alpha.clone(),
            ridge: m.ridge,
        }
    }
}

impl TryFrom<ModelFile> for PolyModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let m = PolyModel::regressor_dim(f.n, f.n_y, f.n_u);
        let mut seen = std::collections::BTreeSet::new();
        for e in &f.exponents {
            if e.len() != m || e.iter().sum::<u32>() > f.degree {
                return Err(Error::Schema(format!("exponent {e:?} invalid for m={m}, degree={}", f.degree)));
            }
            if !seen.insert(e.clone()) {
                return Err(Error::Schema(format!("duplicate exponent {e:?}")));
            }
        }
        let basis = PolyBasis {
            m,
            degree: f.degree,
            exponents: f.exponents,
        };
        PolyModel::from_parts(f.n, f.n_u, f.n_y, basis, f.alpha, f.ridge)
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: PolyModel,
    /// Root-mean-square one-step residual per output channel.
    pub rms_residual: Vec<f64>,
    pub samples: usize,
}

pub fn fit_model(d: &DataSet, n: usize, degree: u32, ridge: f64) -> Result<FittedModel> {
    fit_model_capped(d, n, degree, ridge, DEFAULT_BASIS_CAP)
}

pub fn fit_model_capped(d: &DataSet, n: usize, degree: u32, ridge: f64, cap: usize) -> Result<FittedModel> {
    if n == 0 {
        return Err(Error::Config("model order n must be >= 1".into()));
    }
    if d.len() <= n {
        return Err(Error::InsufficientData(format!(
            "need more than n={n} records, got {}",
            d.len()
        )));
    }
    let (n_u, n_y) = (d.n_u(), d.n_y());
    let basis = enumerate_monomials(PolyModel::regressor_dim(n, n_y, n_u), degree, cap)?;
    let rows = d.len() - n;
    let cols = basis.len();
    let mut phi = DMatrix::zeros(rows, cols);
    let mut target = DMatrix::zeros(rows, n_y);
    let mut flat = Vec::new();
    let mut buf = vec![0.0; cols];
    for (r, t) in (n - 1..d.len() - 1).enumerate() {
        let q = RegressorWindow::from_records(d.y(), d.u(), t, n);
        q.flatten_into(&d.u()[t], &mut flat);
        basis.eval_into(&flat, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            phi[(r, c)] = *v;
        }
        for (i, v) in d.y()[t + 1].iter().enumerate() {
            target[(r, i)] = *v;
        }
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericRange("basis values overflow on the dataset".into()));
    }
    let coef = linalg::least_squares(&phi, &target, ridge)?;
    let resid = &phi * &coef - &target;
    let rms_residual = (0..n_y)
        .map(|i| (resid.column(i).norm_squared() / rows as f64).sqrt())
        .collect();
    let alpha = (0..cols)
        .map(|k| (0..n_y).map(|i| coef[(k, i)]).collect())
        .collect();
    let model = PolyModel::from_parts(n, n_u, n_y, basis, alpha, ridge)?;
    Ok(FittedModel {
        model,
        rms_residual,
        samples: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_excitation, ExcitationKind, ExcitationSpec};
    use proptest::prelude::*;

    fn brute_force_monomials(m: usize, d: u32) -> Vec<Vec<u32>> {
        // every vector in {0..=d}^m with sum <= d
        let mut all = Vec::new();
        let total = (d as usize + 1).pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let e: Vec<u32> = (0..m)
                .map(|_| {
                    let v = (c % (d as usize + 1)) as u32;
                    c /= d as usize + 1;
                    v
                })
                .collect();
            if e.iter().sum::<u32>() <= d {
                all.push(e);
            }
        }
        all
    }

    #[test]
    fn small_bases() {
        let b = enumerate_monomials(1, 1, 100).unwrap();
        assert_eq!(b.exponents(), &[vec![0], vec![1]]);
        let b = enumerate_monomials(3, 0, 100).unwrap();
        assert_eq!(b.exponents(), &[vec![0, 0, 0]]);
        let b = enumerate_monomials(2, 2, 100).unwrap();
        assert_eq!(
            b.exponents(),
            &[vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
    }

    #[test]
    fn enumeration_matches_brute_force() {
        for m in 1..=4 {
            for d in 0..=4 {
                let b = enumerate_monomials(m, d, 100_000).unwrap();
                let mut want = brute_force_monomials(m, d);
                let mut got = b.exponents().to_vec();
                assert_eq!(got.len() as u128, monomial_count(m, d));
                want.sort();
                got.sort();
                assert_eq!(got, want, "m={m} d={d}");
                // graded
                assert!(b.exponents().windows(2).all(|w| w[0].iter().sum::<u32>() <= w[1].iter().sum::<u32>()));
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(
            enumerate_monomials(10, 10, 20_000),
            Err(Error::BasisTooLarge { .. })
        ));
    }

    #[test]
    fn basis_values_by_hand() {
        let b = enumerate_monomials(2, 2, 100).unwrap();
        assert_eq!(b.eval_flat(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(b.eval_flat(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = enumerate_monomials(4, 0, 100).unwrap();
        let q = RegressorWindow::new(vec![vec![3.0], vec![1.0]], vec![vec![2.0]]);
        assert_eq!(eval_basis(&c, &q, &[5.0]).unwrap(), vec![1.0]);
        assert!(matches!(eval_basis(&b, &q, &[5.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn flatten_order_puts_current_input_last() {
        let q = RegressorWindow::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0]]);
        assert_eq!(q.flatten(&[6.0]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    fn simulate(len: usize, seed: u64, step: impl Fn(f64, f64) -> f64) -> DataSet {
        let spec = ExcitationSpec {
            kind: ExcitationKind::MultilevelRandom,
            amplitude: 1.0,
            length: len,
            hold: 4,
            seed,
        };
        let u = generate_excitation(&spec, 1, 1.0).unwrap();
        let mut y = vec![vec![0.0]];
        for t in 0..len - 1 {
            let next = step(y[t][0], u[t][0]);
            y.push(vec![next]);
        }
        DataSet::new(u, y, Some(1.0)).unwrap()
    }

    #[test]
    fn recovers_linear_generator() {
        let d = simulate(200, 11, |y, u| 0.5 * y + 0.3 * u);
        let fit = fit_model(&d, 1, 1, 0.0).unwrap();
        let a = fit.model.alpha();
        assert!(a[0][0].abs() < 1e-6);
        assert!((a[1][0] - 0.5).abs() < 1e-6);
        assert!((a[2][0] - 0.3).abs() < 1e-6);
        assert!(fit.rms_residual[0] < 1e-10);
        let q = RegressorWindow::new(vec![vec![1.0]], vec![]);
        let y = predict(&fit.model, &q, &[1.0]).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn recovers_quadratic_generator() {
        let d = simulate(200, 5, |y, u| 0.2 * y * y + u);
        let fit = fit_model(&d, 1, 2, 0.0).unwrap();
        let m = &fit.model;
        let want = [
            (vec![0, 0], 0.0),
            (vec![1, 0], 0.0),
            (vec![0, 1], 1.0),
            (vec![2, 0], 0.2),
            (vec![1, 1], 0.0),
            (vec![0, 2], 0.0),
        ];
        for (e, v) in want {
            assert!((m.coefficient(&e, 0).unwrap() - v).abs() < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn zero_outputs_give_zero_model() {
        let u = (0..50).map(|k| vec![((k * 7) % 5) as f64 / 5.0]).collect();
        let y = vec![vec![0.0]; 50];
        let d = DataSet::new(u, y, None).unwrap();
        let fit = fit_model(&d, 2, 2, 1e-6).unwrap();
        assert!(fit.model.alpha().iter().flatten().all(|a| a.abs() < 1e-9));
    }

    #[test]
    fn constant_input_is_singular_without_ridge() {
        let d = DataSet::new(vec![vec![0.3]; 20], vec![vec![0.1]; 20], None).unwrap();
        assert!(matches!(fit_model(&d, 1, 1, 0.0), Err(Error::Singular(_))));
        assert!(fit_model(&d, 1, 1, 1e-6).is_ok());
    }

    #[test]
    fn too_few_records() {
        let d = DataSet::new(vec![vec![0.3]; 2], vec![vec![0.1]; 2], None).unwrap();
        assert!(matches!(fit_model(&d, 2, 1, 0.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn predict_edge_cases() {
        let mut m = PolyModel::zeros(2, 1, 1, 2).unwrap();
        let q = RegressorWindow::new(vec![vec![0.4], vec![-0.2]], vec![vec![0.9]]);
        assert_eq!(predict(&m, &q, &[0.1]).unwrap(), vec![0.0]);
        m.set_coefficient(&[0, 0, 0, 0], 0, 1.25).unwrap();
        assert_eq!(predict(&m, &q, &[0.1]).unwrap(), vec![1.25]);
        m.set_coefficient(&[0, 0, 0, 2], 0, 1.0).unwrap();
        let big = RegressorWindow::new(vec![vec![0.0], vec![0.0]], vec![vec![0.0]]);
        assert!(matches!(predict(&m, &big, &[1e200]), Err(Error::NumericRange(_))));
        assert!(matches!(predict(&m, &big, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip() {
        let d = simulate(60, 2, |y, u| 0.3 * y - 0.1 * y * u + u);
        let m = fit_model(&d, 2, 2, 1e-8).unwrap().model;
        let text = m.to_json_string().unwrap();
        let back = PolyModel::from_json_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_string().unwrap(), text);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["n", "n_u", "n_y", "degree", "exponents", "alpha", "ridge"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn residual_does_not_grow_with_degree() {
        let d = simulate(150, 9, |y, u| (0.6 * y + 0.4 * u).tanh());
        let mut last = f64::INFINITY;
        for degree in 1..=4 {
            let r = fit_model(&d, 1, degree, 0.0).unwrap().rms_residual[0];
            assert!(r <= last + 1e-12, "degree {degree}: {r} > {last}");
            last = r;
        }
    }

    proptest! {
        #[test]
        fn monomials_scale_with_total_degree(
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            s in -3.0f64..3.0,
        ) {
            let b = enumerate_monomials(3, 3, 1000).unwrap();
            let base = b.eval_flat(&x).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
            let got = b.eval_flat(&scaled).unwrap();
            for ((e, v0), v1) in b.exponents().iter().zip(&base).zip(&got) {
                let k = e.iter().sum::<u32>() as i32;
                let want = v0 * s.powi(k);
                prop_assert!((v1 - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
