//! Identification records, normalization constants and excitation signals.
//!
//! Records are stored 0-based; the CSV `t` column is kept verbatim so a
//! load/save cycle reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    t: Vec<i64>,
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    n_u: usize,
    n_y: usize,
    u_bar: f64,
    y_bar: f64,
    order_hint: Option<usize>,
}

impl DataSet {
    /// Builds a dataset with `t = 0..L`. `u_bar` defaults to the largest
    /// input magnitude in the records.
    pub fn new(u: Vec<Vec<f64>>, y: Vec<Vec<f64>>, u_bar: Option<f64>) -> Result<Self> {
        let t = (0..u.len() as i64).collect();
        Self::with_times(t, u, y, u_bar)
    }

    pub fn with_times(
        t: Vec<i64>,
        u: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        u_bar: Option<f64>,
    ) -> Result<Self> {
        if u.is_empty() || y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if u.len() != y.len() || t.len() != u.len() {
            return Err(Error::Shape(format!(
                "record count mismatch: t={}, u={}, y={}",
                t.len(),
                u.len(),
                y.len()
            )));
        }
        let n_u = u[0].len();
        let n_y = y[0].len();
        if n_u == 0 || n_y == 0 {
            return Err(Error::Shape("input and output dimensions must be positive".into()));
        }
        for (k, (uk, yk)) in u.iter().zip(&y).enumerate() {
            if uk.len() != n_u || yk.len() != n_y {
                return Err(Error::Shape(format!("record {k} has inconsistent dimensions")));
            }
            if uk.iter().chain(yk).any(|v| !v.is_finite()) {
                return Err(Error::NumericRange(format!("record {k} is not finite")));
            }
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schema("time column must be strictly increasing".into()));
        }
        let u_max = max_abs(&u);
        let u_bar = match u_bar {
            Some(b) => {
                if !(b >= 0.0) || !b.is_finite() {
                    return Err(Error::Bound(format!("u_bar must be finite and >= 0, got {b}")));
                }
                if u_max > b {
                    return Err(Error::Bound(format!(
                        "input magnitude {u_max} exceeds saturation u_bar={b}"
                    )));
                }
                b
            }
            None => u_max,
        };
        let y_bar = max_abs(&y);
        Ok(DataSet {
            t,
            u,
            y,
            n_u,
            n_y,
            u_bar,
            y_bar,
            order_hint: None,
        })
    }

    pub fn with_order_hint(mut self, n: Option<usize>) -> Self {
        self.order_hint = n;
        self
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn u(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn y(&self) -> &[Vec<f64>] {
        &self.y
    }

    pub fn times(&self) -> &[i64] {
        &self.t
    }

    pub fn u_bar(&self) -> f64 {
        self.u_bar
    }

    pub fn y_bar(&self) -> f64 {
        self.y_bar
    }

    pub fn order_hint(&self) -> Option<usize> {
        self.order_hint
    }

    /// Canonical CSV text. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# u_bar={}", self.u_bar);
        if let Some(n) = self.order_hint {
            let _ = writeln!(out, "# n={n}");
        }
        out.push('t');
        for j in 1..=self.n_u {
            let _ = write!(out, ",u{j}");
        }
        for i in 1..=self.n_y {
            let _ = write!(out, ",y{i}");
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.t[k]);
            for v in self.u[k].iter().chain(&self.y[k]) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut u_bar = None;
        let mut order = None;
        let mut header: Option<(usize, usize)> = None;
        let mut t = Vec::new();
        let mut u = Vec::new();
        let mut y = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.trim().split_once('=') {
                    let value = value.trim();
                    match key.trim() {
                        "u_bar" => {
                            u_bar = Some(value.parse::<f64>().map_err(|_| Error::Parse {
                                line: line_no,
                                message: format!("bad u_bar directive '{value}'"),
                            })?)
                        }
                        "n" => {
                            order = Some(value.parse::<usize>().map_err(|_| Error::Parse {
                                line: line_no,
                                message: format!("bad n directive '{value}'"),
                            })?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some((n_u, n_y)) = header else {
                header = Some(parse_header(&cells, line_no)?);
                continue;
            };
            if cells.len() != 1 + n_u + n_y {
                return Err(Error::Schema(format!(
                    "line {line_no}: expected {} columns, found {}",
                    1 + n_u + n_y,
                    cells.len()
                )));
            }
            let tk = cells[0].parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad time value '{}'", cells[0]),
            })?;
            if let Some(&prev) = t.last() {
                if tk <= prev {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("time {tk} does not increase (previous {prev})"),
                    });
                }
            }
            let mut vals = Vec::with_capacity(n_u + n_y);
            for cell in &cells[1..] {
                let v = cell.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("non-numeric cell '{cell}'"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("non-finite cell '{cell}'"),
                    });
                }
                vals.push(v);
            }
            t.push(tk);
            y.push(vals.split_off(n_u));
            u.push(vals);
        }
        if header.is_none() || t.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self::with_times(t, u, y, u_bar)?.with_order_hint(order))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

fn parse_header(cells: &[&str], line: usize) -> Result<(usize, usize)> {
    if cells.first() != Some(&"t") {
        return Err(Error::Schema(format!("line {line}: header must start with 't'")));
    }
    let n_u = cells.iter().filter(|c| c.starts_with('u')).count();
    let n_y = cells.iter().filter(|c| c.starts_with('y')).count();
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n_u).map(|j| format!("u{j}")))
        .chain((1..=n_y).map(|i| format!("y{i}")))
        .collect();
    if n_u == 0 || n_y == 0 || expected.len() != cells.len() || expected.iter().zip(cells).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!(
            "line {line}: header must read t,u1..u<n_u>,y1..y<n_y>, got '{}'",
            cells.join(",")
        )));
    }
    Ok((n_u, n_y))
}

fn max_abs(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Per-channel mean-square normalizers used by the inversion cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub rho_y: Vec<f64>,
    pub rho_u: Vec<f64>,
    pub epsilon_floor: f64,
    /// Channels (outputs first, then inputs) that were raised to the floor.
    #[serde(default)]
    pub clamped: Vec<String>,
}

impl NormConstants {
    /// Unit normalizers, handy when no dataset is around.
    pub fn unit(n_y: usize, n_u: usize) -> Self {
        NormConstants {
            rho_y: vec![1.0; n_y],
            rho_u: vec![1.0; n_u],
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            clamped: Vec::new(),
        }
    }

    pub fn has_warnings(&self) -> bool {
        !self.clamped.is_empty()
    }
}

pub fn compute_norm_constants(d: &DataSet, epsilon_floor: f64) -> Result<NormConstants> {
    if !(epsilon_floor > 0.0) {
        return Err(Error::Bound(format!("epsilon_floor must be > 0, got {epsilon_floor}")));
    }
    let l = d.len() as f64;
    let mut clamped = Vec::new();
    let mut channel = |rows: &[Vec<f64>], i: usize, name: String| {
        let rho = rows.iter().map(|r| r[i] * r[i]).sum::<f64>() / l;
        if rho < epsilon_floor {
            log::warn!("channel {name} has mean square {rho}; clamped to {epsilon_floor}");
            clamped.push(name);
            epsilon_floor
        } else {
            rho
        }
    };
    let rho_y = (0..d.n_y()).map(|i| channel(d.y(), i, format!("y{}", i + 1))).collect();
    let rho_u = (0..d.n_u()).map(|j| channel(d.u(), j, format!("u{}", j + 1))).collect();
    Ok(NormConstants {
        rho_y,
        rho_u,
        epsilon_floor,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationKind {
    MultilevelRandom,
    Multisine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub kind: ExcitationKind,
    pub amplitude: f64,
    pub length: usize,
    #[serde(default = "default_hold")]
    pub hold: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hold() -> usize {
    10
}

const MULTISINE_HARMONICS: usize = 8;

/// Input sequence for open-loop data collection on a plant saturated at `u_bar`.
pub fn generate_excitation(spec: &ExcitationSpec, n_u: usize, u_bar: f64) -> Result<Vec<Vec<f64>>> {
    if !(spec.amplitude >= 0.0) || !spec.amplitude.is_finite() {
        return Err(Error::Bound(format!("amplitude must be finite and >= 0, got {}", spec.amplitude)));
    }
    if spec.amplitude > u_bar {
        return Err(Error::Bound(format!(
            "excitation amplitude {} exceeds the plant saturation u_bar={u_bar}",
            spec.amplitude
        )));
    }
    if spec.length == 0 {
        return Err(Error::Config("excitation length must be >= 1".into()));
    }
    if n_u == 0 {
        return Err(Error::Shape("n_u must be >= 1".into()));
    }
    let a = spec.amplitude;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        ExcitationKind::MultilevelRandom => {
            if spec.hold == 0 {
                return Err(Error::Config("hold must be >= 1".into()));
            }
            let mut out = Vec::with_capacity(spec.length);
            let mut level = vec![0.0; n_u];
            for t in 0..spec.length {
                if t % spec.hold == 0 {
                    for v in level.iter_mut() {
                        *v = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
                    }
                }
                out.push(level.clone());
            }
            Ok(out)
        }
        ExcitationKind::Multisine => {
            let len = spec.length as f64;
            let harmonics = MULTISINE_HARMONICS.min(spec.length.div_ceil(2)).max(1);
            let mut out = vec![vec![0.0; n_u]; spec.length];
            for j in 0..n_u {
                let phases: Vec<f64> = (0..harmonics)
                    .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                    .collect();
                let raw: Vec<f64> = (0..spec.length)
                    .map(|t| {
                        phases
                            .iter()
                            .enumerate()
                            .map(|(k, ph)| {
                                (std::f64::consts::TAU * (k + 1) as f64 * t as f64 / len + ph).cos()
                            })
                            .sum()
                    })
                    .collect();
                let peak = raw.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let scale = if peak > 0.0 { a / peak } else { 0.0 };
                for (t, v) in raw.into_iter().enumerate() {
                    out[t][j] = (v * scale).clamp(-a, a);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loads_two_row_file() {
        let d = DataSet::from_csv_str("t,u1,y1\n0,0.5,1\n1,-0.5,-1\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.y_bar(), 1.0);
        assert_eq!(d.u_bar(), 0.5);
    }

    #[test]
    fn non_numeric_cell_reports_line() {
        let err = DataSet::from_csv_str("t,u1,y1\n0,0.5,1\n1,abc,-1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn column_count_mismatch_is_schema_error() {
        let err = DataSet::from_csv_str("t,u1,y1\n0,0.5\n").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
        let err = DataSet::from_csv_str("t,y1,u1\n0,0.5,1\n").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(DataSet::from_csv_str(""), Err(Error::EmptyDataset)));
        assert!(matches!(DataSet::from_csv_str("t,u1,y1\n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let err = DataSet::from_csv_str("t,u1,y1\n0,0,0\n0,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn u_bar_directive_is_honoured_and_checked() {
        let d = DataSet::from_csv_str("# u_bar=2\n# n=3\nt,u1,y1\n0,0.5,1\n").unwrap();
        assert_eq!(d.u_bar(), 2.0);
        assert_eq!(d.order_hint(), Some(3));
        let err = DataSet::from_csv_str("# u_bar=0.1\nt,u1,y1\n0,0.5,1\n").unwrap_err();
        assert!(matches!(err, Error::Bound(_)));
    }

    #[test]
    fn norm_constants_by_hand() {
        let d = DataSet::new(vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![-1.0]], None).unwrap();
        let rho = compute_norm_constants(&d, 1e-9).unwrap();
        assert_eq!(rho.rho_y, vec![1.0]);
        assert_eq!(rho.rho_u, vec![1e-9]);
        assert_eq!(rho.clamped, vec!["u1".to_string()]);

        let d = DataSet::new(
            vec![vec![1.0]; 4],
            vec![vec![2.0], vec![0.0], vec![0.0], vec![0.0]],
            None,
        )
        .unwrap();
        let rho = compute_norm_constants(&d, 1e-9).unwrap();
        assert_eq!(rho.rho_y, vec![1.0]);
        assert!(!rho.has_warnings());
    }

    #[test]
    fn multilevel_blocks() {
        let spec = ExcitationSpec {
            kind: ExcitationKind::MultilevelRandom,
            amplitude: 1.0,
            length: 10,
            hold: 5,
            seed: 7,
        };
        let u = generate_excitation(&spec, 1, 1.0).unwrap();
        assert_eq!(u.len(), 10);
        let mut blocks: Vec<f64> = u.iter().map(|v| v[0]).collect();
        blocks.dedup();
        assert_eq!(blocks.len(), 2);
        assert!(u[..5].iter().all(|v| v == &u[0]));
        assert_eq!(u, generate_excitation(&spec, 1, 1.0).unwrap());
    }

    #[test]
    fn multisine_stays_in_box() {
        let spec = ExcitationSpec {
            kind: ExcitationKind::Multisine,
            amplitude: 0.7,
            length: 64,
            hold: 1,
            seed: 3,
        };
        let u = generate_excitation(&spec, 2, 1.0).unwrap();
        assert_eq!(u.len(), 64);
        let peak = u.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(peak <= 0.7);
        assert!(peak > 0.69);
    }

    #[test]
    fn amplitude_above_saturation_fails() {
        let spec = ExcitationSpec {
            kind: ExcitationKind::Multisine,
            amplitude: 2.0,
            length: 8,
            hold: 1,
            seed: 0,
        };
        assert!(matches!(generate_excitation(&spec, 1, 1.0), Err(Error::Bound(_))));
    }

    proptest! {
        #[test]
        fn norm_constants_ignore_record_order(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..40),
            rot in 0usize..40,
        ) {
            let u: Vec<Vec<f64>> = vals.iter().map(|v| vec![v * 0.1]).collect();
            let y: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
            let d = DataSet::new(u.clone(), y.clone(), None).unwrap();
            let mut u2 = u; let mut y2 = y;
            let k = rot % u2.len();
            u2.rotate_left(k); y2.rotate_left(k);
            u2.reverse(); y2.reverse();
            let d2 = DataSet::new(u2, y2, None).unwrap();
            let a = compute_norm_constants(&d, 1e-9).unwrap();
            let b = compute_norm_constants(&d2, 1e-9).unwrap();
            prop_assert!((a.rho_y[0] - b.rho_y[0]).abs() <= 1e-12 * a.rho_y[0].max(1.0));
            prop_assert!((a.rho_u[0] - b.rho_u[0]).abs() <= 1e-12 * a.rho_u[0].max(1.0));
        }

        #[test]
        fn csv_save_load_save_is_byte_stable(
            rows in proptest::collection::vec((-1.0f64..1.0, -1e3f64..1e3, -1e-3f64..1e-3), 1..30),
        ) {
            let u = rows.iter().map(|r| vec![r.0]).collect();
            let y = rows.iter().map(|r| vec![r.1, r.2]).collect();
            let d = DataSet::new(u, y, Some(1.0)).unwrap();
            let text = d.to_csv_string();
            let back = DataSet::from_csv_str(&text).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(back.to_csv_string(), text);
        }

        #[test]
        fn excitation_within_amplitude(seed in 0u64..1000, amp in 0.0f64..2.0, multisine in any::<bool>()) {
            let spec = ExcitationSpec {
                kind: if multisine { ExcitationKind::Multisine } else { ExcitationKind::MultilevelRandom },
                amplitude: amp,
                length: 50,
                hold: 3,
                seed,
            };
            let u = generate_excitation(&spec, 2, 2.0).unwrap();
            prop_assert!(u.iter().flatten().all(|v| v.abs() <= amp));
        }
    }
}
