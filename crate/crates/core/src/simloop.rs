//! Closed-loop simulation of the combined controller
//! `u_t = sat(u_nl_t + u_lin_t)` and open-loop data collection.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_excitation, DataSet, ExcitationSpec};
use crate::error::{Error, Result};
use crate::invctrl::{solve_inversion, InversionConfig};
use crate::linctrl::{pid_step, PidGains, PidState};
use crate::plant::{plant_step, PlantSpec};
use crate::sysid::{PolyModel, RegressorWindow};

/// Factor of `y_bar` above which a closed-loop run is aborted.
pub const ABORT_FACTOR: f64 = 1e3;
/// Output magnitude that aborts open-loop collection.
pub const OPEN_LOOP_ABORT: f64 = 1e6;

/// Component-wise clip to `[-u_bar, u_bar]`.
pub fn saturate(u: &[f64], u_bar: f64) -> Vec<f64> {
    u.iter().map(|v| v.clamp(-u_bar, u_bar)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `value` from time `at` on, zero in between.
    Step {
        value: Vec<f64>,
        #[serde(default = "one")]
        at: usize,
    },
    Sinusoid {
        amplitude: Vec<f64>,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Piecewise constant rows, each held for `hold` steps, cycling.
    Table {
        values: Vec<Vec<f64>>,
        #[serde(default = "one")]
        hold: usize,
    },
}

fn one() -> usize {
    1
}

impl ReferenceSpec {
    /// `r_t` for `t >= 1`; `r_0` is pinned to `y_0` by the loop.
    pub fn value(&self, t: usize) -> Vec<f64> {
        match self {
            ReferenceSpec::Step { value, at } => {
                if t >= *at {
                    value.clone()
                } else {
                    vec![0.0; value.len()]
                }
            }
            ReferenceSpec::Sinusoid {
                amplitude,
                period,
                phase,
            } => amplitude
                .iter()
                .map(|a| a * (2.0 * PI * t as f64 / period + phase).sin())
                .collect(),
            ReferenceSpec::Table { values, hold } => values[((t.max(1) - 1) / hold) % values.len()].clone(),
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            ReferenceSpec::Step { value, .. } => value.len(),
            ReferenceSpec::Sinusoid { amplitude, .. } => amplitude.len(),
            ReferenceSpec::Table { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ReferenceSpec::Sinusoid { period, .. } if !(*period > 0.0) => {
                Err(Error::Config("sinusoid period must be > 0".into()))
            }
            ReferenceSpec::Table { values, hold } => {
                if values.is_empty() || *hold == 0 {
                    return Err(Error::Config("reference table needs rows and hold >= 1".into()));
                }
                let w = values[0].len();
                if values.iter().any(|r| r.len() != w) {
                    return Err(Error::Config("reference table rows differ in width".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Last time index; the trace has `horizon + 1` rows.
    pub horizon: usize,
    /// Initial outputs, most recent first. Shorter windows are extended by
    /// repeating the oldest entry.
    pub y0: Vec<Vec<f64>>,
    pub reference: ReferenceSpec,
    pub r_bar: f64,
    pub xi_bar: f64,
    pub disturbance_seed: u64,
    /// Abort when some `|y_i|` exceeds this.
    pub abort_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub r: Vec<f64>,
    pub y: Vec<f64>,
    pub u_nl: Vec<f64>,
    pub u_lin: Vec<f64>,
    pub u: Vec<f64>,
    pub xi: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub n_y: usize,
    pub n_u: usize,
    pub n_xi: usize,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub max_abs_e: f64,
    pub max_abs_e_tail: f64,
    pub max_abs_y: f64,
    pub max_abs_u_lin: f64,
    pub saturated_steps: usize,
}

fn max_abs<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.fold(0.0, |m, v| m.max(v.abs()))
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Summary; the tail covers the last quarter of the run.
    pub fn summary(&self, u_bar: f64) -> TraceSummary {
        let tail = self.records.len() - self.records.len() / 4;
        TraceSummary {
            steps: self.records.len(),
            max_abs_e: max_abs(self.records.iter().flat_map(|r| &r.e)),
            max_abs_e_tail: max_abs(self.records[self.records.len() - tail..].iter().flat_map(|r| &r.e)),
            max_abs_y: max_abs(self.records.iter().flat_map(|r| &r.y)),
            max_abs_u_lin: max_abs(self.records.iter().flat_map(|r| &r.u_lin)),
            saturated_steps: self
                .records
                .iter()
                .filter(|r| r.u.iter().any(|v| v.abs() >= u_bar))
                .count(),
        }
    }

    fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        let groups = [
            ("r", self.n_y),
            ("y", self.n_y),
            ("unl", self.n_u),
            ("ulin", self.n_u),
            ("u", self.n_u),
            ("xi", self.n_xi),
            ("e", self.n_y),
        ];
        for (name, k) in groups {
            cols.extend((1..=k).map(|i| format!("{name}{i}")));
        }
        cols.join(",")
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.records {
            write!(s, "{}", r.t).unwrap();
            for v in r.r.iter().chain(&r.y).chain(&r.u_nl).chain(&r.u_lin).chain(&r.u).chain(&r.xi).chain(&r.e) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let count = |p: &str| {
            cols.iter()
                .filter(|c| c.strip_prefix(p).is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit())))
                .count()
        };
        let (n_y, n_u, n_xi) = (count("y"), count("unl"), count("xi"));
        let mut trace = SimulationTrace {
            n_y,
            n_u,
            n_xi,
            records: Vec::new(),
        };
        if cols.first() != Some(&"t") || trace.header() != cols.join(",") {
            return Err(Error::Schema(format!("unexpected trace header '{header}'")));
        }
        for (i, line) in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if vals.len() != cols.len() {
                return Err(Error::Schema(format!("line {} has {} columns, expected {}", i + 1, vals.len(), cols.len())));
            }
            let mut it = vals[1..].iter().copied();
            let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<f64>>();
            trace.records.push(TraceRecord {
                t: vals[0] as usize,
                r: take(n_y),
                y: take(n_y),
                u_nl: take(n_u),
                u_lin: take(n_u),
                u: take(n_u),
                xi: take(n_xi),
                e: take(n_y),
            });
        }
        if trace.records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(trace)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

/// Most-recent-first window of `k` entries from a history deque.
fn window(h: &VecDeque<Vec<f64>>, k: usize) -> Vec<Vec<f64>> {
    h.iter().take(k).cloned().collect()
}

fn push(h: &mut VecDeque<Vec<f64>>, v: Vec<f64>, keep: usize) {
    h.push_front(v);
    h.truncate(keep);
}

fn validate_sim(p: &PlantSpec, f: &PolyModel, g: &PidGains, y_bar: f64, sim: &SimConfig) -> Result<()> {
    p.validate()?;
    if f.n_u() != p.n_u || f.n_y() != p.n_y {
        return Err(Error::Shape("model and plant dimensions differ".into()));
    }
    if g.n_u() != p.n_u || g.n_y() != p.n_y {
        return Err(Error::Shape("PID gains and plant dimensions differ".into()));
    }
    g.validate()?;
    sim.reference.validate()?;
    if sim.reference.n_y() != p.n_y {
        return Err(Error::Shape("reference width differs from n_y".into()));
    }
    if !(sim.r_bar >= 0.0) || sim.r_bar > y_bar {
        return Err(Error::Config(format!("need 0 <= r_bar <= y_bar, got r_bar={} y_bar={y_bar}", sim.r_bar)));
    }
    if sim.xi_bar > p.xi_bar || !(sim.xi_bar >= 0.0) {
        return Err(Error::Config(format!(
            "disturbance bound {} exceeds the plant's {}",
            sim.xi_bar, p.xi_bar
        )));
    }
    if sim.y0.is_empty() || sim.y0.iter().any(|v| v.len() != p.n_y) {
        return Err(Error::Shape("y0 window needs at least one entry of width n_y".into()));
    }
    if sim.y0.iter().flatten().any(|v| !(v.abs() <= sim.r_bar)) {
        return Err(Error::Bound("initial outputs must lie in the reference box".into()));
    }
    Ok(())
}

/// Runs the combined controller on the plant for `horizon + 1` steps.
///
/// `r_0` equals `y_0`, so `e_0 = 0`; every later reference must stay in
/// `[-r_bar, r_bar]`. On divergence the error carries the partial trace.
pub fn run_closed_loop(
    p: &PlantSpec,
    f: &PolyModel,
    inv: &InversionConfig,
    g: &PidGains,
    y_bar: f64,
    sim: &SimConfig,
) -> Result<SimulationTrace> {
    validate_sim(p, f, g, y_bar, sim)?;
    inv.validate(p.n_y, p.n_u)?;
    let keep = p.n.max(f.n());

    let mut y_hist: VecDeque<Vec<f64>> = sim.y0.iter().cloned().collect();
    while y_hist.len() < keep {
        y_hist.push_back(y_hist.back().unwrap().clone());
    }
    y_hist.truncate(keep);
    let mut u_hist: VecDeque<Vec<f64>> = std::iter::repeat_n(vec![0.0; p.n_u], keep).collect();
    let mut xi_hist: VecDeque<Vec<f64>> = std::iter::repeat_n(vec![0.0; p.n_xi], keep).collect();
    let mut pid = PidState::new(g);
    let mut rng = ChaCha8Rng::seed_from_u64(sim.disturbance_seed);

    let reference = |t: usize, y0: &[f64]| -> Result<Vec<f64>> {
        if t == 0 {
            return Ok(y0.to_vec());
        }
        let r = sim.reference.value(t);
        if r.iter().any(|v| !(v.abs() <= sim.r_bar + 1e-12)) {
            return Err(Error::Bound(format!("reference at t={t} leaves [-r_bar, r_bar]")));
        }
        Ok(r)
    };

    let mut trace = SimulationTrace {
        n_y: p.n_y,
        n_u: p.n_u,
        n_xi: p.n_xi,
        records: Vec::with_capacity(sim.horizon + 1),
    };
    let y_start = y_hist[0].clone();
    for t in 0..=sim.horizon {
        let y_t = y_hist[0].clone();
        let r_t = reference(t, &y_start)?;
        let r_next = reference(t + 1, &y_start)?;
        let e_t: Vec<f64> = r_t.iter().zip(&y_t).map(|(r, y)| r - y).collect();

        let q = RegressorWindow::new(window(&y_hist, f.n()), window(&u_hist, f.n() - 1));
        let u_nl = solve_inversion(f, &q, &r_next, &u_hist[0], p.u_bar, inv)?.u_nl;
        let (u_lin, next_pid) = pid_step(g, &pid, &e_t);
        pid = next_pid;
        let sum: Vec<f64> = u_nl.iter().zip(&u_lin).map(|(a, b)| a + b).collect();
        let u = saturate(&sum, p.u_bar);
        let xi: Vec<f64> = (0..p.n_xi)
            .map(|_| if sim.xi_bar > 0.0 { rng.gen_range(-sim.xi_bar..=sim.xi_bar) } else { 0.0 })
            .collect();

        trace.records.push(TraceRecord {
            t,
            r: r_t,
            y: y_t,
            u_nl,
            u_lin,
            u: u.clone(),
            xi: xi.clone(),
            e: e_t,
        });
        if t == sim.horizon {
            break;
        }

        push(&mut u_hist, u, keep);
        push(&mut xi_hist, xi, keep);
        let step = plant_step(p, &window(&y_hist, p.n), &window(&u_hist, p.n), &window(&xi_hist, p.n), t);
        let y_next = match step {
            Ok(y) if y.iter().all(|v| v.abs() <= sim.abort_bound) => y,
            Ok(_) | Err(Error::Divergence { .. }) => {
                log::warn!("closed loop diverged at t={t}");
                return Err(Error::Divergence {
                    t: t + 1,
                    message: format!("|y| exceeded {}", sim.abort_bound),
                    partial: Some(Box::new(trace)),
                });
            }
            Err(e) => return Err(e),
        };
        push(&mut y_hist, y_next, keep);
    }
    Ok(trace)
}

/// Excites the plant from rest with zero disturbance.
pub fn collect_open_loop(p: &PlantSpec, e: &ExcitationSpec) -> Result<DataSet> {
    p.validate()?;
    let u_seq = generate_excitation(e, p.n_u, p.u_bar)?;
    let mut y_hist: VecDeque<Vec<f64>> = std::iter::repeat_n(vec![0.0; p.n_y], p.n).collect();
    let mut u_hist: VecDeque<Vec<f64>> = std::iter::repeat_n(vec![0.0; p.n_u], p.n).collect();
    let xi_win = vec![vec![0.0; p.n_xi]; p.n];
    let mut y_out = Vec::with_capacity(u_seq.len());
    for (t, u) in u_seq.iter().enumerate() {
        y_out.push(y_hist[0].clone());
        if t + 1 == u_seq.len() {
            break;
        }
        push(&mut u_hist, u.clone(), p.n);
        let y = plant_step(p, &window(&y_hist, p.n), &window(&u_hist, p.n), &xi_win, t)?;
        if y.iter().any(|v| v.abs() > OPEN_LOOP_ABORT) {
            return Err(Error::Divergence {
                t: t + 1,
                message: format!("open-loop output exceeded {OPEN_LOOP_ABORT}"),
                partial: None,
            });
        }
        push(&mut y_hist, y, p.n);
    }
    DataSet::new(u_seq, y_out, Some(p.u_bar))
}
