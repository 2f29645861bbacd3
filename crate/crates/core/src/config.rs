//! Run configuration: one TOML file driving every pipeline stage.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dataset::{ExcitationKind, DEFAULT_EPSILON_FLOOR};
use crate::error::{Error, Result};
use crate::invctrl;
use crate::plant::{registry, Monomial, PlantKind, PlantSpec, PlantTerm, Signal};
use crate::simloop::{ReferenceSpec, ABORT_FACTOR};
use crate::stability;
use crate::sysid::{PolyModel, DEFAULT_BASIS_CAP};

/// Sub-seed for a fixed pipeline label (splitmix64 over seed and FNV-1a of the label).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; stages derive their own seeds from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub pid: PidSection,
    #[serde(default)]
    pub reference_model: ReferenceModelSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub stability: StabilitySection,
    /// Directory against which relative paths inside the file resolve.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEntry {
    /// 1-based output channel.
    pub output: usize,
    pub coeff: f64,
    pub monomial: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// `registry` (default), `poly-narx`, `model-plus-residue` or `custom-table`.
    pub kind: Option<String>,
    /// Registry entry: `scalar-linear` (default) or `mimo-cross`.
    pub name: Option<String>,
    pub n: Option<usize>,
    pub n_u: Option<usize>,
    pub n_y: Option<usize>,
    pub n_xi: Option<usize>,
    pub u_bar: Option<f64>,
    pub xi_bar: Option<f64>,
    pub terms: Option<Vec<TermEntry>>,
    /// Base model for `model-plus-residue`, as terms or as a model file.
    pub base_terms: Option<Vec<TermEntry>>,
    pub base_degree: Option<u32>,
    pub base_model: Option<PathBuf>,
    pub residue_y: Option<Vec<Vec<f64>>>,
    pub residue_c0: Option<Vec<f64>>,
    pub xi_gain: Option<Vec<Vec<f64>>>,
    pub y_grid: Option<Vec<f64>>,
    pub u_grid: Option<Vec<f64>>,
    pub values: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub excitation: Option<ExcitationKind>,
    /// Defaults to the plant's `u_bar`.
    pub amplitude: Option<f64>,
    pub length: Option<usize>,
    pub hold: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to the plant order.
    pub n: Option<usize>,
    pub degree: Option<u32>,
    pub ridge: Option<f64>,
    pub basis_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    pub zeta: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    /// Explicit normalizers; otherwise computed from the dataset when one
    /// is supplied, else 1.
    pub rho_y: Option<Vec<f64>>,
    pub rho_u: Option<Vec<f64>>,
    pub epsilon_floor: Option<f64>,
    pub grid_points: Option<usize>,
    pub refine_iters: Option<usize>,
    pub tol_u: Option<f64>,
    pub eval_budget: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneData {
    /// Fit the data input minus the inversion replay.
    Residual,
    /// Fit the raw data input.
    Raw,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidSection {
    pub n_theta: Option<usize>,
    pub data: Option<TuneData>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceModelSection {
    pub poles: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: Option<usize>,
    /// Initial output window, most recent first.
    pub y0: Option<Vec<Vec<f64>>>,
    pub reference: Option<ReferenceSpec>,
    pub r_bar: Option<f64>,
    /// Defaults to the plant's `xi_bar`.
    pub xi_bar: Option<f64>,
    pub seed: Option<u64>,
    pub abort_factor: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub y_bar: Option<f64>,
    pub grid_points: Option<usize>,
    pub max_exhaustive: Option<u64>,
    pub random_samples: Option<usize>,
    pub safety_factor: Option<f64>,
    pub inversion_samples: Option<usize>,
    /// Half-width of the box for the previous linear command; defaults to `u_bar`.
    pub ulin_bound: Option<f64>,
    pub seed: Option<u64>,
}

/// Keys read by each subcommand, for `--help`.
pub const COLLECT_KEYS: &str = "seed, [plant].*, [dataset] excitation amplitude length hold seed";
pub const IDENTIFY_KEYS: &str = "[plant] n n_u n_y (or registry name), [model] n degree ridge basis_cap";
pub const TUNE_KEYS: &str = "[plant].*, [model] n, [inversion].*, [pid] n_theta data, [reference_model] poles";
pub const SIMULATE_KEYS: &str =
    "seed, [plant].*, [inversion].*, [sim] horizon y0 reference r_bar xi_bar seed abort_factor, [stability] y_bar";
pub const CERTIFY_KEYS: &str = "seed, [plant].*, [inversion].*, [sim] r_bar xi_bar, \
[stability] y_bar grid_points max_exhaustive random_samples safety_factor inversion_samples ulin_bound seed";

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, dir)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn plant(&self) -> Result<PlantSpec> {
        let s = &self.plant;
        let kind = s.kind.as_deref().unwrap_or("registry");
        let mut p = match kind {
            "registry" => match s.name.as_deref().unwrap_or("scalar-linear") {
                "scalar-linear" => registry::scalar_linear(),
                "mimo-cross" => registry::mimo_cross(),
                other => return Err(Error::Config(format!("unknown registry plant '{other}'"))),
            },
            "poly-narx" => {
                let (n, n_u, n_y) = (s.n.unwrap_or(1), s.n_u.unwrap_or(1), s.n_y.unwrap_or(1));
                PlantSpec {
                    n,
                    n_u,
                    n_y,
                    n_xi: s.n_xi.unwrap_or(n_y),
                    u_bar: s.u_bar.unwrap_or(1.0),
                    xi_bar: s.xi_bar.unwrap_or(0.0),
                    kind: PlantKind::PolyNarx {
                        terms: parse_terms(s.terms.as_deref().unwrap_or_default())?,
                    },
                }
            }
            "model-plus-residue" => {
                let base = self.base_model()?;
                let (n, n_y) = (base.n(), base.n_y());
                let n_xi = s.n_xi.unwrap_or(n_y);
                PlantSpec {
                    n,
                    n_u: base.n_u(),
                    n_y,
                    n_xi,
                    u_bar: s.u_bar.unwrap_or(1.0),
                    xi_bar: s.xi_bar.unwrap_or(0.0),
                    kind: PlantKind::ModelPlusResidue {
                        residue_y: s.residue_y.clone().unwrap_or_else(|| vec![vec![0.0; n * n_y]; n_y]),
                        residue_c0: s.residue_c0.clone().unwrap_or_else(|| vec![0.0; n_y]),
                        xi_gain: s.xi_gain.clone().unwrap_or_else(|| {
                            (0..n_y).map(|i| (0..n_xi).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
                        }),
                        base,
                    },
                }
            }
            "custom-table" => PlantSpec {
                n: 1,
                n_u: 1,
                n_y: 1,
                n_xi: 1,
                u_bar: s.u_bar.unwrap_or(1.0),
                xi_bar: s.xi_bar.unwrap_or(0.0),
                kind: PlantKind::CustomTable {
                    y_grid: s.y_grid.clone().ok_or_else(|| Error::Config("custom-table needs y_grid".into()))?,
                    u_grid: s.u_grid.clone().ok_or_else(|| Error::Config("custom-table needs u_grid".into()))?,
                    values: s.values.clone().ok_or_else(|| Error::Config("custom-table needs values".into()))?,
                    xi_gain: s.xi_gain.as_ref().and_then(|g| g.first()?.first().copied()).unwrap_or(0.0),
                },
            },
            other => return Err(Error::Config(format!("unknown plant kind '{other}'"))),
        };
        if kind == "registry" {
            if let Some(u) = s.u_bar {
                p.u_bar = u;
            }
            if let Some(x) = s.xi_bar {
                p.xi_bar = x;
            }
        }
        p.validate()?;
        Ok(p)
    }

    fn base_model(&self) -> Result<PolyModel> {
        let s = &self.plant;
        match (&s.base_model, &s.base_terms) {
            (Some(path), None) => PolyModel::load_json(self.resolve(path)),
            (None, Some(terms)) => {
                let (n, n_u, n_y) = (s.n.unwrap_or(1), s.n_u.unwrap_or(1), s.n_y.unwrap_or(1));
                let terms = parse_terms(terms)?;
                let max_deg = terms
                    .iter()
                    .map(|t| t.monomial.0.iter().map(|f| f.power).sum::<u32>())
                    .max()
                    .unwrap_or(1);
                let mut m = PolyModel::zeros(n, n_u, n_y, s.base_degree.unwrap_or(max_deg.max(1)))?;
                for t in &terms {
                    let e = model_exponent(&t.monomial, n, n_y, n_u)?;
                    let old = m.coefficient(&e, t.output).unwrap_or(0.0);
                    m.set_coefficient(&e, t.output, old + t.coeff)?;
                }
                Ok(m)
            }
            _ => Err(Error::Config(
                "model-plus-residue needs exactly one of base_terms or base_model".into(),
            )),
        }
    }

    pub fn u_bar(&self) -> Result<f64> {
        Ok(self.plant()?.u_bar)
    }

    pub fn y_bar(&self) -> f64 {
        self.stability.y_bar.unwrap_or(1.0)
    }

    pub fn r_bar(&self) -> f64 {
        self.sim.r_bar.unwrap_or(0.5 * self.y_bar())
    }

    pub fn model_order(&self, p: &PlantSpec) -> usize {
        self.model.n.unwrap_or(p.n)
    }

    pub fn degree(&self) -> u32 {
        self.model.degree.unwrap_or(2)
    }

    pub fn ridge(&self) -> f64 {
        self.model.ridge.unwrap_or(0.0)
    }

    pub fn basis_cap(&self) -> usize {
        self.model.basis_cap.unwrap_or(DEFAULT_BASIS_CAP)
    }

    pub fn n_theta(&self) -> usize {
        self.pid.n_theta.unwrap_or(1)
    }

    pub fn tune_data(&self) -> TuneData {
        self.pid.data.unwrap_or(TuneData::Residual)
    }

    pub fn poles(&self, n_y: usize) -> Vec<f64> {
        self.reference_model.poles.clone().unwrap_or_else(|| vec![0.5; n_y])
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or_else(|| derive_seed(self.seed, "dataset"))
    }

    pub fn disturbance_seed(&self) -> u64 {
        self.sim.seed.unwrap_or_else(|| derive_seed(self.seed, "disturbance"))
    }

    pub fn stability_seed(&self) -> u64 {
        self.stability.seed.unwrap_or_else(|| derive_seed(self.seed, "stability"))
    }

    pub fn excitation(&self, p: &PlantSpec) -> crate::dataset::ExcitationSpec {
        let d = &self.dataset;
        crate::dataset::ExcitationSpec {
            kind: d.excitation.unwrap_or(ExcitationKind::MultilevelRandom),
            amplitude: d.amplitude.unwrap_or(p.u_bar),
            length: d.length.unwrap_or(1000),
            hold: d.hold.unwrap_or(10),
            seed: self.dataset_seed(),
        }
    }

    pub fn epsilon_floor(&self) -> f64 {
        self.inversion.epsilon_floor.unwrap_or(DEFAULT_EPSILON_FLOOR)
    }

    pub fn grid_points(&self) -> usize {
        self.inversion.grid_points.unwrap_or(invctrl::DEFAULT_GRID_POINTS)
    }

    pub fn sim_horizon(&self) -> usize {
        self.sim.horizon.unwrap_or(500)
    }

    pub fn reference(&self, n_y: usize) -> ReferenceSpec {
        self.sim.reference.clone().unwrap_or(ReferenceSpec::Step {
            value: vec![0.5 * self.r_bar(); n_y],
            at: 1,
        })
    }

    pub fn abort_factor(&self) -> f64 {
        self.sim.abort_factor.unwrap_or(ABORT_FACTOR)
    }

    pub fn safety_factor(&self) -> f64 {
        self.stability.safety_factor.unwrap_or(stability::DEFAULT_SAFETY_FACTOR)
    }
}

fn parse_terms(entries: &[TermEntry]) -> Result<Vec<PlantTerm>> {
    entries
        .iter()
        .map(|e| {
            if e.output == 0 {
                return Err(Error::Config("term outputs are 1-based".into()));
            }
            Ok(PlantTerm {
                output: e.output - 1,
                coeff: e.coeff,
                monomial: e.monomial.parse()?,
            })
        })
        .collect()
}

/// Exponent over the flattened model regressor for a monomial in
/// `y(t-k)`, `u(t-k)`.
pub fn model_exponent(m: &Monomial, n: usize, n_y: usize, n_u: usize) -> Result<Vec<u32>> {
    let mut e = vec![0u32; n * (n_y + n_u)];
    for f in &m.0 {
        let col = match f.signal {
            Signal::Y if f.lag < n && f.channel < n_y => f.lag * n_y + f.channel,
            Signal::U if f.lag == 0 && f.channel < n_u => n * n_y + (n - 1) * n_u + f.channel,
            Signal::U if f.lag < n && f.channel < n_u => n * n_y + (f.lag - 1) * n_u + f.channel,
            _ => return Err(Error::Config(format!("'{m}' is outside the model regressor"))),
        };
        e[col] += f.power;
    }
    Ok(e)
}
