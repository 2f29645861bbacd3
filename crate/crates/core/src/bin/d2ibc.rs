use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use d2ibc::config::{self, RunConfig};
use d2ibc::linctrl::PidGains;
use d2ibc::pipeline;
use d2ibc::sysid::PolyModel;
use d2ibc::{DataSet, Error, SimulationTrace};

const EXIT_ERROR: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_ASSUMPTIONS: u8 = 3;
const EXIT_BOUND: u8 = 4;

const EXIT_CODES: &str = "Exit status: 0 ok, 1 error, 2 plant diverged, 3 assumptions fail, 4 tracking bound violated.\n\
Set D2IBC_LOG (error|warn|info|debug) for diagnostics.";

#[derive(Parser)]
#[command(name = "d2ibc", version, about = "Data-driven inversion-based control pipeline", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Excite the configured plant open loop and write a dataset CSV.
    #[command(after_help = format!("Config keys: {}", config::COLLECT_KEYS))]
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data.csv")]
        out: PathBuf,
    },
    /// Fit the polynomial model to a dataset and write model JSON.
    #[command(after_help = format!("Config keys: {}", config::IDENTIFY_KEYS))]
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
        /// Overrides [model] ridge.
        #[arg(long)]
        ridge: Option<f64>,
    },
    /// Tune the extended PID by virtual reference and write PID JSON.
    #[command(after_help = format!("Config keys: {}", config::TUNE_KEYS))]
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "pid.json")]
        out: PathBuf,
    },
    /// Run the closed loop and write the trace CSV and a summary JSON.
    #[command(after_help = format!("Config keys: {}", config::SIMULATE_KEYS))]
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pid: PathBuf,
        /// Dataset used for the inversion normalizers.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
        /// Defaults to the trace path with a `.summary.json` extension.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Estimate the stability constants and write a certificate JSON.
    #[command(after_help = format!("Config keys: {}", config::CERTIFY_KEYS))]
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pid: PathBuf,
        /// Trace checked against the error bound.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Dataset used for the inversion normalizers.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "certificate.json")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> d2ibc::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> d2ibc::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_data(p: Option<&PathBuf>) -> d2ibc::Result<Option<DataSet>> {
    p.map(DataSet::load_csv).transpose()
}

fn run(cmd: Cmd) -> d2ibc::Result<u8> {
    match cmd {
        Cmd::Collect { common, out } => {
            let cfg = load_config(&common)?;
            let d = pipeline::collect(&cfg)?;
            d.save_csv(&out)?;
            println!("wrote {} samples to {}", d.len(), out.display());
        }
        Cmd::Identify {
            common,
            data,
            out,
            ridge,
        } => {
            let cfg = load_config(&common)?;
            let d = DataSet::load_csv(&data)?;
            let fit = pipeline::identify(&cfg, &d, ridge)?;
            fit.model.save_json(&out)?;
            for (i, r) in fit.rms_residual.iter().enumerate() {
                println!("rms_residual[y{}] = {r:e}", i + 1);
            }
            println!("wrote model ({} terms) to {}", fit.model.basis().len(), out.display());
        }
        Cmd::Tune {
            common,
            data,
            model,
            out,
        } => {
            let cfg = load_config(&common)?;
            let d = DataSet::load_csv(&data)?;
            let f = PolyModel::load_json(&model)?;
            let fit = pipeline::tune(&cfg, &d, &f)?;
            fit.gains.save_json(&out)?;
            println!("J_VR = {:e} over {} rows", fit.residual, fit.rows);
            println!("wrote PID gains to {}", out.display());
        }
        Cmd::Simulate {
            common,
            model,
            pid,
            data,
            out,
            summary,
        } => {
            let cfg = load_config(&common)?;
            let f = PolyModel::load_json(&model)?;
            let g = PidGains::load_json(&pid)?;
            let d = load_data(data.as_ref())?;
            let summary = summary.unwrap_or_else(|| out.with_extension("summary.json"));
            let u_bar = cfg.u_bar()?;
            let (trace, code) = match pipeline::simulate(&cfg, &f, &g, d.as_ref()) {
                Ok(tr) => (tr, 0),
                Err(Error::Divergence {
                    t,
                    message,
                    partial: Some(tr),
                }) => {
                    error!("plant diverged at t={t}: {message}; writing partial trace");
                    (*tr, EXIT_DIVERGED)
                }
                Err(e) => return Err(e),
            };
            trace.save_csv(&out)?;
            let s = trace.summary(u_bar);
            write(&summary, &(serde_json::to_string_pretty(&s)? + "\n"))?;
            println!("max|e| = {:e}, max|y| = {:e}, saturated steps = {}", s.max_abs_e, s.max_abs_y, s.saturated_steps);
            println!("wrote trace to {}", out.display());
            return Ok(code);
        }
        Cmd::Certify {
            common,
            model,
            pid,
            trace,
            data,
            out,
        } => {
            let cfg = load_config(&common)?;
            let f = PolyModel::load_json(&model)?;
            let g = PidGains::load_json(&pid)?;
            let d = load_data(data.as_ref())?;
            let tr = trace.as_ref().map(SimulationTrace::load_csv).transpose()?;
            let id = trace.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let cert = pipeline::certify(&cfg, &f, &g, d.as_ref(), tr.as_ref().map(|t| (t, id.as_str())))?;
            write(&out, &cert.to_json_string()?)?;
            let r = &cert.report;
            println!(
                "a2 {} a3 {} a4 {} verdict {}",
                r.a2_model_accuracy.holds, r.a3_inversion.holds, r.a4_domain.holds, r.verdict
            );
            if let Some(c) = &cert.constants {
                println!("e_bar = {:e}", c.e_bar);
            }
            if let Some(b) = &cert.bound_check {
                println!("max|e| = {:e} <= e_bar: {}", b.max_abs_e, b.satisfied);
            }
            println!("wrote certificate to {}", out.display());
            if !r.verdict {
                return Ok(EXIT_ASSUMPTIONS);
            }
            if cert.bound_check.as_ref().is_some_and(|b| !b.satisfied) {
                return Ok(EXIT_BOUND);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("D2IBC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => {
            info!("exit status {code}");
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_ERROR,
            })
        }
    }
}
