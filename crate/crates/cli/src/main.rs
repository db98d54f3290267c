use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deepsdrf::gps::{self, GpsBundle, GpsEnsemble};
use deepsdrf::harness::{self, ExperimentConfig, NetSettings};
use deepsdrf::nn::OutputHead;
use deepsdrf::recommend::{self, ActionGrid};
use deepsdrf::rng;
use deepsdrf::sim::{self, PatientPanel};
use deepsdrf::survival::{self, CadrQuery, OutcomeBundle, OutcomeEnsemble, OutcomeKind, PatientCadr};

/// Survival dose-response estimation and dose recommendation.
#[derive(Parser)]
#[command(name = "deepsdrf", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment and cohort seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Deepsdrf,
    Snn,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and write it as CSV.
    Simulate,
    /// Fit the GPS and both outcome ensembles and write checkpoints.
    Fit {
        /// Cohort CSV; simulated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// CADR curves for patients over a dose grid.
    Estimate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "deepsdrf")]
        model: Model,
        /// Comma-separated doses; defaults to the evaluation band of the cohort.
        #[arg(long, value_delimiter = ',')]
        doses: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        patients: usize,
    },
    /// Random-search and RL dose recommendations at commencement.
    Recommend {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "deepsdrf")]
        model: Model,
        #[arg(long, default_value_t = 300)]
        patients: usize,
    },
    /// Metrics against the truth oracle on the base scenario.
    Evaluate {
        /// Also evaluate recommendations.
        #[arg(long)]
        recommend: bool,
    },
    /// Every scenario of the grid.
    Benchmark {
        /// Also run the continuous-outcome comparison.
        #[arg(long)]
        continuous: bool,
        /// Run only the continuous-outcome comparison.
        #[arg(long)]
        continuous_only: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.dgp.seed = s;
        cfg.continuous.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
    log::info!("writing {}", p.display());
    Ok(BufWriter::new(f))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(dir, name)?, value)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn load_panel(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<PatientPanel> {
    match data {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(deepsdrf::io::read_panel_csv(std::io::BufReader::new(f))?)
        }
        None => Ok(sim::simulate(&cfg.dgp)?),
    }
}

fn load_models(dir: &Path, model: Model) -> Result<(GpsEnsemble<f64>, OutcomeEnsemble)> {
    let gps = GpsEnsemble::from_bundle(&read_json::<GpsBundle>(&dir.join("gps.json"))?)?;
    let name = match model {
        Model::Deepsdrf => "deepsdrf.json",
        Model::Snn => "snn.json",
    };
    let out = OutcomeEnsemble::from_bundle(&read_json::<OutcomeBundle>(&dir.join(name))?)?;
    Ok((gps, out))
}

fn net(settings: &NetSettings, input_dim: usize, panel: &PatientPanel, history: usize, head: OutputHead, seed: u64) -> deepsdrf::nn::NetConfig {
    settings.build(input_dim, panel.dim(), history, head, seed)
}

fn fit(cfg: &ExperimentConfig, panel: &PatientPanel, out_dir: &Path) -> Result<()> {
    let h = cfg.dgp.history_h;
    let d = panel.dim();
    let gcfg = net(&cfg.gps.net, d, panel, h, OutputHead::Vector(cfg.gps.num_basis_j), rng::derive(cfg.seed, 2));
    let (g, reports) = gps::fit_gps(panel, cfg.gps.basis, cfg.gps.num_basis_j, &gcfg, cfg.ensemble_m, cfg.gps.holdout)?;
    log::info!("gps final losses: {:?}", reports.iter().map(|r| r.final_loss).collect::<Vec<_>>());
    write_json(out_dir, "gps.json", &g.to_bundle())?;
    let ocfg = net(&cfg.outcome, 2, panel, h, OutputHead::PerStepSigmoid, rng::derive(cfg.seed, 3));
    for (kind, name) in [(OutcomeKind::Deepsdrf, "deepsdrf.json"), (OutcomeKind::Snn, "snn.json")] {
        let (m, reports) = survival::fit_outcome(panel, Some(&g), &ocfg, cfg.ensemble_m, kind)?;
        log::info!("{name} final losses: {:?}", reports.iter().map(|r| r.final_loss).collect::<Vec<_>>());
        write_json(out_dir, name, &m.to_bundle())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli)?;
    let out_dir = cli.out_dir.as_path();
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    match &cli.command {
        Command::Simulate => {
            let panel = sim::simulate(&cfg.dgp)?;
            deepsdrf::io::write_panel_csv(&panel, create(out_dir, "cohort.csv")?)?;
        }
        Command::Fit { data } => {
            let panel = load_panel(&cfg, data.as_deref())?;
            fit(&cfg, &panel, out_dir)?;
        }
        Command::Estimate { models, data, model, doses, patients } => {
            let panel = load_panel(&cfg, data.as_deref())?;
            let (g, out) = load_models(models, *model)?;
            let doses = if doses.is_empty() {
                cfg.eval_percentile_band.doses(&panel.observed_doses(), cfg.eval_doses)
            } else {
                doses.clone()
            };
            let mut curves = Vec::new();
            for i in 0..(*patients).min(panel.n_patients()) {
                let q = CadrQuery::new(&out, Some(&g), &panel, i)?;
                for &a in &doses {
                    curves.push(PatientCadr { patient_id: i, cadr: q.estimate(a)? });
                }
            }
            write_json(out_dir, "cadr.json", &curves)?;
            survival::write_patient_cadr_csv(&curves, create(out_dir, "cadr.csv")?)?;
        }
        Command::Recommend { models, data, model, patients } => {
            let panel = load_panel(&cfg, data.as_deref())?;
            let (g, out) = load_models(models, *model)?;
            let rs = &cfg.recommend;
            let grid = ActionGrid::from_doses(&panel.observed_doses(), rs.lo_percentile, rs.hi_percentile, rs.n_levels)?;
            let scaler = harness::covariate_scaler(&panel)?;
            let recs = harness::recommend_cohort(rs, &grid, &scaler, &g, &out, &panel, *patients, cfg.seed)?;
            let all: Vec<_> = recs.rs.into_iter().chain(recs.rl).collect();
            recommend::write_recommendations_csv(&all, create(out_dir, "recommendations.csv")?)?;
            if !recs.rl_converged {
                log::warn!("RL policy iteration stopped before the policy stabilised");
            }
        }
        Command::Evaluate { recommend } => {
            let report = harness::run_scenario_with(&cfg, &cfg.dgp, *recommend)?;
            let failed = report.failed;
            let full = harness::MetricsReport {
                config_hash: report.config_hash.clone(),
                runtime_seconds: report.runtime_seconds,
                scenarios: vec![report],
            };
            write_reports(out_dir, &full)?;
            if failed {
                log::error!("scenario failed: {:?}", full.scenarios[0].failures);
                return Ok(ExitCode::from(2));
            }
        }
        Command::Benchmark { continuous, continuous_only } => {
            if *continuous || *continuous_only {
                let c = harness::run_continuous_benchmark(&cfg.continuous)?;
                write_json(out_dir, "continuous.json", &c)?;
            }
            if !*continuous_only {
                let report = harness::run_benchmark(&cfg)?;
                write_reports(out_dir, &report)?;
                if report.failed() {
                    log::error!("{} scenario(s) failed", report.scenarios.iter().filter(|s| s.failed).count());
                    return Ok(ExitCode::from(2));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_reports(out_dir: &Path, report: &harness::MetricsReport) -> Result<()> {
    write_json(out_dir, "metrics.json", report)?;
    harness::write_metrics_csv(report, create(out_dir, "metrics.csv")?)?;
    if let Some(rec) = report.scenarios.iter().find_map(|s| s.recommendation.as_ref()) {
        harness::write_curves_csv(rec, create(out_dir, "survival_curves.csv")?)?;
        recommend::write_recommendations_csv(&rec.recommendations, create(out_dir, "recommendations.csv")?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
