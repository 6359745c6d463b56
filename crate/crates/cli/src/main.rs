//! `attn-rc` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attn_rc::config::{Config, ReadoutChoice, SystemChoice};
use attn_rc::dynamics::AlrsExposure;
use attn_rc::eval::{
    build_dataset, closed_loop_eval, fit_readout, harvest_member, run_ensemble, run_sweep, spectra,
    start_plans, write_spectrum_csv, FittedReadout, SpectrumResult, SweepAxis, SweepSpec,
};
use attn_rc::io::{atomic_write, write_csv};
use attn_rc::readout::{ReadoutModel, SavedModel};
use attn_rc::reservoir::StateCache;
use attn_rc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "attn-rc",
    version,
    about = "Reservoir computing with attention readouts"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set reservoir.nodes=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Reservoir backend.
    #[arg(long, global = true, value_parser = ["lang-kobayashi", "leaky-esn"])]
    backend: Option<String>,

    /// Worker threads for ensemble members and sweep cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Neither read nor write the state cache.
    #[arg(long, global = true)]
    no_cache: bool,

    /// Output directory (overrides io.output_dir).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    /// More log output; repeat for trace level.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test series of the first member.
    GenData,
    /// Generate, harvest, train and evaluate one configuration.
    Run {
        /// Readout to train (overrides readout.model).
        #[arg(long, value_parser = parse_readout)]
        readout: Option<ReadoutChoice>,
        /// Also fit ridge regression on the same states.
        #[arg(long)]
        baseline: bool,
        /// Write the first member's standardized state matrix as CSV.
        #[arg(long)]
        export_states: bool,
    },
    /// Sweep one parameter over an ensemble.
    Sweep {
        /// Preset reproducing one figure's data: 4, 7, 8, 9 or 11.
        #[arg(long, conflicts_with_all = ["axis", "values"])]
        figure: Option<u32>,
        #[arg(long, value_parser = ["reservoir-size", "sigma-force", "horizon-steps"], requires = "values")]
        axis: Option<String>,
        /// Comma-separated, strictly increasing axis values.
        #[arg(long, value_delimiter = ',', requires = "axis")]
        values: Vec<f64>,
        /// Readouts to compare (default: ridge and readout.model).
        #[arg(long, value_delimiter = ',', value_parser = parse_readout)]
        models: Vec<ReadoutChoice>,
    },
    /// Power spectra of the truth and of long free runs (N=30 preset).
    Spectrum {
        /// Use this saved model instead of fitting ridge and attention.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Exposed channel to analyse.
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

fn parse_readout(s: &str) -> std::result::Result<ReadoutChoice, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.common.quiet, cli.common.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for numerical failures, 2 for usage, configuration and file problems.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. }
        | Error::TrainingDivergence { .. }
        | Error::TrajectoryEscape { .. }
        | Error::RankDeficient { .. }
        | Error::UndefinedMetric(_) => 1,
        _ => 2,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => cmd_gen_data(&load_config(&cli.common, &[])?, &cli.common),
        Command::Run {
            readout,
            baseline,
            export_states,
        } => {
            let mut extra = Vec::new();
            if let Some(r) = readout {
                extra.push(format!("readout.model={}", r.name()));
            }
            let cfg = load_config(&cli.common, &extra)?;
            cmd_run(&cfg, &cli.common, *baseline, *export_states)
        }
        Command::Sweep {
            figure,
            axis,
            values,
            models,
        } => match figure {
            Some(f) => cmd_figure(*f, &cli.common, models),
            None => {
                let axis = match axis.as_deref() {
                    Some("reservoir-size") => SweepAxis::ReservoirSize,
                    Some("sigma-force") => SweepAxis::SigmaForce,
                    Some("horizon-steps") => SweepAxis::HorizonSteps,
                    _ => {
                        return Err(Error::Config(
                            "sweep needs --figure or --axis with --values".into(),
                        ))
                    }
                };
                let cfg = load_config(&cli.common, &[])?;
                let out = output_dir(&cfg, &cli.common);
                cmd_sweep(
                    &cfg,
                    &cli.common,
                    axis,
                    values.clone(),
                    models,
                    &out,
                    "sweep",
                )
            }
        },
        Command::Spectrum { model, channel } => {
            cmd_spectrum(&cli.common, model.as_deref(), *channel)
        }
    }
}

/// Defaults < preset < config file < `--backend` < `--set`.
fn load_config(common: &Common, preset: &[String]) -> Result<Config> {
    let text = match &common.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let file_cfg = Config::resolve(text.as_deref(), &[])?;
    let mut overrides: Vec<String> = Vec::new();
    // preset keys apply only where the file left the default
    let file_keys = file_cfg.deviations();
    for p in preset {
        let key = p.split('=').next().unwrap_or_default();
        if !file_keys.iter().any(|d| d.starts_with(&format!("{key} ="))) {
            overrides.push(p.clone());
        }
    }
    if let Some(b) = &common.backend {
        overrides.push(format!("reservoir.backend={b}"));
    }
    overrides.extend(common.set.iter().cloned());
    let cfg = Config::resolve(text.as_deref(), &overrides)?;
    for d in cfg.deviations() {
        log::info!("setting differs from the reference defaults: {d}");
    }
    log::info!("config hash {}", cfg.hash());
    Ok(cfg)
}

fn output_dir(cfg: &Config, common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| cfg.io.output_dir.clone())
}

fn jobs(common: &Common) -> usize {
    common.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn cache(cfg: &Config, common: &Common) -> Option<StateCache> {
    (!common.no_cache && cfg.io.use_cache).then(|| StateCache::new(cfg.io.resolved_cache_dir()))
}

fn cmd_gen_data(cfg: &Config, common: &Common) -> Result<()> {
    let out = output_dir(cfg, common);
    let split = build_dataset(&cfg.dataset, AlrsExposure::Xyz, cfg.dataset.seed)?;
    for (name, t) in [("train", &split.train), ("test", &split.test)] {
        t.write_csv(&out.join(format!("{name}.csv")))?;
        t.metadata(split.seed, Some(split.stats.clone()))
            .write(&out.join(format!("{name}.json")))?;
    }
    if cfg.dataset.system == SystemChoice::Alrs {
        write_csv(
            &out.join("segments.csv"),
            &["start", "len", "system", "dt_sample"],
            split.segments.iter().map(|s| {
                vec![
                    s.start.to_string(),
                    s.len.to_string(),
                    format!("{:?}", s.system).to_lowercase(),
                    s.dt_sample.to_string(),
                ]
            }),
        )?;
    }
    log::info!(
        "wrote {} train and {} test samples to {}",
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(cfg: &Config, common: &Common, baseline: bool, export_states: bool) -> Result<()> {
    let out = output_dir(cfg, common);
    let mut models = vec![cfg.readout.model];
    if baseline && cfg.readout.model != ReadoutChoice::Ridge {
        models.insert(0, ReadoutChoice::Ridge);
    }
    let cache = cache(cfg, common);
    let (report, members) = run_ensemble(cfg, &models, jobs(common), cache.as_ref())?;
    atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    for row in &report.rows {
        log::info!(
            "{:<20} {:<16} {:.4} +- {:.4} (n={})",
            row.model.name(),
            row.metric.name,
            row.metric.ensemble_mean,
            row.metric.ensemble_std,
            row.metric.n_members
        );
    }

    let first = match members.iter().position(|m| m.is_ok()) {
        Some(i) => members.into_iter().nth(i).expect("index in range")?,
        // every member failed: surface the first failure with its own kind
        None => match members.into_iter().next() {
            Some(Err(e)) => return Err(e),
            _ => return Err(Error::Format("no members ran".into())),
        },
    };
    let h = &first.harvested;
    for r in &first.readouts {
        let name = r.choice.name();
        SavedModel::new(
            r.model.clone(),
            Some(h.state_stats.clone()),
            Some(cfg.hash()),
        )
        .save(&out.join(format!("model-{name}.json")))?;
        if let Some(t) = &r.training {
            t.curve.write_csv(&out.join(format!("loss-{name}.csv")))?;
        }
        if cfg.eval.closed_loop {
            if let Some(plan) = start_plans(&h.split, cfg).first() {
                let start = plan.starts[0];
                let run = closed_loop_eval(&r.model, h, start, plan.duration, plan.scale)?;
                write_trajectory(
                    &out.join(format!("closed-loop-{name}.csv")),
                    &run.prediction,
                    h,
                    start,
                )?;
                let sidecar = serde_json::json!({
                    "seed": first.seed,
                    "start": start,
                    "dt_sample": plan.scale.dt_sample,
                    "lyapunov": plan.scale.lyapunov,
                    "vpt": run.vpt,
                    "escaped_at": run.escaped_at,
                    "config_hash": cfg.hash(),
                });
                atomic_write(
                    &out.join(format!("closed-loop-{name}.json")),
                    &serde_json::to_vec_pretty(&sidecar)?,
                )?;
            }
        }
    }
    if export_states {
        let names: Vec<String> = (0..h.states.ncols()).map(|j| format!("node{j}")).collect();
        write_csv(
            &out.join("states.csv"),
            &names.iter().map(String::as_str).collect::<Vec<_>>(),
            h.states
                .row_iter()
                .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>()),
        )?;
    }
    log::info!("results written to {}", out.display());
    if !report.failures.is_empty() {
        log::warn!("{} member(s) failed", report.failures.len());
    }
    Ok(())
}

/// `step,truth_*,pred_*` for a free run starting at input index `start`.
fn write_trajectory(
    path: &Path,
    pred: &nalgebra::DMatrix<f64>,
    h: &attn_rc::eval::Harvested,
    start: usize,
) -> Result<()> {
    let m = h.inputs.ncols();
    let mut header = vec!["step".to_string()];
    header.extend((0..m).map(|j| format!("truth_{j}")));
    header.extend((0..m).map(|j| format!("pred_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        (0..pred.nrows()).map(|t| {
            let mut row = vec![t.to_string()];
            row.extend((0..m).map(|j| format!("{:e}", h.inputs[(start + t, j)])));
            row.extend((0..m).map(|j| format!("{:e}", pred[(t, j)])));
            row
        }),
    )
}

/// Output name, overrides, axis, values and models for one figure panel.
type FigureRun<'a> = (
    &'a str,
    Vec<String>,
    SweepAxis,
    Vec<f64>,
    Vec<ReadoutChoice>,
);

fn cmd_sweep(
    cfg: &Config,
    common: &Common,
    axis: SweepAxis,
    values: Vec<f64>,
    models: &[ReadoutChoice],
    out: &Path,
    name: &str,
) -> Result<()> {
    let mut spec = SweepSpec::new(axis, values, cfg.clone());
    if !models.is_empty() {
        spec.models = models.to_vec();
    }
    let cache = cache(cfg, common);
    let report = run_sweep(&spec, jobs(common), cache.as_ref())?;
    report.write_csv(&out.join(format!("{name}.csv")))?;
    report.write_json(&out.join(format!("{name}.json")))?;
    if !report.failures.is_empty() {
        log::warn!(
            "{} member(s) failed and were excluded",
            report.failures.len()
        );
    }
    log::info!("wrote {}", out.join(format!("{name}.csv")).display());
    Ok(())
}

fn steps(from: f64, to: f64, step: f64) -> Vec<f64> {
    let n = ((to - from) / step).round() as usize;
    // round through decimal text so grid points print cleanly
    (0..=n)
        .map(|i| format!("{:.6}", from + i as f64 * step).parse().unwrap())
        .collect()
}

fn cmd_figure(figure: u32, common: &Common, models: &[ReadoutChoice]) -> Result<()> {
    let sizes = steps(10.0, 150.0, 10.0);
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let default_models = [ReadoutChoice::Ridge, ReadoutChoice::LinearAttention];
    let runs: Vec<FigureRun> = match figure {
        4 => vec![(
            "fig4",
            s(&["dataset.system=uctls", "dataset.sigma_force=0.05"]),
            SweepAxis::ReservoirSize,
            sizes,
            default_models.to_vec(),
        )],
        7 => vec![(
            "fig7",
            s(&["dataset.system=uctls", "reservoir.nodes=50"]),
            SweepAxis::SigmaForce,
            steps(0.0, 0.15, 0.01),
            default_models.to_vec(),
        )],
        8 => vec![(
            "fig8",
            s(&["dataset.system=alrs"]),
            SweepAxis::ReservoirSize,
            sizes,
            default_models.to_vec(),
        )],
        9 => vec![
            (
                "fig9a",
                s(&[
                    "dataset.system=uctls",
                    "dataset.sigma_force=0.05",
                    "reservoir.nodes=50",
                ]),
                SweepAxis::HorizonSteps,
                steps(1.0, 10.0, 1.0),
                default_models.to_vec(),
            ),
            (
                "fig9b",
                s(&["dataset.system=alrs", "reservoir.nodes=50"]),
                SweepAxis::HorizonSteps,
                steps(1.0, 10.0, 1.0),
                default_models.to_vec(),
            ),
        ],
        11 => vec![(
            "fig11",
            s(&["dataset.system=uctls", "dataset.sigma_force=0.0"]),
            SweepAxis::ReservoirSize,
            sizes,
            vec![
                ReadoutChoice::Ridge,
                ReadoutChoice::LinearAttention,
                ReadoutChoice::NonlinearAttention,
            ],
        )],
        other => {
            return Err(Error::Config(format!(
                "unknown figure {other}; presets exist for 4, 7, 8, 9 and 11"
            )))
        }
    };
    for (name, preset, axis, values, preset_models) in runs {
        let cfg = load_config(common, &preset)?;
        let out = output_dir(&cfg, common);
        let chosen = if models.is_empty() {
            preset_models
        } else {
            models.to_vec()
        };
        cmd_sweep(&cfg, common, axis, values, &chosen, &out, name)?;
    }
    Ok(())
}

fn cmd_spectrum(common: &Common, model_path: Option<&Path>, channel: usize) -> Result<()> {
    let saved = model_path.map(SavedModel::load).transpose()?;
    let mut preset = vec![
        "reservoir.nodes=30".to_string(),
        "dataset.system=uctls".to_string(),
    ];
    if let Some(s) = &saved {
        preset[0] = format!("reservoir.nodes={}", s.n_nodes);
    }
    let cfg = load_config(common, &preset)?;
    if cfg.dataset.system != SystemChoice::Uctls {
        return Err(Error::Config(
            "spectra are defined for the UCTLS task".into(),
        ));
    }
    let out = output_dir(&cfg, common);
    let seed = cfg.dataset.seed;
    let n_train = cfg.dataset.n_train;
    let cache = cache(&cfg, common);
    let h = harvest_member(&cfg, seed, AlrsExposure::Xyz, &[n_train], cache.as_ref())?;
    let readouts: Vec<FittedReadout> = match saved {
        Some(s) => {
            if s.n_nodes != cfg.reservoir.nodes {
                return Err(Error::Config(
                    "model node count differs from reservoir.nodes".into(),
                ));
            }
            if s.state_stats.as_ref() != Some(&h.state_stats) {
                log::warn!("model was trained on different state statistics than this harvest");
            }
            let choice = match &s.model {
                ReadoutModel::Ridge(_) => ReadoutChoice::Ridge,
                ReadoutModel::LinearAttention(_) => ReadoutChoice::LinearAttention,
                ReadoutModel::NonlinearAttention(_) => ReadoutChoice::NonlinearAttention,
            };
            vec![FittedReadout {
                choice,
                model: s.model,
                lambda: None,
                training: None,
            }]
        }
        None => {
            let (r_tr, y_tr, r_te, y_te) = h.pairs(1)?;
            let mut v = Vec::new();
            for choice in [ReadoutChoice::Ridge, cfg.readout.model] {
                if v.iter().any(|r: &FittedReadout| r.choice == choice) {
                    continue;
                }
                v.push(fit_readout(
                    choice,
                    &cfg.readout,
                    seed,
                    &r_tr,
                    &y_tr,
                    &r_te,
                    &y_te,
                )?);
            }
            v
        }
    };
    let backend = cfg.reservoir.backend()?;
    let set = spectra(&readouts, &backend, &h, cfg.eval.spectrum_steps, channel)?;
    let mut summary = vec![spectrum_summary("truth", Some(&set.truth))];
    write_spectrum_csv(&out.join("spectrum-truth.csv"), &set.truth)?;
    for (choice, s) in &set.predicted {
        if let Some(s) = s {
            write_spectrum_csv(&out.join(format!("spectrum-{}.csv", choice.name())), s)?;
        }
        summary.push(spectrum_summary(choice.name(), s.as_ref()));
    }
    atomic_write(
        &out.join("spectrum.json"),
        &serde_json::to_vec_pretty(&serde_json::json!({
            "config_hash": cfg.hash(),
            "channel": channel,
            "spectra": summary,
        }))?,
    )?;
    log::info!("spectra written to {}", out.display());
    Ok(())
}

fn spectrum_summary(name: &str, s: Option<&SpectrumResult>) -> serde_json::Value {
    match s {
        Some(s) => serde_json::json!({
            "name": name,
            "averaging_windows": s.averaging_windows,
            "bin_width": s.bin_width(),
            "peak_frequency": s.peak_frequency(),
        }),
        None => serde_json::json!({ "name": name, "escaped": true }),
    }
}
