//! `spnet`: simulate economies, run estimators, Monte Carlo sweeps and
//! path-integral uncertainty analyses from one TOML configuration.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use spnet_core::dgp::{simulate_dataset, true_effects};
use spnet_core::estimators::{default_transform, full_gmm, spillover_test, EstimatorContext};
use spnet_core::fk::{distance_profile, GaussianPosterior, PathSpec, ProfileLine};
use spnet_core::io::{read_dataset, write_dataset, write_truth, NetworkRequirement};
use spnet_core::mc::{
    append_records, event_study_panel, read_records, run_estimator, run_mc_resumable, summarize,
    uncertainty_table, write_event_study, write_records, write_summary, write_uncertainty,
    McRecord,
};
use spnet_core::seed::SeedSpec;
use spnet_core::{Error, Result};

use config::{parse_estimators, RunConfig};

#[derive(Parser)]
#[command(
    name = "spnet",
    version,
    about = "Spatial-network treatment effects: simulation, estimation, Monte Carlo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset with its true effects.
    Simulate(Common),
    /// Run estimators on a dataset directory and write their reports as JSON.
    Estimate {
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated estimator names.
        #[arg(long, default_value = "twfe,did,gps,spatial_rd,network_iv,full_gmm")]
        estimators: String,
        /// Also run the joint spillover test.
        #[arg(long)]
        spillover_test: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo sweep; resumes from records already in the output directory.
    Mc(Common),
    /// Structural fit followed by path-integral uncertainty decomposition and
    /// distance profile.
    Fk(Common),
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Run metadata; the only output that carries timestamps.
fn write_metadata(
    out: &Path,
    command: &str,
    started: u64,
    cfg: &RunConfig,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "config": cfg,
        "details": extra,
    });
    std::fs::write(
        out.join("metadata.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.mc.seed = s;
        cfg.mc.base_seed = s;
        cfg.fk.seed = s;
    }
    if let Some(p) = common.parallelism {
        cfg.mc.parallelism = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn cmd_simulate(common: &Common) -> Result<()> {
    let started = unix_seconds();
    let cfg = load(common)?;
    let sim = simulate_dataset(cfg.mc.config, &cfg.dgp, cfg.mc.seed)?;
    let truth = true_effects(&sim, &cfg.dgp)?;
    write_dataset(&common.out, &sim.dataset)?;
    write_truth(&common.out, &sim.tau_true, &truth)?;
    write_metadata(
        &common.out,
        "simulate",
        started,
        &cfg,
        json!({ "n_units": sim.dataset.n() }),
    )?;
    println!(
        "wrote {} units to {}",
        sim.dataset.n(),
        common.out.display()
    );
    Ok(())
}

fn cmd_estimate(
    data: &Path,
    estimators: &str,
    spill: bool,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let names = parse_estimators(estimators)?;
    let cfg = RunConfig::load_or_default(config)?;
    let needs_network = names.iter().any(|n| n == "network_iv" || n == "full_gmm") || spill;
    let ds = read_dataset(
        data,
        NetworkRequirement {
            network: needs_network,
            lagged: needs_network,
        },
    )?;
    let ctx = EstimatorContext::from_settings(&cfg.dgp);
    let opts = cfg.estimator_options();
    let mut reports = Vec::with_capacity(names.len());
    for n in &names {
        reports.push(run_estimator(n, &ds, &opts, &ctx)?);
    }
    let doc = if spill {
        let t = spillover_test(&ds, &default_transform, &cfg.hac)?;
        json!({ "reports": reports, "spillover_test": t })
    } else {
        json!({ "reports": reports })
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("wrote {} reports to {}", reports.len(), out.display());
    Ok(())
}

const PARTIAL_RECORDS: &str = "mc_records.partial.csv";

fn cmd_mc(common: &Common) -> Result<()> {
    let started = unix_seconds();
    let cfg = load(common)?;
    let plan = cfg.plan();
    std::fs::create_dir_all(&common.out)?;
    let partial = common.out.join(PARTIAL_RECORDS);
    let mut previous: Vec<McRecord> = if partial.exists() {
        read_records(&partial)?
    } else {
        Vec::new()
    };
    // Only replications with every estimator present count as done.
    previous.retain(|r| plan.configs.contains(&r.config) && r.replication < plan.replications);
    let mut done = BTreeSet::new();
    for &c in &plan.configs {
        for rep in 0..plan.replications {
            let n = previous
                .iter()
                .filter(|r| r.config == c && r.replication == rep)
                .count();
            if n == plan.estimators.len() {
                done.insert((c, rep));
            }
        }
    }
    previous.retain(|r| done.contains(&(r.config, r.replication)));
    if !done.is_empty() {
        println!("resuming: {} replications already complete", done.len());
    }
    let lock = std::sync::Mutex::new(());
    let sink = |recs: &[McRecord]| {
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = append_records(&partial, recs) {
            eprintln!("warning: could not flush records: {e}");
        }
    };
    let fresh = run_mc_resumable(&plan, &done, &sink)?;
    let mut records = previous;
    records.extend(fresh);
    plan.sort_records(&mut records);
    write_records(&common.out.join("mc_records.csv"), &records)?;
    let cells = summarize(&records)?;
    write_summary(&common.out.join("mc_summary.csv"), &cells)?;

    let pool = thread_pool(plan.parallelism)?;
    let mut panels = Vec::new();
    for (k, (name, design, m)) in cfg.panels().into_iter().enumerate() {
        if m > 0 {
            let seed = SeedSpec::new(plan.base_seed).child("event_study", k as u64);
            panels.push((name, pool.install(|| event_study_panel(&design, m, seed))?));
        }
    }
    if !panels.is_empty() {
        let refs: Vec<(&str, &_)> = panels.iter().map(|(n, p)| (*n, p)).collect();
        write_event_study(&common.out.join("event_study.csv"), &refs)?;
    }
    std::fs::remove_file(&partial)?;
    let failures: usize = records.iter().filter(|r| r.failed()).count();
    let decay: serde_json::Value = panels
        .iter()
        .map(|(n, p)| ((*n).to_string(), json!(p.mean_decay_kappa())))
        .collect::<serde_json::Map<_, _>>()
        .into();
    write_metadata(
        &common.out,
        "mc",
        started,
        &cfg,
        json!({ "records": records.len(), "failed_records": failures, "decay_kappa": decay }),
    )?;
    println!(
        "wrote {} records and {} summary cells to {}",
        records.len(),
        cells.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_fk(common: &Common) -> Result<()> {
    let started = unix_seconds();
    let cfg = load(common)?;
    let pool = thread_pool(cfg.mc.parallelism)?;
    let sim = simulate_dataset(cfg.mc.config, &cfg.dgp, cfg.mc.seed)?;
    let ctx = EstimatorContext::from_settings(&cfg.dgp);
    let report = full_gmm(&sim.dataset, &cfg.hac, &cfg.gmm, &ctx)?;
    let unc = cfg.uncertainty();
    let rows = pool.install(|| uncertainty_table(&report, &unc))?;
    let st = report
        .structural
        .as_ref()
        .ok_or_else(|| Error::Numerical("structural fit missing".into()))?;
    let posterior = GaussianPosterior {
        mean: st.params.as_array(),
        cov: st.cov,
    };
    let (border, s0, sl) = (unc.border, unc.s0, unc.intensity_slope);
    let source = move |p: [f64; 3], _t: f64| {
        if p[0] > border {
            s0 * (1.0 + sl * p[2])
        } else {
            0.0
        }
    };
    let line = ProfileLine {
        border,
        x2: unc.x2,
        alpha: unc.alpha,
    };
    let spec = PathSpec::new([0.0; 3], unc.horizon, unc.dt, unc.paths, unc.domain);
    // Same parameter stream as the uncertainty table, so both outputs share
    // one set of draws.
    let draws_seed = SeedSpec::new(unc.seed).child("parameters", 0);
    let profile = pool.install(|| {
        distance_profile(
            &posterior,
            unc.draws,
            &source,
            &line,
            &cfg.fk.profile_distances,
            &spec,
            draws_seed,
        )
    })?;

    std::fs::create_dir_all(&common.out)?;
    std::fs::write(
        common.out.join("gmm_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_uncertainty(&common.out.join("uncertainty.csv"), &rows)?;
    let mut w = csv::Writer::from_path(common.out.join("profile.csv")).map_err(Error::from)?;
    w.write_record(["distance", "mean", "lo68", "hi68", "lo95", "hi95"])
        .map_err(Error::from)?;
    for r in &profile {
        w.write_record(
            [r.distance, r.mean, r.lo68, r.hi68, r.lo95, r.hi95].map(|v| format!("{v:.16e}")),
        )
        .map_err(Error::from)?;
    }
    w.flush()?;
    write_metadata(
        &common.out,
        "fk",
        started,
        &cfg,
        json!({ "config_id": cfg.mc.config }),
    )?;
    println!(
        "wrote uncertainty and profile tables to {}",
        common.out.display()
    );
    Ok(())
}

/// 2 for usage and input errors, 3 for numerical failures, 1 for I/O.
fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Io(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Estimate {
            data,
            estimators,
            spillover_test,
            config,
            out,
        } => cmd_estimate(data, estimators, *spillover_test, config.as_deref(), out),
        Command::Mc(c) => cmd_mc(c),
        Command::Fk(c) => cmd_fk(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
