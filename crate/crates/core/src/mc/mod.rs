//! Monte Carlo experiments: replication sweeps over configurations and
//! estimators, their summaries, the binary-timing event-study panels and the
//! distance-banded uncertainty decomposition.

mod event_study;
mod uncertainty;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{simulate_dataset_with_field, treatment_field, true_effects, DgpSettings};
use crate::error::{Error, Result};
use crate::estimators::{
    did, full_gmm, gps, network_iv, spatial_rd, twfe, EstimateReport, EstimatorContext, GmmOptions,
    HacSpec,
};
use crate::seed::SeedSpec;
use crate::types::{ConfigId, Dataset};

pub use event_study::{event_study_panel, write_event_study, PanelDesign, PanelPaths};
pub use uncertainty::{uncertainty_table, write_uncertainty, UncertaintyOptions, UncertaintyRow};

/// Estimator names in reporting order.
pub const ESTIMATORS: [&str; 6] = ["twfe", "did", "gps", "spatial_rd", "network_iv", "full_gmm"];

/// Share of failed replications above which a summary cell is unreliable.
pub const UNRELIABLE_FAILURE_SHARE: f64 = 0.2;

/// Tuning shared by every estimator in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub twfe_bins: usize,
    pub gps_bandwidth: Option<f64>,
    pub rd_bandwidth: Option<f64>,
    pub hac: HacSpec,
    pub gmm: GmmOptions,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            twfe_bins: 20,
            gps_bandwidth: None,
            rd_bandwidth: None,
            hac: HacSpec::default(),
            gmm: GmmOptions::default(),
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if self.twfe_bins < 2 {
            return Err(Error::InvalidInput(format!(
                "twfe_bins = {} < 2",
                self.twfe_bins
            )));
        }
        for (name, b) in [
            ("gps_bandwidth", self.gps_bandwidth),
            ("rd_bandwidth", self.rd_bandwidth),
        ] {
            if let Some(b) = b {
                if !(b > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "{name} = {b} must be positive"
                    )));
                }
            }
        }
        self.hac.validate()?;
        self.gmm.validate()
    }
}

pub fn check_estimator_names<S: AsRef<str>>(names: &[S]) -> Result<()> {
    for n in names {
        if !ESTIMATORS.contains(&n.as_ref()) {
            return Err(Error::InvalidInput(format!(
                "unknown estimator '{}'; valid names are {}",
                n.as_ref(),
                ESTIMATORS.join(", ")
            )));
        }
    }
    Ok(())
}

/// Runs one estimator by name.
pub fn run_estimator(
    name: &str,
    ds: &Dataset,
    opts: &EstimatorOptions,
    ctx: &EstimatorContext,
) -> Result<EstimateReport> {
    match name {
        "twfe" => twfe(ds, opts.twfe_bins, ctx),
        "did" => did(ds, ctx),
        "gps" => gps(ds, opts.gps_bandwidth, ctx),
        "spatial_rd" => spatial_rd(ds, opts.rd_bandwidth, ctx),
        "network_iv" => network_iv(ds, ctx),
        "full_gmm" => full_gmm(ds, &opts.hac, &opts.gmm, ctx),
        other => {
            check_estimator_names(&[other])?;
            unreachable!()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McPlan {
    pub configs: Vec<ConfigId>,
    pub estimators: Vec<String>,
    pub replications: usize,
    pub base_seed: u64,
    pub dgp: DgpSettings,
    pub estimator_options: EstimatorOptions,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
}

impl Default for McPlan {
    fn default() -> Self {
        Self {
            configs: ConfigId::ALL.to_vec(),
            estimators: ESTIMATORS.iter().map(|s| s.to_string()).collect(),
            replications: 200,
            base_seed: 20240101,
            dgp: DgpSettings::default(),
            estimator_options: EstimatorOptions::default(),
            parallelism: 0,
        }
    }
}

impl McPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidInput(format!(
                "replications = {} < 2",
                self.replications
            )));
        }
        if self.configs.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidInput(
                "plan needs at least one configuration and one estimator".into(),
            ));
        }
        check_estimator_names(&self.estimators)?;
        let distinct: BTreeSet<_> = self.estimators.iter().collect();
        if distinct.len() != self.estimators.len() {
            return Err(Error::InvalidInput("estimator names repeat".into()));
        }
        self.dgp.validate()?;
        self.estimator_options.validate()
    }

    /// Dataset seed of one replication; independent of execution order.
    pub fn replication_seed(&self, config: ConfigId, replication: usize) -> u64 {
        SeedSpec::new(self.base_seed)
            .child("mc", config.case_number() as u64)
            .child("replication", replication as u64)
            .base_seed
    }

    fn estimator_rank(&self, name: &str) -> usize {
        self.estimators
            .iter()
            .position(|e| e == name)
            .unwrap_or(usize::MAX)
    }

    /// Puts records into canonical (config, replication, estimator) order.
    pub fn sort_records(&self, records: &mut [McRecord]) {
        records.sort_by(|a, b| {
            (a.config, a.replication, self.estimator_rank(&a.estimator)).cmp(&(
                b.config,
                b.replication,
                self.estimator_rank(&b.estimator),
            ))
        });
    }
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub config: ConfigId,
    pub replication: usize,
    pub seed: u64,
    pub estimator: String,
    pub truth_direct: f64,
    pub truth_total: f64,
    pub direct: f64,
    pub direct_se: f64,
    pub total: f64,
    pub total_se: f64,
    /// Empty on success, the error message otherwise.
    pub error: String,
}

impl McRecord {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

/// Simulates one replication and runs every estimator of the plan on it.
/// Failures become records with an error message; they never abort.
pub fn run_replication(
    plan: &McPlan,
    config: ConfigId,
    field: &crate::pde::GridField,
    replication: usize,
) -> Vec<McRecord> {
    let seed = plan.replication_seed(config, replication);
    let ctx = EstimatorContext::from_settings(&plan.dgp);
    let blank = |name: &str, truth: (f64, f64), error: String| McRecord {
        config,
        replication,
        seed,
        estimator: name.to_string(),
        truth_direct: truth.0,
        truth_total: truth.1,
        direct: f64::NAN,
        direct_se: f64::NAN,
        total: f64::NAN,
        total_se: f64::NAN,
        error,
    };
    let sim = simulate_dataset_with_field(config, &plan.dgp, seed, field)
        .and_then(|sim| true_effects(&sim, &plan.dgp).map(|t| (sim, t)));
    let (sim, truth) = match sim {
        Ok(v) => v,
        Err(e) => {
            let msg = format!("simulation failed: {e}");
            return plan
                .estimators
                .iter()
                .map(|n| blank(n, (f64::NAN, f64::NAN), msg.clone()))
                .collect();
        }
    };
    let tv = (truth.direct, truth.total_border);
    plan.estimators
        .iter()
        .map(
            |name| match run_estimator(name, &sim.dataset, &plan.estimator_options, &ctx) {
                Ok(r) => McRecord {
                    direct: r.direct.estimate,
                    direct_se: r.direct.se,
                    total: r.total_border.estimate,
                    total_se: r.total_border.se,
                    ..blank(name, tv, String::new())
                },
                Err(e) => blank(name, tv, e.to_string()),
            },
        )
        .collect()
}

/// Runs every (config, replication) of the plan not listed in `done`,
/// handing each finished replication's records to `sink` in completion
/// order. Returns the new records in canonical order.
pub fn run_mc_resumable(
    plan: &McPlan,
    done: &BTreeSet<(ConfigId, usize)>,
    sink: &(dyn Fn(&[McRecord]) + Sync),
) -> Result<Vec<McRecord>> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let mut out = Vec::new();
    for &config in &plan.configs {
        let todo: Vec<usize> = (0..plan.replications)
            .filter(|r| !done.contains(&(config, *r)))
            .collect();
        if todo.is_empty() {
            continue;
        }
        let field = treatment_field(config, &plan.dgp)?;
        let recs: Vec<Vec<McRecord>> = pool.install(|| {
            todo.par_iter()
                .map(|&r| {
                    let v = run_replication(plan, config, &field, r);
                    sink(&v);
                    v
                })
                .collect()
        });
        out.extend(recs.into_iter().flatten());
    }
    plan.sort_records(&mut out);
    Ok(out)
}

pub fn run_mc(plan: &McPlan) -> Result<Vec<McRecord>> {
    run_mc_resumable(plan, &BTreeSet::new(), &|_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Direct,
    TotalBorder,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Direct => "direct",
            Target::TotalBorder => "total_border",
        }
    }
}

/// Summary statistics of one (config, estimator, target) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub config: ConfigId,
    pub estimator: String,
    pub target: Target,
    pub replications: usize,
    pub failures: usize,
    pub mean_truth: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
    /// Variance of the errors with divisor n, so that bias² + variance = MSE.
    pub variance: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub unreliable: bool,
}

/// One cell from its per-replication (error, se, covered) values and
/// failure count.
pub fn summarize_cell(
    errors: &[f64],
    ses: &[f64],
    covered: &[bool],
    truths: &[f64],
    failures: usize,
) -> McCellStats {
    let n = errors.len();
    if n == 0 {
        return McCellStats {
            n,
            bias: f64::NAN,
            bias_mc_se: f64::NAN,
            variance: f64::NAN,
            rmse: f64::NAN,
            coverage: f64::NAN,
            mean_se: f64::NAN,
            mean_truth: f64::NAN,
            failures,
        };
    }
    let nf = n as f64;
    let bias = errors.iter().sum::<f64>() / nf;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / nf;
    let variance = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / nf;
    let bias_mc_se = if n > 1 {
        (variance * nf / (nf - 1.0) / nf).sqrt()
    } else {
        f64::NAN
    };
    McCellStats {
        n,
        bias,
        bias_mc_se,
        variance,
        rmse: mse.sqrt(),
        coverage: covered.iter().filter(|&&c| c).count() as f64 / nf,
        mean_se: ses.iter().sum::<f64>() / nf,
        mean_truth: truths.iter().sum::<f64>() / nf,
        failures,
    }
}

/// Intermediate cell statistics, exposed for direct testing of the formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCellStats {
    pub n: usize,
    pub bias: f64,
    pub bias_mc_se: f64,
    pub variance: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub mean_truth: f64,
    pub failures: usize,
}

/// Reduces replication records to per-cell summaries. Records are put in a
/// canonical order first, so the result does not depend on the order in
/// which replications finished. A record whose estimate or standard error
/// is not finite counts as a failure for that target.
pub fn summarize(records: &[McRecord]) -> Result<Vec<McCell>> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no replication records".into()));
    }
    let mut groups: BTreeMap<(ConfigId, String, Target), Vec<&McRecord>> = BTreeMap::new();
    for r in records {
        for t in [Target::Direct, Target::TotalBorder] {
            groups
                .entry((r.config, r.estimator.clone(), t))
                .or_default()
                .push(r);
        }
    }
    let mut cells = Vec::with_capacity(groups.len());
    for ((config, estimator, target), mut recs) in groups {
        recs.sort_by_key(|r| r.replication);
        let (mut errors, mut ses, mut covered, mut truths) = (vec![], vec![], vec![], vec![]);
        let mut failures = 0;
        for r in &recs {
            let (est, se, truth) = match target {
                Target::Direct => (r.direct, r.direct_se, r.truth_direct),
                Target::TotalBorder => (r.total, r.total_se, r.truth_total),
            };
            if r.failed() || !(est.is_finite() && se.is_finite() && truth.is_finite()) {
                failures += 1;
                continue;
            }
            errors.push(est - truth);
            ses.push(se);
            truths.push(truth);
            let e = crate::estimators::Estimate::new(est, se);
            covered.push(e.covers(truth));
        }
        let s = summarize_cell(&errors, &ses, &covered, &truths, failures);
        cells.push(McCell {
            config,
            estimator,
            target,
            replications: recs.len(),
            failures,
            mean_truth: s.mean_truth,
            bias: s.bias,
            bias_mc_se: s.bias_mc_se,
            variance: s.variance,
            rmse: s.rmse,
            coverage: s.coverage,
            mean_se: s.mean_se,
            unreliable: failures as f64 > UNRELIABLE_FAILURE_SHARE * recs.len() as f64,
        });
    }
    let rank = |n: &str| {
        ESTIMATORS
            .iter()
            .position(|e| *e == n)
            .unwrap_or(ESTIMATORS.len())
    };
    cells.sort_by(|a, b| {
        (a.config, rank(&a.estimator), &a.estimator, a.target).cmp(&(
            b.config,
            rank(&b.estimator),
            &b.estimator,
            b.target,
        ))
    });
    Ok(cells)
}

pub fn find_cell<'a>(
    cells: &'a [McCell],
    config: ConfigId,
    estimator: &str,
    target: Target,
) -> Option<&'a McCell> {
    cells
        .iter()
        .find(|c| c.config == config && c.estimator == estimator && c.target == target)
}

fn real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_real(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad number '{s}'")))
}

const RECORD_HEADER: [&str; 11] = [
    "config",
    "replication",
    "seed",
    "estimator",
    "truth_direct",
    "truth_total",
    "direct",
    "direct_se",
    "total",
    "total_se",
    "error",
];

fn record_row(r: &McRecord) -> [String; 11] {
    [
        r.config.to_string(),
        r.replication.to_string(),
        r.seed.to_string(),
        r.estimator.clone(),
        real(r.truth_direct),
        real(r.truth_total),
        real(r.direct),
        real(r.direct_se),
        real(r.total),
        real(r.total_se),
        r.error.clone(),
    ]
}

pub fn write_records(path: &Path, records: &[McRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Appends records to a CSV file, writing the header when the file is new.
pub fn append_records(path: &Path, records: &[McRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RECORD_HEADER)?;
    }
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<McRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(Error::Parse(format!("unexpected record header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let int = |k: usize| {
            row[k]
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad integer '{}'", &row[k])))
        };
        out.push(McRecord {
            config: row[0].parse()?,
            replication: int(1)? as usize,
            seed: int(2)?,
            estimator: row[3].to_string(),
            truth_direct: parse_real(&row[4])?,
            truth_total: parse_real(&row[5])?,
            direct: parse_real(&row[6])?,
            direct_se: parse_real(&row[7])?,
            total: parse_real(&row[8])?,
            total_se: parse_real(&row[9])?,
            error: row[10].to_string(),
        });
    }
    Ok(out)
}

/// Writes the summary in table layout: one row per (config, estimator,
/// target).
pub fn write_summary(path: &Path, cells: &[McCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config",
        "case",
        "estimator",
        "target",
        "replications",
        "failures",
        "mean_truth",
        "bias",
        "bias_mc_se",
        "rmse",
        "coverage",
        "mean_se",
        "unreliable",
    ])?;
    for c in cells {
        w.write_record([
            c.config.to_string(),
            c.config.case_number().to_string(),
            c.estimator.clone(),
            c.target.as_str().to_string(),
            c.replications.to_string(),
            c.failures.to_string(),
            real(c.mean_truth),
            real(c.bias),
            real(c.bias_mc_se),
            real(c.rmse),
            real(c.coverage),
            real(c.mean_se),
            c.unreliable.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rep: usize, est: f64, se: f64) -> McRecord {
        McRecord {
            config: ConfigId::NoSpillovers,
            replication: rep,
            seed: rep as u64,
            estimator: "twfe".into(),
            truth_direct: 0.1,
            truth_total: 0.1,
            direct: est,
            direct_se: se,
            total: est,
            total_se: se,
            error: String::new(),
        }
    }

    #[test]
    fn exact_estimator_has_zero_bias_and_full_coverage() {
        let recs: Vec<_> = (0..5).map(|r| rec(r, 0.1, 0.0)).collect();
        let cells = summarize(&recs).unwrap();
        for c in cells {
            assert_eq!(c.bias, 0.0);
            assert_eq!(c.rmse, 0.0);
            assert_eq!(c.coverage, 1.0);
        }
    }

    #[test]
    fn failures_are_counted_and_excluded() {
        let mut recs: Vec<_> = (0..4).map(|r| rec(r, 0.12, 0.01)).collect();
        recs[0].error = "boom".into();
        recs[0].direct = f64::NAN;
        let c = summarize(&recs)
            .unwrap()
            .into_iter()
            .find(|c| c.target == Target::Direct)
            .unwrap();
        assert_eq!((c.replications, c.failures), (4, 1));
        assert!(c.unreliable);
        assert!((c.bias - 0.02).abs() < 1e-15);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut recs: Vec<_> = (0..3)
            .map(|r| rec(r, 0.1 + r as f64 * 1e-3, 0.01))
            .collect();
        recs[1].error = "failed, with a comma".into();
        recs[1].direct = f64::NAN;
        append_records(&p, &recs[..1]).unwrap();
        append_records(&p, &recs[1..]).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], recs[0]);
        assert_eq!(back[2], recs[2]);
        assert!(back[1].direct.is_nan() && back[1].error == recs[1].error);
    }
}
