//! CSV and JSON persistence of datasets, truths and lattice fields.
//!
//! A dataset directory holds `units.csv`, `network.csv`,
//! `lagged_network.csv` and a `dataset.json` sidecar. Reals are written in
//! `{:.16e}` form, which round-trips every finite `f64` exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::TrueEffects;
use crate::error::{Error, Result};
use crate::pde::GridField;
use crate::types::{Adjacency, ConfigId, Dataset, SpatialDomain, UnitRecord};

pub const UNITS_FILE: &str = "units.csv";
pub const NETWORK_FILE: &str = "network.csv";
pub const LAGGED_NETWORK_FILE: &str = "lagged_network.csv";
pub const DATASET_META_FILE: &str = "dataset.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TRUTH_META_FILE: &str = "truth.json";

const UNIT_HEADER: [&str; 10] = [
    "id", "x1", "x2", "alpha", "source", "X1", "X2", "X3", "Y", "degree",
];

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} '{s}'")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n_units: usize,
    pub config_id: Option<ConfigId>,
    pub seed: Option<u64>,
}

fn write_edges(path: &Path, adj: &Adjacency) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j"])?;
    for (i, j) in adj.edges() {
        w.write_record([i.to_string(), j.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_edges(path: &Path, n: usize) -> Result<Adjacency> {
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "missing network file {}",
            path.display()
        )));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut edges = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        if row.len() != 2 {
            return Err(Error::Parse(format!(
                "{}: line {} needs two columns",
                path.display(),
                k + 2
            )));
        }
        edges.push((
            parse(&row[0], "node", k + 2)?,
            parse(&row[1], "node", k + 2)?,
        ));
    }
    Adjacency::from_edges(n, &edges)
}

/// Writes a dataset into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(UNITS_FILE))?;
    w.write_record(UNIT_HEADER)?;
    for u in &ds.units {
        w.write_record([
            u.id.to_string(),
            real(u.x[0]),
            real(u.x[1]),
            real(u.alpha),
            real(u.source),
            real(u.controls[0]),
            real(u.controls[1]),
            real(u.controls[2]),
            real(u.outcome),
            u.degree.to_string(),
        ])?;
    }
    w.flush()?;
    write_edges(&dir.join(NETWORK_FILE), &ds.network)?;
    write_edges(&dir.join(LAGGED_NETWORK_FILE), &ds.lagged_network)?;
    let meta = DatasetMeta {
        n_units: ds.n(),
        config_id: ds.config_id,
        seed: ds.seed,
    };
    fs::write(
        dir.join(DATASET_META_FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

/// Which network files a caller needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkRequirement {
    pub network: bool,
    pub lagged: bool,
}

impl NetworkRequirement {
    pub const ALL: Self = Self {
        network: true,
        lagged: true,
    };
}

/// Reads a dataset directory. Network files that are not required may be
/// absent, in which case the corresponding graph is empty.
pub fn read_dataset(dir: &Path, need: NetworkRequirement) -> Result<Dataset> {
    let units_path = dir.join(UNITS_FILE);
    if !units_path.exists() {
        return Err(Error::InvalidInput(format!(
            "missing unit file {}",
            units_path.display()
        )));
    }
    let mut rd = csv::Reader::from_path(&units_path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != UNIT_HEADER {
        return Err(Error::Parse(format!(
            "unexpected unit header {header:?}, want {UNIT_HEADER:?}"
        )));
    }
    let mut units = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let f = |c: usize| parse::<f64>(&row[c], UNIT_HEADER[c], line);
        units.push(UnitRecord {
            id: parse(&row[0], "id", line)?,
            x: [f(1)?, f(2)?],
            alpha: f(3)?,
            source: f(4)?,
            controls: [f(5)?, f(6)?, f(7)?],
            outcome: f(8)?,
            degree: parse(&row[9], "degree", line)?,
        });
    }
    let n = units.len();
    let meta_path = dir.join(DATASET_META_FILE);
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?)
    } else {
        None
    };
    if let Some(m) = &meta {
        if m.n_units != n {
            return Err(Error::InvalidInput(format!(
                "{} lists {} units, found {n}",
                DATASET_META_FILE, m.n_units
            )));
        }
    }
    let load = |file: &str, required: bool| -> Result<Adjacency> {
        let p = dir.join(file);
        if required || p.exists() {
            read_edges(&p, n)
        } else {
            Ok(Adjacency::empty(n))
        }
    };
    let ds = Dataset {
        units,
        network: load(NETWORK_FILE, need.network)?,
        lagged_network: load(LAGGED_NETWORK_FILE, need.lagged)?,
        config_id: meta.as_ref().and_then(|m| m.config_id),
        seed: meta.as_ref().and_then(|m| m.seed),
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-unit true treatment and the two true estimands.
pub fn write_truth(dir: &Path, tau_true: &[f64], effects: &TrueEffects) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(TRUTH_FILE))?;
    w.write_record(["id", "tau_true"])?;
    for (i, t) in tau_true.iter().enumerate() {
        w.write_record([i.to_string(), real(*t)])?;
    }
    w.flush()?;
    fs::write(
        dir.join(TRUTH_META_FILE),
        serde_json::to_string_pretty(effects)? + "\n",
    )?;
    Ok(())
}

pub fn read_truth(dir: &Path) -> Result<(Vec<f64>, TrueEffects)> {
    let mut rd = csv::Reader::from_path(dir.join(TRUTH_FILE))?;
    let mut tau = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        tau.push(parse(&row[1], "tau_true", k + 2)?);
    }
    let effects = serde_json::from_str(&fs::read_to_string(dir.join(TRUTH_META_FILE))?)?;
    Ok((tau, effects))
}

/// Writes `x1,x2,alpha,value` rows plus a `<stem>.json` header holding the
/// domain.
pub fn write_grid_field(path: &Path, field: &GridField) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "alpha", "value"])?;
    let d = &field.domain;
    let [nx, ny, na] = d.grid;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..na {
                w.write_record([
                    real(d.node(0, i)),
                    real(d.node(1, j)),
                    real(d.node(2, k)),
                    real(field.at(i, j, k)),
                ])?;
            }
        }
    }
    w.flush()?;
    fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(d)? + "\n",
    )?;
    Ok(())
}

pub fn read_grid_field(path: &Path) -> Result<GridField> {
    let domain: SpatialDomain =
        serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let mut rd = csv::Reader::from_path(path)?;
    let mut values = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: line {} needs four columns",
                path.display(),
                k + 2
            )));
        }
        values.push(parse(&row[3], "value", k + 2)?);
    }
    GridField::new(domain, values)
}
