//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json   generation metadata
//! <dir>/data.csv        id,y,d,<mod>:f0,...
//! <dir>/oracle.csv      id,g0,m0,l0,eps,nu,<mod>:target,...[,<mod>:feasible,...]   (optional)
//! ```
//!
//! Numbers are written in scientific notation with 17 significant digits, which
//! round-trips every `f64` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Block, ImportedBlock, Manifest, OracleColumns, SemiSynthDataset};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

/// Formats a value with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes `manifest.json`, `data.csv` and, when present, `oracle.csv`.
/// Row ids are the row indices.
pub fn write_dataset<T: Scalar>(dir: &Path, ds: &SemiSynthDataset<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(dir, &ds.manifest)?;
    let ids: Vec<String> = (0..ds.n()).map(|i| i.to_string()).collect();
    write_data_csv(&dir.join(DATA_FILE), &ids, ds)?;
    let oracle_path = dir.join(ORACLE_FILE);
    match &ds.oracle {
        Some(o) => write_oracle_csv(&oracle_path, &ids, ds, o)?,
        None => {
            if oracle_path.exists() {
                fs::remove_file(&oracle_path).map_err(|e| Error::io(&oracle_path, e))?;
            }
        }
    }
    Ok(())
}

/// Rewrites `data.csv` keeping the given ids, e.g. after a block import.
pub fn write_data_csv<T: Scalar>(path: &Path, ids: &[String], ds: &SemiSynthDataset<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string(), "y".into(), "d".into()];
    for b in &ds.blocks {
        header.extend(b.columns.iter().map(|c| format!("{}:{c}", b.name)));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        row.clear();
        row.push(ids[i].clone());
        row.push(fmt17(ds.y[i].as_f64()));
        row.push(fmt17(ds.d[i].as_f64()));
        for b in &ds.blocks {
            row.extend(b.values.row(i).iter().map(|x| fmt17(x.as_f64())));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_oracle_csv<T: Scalar>(
    path: &Path,
    ids: &[String],
    ds: &SemiSynthDataset<T>,
    o: &OracleColumns<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let order = column_order(ds, &o.targets);
    let feasible = column_order(ds, &o.feasible);
    let mut header: Vec<String> = ["id", "g0", "m0", "l0", "eps", "nu"].iter().map(|s| s.to_string()).collect();
    header.extend(order.iter().map(|m| format!("{m}:target")));
    header.extend(feasible.iter().map(|m| format!("{m}:feasible")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        row.clear();
        row.push(ids[i].clone());
        for v in [&o.g0, &o.m0, &o.l0, &o.eps, &o.nu] {
            row.push(fmt17(v[i].as_f64()));
        }
        row.extend(order.iter().map(|m| fmt17(o.targets[m][i].as_f64())));
        row.extend(feasible.iter().map(|m| fmt17(o.feasible[m][i].as_f64())));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Manifest modality order first, then any remaining keys alphabetically.
fn column_order<T: Scalar>(ds: &SemiSynthDataset<T>, cols: &BTreeMap<String, Array1<T>>) -> Vec<String> {
    let mut out: Vec<String> = ds
        .manifest
        .modality_specs
        .iter()
        .map(|s| s.name.clone())
        .filter(|m| cols.contains_key(m))
        .collect();
    for k in cols.keys() {
        if !out.contains(k) {
            out.push(k.clone());
        }
    }
    out
}

fn parse_num<T: Scalar>(path: &Path, line: usize, col: &str, s: &str) -> Result<T> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}, column `{col}`: `{s}` is not a number")))?;
    Ok(T::lit(v))
}

/// A CSV table held in memory: header plus string records.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

impl Table {
    fn column<T: Scalar>(&self, j: usize) -> Result<Array1<T>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| parse_num(&self.path, i + 2, &self.header[j], &r[j]))
            .collect()
    }

    fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r[0].to_string()).collect()
    }
}

/// Groups `<mod>:<col>` headers by modality, keeping first-appearance order.
fn group_columns(header: &[String], skip: usize) -> Result<Vec<(String, Vec<(usize, String)>)>> {
    let mut groups: Vec<(String, Vec<(usize, String)>)> = Vec::new();
    for (j, h) in header.iter().enumerate().skip(skip) {
        let (m, c) = h
            .split_once(':')
            .ok_or_else(|| Error::Schema(format!("feature column `{h}` lacks a `<modality>:` prefix")))?;
        match groups.iter_mut().find(|(name, _)| name == m) {
            Some((_, cols)) => cols.push((j, c.to_string())),
            None => groups.push((m.to_string(), vec![(j, c.to_string())])),
        }
    }
    Ok(groups)
}

/// Reads the `id` column of `data.csv`.
pub fn read_ids(dir: &Path) -> Result<Vec<String>> {
    Ok(read_table(&dir.join(DATA_FILE))?.ids())
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<SemiSynthDataset<T>> {
    let manifest = read_manifest(dir)?;
    let data = read_table(&dir.join(DATA_FILE))?;
    if data.header.len() < 3 || data.header[..3] != ["id", "y", "d"] {
        return Err(Error::parse(&data.path, "header must start with `id,y,d`"));
    }
    for (i, r) in data.rows.iter().enumerate() {
        if r.len() != data.header.len() {
            return Err(Error::parse(&data.path, format!("line {} has {} fields, expected {}", i + 2, r.len(), data.header.len())));
        }
    }
    let y = data.column(1)?;
    let d = data.column(2)?;
    let n = data.rows.len();
    let mut blocks = Vec::new();
    for (name, cols) in group_columns(&data.header, 3)? {
        let mut values = Array2::zeros((n, cols.len()));
        for (k, (j, _)) in cols.iter().enumerate() {
            values.column_mut(k).assign(&data.column::<T>(*j)?);
        }
        let columns = cols.into_iter().map(|(_, c)| c).collect();
        blocks.push(Block { name, columns, values });
    }

    let oracle_path = dir.join(ORACLE_FILE);
    let oracle = if oracle_path.exists() {
        let t = read_table(&oracle_path)?;
        let fixed = ["id", "g0", "m0", "l0", "eps", "nu"];
        if t.header.len() < fixed.len() || t.header[..fixed.len()] != fixed {
            return Err(Error::parse(&t.path, "header must start with `id,g0,m0,l0,eps,nu`"));
        }
        if t.rows.len() != n {
            return Err(Error::parse(&t.path, format!("{} rows, data.csv has {n}", t.rows.len())));
        }
        let mut targets = BTreeMap::new();
        let mut feasible = BTreeMap::new();
        for (j, h) in t.header.iter().enumerate().skip(fixed.len()) {
            match h.split_once(':') {
                Some((m, "target")) => {
                    targets.insert(m.to_string(), t.column(j)?);
                }
                Some((m, "feasible")) => {
                    feasible.insert(m.to_string(), t.column(j)?);
                }
                _ => return Err(Error::parse(&t.path, format!("unexpected oracle column `{h}`"))),
            }
        }
        Some(OracleColumns {
            g0: t.column(1)?,
            m0: t.column(2)?,
            l0: t.column(3)?,
            eps: t.column(4)?,
            nu: t.column(5)?,
            targets,
            feasible,
        })
    } else {
        None
    };

    Ok(SemiSynthDataset {
        y,
        d,
        blocks,
        oracle,
        manifest,
    })
}

/// An `id,<c0>,<c1>,...` numeric table, e.g. an embedding file.
#[derive(Debug, Clone)]
pub struct IdMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
}

pub fn read_id_matrix(path: &Path) -> Result<IdMatrix> {
    let t = read_table(path)?;
    if t.header.first().map(String::as_str) != Some("id") {
        return Err(Error::parse(path, "first column must be `id`"));
    }
    let columns: Vec<String> = t.header[1..].to_vec();
    let mut values = Array2::zeros((t.rows.len(), columns.len()));
    for (i, r) in t.rows.iter().enumerate() {
        if r.len() != t.header.len() {
            return Err(Error::parse(path, format!("line {} has {} fields, expected {}", i + 2, r.len(), t.header.len())));
        }
        for j in 0..columns.len() {
            let v: f64 = parse_num(path, i + 2, &columns[j], &r[j + 1])?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("line {}, column `{}`: non-finite value", i + 2, columns[j])));
            }
            values[[i, j]] = v;
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = t.ids().iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::parse(path, format!("duplicate id `{dup}`")));
    }
    Ok(IdMatrix {
        ids: t.ids(),
        columns,
        values,
    })
}

/// Adds or replaces the block `modality` of the dataset in `dir` with the
/// columns of an `id,...` table, written as `<modality>:e0, e1, ...`.
///
/// Every dataset id must appear exactly once in the table; rows are matched by
/// id, so the table may be in any order.
pub fn import_block(dir: &Path, table_path: &Path, modality: &str, replace: bool) -> Result<ImportedBlock> {
    if modality.is_empty() || modality.contains([',', ':']) {
        return Err(Error::Config(format!("invalid modality name `{modality}`")));
    }
    let mut ds = read_dataset::<f64>(dir)?;
    let ids = read_ids(dir)?;
    let table = read_id_matrix(table_path)?;
    if table.columns.is_empty() {
        return Err(Error::Validation(format!("{}: embedding has dimension 0", table_path.display())));
    }
    let index: BTreeMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let known: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    if let Some(extra) = table.ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Validation(format!(
            "{}: id `{extra}` does not occur in the dataset",
            table_path.display()
        )));
    }
    let mut values = Array2::zeros((ids.len(), table.columns.len()));
    for (r, id) in ids.iter().enumerate() {
        let j = *index.get(id.as_str()).ok_or_else(|| {
            Error::Validation(format!("{}: no row for dataset id `{id}`", table_path.display()))
        })?;
        values.row_mut(r).assign(&table.values.row(j));
    }
    let block = Block::with_prefix(modality, "e", values);
    match ds.blocks.iter().position(|b| b.name == modality) {
        Some(_) if !replace => {
            return Err(Error::Validation(format!(
                "modality `{modality}` already exists; pass replace to overwrite it"
            )))
        }
        Some(k) => ds.blocks[k] = block,
        None => ds.blocks.push(block),
    }
    let width = table.columns.len();
    if let Some(spec) = ds.manifest.modality_specs.iter_mut().find(|s| s.name == modality) {
        spec.feature_dim = width;
    }
    let record = ImportedBlock {
        source: table_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        columns: width,
    };
    ds.manifest.imported_blocks.insert(modality.to_string(), record.clone());
    if let Some(v) = ds.validate().first() {
        return Err(Error::Validation(v.to_string()));
    }
    write_data_csv(&dir.join(DATA_FILE), &ids, &ds)?;
    write_manifest(dir, &ds.manifest)?;
    Ok(record)
}

/// Reads a per-modality target file `id,target[,feature...]` as raw strings
/// for the target and numbers for the features.
pub(crate) fn read_target_file(path: &Path) -> Result<(Vec<String>, Vec<String>, Option<IdMatrix>)> {
    let t = read_table(path)?;
    if t.header.len() < 2 || t.header[0] != "id" || t.header[1] != "target" {
        return Err(Error::parse(path, "header must start with `id,target`"));
    }
    let targets = t.rows.iter().map(|r| r[1].trim().to_string()).collect();
    let features = if t.header.len() > 2 {
        let columns = t.header[2..].to_vec();
        let mut values = Array2::zeros((t.rows.len(), columns.len()));
        for (i, r) in t.rows.iter().enumerate() {
            for j in 0..columns.len() {
                values[[i, j]] = parse_num::<f64>(path, i + 2, &columns[j], &r[j + 2])?;
            }
        }
        Some(IdMatrix {
            ids: t.ids(),
            columns,
            values,
        })
    } else {
        None
    };
    Ok((t.ids(), targets, features))
}
