//! Manifest-driven CSV ingestion and the matching writer.
//!
//! A manifest names one CSV per modality plus a labels CSV. Every file has
//! a header row and an id column; patients are joined on id. Parsing is
//! strict: any non-numeric cell, including `NA` or an empty cell, is an
//! error carrying its row and column.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::record::{Dataset, PatientRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub modalities: Vec<ModalityEntry>,
    pub labels: PathBuf,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_id_column() -> String {
    "id".into()
}

fn default_label_column() -> String {
    "label".into()
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            message: format!("{}: {e}", path.display()),
        })?;
        if m.modalities.is_empty() {
            return Err(Error::Format {
                what: "manifest",
                message: "no modalities listed".into(),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

struct Table {
    file: String,
    columns: Vec<String>,
    /// id → (1-based data row, cells without the id)
    rows: HashMap<String, (usize, Vec<String>)>,
}

fn read_table(path: &Path, id_column: &str, digest: &mut Sha256) -> Result<Table> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    digest.update((bytes.len() as u64).to_le_bytes());
    digest.update(&bytes);
    let file = path.display().to_string();
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        file: file.clone(),
        row,
        column: column.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(0, "", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let id_pos = headers
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| parse_err(0, id_column, "id column missing from header".into()))?;
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_pos)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows = HashMap::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| parse_err(row, "", e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(
                row,
                "",
                format!("{} cells, header has {}", rec.len(), headers.len()),
            ));
        }
        let id = rec[id_pos].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(row, id_column, "empty id".into()));
        }
        let cells = rec
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != id_pos)
            .map(|(_, c)| c.trim().to_string())
            .collect();
        if let Some((first, _)) = rows.insert(id.clone(), (row, cells)) {
            return Err(Error::Dataset(format!(
                "{file}: duplicate id {id} on rows {first} and {row}"
            )));
        }
    }
    Ok(Table { file, columns, rows })
}

fn parse_cell(table: &Table, row: usize, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        file: table.file.clone(),
        row,
        column: table.columns[col].clone(),
        message: format!("non-numeric value {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: table.file.clone(),
            row,
            column: table.columns[col].clone(),
            message: format!("non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

/// Joins the manifest's files on id. Records come back sorted by id.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut digest = Sha256::new();
    digest.update(fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);

    let mut tables = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        let t = read_table(&base.join(&entry.path), &manifest.id_column, &mut digest)?;
        if t.columns.len() != entry.features {
            return Err(Error::Dataset(format!(
                "{}: modality {} declares {} features but the file has {} columns",
                t.file,
                entry.name,
                entry.features,
                t.columns.len()
            )));
        }
        tables.push(t);
    }
    let labels = read_table(&base.join(&manifest.labels), &manifest.id_column, &mut digest)?;
    let label_col = labels
        .columns
        .iter()
        .position(|c| *c == manifest.label_column)
        .ok_or_else(|| Error::Parse {
            file: labels.file.clone(),
            row: 0,
            column: manifest.label_column.clone(),
            message: "label column missing from header".into(),
        })?;

    let mut ids: BTreeMap<&str, ()> = BTreeMap::new();
    for t in tables.iter().chain(std::iter::once(&labels)) {
        ids.extend(t.rows.keys().map(|k| (k.as_str(), ())));
    }
    let mut records = Vec::with_capacity(ids.len());
    for &id in ids.keys() {
        let mut modalities = Vec::with_capacity(tables.len());
        for t in &tables {
            let (row, cells) = t
                .rows
                .get(id)
                .ok_or_else(|| Error::Dataset(format!("{}: id {id} is missing", t.file)))?;
            let values = cells
                .iter()
                .enumerate()
                .map(|(c, cell)| parse_cell(t, *row, c, cell))
                .collect::<Result<Vec<_>>>()?;
            modalities.push(values);
        }
        let (row, cells) = labels
            .rows
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("{}: id {id} is missing", labels.file)))?;
        let label = match cells[label_col].as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    file: labels.file.clone(),
                    row: *row,
                    column: manifest.label_column.clone(),
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        records.push(PatientRecord {
            id: id.to_string(),
            modalities,
            label,
        });
    }
    Dataset::new(
        manifest.name.clone(),
        manifest.modalities.iter().map(|m| m.name.clone()).collect(),
        records,
        hex::encode(digest.finalize()),
    )
}

fn write_csv(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        what: "csv",
        message: format!("{}: {e}", path.display()),
    })?;
    let csv_err = |e: csv::Error| Error::Format {
        what: "csv",
        message: format!("{}: {e}", path.display()),
    };
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one CSV per modality, `labels.csv` and `manifest.json` into `dir`.
/// Values use the shortest exact decimal form, so loading them back is lossless.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sizes = dataset.modality_sizes();
    let names: Vec<String> = if dataset.modality_names.len() == sizes.len() {
        dataset.modality_names.clone()
    } else {
        (0..sizes.len()).map(|k| format!("modality_{k}")).collect()
    };
    let mut entries = Vec::new();
    for (k, (name, &size)) in names.iter().zip(&sizes).enumerate() {
        let file = PathBuf::from(format!("{name}.csv"));
        let header = std::iter::once("id".to_string())
            .chain((0..size).map(|j| format!("{name}_f{j}")))
            .collect();
        let rows = dataset.records.iter().map(|r| {
            std::iter::once(r.id.clone())
                .chain(r.modalities[k].iter().map(|v| v.to_string()))
                .collect()
        });
        write_csv(&dir.join(&file), header, rows)?;
        entries.push(ModalityEntry {
            name: name.clone(),
            path: file,
            features: size,
        });
    }
    let rows = dataset.records.iter().map(|r| vec![r.id.clone(), r.label.to_string()]);
    write_csv(&dir.join("labels.csv"), vec!["id".into(), "label".into()], rows)?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        modalities: entries,
        labels: "labels.csv".into(),
        id_column: default_id_column(),
        label_column: default_label_column(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
