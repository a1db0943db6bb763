//! Dataset CSV format and its JSON schema sidecar.
//!
//! Columns: `id, split, label, <one per protected attribute>, au_0..au_11,
//! f_0..f_{d-1}`. Labels are class names or integer indices; group cells are
//! group names, integer indices, or `-1` / `unknown` for samples whose group
//! is not known. Floats are written with 17 significant digits so that a
//! write → read cycle is bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use posmatch_core::data::{Attribute, Dataset, Sample, Split, AU_DIM};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const SCHEMA_FILE: &str = "schema.json";
const UNKNOWN_GROUP: &str = "unknown";

/// Class and group vocabularies stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub class_names: Vec<String>,
    pub attr_schema: BTreeMap<String, Vec<String>>,
}

impl Schema {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            class_names: ds.class_names().to_vec(),
            attr_schema: ds.attributes().iter().map(|a| (a.name.clone(), a.groups.clone())).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn group_cell(attr: &Attribute, g: Option<usize>) -> &str {
    match g {
        Some(g) => &attr.groups[g],
        None => UNKNOWN_GROUP,
    }
}

/// Writes `ds` as CSV, including the split column.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = vec!["id".into(), "split".into(), "label".into()];
    header.extend(ds.attributes().iter().map(|a| a.name.clone()));
    header.extend((0..AU_DIM).map(|k| format!("au_{k}")));
    header.extend((0..ds.feature_dim()).map(|k| format!("f_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in ds.samples().iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(s.id.clone());
        row.push(ds.split_of(i).as_str().into());
        row.push(ds.class_names()[s.label].clone());
        for (attr, &g) in ds.attributes().iter().zip(&s.groups) {
            row.push(group_cell(attr, g).into());
        }
        row.extend(s.au.iter().map(|&v| format_float(v)));
        row.extend(s.features.iter().map(|&v| format_float(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `dir/dataset.csv` and `dir/schema.json`, creating `dir` if needed.
pub fn write_dataset_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(ds, &dir.join(DATASET_FILE))?;
    Schema::of(ds).write(&dir.join(SCHEMA_FILE))
}

/// Loads `dir/dataset.csv`, using `dir/schema.json` when present.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let schema_path = dir.join(SCHEMA_FILE);
    let schema = if schema_path.exists() { Some(Schema::read(&schema_path)?) } else { None };
    load_csv(&dir.join(DATASET_FILE), schema.as_ref())
}

/// Loads a dataset from a directory (see [`load_dataset_dir`]) or a CSV file.
/// For a file, a `schema.json` in the same directory is used if it exists.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return load_dataset_dir(path);
    }
    let schema_path = path.with_file_name(SCHEMA_FILE);
    let schema = if schema_path.exists() { Some(Schema::read(&schema_path)?) } else { None };
    load_csv(path, schema.as_ref())
}

struct Columns {
    id: usize,
    split: usize,
    label: usize,
    attrs: Vec<(String, usize)>,
    au: Vec<usize>,
    features: Vec<usize>,
}

fn is_indexed(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let find = |name: &str| -> Result<usize> {
            names.iter().position(|&n| n == name).ok_or_else(|| Error::MissingColumn(name.into()))
        };
        let au = (0..AU_DIM).map(|k| find(&format!("au_{k}"))).collect::<Result<Vec<_>>>()?;
        let n_features = names.iter().filter(|n| is_indexed(n, "f_")).count();
        if n_features == 0 {
            return Err(Error::MissingColumn("f_0".into()));
        }
        let features = (0..n_features).map(|k| find(&format!("f_{k}"))).collect::<Result<Vec<_>>>()?;
        let attrs = names
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(**n, "id" | "split" | "label") && !is_indexed(n, "au_") && !is_indexed(n, "f_"))
            .map(|(i, n)| (n.to_string(), i))
            .collect();
        Ok(Self { id: find("id")?, split: find("split")?, label: find("label")?, attrs, au, features })
    }
}

/// Resolves a label or group cell against an optional vocabulary. Without a
/// vocabulary, the values seen in the file define it: integer cells are
/// indices and name cells are sorted lexicographically.
struct Vocab {
    names: Vec<String>,
    given: bool,
}

impl Vocab {
    fn infer(values: &BTreeSet<&str>, given: Option<&[String]>) -> Self {
        if let Some(names) = given {
            return Self { names: names.to_vec(), given: true };
        }
        let ints: Option<Vec<usize>> = values.iter().map(|v| v.parse::<usize>().ok()).collect();
        let names = match ints {
            Some(ints) => (0..ints.into_iter().max().map_or(0, |m| m + 1)).map(|i| i.to_string()).collect(),
            None => values.iter().map(|v| v.to_string()).collect(),
        };
        Self { names, given: false }
    }

    fn resolve(&self, cell: &str) -> Option<usize> {
        if let Some(i) = self.names.iter().position(|n| n == cell) {
            return Some(i);
        }
        if self.given {
            return cell.parse::<usize>().ok().filter(|&i| i < self.names.len());
        }
        None
    }
}

fn is_unknown_group(cell: &str) -> bool {
    cell == "-1" || cell.eq_ignore_ascii_case(UNKNOWN_GROUP) || cell.is_empty()
}

/// Reads a dataset CSV. Rows are numbered from 1 for the first data row.
pub fn load_csv(path: &Path, schema: Option<&Schema>) -> Result<Dataset> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let cols = Columns::from_header(&header)?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(csv_err)?;
    if records.is_empty() {
        return Err(Error::EmptyFile(PathBuf::from(path)));
    }

    let label_values: BTreeSet<&str> = records.iter().map(|r| &r[cols.label]).collect();
    let labels = Vocab::infer(&label_values, schema.map(|s| s.class_names.as_slice()));
    let mut attr_vocabs = Vec::with_capacity(cols.attrs.len());
    for (name, col) in &cols.attrs {
        let given = match schema {
            Some(s) => Some(
                s.attr_schema
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("schema has no groups for attribute {name:?}")))?
                    .as_slice(),
            ),
            None => None,
        };
        let values: BTreeSet<&str> = records.iter().map(|r| &r[*col]).filter(|c| !is_unknown_group(c)).collect();
        attr_vocabs.push(Vocab::infer(&values, given));
    }

    let bad = |row: usize, column: &str, reason: String| Error::BadValue { row, column: column.into(), reason };
    let parse_float = |row: usize, record: &csv::StringRecord, col: usize| -> Result<f64> {
        let cell = &record[col];
        let v: f64 = cell.parse().map_err(|_| bad(row, &header[col], format!("not a number: {cell:?}")))?;
        if !v.is_finite() {
            return Err(bad(row, &header[col], format!("non-finite value {cell:?}")));
        }
        Ok(v)
    };

    let mut samples = Vec::with_capacity(records.len());
    let mut splits = Vec::with_capacity(records.len());
    for (r, record) in records.iter().enumerate() {
        let row = r + 1;
        let split_cell = &record[cols.split];
        splits
            .push(Split::parse(split_cell).ok_or_else(|| bad(row, "split", format!("unknown split {split_cell:?}")))?);
        let label_cell = &record[cols.label];
        let label =
            labels.resolve(label_cell).ok_or_else(|| bad(row, "label", format!("unknown class {label_cell:?}")))?;
        let mut groups = Vec::with_capacity(cols.attrs.len());
        for ((name, col), vocab) in cols.attrs.iter().zip(&attr_vocabs) {
            let cell = &record[*col];
            if is_unknown_group(cell) {
                groups.push(None);
            } else {
                groups
                    .push(Some(vocab.resolve(cell).ok_or_else(|| bad(row, name, format!("unknown group {cell:?}")))?));
            }
        }
        let mut au = [0.0; AU_DIM];
        for (k, &col) in cols.au.iter().enumerate() {
            let v = parse_float(row, record, col)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(row, &header[col], format!("AU intensity {v} outside [0, 1]")));
            }
            au[k] = v;
        }
        let features = cols.features.iter().map(|&col| parse_float(row, record, col)).collect::<Result<_>>()?;
        samples.push(Sample { id: record[cols.id].to_string(), features, au, label, groups });
    }

    let attributes = cols
        .attrs
        .iter()
        .zip(attr_vocabs)
        .map(|((name, _), vocab)| Attribute { name: name.clone(), groups: vocab.names })
        .collect();
    Ok(Dataset::new(samples, labels.names, attributes, splits)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, f64::MIN_POSITIVE, 0.0, -0.0, 0.8] {
            let back: f64 = format_float(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn indexed_column_names() {
        assert!(is_indexed("f_12", "f_"));
        assert!(!is_indexed("f_", "f_"));
        assert!(!is_indexed("f_x", "f_"));
        assert!(!is_indexed("gender", "f_"));
    }

    #[test]
    fn vocab_without_schema_uses_indices_or_sorted_names() {
        let ints: BTreeSet<&str> = ["2", "0"].into_iter().collect();
        assert_eq!(Vocab::infer(&ints, None).names, vec!["0", "1", "2"]);
        let names: BTreeSet<&str> = ["sad", "happy"].into_iter().collect();
        let v = Vocab::infer(&names, None);
        assert_eq!(v.names, vec!["happy", "sad"]);
        assert_eq!(v.resolve("sad"), Some(1));
        assert_eq!(v.resolve("1"), None);
    }

    #[test]
    fn vocab_with_schema_accepts_names_and_indices() {
        let given = vec!["male".to_string(), "female".to_string()];
        let v = Vocab::infer(&BTreeSet::new(), Some(&given));
        assert_eq!(v.resolve("female"), Some(1));
        assert_eq!(v.resolve("0"), Some(0));
        assert_eq!(v.resolve("2"), None);
    }
}
