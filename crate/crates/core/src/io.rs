//! File formats: model JSON, data CSV, and column alignment by name.
//!
//! JSON numbers are written with 17 significant digits so every `f64`
//! survives a save/load cycle bit for bit. Non-finite values become `null`
//! and load back as NaN.

use std::cmp::Ordering;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

use crate::discovery::{DamdaModel, KnownClass};
use crate::edda::{CovStructure, EddaModel};
use crate::error::{DamdaError, Result};
use crate::gaussian::GaussianParams;

/// Compact JSON with floats in `{:.16e}` form.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut writer, FullPrecision);
    value.serialize(&mut ser)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    write_json(&mut buf, value)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn read_json<R: Read, T: DeserializeOwned>(reader: R) -> Result<T> {
    Ok(serde_json::from_reader(reader)?)
}

fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn nan_if_null_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Vec::<Option<f64>>::deserialize(d)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(DamdaError::InvalidInput(format!("expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// On-disk form of an [`EddaModel`]. Field order is part of the format.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EddaModelFile {
    pub structure: CovStructure,
    pub tau: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
    pub variable_names: Vec<String>,
    #[serde(deserialize_with = "nan_if_null")]
    pub loglik: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub bic: f64,
    pub K: usize,
    pub P: usize,
    #[serde(default)]
    pub class_labels: Vec<String>,
}

impl From<&EddaModel> for EddaModelFile {
    fn from(m: &EddaModel) -> Self {
        Self {
            structure: m.structure,
            tau: m.tau.clone(),
            means: m.classes.iter().map(|c| c.mean().iter().copied().collect()).collect(),
            covs: m.classes.iter().map(|c| rows(c.cov())).collect(),
            variable_names: m.variable_names.clone(),
            loglik: m.loglik,
            bic: m.bic,
            K: m.k(),
            P: m.p(),
            class_labels: m.class_labels.clone(),
        }
    }
}

impl TryFrom<EddaModelFile> for EddaModel {
    type Error = DamdaError;

    fn try_from(f: EddaModelFile) -> Result<Self> {
        let (k, p) = (f.K, f.P);
        if f.tau.len() != k || f.means.len() != k || f.covs.len() != k || f.variable_names.len() != p {
            return Err(DamdaError::InvalidInput(format!(
                "model file is inconsistent with K={k}, P={p}"
            )));
        }
        let classes = f
            .means
            .iter()
            .zip(&f.covs)
            .map(|(mu, cov)| {
                if mu.len() != p {
                    return Err(DamdaError::DimensionMismatch { expected: p, found: mu.len() });
                }
                GaussianParams::new(DVector::from_column_slice(mu), matrix(cov, p, p)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let class_labels = if f.class_labels.is_empty() {
            (1..=k).map(|c| c.to_string()).collect()
        } else {
            f.class_labels
        };
        if class_labels.len() != k {
            return Err(DamdaError::DimensionMismatch { expected: k, found: class_labels.len() });
        }
        Ok(EddaModel {
            structure: f.structure,
            tau: f.tau,
            classes,
            loglik: f.loglik,
            bic: f.bic,
            variable_names: f.variable_names,
            class_labels,
        })
    }
}

pub fn save_edda<W: Write>(writer: W, model: &EddaModel) -> Result<()> {
    write_json(writer, &EddaModelFile::from(model))
}

pub fn load_edda<R: Read>(reader: R) -> Result<EddaModel> {
    read_json::<_, EddaModelFile>(reader)?.try_into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovBlocks {
    pub fixed: Vec<Vec<f64>>,
    pub cross: Vec<Vec<f64>>,
    pub new: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KnownClassFile {
    pub mu_fixed: Vec<f64>,
    pub mu_aug: Vec<f64>,
    pub cov_blocks: CovBlocks,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HiddenClassFile {
    pub mu: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// On-disk form of a fitted [`DamdaModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct DamdaModelFile {
    pub tau: Vec<f64>,
    pub known: Vec<KnownClassFile>,
    pub hidden: Vec<HiddenClassFile>,
    pub H: usize,
    #[serde(deserialize_with = "nan_if_null_vec")]
    pub loglik_trace: Vec<f64>,
    #[serde(deserialize_with = "nan_if_null")]
    pub bic: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub loglik: f64,
    pub K: usize,
    pub P: usize,
    pub Q: usize,
    pub variable_names: Vec<String>,
    pub class_labels: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
}

impl DamdaModelFile {
    /// `variable_names` covers all `R` columns in model order; `class_labels`
    /// all `K + H` components.
    pub fn new(m: &DamdaModel, variable_names: Vec<String>, class_labels: Vec<String>) -> Result<Self> {
        if variable_names.len() != m.r() {
            return Err(DamdaError::DimensionMismatch { expected: m.r(), found: variable_names.len() });
        }
        if class_labels.len() != m.n_components() {
            return Err(DamdaError::DimensionMismatch {
                expected: m.n_components(),
                found: class_labels.len(),
            });
        }
        Ok(Self {
            tau: m.tau.clone(),
            known: m
                .known
                .iter()
                .map(|k| KnownClassFile {
                    mu_fixed: k.fixed.mean().iter().copied().collect(),
                    mu_aug: k.aug_mean.iter().copied().collect(),
                    cov_blocks: CovBlocks {
                        fixed: rows(&k.aug_cov.fixed_block),
                        cross: rows(&k.aug_cov.cross_block),
                        new: rows(&k.aug_cov.new_block),
                    },
                })
                .collect(),
            hidden: m
                .hidden
                .iter()
                .map(|h| HiddenClassFile {
                    mu: h.mean().iter().copied().collect(),
                    cov: rows(h.cov()),
                })
                .collect(),
            H: m.h(),
            loglik_trace: m.loglik_trace.clone(),
            bic: m.bic,
            loglik: m.loglik,
            K: m.k(),
            P: m.p(),
            Q: m.q(),
            variable_names,
            class_labels,
            iterations: m.iterations,
            converged: m.converged,
        })
    }

    pub fn into_model(self) -> Result<DamdaModel> {
        let (p, q) = (self.P, self.Q);
        let r = p + q;
        let known = self
            .known
            .iter()
            .map(|k| {
                let fixed = GaussianParams::new(DVector::from_column_slice(&k.mu_fixed), matrix(&k.cov_blocks.fixed, p, p)?)?;
                KnownClass::new(
                    fixed,
                    DVector::from_column_slice(&k.mu_aug),
                    matrix(&k.cov_blocks.cross, p, q)?,
                    matrix(&k.cov_blocks.new, q, q)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = self
            .hidden
            .iter()
            .map(|h| GaussianParams::new(DVector::from_column_slice(&h.mu), matrix(&h.cov, r, r)?))
            .collect::<Result<Vec<_>>>()?;
        if known.len() != self.K || hidden.len() != self.H {
            return Err(DamdaError::InvalidInput("model file is inconsistent with K and H".into()));
        }
        let mut m = DamdaModel::from_parts(known, hidden, self.tau)?;
        m.loglik_trace = self.loglik_trace;
        m.loglik = self.loglik;
        m.bic = self.bic;
        m.iterations = self.iterations;
        m.converged = self.converged;
        Ok(m)
    }
}

/// Numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DataTable {
    pub names: Vec<String>,
    pub data: DMatrix<f64>,
}

impl DataTable {
    pub fn new(names: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(DamdaError::DimensionMismatch { expected: data.ncols(), found: names.len() });
        }
        Ok(Self { names, data })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Reads a comma-separated table with a header row. The optional
/// `label_column` is returned separately as raw strings; every other column
/// must parse as a finite `f64`.
pub fn read_csv_table<R: Read>(reader: R, label_column: Option<&str>) -> Result<(DataTable, Option<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DamdaError::MissingColumns(vec![name.to_owned()]))?,
        ),
        None => None,
    };
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DamdaError::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if Some(j) == label_idx {
                labels.push(field.to_owned());
                continue;
            }
            let v: f64 = field.parse().map_err(|_| DamdaError::Parse {
                line,
                message: format!("column '{}': cannot parse '{field}' as a number", header[j]),
            })?;
            if !v.is_finite() {
                return Err(DamdaError::Parse {
                    line,
                    message: format!("column '{}': non-finite value", header[j]),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    let data = DMatrix::from_row_slice(n, names.len(), &values);
    Ok((DataTable { names, data }, label_idx.map(|_| labels)))
}

/// Writes a table with an optional trailing label column. Floats use the
/// shortest representation that round-trips.
pub fn write_csv_table<W: Write>(writer: W, table: &DataTable, labels: Option<(&str, &[String])>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = table.names.iter().map(String::as_str).collect();
    if let Some((name, _)) = labels {
        header.push(name);
    }
    w.write_record(&header)?;
    for i in 0..table.data.nrows() {
        let mut rec: Vec<String> = table.data.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some((_, l)) = labels {
            rec.push(l[i].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Maps raw labels to class indices. Classes are ordered numerically when
/// every label is a number and lexicographically otherwise, so the coding
/// does not depend on row order.
pub fn encode_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut classes: Vec<String> = raw.to_vec();
    let numeric = raw.iter().all(|l| l.parse::<f64>().is_ok());
    classes.sort_by(|a, b| {
        if numeric {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        } else {
            a.cmp(b)
        }
    });
    classes.dedup();
    let codes = raw
        .iter()
        .map(|l| classes.iter().position(|c| c == l).expect("label present"))
        .collect();
    (codes, classes)
}

/// Column layout of a test table relative to a learned model: the model's
/// variables first, in model order, then the remaining columns sorted by
/// name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnAlignment {
    pub trained: Vec<usize>,
    pub extra: Vec<usize>,
    pub names: Vec<String>,
}

impl ColumnAlignment {
    pub fn new(header: &[String], model_names: &[String]) -> Result<Self> {
        let missing: Vec<String> = model_names
            .iter()
            .filter(|n| !header.contains(n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(DamdaError::MissingColumns(missing));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = header.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(DamdaError::InvalidInput(format!("duplicate column '{dup}'")));
        }
        let trained: Vec<usize> = model_names
            .iter()
            .map(|n| header.iter().position(|h| h == n).expect("checked above"))
            .collect();
        let mut extra: Vec<usize> = (0..header.len()).filter(|j| !trained.contains(j)).collect();
        extra.sort_by(|&a, &b| header[a].cmp(&header[b]));
        let names = trained.iter().chain(&extra).map(|&j| header[j].clone()).collect();
        Ok(Self { trained, extra, names })
    }

    pub fn p(&self) -> usize {
        self.trained.len()
    }

    pub fn q(&self) -> usize {
        self.extra.len()
    }

    /// Columns of `data` reordered as `[trained | extra]`.
    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let order: Vec<usize> = self.trained.iter().chain(&self.extra).copied().collect();
        data.select_columns(&order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edda::fit_edda;

    fn toy_model() -> EddaModel {
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[0.1, 0.3, 1.2, -0.4, 0.7, 0.9, -0.5, 0.2, 5.1, 4.7, 6.3, 5.5, 4.4, 6.1, 5.9, 4.2],
        );
        fit_edda(&x, &[0, 0, 0, 0, 1, 1, 1, 1], &CovStructure::ALL)
            .unwrap()
            .with_variable_names(vec!["a".into(), "b".into()])
            .unwrap()
    }

    #[test]
    fn edda_json_round_trips_bitwise() {
        let m = toy_model();
        let mut buf = Vec::new();
        save_edda(&mut buf, &m).unwrap();
        let back = load_edda(buf.as_slice()).unwrap();
        assert_eq!(back.structure, m.structure);
        assert_eq!(back.tau, m.tau);
        assert_eq!(back.loglik.to_bits(), m.loglik.to_bits());
        assert_eq!(back.bic.to_bits(), m.bic.to_bits());
        for (a, b) in back.classes.iter().zip(&m.classes) {
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.cov(), b.cov());
        }
        let mut again = Vec::new();
        save_edda(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn edda_json_field_order() {
        let s = to_json_string(&EddaModelFile::from(&toy_model())).unwrap();
        let keys = ["\"structure\"", "\"tau\"", "\"means\"", "\"covs\"", "\"variable_names\"", "\"loglik\"", "\"bic\"", "\"K\"", "\"P\""];
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn hard_floats_parse_back_exactly() {
        let values: Vec<f64> = vec![0.41666666666666674, 1.0 / 3.0, 7.3864126454596892, 1e-300, 5e-324, -2.2250738585072014e-308, 9007199254740993.0];
        let text = to_json_string(&values).unwrap();
        let back: Vec<f64> = read_json(text.as_bytes()).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a:e}");
        }
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = to_json_string(&vec![0.1f64, 1.0 / 3.0, -2.5e-300]).unwrap();
        assert_eq!(s.trim(), "[1.0000000000000001e-1,3.3333333333333331e-1,-2.5000000000000000e-300]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![0.1, 1.0 / 3.0, -2.5e-300]);
    }

    #[test]
    fn nan_round_trips_through_null() {
        let mut m = toy_model();
        m.loglik = f64::NAN;
        let s = to_json_string(&EddaModelFile::from(&m)).unwrap();
        assert!(s.contains("\"loglik\":null"));
        assert!(load_edda(s.as_bytes()).unwrap().loglik.is_nan());
    }

    #[test]
    fn csv_parsing_and_errors() {
        let text = "x,label,y\n1.5,b,2\n-3,a,4e-1\n";
        let (t, labels) = read_csv_table(text.as_bytes(), Some("label")).unwrap();
        assert_eq!(t.names, vec!["x", "y"]);
        assert_eq!(t.data, DMatrix::from_row_slice(2, 2, &[1.5, 2.0, -3.0, 0.4]));
        assert_eq!(labels.unwrap(), vec!["b", "a"]);

        match read_csv_table("x,y\n1,2\n3,oops\n".as_bytes(), None) {
            Err(DamdaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_csv_table(text.as_bytes(), Some("class")),
            Err(DamdaError::MissingColumns(_))
        ));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let t = DataTable::new(vec!["u".into(), "v".into()], DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -7.0, 1e-310])).unwrap();
        let labels = vec!["p".to_owned(), "q".to_owned()];
        let mut buf = Vec::new();
        write_csv_table(&mut buf, &t, Some(("class", &labels))).unwrap();
        let (back, l) = read_csv_table(buf.as_slice(), Some("class")).unwrap();
        assert_eq!(back, t);
        assert_eq!(l.unwrap(), labels);
    }

    #[test]
    fn label_coding_is_order_free() {
        let raw: Vec<String> = ["10", "2", "10", "1"].iter().map(|s| s.to_string()).collect();
        let (codes, classes) = encode_labels(&raw);
        assert_eq!(classes, vec!["1", "2", "10"]);
        assert_eq!(codes, vec![2, 1, 2, 0]);
        let raw: Vec<String> = ["b", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(encode_labels(&raw), (vec![1, 0, 1], vec!["a".to_owned(), "b".to_owned()]));
    }

    #[test]
    fn alignment_by_name() {
        let header: Vec<String> = ["z", "b", "extra2", "a", "extra1"].iter().map(|s| s.to_string()).collect();
        let model: Vec<String> = vec!["a".into(), "b".into()];
        let al = ColumnAlignment::new(&header, &model).unwrap();
        assert_eq!(al.trained, vec![3, 1]);
        assert_eq!(al.names, vec!["a", "b", "extra1", "extra2", "z"]);
        let data = DMatrix::from_row_slice(1, 5, &[5.0, 2.0, 4.0, 1.0, 3.0]);
        assert_eq!(al.apply(&data), DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]));
        match ColumnAlignment::new(&header, &["a".into(), "c".into()]) {
            Err(DamdaError::MissingColumns(m)) => assert_eq!(m, vec!["c"]),
            other => panic!("{other:?}"),
        }
    }
}
