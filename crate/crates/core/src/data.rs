//! Tabular datasets: synthetic benchmark generators, CSV ingestion with mixed
//! numeric/categorical columns, standardization, and the split into
//! preselected and candidate blocks.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    NumericContinuous,
    NumericDiscrete,
    Categorical,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ColumnKind::Categorical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Candidate,
    Preselected,
    Target,
    Excluded,
}

/// One entry of a schema file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: ColumnRole) -> Self {
        Self {
            name: name.into(),
            kind,
            role,
        }
    }
}

/// Reads a schema file: a JSON list of `{name, kind, role}`.
pub fn read_schema(path: impl AsRef<Path>) -> Result<Vec<ColumnSchema>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: Vec<ColumnSchema> = serde_json::from_str(&text)?;
    validate_schema(&schema)?;
    Ok(schema)
}

pub fn write_schema(schema: &[ColumnSchema], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(schema)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let targets: Vec<&str> = schema
        .iter()
        .filter(|c| c.role == ColumnRole::Target)
        .map(|c| c.name.as_str())
        .collect();
    if targets.len() != 1 {
        return Err(Error::schema(format!(
            "exactly one target column is required, found {}",
            targets.len()
        )));
    }
    let target = &schema.iter().find(|c| c.role == ColumnRole::Target).unwrap();
    if target.kind == ColumnKind::Categorical {
        return Err(Error::schema(format!("target column {} must be numeric", target.name)));
    }
    let mut seen = BTreeSet::new();
    for c in schema {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::schema(format!("column {} declared twice", c.name)));
        }
    }
    Ok(())
}

/// An original input variable and where its encoded columns live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: ColumnKind,
    /// Columns of [`Dataset::features`] holding this variable.
    pub span: Range<usize>,
    /// One-hot levels, in column order; empty for numeric variables.
    pub levels: Vec<String>,
}

/// Per-column affine statistics retained for de-standardizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// `(offset, divisor)` per encoded column, applied as `(x - offset) / divisor`.
    /// For z-scoring this is `(mean, std)`; one-hot columns carry `(0, 1)`.
    pub columns: Vec<(f64, f64)>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Variables removed because they were constant.
    pub dropped: Vec<String>,
}

impl Standardization {
    pub fn destandardize_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }
}

/// An immutable table of input variables plus a numeric target.
///
/// Every input variable is either preselected, a candidate, or excluded;
/// `X_p` and `X_c` are gathered from the encoded feature matrix on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub variables: Vec<Variable>,
    pub roles: Vec<ColumnRole>,
    pub features: Array2<f64>,
    pub target_name: String,
    pub target: Array1<f64>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    /// Assembles a dataset from numeric columns; every variable starts as a candidate.
    pub fn from_numeric_columns(
        names: Vec<String>,
        kinds: Vec<ColumnKind>,
        features: Array2<f64>,
        target_name: impl Into<String>,
        target: Array1<f64>,
    ) -> Result<Self> {
        if names.len() != features.ncols() || kinds.len() != names.len() {
            return Err(Error::dim("one name and kind per feature column is required"));
        }
        if features.nrows() != target.len() {
            return Err(Error::dim("feature and target row counts differ"));
        }
        if target.is_empty() {
            return Err(Error::config("dataset has no rows"));
        }
        let variables = names
            .into_iter()
            .zip(kinds)
            .enumerate()
            .map(|(i, (name, kind))| Variable {
                name,
                kind,
                span: i..i + 1,
                levels: Vec::new(),
            })
            .collect::<Vec<_>>();
        Ok(Self {
            roles: vec![ColumnRole::Candidate; variables.len()],
            variables,
            features,
            target_name: target_name.into(),
            target,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Values of a numeric variable.
    pub fn column(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        let v = self.variable(name)?;
        v.kind.is_numeric().then(|| self.features.column(v.span.start))
    }

    fn indices_with(&self, role: ColumnRole) -> Vec<usize> {
        (0..self.variables.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn preselected_indices(&self) -> Vec<usize> {
        self.indices_with(ColumnRole::Preselected)
    }

    pub fn candidate_indices(&self) -> Vec<usize> {
        self.indices_with(ColumnRole::Candidate)
    }

    pub fn preselected_names(&self) -> Vec<String> {
        self.names_of(&self.preselected_indices())
    }

    pub fn candidate_names(&self) -> Vec<String> {
        self.names_of(&self.candidate_indices())
    }

    fn names_of(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.variables[i].name.clone()).collect()
    }

    fn gather(&self, idx: &[usize]) -> Array2<f64> {
        let cols: Vec<usize> = idx
            .iter()
            .flat_map(|&i| self.variables[i].span.clone())
            .collect();
        self.features.select(Axis(1), &cols)
    }

    /// Encoded preselected block `X_p` (N × encoded width, possibly 0 wide).
    pub fn preselected_matrix(&self) -> Array2<f64> {
        self.gather(&self.preselected_indices())
    }

    /// Encoded candidate block `X_c`.
    pub fn candidate_matrix(&self) -> Array2<f64> {
        self.gather(&self.candidate_indices())
    }

    /// Span of each candidate variable within [`candidate_matrix`](Self::candidate_matrix).
    pub fn candidate_spans(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.candidate_indices()
            .iter()
            .map(|&i| {
                let w = self.variables[i].span.len();
                let r = start..start + w;
                start += w;
                r
            })
            .collect()
    }

    /// Target as an N×1 matrix.
    pub fn target_matrix(&self) -> Array2<f64> {
        self.target.view().insert_axis(Axis(1)).to_owned()
    }

    /// Marks `preselected` as the condition set; every other non-excluded
    /// variable becomes a candidate.
    pub fn partition<S: AsRef<str>>(&self, preselected: &[S]) -> Result<Dataset> {
        let mut wanted = BTreeSet::new();
        for name in preselected {
            let name = name.as_ref();
            if name == self.target_name {
                return Err(Error::schema(format!(
                    "target column {name} cannot be preselected"
                )));
            }
            let idx = self
                .variable_index(name)
                .ok_or_else(|| Error::schema(format!("unknown variable {name}")))?;
            if self.roles[idx] == ColumnRole::Excluded {
                return Err(Error::schema(format!("variable {name} is excluded")));
            }
            wanted.insert(idx);
        }
        let roles: Vec<ColumnRole> = self
            .roles
            .iter()
            .enumerate()
            .map(|(i, &r)| match r {
                ColumnRole::Excluded => ColumnRole::Excluded,
                _ if wanted.contains(&i) => ColumnRole::Preselected,
                _ => ColumnRole::Candidate,
            })
            .collect();
        if !roles.contains(&ColumnRole::Candidate) {
            return Err(Error::config("no candidate variables left after preselection"));
        }
        Ok(Dataset {
            roles,
            ..self.clone()
        })
    }

    /// Drops variables by name, re-packing the encoded columns.
    pub fn without_variables(&self, names: &[String]) -> Dataset {
        let keep: Vec<usize> = (0..self.variables.len())
            .filter(|&i| !names.contains(&self.variables[i].name))
            .collect();
        let features = self.gather(&keep);
        let mut start = 0;
        let variables = keep
            .iter()
            .map(|&i| {
                let mut v = self.variables[i].clone();
                let w = v.span.len();
                v.span = start..start + w;
                start += w;
                v
            })
            .collect();
        let standardization = self.standardization.as_ref().map(|st| Standardization {
            columns: keep
                .iter()
                .flat_map(|&i| self.variables[i].span.clone())
                .map(|c| st.columns[c])
                .collect(),
            ..st.clone()
        });
        Dataset {
            variables,
            roles: keep.iter().map(|&i| self.roles[i]).collect(),
            features,
            target_name: self.target_name.clone(),
            target: self.target.clone(),
            standardization,
        }
    }

    /// Rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            target: self.target.select(Axis(0), rows),
            ..self.clone()
        }
    }

    /// Schema describing this dataset's original columns.
    pub fn schema(&self) -> Vec<ColumnSchema> {
        let mut out: Vec<ColumnSchema> = self
            .variables
            .iter()
            .zip(&self.roles)
            .map(|(v, &r)| ColumnSchema::new(&v.name, v.kind, r))
            .collect();
        out.push(ColumnSchema::new(
            &self.target_name,
            ColumnKind::NumericContinuous,
            ColumnRole::Target,
        ));
        out
    }

    /// Writes a header row plus one line per sample; categorical variables are
    /// written back as their level names.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        header.push(&self.target_name);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (r, row) in self.features.rows().into_iter().enumerate() {
            record.clear();
            for v in &self.variables {
                if v.kind.is_numeric() {
                    record.push(format_number(row[v.span.start]));
                } else {
                    let cells = row.slice(s![v.span.clone()]);
                    let level = cells
                        .iter()
                        .position(|&x| x == 1.0)
                        .map(|k| v.levels[k].clone())
                        .unwrap_or_default();
                    record.push(level);
                }
            }
            record.push(format_number(self.target[r]));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Shortest representation that parses back to the same `f64`.
fn format_number(v: f64) -> String {
    format!("{v:?}")
}

/// Category levels learned from a training file, used to encode later files
/// consistently.
pub type CategoryLevels = HashMap<String, Vec<String>>;

/// Loads a CSV file described by `schema`. Categorical columns are one-hot
/// encoded with levels sorted lexicographically.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnSchema]) -> Result<Dataset> {
    load_csv_with_levels(path, schema, None)
}

/// Like [`load_csv`] but encodes categoricals against known `levels`; an
/// unseen category becomes an all-zero row segment and is logged.
pub fn load_csv_with_levels(
    path: impl AsRef<Path>,
    schema: &[ColumnSchema],
    levels: Option<&CategoryLevels>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, schema, levels)
}

/// Parses CSV text; `origin` is used in error messages only.
pub fn parse_csv(
    text: &str,
    origin: &Path,
    schema: &[ColumnSchema],
    levels: Option<&CategoryLevels>,
) -> Result<Dataset> {
    validate_schema(schema)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    let by_name: HashMap<&str, &ColumnSchema> = schema.iter().map(|c| (c.name.as_str(), c)).collect();
    for c in schema {
        if !header.iter().any(|h| h == &c.name) {
            return Err(Error::schema(format!("column {} is missing from {}", c.name, origin.display())));
        }
    }
    for h in &header {
        if !by_name.contains_key(h.as_str()) {
            return Err(Error::schema(format!("column {h} is not declared in the schema")));
        }
    }

    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        raw.push(record.iter().map(str::to_owned).collect());
        lines.push(line);
    }
    if raw.is_empty() {
        return Err(Error::config(format!("{} has no data rows", origin.display())));
    }

    let parse_num = |row: usize, col: usize| -> Result<f64> {
        let cell = &raw[row][col];
        cell.parse::<f64>().map_err(|_| Error::Parse {
            path: origin.to_path_buf(),
            line: lines[row],
            message: format!("column {}: cannot parse {cell:?} as a number", header[col]),
        })
    };

    let n = raw.len();
    let mut variables = Vec::new();
    let mut roles = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut target = None;
    let mut target_name = String::new();

    for (col, name) in header.iter().enumerate() {
        let spec = by_name[name.as_str()];
        if spec.role == ColumnRole::Target {
            target = Some((0..n).map(|r| parse_num(r, col)).collect::<Result<Vec<f64>>>()?);
            target_name = name.clone();
            continue;
        }
        let start = columns.len();
        let var_levels = match spec.kind {
            ColumnKind::Categorical => {
                let lv: Vec<String> = match levels.and_then(|l| l.get(name)) {
                    Some(known) => known.clone(),
                    None => raw
                        .iter()
                        .map(|r| r[col].clone())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                let index: HashMap<&str, usize> =
                    lv.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                let mut onehot = vec![vec![0.0; n]; lv.len()];
                for (r, row) in raw.iter().enumerate() {
                    match index.get(row[col].as_str()) {
                        Some(&k) => onehot[k][r] = 1.0,
                        None => log::warn!(
                            "{}:{}: unseen category {:?} in column {name}; encoded as all zeros",
                            origin.display(),
                            lines[r],
                            row[col]
                        ),
                    }
                }
                columns.extend(onehot);
                lv
            }
            _ => {
                columns.push((0..n).map(|r| parse_num(r, col)).collect::<Result<Vec<f64>>>()?);
                Vec::new()
            }
        };
        variables.push(Variable {
            name: name.clone(),
            kind: spec.kind,
            span: start..columns.len(),
            levels: var_levels,
        });
        roles.push(spec.role);
    }

    let mut features = Array2::zeros((n, columns.len()));
    for (c, values) in columns.iter().enumerate() {
        features.column_mut(c).assign(&Array1::from(values.clone()));
    }
    Ok(Dataset {
        variables,
        roles,
        features,
        target_name,
        target: Array1::from(target.expect("schema validated to have a target")),
        standardization: None,
    })
}

/// Category levels of every categorical variable in `ds`.
pub fn category_levels(ds: &Dataset) -> CategoryLevels {
    ds.variables
        .iter()
        .filter(|v| v.kind == ColumnKind::Categorical)
        .map(|v| (v.name.clone(), v.levels.clone()))
        .collect()
}

/// Z-scores numeric columns and the target using statistics of `ds` itself.
/// One-hot columns are untouched; constant numeric variables are dropped and
/// listed in [`Standardization::dropped`].
pub fn standardize(ds: &Dataset) -> Dataset {
    let stats = fit_standardization(ds);
    apply_standardization(ds, &stats)
}

/// Statistics for [`apply_standardization`], computed on `ds`.
pub fn fit_standardization(ds: &Dataset) -> Standardization {
    let mut columns = vec![(0.0, 1.0); ds.features.ncols()];
    let mut dropped = Vec::new();
    for v in &ds.variables {
        if v.kind.is_numeric() {
            let (mean, std) = mean_std(ds.features.column(v.span.start));
            if std == 0.0 {
                log::warn!("dropping constant column {}", v.name);
                dropped.push(v.name.clone());
            }
            columns[v.span.start] = (mean, std);
        } else {
            let any_varies = v
                .span
                .clone()
                .any(|c| mean_std(ds.features.column(c)).1 > 0.0);
            if !any_varies {
                log::warn!("dropping constant column {}", v.name);
                dropped.push(v.name.clone());
            }
        }
    }
    let (target_mean, target_std) = mean_std(ds.target.view());
    Standardization {
        columns,
        target_mean,
        target_std: if target_std > 0.0 { target_std } else { 1.0 },
        dropped,
    }
}

/// Applies previously fitted statistics (for example from a training split).
pub fn apply_standardization(ds: &Dataset, stats: &Standardization) -> Dataset {
    let mut features = ds.features.clone();
    for v in &ds.variables {
        if v.kind.is_numeric() {
            let (mean, std) = stats.columns[v.span.start];
            let std = if std > 0.0 { std } else { 1.0 };
            features
                .column_mut(v.span.start)
                .mapv_inplace(|x| (x - mean) / std);
        }
    }
    let target = ds
        .target
        .mapv(|y| (y - stats.target_mean) / stats.target_std);
    let scaled = Dataset {
        features,
        target,
        standardization: Some(stats.clone()),
        ..ds.clone()
    };
    if stats.dropped.is_empty() {
        scaled
    } else {
        scaled.without_variables(&stats.dropped)
    }
}

/// How numeric input columns are rescaled before training. The target is
/// z-scored in every mode.
///
/// The default keeps inputs non-negative: the feature mask is computed from
/// the batch mean of `X_c`, and centred inputs make that mean vanish, leaving
/// only the bias path of the mask network to learn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScaling {
    /// `(x - min) / (max - min)`, mapping every numeric column onto `[0, 1]`.
    #[default]
    MinMax,
    /// `(x - mean) / std`.
    ZScore,
    /// Inputs as given.
    Identity,
}

/// Like [`fit_standardization`] but with the chosen input scaling.
pub fn fit_scaling(ds: &Dataset, scaling: FeatureScaling) -> Standardization {
    let mut stats = fit_standardization(ds);
    for v in ds.variables.iter().filter(|v| v.kind.is_numeric()) {
        let col = ds.features.column(v.span.start);
        stats.columns[v.span.start] = match scaling {
            FeatureScaling::ZScore => continue,
            FeatureScaling::Identity => (0.0, 1.0),
            FeatureScaling::MinMax => {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, if hi > lo { hi - lo } else { 1.0 })
            }
        };
    }
    stats
}

/// Rescales `ds` with statistics fitted on `ds` itself.
pub fn scale(ds: &Dataset, scaling: FeatureScaling) -> Dataset {
    apply_standardization(ds, &fit_scaling(ds, scaling))
}

fn mean_std(x: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A dataset edit applied after sampling and before the target is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Injection {
    /// Overwrite `target` with the square of `source` (e.g. `v7 := v1²`).
    Square { target: String, source: String },
    /// Append a new variable `name` that copies `source` (e.g. `v8r := v8`).
    Duplicate { name: String, source: String },
}

/// Synthetic benchmark `y = v1² + 10·v2·v3·v4 + 5·v5·v6 + Σ c_j·v_j + ε`
/// with `v_i ~ U(0, 1)` and `ε ~ N(0, noise_std²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_variables: usize,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Additional linear target terms `(variable, coefficient)`, used to make
    /// a variable outside v1..v6 relevant.
    #[serde(default)]
    pub extra_terms: Vec<(String, f64)>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_variables: 15,
            noise_std: 1.0,
            seed: 0,
            injections: Vec::new(),
            extra_terms: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

pub fn variable_names(count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("v{i}")).collect()
}

/// The noise-free part of the synthetic target for one row of `v1..v6`.
pub fn synthetic_signal(v: &[f64]) -> f64 {
    v[0] * v[0] + 10.0 * v[1] * v[2] * v[3] + 5.0 * v[4] * v[5]
}

/// Samples the synthetic benchmark. Injections are applied in order after
/// the inputs are drawn and before the target is computed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_variables < 6 {
        return Err(Error::config(format!(
            "the synthetic target needs at least 6 variables, got {}",
            spec.n_variables
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::config("n_samples must be positive"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config(format!("noise_std must be a finite non-negative number, got {}", spec.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.n_samples, spec.n_variables);
    let inputs = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>());
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let eps: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    synthetic_from_inputs(inputs, &eps, &spec.injections, &spec.extra_terms)
}

/// Builds a synthetic dataset from explicit inputs and noise.
pub fn synthetic_from_inputs(
    inputs: Array2<f64>,
    noise: &[f64],
    injections: &[Injection],
    extra_terms: &[(String, f64)],
) -> Result<Dataset> {
    if inputs.ncols() < 6 {
        return Err(Error::config("the synthetic target needs at least 6 variables"));
    }
    if noise.len() != inputs.nrows() {
        return Err(Error::dim("one noise draw per row is required"));
    }
    let mut names = variable_names(inputs.ncols());
    let mut features = inputs;
    for inj in injections {
        let find = |names: &[String], n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::config(format!("injection references unknown variable {n}")))
        };
        match inj {
            Injection::Square { target, source } => {
                let (t, s) = (find(&names, target)?, find(&names, source)?);
                let squared = features.column(s).mapv(|v| v * v);
                features.column_mut(t).assign(&squared);
            }
            Injection::Duplicate { name, source } => {
                if names.contains(name) {
                    return Err(Error::config(format!("variable {name} already exists")));
                }
                let s = find(&names, source)?;
                let copy = features.column(s).to_owned().insert_axis(Axis(1));
                features = ndarray::concatenate(Axis(1), &[features.view(), copy.view()])
                    .expect("row counts agree");
                names.push(name.clone());
            }
        }
    }
    let mut extra = Vec::new();
    for (name, coef) in extra_terms {
        let idx = names
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| Error::config(format!("target term references unknown variable {name}")))?;
        extra.push((idx, *coef));
    }
    let target: Array1<f64> = features
        .rows()
        .into_iter()
        .zip(noise)
        .map(|(row, e)| {
            let base = synthetic_signal(&row.to_vec());
            base + extra.iter().map(|&(i, c)| c * row[i]).sum::<f64>() + e
        })
        .collect();
    let kinds = vec![ColumnKind::NumericContinuous; names.len()];
    Dataset::from_numeric_columns(names, kinds, features, "y", target)
}

/// Coarse group of a fine group index in 1..=9: 1..=3 → 1, 4..=6 → 2, 7..=9 → 3.
pub fn coarse_group(fine: u32) -> Option<u32> {
    match fine {
        1..=3 => Some(1),
        4..=6 => Some(2),
        7..=9 => Some(3),
        _ => None,
    }
}

/// Grouped-variable benchmark: `v1` is a fine group drawn uniformly from
/// 1..=9, `v2` its coarse group, and `v3..` are `U(0, 1)`. The target mixes a
/// coarse-group effect, a fine-group offset within each coarse group, and a
/// product of two continuous variables:
/// `y = 2·v2 + 0.75·((v1 − 1) mod 3) + 4·v3·v4 + ε`.
pub fn gen_grouped(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_variables < 4 {
        return Err(Error::config(format!(
            "the grouped benchmark needs at least 4 variables, got {}",
            spec.n_variables
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::config("n_samples must be positive"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config("noise_std must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.n_samples, spec.n_variables);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let mut features = Array2::zeros((n, d));
    let mut target = Array1::zeros(n);
    for r in 0..n {
        let fine: u32 = rng.random_range(1..=9);
        let coarse = coarse_group(fine).expect("fine group in range");
        features[[r, 0]] = fine as f64;
        features[[r, 1]] = coarse as f64;
        for c in 2..d {
            features[[r, c]] = rng.random::<f64>();
        }
        target[r] = 2.0 * coarse as f64
            + 0.75 * ((fine - 1) % 3) as f64
            + 4.0 * features[[r, 2]] * features[[r, 3]]
            + noise.sample(&mut rng);
    }
    let mut kinds = vec![ColumnKind::NumericContinuous; d];
    kinds[0] = ColumnKind::NumericDiscrete;
    kinds[1] = ColumnKind::NumericDiscrete;
    Dataset::from_numeric_columns(variable_names(d), kinds, features, "y", target)
}

/// Coefficient of the `v8` term that the duplicate recipe adds to the
/// target, so that `v8` and its copy carry signal.
pub const DUPLICATE_TERM: f64 = 3.0;

/// Named dataset recipes shared by the command line and the service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// The plain synthetic benchmark.
    Eq7,
    /// Synthetic benchmark with `v7 := v1²`.
    Eq7Redundant,
    /// Synthetic benchmark plus `3·v8` in the target and a copy `v8r := v8`.
    Eq7Duplicate,
    /// The grouped benchmark (`v2` is a coarsening of `v1`).
    Grouped,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Eq7, Recipe::Eq7Redundant, Recipe::Eq7Duplicate, Recipe::Grouped];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Eq7 => "eq7",
            Recipe::Eq7Redundant => "eq7-redundant",
            Recipe::Eq7Duplicate => "eq7-duplicate",
            Recipe::Grouped => "grouped",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|r| r.name()).collect();
            Error::config(format!("unknown recipe {name:?}; expected one of {}", known.join(", ")))
        })
    }

    /// The generator spec for this recipe on top of `base`.
    pub fn spec(self, base: SyntheticSpec) -> SyntheticSpec {
        let mut spec = base;
        match self {
            Recipe::Eq7 | Recipe::Grouped => {}
            Recipe::Eq7Redundant => spec.injections.push(Injection::Square {
                target: "v7".into(),
                source: "v1".into(),
            }),
            Recipe::Eq7Duplicate => {
                spec.extra_terms.push(("v8".into(), DUPLICATE_TERM));
                spec.injections.push(Injection::Duplicate {
                    name: "v8r".into(),
                    source: "v8".into(),
                });
            }
        }
        spec
    }

    pub fn generate(self, base: SyntheticSpec) -> Result<Dataset> {
        let spec = self.spec(base);
        match self {
            Recipe::Grouped => gen_grouped(&spec),
            _ => gen_synthetic(&spec),
        }
    }
}
