//! Census-style count tables and supplemental datasets.
//!
//! File formats (UTF-8 CSV, one header row):
//!
//! * `surnames.csv`: `surname,<race_1>,...,<race_K>` with nonnegative counts.
//! * `geo.csv`: `geo_id,<race_1>,...,<race_K>` with nonnegative counts.
//! * `supplemental.csv`: `id,surname,geo,y,race[,cov_1,...,cov_p]`. An empty
//!   `race` field marks an unlabeled record. Covariate columns whose values
//!   are not all numeric are treated as categorical and one-hot encoded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::{normalize, normalize_surname, AttributedRecord, Context, RaceDistribution, RaceSet};
use crate::error::{Error, Result};

/// Per-race counts for each census surname. Pr[S=s|R=r] is derived as
/// `count(s, r) / race_totals[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurnameTable {
    race_set: RaceSet,
    rows: BTreeMap<String, Vec<f64>>,
    race_totals: Vec<f64>,
}

impl SurnameTable {
    /// Builds a table from count rows; race totals are the column sums.
    pub fn from_counts(race_set: RaceSet, rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let k = race_set.len();
        let mut map = BTreeMap::new();
        for (surname, counts) in rows {
            validate_counts(&counts, k).map_err(|reason| Error::InvalidConfig(format!("surname {surname}: {reason}")))?;
            let key = normalize_surname(&surname);
            if map.insert(key.clone(), counts).is_some() {
                return Err(Error::DuplicateSurname(key));
            }
        }
        let race_totals = column_sums(map.values(), k);
        Ok(Self {
            race_set,
            rows: map,
            race_totals,
        })
    }

    /// Replaces the per-race denominators, e.g. with full census race
    /// populations when the table omits rare surnames.
    pub fn with_race_totals(mut self, totals: Vec<f64>) -> Result<Self> {
        if totals.len() != self.race_set.len() {
            return Err(Error::LengthMismatch {
                expected: self.race_set.len(),
                found: totals.len(),
            });
        }
        for (r, (total, column)) in totals.iter().zip(column_sums(self.rows.values(), totals.len())).enumerate() {
            if !total.is_finite() || *total < column {
                return Err(Error::InvalidConfig(format!(
                    "race total {total} for {} is smaller than its column sum {column}",
                    self.race_set.label(r)
                )));
            }
        }
        self.race_totals = totals;
        Ok(self)
    }

    pub fn race_set(&self) -> &RaceSet {
        &self.race_set
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn race_totals(&self) -> &[f64] {
        &self.race_totals
    }

    pub fn counts(&self, surname: &str) -> Option<&[f64]> {
        self.rows.get(surname).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(s, c)| (s.as_str(), c.as_slice()))
    }

    /// Pr[S=surname | R=r] for every r, or `None` if the surname is not
    /// tabulated. `surname` must already be normalized.
    pub fn likelihood(&self, surname: &str) -> Option<Vec<f64>> {
        let counts = self.rows.get(surname)?;
        Some(
            counts
                .iter()
                .zip(&self.race_totals)
                .map(|(c, total)| if *total > 0.0 { c / total } else { 0.0 })
                .collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_count_table(path, "surname", &self.race_set, self.iter())
    }

    /// Writes Pr[S|R] with 12 significant digits.
    pub fn export_likelihoods(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        write_header(&mut out, path, "surname", &self.race_set)?;
        for surname in self.rows.keys() {
            let probs = self.likelihood(surname).expect("surname present");
            write_row(&mut out, path, surname, probs.iter().map(|p| format_significant(*p, 12)))?;
        }
        Ok(())
    }
}

/// Per-race census counts C^(g) for each geography.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTable {
    race_set: RaceSet,
    rows: BTreeMap<String, Vec<f64>>,
}

impl GeoTable {
    pub fn from_counts(race_set: RaceSet, rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let k = race_set.len();
        let mut map = BTreeMap::new();
        for (geo, counts) in rows {
            validate_counts(&counts, k).map_err(|reason| Error::InvalidConfig(format!("geo {geo}: {reason}")))?;
            if counts.iter().all(|c| *c == 0.0) {
                return Err(Error::ZeroGeoRow(geo));
            }
            let key = geo.trim().to_string();
            if map.insert(key.clone(), counts).is_some() {
                return Err(Error::DuplicateGeo(key));
            }
        }
        Ok(Self { race_set, rows: map })
    }

    pub fn race_set(&self) -> &RaceSet {
        &self.race_set
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, geo: &str) -> bool {
        self.rows.contains_key(geo)
    }

    pub fn counts(&self, geo: &str) -> Result<&[f64]> {
        self.rows
            .get(geo)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownGeo(geo.to_string()))
    }

    /// Pr[R | G=geo].
    pub fn race_given_geo(&self, geo: &str) -> Result<RaceDistribution> {
        normalize(self.counts(geo)?)
    }

    pub fn geos(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(g, c)| (g.as_str(), c.as_slice()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_count_table(path, "geo_id", &self.race_set, self.iter())
    }

    /// Writes Pr[R|G] with 12 significant digits.
    pub fn export_conditionals(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        write_header(&mut out, path, "geo_id", &self.race_set)?;
        for geo in self.rows.keys() {
            let probs = self.race_given_geo(geo)?;
            write_row(&mut out, path, geo, probs.probs().iter().map(|p| format_significant(*p, 12)))?;
        }
        Ok(())
    }
}

/// How each trailing covariate column of a supplemental file is encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateColumn {
    Numeric { name: String },
    /// One-hot over the sorted levels seen at fit time; unseen levels encode
    /// as all zeros.
    Categorical { name: String, levels: Vec<String> },
}

impl CovariateColumn {
    pub fn width(&self) -> usize {
        match self {
            CovariateColumn::Numeric { .. } => 1,
            CovariateColumn::Categorical { levels, .. } => levels.len(),
        }
    }

    fn expanded_names(&self) -> Vec<String> {
        match self {
            CovariateColumn::Numeric { name } => vec![name.clone()],
            CovariateColumn::Categorical { name, levels } => {
                levels.iter().map(|level| format!("{name}={level}")).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoding {
    pub columns: Vec<CovariateColumn>,
}

impl CovariateEncoding {
    pub fn numeric(names: &[&str]) -> Self {
        Self {
            columns: names
                .iter()
                .map(|n| CovariateColumn::Numeric { name: n.to_string() })
                .collect(),
        }
    }

    /// Number of covariates after one-hot expansion.
    pub fn width(&self) -> usize {
        self.columns.iter().map(CovariateColumn::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns.iter().flat_map(CovariateColumn::expanded_names).collect()
    }

    /// Marks which expanded covariates are continuous (eligible for
    /// standardization).
    pub fn continuous_mask(&self) -> Vec<bool> {
        self.columns
            .iter()
            .flat_map(|c| match c {
                CovariateColumn::Numeric { .. } => vec![true],
                CovariateColumn::Categorical { levels, .. } => vec![false; levels.len()],
            })
            .collect()
    }

    fn infer(names: &[String], raw: &[Vec<String>]) -> Self {
        let columns = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let numeric = raw.iter().all(|row| row[j].trim().parse::<f64>().is_ok());
                if numeric {
                    CovariateColumn::Numeric { name: name.clone() }
                } else {
                    let levels: BTreeSet<String> = raw.iter().map(|row| row[j].trim().to_string()).collect();
                    CovariateColumn::Categorical {
                        name: name.clone(),
                        levels: levels.into_iter().collect(),
                    }
                }
            })
            .collect();
        Self { columns }
    }

    fn encode(&self, raw: &[String], id: &str, line: u64, path: &Path) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        for (column, value) in self.columns.iter().zip(raw) {
            let value = value.trim();
            match column {
                CovariateColumn::Numeric { name } => {
                    let x: f64 = value.parse().map_err(|_| Error::MalformedRow {
                        path: path.to_path_buf(),
                        line,
                        reason: format!("record {id}: covariate {name} = {value:?} is not numeric"),
                    })?;
                    if !x.is_finite() {
                        return Err(Error::MalformedRow {
                            path: path.to_path_buf(),
                            line,
                            reason: format!("record {id}: covariate {name} is not finite"),
                        });
                    }
                    out.push(x);
                }
                CovariateColumn::Categorical { levels, .. } => {
                    out.extend(levels.iter().map(|level| if level == value { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }
}

/// Records with surname, geography, context and optional ground-truth race.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplementalDataset {
    pub race_set: RaceSet,
    pub records: Vec<AttributedRecord>,
    pub encoding: CovariateEncoding,
}

impl SupplementalDataset {
    pub fn new(race_set: RaceSet, records: Vec<AttributedRecord>, encoding: CovariateEncoding) -> Result<Self> {
        let width = encoding.width();
        for record in &records {
            if record.covariates.len() != width {
                return Err(Error::InconsistentCovariateArity {
                    id: record.id.clone(),
                    expected: width,
                    found: record.covariates.len(),
                });
            }
            if let Some(r) = record.race {
                if r >= race_set.len() {
                    return Err(Error::UnknownRace(r.to_string()));
                }
            }
        }
        Ok(Self {
            race_set,
            records,
            encoding,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a race label.
    pub fn race_labels_present(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.race.is_some())
    }

    pub fn require_labels(&self) -> Result<()> {
        if self.race_labels_present() {
            Ok(())
        } else {
            Err(Error::UnlabeledDataset)
        }
    }

    /// Number of records at each context, indexed by [`Context::index`].
    pub fn context_counts(&self) -> [usize; 2] {
        let mut counts = [0, 0];
        for record in &self.records {
            counts[record.context.index()] += 1;
        }
        counts
    }

    /// Sub-dataset with the records selected by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&AttributedRecord) -> bool) -> Self {
        Self {
            race_set: self.race_set.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            encoding: self.encoding.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        let mut header = vec!["id".to_string(), "surname".into(), "geo".into(), "y".into(), "race".into()];
        header.extend(self.encoding.feature_names());
        writer.write_record(&header)?;
        for record in &self.records {
            let mut row = vec![
                record.id.clone(),
                record.surname.clone(),
                record.geo.clone(),
                record.context.to_string(),
                record.race.map(|r| self.race_set.label(r).to_string()).unwrap_or_default(),
            ];
            row.extend(record.covariates.iter().map(|x| x.to_string()));
            writer.write_record(&row)?;
        }
        writer.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Loads `surnames.csv`. Surnames are uppercased and trimmed.
pub fn load_surname_table(path: &Path, race_set: &RaceSet) -> Result<SurnameTable> {
    let rows = read_count_rows(path, "surname", race_set)?;
    let mut map = BTreeMap::new();
    for (surname, counts) in rows {
        let key = normalize_surname(&surname);
        if map.insert(key.clone(), counts).is_some() {
            return Err(Error::DuplicateSurname(key));
        }
    }
    let race_totals = column_sums(map.values(), race_set.len());
    Ok(SurnameTable {
        race_set: race_set.clone(),
        rows: map,
        race_totals,
    })
}

/// Loads `geo.csv`.
pub fn load_geo_table(path: &Path, race_set: &RaceSet) -> Result<GeoTable> {
    let rows = read_count_rows(path, "geo_id", race_set)?;
    let mut map = BTreeMap::new();
    for (geo, counts) in rows {
        if counts.iter().all(|c| *c == 0.0) {
            return Err(Error::ZeroGeoRow(geo));
        }
        if map.insert(geo.clone(), counts).is_some() {
            return Err(Error::DuplicateGeo(geo));
        }
    }
    Ok(GeoTable {
        race_set: race_set.clone(),
        rows: map,
    })
}

/// Loads `supplemental.csv`, inferring how covariate columns are encoded.
pub fn load_supplemental(path: &Path, race_set: &RaceSet) -> Result<SupplementalDataset> {
    load_supplemental_impl(path, race_set, None)
}

/// Loads a supplemental-format file using an encoding fitted elsewhere
/// (typically on the training split).
pub fn load_supplemental_with_encoding(
    path: &Path,
    race_set: &RaceSet,
    encoding: &CovariateEncoding,
) -> Result<SupplementalDataset> {
    load_supplemental_impl(path, race_set, Some(encoding))
}

const SUPPLEMENTAL_COLUMNS: [&str; 5] = ["id", "surname", "geo", "y", "race"];

fn load_supplemental_impl(
    path: &Path,
    race_set: &RaceSet,
    encoding: Option<&CovariateEncoding>,
) -> Result<SupplementalDataset> {
    let mut reader = open_csv(path)?;
    let header = reader.headers()?.clone();
    let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if names.len() < SUPPLEMENTAL_COLUMNS.len()
        || names[..SUPPLEMENTAL_COLUMNS.len()]
            .iter()
            .zip(SUPPLEMENTAL_COLUMNS)
            .any(|(a, b)| !a.eq_ignore_ascii_case(b))
    {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("header must start with {}", SUPPLEMENTAL_COLUMNS.join(",")),
        });
    }
    let covariate_names = names[SUPPLEMENTAL_COLUMNS.len()..].to_vec();

    struct RawRecord {
        record: AttributedRecord,
        covariates: Vec<String>,
        line: u64,
    }

    let mut raw = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row.get(0).unwrap_or("").trim().to_string();
        if row.len() != names.len() {
            if row.len() >= SUPPLEMENTAL_COLUMNS.len() {
                return Err(Error::InconsistentCovariateArity {
                    id,
                    expected: covariate_names.len(),
                    found: row.len() - SUPPLEMENTAL_COLUMNS.len(),
                });
            }
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {} columns, found {}", names.len(), row.len()),
            });
        }
        let context = Context::parse(&row[3])?;
        let race_field = row[4].trim();
        let race = if race_field.is_empty() {
            None
        } else {
            Some(
                race_set
                    .index_of(race_field)
                    .ok_or_else(|| Error::UnknownRace(race_field.to_string()))?,
            )
        };
        let mut record = AttributedRecord::new(id, &row[1], row[2].trim(), context);
        record.race = race;
        raw.push(RawRecord {
            record,
            covariates: row.iter().skip(SUPPLEMENTAL_COLUMNS.len()).map(str::to_string).collect(),
            line,
        });
    }

    let encoding = match encoding {
        Some(e) => {
            if e.columns.len() != covariate_names.len() {
                return Err(Error::InconsistentCovariateArity {
                    id: String::from("<header>"),
                    expected: e.columns.len(),
                    found: covariate_names.len(),
                });
            }
            e.clone()
        }
        None => {
            let values: Vec<Vec<String>> = raw.iter().map(|r| r.covariates.clone()).collect();
            CovariateEncoding::infer(&covariate_names, &values)
        }
    };

    let mut records = Vec::with_capacity(raw.len());
    for r in raw {
        let mut record = r.record;
        record.covariates = encoding.encode(&r.covariates, &record.id, r.line, path)?;
        records.push(record);
    }
    SupplementalDataset::new(race_set.clone(), records, encoding)
}

/// Fitted per-column affine transform `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl CovariateTransform {
    pub fn identity(width: usize) -> Self {
        Self {
            means: vec![0.0; width],
            stds: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.width() {
            return Err(Error::LengthMismatch {
                expected: self.width(),
                found: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn apply(&self, dataset: &SupplementalDataset) -> Result<SupplementalDataset> {
        let mut out = dataset.clone();
        for record in &mut out.records {
            record.covariates = self.apply_row(&record.covariates)?;
        }
        Ok(out)
    }
}

/// Fits a zero-mean, unit-variance transform on the continuous covariates
/// and applies it. One-hot columns pass through untouched. A constant
/// column is only mean-centered.
pub fn standardize_covariates(dataset: &SupplementalDataset) -> Result<(SupplementalDataset, CovariateTransform)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let width = dataset.encoding.width();
    let mask = dataset.encoding.continuous_mask();
    let n = dataset.len() as f64;
    let mut transform = CovariateTransform::identity(width);
    for j in 0..width {
        if !mask.get(j).copied().unwrap_or(true) {
            continue;
        }
        let mean = dataset.records.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
        let var = dataset
            .records
            .iter()
            .map(|r| (r.covariates[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        transform.means[j] = mean;
        if var > 0.0 {
            transform.stds[j] = var.sqrt();
        } else {
            warn!("covariate column {j} has zero variance; mean-centering only");
        }
    }
    let standardized = transform.apply(dataset)?;
    Ok((standardized, transform))
}

/// n^(g) for one (geography, context) cell: per-race record counts.
pub fn group_counts(dataset: &SupplementalDataset, geo: &str, context: Context) -> Result<Vec<f64>> {
    dataset.require_labels()?;
    let mut counts = vec![0.0; dataset.race_set.len()];
    for record in dataset.records.iter().filter(|r| r.geo == geo && r.context == context) {
        counts[record.race.expect("labels checked")] += 1.0;
    }
    Ok(counts)
}

/// All nonempty (geography, context) cell counts in one pass.
pub fn all_group_counts(dataset: &SupplementalDataset) -> Result<HashMap<(String, Context), Vec<f64>>> {
    dataset.require_labels()?;
    let k = dataset.race_set.len();
    let mut cells: HashMap<(String, Context), Vec<f64>> = HashMap::new();
    for record in &dataset.records {
        let counts = cells
            .entry((record.geo.clone(), record.context))
            .or_insert_with(|| vec![0.0; k]);
        counts[record.race.expect("labels checked")] += 1.0;
    }
    Ok(cells)
}

/// Formats `x` rounded to `digits` significant digits, in the shortest form
/// that reads back to the rounded value.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .expect("formatted float parses");
    rounded.to_string()
}

fn validate_counts(counts: &[f64], k: usize) -> std::result::Result<(), String> {
    if counts.len() != k {
        return Err(format!("expected {k} counts, found {}", counts.len()));
    }
    if let Some(c) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(format!("count {c} is negative or non-finite"));
    }
    Ok(())
}

fn column_sums<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, k: usize) -> Vec<f64> {
    let mut totals = vec![0.0; k];
    for row in rows {
        for (t, c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    totals
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::None).from_reader(file))
}

fn read_count_rows(path: &Path, key_column: &str, race_set: &RaceSet) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = open_csv(path)?;
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = std::iter::once(key_column)
        .chain(race_set.labels().iter().map(String::as_str))
        .collect();
    let matches = header.len() == expected.len()
        && header
            .iter()
            .zip(&expected)
            .all(|(a, b)| a.trim().eq_ignore_ascii_case(b));
    if !matches {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("header must be {}", expected.join(",")),
        });
    }
    let k = race_set.len();
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if row.len() != k + 1 {
            return Err(malformed(format!("expected {} columns, found {}", k + 1, row.len())));
        }
        let key = row[0].trim().to_string();
        if key.is_empty() {
            return Err(malformed(format!("empty {key_column}")));
        }
        let mut counts = Vec::with_capacity(k);
        for field in row.iter().skip(1) {
            let count: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(format!("count {field:?} is not numeric")))?;
            if !count.is_finite() || count < 0.0 {
                return Err(malformed(format!("count {field:?} is negative or non-finite")));
            }
            counts.push(count);
        }
        rows.push((key, counts));
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_header(out: &mut impl Write, path: &Path, key: &str, race_set: &RaceSet) -> Result<()> {
    writeln!(out, "{key},{}", race_set.labels().join(",")).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_row(out: &mut impl Write, path: &Path, key: &str, values: impl Iterator<Item = String>) -> Result<()> {
    let values: Vec<String> = values.collect();
    writeln!(out, "{key},{}", values.join(",")).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_count_table<'a>(
    path: &Path,
    key: &str,
    race_set: &RaceSet,
    rows: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let mut out = create(path)?;
    write_header(&mut out, path, key, race_set)?;
    for (name, counts) in rows {
        write_row(&mut out, path, name, counts.iter().map(|c| c.to_string()))?;
    }
    out.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::InvalidConfig(format!("{other:?}")),
        }
    } else {
        Error::Csv(e)
    }
}
