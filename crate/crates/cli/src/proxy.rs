//! Proxy specifications (`bisg`, `cbisg:<path>`, `micsg:<path>`,
//! `oracle:<path>`), race-set resolution and dataset loading.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use fairproxy::bisg::BisgModel;
use fairproxy::cbisg::{CbisgModel, PointEstimate};
use fairproxy::learner::SoftmaxModel;
use fairproxy::micsg::{MicsgMetadata, MicsgModel};
use fairproxy::simulator::JointTable;
use fairproxy::tables::{
    load_geo_table, load_supplemental, load_supplemental_with_encoding, load_surname_table, CovariateEncoding,
    SupplementalDataset, SurnameTable,
};
use fairproxy::{ContextualProxy, RaceSet};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, SplitArgs, SplitPart, TableArgs};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProxySpec {
    Bisg,
    Cbisg(PathBuf),
    Micsg(PathBuf),
    Oracle(PathBuf),
}

impl FromStr for ProxySpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (kind, path) = match s.split_once(':') {
            Some((k, p)) => (k, Some(PathBuf::from(p))),
            None => (s, None),
        };
        match (kind, path) {
            ("bisg", None) => Ok(ProxySpec::Bisg),
            ("cbisg", Some(p)) => Ok(ProxySpec::Cbisg(p)),
            ("micsg", Some(p)) => Ok(ProxySpec::Micsg(p)),
            ("oracle", Some(p)) => Ok(ProxySpec::Oracle(p)),
            _ => Err(CliError::Usage(format!(
                "invalid proxy {s:?}; expected bisg, cbisg:<path>, micsg:<path> or oracle:<path>"
            ))),
        }
    }
}

impl ProxySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ProxySpec::Bisg => "bisg",
            ProxySpec::Cbisg(_) => "cbisg",
            ProxySpec::Micsg(_) => "micsg",
            ProxySpec::Oracle(_) => "oracle",
        }
    }
}

/// Sidecar written next to MICSG weights.
#[derive(Debug, Serialize, Deserialize)]
pub struct MicsgSidecar {
    pub schema: u32,
    /// `bisg` or `cbisg:<absolute path>`.
    pub base: String,
    pub surnames: PathBuf,
    pub geo: Option<PathBuf>,
    pub metadata: MicsgMetadata,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub struct LoadedProxy {
    pub proxy: Arc<dyn ContextualProxy>,
    pub races: RaceSet,
    /// Covariate encoding the proxy was fitted with, if any.
    pub encoding: Option<CovariateEncoding>,
    pub inputs: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn header_labels(path: &Path) -> CliResult<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(fairproxy::Error::from)?;
    let header = reader.headers().map_err(fairproxy::Error::from)?;
    Ok(header.iter().skip(1).map(|h| h.trim().to_string()).collect())
}

fn parse_races(text: &str) -> CliResult<RaceSet> {
    Ok(RaceSet::new(text.split(',').map(str::trim))?)
}

/// Race set from `--races`, else the surname header, else the geo header.
pub fn table_races(tables: &TableArgs) -> CliResult<Option<RaceSet>> {
    if let Some(text) = &tables.races {
        return parse_races(text).map(Some);
    }
    match tables.surnames.as_ref().or(tables.geo.as_ref()) {
        Some(path) => Ok(Some(RaceSet::new(header_labels(path)?)?)),
        None => Ok(None),
    }
}

pub fn require_races(tables: &TableArgs) -> CliResult<RaceSet> {
    table_races(tables)?
        .ok_or_else(|| CliError::Usage("cannot determine races; pass --races or --surnames".into()))
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required for this proxy")))
}

pub fn load_surnames(tables: &TableArgs, races: &RaceSet) -> CliResult<(SurnameTable, PathBuf)> {
    let path = require(&tables.surnames, "surnames")?;
    Ok((load_surname_table(path, races)?, path.to_path_buf()))
}

pub fn load_bisg(tables: &TableArgs, races: &RaceSet) -> CliResult<(BisgModel, Vec<PathBuf>)> {
    let (surnames, s_path) = load_surnames(tables, races)?;
    let geo_path = require(&tables.geo, "geo")?;
    let geo = load_geo_table(geo_path, races)?;
    Ok((BisgModel::new(surnames, geo)?, vec![s_path, geo_path.to_path_buf()]))
}

fn load_cbisg(path: &Path, tables: &TableArgs, races: &RaceSet) -> CliResult<(CbisgModel, Vec<PathBuf>)> {
    let (surnames, s_path) = load_surnames(tables, races)?;
    let model = CbisgModel::read_csv(path, surnames, PointEstimate::PosteriorMean)?;
    Ok((model, vec![s_path, path.to_path_buf()]))
}

/// Loads a base proxy usable under MICSG (`bisg` or `cbisg:<path>`).
pub fn load_base(spec: &ProxySpec, tables: &TableArgs, races: &RaceSet) -> CliResult<(Arc<dyn ContextualProxy>, Vec<PathBuf>)> {
    match spec {
        ProxySpec::Bisg => {
            let (m, inputs) = load_bisg(tables, races)?;
            Ok((Arc::new(m), inputs))
        }
        ProxySpec::Cbisg(path) => {
            let (m, inputs) = load_cbisg(path, tables, races)?;
            Ok((Arc::new(m), inputs))
        }
        other => Err(CliError::Usage(format!("{} cannot be used as a MICSG base", other.kind()))),
    }
}

pub fn load_micsg(weights: &Path) -> CliResult<(MicsgModel, Vec<PathBuf>)> {
    let sidecar_file = sidecar_path(weights);
    let sidecar: MicsgSidecar = read_json(&sidecar_file)?;
    if sidecar.schema != 1 {
        return Err(CliError::Usage(format!("unsupported MICSG sidecar schema {}", sidecar.schema)));
    }
    let races = RaceSet::new(sidecar.metadata.layout.races.clone())?;
    let tables = TableArgs {
        surnames: Some(sidecar.surnames.clone()),
        geo: sidecar.geo.clone(),
        races: None,
    };
    let base_spec: ProxySpec = sidecar.base.parse()?;
    let (base, mut inputs) = load_base(&base_spec, &tables, &races)?;
    let learner = SoftmaxModel::read_csv(weights)?;
    let model = MicsgModel::from_parts(base, learner, sidecar.metadata)?;
    inputs.push(weights.to_path_buf());
    inputs.push(sidecar_file);
    Ok((model, inputs))
}

fn oracle_races(path: &Path) -> CliResult<RaceSet> {
    let mut reader = csv::Reader::from_path(path).map_err(fairproxy::Error::from)?;
    let mut labels: Vec<String> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(fairproxy::Error::from)?;
        let r = row.get(0).unwrap_or_default().trim();
        if labels.last().map(String::as_str) != Some(r) && !labels.iter().any(|l| l == r) {
            labels.push(r.to_string());
        }
    }
    Ok(RaceSet::new(labels)?)
}

pub fn load_proxy(spec: &ProxySpec, tables: &TableArgs) -> CliResult<LoadedProxy> {
    match spec {
        ProxySpec::Bisg | ProxySpec::Cbisg(_) => {
            let races = require_races(tables)?;
            let (proxy, inputs) = load_base(spec, tables, &races)?;
            Ok(LoadedProxy {
                proxy,
                races,
                encoding: None,
                inputs,
            })
        }
        ProxySpec::Micsg(path) => {
            let (model, inputs) = load_micsg(path)?;
            let races = RaceSet::new(model.layout().races.clone())?;
            if let Some(requested) = table_races(tables)? {
                if requested != races {
                    return Err(CliError::Usage(format!(
                        "race set {:?} does not match the model's {:?}",
                        requested.labels(),
                        races.labels()
                    )));
                }
            }
            let encoding = Some(model.metadata().encoding.clone());
            Ok(LoadedProxy {
                proxy: Arc::new(model),
                races,
                encoding,
                inputs,
            })
        }
        ProxySpec::Oracle(path) => {
            let races = match table_races(tables)? {
                Some(r) => r,
                None => oracle_races(path)?,
            };
            let table = JointTable::read_csv(path, &races)?;
            Ok(LoadedProxy {
                proxy: Arc::new(table.oracle_proxy()),
                races,
                encoding: None,
                inputs: vec![path.to_path_buf()],
            })
        }
    }
}

/// Loads a supplemental file, applying a fitted encoding when given and the
/// optional seeded hash split.
pub fn load_dataset(
    path: &Path,
    races: &RaceSet,
    encoding: Option<&CovariateEncoding>,
    split: &SplitArgs,
    seed: Option<u64>,
) -> CliResult<SupplementalDataset> {
    let dataset = match encoding {
        Some(enc) => load_supplemental_with_encoding(path, races, enc)?,
        None => load_supplemental(path, races)?,
    };
    match split.split_fraction {
        None => Ok(dataset),
        Some(fraction) => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(CliError::Usage(format!("--split-fraction must be in (0, 1), got {fraction}")));
            }
            let seed = seed.ok_or_else(|| CliError::Usage("--split-fraction needs --seed or FAIRPROXY_SEED".into()))?;
            let want_train = split.split_part == SplitPart::Train;
            Ok(dataset.filter(|r| crate::split::is_train(seed, &r.id, fraction) == want_train))
        }
    }
}
