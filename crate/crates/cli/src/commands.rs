//! Subcommand handlers. Each writes its outputs, then a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fairproxy::cbisg::{default_eta_grid, fit_cbisg, CbisgConfig, EtaSetting, PointEstimate, TuningEstimator};
use fairproxy::diagnostics::{
    binned_violation_profile, dataset_consistency_report, verify_bounds, weighted_bias_oracle, weighted_gap_oracle,
    BoundCheck, SweepInstance, ViolationBin,
};
use fairproxy::domain::Context;
use fairproxy::estimators::{estimate_all, ContextAveraging, ContextualPredictions, EstimatorKind};
use fairproxy::learner::{Init, LearnerConfig};
use fairproxy::micsg::{fit_micsg_with, BaseEncoding};
use fairproxy::simulator::{build_joint, DgpConfig};
use fairproxy::tables::{format_significant, load_geo_table, SupplementalDataset};
use fairproxy::{ContextualProxy, RaceDistribution, RaceSet};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{default_path, RunRecord};
use crate::proxy::{
    load_base, load_bisg, load_dataset, load_micsg, load_proxy, load_surnames, require_races, sidecar_path,
    MicsgSidecar, ProxySpec,
};
use crate::{
    figures, BaseEncodingChoice, CliError, CliResult, Command, DiagnoseArgs, EstimateArgs, FigureArgs, FitCbisgArgs,
    FitMicsgArgs, IngestArgs, MethodChoice, PredictBisgArgs, PredictMicsgArgs, SimulateArgs, SplitArgs, TuningChoice,
    VerifyArgs,
};

pub fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Simulate(a) => simulate(a, argv),
        Command::IngestCheck(a) => ingest_check(a, argv),
        Command::PredictBisg(a) => predict_bisg(a, argv),
        Command::FitCbisg(a) => fit_cbisg_cmd(a, argv),
        Command::FitMicsg(a) => fit_micsg_cmd(a, argv),
        Command::PredictMicsg(a) => predict_micsg(a, argv),
        Command::Estimate(a) => estimate(a, argv),
        Command::Diagnose(a) => diagnose(a, argv),
        Command::VerifyTheorems(a) => verify(a, argv),
        Command::EmitFigureData(a) => emit_figures(a, argv),
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn require_seed(seed: Option<u64>, what: &str) -> CliResult<u64> {
    seed.ok_or_else(|| CliError::Usage(format!("{what} needs --seed or FAIRPROXY_SEED")))
}

fn read_config(path: &Path) -> CliResult<DgpConfig> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        toml::from_str(&text).map_err(|source| CliError::Toml {
            path: path.to_path_buf(),
            source,
        })
    } else {
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn per_race<T>(races: &RaceSet, values: impl IntoIterator<Item = T>) -> BTreeMap<String, T> {
    races.labels().iter().cloned().zip(values).collect()
}

fn write_predictions(path: &Path, races: &RaceSet, rows: &[(String, RaceDistribution)]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(fairproxy::Error::from)?;
    let mut header = vec!["id".to_string()];
    header.extend(races.labels().iter().cloned());
    writer.write_record(&header).map_err(fairproxy::Error::from)?;
    for (id, dist) in rows {
        let mut record = vec![id.clone()];
        record.extend(dist.probs().iter().map(|p| format_significant(*p, 17)));
        writer.write_record(&record).map_err(fairproxy::Error::from)?;
    }
    writer.flush().map_err(io_error(path))
}

fn predict_all(
    proxy: &dyn ContextualProxy,
    dataset: &SupplementalDataset,
    context: Option<Context>,
) -> CliResult<Vec<(String, RaceDistribution)>> {
    dataset
        .records
        .iter()
        .map(|r| {
            let dist = proxy.evaluate(r, context.unwrap_or(r.context))?;
            Ok((r.id.clone(), dist))
        })
        .collect()
}

fn simulate(a: SimulateArgs, argv: &[String]) -> CliResult<()> {
    let config = match &a.config {
        Some(path) => read_config(path)?,
        None => DgpConfig::default(),
    };
    let seed = require_seed(a.seed.seed, "simulate")?;
    if let Some(f) = a.train_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!("--train-fraction must be in (0, 1), got {f}")));
        }
    }
    let table = build_joint(&config)?;
    let sample = table.sample(a.n, seed)?;
    fs::create_dir_all(&a.out_dir).map_err(io_error(&a.out_dir))?;
    let out = |name: &str| a.out_dir.join(name);
    let mut outputs = vec![out("surnames.csv"), out("geo.csv"), out("supplemental.csv"), out("joint_table.csv")];
    table.surname_table().write_csv(&outputs[0])?;
    table.geo_table().write_csv(&outputs[1])?;
    sample.write_csv(&outputs[2])?;
    table.write_csv(&outputs[3])?;
    if let Some(fraction) = a.train_fraction {
        let train = sample.filter(|r| crate::split::is_train(seed, &r.id, fraction));
        let test = sample.filter(|r| !crate::split::is_train(seed, &r.id, fraction));
        train.write_csv(&out("train.csv"))?;
        test.write_csv(&out("test.csv"))?;
        outputs.push(out("train.csv"));
        outputs.push(out("test.csv"));
    }

    let races = table.race_set().clone();
    let k = races.len();
    let rates: Vec<Option<f64>> = (0..k).map(|r| table.positive_rate(r).ok()).collect();
    let bias: Vec<Option<f64>> = (0..k).map(|r| weighted_bias_oracle(&table, r).ok()).collect();
    let gap: Vec<Option<f64>> = (0..k).map(|r| weighted_gap_oracle(&table, r).ok()).collect();
    let phi = |y| {
        table
            .race_given_context(y)
            .map(|d| d.into_vec())
            .unwrap_or_else(|_| vec![f64::NAN; k])
    };
    let oracle = json!({
        "schema": 1,
        "kind": "oracle",
        "races": races.labels(),
        "theta": table.theta(),
        "nu": table.nu(),
        "positive_rate": per_race(&races, rates),
        "race_given_context": {"0": phi(Context::Negative), "1": phi(Context::Positive)},
        "weighted_bias_oracle": per_race(&races, bias),
        "weighted_gap": per_race(&races, gap),
        "n": sample.len(),
        "sample_seed": seed,
        "config": config,
    });
    let oracle_path = out("oracle.json");
    write_json(&oracle_path, &oracle)?;
    outputs.push(oracle_path);

    let manifest = a.manifest.manifest.clone().unwrap_or_else(|| out("manifest.json"));
    let mut inputs = Vec::new();
    inputs.extend(a.config.clone());
    RunRecord {
        subcommand: "simulate",
        arguments: argv,
        seed: Some(seed),
        inputs,
        outputs,
    }
    .write(&manifest)
}

fn ingest_check(a: IngestArgs, argv: &[String]) -> CliResult<()> {
    let races = require_races(&a.tables)?;
    let mut inputs = Vec::new();
    let mut report = json!({"schema": 1, "kind": "ingest", "races": races.labels()});
    let mut known_surnames = None;
    let mut known_geos = None;
    if let Some(path) = &a.tables.surnames {
        let table = fairproxy::tables::load_surname_table(path, &races)?;
        report["surnames"] = json!({"entries": table.len(), "race_totals": table.race_totals()});
        known_surnames = Some(table);
        inputs.push(path.clone());
    }
    if let Some(path) = &a.tables.geo {
        let table = load_geo_table(path, &races)?;
        report["geo"] = json!({"entries": table.len()});
        known_geos = Some(table);
        inputs.push(path.clone());
    }
    if let Some(path) = &a.supplemental {
        let ds = fairproxy::tables::load_supplemental(path, &races)?;
        let [negative, positive] = ds.context_counts();
        let unknown_geos = known_geos
            .as_ref()
            .map(|g| ds.records.iter().filter(|r| !g.contains(&r.geo)).count());
        let unknown_surnames = known_surnames.as_ref().map(|s| {
            ds.records
                .iter()
                .filter(|r| s.counts(&r.surname).is_none())
                .count()
        });
        report["supplemental"] = json!({
            "n": ds.len(),
            "n_positive": positive,
            "n_negative": negative,
            "labeled": ds.race_labels_present(),
            "covariates": ds.encoding.feature_names(),
            "unknown_geos": unknown_geos,
            "unknown_surnames": unknown_surnames,
        });
        inputs.push(path.clone());
    }
    write_json(&a.out, &report)?;
    RunRecord {
        subcommand: "ingest-check",
        arguments: argv,
        seed: None,
        inputs,
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

fn predict_bisg(a: PredictBisgArgs, argv: &[String]) -> CliResult<()> {
    let races = require_races(&a.tables)?;
    let (model, mut inputs) = load_bisg(&a.tables, &races)?;
    let dataset = load_dataset(&a.input, &races, None, &SplitArgs::none(), None)?;
    write_predictions(&a.out, &races, &predict_all(&model, &dataset, None)?)?;
    if model.zero_product_fallbacks() > 0 {
        log::warn!("{} records fell back to the geography prior", model.zero_product_fallbacks());
    }
    inputs.push(a.input.clone());
    RunRecord {
        subcommand: "predict-bisg",
        arguments: argv,
        seed: None,
        inputs,
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let number = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("invalid η grid value {v:?}")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
            if step <= 0.0 || stop < start {
                return Err(CliError::Usage(format!("invalid η grid range {text:?}")));
            }
            // Round to the step count so 0:1:0.1 gives exactly 11 points.
            let count = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=count).map(|i| start + i as f64 * step).collect())
        }
        [_] => text.split(',').map(number).collect(),
        _ => Err(CliError::Usage(format!("invalid η grid {text:?}"))),
    }
}

fn fit_cbisg_cmd(a: FitCbisgArgs, argv: &[String]) -> CliResult<()> {
    let races = require_races(&a.tables)?;
    let (surnames, s_path) = load_surnames(&a.tables, &races)?;
    let geo_path = a
        .tables
        .geo
        .clone()
        .ok_or_else(|| CliError::Usage("--geo is required".into()))?;
    let geo = load_geo_table(&geo_path, &races)?;
    let train = load_dataset(&a.train, &races, None, &a.split, a.seed.seed)?;
    let eta = if a.eta == "tune" {
        EtaSetting::Tuned
    } else {
        EtaSetting::Fixed(
            a.eta
                .parse()
                .map_err(|_| CliError::Usage(format!("--eta must be a number or `tune`, got {:?}", a.eta)))?,
        )
    };
    let config = CbisgConfig {
        eta,
        grid: match &a.grid {
            Some(text) => parse_grid(text)?,
            None => default_eta_grid(),
        },
        tuning_estimator: match a.tuning_estimator {
            TuningChoice::Bayes => TuningEstimator::Bayes,
            TuningChoice::Weighted => TuningEstimator::Weighted,
        },
        averaging: a.averaging.into(),
        default_eta: a.default_eta,
        point_estimate: PointEstimate::PosteriorMean,
    };
    let model = fit_cbisg(&geo, &surnames, &train, &config)?;
    model.write_csv(&a.model_out)?;
    RunRecord {
        subcommand: "fit-cbisg",
        arguments: argv,
        seed: a.seed.seed,
        inputs: vec![s_path, geo_path, a.train.clone()],
        outputs: vec![a.model_out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.model_out))
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(path).map_err(io_error(path))
}

fn fit_micsg_cmd(a: FitMicsgArgs, argv: &[String]) -> CliResult<()> {
    let races = require_races(&a.tables)?;
    let spec: ProxySpec = a.base.parse()?;
    let (base, mut inputs) = load_base(&spec, &a.tables, &races)?;
    let train = load_dataset(&a.train, &races, None, &a.split, a.seed.seed)?;
    let config = LearnerConfig {
        l2_lambda: a.lambda,
        tolerance: a.tolerance,
        max_iters: a.max_iters,
        init: Init::Zero,
    };
    let encoding = match a.base_encoding {
        BaseEncodingChoice::Probability => BaseEncoding::Probability,
        BaseEncodingChoice::LogProbability => BaseEncoding::LogProbability,
    };
    let model = fit_micsg_with(base, &train, &config, encoding)?;
    let learner = model.learner();
    if !learner.converged {
        log::warn!(
            "MICSG did not converge in {} iterations (gradient norm {:.3e})",
            learner.iterations,
            learner.final_gradient_norm
        );
    }
    learner.write_csv(&a.model_out)?;
    let base = match &spec {
        ProxySpec::Cbisg(path) => format!("cbisg:{}", absolute(path)?.display()),
        _ => "bisg".to_string(),
    };
    let sidecar = MicsgSidecar {
        schema: 1,
        base,
        surnames: absolute(a.tables.surnames.as_deref().expect("base loading requires surnames"))?,
        geo: a.tables.geo.as_deref().map(absolute).transpose()?,
        metadata: model.metadata().clone(),
        iterations: learner.iterations,
        converged: learner.converged,
        final_objective: learner.final_objective,
        final_gradient_norm: learner.final_gradient_norm,
    };
    let sidecar_file = sidecar_path(&a.model_out);
    write_json(&sidecar_file, &sidecar)?;
    inputs.push(a.train.clone());
    RunRecord {
        subcommand: "fit-micsg",
        arguments: argv,
        seed: a.seed.seed,
        inputs,
        outputs: vec![a.model_out.clone(), sidecar_file],
    }
    .write(&default_path(&a.manifest.manifest, &a.model_out))
}

fn predict_micsg(a: PredictMicsgArgs, argv: &[String]) -> CliResult<()> {
    let context = match a.context.as_str() {
        "observed" => None,
        other => Some(Context::parse(other)?),
    };
    let (model, mut inputs) = load_micsg(&a.model)?;
    let races = RaceSet::new(model.layout().races.clone())?;
    let encoding = model.metadata().encoding.clone();
    let dataset = load_dataset(&a.input, &races, Some(&encoding), &SplitArgs::none(), None)?;
    write_predictions(&a.out, &races, &predict_all(&model, &dataset, context)?)?;
    inputs.push(a.input.clone());
    RunRecord {
        subcommand: "predict-micsg",
        arguments: argv,
        seed: None,
        inputs,
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

fn estimate(a: EstimateArgs, argv: &[String]) -> CliResult<()> {
    let method = match a.method {
        MethodChoice::True => EstimatorKind::True,
        MethodChoice::Weighted => EstimatorKind::Weighted,
        MethodChoice::Bayes => EstimatorKind::Bayes,
    };
    let spec = a.proxy.as_deref().map(str::parse::<ProxySpec>).transpose()?;
    let loaded = spec.as_ref().map(|s| load_proxy(s, &a.tables)).transpose()?;
    let races = match &loaded {
        Some(l) => l.races.clone(),
        None => require_races(&a.tables)?,
    };
    if method != EstimatorKind::True && loaded.is_none() {
        return Err(CliError::Usage(format!("--method {} requires --proxy", method.as_str())));
    }
    let encoding = loaded.as_ref().and_then(|l| l.encoding.as_ref());
    let dataset = load_dataset(&a.input, &races, encoding, &a.split, a.seed.seed)?;
    let predictions = match (&loaded, method) {
        (Some(l), EstimatorKind::Weighted | EstimatorKind::Bayes) => {
            Some(ContextualPredictions::evaluate(l.proxy.as_ref(), &dataset)?)
        }
        _ => None,
    };
    let averaging: ContextAveraging = a.averaging.into();
    let report = estimate_all(&dataset, predictions.as_ref(), method, averaging)?;
    let (max_value, i, j) = report.max_disparity();
    let per_race: BTreeMap<String, Value> = races
        .labels()
        .iter()
        .enumerate()
        .map(|(r, label)| {
            let n_group = report.group_sizes.as_ref().map(|g| g[r]);
            (label.clone(), json!({"mu": finite(report.estimates[r]), "n_group": n_group}))
        })
        .collect();
    let disparity: Vec<Vec<Option<f64>>> = report
        .disparity
        .iter()
        .map(|row| row.iter().copied().map(finite).collect())
        .collect();
    let out = json!({
        "schema": 1,
        "kind": "disparity",
        "method": method.as_str(),
        "proxy": spec.as_ref().map(ProxySpec::kind),
        "averaging": averaging,
        "races": races.labels(),
        "n": report.n,
        "n_positive": report.n_positive,
        "n_negative": report.n_negative,
        "per_race": per_race,
        "disparity": disparity,
        "max_disparity": {
            "value": finite(max_value),
            "between": [races.label(i), races.label(j)],
        },
    });
    write_json(&a.out, &out)?;
    let mut inputs = loaded.map(|l| l.inputs).unwrap_or_default();
    inputs.push(a.input.clone());
    RunRecord {
        subcommand: "estimate",
        arguments: argv,
        seed: a.seed.seed,
        inputs,
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

#[derive(Serialize)]
struct Profile {
    race: String,
    context: u8,
    bins: Vec<ViolationBin>,
}

fn diagnose(a: DiagnoseArgs, argv: &[String]) -> CliResult<()> {
    let spec: ProxySpec = a.proxy.parse()?;
    let loaded = load_proxy(&spec, &a.tables)?;
    let dataset = load_dataset(&a.input, &loaded.races, loaded.encoding.as_ref(), &a.split, a.seed.seed)?;
    let proxy = loaded.proxy.as_ref();
    let consistency = dataset_consistency_report(proxy, &dataset, a.averaging.into())?;
    let mut profiles = Vec::new();
    for (r, label) in loaded.races.labels().iter().enumerate() {
        for context in [Context::Negative, Context::Positive] {
            profiles.push(Profile {
                race: label.clone(),
                context: context.as_u8(),
                bins: binned_violation_profile(proxy, &dataset, r, context, a.bins)?,
            });
        }
    }
    let [negative, positive] = dataset.context_counts();
    let out = json!({
        "schema": 1,
        "kind": "diagnostics",
        "proxy": spec.kind(),
        "bins": a.bins,
        "n": dataset.len(),
        "n_positive": positive,
        "n_negative": negative,
        "consistency": consistency,
        "profiles": profiles,
    });
    write_json(&a.out, &out)?;
    let mut inputs = loaded.inputs;
    inputs.push(a.input.clone());
    RunRecord {
        subcommand: "diagnose",
        arguments: argv,
        seed: a.seed.seed,
        inputs,
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

fn verify(a: VerifyArgs, argv: &[String]) -> CliResult<()> {
    let seed = require_seed(a.seed.seed, "verify-theorems")?;
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    let base = match &a.config {
        Some(path) => read_config(path)?,
        None => DgpConfig::default(),
    };
    let summary = verify_bounds(&base, a.instances, seed)?;
    let instances: Vec<Value> = summary.results.iter().map(instance_summary).collect();
    let mut out = json!({
        "schema": 1,
        "kind": "verification",
        "seed": seed,
        "instances": summary.instances,
        "forward_checks": summary.forward_checks,
        "forward_counterexamples": summary.forward_counterexamples,
        "converse_checks": summary.converse_checks,
        "converse_counterexamples": summary.converse_counterexamples,
        "degenerate_excluded": summary.degenerate_excluded,
        "exact_consistency_instances": summary.exact_consistency_instances,
        "exact_consistency_failures": summary.exact_consistency_failures,
        "results": instances,
    });
    if a.details {
        out["checks"] = serde_json::to_value(&summary.results).map_err(|source| CliError::Json {
            path: a.out.clone(),
            source,
        })?;
    }
    write_json(&a.out, &out)?;
    RunRecord {
        subcommand: "verify-theorems",
        arguments: argv,
        seed: Some(seed),
        inputs: a.config.iter().cloned().collect(),
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

/// Pass/fail and the per-race plug-ins (which do not vary with ε) of one
/// sweep instance.
fn instance_summary(instance: &SweepInstance) -> Value {
    let fails = |pick: fn(&BoundCheck) -> Option<bool>| instance.checks.iter().filter(|c| pick(c) == Some(false)).count();
    let forward_failures = fails(|c| c.forward_holds);
    let converse_failures = fails(|c| c.converse_holds);
    let mut seen = Vec::new();
    let plug_ins: Vec<Value> = instance
        .checks
        .iter()
        .filter(|c| {
            let new = !seen.contains(&c.race);
            if new {
                seen.push(c.race.clone());
            }
            new
        })
        .map(|c| {
            json!({
                "race": c.race,
                "theta": c.theta,
                "nu": c.nu,
                "gamma": c.gamma,
                "omega_bar": c.omega_bar,
                "mu_bayes": c.mu_bayes,
                "violation": c.violation,
                "bayes_error": c.bayes_error,
            })
        })
        .collect();
    json!({
        "seed": instance.seed,
        "mixing_weights": instance.mixing_weights,
        "passed": forward_failures + converse_failures == 0,
        "forward_failures": forward_failures,
        "converse_failures": converse_failures,
        "degenerate_checks": instance.checks.iter().filter(|c| c.degenerate.is_some()).count(),
        "plug_ins": plug_ins,
    })
}

fn emit_figures(a: FigureArgs, argv: &[String]) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &a.reports {
        let report: Value = crate::proxy::read_json(path)?;
        rows.extend(figures::rows_from_report(&report)?);
    }
    figures::write_rows(&a.out, &rows)?;
    RunRecord {
        subcommand: "emit-figure-data",
        arguments: argv,
        seed: None,
        inputs: a.reports.clone(),
        outputs: vec![a.out.clone()],
    }
    .write(&default_path(&a.manifest.manifest, &a.out))
}

impl SplitArgs {
    fn none() -> Self {
        SplitArgs {
            split_fraction: None,
            split_part: crate::SplitPart::Train,
        }
    }
}
