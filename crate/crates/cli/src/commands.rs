use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dime::data::{generate, read_split, write_split, DatasetSplits, SplitHeader, GENERATOR_VERSION};
use dime::dime::{swap_test, validate_rq1, DimeError, DimeExplainer, Rq1Check, Rq1Table, SwapResult, EXPLAINED_CLASS};
use dime::disentangle::{DisentangleError, SampleSet};
use dime::gateway::stub::{run_stub, StubBehavior};
use dime::gateway::{
    accuracy, mlp_forward, mlp_train, CountingModel, ExternalModel, GatewayError, ModalityKind, ModalityValue, Mlp,
    Model, TrainError, TrainReport,
};
use dime::numerics::Rng;
use dime::surrogate::SurrogateError;

use crate::config::{CommonArgs, ModelSource, RunConfig};
use crate::report::{explain_summary, write_json, write_text};
use crate::Command;

pub enum Outcome {
    Passed,
    ThresholdFailed,
}

impl Outcome {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Passed
        } else {
            Outcome::ThresholdFailed
        }
    }
}

/// Set on errors that should exit with status 1 rather than 2.
#[derive(Debug)]
struct ThresholdError(String);

impl std::fmt::Display for ThresholdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdError {}

fn is_model_failure(cause: &(dyn std::error::Error + 'static)) -> bool {
    let disentangle = |e: &DisentangleError| {
        matches!(e, DisentangleError::Gateway(_) | DisentangleError::ClassCount { .. })
    };
    if cause.is::<GatewayError>() {
        return true;
    }
    if let Some(e) = cause.downcast_ref::<DisentangleError>() {
        return disentangle(e);
    }
    if let Some(SurrogateError::Gateway(_)) = cause.downcast_ref::<SurrogateError>() {
        return true;
    }
    match cause.downcast_ref::<DimeError>() {
        Some(DimeError::Disentangle(e)) => disentangle(e),
        Some(DimeError::Surrogate(SurrogateError::Gateway(_))) => true,
        _ => false,
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<ThresholdError>()) {
        1
    } else if e.chain().any(is_model_failure) {
        3
    } else {
        2
    }
}

pub fn run(common: &CommonArgs, command: Command) -> Result<Outcome> {
    if let Command::StubModel { behavior, classes, kinds } = command {
        return stub_model(behavior, classes, &kinds);
    }
    let mut cfg = common.resolve()?;
    let out = common.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::GenData { n } => gen_data(&cfg, n, &out),
        Command::Train {
            data,
            epochs,
            accuracy_floor,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(f) = accuracy_floor {
                cfg.train.accuracy_floor = f;
            }
            cfg.validate()?;
            train(&cfg, &data, &out)
        }
        Command::Explain {
            data,
            inputs,
            point,
            class,
        } => explain(&cfg, data.as_deref(), inputs.as_deref(), point, class, &out),
        Command::Validate { data, n_points } => validate(&cfg, &data, n_points, &out),
        Command::Swaptest { data, pairs, class } => swaptest(&cfg, &data, pairs, class, &out),
        Command::Bench { data, class } => bench(&cfg, &data, class, &out),
        Command::StubModel { .. } => unreachable!("handled above"),
    }
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

#[derive(Serialize)]
struct SplitEntry {
    file: String,
    count: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    generator: &'static str,
    n: usize,
    config: &'a RunConfig,
    splits: Vec<(String, SplitEntry)>,
}

fn gen_data(cfg: &RunConfig, n: usize, out: &Path) -> Result<Outcome> {
    let splits = generate(cfg.seed, n)?;
    let parts = [&splits.train, &splits.valid, &splits.test];
    let mut entries = Vec::new();
    for (name, points) in SPLITS.iter().zip(parts) {
        let path = split_path(out, name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let header = SplitHeader {
            generator: GENERATOR_VERSION.into(),
            seed: cfg.seed,
            split: (*name).into(),
            count: points.len(),
        };
        write_split(BufWriter::new(file), &header, points)?;
        entries.push((
            (*name).to_string(),
            SplitEntry {
                file: format!("{name}.jsonl"),
                count: points.len(),
            },
        ));
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command: "gen-data",
            generator: GENERATOR_VERSION,
            n,
            config: cfg,
            splits: entries,
        },
    )?;
    println!(
        "wrote {} / {} / {} points to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        out.display()
    );
    Ok(Outcome::Passed)
}

fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    let mut parts = Vec::new();
    for name in SPLITS {
        let path = split_path(dir, name);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let (header, points) = read_split(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        if header.split != name {
            bail!("{} holds the {} split", path.display(), header.split);
        }
        parts.push(points);
    }
    let test = parts.pop().expect("three splits");
    let valid = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(DatasetSplits { train, valid, test })
}

const MODEL_FORMAT: &str = "dime-mlp/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    config: RunConfig,
    mlp: Mlp,
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    command: &'static str,
    config: &'a RunConfig,
    data: &'a Path,
    report: &'a TrainReport,
    accuracy_floor: f64,
    reload_identical: bool,
    pass: bool,
}

fn load_mlp(path: &Path) -> Result<Mlp> {
    let file = File::open(path).with_context(|| format!("opening weights {}", path.display()))?;
    let m: ModelFile =
        serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing weights {}", path.display()))?;
    if m.format != MODEL_FORMAT {
        bail!("{} is not a {MODEL_FORMAT} file", path.display());
    }
    Ok(m.mlp)
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let splits = load_splits(data)?;
    let (mlp, report) = match mlp_train(&splits, &cfg.train_config()) {
        Ok(v) => v,
        Err(e @ TrainError::Diverged { .. }) => return Err(ThresholdError(e.to_string()).into()),
        Err(e) => return Err(e.into()),
    };
    let model_path = out.join("model.json");
    write_json(
        &model_path,
        &ModelFile {
            format: MODEL_FORMAT.into(),
            config: cfg.clone(),
            mlp: mlp.clone(),
        },
    )?;
    let reloaded = load_mlp(&model_path)?;
    let reload_identical = splits
        .test
        .iter()
        .take(100)
        .all(|p| mlp_forward(&mlp, &p.d1, &p.d2) == mlp_forward(&reloaded, &p.d1, &p.d2));
    debug_assert_eq!(accuracy(&reloaded, &splits.test), report.test_accuracy);
    let pass = report.test_accuracy >= cfg.train.accuracy_floor && reload_identical;
    write_json(
        &out.join("train_report.json"),
        &TrainArtifact {
            command: "train",
            config: cfg,
            data,
            report: &report,
            accuracy_floor: cfg.train.accuracy_floor,
            reload_identical,
            pass,
        },
    )?;
    println!(
        "accuracy: train {:.4}, valid {:.4}, test {:.4} (floor {})",
        report.train_accuracy, report.valid_accuracy, report.test_accuracy, cfg.train.accuracy_floor
    );
    if !pass {
        eprintln!("test accuracy below floor or reload mismatch");
    }
    Ok(Outcome::from_pass(pass))
}

fn load_model(cfg: &RunConfig) -> Result<Box<dyn Model>> {
    match &cfg.model {
        ModelSource::Builtin => {
            let path = cfg
                .weights
                .as_deref()
                .context("the builtin model needs --weights <model.json>")?;
            Ok(Box::new(load_mlp(path)?))
        }
        ModelSource::Command(cmd) => {
            let m = ExternalModel::spawn(cmd, cfg.session_options())
                .with_context(|| format!("starting model command {cmd:?}"))?;
            Ok(Box::new(m))
        }
    }
}

fn read_inputs(path: &Path) -> Result<Vec<(ModalityValue, ModalityValue)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).with_context(|| format!("{}:{}: expected [x1, x2]", path.display(), i + 1))?;
        out.push(pair);
    }
    Ok(out)
}

fn dense_points(points: &[dime::data::SyntheticPoint]) -> Vec<(ModalityValue, ModalityValue)> {
    points
        .iter()
        .map(|p| (ModalityValue::Dense(p.d1.clone()), ModalityValue::Dense(p.d2.clone())))
        .collect()
}

/// The explained point first, then `n − 1` others drawn without replacement.
fn sample_set_around(
    cfg: &RunConfig,
    points: &[(ModalityValue, ModalityValue)],
    prefix: &str,
    point: usize,
) -> Result<SampleSet> {
    let n = cfg.n_samples;
    if point >= points.len() {
        bail!("point {point} out of range for {} inputs", points.len());
    }
    if points.len() < n {
        bail!("need at least N = {n} inputs, found {}", points.len());
    }
    let mut rng = Rng::derived(cfg.seed, "explain/samples");
    let mut chosen = vec![point];
    chosen.extend(
        rng.sample_indices(points.len() - 1, n - 1)
            .into_iter()
            .map(|i| if i >= point { i + 1 } else { i }),
    );
    Ok(SampleSet::with_ids(
        chosen.iter().map(|&i| points[i].clone()).collect(),
        chosen.iter().map(|i| format!("{prefix}/{i}")).collect(),
    )?)
}

#[derive(Serialize)]
struct ExplainArtifact<'a> {
    command: &'static str,
    config: &'a RunConfig,
    source: &'a Path,
    point: usize,
    report: &'a dime::dime::DimeReport,
}

fn explain(
    cfg: &RunConfig,
    data: Option<&Path>,
    inputs: Option<&Path>,
    point: usize,
    class: usize,
    out: &Path,
) -> Result<Outcome> {
    let (points, prefix, source) = match (data, inputs) {
        (Some(dir), _) => (dense_points(&load_splits(dir)?.test), "test", dir),
        (None, Some(file)) => (read_inputs(file)?, "input", file),
        (None, None) => bail!("either --data or --inputs is required"),
    };
    let samples = sample_set_around(cfg, &points, prefix, point)?;
    let model = load_model(cfg)?;
    let report = DimeExplainer::new(&*model, samples, cfg.dime())?.explain(0, class)?;
    write_json(
        &out.join("explain.json"),
        &ExplainArtifact {
            command: "explain",
            config: cfg,
            source,
            point,
            report: &report,
        },
    )?;
    let summary = explain_summary(&report);
    write_text(&out.join("explain.txt"), &summary)?;
    print!("{summary}");
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct ValidateArtifact<'a> {
    command: &'static str,
    config: &'a RunConfig,
    data: &'a Path,
    class: usize,
    checks: &'a [Rq1Check],
    pass: bool,
    result: &'a Rq1Table,
}

fn validate(cfg: &RunConfig, data: &Path, n_points: usize, out: &Path) -> Result<Outcome> {
    let splits = load_splits(data)?;
    let model = load_model(cfg)?;
    let table = validate_rq1(&*model, &splits, n_points, &cfg.dime())?;
    let checks = table.check(&cfg.thresholds);
    let pass = checks.iter().all(|c| c.pass);
    write_json(
        &out.join("validate.json"),
        &ValidateArtifact {
            command: "validate",
            config: cfg,
            data,
            class: EXPLAINED_CLASS,
            checks: &checks,
            pass,
            result: &table,
        },
    )?;
    print!("{}", table.render_text());
    for c in checks.iter().filter(|c| !c.pass) {
        println!("FAIL {}: {:?} (want {})", c.cell, c.value, c.rule);
    }
    println!("{}", if pass { "thresholds: pass" } else { "thresholds: FAIL" });
    Ok(Outcome::from_pass(pass))
}

#[derive(Serialize)]
struct SwapArtifact<'a> {
    command: &'static str,
    config: &'a RunConfig,
    data: &'a Path,
    class: usize,
    pass: bool,
    result: &'a SwapResult,
}

/// UC distance ceiling and MI / UC ratio floor for the swap pattern.
const SWAP_UC_MAX: f64 = 0.1;
const SWAP_RATIO_MIN: f64 = 3.0;

fn swaptest(cfg: &RunConfig, data: &Path, pairs: usize, class: usize, out: &Path) -> Result<Outcome> {
    let splits = load_splits(data)?;
    let test = &splits.test;
    let n = cfg.n_samples;
    if test.len() < n + pairs {
        bail!("swap test needs N + pairs = {} test points, found {}", n + pairs, test.len());
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    Rng::derived(cfg.seed, "swaptest/select").shuffle(&mut order);
    let points = dense_points(test);
    let samples = SampleSet::with_ids(
        order[..n].iter().map(|&i| points[i].clone()).collect(),
        order[..n].iter().map(|i| format!("test/{i}")).collect(),
    )?;
    let swaps: Vec<(usize, ModalityValue)> = (0..pairs)
        .map(|p| (p % n, points[order[n + p]].1.clone()))
        .collect();
    let model = load_model(cfg)?;
    let result = swap_test(&*model, &samples, &swaps, class, &cfg.dime())?;
    let pass = match (result.uc_distance, result.mi_distance) {
        (Some(uc), Some(mi)) => uc <= SWAP_UC_MAX && mi >= SWAP_RATIO_MIN * uc,
        _ => false,
    };
    write_json(
        &out.join("swaptest.json"),
        &SwapArtifact {
            command: "swaptest",
            config: cfg,
            data,
            class,
            pass,
            result: &result,
        },
    )?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mean cosine distance over {pairs} swaps: UC1 {}, MI1 {}",
        show(result.uc_distance),
        show(result.mi_distance)
    );
    println!("{}", if pass { "swap pattern: pass" } else { "swap pattern: FAIL" });
    Ok(Outcome::from_pass(pass))
}

#[derive(Serialize)]
struct BenchArtifact<'a> {
    command: &'static str,
    config: &'a RunConfig,
    data: &'a Path,
    n: usize,
    s: usize,
    cold_evaluations: u64,
    warm_evaluations: u64,
    expected_cold: u64,
    expected_warm: u64,
    /// Cost of rebuilding the whole table for every perturbation.
    naive_evaluations: u64,
    pass: bool,
}

fn bench(cfg: &RunConfig, data: &Path, class: usize, out: &Path) -> Result<Outcome> {
    let splits = load_splits(data)?;
    let points = dense_points(&splits.test);
    let samples = sample_set_around(cfg, &points, "test", 0)?;
    let model = CountingModel::new(load_model(cfg)?);
    let mut explainer = DimeExplainer::new(&model, samples, cfg.dime())?;

    let t0 = Instant::now();
    explainer.explain(0, class)?;
    let cold_time = t0.elapsed();
    let cold = model.evaluations();
    model.reset();
    let t1 = Instant::now();
    explainer.explain(1, class)?;
    let warm_time = t1.elapsed();
    let warm = model.evaluations();

    let (n, s) = (cfg.n_samples as u64, cfg.lime_samples as u64);
    let expected_cold = n * n + 2 * s * n;
    let expected_warm = 2 * s * n;
    let pass = cold == expected_cold && warm == expected_warm;
    write_json(
        &out.join("bench.json"),
        &BenchArtifact {
            command: "bench",
            config: cfg,
            data,
            n: cfg.n_samples,
            s: cfg.lime_samples,
            cold_evaluations: cold,
            warm_evaluations: warm,
            expected_cold,
            expected_warm,
            naive_evaluations: 2 * s * n * n,
            pass,
        },
    )?;
    println!("cold: {cold} evaluations in {:.3} s (expected {expected_cold})", cold_time.as_secs_f64());
    println!("warm: {warm} evaluations in {:.3} s (expected {expected_warm})", warm_time.as_secs_f64());
    println!("naive rebuild would need {} evaluations", 2 * s * n * n);
    Ok(Outcome::from_pass(pass))
}

fn stub_model(behavior: StubBehavior, classes: usize, kinds: &str) -> Result<Outcome> {
    let parsed: Vec<ModalityKind> = kinds
        .split(',')
        .map(|k| serde_json::from_value(serde_json::Value::String(k.trim().to_string())))
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --kinds {kinds:?}"))?;
    let [a, b] = parsed[..] else {
        bail!("--kinds needs exactly two entries");
    };
    let stdin = std::io::stdin();
    run_stub(behavior, classes, [a, b], stdin.lock(), std::io::stdout().lock())?;
    Ok(Outcome::Passed)
}
