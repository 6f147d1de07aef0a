//! Configuration, dataset ingestion and report emission.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::harness::{
    drift_sweep, generalization_suite, gradcheck, make_synthetic, normalize_columns, random_sphere, shuffle,
    verify_quasi, Dataset, DriftSetup, ModelKind, QuasiSetup, SuiteConfig, SyntheticKind, GRADCHECK_TOL,
    KS_PASS_RATE, PEARSON_THRESHOLD,
};
use crate::network::{init_params, Dims, ThetaInit};
use crate::ntk::{empirical_ntk, relu_gram, BwnnNtk, NtkMethod};
use crate::num_core::{Rng, RNG_VERSION};
use crate::quasi::tilde_varsigma_sq;
use crate::spectrum::{fit_decay, Parity, ZonalKernel, DEFAULT_ORDER};
use crate::trainer::{clip_check, predict, train, Optimizer, TrainConfig, TrainData, TrainMode};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Every setting a command can read. Unused keys are simply ignored by
/// commands that do not need them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: String,
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub c: f64,
    pub beta: f64,
    /// "uniform" or "scaled-uniform" (with theta_scale).
    pub theta_init: String,
    pub theta_scale: f64,
    pub var_theta: f64,
    pub mode: String,
    pub optimizer: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub quad_order: usize,
    pub kmax: usize,
    pub kernel: String,
    pub xi: f64,
    pub bandwidth: f64,
    pub method: String,
    pub width: usize,
    pub samples: usize,
    pub probes: usize,
    pub widths: String,
    pub seeds: usize,
    pub steps: usize,
    pub datasets: usize,
    pub m: usize,
    pub noise: f64,
    pub test_fraction: f64,
    pub data: String,
    pub labels: String,
    pub label_column: String,
    pub subsample: usize,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            d: 10,
            d1: 512,
            d2: 64,
            c: 1.0,
            beta: 1.0,
            theta_init: "uniform".into(),
            theta_scale: 1.0,
            var_theta: 1.0 / 3.0,
            mode: "binaryconnect".into(),
            optimizer: "adam".into(),
            lr: 0.01,
            epochs: 100,
            batch_size: 100,
            weight_decay: 1e-3,
            seed: 0,
            quad_order: 64,
            kmax: 40,
            kernel: "bwnn".into(),
            xi: 2.0,
            bandwidth: 1.0,
            method: "analytic".into(),
            width: 1600,
            samples: 1000,
            probes: 64,
            widths: "256,1024,4096".into(),
            seeds: 5,
            steps: 100,
            datasets: 20,
            m: 120,
            noise: 1.5,
            test_fraction: 0.3,
            data: String::new(),
            labels: String::new(),
            label_column: "label".into(),
            subsample: 0,
            out: String::new(),
        }
    }
}

const COMMANDS: [&str; 7] = ["verify-quasi", "gradcheck", "train", "ntk", "spectrum", "drift", "compare"];

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

fn canonical_key(k: &str) -> String {
    let k = k.trim_start_matches("--").replace('-', "_");
    match k.as_str() {
        "dim" => "d".into(),
        _ => k,
    }
}

/// Coerces `v` to the JSON type of the default value for `key`.
fn coerce(key: &str, default: &Value, v: Value) -> Result<Value> {
    let mismatch = |v: &Value| cfg_err(key, format!("expected {}, got {v}", kind_name(default)));
    match default {
        Value::String(_) => match v {
            Value::String(_) => Ok(v),
            other => Err(mismatch(&other)),
        },
        Value::Number(n) if n.is_u64() => match &v {
            Value::Number(x) if x.is_u64() => Ok(v),
            Value::Number(x) if x.as_f64().is_some_and(|f| f >= 0.0 && f.fract() == 0.0 && f < 2f64.powi(53)) => {
                Ok(json!(x.as_f64().unwrap() as u64))
            }
            Value::String(s) => s.parse::<u64>().map(|u| json!(u)).map_err(|_| mismatch(&v)),
            _ => Err(mismatch(&v)),
        },
        Value::Number(_) => match &v {
            Value::Number(_) => Ok(v),
            Value::String(s) => s
                .parse::<f64>()
                .ok()
                .and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
                .ok_or_else(|| mismatch(&v)),
            _ => Err(mismatch(&v)),
        },
        _ => Err(mismatch(&v)),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Number(n) if n.is_u64() => "a nonnegative integer",
        Value::Number(_) => "a number",
        _ => "a scalar",
    }
}

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(body) = a.strip_prefix("--") else {
            return Err(cfg_err(a, "expected a --key flag"));
        };
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let v = args.get(i + 1).ok_or_else(|| cfg_err(body, "flag is missing its value"))?;
            out.push((body.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}

/// Builds the effective configuration: defaults, then the JSON object in
/// `file` (if any), then `flags`. Errors name the offending key.
pub fn parse_config(file: Option<&str>, flags: &[(String, String)]) -> Result<RunConfig> {
    let defaults = match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut merged = defaults.clone();
    if let Some(text) = file {
        let v: Value = serde_json::from_str(text).map_err(|e| cfg_err("<file>", e.to_string()))?;
        let Value::Object(obj) = v else {
            return Err(cfg_err("<file>", "config must be a JSON object"));
        };
        for (k, v) in obj {
            let key = canonical_key(&k);
            let def = defaults.get(&key).ok_or_else(|| cfg_err(&k, "unknown key"))?;
            merged.insert(key.clone(), coerce(&key, def, v)?);
        }
    }
    for (k, v) in flags {
        let key = canonical_key(k);
        let def = defaults.get(&key).ok_or_else(|| cfg_err(k, "unknown key"))?;
        merged.insert(key.clone(), coerce(&key, def, Value::String(v.clone()))?);
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| cfg_err("<config>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(cfg_err(key, msg)) };
        check(self.command.is_empty() || COMMANDS.contains(&self.command.as_str()), "command", "unknown command")?;
        check(self.d >= 2, "d", "must be >= 2")?;
        check(self.d1 >= 1, "d1", "must be >= 1")?;
        check(self.d2 >= 1, "d2", "must be >= 1")?;
        check(self.c > 0.0 && self.c.is_finite(), "c", "must be positive")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be >= 0")?;
        check(["uniform", "scaled-uniform"].contains(&self.theta_init.as_str()), "theta_init", "must be uniform or scaled-uniform")?;
        check(self.theta_scale > 0.0 && self.theta_scale <= 1.0, "theta_scale", "must be in (0, 1]")?;
        check(self.var_theta > 0.0 && self.var_theta <= 1.0, "var_theta", "must be in (0, 1]")?;
        check(["binaryconnect", "quasi", "real"].contains(&self.mode.as_str()), "mode", "must be binaryconnect, quasi or real")?;
        check(["sgd", "adam"].contains(&self.optimizer.as_str()), "optimizer", "must be sgd or adam")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", "must be >= 0")?;
        check(self.quad_order >= 1 && self.quad_order <= crate::num_core::MAX_QUAD_NODES, "quad_order", "must be in [1, 4096]")?;
        check(self.kmax <= crate::spectrum::MAX_TABLE_DEGREE, "kmax", "must be <= 64")?;
        check(
            ["bwnn", "relu", "rgauss", "laplace", "gaussian"].contains(&self.kernel.as_str()),
            "kernel",
            "must be bwnn, relu, rgauss, laplace or gaussian",
        )?;
        check(self.xi > 0.0 && self.xi.is_finite(), "xi", "must be positive")?;
        check(self.bandwidth > 0.0 && self.bandwidth.is_finite(), "bandwidth", "must be positive")?;
        check(["analytic", "empirical", "relu"].contains(&self.method.as_str()), "method", "must be analytic, empirical or relu")?;
        check(self.probes >= 1 && self.probes <= 64, "probes", "must be in [1, 64]")?;
        check(self.seeds >= 1, "seeds", "must be >= 1")?;
        check(self.noise >= 0.0 && self.noise.is_finite(), "noise", "must be >= 0")?;
        check(self.test_fraction > 0.0 && self.test_fraction < 1.0, "test_fraction", "must be in (0, 1)")?;
        self.width_list()?;
        Ok(())
    }

    pub fn width_list(&self) -> Result<Vec<usize>> {
        self.widths
            .split(',')
            .map(|s| s.trim().parse::<usize>().ok().filter(|&w| w > 0))
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| cfg_err("widths", "must be a comma-separated list of positive integers"))
    }

    fn theta_init(&self) -> ThetaInit {
        if self.theta_init == "uniform" {
            ThetaInit::Uniform
        } else {
            ThetaInit::ScaledUniform(self.theta_scale)
        }
    }

    fn train_mode(&self) -> TrainMode {
        match self.mode.as_str() {
            "quasi" => TrainMode::Quasi,
            "real" => TrainMode::Real,
            _ => TrainMode::Binaryconnect,
        }
    }

    fn optimizer(&self) -> Optimizer {
        if self.optimizer == "adam" {
            Optimizer::Adam
        } else {
            Optimizer::Sgd
        }
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

/// Reads a headed CSV of numeric features plus a label column. Labels
/// become class indices in order of first appearance; rows are scaled to
/// unit norm.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| data_err(path, e))?;
    let header = rd.headers().map_err(|e| data_err(path, e))?.clone();
    let li = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| data_err(path, format!("missing label column {label_column:?}")))?;
    let mut feats: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let d = header.len() - 1;
    for (r, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        if rec.len() != header.len() {
            return Err(data_err(path, format!("row {} has {} fields, expected {}", r + 1, rec.len(), header.len())));
        }
        for (ci, cell) in rec.iter().enumerate() {
            if ci == li {
                let next = names.len();
                let id = *index.entry(cell.to_string()).or_insert(next);
                if id == next {
                    names.push(cell.to_string());
                }
                labels.push(id);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    data_err(path, format!("row {}, column {:?}: {cell:?} is not numeric", r + 1, &header[ci]))
                })?;
                feats.push(v);
            }
        }
    }
    let m = labels.len();
    if m == 0 || d == 0 {
        return Err(data_err(path, "no feature rows"));
    }
    let mut x = DMatrix::from_column_slice(d, m, &feats);
    if let Some(r) = x.column_iter().position(|c| !(c.norm() > 0.0)) {
        return Err(data_err(path, format!("row {} has zero norm", r + 1)));
    }
    normalize_columns(&mut x).map_err(|e| data_err(path, e))?;
    let targets = if names.len() == 2 {
        labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
    } else {
        labels.iter().map(|&l| l as f64).collect()
    };
    let ds = Dataset {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        seed: 0,
        x,
        targets,
        labels: Some(labels),
        class_names: names,
        train: (0..m).collect(),
        test: vec![],
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a labelled dataset in the layout `load_csv` reads, with features
/// f0..f{d-1} and a `label` column.
pub fn write_csv(ds: &Dataset) -> Result<String> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::Data("dataset has no labels".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(e.to_string());
    let mut head: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    head.push("label".into());
    w.write_record(&head).map_err(err)?;
    for (c, col) in ds.x.column_iter().enumerate() {
        let mut row: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
        row.push(ds.class_names[labels[c]].clone());
        w.write_record(&row).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
}

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxFile {
    /// Parses an unsigned-byte IDX container and checks its magic.
    pub fn parse(bytes: &[u8], expect_magic: u32) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Data("truncated IDX header".into()))
        };
        let magic = word(0)?;
        if magic != expect_magic {
            return Err(Error::Data(format!("IDX magic {magic:#010x}, expected {expect_magic:#010x}")));
        }
        let ndim = (magic & 0xff) as usize;
        let dims = (1..=ndim).map(word).collect::<Result<Vec<_>>>()?;
        let want = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
        let start = 4 * (ndim + 1);
        let have = bytes.len() - start.min(bytes.len());
        match want {
            Some(w) if w == have => {}
            Some(w) if w > have => return Err(Error::Data(format!("truncated IDX payload: {have} of {w} bytes"))),
            Some(w) => return Err(Error::Data(format!("IDX payload has {have} bytes, expected {w}"))),
            None => return Err(Error::Data("IDX dimensions overflow".into())),
        }
        Ok(IdxFile { magic, dims, payload: bytes[start..].to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic.to_be_bytes().to_vec();
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Reads an IDX image/label pair. `subsample` > 0 keeps that many rows
/// drawn without replacement by `seed`, in ascending index order.
pub fn load_idx(images: &Path, labels: &Path, subsample: usize, seed: u64) -> Result<Dataset> {
    let img = IdxFile::parse(&std::fs::read(images)?, IDX_IMAGES).map_err(|e| data_err(images, e))?;
    let lab = IdxFile::parse(&std::fs::read(labels)?, IDX_LABELS).map_err(|e| data_err(labels, e))?;
    let n = img.dims[0] as usize;
    if lab.dims[0] as usize != n {
        return Err(Error::Data(format!("{n} images but {} labels", lab.dims[0])));
    }
    if n == 0 {
        return Err(data_err(images, "no images"));
    }
    let pix = img.payload.len() / n;
    let mut idx: Vec<usize> = (0..n).collect();
    if subsample > 0 && subsample < n {
        shuffle(&mut idx, &mut Rng::with_stream(seed, 0x696478));
        idx.truncate(subsample);
        idx.sort_unstable();
    }
    let mut x = DMatrix::from_fn(pix, idx.len(), |r, c| img.payload[idx[c] * pix + r] as f64 / 255.0);
    normalize_columns(&mut x).map_err(|e| data_err(images, e))?;
    let n_classes = lab.payload.iter().copied().max().unwrap_or(0) as usize + 1;
    let lbl: Vec<usize> = idx.iter().map(|&i| lab.payload[i] as usize).collect();
    let targets = if n_classes == 2 {
        lbl.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
    } else {
        lbl.iter().map(|&l| l as f64).collect()
    };
    let m = idx.len();
    Ok(Dataset {
        name: images.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        seed,
        x,
        targets,
        labels: Some(lbl),
        class_names: (0..n_classes).map(|k| k.to_string()).collect(),
        train: (0..m).collect(),
        test: vec![],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, value: f64, threshold: &str, pass: bool) -> Self {
        Check { name: name.into(), value, threshold: threshold.into(), pass }
    }
}

/// A command's outcome. `report` is the JSON emitted to stdout and to
/// `<out>/report.json`; `artifacts` are extra files for `<out>`.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Value,
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Exit code for an error: 2 for usage and configuration, 3 for data.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Resource(_) | Error::Domain(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Unnormalized(_) | Error::Shape(_) => 3,
        _ => 1,
    }
}

pub fn error_json(e: &Error) -> Value {
    let key = match e {
        Error::Config { key, .. } => Some(key.clone()),
        _ => None,
    };
    json!({ "error": e.to_string(), "key": key, "exit_code": error_exit_code(e) })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = if cfg.data.is_empty() {
        make_synthetic(SyntheticKind::TwoGaussians, cfg.m, cfg.d, cfg.noise, cfg.seed)?
    } else if cfg.labels.is_empty() {
        load_csv(Path::new(&cfg.data), &cfg.label_column)?
    } else {
        load_idx(Path::new(&cfg.data), Path::new(&cfg.labels), cfg.subsample, cfg.seed)?
    };
    ds.resplit(cfg.test_fraction, cfg.seed);
    Ok(ds)
}

/// Runs one command. Reports embed the effective config, seed, code
/// version and RNG version; rerunning with the embedded config reproduces
/// the report exactly.
pub fn run_command(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();
    let mut checks = Vec::new();
    let results = match cfg.command.as_str() {
        "verify-quasi" => {
            let setup = QuasiSetup { d: cfg.d, d2: cfg.d2, c: cfg.c, beta: cfg.beta, ..QuasiSetup::default() };
            let r = verify_quasi(cfg.width, cfg.samples, cfg.probes, cfg.seed, setup)?;
            checks.push(Check::new("ks_pass_rate", r.ks_pass_rate, &format!(">= {KS_PASS_RATE}"), r.ks_pass_rate >= KS_PASS_RATE));
            checks.push(Check::new("pearson_r", r.pearson_r, &format!("> {PEARSON_THRESHOLD}"), r.pearson_r > PEARSON_THRESHOLD));
            serde_json::to_value(&r).map_err(|e| Error::Data(e.to_string()))?
        }
        "gradcheck" => {
            let mut rng = Rng::new(cfg.seed);
            let p = init_params(Dims::new(cfg.d, cfg.d1, cfg.d2)?, cfg.c, cfg.beta, cfg.theta_init(), &mut rng)?;
            let x = random_sphere(cfg.d, 3, &mut rng);
            let vs = tilde_varsigma_sq(cfg.c, cfg.d, cfg.var_theta)?;
            let r = gradcheck(&p, &x, vs)?;
            checks.push(Check::new("max_rel_err", r.max_rel_err, &format!("< {GRADCHECK_TOL}"), r.max_rel_err < GRADCHECK_TOL));
            serde_json::to_value(&r).map_err(|e| Error::Data(e.to_string()))?
        }
        "train" => run_train(cfg, &mut artifacts, &mut checks)?,
        "ntk" => run_ntk(cfg, &mut artifacts, &mut checks)?,
        "spectrum" => run_spectrum(cfg, &mut artifacts, &mut checks)?,
        "drift" => {
            let widths = cfg.width_list()?;
            let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|s| cfg.seed + s).collect();
            let setup = DriftSetup {
                d: cfg.d,
                d1: cfg.d1,
                steps: cfg.steps,
                lr: cfg.lr,
                c: cfg.c,
                beta: cfg.beta,
                ..DriftSetup::default()
            };
            let s = drift_sweep(&widths, &seeds, setup)?;
            checks.push(Check::new("strictly_decreasing", f64::from(u8::from(s.strictly_decreasing())), "true", s.strictly_decreasing()));
            for (i, r) in s.ratios().iter().enumerate() {
                let ok = (0.3..=0.8).contains(r) || widths[i + 1] != 4 * widths[i];
                checks.push(Check::new(&format!("ratio_{}_{}", widths[i], widths[i + 1]), *r, "[0.3, 0.8] for 4x width", ok));
            }
            serde_json::to_value(&s).map_err(|e| Error::Data(e.to_string()))?
        }
        "compare" => {
            let datasets = (0..cfg.datasets as u64)
                .map(|s| {
                    if cfg.data.is_empty() {
                        make_synthetic(SyntheticKind::TwoGaussians, cfg.m, cfg.d, cfg.noise, cfg.seed + s)
                    } else {
                        let mut c = cfg.clone();
                        c.seed = cfg.seed + s;
                        load_dataset(&c).map(|mut ds| {
                            ds.name = format!("{}-{}", ds.name, c.seed);
                            ds.seed = c.seed;
                            ds
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let suite = SuiteConfig {
                width: cfg.d1,
                c: cfg.c,
                beta: cfg.beta,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                weight_decay: cfg.weight_decay,
                optimizer: cfg.optimizer(),
                ..SuiteConfig::default()
            };
            let rep = generalization_suite(&ModelKind::ALL, &datasets, &suite)?;
            for p in &rep.pairs {
                let name = format!("{}-{}_gap_p_greater", p.first.name(), p.second.name());
                checks.push(Check::new(&name, p.gap.p_greater, "< 0.1", p.gap.p_greater < 0.1));
            }
            artifacts.push(("comparison.csv".into(), rep.to_csv()?.into_bytes()));
            serde_json::to_value(&rep).map_err(|e| Error::Data(e.to_string()))?
        }
        "" => return Err(cfg_err("command", "no command given")),
        other => return Err(cfg_err("command", format!("unknown command {other:?}"))),
    };
    let config = serde_json::to_value(cfg).map_err(|e| Error::Data(e.to_string()))?;
    let report = json!({
        "command": cfg.command,
        "config": config,
        "seed": cfg.seed,
        "code_version": CODE_VERSION,
        "rng_version": RNG_VERSION,
        "checks": checks,
        "pass": checks.iter().all(|c| c.pass),
        "results": results,
    });
    Ok(RunOutcome { report, artifacts, checks })
}

fn run_train(cfg: &RunConfig, artifacts: &mut Vec<(String, Vec<u8>)>, checks: &mut Vec<Check>) -> Result<Value> {
    let ds = load_dataset(cfg)?;
    let xt = ds.columns(&ds.train);
    let yt = ds.target_matrix(&ds.train);
    let vs = tilde_varsigma_sq(cfg.c, ds.dim(), 1.0 / 3.0)?;
    let mode = cfg.train_mode();
    let eval_mode = if mode == TrainMode::Binaryconnect { TrainMode::Quasi } else { mode };
    let mut rng = Rng::new(cfg.seed);
    let dims = Dims::new(ds.dim(), cfg.d1, cfg.d2)?;
    let mut pred_train = DMatrix::zeros(ds.train.len(), yt.ncols());
    let mut pred_test = DMatrix::zeros(ds.test.len(), yt.ncols());
    let mut outputs = Vec::new();
    for k in 0..yt.ncols() {
        let p0 = init_params(dims, cfg.c, cfg.beta, cfg.theta_init(), &mut rng)?;
        let data = TrainData::new(xt.clone(), yt.column(k).iter().copied().collect())?;
        let tc = TrainConfig {
            mode,
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed.wrapping_add(k as u64),
            record_drift_every: cfg.steps.max(1),
            optimizer: cfg.optimizer(),
            varsigma_sq: vs,
        };
        let out = train(&p0, &data, &tc)?;
        let y = predict(&out.params, &xt, eval_mode, vs, &mut rng, 1)?;
        pred_train.column_mut(k).copy_from_slice(&y);
        if !ds.test.is_empty() {
            let y = predict(&out.params, &ds.columns(&ds.test), eval_mode, vs, &mut rng, 1)?;
            pred_test.column_mut(k).copy_from_slice(&y);
        }
        let clip = clip_check(&out.params);
        if mode != TrainMode::Real {
            checks.push(Check::new(&format!("clip_fraction_{k}"), clip, "< 0.01", clip < 0.01));
        }
        artifacts.push((format!("drift_{k}.csv"), out.drift.to_csv()?.into_bytes()));
        let ckpt = serde_json::to_vec(&crate::network::Checkpoint::from_params(&out.params, Some(cfg.seed)))
            .map_err(|e| Error::Data(e.to_string()))?;
        artifacts.push((format!("model_{k}.json"), ckpt));
        outputs.push(json!({
            "final_loss": out.losses.last(),
            "clip_fraction": clip,
            "drift": out.drift,
        }));
    }
    let train_metric = ds.metric(&ds.train, &pred_train);
    let test_metric = if ds.test.is_empty() { f64::NAN } else { ds.metric(&ds.test, &pred_test) };
    Ok(json!({
        "dataset": ds.name,
        "n_train": ds.train.len(),
        "n_test": ds.test.len(),
        "train_metric": train_metric,
        "test_metric": if test_metric.is_finite() { json!(test_metric) } else { Value::Null },
        "outputs": outputs,
    }))
}

fn run_ntk(cfg: &RunConfig, artifacts: &mut Vec<(String, Vec<u8>)>, checks: &mut Vec<Check>) -> Result<Value> {
    let mut rng = Rng::new(cfg.seed);
    let probes = random_sphere(cfg.d, cfg.probes, &mut rng);
    let analytic = BwnnNtk::new(cfg.c, cfg.d, cfg.var_theta, cfg.beta, NtkMethod::Quadrature { order: cfg.quad_order })?;
    let mut extra = Map::new();
    let km = match cfg.method.as_str() {
        "empirical" => {
            let p = init_params(Dims::new(cfg.d, cfg.d1, cfg.d2)?, cfg.c, cfg.beta, cfg.theta_init(), &mut rng)?;
            let vs = tilde_varsigma_sq(cfg.c, cfg.d, cfg.theta_init().variance())?;
            let k = empirical_ntk(&p, &probes, vs)?;
            extra.insert("rel_frobenius_to_analytic".into(), json!(k.rel_frobenius(&analytic.gram(&probes)?)));
            k
        }
        "relu" => relu_gram(&probes, cfg.c, cfg.d, cfg.beta)?,
        _ => analytic.gram(&probes)?,
    };
    let (lo, hi) = km.eigen_range();
    checks.push(Check::new("max_asymmetry", km.max_asymmetry(), "<= 1e-10", km.max_asymmetry() <= 1e-10));
    checks.push(Check::new("psd", lo, ">= -1e-8 * max eigenvalue", km.is_psd()));
    artifacts.push(("gram.csv".into(), km.to_csv()?.into_bytes()));
    extra.insert("provenance".into(), serde_json::to_value(&km.provenance).map_err(|e| Error::Data(e.to_string()))?);
    extra.insert("eigen_min".into(), json!(lo));
    extra.insert("eigen_max".into(), json!(hi));
    extra.insert("probes".into(), json!(cfg.probes));
    Ok(Value::Object(extra))
}

fn run_spectrum(cfg: &RunConfig, artifacts: &mut Vec<(String, Vec<u8>)>, checks: &mut Vec<Check>) -> Result<Value> {
    let kernel = match cfg.kernel.as_str() {
        "bwnn" => ZonalKernel::Bwnn { c: cfg.c, d: cfg.d, var_theta: cfg.var_theta, beta: cfg.beta },
        "relu" => ZonalKernel::Relu { c: cfg.c, d: cfg.d, beta: cfg.beta },
        "rgauss" => ZonalKernel::Rgauss { d: cfg.d, xi: cfg.xi },
        "laplace" => ZonalKernel::Laplace { d: cfg.d, s: cfg.bandwidth },
        _ => ZonalKernel::Gaussian { d: cfg.d, s: cfg.bandwidth },
    };
    let order = cfg.quad_order.max(DEFAULT_ORDER);
    let mut table = kernel.spectrum(cfg.kmax, order)?;
    let (k_min, k_end) = (6.min(cfg.kmax), 30.min(cfg.kmax));
    for parity in [Parity::Even, Parity::Odd] {
        if let Ok(f) = fit_decay(&table, k_min, k_end, parity) {
            table.fits.push(f);
        }
    }
    for f in &table.fits {
        let tag = format!("{:?}", f.parity).to_lowercase();
        match kernel {
            ZonalKernel::Rgauss { .. } => {
                let r2 = f.exponential.r2;
                checks.push(Check::new(&format!("exponential_r2_{tag}"), r2, "> 0.99", r2 > 0.99));
            }
            ZonalKernel::Bwnn { .. } => checks.push(Check::new(
                &format!("exp_minus_power_r2_{tag}"),
                f.exponential.r2 - f.power.r2,
                "> 0",
                f.exponential.r2 > f.power.r2,
            )),
            ZonalKernel::Relu { d, .. } => {
                checks.push(Check::new(
                    &format!("power_minus_exp_r2_{tag}"),
                    f.power.r2 - f.exponential.r2,
                    "> 0",
                    f.power.r2 > f.exponential.r2,
                ));
                let p = f.power_exponent();
                let ok = p >= d as f64 - 1.0 && p <= d as f64 + 1.0;
                checks.push(Check::new(&format!("power_exponent_{tag}"), p, "in [d-1, d+1]", ok));
            }
            _ => {}
        }
    }
    artifacts.push(("spectrum.csv".into(), table.to_csv()?.into_bytes()));
    let fits = table.fits_json();
    artifacts.push(("fits.json".into(), serde_json::to_vec_pretty(&fits).map_err(|e| Error::Data(e.to_string()))?));
    Ok(json!({
        "kernel": kernel,
        "kmax": table.kmax(),
        "coeffs": table.coeffs,
        "fits": fits,
    }))
}

/// Writes the report and artifacts under `cfg.out` (when set).
pub fn emit(cfg: &RunConfig, outcome: &RunOutcome) -> Result<Option<PathBuf>> {
    if cfg.out.is_empty() {
        return Ok(None);
    }
    let dir = PathBuf::from(&cfg.out);
    let report = serde_json::to_vec_pretty(&outcome.report).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&dir.join("report.json"), &report)?;
    for (name, bytes) in &outcome.artifacts {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(Some(dir))
}

/// Recovers the effective config embedded in a report.
pub fn config_from_report(report: &Value) -> Result<RunConfig> {
    let cfg = report.get("config").ok_or_else(|| cfg_err("config", "report has no embedded config"))?;
    parse_config(Some(&cfg.to_string()), &[])
}
