//! Experiment runner behind the `stron` binary.
//!
//! Loads LibSVM data (optionally gzipped), splits it, runs one of the
//! optimizers and writes a CSV trace plus a JSON summary next to it.
//! Independent runs (folds, method comparisons) execute on scoped threads
//! sharing the immutable dataset.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::{k_fold, parse_libsvm, split_train_test, DataError, IndexSubset, SparseDataset};
use crate::loss::{LossError, LossKind, LossModel};
use crate::optimizer::{
    run_newton_cg, run_stron, run_stron_svrg, run_tron, Growth, OptimError, RunOptions, RunOutput, RunTrace, StopReason,
    SubproblemSolver, SubsampleSchedule, SvrgConfig, TraceRow, TrustRegionConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
    #[error("{0}")]
    Format(String),
    #[error("refusing to combine: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl HarnessError {
    /// 2 usage, 3 input/output, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Mismatch(_) => 2,
            HarnessError::Io { .. } | HarnessError::Data { .. } | HarnessError::Format(_) => 3,
            HarnessError::Optim(OptimError::Config(_)) => 2,
            HarnessError::Loss(LossError::Lambda(_)) => 2,
            HarnessError::Optim(_) | HarnessError::Loss(_) => 4,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

macro_rules! serde_as_str {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Tron,
    Stron,
    StronPcg,
    StronSvrg,
    NewtonCg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Tron,
        Method::Stron,
        Method::StronPcg,
        Method::StronSvrg,
        Method::NewtonCg,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tron => "tron",
            Method::Stron => "stron",
            Method::StronPcg => "stron-pcg",
            Method::StronSvrg => "stron-svrg",
            Method::NewtonCg => "newton-cg",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method '{s}', expected one of tron, stron, stron-pcg, stron-svrg, newton-cg"))
    }
}

/// Regularization strength; `Auto` is `1/l` for `l` training points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSetting {
    Auto,
    Value(f64),
}

impl LambdaSetting {
    pub fn resolve(self, n_train: usize) -> f64 {
        match self {
            LambdaSetting::Auto => 1.0 / n_train as f64,
            LambdaSetting::Value(v) => v,
        }
    }
}

impl fmt::Display for LambdaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSetting::Auto => f.write_str("auto"),
            LambdaSetting::Value(v) => write!(f, "{v:e}"),
        }
    }
}

impl FromStr for LambdaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LambdaSetting::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(LambdaSetting::Value(v)),
            _ => Err(format!("lambda must be 'auto' or a finite number >= 0, got '{s}'")),
        }
    }
}

impl Serialize for LambdaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LambdaSetting::Auto => s.serialize_str("auto"),
            LambdaSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => LambdaSetting::from_str(&v.to_string()),
            Repr::Str(s) => LambdaSetting::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

serde_as_str!(Method, LossKind, Growth);

/// Every tunable, all optional. Parsed from command-line flags and from a
/// TOML config file (keys spelled like the flags); flags win.
#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigOverrides {
    /// LibSVM dataset, optionally gzipped
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// logistic or svm
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// tron, stron, stron-pcg, stron-svrg or newton-cg
    #[arg(long)]
    pub method: Option<Method>,
    /// Regularization strength, or `auto` for 1/l
    #[arg(long)]
    pub lambda: Option<LambdaSetting>,
    /// Stop once ‖g‖ ≤ eps·‖g₀‖
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub max_cg: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial subsample fraction (default 0.01, or 0.1 for ijcnn1)
    #[arg(long)]
    pub init_frac: Option<f64>,
    #[arg(long)]
    pub epochs_to_full: Option<f64>,
    /// linear or exp
    #[arg(long)]
    pub growth: Option<Growth>,
    #[arg(long)]
    pub pcg_alpha: Option<f64>,
    /// Inner iterations per SVRG anchor
    #[arg(long)]
    pub svrg_m: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run k-fold cross-validation instead of a single split
    #[arg(long)]
    pub folds: Option<usize>,
    /// Training share of the split; 1 trains on everything
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// CG relative-residual tolerance
    #[arg(long)]
    pub forcing: Option<f64>,
    /// Append a constant feature with this value
    #[arg(long)]
    pub bias: Option<f64>,
    /// Initial trust-region radius (default ‖g₀‖)
    #[arg(long)]
    pub delta0: Option<f64>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub eta1: Option<f64>,
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub gamma3: Option<f64>,
}

impl ConfigOverrides {
    pub fn from_toml_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved experiment settings, echoed into every summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub loss: LossKind,
    pub method: Method,
    pub lambda: LambdaSetting,
    pub epsilon: f64,
    pub seed: u64,
    pub init_frac: f64,
    pub epochs_to_full: f64,
    pub growth: Growth,
    pub max_cg: usize,
    pub forcing: f64,
    pub pcg_alpha: f64,
    pub svrg_m: usize,
    pub max_outer: usize,
    pub train_fraction: f64,
    pub folds: Option<usize>,
    pub bias: Option<f64>,
    pub out: Option<PathBuf>,
    pub delta0: Option<f64>,
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

/// 0.1 for ijcnn1 (many points, few features), 0.01 otherwise.
pub fn preset_initial_fraction(data: &Path) -> f64 {
    let name = data.file_name().map(|s| s.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    if name.contains("ijcnn") {
        0.1
    } else {
        0.01
    }
}

impl ExperimentConfig {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        let data = data.into();
        let tr = TrustRegionConfig::default();
        let sched = SubsampleSchedule::default();
        Self {
            init_frac: preset_initial_fraction(&data),
            data,
            loss: LossKind::Logistic,
            method: Method::Stron,
            lambda: LambdaSetting::Auto,
            epsilon: tr.epsilon,
            seed: 0,
            epochs_to_full: sched.epochs_to_full,
            growth: sched.growth,
            max_cg: tr.max_cg,
            forcing: tr.forcing,
            pcg_alpha: 0.01,
            svrg_m: SvrgConfig::default().inner_iterations,
            max_outer: tr.max_outer,
            train_fraction: 0.8,
            folds: None,
            bias: None,
            out: None,
            delta0: tr.delta0,
            eta0: tr.eta0,
            eta1: tr.eta1,
            eta2: tr.eta2,
            gamma1: tr.gamma1,
            gamma2: tr.gamma2,
            gamma3: tr.gamma3,
        }
    }

    pub fn resolve(flags: &ConfigOverrides, file: Option<&ConfigOverrides>) -> Result<Self, HarnessError> {
        let empty = ConfigOverrides::default();
        let file = file.unwrap_or(&empty);
        macro_rules! pick {
            ($field:ident) => {
                flags.$field.clone().or_else(|| file.$field.clone())
            };
        }
        let data = pick!(data).ok_or_else(|| HarnessError::Usage("--data is required".into()))?;
        let mut cfg = ExperimentConfig::new(data);
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = pick!($field) {
                    cfg.$target = v;
                }
            )*};
        }
        set!(loss => loss, method => method, lambda => lambda, eps => epsilon, max_cg => max_cg, seed => seed,
            init_frac => init_frac, epochs_to_full => epochs_to_full, growth => growth, pcg_alpha => pcg_alpha,
            svrg_m => svrg_m, train_fraction => train_fraction, max_outer => max_outer, forcing => forcing,
            eta0 => eta0, eta1 => eta1, eta2 => eta2, gamma1 => gamma1, gamma2 => gamma2, gamma3 => gamma3);
        cfg.folds = pick!(folds);
        cfg.bias = pick!(bias);
        cfg.out = pick!(out);
        cfg.delta0 = pick!(delta0);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let usage = |m: String| Err(HarnessError::Usage(m));
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return usage(format!("--train-fraction {} must lie in (0, 1]", self.train_fraction));
        }
        if matches!(self.folds, Some(k) if k < 2) {
            return usage("--folds must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.pcg_alpha) {
            return usage(format!("--pcg-alpha {} must lie in [0, 1]", self.pcg_alpha));
        }
        if self.svrg_m == 0 {
            return usage("--svrg-m must be >= 1".into());
        }
        if matches!(self.bias, Some(b) if !b.is_finite()) {
            return usage("--bias must be finite".into());
        }
        let to_usage = |e: OptimError| HarnessError::Usage(e.to_string());
        self.trust_region().validate().map_err(to_usage)?;
        self.schedule().validate().map_err(to_usage)?;
        Ok(())
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            eta0: self.eta0,
            eta1: self.eta1,
            eta2: self.eta2,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            gamma3: self.gamma3,
            delta0: self.delta0,
            forcing: self.forcing,
            max_cg: self.max_cg,
            epsilon: self.epsilon,
            max_outer: self.max_outer,
        }
    }

    pub fn schedule(&self) -> SubsampleSchedule {
        SubsampleSchedule {
            initial_fraction: self.init_frac,
            growth: self.growth,
            epochs_to_full: self.epochs_to_full,
        }
    }

    /// Trace file for a single run.
    pub fn trace_path(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let stem = self.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            PathBuf::from(format!("{stem}-{}.csv", self.method))
        })
    }
}

/// Reads LibSVM text, transparently decompressing gzip input.
pub fn load_dataset(path: &Path, bias: Option<f64>) -> Result<SparseDataset, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let gz = reader.fill_buf().map_err(|e| HarnessError::io(path, e))?.starts_with(&[0x1f, 0x8b]);
    let parsed = if gz {
        parse_libsvm(BufReader::new(MultiGzDecoder::new(reader)), None)
    } else {
        parse_libsvm(reader, None)
    };
    let data = parsed.map_err(|source| HarnessError::Data {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match bias {
        Some(b) => data.with_bias(b),
        None => data,
    })
}

/// SHA-256 of the canonical LibSVM rendering, as lowercase hex.
pub fn dataset_hash(data: &SparseDataset) -> String {
    let digest = Sha256::digest(data.to_libsvm_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fraction of points with `sign(wᵀx) = y`, where `sign(0) = +1`.
/// NaN for an empty dataset.
pub fn accuracy(w: &[f64], data: &SparseDataset) -> f64 {
    let n = data.n_points();
    let correct = (0..n)
        .filter(|&i| {
            let predicted = if data.row(i).dot(w) >= 0.0 { 1.0 } else { -1.0 };
            predicted == data.label(i)
        })
        .count();
    correct as f64 / n as f64
}

/// Train/test split per the config (`train_fraction = 1` yields no test set).
pub fn split(cfg: &ExperimentConfig, data: &SparseDataset) -> Result<(SparseDataset, Option<SparseDataset>), HarnessError> {
    if cfg.train_fraction >= 1.0 {
        return Ok((data.clone(), None));
    }
    let (train, test) = split_train_test(data, cfg.train_fraction, cfg.seed).map_err(|source| HarnessError::Data {
        path: cfg.data.clone(),
        source,
    })?;
    Ok((train, Some(test)))
}

/// Runs the configured method on `train`, monitoring accuracy on `test`.
pub fn run_method(
    cfg: &ExperimentConfig,
    train: &SparseDataset,
    test: Option<&SparseDataset>,
) -> Result<RunOutput, HarnessError> {
    let lambda = cfg.lambda.resolve(train.n_points());
    let model = LossModel::new(cfg.loss, lambda, train)?;
    let monitor = test.map(|t| move |w: &[f64]| accuracy(w, t));
    let opts = RunOptions {
        test_accuracy: monitor.as_ref().map(|f| f as &(dyn Fn(&[f64]) -> f64 + Sync)),
        ..Default::default()
    };
    let tr = cfg.trust_region();
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = match cfg.method {
        Method::Tron => run_tron(&model, &tr, Some(cfg.pcg_alpha), &opts),
        Method::Stron => run_stron(&model, &tr, &schedule, SubproblemSolver::Cg, &mut rng, &opts),
        Method::StronPcg => run_stron(
            &model,
            &tr,
            &schedule,
            SubproblemSolver::Pcg { alpha: cfg.pcg_alpha },
            &mut rng,
            &opts,
        ),
        Method::StronSvrg => run_stron_svrg(
            &model,
            &tr,
            &schedule,
            &SvrgConfig {
                inner_iterations: cfg.svrg_m,
            },
            &mut rng,
            &opts,
        ),
        Method::NewtonCg => run_newton_cg(&model, &tr, &schedule, &mut rng, &opts),
    }?;
    Ok(out)
}

pub const TRACE_COLUMNS: [&str; 13] = [
    "outer_iteration",
    "elapsed_seconds",
    "effective_data_passes",
    "subsample_size",
    "function_value",
    "gradient_norm",
    "cg_iterations",
    "rho",
    "delta",
    "accepted",
    "test_accuracy",
    "hv_products",
    "rows_touched",
];

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Writes the trace, with an optional trailing `gap` column.
pub fn write_trace_csv<W: Write>(out: W, trace: &RunTrace, gap: Option<&[f64]>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = TRACE_COLUMNS.to_vec();
    if gap.is_some() {
        header.push("gap");
    }
    w.write_record(&header)?;
    for (k, r) in trace.rows.iter().enumerate() {
        let mut rec = vec![
            r.outer_iteration.to_string(),
            fmt_f64(r.elapsed_seconds),
            fmt_f64(r.effective_data_passes),
            r.subsample_size.to_string(),
            fmt_f64(r.function_value),
            fmt_f64(r.gradient_norm),
            r.cg_iterations.to_string(),
            fmt_opt(r.rho),
            fmt_opt(r.delta),
            r.accepted.to_string(),
            fmt_opt(r.test_accuracy),
            r.hv_products.to_string(),
            r.rows_touched.to_string(),
        ];
        if let Some(g) = gap {
            rec.push(fmt_f64(g[k]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_csv_string(trace: &RunTrace) -> String {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, trace, None).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub trace: RunTrace,
    pub gap: Option<Vec<f64>>,
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<TraceTable, HarnessError> {
    let bad = |m: String| HarnessError::Format(m);
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let has_gap = match header.len() {
        13 => false,
        14 if header[13] == "gap" => true,
        _ => return Err(bad(format!("unexpected trace header {header:?}"))),
    };
    if header[..13] != TRACE_COLUMNS {
        return Err(bad(format!("unexpected trace header {header:?}")));
    }
    let mut rows = Vec::new();
    let mut gap = has_gap.then(Vec::new);
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, HarnessError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: column {} is not a number", line + 1, TRACE_COLUMNS[i])))
        };
        let int = |i: usize| -> Result<usize, HarnessError> {
            field(i)
                .parse::<usize>()
                .map_err(|_| bad(format!("row {}: column {} is not an integer", line + 1, TRACE_COLUMNS[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>, HarnessError> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(TraceRow {
            outer_iteration: int(0)?,
            elapsed_seconds: num(1)?,
            effective_data_passes: num(2)?,
            subsample_size: int(3)?,
            function_value: num(4)?,
            gradient_norm: num(5)?,
            cg_iterations: int(6)?,
            rho: opt(7)?,
            delta: opt(8)?,
            accepted: field(9)
                .parse()
                .map_err(|_| bad(format!("row {}: accepted must be true or false", line + 1)))?,
            test_accuracy: opt(10)?,
            hv_products: int(11)?,
            rows_touched: int(12)?,
        });
        if let Some(g) = gap.as_mut() {
            g.push(
                field(13)
                    .parse()
                    .map_err(|_| bad(format!("row {}: gap is not a number", line + 1)))?,
            );
        }
    }
    Ok(TraceTable {
        trace: RunTrace { rows },
        gap,
    })
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Converged => "converged",
        StopReason::MaxIterations => "max-iterations",
        StopReason::Stalled => "stalled",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub loss: LossKind,
    pub dataset_hash: String,
    pub lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub outer_iterations: usize,
    pub effective_data_passes: f64,
    pub final_function_value: f64,
    pub gradient_ratio: f64,
    pub test_accuracy: Option<f64>,
    pub stop: String,
    pub line_search_failures: usize,
    pub trace_file: Option<PathBuf>,
    pub config: serde_json::Value,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, train: &SparseDataset, test: Option<&SparseDataset>, out: &RunOutput) -> Self {
        let last = out.trace.last();
        Self {
            method: cfg.method,
            loss: cfg.loss,
            dataset_hash: dataset_hash(train),
            lambda: cfg.lambda.resolve(train.n_points()),
            n_train: train.n_points(),
            n_test: test.map_or(0, SparseDataset::n_points),
            outer_iterations: last.map_or(0, |r| r.outer_iteration),
            effective_data_passes: last.map_or(0.0, |r| r.effective_data_passes),
            final_function_value: last.map_or(f64::NAN, |r| r.function_value),
            gradient_ratio: out.gradient_ratio(),
            test_accuracy: test.map(|t| accuracy(&out.w, t)),
            stop: stop_name(out.stop).to_owned(),
            line_search_failures: out.events.len(),
            trace_file: None,
            config: serde_json::to_value(cfg).expect("config serializes"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn write_trace_file(path: &Path, trace: &RunTrace, gap: Option<&[f64]>) -> Result<(), HarnessError> {
    let file = create(path)?;
    write_trace_csv(file, trace, gap).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::Format(format!("{}: {other:?}", path.display())),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut file = create(path)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| HarnessError::io(path, e.into()))?;
    writeln!(file).and_then(|_| file.flush()).map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// Summary sidecar of a trace file.
pub fn summary_path(trace: &Path) -> PathBuf {
    trace.with_extension("json")
}

/// Single split: run, write the trace and its summary.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let data = load_dataset(&cfg.data, cfg.bias)?;
    let (train, test) = split(cfg, &data)?;
    let out = run_method(cfg, &train, test.as_ref())?;
    let path = cfg.trace_path();
    write_trace_file(&path, &out.trace, None)?;
    let mut summary = RunSummary::new(cfg, &train, test.as_ref(), &out);
    summary.trace_file = Some(path.clone());
    write_json(&summary_path(&path), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub method: Method,
    pub folds: Vec<RunSummary>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over folds.
    pub std_accuracy: f64,
    pub mean_effective_data_passes: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every fold concurrently on an already loaded dataset.
pub fn crossval_runs(
    cfg: &ExperimentConfig,
    data: &SparseDataset,
    k: usize,
) -> Result<Vec<(RunOutput, RunSummary)>, HarnessError> {
    let folds = k_fold(data, k, cfg.seed).map_err(|source| HarnessError::Data {
        path: cfg.data.clone(),
        source,
    })?;
    let parts: Vec<(SparseDataset, SparseDataset)> = folds
        .iter()
        .map(|(tr, te)| (data.select(&tr.to_vec()), data.select(&te.to_vec())))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|(train, test)| {
                scope.spawn(move || {
                    let out = run_method(cfg, train, Some(test))?;
                    let summary = RunSummary::new(cfg, train, Some(test), &out);
                    Ok((out, summary))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    })
}

/// k-fold cross-validation: one trace per fold plus an aggregate summary.
pub fn cmd_crossval(cfg: &ExperimentConfig, k: usize) -> Result<CrossvalSummary, HarnessError> {
    let data = load_dataset(&cfg.data, cfg.bias)?;
    let runs = crossval_runs(cfg, &data, k)?;
    let base = cfg.trace_path();
    let mut folds = Vec::with_capacity(k);
    for (i, (out, mut summary)) in runs.into_iter().enumerate() {
        let path = base.with_extension(format!("fold{i}.csv"));
        write_trace_file(&path, &out.trace, None)?;
        summary.trace_file = Some(path);
        folds.push(summary);
    }
    let accs: Vec<f64> = folds.iter().filter_map(|s| s.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let passes: Vec<f64> = folds.iter().map(|s| s.effective_data_passes).collect();
    let summary = CrossvalSummary {
        method: cfg.method,
        folds,
        mean_accuracy,
        std_accuracy,
        mean_effective_data_passes: mean_std(&passes).0,
    };
    write_json(&base.with_extension("summary.json"), &summary)?;
    Ok(summary)
}

/// High-accuracy solution used as `w*` for optimality gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    pub dataset_hash: String,
    pub loss: LossKind,
    pub lambda: f64,
    pub f_star: f64,
    pub w_star: Vec<f64>,
    pub achieved_gradient_ratio: f64,
    /// Whether `achieved_gradient_ratio ≤ REFERENCE_REQUIRED_RATIO`.
    pub tolerance_reached: bool,
    pub outer_iterations: usize,
}

pub const REFERENCE_EPSILON: f64 = 1e-12;
pub const REFERENCE_REQUIRED_RATIO: f64 = 1e-10;
pub const REFERENCE_MAX_OUTER: usize = 5000;

/// Full-batch TRON to `‖g‖ ≤ 1e-12·‖g₀‖`. When that is not reached, the
/// best iterate is returned with `tolerance_reached` reflecting the
/// achieved ratio.
pub fn compute_reference_optimum(model: &LossModel<'_>) -> Result<ReferenceOptimum, HarnessError> {
    let cfg = TrustRegionConfig {
        epsilon: REFERENCE_EPSILON,
        max_outer: REFERENCE_MAX_OUTER,
        ..Default::default()
    };
    let out = run_tron(model, &cfg, Some(0.01), &RunOptions::default())?;
    let n = model.data().n_points();
    let f_star = model.value(&out.w, &IndexSubset::full(n))?;
    let ratio = out.gradient_ratio();
    Ok(ReferenceOptimum {
        dataset_hash: dataset_hash(model.data()),
        loss: model.kind(),
        lambda: model.lambda(),
        f_star,
        achieved_gradient_ratio: ratio,
        tolerance_reached: ratio <= REFERENCE_REQUIRED_RATIO,
        outer_iterations: out.trace.last().map_or(0, |r| r.outer_iteration),
        w_star: out.w,
    })
}

/// Cache file beside the dataset, keyed by loss, split hash and λ.
pub fn reference_cache_path(data: &Path, loss: LossKind, hash: &str, lambda: f64) -> PathBuf {
    let name = data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{name}.ref-{loss}-{}-{lambda:e}.json", &hash[..16]))
}

/// Computes the reference optimum for the configured training split, reusing
/// a cached one when its hash, loss and λ match. Returns the file written.
pub fn cmd_reference(cfg: &ExperimentConfig) -> Result<(ReferenceOptimum, PathBuf, bool), HarnessError> {
    let data = load_dataset(&cfg.data, cfg.bias)?;
    let (train, _) = split(cfg, &data)?;
    let lambda = cfg.lambda.resolve(train.n_points());
    let hash = dataset_hash(&train);
    let path = cfg
        .out
        .clone()
        .unwrap_or_else(|| reference_cache_path(&cfg.data, cfg.loss, &hash, lambda));
    if path.exists() {
        if let Ok(cached) = read_json::<ReferenceOptimum>(&path) {
            if cached.dataset_hash == hash && cached.loss == cfg.loss && cached.lambda.to_bits() == lambda.to_bits() {
                return Ok((cached, path, true));
            }
        }
    }
    let model = LossModel::new(cfg.loss, lambda, &train)?;
    let reference = compute_reference_optimum(&model)?;
    write_json(&path, &reference)?;
    Ok((reference, path, false))
}

/// `max(F_k − f*, 0)` per row.
pub fn optimality_gaps(trace: &RunTrace, f_star: f64) -> Vec<f64> {
    trace.rows.iter().map(|r| (r.function_value - f_star).max(0.0)).collect()
}

/// Appends a `gap` column to a trace after checking that its summary names
/// the same training split, loss and λ as the reference.
pub fn cmd_gapify(trace_path: &Path, reference_path: &Path, out: Option<&Path>) -> Result<PathBuf, HarnessError> {
    let summary: RunSummary = read_json(&summary_path(trace_path))?;
    let reference: ReferenceOptimum = read_json(reference_path)?;
    if summary.dataset_hash != reference.dataset_hash {
        return Err(HarnessError::Mismatch(format!(
            "trace was recorded on dataset {} but the reference was computed on {}",
            summary.dataset_hash, reference.dataset_hash
        )));
    }
    if summary.loss != reference.loss || summary.lambda.to_bits() != reference.lambda.to_bits() {
        return Err(HarnessError::Mismatch(format!(
            "trace uses {} with lambda {:e}, reference uses {} with lambda {:e}",
            summary.loss, summary.lambda, reference.loss, reference.lambda
        )));
    }
    let file = File::open(trace_path).map_err(|e| HarnessError::io(trace_path, e))?;
    let table = read_trace_csv(BufReader::new(file))?;
    let gaps = optimality_gaps(&table.trace, reference.f_star);
    let dest = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trace_path.with_extension("gap.csv"));
    write_trace_file(&dest, &table.trace, Some(&gaps))?;
    Ok(dest)
}

/// Runs several methods on one split concurrently. Traces go to
/// `out_dir/<method>.csv` with summaries beside them.
pub fn cmd_compare(cfg: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<Vec<RunSummary>, HarnessError> {
    let data = load_dataset(&cfg.data, cfg.bias)?;
    let (train, test) = split(cfg, &data)?;
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .map(|&method| ExperimentConfig {
            method,
            out: Some(out_dir.join(format!("{method}.csv"))),
            ..cfg.clone()
        })
        .collect();
    let results: Vec<Result<RunOutput, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                let (train, test) = (&train, test.as_ref());
                scope.spawn(move || run_method(c, train, test))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let mut summaries = Vec::with_capacity(methods.len());
    for (c, res) in configs.iter().zip(results) {
        let out = res?;
        let path = c.trace_path();
        write_trace_file(&path, &out.trace, None)?;
        let mut s = RunSummary::new(c, &train, test.as_ref(), &out);
        s.trace_file = Some(path.clone());
        write_json(&summary_path(&path), &s)?;
        summaries.push(s);
    }
    write_json(&out_dir.join("summary.json"), &summaries)?;
    Ok(summaries)
}

/// Linearly separable data: a hidden `w` labels sparse rows with entries in
/// `[-1, 1]`, keeping only points with margin at least `0.1·‖w‖`.
pub fn synthetic_separable(n_points: usize, n_features: usize, seed: u64) -> SparseDataset {
    assert!(n_points >= 2 && n_features >= 1, "need at least 2 points and 1 feature");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let min_margin = 0.1 * truth.iter().map(|x| x * x).sum::<f64>().sqrt();
    let density = (10.0 / n_features as f64).clamp(0.05, 1.0);
    let mut rows = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    while rows.len() < n_points {
        let mut row: Vec<(u32, f64)> = Vec::new();
        for j in 0..n_features {
            if rng.random_bool(density) {
                row.push((j as u32, rng.random_range(-1.0..1.0)));
            }
        }
        let margin: f64 = row.iter().map(|&(j, v)| truth[j as usize] * v).sum();
        if margin.abs() < min_margin {
            continue;
        }
        // alternate classes so both are always present
        let want_positive = rows.len() % 2 == 0;
        let (row, margin) = if (margin > 0.0) == want_positive {
            (row, margin)
        } else {
            (row.into_iter().map(|(j, v)| (j, -v)).collect(), -margin)
        };
        labels.push(if margin > 0.0 { 1.0 } else { -1.0 });
        rows.push(row);
    }
    SparseDataset::from_rows(rows, labels, n_features).expect("generator produces valid rows")
}
