//! Run configuration and the commands behind the `selfvalnet` binary.

pub mod gradsuite;
pub mod weights;

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorgeom::AnchorConfig;
use crate::diffcore::DiffError;
use crate::evalkit::{baseline_report, BaselineReport, EvalError, MetricsReport};
use crate::netmodel::{HeadPlacement, Model, ModelKind, NetConfig, NetError, QueryFrame, Streams, Widths};
use crate::scenesim::{checksums, write_dataset, DiskSplit, SampleSource, SimConfig, SimError, Split, SynthSplit};
use crate::selfval::{ValidationKind, ValidationMode};
use crate::training::{evaluate, train, EpochRecord, LossWeights, MatchStrategy, TrainError, TrainOutcome, TrainSchedule, TrainSetup};

pub use gradsuite::{run_suite, SuiteOptions, SuiteReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("file format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("gradient check failed:\n{0}")]
    GradCheck(String),
    #[error("{0}")]
    Other(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Format(_) => 3,
            Self::Shape(_) => 4,
            Self::Divergence(_) => 5,
            Self::GradCheck(_) => 6,
            Self::Other(_) => 1,
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::Placement { .. } => Self::Config(e.to_string()),
            SimError::Io { path, source } => Self::Io { path, source },
            _ => Self::Format(e.to_string()),
        }
    }
}

impl From<NetError> for HarnessError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::InvalidConfig(_) | NetError::Geom(_) => Self::Config(e.to_string()),
            NetError::InputMismatch(_) | NetError::Diff(_) => Self::Shape(e.to_string()),
        }
    }
}

impl From<DiffError> for HarnessError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::NonFinite { .. } => Self::Divergence(e.to_string()),
            _ => Self::Shape(e.to_string()),
        }
    }
}

impl From<EvalError> for HarnessError {
    fn from(e: EvalError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Sim(s) => s.into(),
            TrainError::Diff(d) => d.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Divergence { .. } | TrainError::NonFiniteGradient { .. } => Self::Divergence(e.to_string()),
            TrainError::ParamShape { .. } => Self::Shape(e.to_string()),
            TrainError::Geom(_) | TrainError::EmptyPositives | TrainError::InvalidSchedule(_) => Self::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Dataset directory written by `synth`; clips are rendered on the fly when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_count: 2000, test_count: 200, dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub grids: Vec<usize>,
    pub anchors_per_cell: Vec<usize>,
    pub scale_range: (f64, f64),
    pub stem: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub hidden: usize,
    pub head: HeadPlacement,
    pub query: QueryFrame,
    pub streams: Streams,
}

impl Default for NetSection {
    fn default() -> Self {
        let a = AnchorConfig::toy();
        let w = Widths::default();
        Self {
            grids: a.grids,
            anchors_per_cell: a.anchors_per_cell,
            scale_range: a.scale_range,
            stem: w.stem,
            spatial: w.spatial,
            temporal: w.temporal,
            hidden: w.hidden,
            head: HeadPlacement::Mid,
            query: QueryFrame::Middle,
            streams: Streams::RgbFlow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: MatchStrategy,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Validation mode while training.
    pub mode: ValidationKind,
    /// Validation mode for test-time evaluation.
    pub test_mode: ValidationKind,
    pub stack_depth: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        let w = LossWeights::default();
        Self {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            l2: s.l2,
            epochs: s.epochs,
            batch_size: s.batch_size,
            strategy: MatchStrategy::OneBest,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            mode: ValidationKind::FullSoft,
            test_mode: ValidationKind::FullHard,
            stack_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Training runs executed concurrently.
    pub parallel: usize,
    /// Also run the matching-strategy and head-placement variants.
    pub extras: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], parallel: 1, extras: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub out: PathBuf,
    pub baseline: ModelKind,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub net: NetSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            baseline: ModelKind::Mrnet,
            sim: SimConfig::default(),
            data: DataConfig::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim.validate()?;
        self.net_config().validate()?;
        self.schedule().validate()?;
        if self.train.stack_depth == 0 {
            return Err(HarnessError::Config("stack_depth must be at least 1".into()));
        }
        if self.ablate.parallel == 0 {
            return Err(HarnessError::Config("ablate.parallel must be at least 1".into()));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        let n = &self.net;
        NetConfig {
            resolution: self.sim.resolution,
            clip_len: self.sim.clip_len,
            classes: self.sim.classes,
            anchors: AnchorConfig::with_grids(self.sim.resolution, n.grids.clone(), n.anchors_per_cell.clone(), n.scale_range),
            widths: Widths { stem: n.stem, spatial: n.spatial, temporal: n.temporal, hidden: n.hidden },
            head: n.head,
            query: n.query,
            streams: n.streams,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.train;
        TrainSchedule {
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            l2: t.l2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
        }
    }

    pub fn mode(&self, kind: ValidationKind) -> ValidationMode {
        ValidationMode::stacked(kind, self.train.stack_depth)
    }

    /// Training setup; baselines always train and test without validation.
    pub fn setup(&self) -> TrainSetup {
        let t = &self.train;
        let (train_mode, test_mode) = match self.baseline {
            ModelKind::Mrnet => (t.mode, t.test_mode),
            _ => (ValidationKind::None, ValidationKind::None),
        };
        TrainSetup {
            net: self.net_config(),
            kind: self.baseline,
            train_mode: self.mode(train_mode),
            test_mode: self.mode(test_mode),
            strategy: t.strategy,
            weights: LossWeights { alpha: t.alpha, beta: t.beta, gamma: t.gamma },
            schedule: self.schedule(),
        }
    }
}

pub type Source = Box<dyn SampleSource + Send>;

/// Train and test splits: from `data.dir` when set, rendered on demand otherwise.
pub fn load_splits(cfg: &RunConfig) -> Result<(Source, Source), HarnessError> {
    match &cfg.data.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(HarnessError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
            }
            let tr = DiskSplit::open(&dir.join(Split::Train.as_str()))?;
            let te = DiskSplit::open(&dir.join(Split::Test.as_str()))?;
            if tr.manifest.config.resolution != cfg.sim.resolution || tr.manifest.config.clip_len != cfg.sim.clip_len {
                return Err(HarnessError::Shape(format!(
                    "dataset has {:?} x {} clips but the config expects {:?} x {}",
                    tr.manifest.config.resolution, tr.manifest.config.clip_len, cfg.sim.resolution, cfg.sim.clip_len
                )));
            }
            Ok((Box::new(tr), Box::new(te)))
        }
        None => Ok((
            Box::new(SynthSplit::new(cfg.sim.clone(), Split::Train, cfg.data.train_count)?),
            Box::new(SynthSplit::new(cfg.sim.clone(), Split::Test, cfg.data.test_count)?),
        )),
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
    /// Blob checksums per split.
    pub checksums: Vec<(String, String)>,
}

/// Writes `out/train` and `out/test`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary, HarnessError> {
    cfg.sim.validate()?;
    let mut sums = Vec::new();
    let mut counts = [0; 2];
    for (k, (split, n)) in [(Split::Train, cfg.data.train_count), (Split::Test, cfg.data.test_count)].into_iter().enumerate() {
        let src = SynthSplit::new(cfg.sim.clone(), split, n)?;
        let m = write_dataset(&src, &cfg.sim, &out.join(split.as_str()))?;
        counts[k] = m.count;
        sums.extend(checksums(&m).into_iter().map(|(f, s)| (format!("{}/{f}", split.as_str()), s)));
    }
    Ok(SynthSummary { train: counts[0], test: counts[1], checksums: sums })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
    pub baselines: BaselineReport,
    pub weights: PathBuf,
}

/// Trains per `cfg`, writing `weights.svnw`, `train_log.jsonl` and `metrics.txt` under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    let (tr, te) = load_splits(cfg)?;
    create_dir(&cfg.out)?;
    let setup = cfg.setup();
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
    let mut io_err = None;
    let outcome = train(&setup, tr.as_ref(), te.as_ref(), |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
        progress(r);
    })?;
    if let Some(e) = io_err {
        return Err(HarnessError::io(&log_path, e));
    }
    let weights = cfg.out.join("weights.svnw");
    weights::save(&outcome.model, &weights)?;
    let eval = evaluate(&outcome.model, te.as_ref(), setup.test_mode)?;
    let baselines = baseline_report(&eval.records)?;
    let text = format!(
        "kind = {}\ntrain_mode = {}\ntest_mode = {}\nbest_epoch = {}\n{}\n{}\n",
        setup.kind, setup.train_mode.kind, setup.test_mode.kind, outcome.best_epoch, eval.report, baselines
    );
    write_file(&cfg.out.join("metrics.txt"), &text)?;
    Ok(TrainSummary { outcome, report: eval.report, baselines, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mode: ValidationMode,
    pub report: MetricsReport,
    pub baselines: BaselineReport,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode.kind)?;
        writeln!(f, "{}", self.report)?;
        write!(f, "{}", self.baselines)
    }
}

/// Evaluates stored weights on the test split of `cfg`.
pub fn cmd_eval(cfg: &RunConfig, weights_path: &Path, mode: ValidationKind) -> Result<EvalSummary, HarnessError> {
    cfg.validate()?;
    let model = weights::load(weights_path)?;
    let expected = cfg.net_config();
    if model.config != expected {
        return Err(HarnessError::Shape(format!(
            "weights were trained for {:?} input, {} frames, {} classes, grids {:?}; config asks for {:?}, {}, {}, {:?}",
            model.config.resolution,
            model.config.clip_len,
            model.config.classes,
            model.config.anchors.grids,
            expected.resolution,
            expected.clip_len,
            expected.classes,
            expected.anchors.grids
        )));
    }
    let (_, te) = load_splits(cfg)?;
    let mode = cfg.mode(mode);
    let eval = evaluate(&model, te.as_ref(), mode)?;
    let baselines = baseline_report(&eval.records)?;
    Ok(EvalSummary { mode, report: eval.report, baselines })
}

/// Test-time modes scored for every trained model in the ablation.
pub const ABLATION_TEST_MODES: [ValidationKind; 4] = [ValidationKind::FullHard, ValidationKind::FullSoft, ValidationKind::Half, ValidationKind::None];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Training variant, such as `sv` or `no-sv`.
    pub variant: String,
    pub seed: u64,
    pub test_mode: ValidationKind,
    pub report: MetricsReport,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn values(&self, variant: &str, test_mode: ValidationKind) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant && r.test_mode == test_mode).map(|r| r.report.m_acc).collect()
    }

    /// Median mAcc over seeds, if any run matches.
    pub fn median(&self, variant: &str, test_mode: ValidationKind) -> Option<f64> {
        let mut v = self.values(variant, test_mode);
        (!v.is_empty()).then(|| median(&mut v))
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }

    /// Tab-separated per-run data.
    pub fn tsv(&self) -> String {
        let mut s = String::from("variant\tseed\ttest_mode\tacc_50\tacc_75\tm_acc\tbest_epoch\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}", r.variant, r.seed, r.test_mode, r.report.acc_50, r.report.acc_75, r.report.m_acc, r.best_epoch);
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "train \\ test")?;
        for m in ABLATION_TEST_MODES {
            write!(f, " {:>10}", m.as_str())?;
        }
        writeln!(f)?;
        for v in self.variants() {
            write!(f, "{v:<16}")?;
            for m in ABLATION_TEST_MODES {
                match self.median(&v, m) {
                    Some(x) => write!(f, " {:>10.4}", x)?,
                    None => write!(f, " {:>10}", "-")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "(median mAcc over seeds)")
    }
}

/// One training job of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationJob {
    pub variant: String,
    pub seed: u64,
    pub setup: TrainSetup,
}

pub fn ablation_jobs(cfg: &RunConfig) -> Vec<AblationJob> {
    let mut jobs = Vec::new();
    let base = RunConfig { baseline: ModelKind::Mrnet, ..cfg.clone() };
    for &seed in &cfg.ablate.seeds {
        let c = RunConfig { seed, ..base.clone() };
        let sv = c.setup();
        let mut no = sv.clone();
        no.train_mode = ValidationMode::new(ValidationKind::None);
        no.test_mode = ValidationMode::new(ValidationKind::None);
        jobs.push(AblationJob { variant: "sv".into(), seed, setup: sv.clone() });
        jobs.push(AblationJob { variant: "no-sv".into(), seed, setup: no });
        if cfg.ablate.extras {
            let mut multi = sv.clone();
            multi.strategy = match sv.strategy {
                MatchStrategy::OneBest => MatchStrategy::Multi,
                MatchStrategy::Multi => MatchStrategy::OneBest,
            };
            jobs.push(AblationJob { variant: format!("sv {}", multi.strategy), seed, setup: multi });
            let mut late = sv.clone();
            late.net.head = match sv.net.head {
                HeadPlacement::Mid => HeadPlacement::Late,
                HeadPlacement::Late => HeadPlacement::Mid,
            };
            jobs.push(AblationJob { variant: format!("sv head {}", late.net.head), seed, setup: late });
        }
    }
    jobs
}

/// Trains every job, then scores each model under every test mode.
pub fn run_ablation(
    cfg: &RunConfig,
    train_set: &dyn SampleSource,
    test_set: &dyn SampleSource,
    progress: &(dyn Fn(&AblationJob, &EpochRecord) + Sync),
) -> Result<AblationTable, HarnessError> {
    let jobs = ablation_jobs(cfg);
    let run = |job: &AblationJob| -> Result<Vec<AblationRow>, HarnessError> {
        let out = train(&job.setup, train_set, test_set, |r| progress(job, r))?;
        let mut rows = Vec::new();
        for m in ABLATION_TEST_MODES {
            let mode = ValidationMode::stacked(m, job.setup.test_mode.stack_depth);
            let e = evaluate(&out.model, test_set, mode)?;
            rows.push(AblationRow { variant: job.variant.clone(), seed: job.seed, test_mode: m, report: e.report, best_epoch: out.best_epoch });
        }
        Ok(rows)
    };
    let results: Vec<Result<Vec<AblationRow>, HarnessError>> = if cfg.ablate.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.ablate.parallel)
            .build()
            .map_err(|e| HarnessError::Other(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut table = AblationTable::default();
    for r in results {
        table.rows.extend(r?);
    }
    Ok(table)
}

/// Runs the grid and writes `ablation.txt` and `ablation.tsv` under `cfg.out`.
pub fn cmd_ablate(cfg: &RunConfig, progress: &(dyn Fn(&AblationJob, &EpochRecord) + Sync)) -> Result<AblationTable, HarnessError> {
    cfg.validate()?;
    let (tr, te) = load_splits(cfg)?;
    let table = run_ablation(cfg, tr.as_ref(), te.as_ref(), progress)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("ablation.txt"), &format!("{table}\n"))?;
    write_file(&cfg.out.join("ablation.tsv"), &table.tsv())?;
    Ok(table)
}

/// Runs the gradient-check suite; an error when any check fails.
pub fn cmd_gradcheck(options: &SuiteOptions) -> Result<SuiteReport, HarnessError> {
    let report = run_suite(options)?;
    if report.pass() {
        Ok(report)
    } else {
        Err(HarnessError::GradCheck(report.to_string()))
    }
}

/// Loads weights for callers that only need the model.
pub fn load_model(path: &Path) -> Result<Model, HarnessError> {
    weights::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.net_config(), NetConfig::toy(5));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[train]\nepochs = 3\nmode = \"half\"\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.mode, ValidationKind::Half);
        assert_eq!(c.data.train_count, 2000);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        for text in ["[train]\nepochs = \"x\"", "bogus = 1", "[sim]\nclasses = 1", "[train]\nmode = \"sideways\""] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }

    #[test]
    fn grid_has_six_mode_combinations_per_seed() {
        let c = RunConfig { ablate: AblateSection { extras: false, ..AblateSection::default() }, ..RunConfig::default() };
        let jobs = ablation_jobs(&c);
        assert_eq!(jobs.len(), 6);
        // two trained variants x three test modes x three seeds
        assert_eq!(jobs.len() * 3, 18);
        assert_eq!(ablation_jobs(&RunConfig::default()).len(), 12);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
