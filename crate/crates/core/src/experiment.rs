//! Reproducible experiment runs: config resolution, replication over seeds,
//! CSV/JSON outputs and SE comparison.
//!
//! A run writes
//!
//! ```text
//! <out>/<experiment>/<hash>/manifest.toml
//! <out>/<experiment>/<hash>/summary.json
//! <out>/<experiment>/<hash>/<variant>/seed-<k>.csv
//! <out>/<experiment>/<hash>/<variant>/se.csv
//! ```
//!
//! where `<hash>` is a digest of the canonical manifest. Running again from
//! `manifest.toml` reproduces every file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    early_stop_offline, early_stop_online, gap_diagnostics, select_candidate, summarize, StopMode,
    Summary,
};
use crate::descent::{
    initial_state, overlap_columns, overlap_values, run_trajectory, write_trajectory_csv,
    Algorithm, DdParams, Init, StepRecord, TrajectoryOptions,
};
use crate::error::{Error, Result};
use crate::mixture::{
    build_signalless_spec, build_two_class_spec, build_xor_spec, MixtureSpec, NoiseKind,
};
use crate::model::{make_model, LossModel};
use crate::quadrature::{EngineConfig, ExpectationEngine};
use crate::seeds;
use crate::state_evolution::{run_state_evolution, write_se_csv, SeInit, SeRecord, SeTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Signalless,
    SignallessCSweep,
    Xor,
    XorEta0Sweep,
    DiscreteNoiseUniversality,
    SeVsEmpirical,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Signalless,
        ExperimentKind::SignallessCSweep,
        ExperimentKind::Xor,
        ExperimentKind::XorEta0Sweep,
        ExperimentKind::DiscreteNoiseUniversality,
        ExperimentKind::SeVsEmpirical,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::Signalless => "signalless",
            ExperimentKind::SignallessCSweep => "signalless-c-sweep",
            ExperimentKind::Xor => "xor",
            ExperimentKind::XorEta0Sweep => "xor-eta0-sweep",
            ExperimentKind::DiscreteNoiseUniversality => "discrete-noise-universality",
            ExperimentKind::SeVsEmpirical => "se-vs-empirical",
        }
    }

    fn is_sweep(self) -> bool {
        matches!(
            self,
            ExperimentKind::SignallessCSweep | ExperimentKind::XorEta0Sweep
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Gd,
    PureDd,
    DampedDd,
    GeneralDd,
}

/// Fully resolved experiment configuration. Every field is present in the
/// manifest; `seeds` lists the replication seeds explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub algorithm: AlgorithmKind,
    pub eta: f64,
    /// Damped DD: `η1 = c η`.
    pub c: f64,
    /// Head step size `γ1` for damped DD.
    pub gamma: f64,
    /// Explicit step sizes for `general-dd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<DdParams>,
    pub c_grid: Vec<f64>,
    pub eta0_grid: Vec<f64>,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    /// Label flip probability of the two-class spec.
    pub flip: f64,
    pub noise: NoiseKind,
    pub model: String,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_head: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_n: Option<usize>,
    /// Also run plain GD with the same step size on the same data.
    pub baseline_gd: bool,
    /// Compute the SE trajectory for each DD variant.
    pub se: bool,
    /// Spacing of the saved iterates used by offline early stopping.
    pub saved_every: usize,
    pub engine: EngineConfig,
}

impl ExperimentConfig {
    /// Defaults for an experiment, taken from the reference figure settings.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            experiment: kind,
            n: 200,
            d: 800,
            steps: 100,
            replications: 20,
            seed: 0,
            seeds: Vec::new(),
            algorithm: AlgorithmKind::PureDd,
            eta: 0.05,
            c: 1.0,
            gamma: 0.05,
            params: None,
            c_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            eta0_grid: vec![1.0, 0.9, 0.8],
            lambda: 4.0,
            lambda_grid: vec![1.0, 4.0, 8.0],
            flip: 0.1,
            noise: NoiseKind::Gaussian,
            model: "linear-mse".into(),
            width: 1,
            fixed_head: None,
            holdout_n: None,
            baseline_gd: false,
            se: false,
            saved_every: 10,
            engine: EngineConfig {
                n_samples: 20_000,
                ..EngineConfig::default()
            },
        };
        match kind {
            ExperimentKind::Signalless => ExperimentConfig {
                replications: 100,
                baseline_gd: true,
                se: true,
                ..base
            },
            ExperimentKind::SignallessCSweep => ExperimentConfig {
                n: 800,
                algorithm: AlgorithmKind::DampedDd,
                ..base
            },
            ExperimentKind::Xor => ExperimentConfig {
                n: 1000,
                d: 1000,
                steps: 200,
                model: "xor-bilinear".into(),
                width: 2,
                baseline_gd: true,
                se: true,
                ..base
            },
            ExperimentKind::XorEta0Sweep => ExperimentConfig {
                n: 1000,
                d: 1000,
                steps: 200,
                algorithm: AlgorithmKind::GeneralDd,
                model: "xor-bilinear".into(),
                width: 2,
                fixed_head: Some(vec![1.0]),
                ..base
            },
            ExperimentKind::DiscreteNoiseUniversality => ExperimentConfig {
                n: 800,
                d: 784,
                lambda: 1.0,
                model: "mlp2-tanh".into(),
                width: 4,
                ..base
            },
            ExperimentKind::SeVsEmpirical => ExperimentConfig {
                n: 4000,
                d: 4000,
                steps: 20,
                replications: 10,
                se: true,
                ..base
            },
        }
    }

    /// Preset for the experiment named in `text`, overlaid with `text` and
    /// then with `key=value` overrides. Seeds are resolved.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text)?;
        let mut over = toml::Table::new();
        for kv in overrides {
            let (key, value) = parse_override(kv)?;
            set_path(&mut over, &key, value)?;
        }
        let kind_value = over
            .get("experiment")
            .or_else(|| file.get("experiment"))
            .ok_or_else(|| Error::config("missing `experiment`"))?;
        let kind: ExperimentKind = kind_value
            .as_str()
            .ok_or_else(|| Error::config("`experiment` must be a string"))?
            .parse()?;
        let mut table = toml::Table::try_from(Self::preset(kind))?;
        merge(&mut table, file);
        merge(&mut table, over);
        let cfg: ExperimentConfig = table.try_into()?;
        cfg.resolved()
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::load(&fs::read_to_string(path)?, overrides)
    }

    /// Validate and fill `seeds` from `seed` when it is empty.
    pub fn resolved(mut self) -> Result<Self> {
        if self.seeds.is_empty() {
            self.seeds = (0..self.replications as u64)
                .map(|k| seeds::derive(self.seed, &[seeds::tag::REPLICATION, k]) >> 1)
                .collect();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::config(format!("{field}: {why}")));
        if self.n == 0 {
            return fail("n", "must be >= 1");
        }
        if self.d == 0 {
            return fail("d", "must be >= 1");
        }
        if self.steps == 0 {
            return fail("steps", "must be >= 1");
        }
        if self.replications == 0 {
            return fail("replications", "must be >= 1");
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.replications {
            return fail("seeds", "length must equal replications");
        }
        if self.seeds.iter().any(|s| *s > i64::MAX as u64) {
            return fail("seeds", "must fit in 63 bits");
        }
        if self.saved_every == 0 {
            return fail("saved_every", "must be >= 1");
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return fail("eta", "must be finite and >= 0");
        }
        match self.experiment {
            ExperimentKind::SignallessCSweep if self.c_grid.is_empty() => {
                return fail("c_grid", "must be nonempty")
            }
            ExperimentKind::XorEta0Sweep if self.eta0_grid.is_empty() => {
                return fail("eta0_grid", "must be nonempty")
            }
            ExperimentKind::Xor if self.lambda_grid.is_empty() => {
                return fail("lambda_grid", "must be nonempty")
            }
            _ => {}
        }
        if self.algorithm == AlgorithmKind::GeneralDd
            && self.params.is_none()
            && self.experiment != ExperimentKind::XorEta0Sweep
        {
            return fail("params", "general-dd needs explicit step sizes");
        }
        make_model(&self.model, self.width)?;
        ExpectationEngine::new(self.engine.clone())?;
        for v in self.variants()? {
            if let Algorithm::Dd(p) = v.algorithm {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Hex digest of the canonical manifest text.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    fn main_algorithm(&self) -> Algorithm {
        match self.algorithm {
            AlgorithmKind::Gd => Algorithm::Gd {
                eta: self.eta,
                gamma: self.eta,
            },
            AlgorithmKind::PureDd => Algorithm::Dd(DdParams::pure(self.eta)),
            AlgorithmKind::DampedDd => {
                Algorithm::Dd(DdParams::damped(self.eta, self.c, self.gamma))
            }
            AlgorithmKind::GeneralDd => {
                Algorithm::Dd(self.params.unwrap_or_else(|| DdParams::pure(self.eta)))
            }
        }
    }

    fn init(&self) -> Init {
        self.fixed_head
            .clone()
            .map_or(Init::Standard, Init::FixedHead)
    }

    fn gd(&self) -> Algorithm {
        Algorithm::Gd {
            eta: self.eta,
            gamma: self.eta,
        }
    }

    /// Build every data distribution and variant of the experiment.
    fn variants(&self) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        let base = |name: String, spec: usize, algorithm: Algorithm| Variant {
            name,
            spec,
            algorithm,
            pure_eta: None,
        };
        let with_gd = |out: &mut Vec<Variant>, name: &str, spec: usize| {
            out.push(base(name.to_string(), spec, self.main_algorithm()));
            if self.baseline_gd && self.algorithm != AlgorithmKind::Gd {
                out.push(base(format!("{name}-gd"), spec, self.gd()));
            }
        };
        match self.experiment {
            ExperimentKind::Signalless | ExperimentKind::SeVsEmpirical => {
                with_gd(&mut out, "main", 0)
            }
            ExperimentKind::Xor => {
                for (i, l) in self.lambda_grid.iter().enumerate() {
                    with_gd(&mut out, &format!("lambda-{l}"), i);
                }
            }
            ExperimentKind::DiscreteNoiseUniversality => {
                with_gd(&mut out, "gaussian", 0);
                with_gd(&mut out, "three-point", 1);
            }
            ExperimentKind::SignallessCSweep => {
                for &c in &self.c_grid {
                    let p = DdParams::damped(self.eta, c, self.gamma);
                    out.push(base(format!("c-{c}"), 0, Algorithm::Dd(p)));
                }
            }
            ExperimentKind::XorEta0Sweep => {
                for &e0 in &self.eta0_grid {
                    let p = DdParams {
                        eta0: e0,
                        eta1: self.eta,
                        gamma0: 1.0,
                        gamma1: 0.0,
                    };
                    out.push(base(format!("eta0-{e0}"), 0, Algorithm::Dd(p)));
                }
            }
        }
        if self.algorithm == AlgorithmKind::PureDd {
            for v in &mut out {
                if matches!(v.algorithm, Algorithm::Dd(_)) {
                    v.pure_eta = Some(self.eta);
                }
            }
        }
        Ok(out)
    }

    fn specs(&self) -> Result<Vec<MixtureSpec>> {
        Ok(match self.experiment {
            ExperimentKind::Signalless
            | ExperimentKind::SignallessCSweep
            | ExperimentKind::SeVsEmpirical => {
                vec![build_signalless_spec(self.d)?.with_noise(self.noise)]
            }
            ExperimentKind::Xor => self
                .lambda_grid
                .iter()
                .map(|&l| Ok(build_xor_spec(self.d, l)?.with_noise(self.noise)))
                .collect::<Result<_>>()?,
            ExperimentKind::XorEta0Sweep => {
                vec![build_xor_spec(self.d, self.lambda)?.with_noise(self.noise)]
            }
            ExperimentKind::DiscreteNoiseUniversality => {
                let spec = build_two_class_spec(self.d, self.lambda, self.flip, self.seed)?;
                vec![
                    spec.clone().with_noise(NoiseKind::Gaussian),
                    spec.with_noise(NoiseKind::ThreePoint),
                ]
            }
        })
    }

    fn options(&self, seed: u64) -> TrajectoryOptions {
        TrajectoryOptions {
            holdout_n: self.holdout_n,
            init: self.init(),
            ..TrajectoryOptions::new(self.n, self.steps, seed)
        }
    }
}

fn parse_override(kv: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{kv}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{part}` in `{key}` is not a table")))?;
    }
    Err(Error::config("empty override key"))
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Variant {
    name: String,
    spec: usize,
    algorithm: Algorithm,
    /// Use the printed pure-DD SE recursion.
    pure_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub seed: u64,
    pub step: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineStop {
    pub selected_t: usize,
    pub test_optimal_t: usize,
    /// Selected iterate attains the smallest test error among saved ones.
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub completed: usize,
    pub failures: Vec<FailureRecord>,
    pub train: Vec<Summary>,
    pub test: Vec<Summary>,
    pub gap: Vec<Summary>,
    /// Cross-seed medians of every overlap column.
    pub overlap_medians: BTreeMap<String, Vec<f64>>,
    /// Final train and test errors per replication, `null` when the run failed.
    pub final_train: Vec<Option<f64>>,
    pub final_test: Vec<Option<f64>>,
    pub online_stop: Vec<Option<usize>>,
    pub offline_stop: Vec<Option<OfflineStop>>,
    pub se_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTally {
    /// 1-based variant index chosen per replication by final train error.
    pub by_train: Vec<usize>,
    pub by_test: Vec<usize>,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityReport {
    /// Steps where `|median_a − median_b| ≤ 2 max(IQR_a, IQR_b)` for the gap.
    pub steps_within: usize,
    pub steps: usize,
    /// Largest `|median_a − median_b| / (2 max(IQR_a, IQR_b))`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: ExperimentKind,
    pub hash: String,
    pub variants: Vec<VariantSummary>,
    pub selection: Option<SelectionTally>,
    pub universality: Option<UniversalityReport>,
    pub se_failures: Vec<String>,
}

impl ExperimentSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
}

impl RunOutcome {
    /// SE failed or no replication of any variant completed.
    pub fn numerical_failure(&self) -> bool {
        !self.summary.se_failures.is_empty()
            || self.summary.variants.iter().all(|v| v.completed == 0)
    }
}

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(records: &[StepRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trajectory_csv(records, &mut buf)?;
    Ok(buf)
}

fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn LossModel>> {
    make_model(&cfg.model, cfg.width)
}

type RunResult = std::result::Result<Vec<StepRecord>, (Option<usize>, Vec<StepRecord>, String)>;

fn run_one(cfg: &ExperimentConfig, spec: &MixtureSpec, variant: &Variant, seed: u64) -> RunResult {
    let model = build_model(cfg).map_err(|e| (None, Vec::new(), e.to_string()))?;
    match run_trajectory(
        spec,
        model.as_ref(),
        None,
        variant.algorithm,
        &cfg.options(seed),
    ) {
        Ok(tr) => Ok(tr.records),
        Err(Error::Diverged {
            step,
            source,
            partial,
        }) => Err((Some(step), *partial, source.to_string())),
        Err(e) => Err((None, Vec::new(), e.to_string())),
    }
}

/// SE initial condition matching replication `seed`: `θ̄² = I`, with the
/// signal overlaps and head of that replication's first iterate.
pub fn se_init_for(cfg: &ExperimentConfig, spec: &MixtureSpec, seed: u64) -> Result<SeInit> {
    let model = build_model(cfg)?;
    let state = initial_state(
        cfg.d,
        cfg.n,
        model.width(),
        model.head_width(),
        seed,
        &cfg.init(),
        false,
    )?;
    let mut init = SeInit::standard(spec, model.width(), state.a.as_slice().unwrap_or(&[]));
    let m = spec.signals().dot(&state.theta) / cfg.d as f64;
    init.m1 = m
        .axis_iter(Axis(0))
        .map(|row| nalgebra::DVector::from_iterator(row.len(), row.iter().copied()))
        .collect();
    Ok(init)
}

fn run_se_variant(
    cfg: &ExperimentConfig,
    spec: &MixtureSpec,
    v: &Variant,
) -> Result<Vec<SeRecord>> {
    let Algorithm::Dd(params) = v.algorithm else {
        return Err(Error::config("SE is defined for DD only"));
    };
    let model = build_model(cfg)?;
    let engine = ExpectationEngine::new(cfg.engine.clone())?;
    let init = se_init_for(cfg, spec, cfg.seeds[0])?;
    let (records, _) = run_state_evolution(
        init,
        model.as_ref(),
        None,
        params,
        v.pure_eta,
        cfg.alpha(),
        &engine,
        cfg.steps,
    )?;
    Ok(records)
}

fn se_variants(cfg: &ExperimentConfig) -> Result<Vec<Variant>> {
    Ok(cfg
        .variants()?
        .into_iter()
        .filter(|v| cfg.se && matches!(v.algorithm, Algorithm::Dd(_)))
        .collect())
}

/// Run only the SE part of an experiment, one CSV per DD variant.
pub fn run_se_only(cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<SeRecord>)>> {
    let specs = cfg.specs()?;
    let cfg = ExperimentConfig {
        se: true,
        ..cfg.clone()
    };
    se_variants(&cfg)?
        .iter()
        .map(|v| Ok((v.name.clone(), run_se_variant(&cfg, &specs[v.spec], v)?)))
        .collect()
}

pub fn output_dir(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    Ok(out.join(cfg.experiment.id()).join(cfg.hash()?))
}

/// Run every replication of every variant, then the SE, and write all outputs.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: Option<usize>,
) -> Result<RunOutcome> {
    let cfg = cfg.clone().resolved()?;
    let dir = output_dir(&cfg, out)?;
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("manifest.toml"), cfg.to_toml()?.as_bytes())?;

    let specs = cfg.specs()?;
    let variants = cfg.variants()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        pool = pool.num_threads(w.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;

    let runs: Vec<Vec<RunResult>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .enumerate()
            .map(|(k, &seed)| {
                let results: Vec<RunResult> = variants
                    .iter()
                    .map(|v| run_one(&cfg, &specs[v.spec], v, seed))
                    .collect();
                for (v, r) in variants.iter().zip(&results) {
                    let records = match r {
                        Ok(rec) | Err((_, rec, _)) => rec,
                    };
                    let path = dir.join(&v.name).join(format!("seed-{k}.csv"));
                    if let Err(e) = csv_bytes(records).and_then(|b| write_atomic(&path, &b)) {
                        log::error!("writing {}: {e}", path.display());
                    }
                }
                results
            })
            .collect()
    });

    let mut se_failures = Vec::new();
    let mut se_files = BTreeMap::new();
    let se_runs: Vec<(String, Result<Vec<SeRecord>>)> = pool.install(|| {
        se_variants(&cfg)
            .unwrap_or_default()
            .par_iter()
            .map(|v| (v.name.clone(), run_se_variant(&cfg, &specs[v.spec], v)))
            .collect()
    });
    for (name, res) in se_runs {
        match res {
            Ok(records) => {
                let mut buf = Vec::new();
                write_se_csv(&records, &mut buf)?;
                let rel = format!("{name}/se.csv");
                write_atomic(&dir.join(&rel), &buf)?;
                se_files.insert(name, rel);
            }
            Err(e) => {
                log::error!("state evolution for {name} failed: {e}");
                se_failures.push(format!("{name}: {e}"));
            }
        }
    }

    let mut summaries = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let per_seed: Vec<&RunResult> = runs.iter().map(|r| &r[vi]).collect();
        summaries.push(summarize_variant(
            &cfg,
            v,
            &per_seed,
            se_files.remove(&v.name),
        )?);
    }
    let selection = cfg
        .experiment
        .is_sweep()
        .then(|| selection_tally(&summaries))
        .transpose()?;
    let universality = if cfg.experiment == ExperimentKind::DiscreteNoiseUniversality {
        universality_report(&summaries)
    } else {
        None
    };
    let summary = ExperimentSummary {
        experiment: cfg.experiment,
        hash: cfg.hash()?,
        variants: summaries,
        selection,
        universality,
        se_failures,
    };
    write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(RunOutcome { dir, summary })
}

fn saved_indices(steps: usize, every: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=steps).filter(|t| t % every == 0).collect();
    if s.first() != Some(&1) {
        s.insert(0, 1);
    }
    s
}

fn summarize_variant(
    cfg: &ExperimentConfig,
    v: &Variant,
    runs: &[&RunResult],
    se_file: Option<String>,
) -> Result<VariantSummary> {
    let mut failures = Vec::new();
    let mut done: Vec<&[StepRecord]> = Vec::new();
    let mut final_train = Vec::new();
    let mut final_test = Vec::new();
    let mut online_stop = Vec::new();
    let mut offline_stop = Vec::new();
    let saved = saved_indices(cfg.steps, cfg.saved_every);
    for (k, r) in runs.iter().enumerate() {
        match r {
            Ok(records) => {
                done.push(records);
                let last = records.last().expect("steps >= 1");
                final_train.push(Some(last.train_error));
                final_test.push(Some(last.test_error));
                let train: Vec<f64> = records.iter().map(|r| r.train_error).collect();
                online_stop.push(early_stop_online(&train, 0.0, StopMode::Absolute)?);
                let selected_t = early_stop_offline(records, &saved)?;
                let tests: Vec<f64> = saved.iter().map(|&t| records[t - 1].test_error).collect();
                let test_optimal_t = saved[select_candidate(&tests)? - 1];
                offline_stop.push(Some(OfflineStop {
                    selected_t,
                    test_optimal_t,
                    agrees: records[selected_t - 1].test_error
                        <= records[test_optimal_t - 1].test_error,
                }));
            }
            Err((step, _, msg)) => {
                log::warn!("{} replication {k} failed: {msg}", v.name);
                failures.push(FailureRecord {
                    replication: k,
                    seed: cfg.seeds[k],
                    step: *step,
                    error: msg.clone(),
                });
                final_train.push(None);
                final_test.push(None);
                online_stop.push(None);
                offline_stop.push(None);
            }
        }
    }
    let (train, test, gap) = if done.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        let g = gap_diagnostics(&done)?;
        (g.train, g.test, g.gap)
    };
    let mut overlap_medians = BTreeMap::new();
    if let Some(first) = done.first() {
        let (modes, width) = first[0].overlaps.m.dim();
        let names = overlap_columns(width, modes, first[0].a.len());
        let rows: Vec<Vec<Vec<f64>>> = done
            .iter()
            .map(|records| {
                records
                    .iter()
                    .map(|r| {
                        let o = &r.overlaps;
                        overlap_values(&o.omega.view(), &o.xi.view(), &o.m.view(), &r.a)
                    })
                    .collect()
            })
            .collect();
        for (ci, name) in names.into_iter().enumerate() {
            let medians = (0..cfg.steps)
                .map(|t| {
                    let vals: Vec<f64> = rows.iter().map(|seed| seed[t][ci]).collect();
                    summarize(&vals).map(|s| s.median)
                })
                .collect::<Result<Vec<_>>>()?;
            overlap_medians.insert(name, medians);
        }
    }
    Ok(VariantSummary {
        name: v.name.clone(),
        completed: done.len(),
        failures,
        train,
        test,
        gap,
        overlap_medians,
        final_train,
        final_test,
        online_stop,
        offline_stop,
        se_file,
    })
}

fn or_inf(v: &Option<f64>) -> f64 {
    v.filter(|x| x.is_finite()).unwrap_or(f64::INFINITY)
}

fn selection_tally(variants: &[VariantSummary]) -> Result<SelectionTally> {
    let reps = variants[0].final_train.len();
    let mut by_train = Vec::with_capacity(reps);
    let mut by_test = Vec::with_capacity(reps);
    for k in 0..reps {
        let train: Vec<f64> = variants.iter().map(|v| or_inf(&v.final_train[k])).collect();
        let test: Vec<f64> = variants.iter().map(|v| or_inf(&v.final_test[k])).collect();
        by_train.push(select_candidate(&train)?);
        by_test.push(select_candidate(&test)?);
    }
    let agree = by_train
        .iter()
        .zip(&by_test)
        .filter(|(a, b)| a == b)
        .count();
    Ok(SelectionTally {
        agreement: agree as f64 / reps as f64,
        by_train,
        by_test,
    })
}

fn universality_report(variants: &[VariantSummary]) -> Option<UniversalityReport> {
    let a = variants.iter().find(|v| v.name == "gaussian")?;
    let b = variants.iter().find(|v| v.name == "three-point")?;
    if a.gap.is_empty() || a.gap.len() != b.gap.len() {
        return None;
    }
    let mut within = 0;
    let mut max_ratio: f64 = 0.0;
    for (x, y) in a.gap.iter().zip(&b.gap) {
        let diff = (x.median - y.median).abs();
        let band = 2.0 * x.iqr().max(y.iqr());
        if diff <= band {
            within += 1;
        }
        let ratio = if band > 0.0 {
            diff / band
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_ratio = max_ratio.max(ratio);
    }
    Some(UniversalityReport {
        steps_within: within,
        steps: a.gap.len(),
        max_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDeviation {
    pub t: usize,
    pub train: f64,
    pub test: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub steps: Vec<StepDeviation>,
    pub max_train: f64,
    pub max_test: f64,
    pub max_omega: f64,
}

/// Per-step `|median_empirical − SE|` for train error, test error and the
/// `Ω_tt` entries.
pub fn compare_se(emp: &VariantSummary, se: &SeTable) -> Result<CompareReport> {
    let test_se = se
        .column("test_se")
        .ok_or_else(|| Error::config("SE table has no test_se column"))?;
    if emp.train.len() != test_se.len() {
        return Err(Error::shape(format!(
            "empirical summary has {} steps, SE has {}",
            emp.train.len(),
            test_se.len()
        )));
    }
    let omega_cols: Vec<(Vec<f64>, &Vec<f64>)> = se
        .header
        .iter()
        .filter(|h| h.starts_with("omega_"))
        .filter_map(|h| Some((se.column(h)?, emp.overlap_medians.get(h)?)))
        .collect();
    let mut steps = Vec::with_capacity(test_se.len());
    for (t, &s) in test_se.iter().enumerate() {
        let omega = omega_cols
            .iter()
            .map(|(a, b)| (a[t] - b[t]).abs())
            .fold(0.0, f64::max);
        steps.push(StepDeviation {
            t: t + 1,
            train: (emp.train[t].median - s).abs(),
            test: (emp.test[t].median - s).abs(),
            omega,
        });
    }
    let max = |f: fn(&StepDeviation) -> f64| steps.iter().map(f).fold(0.0, f64::max);
    Ok(CompareReport {
        max_train: max(|s| s.train),
        max_test: max(|s| s.test),
        max_omega: max(|s| s.omega),
        steps,
    })
}

/// Summary of an SE trajectory in the shape of an empirical variant, so that
/// an SE table can be compared against itself.
pub fn se_as_summary(se: &SeTable) -> Result<VariantSummary> {
    let test = se
        .column("test_se")
        .ok_or_else(|| Error::config("SE table has no test_se column"))?;
    let point = |v: f64| Summary {
        median: v,
        q25: v,
        q75: v,
        min: v,
        max: v,
    };
    let overlap_medians = se
        .header
        .iter()
        .skip(2)
        .filter_map(|h| Some((h.clone(), se.column(h)?)))
        .collect();
    Ok(VariantSummary {
        name: "se".into(),
        completed: 1,
        failures: Vec::new(),
        train: test.iter().map(|&v| point(v)).collect(),
        test: test.iter().map(|&v| point(v)).collect(),
        gap: test.iter().map(|_| point(0.0)).collect(),
        overlap_medians,
        final_train: vec![test.last().copied()],
        final_test: vec![test.last().copied()],
        online_stop: vec![None],
        offline_stop: vec![None],
        se_file: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_evolution::read_se_csv;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(kind);
        cfg.n = 40;
        cfg.d = 30;
        cfg.steps = 5;
        cfg.replications = 2;
        cfg.saved_every = 2;
        cfg.engine.n_samples = 500;
        cfg.resolved().unwrap()
    }

    #[test]
    fn presets_validate() {
        for kind in ExperimentKind::ALL {
            ExperimentConfig::preset(kind).resolved().unwrap();
        }
    }

    #[test]
    fn load_applies_file_then_overrides() {
        let text = "experiment = \"xor\"\nn = 50\n[engine]\nn_samples = 123\n";
        let cfg = ExperimentConfig::load(
            text,
            &[
                "n=60".into(),
                "engine.gh_order=8".into(),
                "lambda_grid=[2.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.n, 60);
        assert_eq!(cfg.d, 1000);
        assert_eq!(cfg.engine.n_samples, 123);
        assert_eq!(cfg.engine.gh_order, 8);
        assert_eq!(cfg.lambda_grid, vec![2.0]);
        assert_eq!(cfg.seeds.len(), cfg.replications);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = |s: &str| {
            ExperimentConfig::load("experiment = \"xor\"", &[s.into()])
                .unwrap_err()
                .to_string()
        };
        assert!(bad("n=0").contains("n:"));
        assert!(bad("steps=0").contains("steps"));
        assert!(bad("lambda_grid=[]").contains("lambda_grid"));
        assert!(bad("bogus=1").contains("bogus"));
        assert!(ExperimentConfig::load("n = 3", &[]).is_err());
        assert!(ExperimentConfig::load("experiment = \"nope\"", &[]).is_err());
    }

    #[test]
    fn manifest_round_trips_with_same_hash() {
        let cfg = tiny(ExperimentKind::Xor);
        let again = ExperimentConfig::load(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash().unwrap(), cfg.hash().unwrap());
        let other = ExperimentConfig {
            seed: 1,
            seeds: vec![],
            ..cfg.clone()
        }
        .resolved()
        .unwrap();
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn single_replication_single_step_summary_is_the_record() {
        let mut cfg = tiny(ExperimentKind::Signalless);
        cfg.replications = 1;
        cfg.seeds = vec![];
        cfg.steps = 1;
        cfg.baseline_gd = false;
        let cfg = cfg.resolved().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        let v = &out.summary.variants[0];
        assert_eq!(v.completed, 1);
        let csv = fs::read_to_string(out.dir.join("main/seed-0.csv")).unwrap();
        let row: Vec<f64> = csv
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|x| x.parse().unwrap())
            .collect();
        assert_eq!(v.train[0].median, row[1]);
        assert_eq!(v.test[0].min, row[2]);
        assert_eq!(v.gap[0].iqr(), 0.0);
    }

    #[test]
    fn sweeps_produce_selection_tallies() {
        let cfg = tiny(ExperimentKind::SignallessCSweep);
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path(), None).unwrap();
        let tally = out.summary.selection.unwrap();
        assert_eq!(tally.by_train.len(), 2);
        assert!((0.0..=1.0).contains(&tally.agreement));
        assert_eq!(out.summary.variants.len(), cfg.c_grid.len());
    }

    #[test]
    fn compare_se_against_itself_is_zero() {
        let cfg = tiny(ExperimentKind::Xor);
        let se = run_se_only(&cfg).unwrap();
        let mut buf = Vec::new();
        write_se_csv(&se[0].1, &mut buf).unwrap();
        let table = read_se_csv(buf.as_slice()).unwrap();
        let rep = compare_se(&se_as_summary(&table).unwrap(), &table).unwrap();
        assert_eq!(
            (rep.max_train, rep.max_test, rep.max_omega),
            (0.0, 0.0, 0.0)
        );
        let short = SeTable {
            header: table.header.clone(),
            rows: table.rows[..2].to_vec(),
        };
        assert!(compare_se(&se_as_summary(&table).unwrap(), &short).is_err());
    }

    #[test]
    fn saved_indices_include_first_step() {
        assert_eq!(saved_indices(5, 2), vec![1, 2, 4]);
        assert_eq!(saved_indices(3, 1), vec![1, 2, 3]);
    }
}
