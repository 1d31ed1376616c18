//! Run configuration. A config file is one TOML document with four flat
//! tables, `[model]`, `[corpus]`, `[train]` and `[run]`, plus a top-level
//! `schema_version`. Every key is optional and falls back to its default;
//! unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    camera_energy_with, expert_drop_manifest, magnitude_importance, random_importance, CameraConfig,
};
use crate::error::{arg_err, Error, Result};
use crate::heapr::{
    check_ratio, compute_importances_with, config_hash, estimate_covariances_with, make_batches,
    rank_global_with, rank_layerwise_with, ImportanceTable, PassCounter, PruneManifest, RankMode,
    RankOptions,
};
use crate::model::{init_model, train, MoEConfig, MoEModel, TrainConfig, TrainReport};
use crate::par::Execution;

use super::corpus::{generate_corpus, Corpus, CorpusSpec};
use super::eval::check_disjoint;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Heapr,
    Camera,
    Random,
    Magnitude,
    ExpertDrop,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Heapr,
        Method::Camera,
        Method::Random,
        Method::Magnitude,
        Method::ExpertDrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Heapr => "heapr",
            Method::Camera => "camera",
            Method::Random => "random",
            Method::Magnitude => "magnitude",
            Method::ExpertDrop => "expert_drop",
        }
    }

    pub fn allows(self, mode: RankMode) -> bool {
        !(self == Method::Camera && mode == RankMode::Global)
    }

    /// `mode`, or layer-wise where the method cannot rank globally.
    pub fn effective_mode(self, mode: RankMode) -> RankMode {
        if self.allows(mode) {
            mode
        } else {
            RankMode::Layerwise
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub mode: RankMode,
    pub ratio: f64,
    /// Ratios visited by `sweep` and `compare`, ascending.
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Forces sequential execution everywhere.
    pub deterministic: bool,
    pub output_dir: String,
    pub calib_batch_size: usize,
    /// Calibration-set sizes for the calibration-size study.
    pub calib_sizes: Vec<usize>,
    pub channel_floor: usize,
    pub camera_alpha: f64,
    pub compare_methods: Vec<Method>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::Heapr,
            mode: RankMode::Global,
            ratio: 0.25,
            ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8],
            seeds: vec![0, 1, 2, 3, 4],
            deterministic: true,
            output_dir: "runs".into(),
            calib_batch_size: 16,
            calib_sizes: vec![8, 16, 32, 64, 128],
            channel_floor: 1,
            camera_alpha: 1.0,
            compare_methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: MoEConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: MoEConfig::default(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            run: RunSection::default(),
        }
    }
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    for r in ratios {
        check_ratio(*r)?;
    }
    if ratios.windows(2).any(|w| w[1] <= w[0]) {
        return Err(arg_err("ratios must be strictly ascending"));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Sets one dotted key, e.g. `train.lr=0.02` or `run.ratios=[0.1, 0.2]`.
    /// The value is read as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Parse(e.to_string()))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Parse(format!("`{key}` does not name a config key")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(Error::Parse(format!("unknown config key `{key}`")));
                }
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Parse(format!("unknown config section in `{key}`")))?;
        }
        let updated: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.corpus.validate()?;
        if self.model.vocab != self.corpus.vocab {
            return Err(arg_err("model.vocab and corpus.vocab differ"));
        }
        if !self.run.method.allows(self.run.mode) {
            return Err(arg_err(format!("{} cannot rank globally", self.run.method)));
        }
        check_ratio(self.run.ratio)?;
        check_ratios(&self.run.ratios)?;
        if self.run.seeds.is_empty() {
            return Err(arg_err("at least one seed is required"));
        }
        if self.run.calib_batch_size == 0 || self.run.calib_sizes.contains(&0) {
            return Err(arg_err("calibration sizes must be positive"));
        }
        Ok(())
    }

    pub fn exec(&self) -> Execution {
        if self.run.deterministic {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Same config with the model, corpus and training seeds set to `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.corpus.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Hash of everything that affects results; the output directory is
    /// excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.output_dir.clear();
        config_hash(&c)
    }

    pub fn rank_options(&self) -> RankOptions {
        RankOptions {
            channel_floor: self.run.channel_floor,
        }
    }
}

/// Corpus generation with the split-disjointness check.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = generate_corpus(&cfg.corpus)?;
    check_disjoint(&corpus.calib, &corpus.test)?;
    check_disjoint(&corpus.train, &corpus.test)?;
    Ok(corpus)
}

pub fn train_model(cfg: &RunConfig, corpus: &Corpus) -> Result<(MoEModel, TrainReport)> {
    let model = init_model(&cfg.model)?;
    let tc = TrainConfig {
        exec: cfg.exec(),
        ..cfg.train.clone()
    };
    train(model, &corpus.train, &tc)
}

pub fn calib_batches(cfg: &RunConfig, seqs: &[Vec<u32>]) -> Result<Vec<Vec<Vec<u32>>>> {
    if seqs.is_empty() {
        return Err(arg_err("empty calibration split"));
    }
    Ok(make_batches(seqs, cfg.run.calib_batch_size))
}

/// Scores for `method`. Expert dropping ranks whole experts by summed HEAPr
/// scores, so it shares the HEAPr table.
pub fn importance_table(
    cfg: &RunConfig,
    method: Method,
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
) -> Result<ImportanceTable> {
    let exec = cfg.exec();
    match method {
        Method::Heapr | Method::ExpertDrop => {
            let counter = PassCounter::new(calib.len());
            let covs = estimate_covariances_with(model, calib, exec, &counter)?;
            compute_importances_with(model, calib, &covs, exec, &counter)
        }
        Method::Camera => camera_energy_with(
            model,
            calib,
            CameraConfig {
                alpha: cfg.run.camera_alpha,
            },
            exec,
        ),
        Method::Random => Ok(random_importance(model, model.config.seed)),
        Method::Magnitude => Ok(magnitude_importance(model)),
    }
}

pub fn prune_manifest(
    method: Method,
    table: &ImportanceTable,
    ratio: f64,
    mode: RankMode,
    opts: RankOptions,
) -> Result<PruneManifest> {
    if !method.allows(mode) {
        return Err(arg_err(format!("{method} cannot rank globally")));
    }
    let mut m = match (method, mode) {
        (Method::ExpertDrop, _) => expert_drop_manifest(table, ratio)?,
        (_, RankMode::Global) => rank_global_with(table, ratio, opts)?,
        (_, RankMode::Layerwise) => rank_layerwise_with(table, ratio, opts)?,
    };
    m.method = method.name().to_string();
    Ok(m)
}
