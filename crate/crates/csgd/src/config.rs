//! TOML experiment configuration.
//!
//! A config document has up to eight sections; only `[model]` and
//! `[dataset]` are required. Unknown keys are rejected with the offending
//! key named, every omitted knob falls back to its stated default, and
//! validation catches contradictions (cluster targets above layer widths,
//! non-increasing schedule milestones) before a pipeline starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterScheme;
use crate::error::{Error, Result};
use crate::graph::{toy_densenet, toy_resnet, toy_vgg, NetworkSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ToyVgg,
    ToyResnet,
    ToyDensenet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub input: [usize; 3],
    pub classes: usize,
    /// toy_vgg: conv widths per stage, e.g. `[[16, 16], [32, 32]]`.
    #[serde(default)]
    pub stages: Vec<Vec<usize>>,
    /// toy_resnet: three stages of `[internal, output]` widths.
    #[serde(default)]
    pub widths: Vec<[usize; 2]>,
    /// toy_resnet: residual blocks per stage.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// toy_densenet: stem width.
    #[serde(default)]
    pub stem: usize,
    /// toy_densenet: channels added per dense layer.
    #[serde(default)]
    pub growth: usize,
    /// toy_densenet: number of dense layers.
    #[serde(default)]
    pub dense_layers: usize,
}

fn default_blocks() -> usize {
    1
}

impl ModelSection {
    /// Instantiates the network description, validating per-arch fields.
    pub fn build_spec(&self) -> Result<NetworkSpec> {
        let spec = match self.arch {
            Arch::ToyVgg => {
                if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty()) {
                    return Err(Error::InvalidConfig(
                        "model.stages must list at least one stage of conv widths".into(),
                    ));
                }
                toy_vgg(self.input, self.classes, &self.stages)
            }
            Arch::ToyResnet => {
                let widths: [[usize; 2]; 3] = self.widths.clone().try_into().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "model.widths must have exactly 3 stages, got {}",
                        self.widths.len()
                    ))
                })?;
                if self.blocks == 0 {
                    return Err(Error::InvalidConfig("model.blocks must be ≥ 1".into()));
                }
                toy_resnet(self.input, self.classes, &widths, self.blocks)
            }
            Arch::ToyDensenet => {
                if self.stem == 0 || self.growth == 0 || self.dense_layers == 0 {
                    return Err(Error::InvalidConfig(
                        "model.stem, model.growth and model.dense_layers must be ≥ 1".into(),
                    ));
                }
                toy_densenet(self.input, self.classes, self.stem, self.growth, self.dense_layers)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same section with every conv width multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut out = self.clone();
        for stage in &mut out.stages {
            for w in stage {
                *w *= factor;
            }
        }
        for pair in &mut out.widths {
            pair[0] *= factor;
            pair[1] *= factor;
        }
        if out.stem > 0 {
            out.stem *= factor;
        }
        if out.growth > 0 {
            out.growth *= factor;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Rings,
    Digits,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Synthetic kinds: sample counts.
    #[serde(default = "default_train_count")]
    pub train: usize,
    #[serde(default = "default_test_count")]
    pub test: usize,
    /// IDX kind: file paths.
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

fn default_train_count() -> usize {
    2000
}

fn default_test_count() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    /// Initial learning rate.
    pub lr: f32,
    /// Epochs at which the rate is scaled by `lr_gamma`. Omitted means the
    /// default schedule (scale at 1/2 and 3/4 of the epoch budget); an
    /// explicit empty list keeps the rate constant.
    pub milestones: Option<Vec<usize>>,
    pub lr_gamma: f32,
    pub weight_decay: f32,
    pub bn_momentum: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            lr: 3e-2,
            milestones: None,
            lr_gamma: 0.1,
            weight_decay: 1e-4,
            bn_momentum: 0.1,
        }
    }
}

impl TrainSection {
    /// Milestones in force: explicit ones, or 1/2 and 3/4 of the budget.
    pub fn effective_milestones(&self, epochs: usize) -> Vec<usize> {
        if let Some(explicit) = &self.milestones {
            return explicit.clone();
        }
        let mut out = vec![epochs / 2, epochs * 3 / 4];
        out.dedup();
        out.retain(|&e| e > 0 && e < epochs);
        out
    }

    /// Learning rate at a given zero-based epoch.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f32 {
        let crossed = self
            .effective_milestones(epochs)
            .iter()
            .filter(|&&m| epoch >= m)
            .count() as i32;
        self.lr * self.lr_gamma.powi(crossed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsgdSection {
    /// Centripetal strength ε.
    pub epsilon: f32,
    /// Training epochs for the centripetal phase; omitted means reuse
    /// `train.epochs`. An explicit 0 skips centripetal training (useful
    /// only with singleton targets, where the trim is an identity).
    pub epochs: Option<usize>,
    pub scheme: ClusterScheme,
    /// Default remaining-filter ratio applied to every targeted conv
    /// layer, as a fraction string like "5/8".
    pub ratio: String,
    /// Explicit per-layer remaining counts; override the ratio.
    pub targets: BTreeMap<String, usize>,
    /// Conv layers left untouched.
    pub exclude: Vec<String>,
    /// Trim early once every cluster's max deviation falls below this;
    /// 0 disables early trimming.
    pub early_trim_deviation: f32,
    /// Largest pre-snap deviation the snap step will silently absorb.
    pub snap_tolerance: f32,
}

impl Default for CsgdSection {
    fn default() -> Self {
        Self {
            epsilon: 3e-3,
            epochs: None,
            scheme: ClusterScheme::KMeans,
            ratio: "5/8".into(),
            targets: BTreeMap::new(),
            exclude: Vec::new(),
            early_trim_deviation: 1e-5,
            snap_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoSection {
    /// Group penalty strength; 0 picks it automatically so the penalty
    /// gradient is ~10% of the task gradient norm at step 0.
    pub strength: f32,
    /// Fraction of filters regularized and later zeroed, e.g. "3/8".
    pub fraction: String,
}

impl Default for LassoSection {
    fn default() -> Self {
        Self {
            strength: 0.0,
            fraction: "3/8".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilons: Vec<f32>,
    /// χ threshold as a fraction of the initial χ.
    pub chi_threshold_ratio: f64,
    pub max_steps: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-3, 2e-3, 1e-2],
            chi_threshold_ratio: 0.05,
            max_steps: 25_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSection {
    pub factor: usize,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub csgd: CsgdSection,
    #[serde(default)]
    pub lasso: LassoSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub scale: ScaleSection,
}

/// Parses "num/den" or a bare integer into a fraction.
pub fn parse_fraction(s: &str) -> Result<(u64, u64)> {
    let bad = || Error::InvalidConfig(format!("bad fraction {s:?} (want e.g. \"5/8\")"));
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (
            n.trim().parse::<u64>().map_err(|_| bad())?,
            d.trim().parse::<u64>().map_err(|_| bad())?,
        ),
        None => (s.trim().parse::<u64>().map_err(|_| bad())?, 1),
    };
    if den == 0 || num == 0 || num > den {
        return Err(Error::InvalidConfig(format!(
            "fraction {s:?} must be in (0, 1]"
        )));
    }
    Ok((num, den))
}

/// Applies a fraction to a width, rounding to the nearest count in [1, c].
pub fn apply_fraction(c: usize, num: u64, den: u64) -> usize {
    let r = ((c as u64 * num) as f64 / den as f64).round() as usize;
    r.clamp(1, c)
}

impl ExperimentConfig {
    /// The cluster-count target for every clustered conv layer: explicit
    /// `csgd.targets` first, then the ratio, skipping excluded layers.
    pub fn resolve_targets(&self, spec: &NetworkSpec) -> Result<BTreeMap<String, usize>> {
        let (num, den) = parse_fraction(&self.csgd.ratio)?;
        let widths: BTreeMap<String, usize> = spec.conv_widths().into_iter().collect();
        for id in &self.csgd.exclude {
            if !widths.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "csgd.exclude names unknown conv layer {id:?}"
                )));
            }
            if self.csgd.targets.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "layer {id:?} is both excluded and explicitly targeted"
                )));
            }
        }
        let mut out = BTreeMap::new();
        for (id, c) in &widths {
            if self.csgd.exclude.contains(id) {
                continue;
            }
            let r = match self.csgd.targets.get(id) {
                Some(&r) => r,
                None => apply_fraction(*c, num, den),
            };
            if r == 0 || r > *c {
                return Err(Error::InvalidConfig(format!(
                    "layer {id:?}: target of {r} remaining filters is outside [1, {c}]"
                )));
            }
            out.insert(id.clone(), r);
        }
        for id in self.csgd.targets.keys() {
            if !widths.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "csgd.targets names unknown conv layer {id:?}"
                )));
            }
        }
        Ok(out)
    }

    /// Epochs of the centripetal phase.
    pub fn csgd_epochs(&self) -> usize {
        self.csgd.epochs.unwrap_or(self.train.epochs)
    }

    fn validate(&self) -> Result<()> {
        self.model.build_spec()?;
        let milestones = self.train.milestones.as_deref().unwrap_or(&[]);
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "train.milestones must be strictly increasing".into(),
            ));
        }
        if let Some(&m) = milestones.last() {
            if m >= self.train.epochs.max(self.csgd_epochs()) {
                return Err(Error::InvalidConfig(format!(
                    "milestone {m} is not below the epoch budget"
                )));
            }
        }
        if self.train.batch == 0 {
            return Err(Error::InvalidConfig("train.batch must be ≥ 1".into()));
        }
        // Negated forms so NaN fails validation too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.train.lr > 0.0) || !(self.train.lr_gamma > 0.0) {
            return Err(Error::InvalidConfig(
                "train.lr and train.lr_gamma must be positive".into(),
            ));
        }
        if self.csgd.epsilon < 0.0 || self.train.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "csgd.epsilon and train.weight_decay must be ≥ 0".into(),
            ));
        }
        parse_fraction(&self.csgd.ratio)?;
        parse_fraction(&self.lasso.fraction)?;
        if self.scale.factor == 0 {
            return Err(Error::InvalidConfig("scale.factor must be ≥ 1".into()));
        }
        if self.dataset.kind == DatasetKind::Idx {
            for (name, path) in [
                ("train_images", &self.dataset.train_images),
                ("train_labels", &self.dataset.train_labels),
            ] {
                if path.is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "dataset.kind = \"idx\" requires dataset.{name}"
                    )));
                }
            }
        }
        // Targets are validated against the concrete spec here as well, so
        // a bad config fails at parse time rather than mid-pipeline.
        let spec = self.model.build_spec()?;
        self.resolve_targets(&spec)?;
        Ok(())
    }
}

/// Reads and validates a config document.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Parses a config from a literal document (used by tests and fixtures).
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
