//! Experiment pipelines: baseline training, centripetal pruning, scaling
//! and squeezing, redundant-from-scratch training, the group-Lasso
//! comparison, the ε-sensitivity sweep, and the slim-vs-clip comparison.
//!
//! Every pipeline is a sequential state machine driven by one
//! [`ExperimentConfig`] and one seed, writes its curves as CSV and its
//! outcome as a JSON summary under the run directory, and is reproducible
//! bit-for-bit given the same (config, seed) on one machine. Pipelines
//! that trim always end with a logit-equivalence gate against the snapped
//! model and fail loudly when it is exceeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::clustering::assign_for_model;
use crate::config::{apply_fraction, parse_fraction, DatasetKind, ExperimentConfig, TrainSection};
use crate::data::{digits_dataset, load_idx_pair, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkSpec};
use crate::metrics::{write_summary, MetricsLog, MetricsRecord};
use crate::model::{build_model, derive_constraint_groups, ConstraintKind, Follower, Model};
use crate::optim::{chi, phi, magnitude_remaining_set, CsgdOptimizer, SgdOptimizer};
use crate::tape::GradTape;
use crate::trim::{snap_clusters, trim_network, verify_equivalence, zero_out_prune};

/// Largest max-absolute logit difference a trim may introduce.
pub const EQUIV_TOLERANCE: f32 = 1e-4;
/// Random inputs used by every equivalence gate.
pub const VERIFY_SAMPLES: usize = 100;
const EVAL_BATCH: usize = 256;

// Seed offsets so each consumer of randomness draws an independent,
// reproducible stream from the one run seed.
const SEED_BATCHES: u64 = 1;
const SEED_CLUSTERS: u64 = 2;
const SEED_VERIFY: u64 = 3;
const SEED_TRAIN_DATA: u64 = 4;
const SEED_TEST_DATA: u64 = 5;

fn subseed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds the train/test datasets named by the config. Synthetic kinds
/// derive both splits from the run seed; IDX files are read from disk,
/// with the test split falling back to the train files when absent.
pub fn load_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let classes = cfg.model.classes;
    let (train_seed, test_seed) = (subseed(seed, SEED_TRAIN_DATA), subseed(seed, SEED_TEST_DATA));
    match cfg.dataset.kind {
        DatasetKind::Blobs => Ok((
            synth_dataset(SynthKind::Blobs, cfg.dataset.train, classes, train_seed)?,
            synth_dataset(SynthKind::Blobs, cfg.dataset.test, classes, test_seed)?,
        )),
        DatasetKind::Rings => Ok((
            synth_dataset(SynthKind::Rings, cfg.dataset.train, classes, train_seed)?,
            synth_dataset(SynthKind::Rings, cfg.dataset.test, classes, test_seed)?,
        )),
        DatasetKind::Digits => {
            if classes != 10 {
                return Err(Error::InvalidConfig(format!(
                    "the digits dataset has 10 classes, model.classes is {classes}"
                )));
            }
            Ok((
                digits_dataset(cfg.dataset.train, train_seed)?,
                digits_dataset(cfg.dataset.test, test_seed)?,
            ))
        }
        DatasetKind::Idx => {
            let train_images = cfg.dataset.train_images.as_ref().unwrap();
            let train_labels = cfg.dataset.train_labels.as_ref().unwrap();
            let train = load_idx_pair(train_images, train_labels, classes)?;
            let test = match (&cfg.dataset.test_images, &cfg.dataset.test_labels) {
                (Some(i), Some(l)) => load_idx_pair(i, l, classes)?,
                _ => train.clone(),
            };
            Ok((train, test))
        }
    }
}

/// The two optimizers behind one `step` call.
enum Stepper<'a> {
    Sgd(&'a SgdOptimizer),
    Csgd(&'a CsgdOptimizer),
}

impl Stepper<'_> {
    fn step(&self, model: &mut Model, grads: &crate::tape::GradStore, tau: f32) -> Result<()> {
        match self {
            Stepper::Sgd(opt) => opt.step(model, grads, tau),
            Stepper::Csgd(opt) => opt.step(model, grads, tau),
        }
    }
}

/// Per-epoch measurements a pipeline merges into the epoch's CSV record,
/// plus an early-stop flag.
#[derive(Default)]
struct EpochExtra {
    accuracy: Option<f64>,
    chi: Option<f64>,
    phi: Option<f64>,
    stop: bool,
}

/// Shared mini-batch training loop: seeded epoch shuffles, the stepped
/// learning-rate schedule, one CSV record per epoch. Returns the number of
/// optimizer steps taken.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut Model,
    data: &Dataset,
    stepper: &Stepper,
    tcfg: &TrainSection,
    epochs: usize,
    seed: u64,
    log: &mut MetricsLog,
    mut at_epoch_end: impl FnMut(&mut Model, usize) -> Result<EpochExtra>,
) -> Result<usize> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, SEED_BATCHES));
    let mut step = 0usize;
    for epoch in 0..epochs {
        let tau = tcfg.lr_at(epoch, epochs);
        let order = data.epoch_order(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch) {
            let (x, labels) = data.batch(chunk)?;
            let mut tape = GradTape::new();
            let logits = model.forward_train(&mut tape, &x, tcfg.bn_momentum)?;
            let loss = tape.softmax_xent(&logits, &labels)?;
            let grads = tape.backward(&loss)?;
            stepper.step(model, &grads, tau)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            loss_sum += value as f64;
            batches += 1;
            step += 1;
        }
        let extra = at_epoch_end(model, epoch)?;
        log.push(MetricsRecord {
            epoch,
            step,
            loss: (batches > 0).then(|| loss_sum / batches as f64),
            accuracy: extra.accuracy,
            chi: extra.chi,
            phi: extra.phi,
            lr: Some(tau as f64),
            wall_secs: Some(start.elapsed().as_secs_f64()),
        })?;
        if extra.stop {
            break;
        }
    }
    Ok(step)
}

fn evaluate(model: &Model, data: &Dataset) -> Result<f32> {
    model.accuracy(&data.images, &data.labels, EVAL_BATCH)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Cluster-count targets with residual followers removed: their layout is
/// propagated from the pacesetter, never chosen directly. A follower whose
/// requested count disagrees with its pacesetter's is a config error.
fn strip_followers(
    spec: &NetworkSpec,
    targets: &BTreeMap<String, usize>,
) -> Result<BTreeMap<String, usize>> {
    let mut out = targets.clone();
    for group in derive_constraint_groups(spec)? {
        if group.kind != ConstraintKind::Residual {
            continue;
        }
        let pace_target = targets.get(&group.pacesetter).copied();
        for follower in &group.followers {
            let Follower::Conv(id) = follower else {
                continue;
            };
            if let Some(r) = out.remove(id) {
                if pace_target != Some(r) {
                    return Err(Error::ConstraintViolation(format!(
                        "follower {id:?} requests {r} clusters but pacesetter {:?} has {pace_target:?}",
                        group.pacesetter
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Replaces conv widths in a spec (used to build narrow/hypothetical
/// variants of a graph without touching anything else).
fn spec_with_widths(spec: &NetworkSpec, widths: &BTreeMap<String, usize>) -> NetworkSpec {
    let mut out = spec.clone();
    for layer in &mut out.layers {
        if let LayerKind::Conv { filters, .. } = &mut layer.kind {
            if let Some(&w) = widths.get(&layer.id) {
                *filters = w;
            }
        }
    }
    out
}

/// `[internal, output]` width pairs per residual stage, read off a spec by
/// the factory's naming (block 0's first conv, and the stage's last conv).
fn stage_width_pairs(spec: &NetworkSpec) -> Vec<[usize; 2]> {
    let widths: BTreeMap<String, usize> = spec.conv_widths().into_iter().collect();
    let mut out = Vec::new();
    for stage in 0.. {
        let internal = widths.get(&format!("s{stage}b0c1"));
        let mut output = None;
        for block in 0.. {
            match widths.get(&format!("s{stage}b{block}c2")) {
                Some(&w) => output = Some(w),
                None => break,
            }
        }
        match (internal, output) {
            (Some(&i), Some(o)) => out.push([i, o]),
            _ => break,
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub checkpoint: PathBuf,
    pub train_accuracy: f32,
    pub test_accuracy: f32,
    pub epochs: usize,
    pub steps: usize,
}

/// Plain SGD training from scratch. Writes `baseline.csv`,
/// `baseline.ckpt` and `baseline.json` under `out_dir`. Zero epochs saves
/// the untouched initialization.
pub fn train_baseline(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<BaselineOutcome> {
    ensure_dir(out_dir)?;
    let spec = cfg.model.build_spec()?;
    let (train, test) = load_datasets(cfg, seed)?;
    let mut model = build_model(&spec, seed)?;
    let opt = SgdOptimizer::new(cfg.train.weight_decay);
    let mut log = MetricsLog::to_path(&out_dir.join("baseline.csv"))?;

    let test_ref = &test;
    let steps = run_phase(
        &mut model,
        &train,
        &Stepper::Sgd(&opt),
        &cfg.train,
        cfg.train.epochs,
        seed,
        &mut log,
        |model, _| {
            Ok(EpochExtra {
                accuracy: Some(evaluate(model, test_ref)? as f64),
                ..Default::default()
            })
        },
    )?;
    if cfg.train.epochs == 0 {
        // Even a zero-epoch run emits one record: the initial evaluation.
        log.push(MetricsRecord {
            epoch: 0,
            step: 0,
            accuracy: Some(evaluate(&model, &test)? as f64),
            ..Default::default()
        })?;
    }

    let checkpoint = out_dir.join("baseline.ckpt");
    save_checkpoint(&checkpoint, &model, seed, "train-baseline")?;
    let outcome = BaselineOutcome {
        checkpoint,
        train_accuracy: evaluate(&model, &train)?,
        test_accuracy: evaluate(&model, &test)?,
        epochs: cfg.train.epochs,
        steps,
    };
    write_summary(&out_dir.join("baseline.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub checkpoint: PathBuf,
    /// Accuracy of the trained (pre-snap) model.
    pub trained_accuracy: f32,
    /// Accuracy after snapping clusters to their means — the pre-trim
    /// evaluation the post-trim accuracy is compared against.
    pub pre_trim_accuracy: f32,
    pub post_trim_accuracy: f32,
    pub max_logit_diff: f32,
    pub max_snap_deviation: f32,
    pub chi_initial: f64,
    pub chi_final: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub widths_after: Vec<(String, usize)>,
    pub early_stop_epoch: Option<usize>,
    pub steps: usize,
}

/// Options for a centripetal prune run beyond what the config carries.
pub struct PruneRun<'a> {
    /// File-name prefix distinguishing runs in one directory.
    pub label: &'a str,
    /// Cluster-count targets; `None` resolves them from the config.
    pub targets: Option<BTreeMap<String, usize>>,
    /// Override the centripetal strength ε from the config.
    pub epsilon: Option<f32>,
}

impl Default for PruneRun<'_> {
    fn default() -> Self {
        Self {
            label: "prune",
            targets: None,
            epsilon: None,
        }
    }
}

/// Centripetal training on a pretrained model, then snap → trim → verify
/// → evaluate. The equivalence gate compares the trimmed model against the
/// snapped one and aborts the pipeline when the logit difference exceeds
/// [`EQUIV_TOLERANCE`]. Both sides of that comparison are saved
/// (`<label>_snapped.ckpt` and `<label>_trimmed.ckpt`) so the gate can be
/// re-checked offline.
pub fn prune_pretrained(
    cfg: &ExperimentConfig,
    base: &Model,
    out_dir: &Path,
    seed: u64,
    run: &PruneRun,
) -> Result<PruneOutcome> {
    ensure_dir(out_dir)?;
    let spec = base.spec.clone();
    let (train, test) = load_datasets(cfg, seed)?;
    let all_targets = match &run.targets {
        Some(t) => t.clone(),
        None => cfg.resolve_targets(&spec)?,
    };
    let base_targets = strip_followers(&spec, &all_targets)?;

    let mut model = base.clone();
    let assignment = assign_for_model(
        &model,
        cfg.csgd.scheme,
        &base_targets,
        subseed(seed, SEED_CLUSTERS),
    )?;
    let epsilon = run.epsilon.unwrap_or(cfg.csgd.epsilon);
    let opt = CsgdOptimizer::new(&model, &assignment, cfg.train.weight_decay, epsilon)?;
    let chi_initial = chi(&model, &assignment)?;

    let mut log = MetricsLog::to_path(&out_dir.join(format!("{}.csv", run.label)))?;
    let mut early_stop_epoch = None;
    let epochs = cfg.csgd_epochs();
    let (test_ref, assignment_ref) = (&test, &assignment);
    let early_dev = cfg.csgd.early_trim_deviation;
    let steps = run_phase(
        &mut model,
        &train,
        &Stepper::Csgd(&opt),
        &cfg.train,
        epochs,
        seed,
        &mut log,
        |model, epoch| {
            let mut extra = EpochExtra {
                accuracy: Some(evaluate(model, test_ref)? as f64),
                chi: Some(chi(model, assignment_ref)?),
                ..Default::default()
            };
            if early_dev > 0.0 {
                let (_, dev) = snap_clusters(model, assignment_ref, f32::MAX)?;
                if dev <= early_dev {
                    extra.stop = true;
                    early_stop_epoch = Some(epoch);
                }
            }
            Ok(extra)
        },
    )?;

    let chi_final = chi(&model, &assignment)?;
    let trained_accuracy = evaluate(&model, &test)?;

    let (snapped, max_snap_deviation) =
        snap_clusters(&model, &assignment, cfg.csgd.snap_tolerance)?;
    if max_snap_deviation > cfg.csgd.snap_tolerance {
        return Err(Error::ConstraintViolation(format!(
            "clusters have not converged: max deviation {max_snap_deviation:e} exceeds \
             snap tolerance {:e}; train longer or raise epsilon",
            cfg.csgd.snap_tolerance
        )));
    }
    let pre_trim_accuracy = evaluate(&snapped, &test)?;

    let trimmed = trim_network(&snapped, &assignment)?;
    let max_logit_diff = verify_equivalence(
        &snapped,
        &trimmed,
        VERIFY_SAMPLES,
        subseed(seed, SEED_VERIFY),
    )?;
    if max_logit_diff > EQUIV_TOLERANCE {
        return Err(Error::EquivalenceGate {
            max_diff: max_logit_diff,
            tolerance: EQUIV_TOLERANCE,
        });
    }
    let post_trim_accuracy = evaluate(&trimmed, &test)?;

    let before = spec.cost()?;
    let after = trimmed.spec.cost()?;
    // The snapped model is the reference the lossless claim is measured
    // against; keep it so the gate can be re-checked later with `verify`.
    save_checkpoint(
        &out_dir.join(format!("{}_snapped.ckpt", run.label)),
        &snapped,
        seed,
        "prune",
    )?;
    let checkpoint = out_dir.join(format!("{}_trimmed.ckpt", run.label));
    save_checkpoint(&checkpoint, &trimmed, seed, "prune")?;
    let outcome = PruneOutcome {
        checkpoint,
        trained_accuracy,
        pre_trim_accuracy,
        post_trim_accuracy,
        max_logit_diff,
        max_snap_deviation,
        chi_initial,
        chi_final,
        flops_before: before.flops,
        flops_after: after.flops,
        params_before: before.params,
        params_after: after.params,
        widths_after: trimmed.spec.conv_widths(),
        early_stop_epoch,
        steps,
    };
    write_summary(&out_dir.join(format!("{}.json", run.label)), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSqueezeOutcome {
    pub factor: usize,
    pub baseline_accuracy: f32,
    pub wide_accuracy: f32,
    pub squeezed_accuracy: f32,
    /// Trimmed widths equal the baseline's exactly.
    pub widths_match: bool,
    pub baseline_flops: u64,
    pub wide_flops: u64,
    pub squeezed_flops: u64,
    pub prune: PruneOutcome,
}

/// Trains a `factor`-times-wider model, squeezes it back to the original
/// widths with centripetal training, and logs the (baseline, wide,
/// squeezed) accuracy triple.
pub fn scale_and_squeeze(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<ScaleSqueezeOutcome> {
    ensure_dir(out_dir)?;
    let factor = cfg.scale.factor;
    let base_spec = cfg.model.build_spec()?;

    // Baseline at original widths, in its own subdirectory.
    let baseline = train_baseline(cfg, &out_dir.join("baseline"), seed)?;

    // Wide model: same config, widths scaled.
    let mut wide_cfg = cfg.clone();
    wide_cfg.model = cfg.model.scaled(factor);
    let wide = train_baseline(&wide_cfg, &out_dir.join("wide"), seed)?;
    let (wide_model, _) = crate::checkpoint::load_checkpoint(&wide.checkpoint)?;

    // Squeeze back: targets are exactly the original conv widths.
    let targets: BTreeMap<String, usize> = base_spec.conv_widths().into_iter().collect();
    let prune = prune_pretrained(
        &wide_cfg,
        &wide_model,
        out_dir,
        seed,
        &PruneRun {
            label: "squeeze",
            targets: Some(targets),
            epsilon: None,
        },
    )?;

    let base_widths = base_spec.conv_widths();
    let outcome = ScaleSqueezeOutcome {
        factor,
        baseline_accuracy: baseline.test_accuracy,
        wide_accuracy: wide.test_accuracy,
        squeezed_accuracy: prune.post_trim_accuracy,
        widths_match: prune.widths_after == base_widths,
        baseline_flops: base_spec.cost()?.flops,
        wide_flops: prune.flops_before,
        squeezed_flops: prune.flops_after,
        prune,
    };
    write_summary(&out_dir.join("scale_squeeze.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedundantOutcome {
    pub narrow_accuracy: f32,
    pub redundant_accuracy: f32,
    /// The trimmed redundant model has exactly the narrow structure.
    pub structures_equal: bool,
    pub narrow_checkpoint: PathBuf,
    pub prune: PruneOutcome,
}

/// Trains a narrow model with plain SGD and a full-width model with
/// centripetal SGD from scratch (same seed and schedule), trims the
/// latter to the narrow structure, and logs the paired accuracies.
pub fn redundant_from_scratch(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<RedundantOutcome> {
    ensure_dir(out_dir)?;
    let spec = cfg.model.build_spec()?;
    let targets = cfg.resolve_targets(&spec)?;

    // Narrow control: the same graph with target widths, plain SGD.
    let mut narrow_cfg = cfg.clone();
    let narrow_spec = spec_with_widths(&spec, &targets);
    narrow_cfg.model = cfg.model.clone();
    let narrow_dir = out_dir.join("narrow");
    ensure_dir(&narrow_dir)?;
    let (train, test) = load_datasets(cfg, seed)?;
    let mut narrow_model = build_model(&narrow_spec, seed)?;
    let narrow_opt = SgdOptimizer::new(cfg.train.weight_decay);
    let mut narrow_log = MetricsLog::to_path(&narrow_dir.join("narrow.csv"))?;
    let test_ref = &test;
    run_phase(
        &mut narrow_model,
        &train,
        &Stepper::Sgd(&narrow_opt),
        &cfg.train,
        cfg.train.epochs,
        seed,
        &mut narrow_log,
        |model, _| {
            Ok(EpochExtra {
                accuracy: Some(evaluate(model, test_ref)? as f64),
                ..Default::default()
            })
        },
    )?;
    let narrow_accuracy = evaluate(&narrow_model, &test)?;
    let narrow_checkpoint = narrow_dir.join("narrow.ckpt");
    save_checkpoint(&narrow_checkpoint, &narrow_model, seed, "redundant-narrow")?;

    // Redundant arm: full width from scratch under centripetal SGD.
    let redundant_init = build_model(&spec, seed)?;
    let prune = prune_pretrained(
        cfg,
        &redundant_init,
        out_dir,
        seed,
        &PruneRun {
            label: "redundant",
            targets: Some(targets),
            epsilon: None,
        },
    )?;

    let trimmed_widths: BTreeMap<String, usize> =
        prune.widths_after.iter().cloned().collect();
    let narrow_widths: BTreeMap<String, usize> =
        narrow_spec.conv_widths().into_iter().collect();
    let outcome = RedundantOutcome {
        narrow_accuracy,
        redundant_accuracy: prune.post_trim_accuracy,
        structures_equal: trimmed_widths == narrow_widths,
        narrow_checkpoint,
        prune,
    };
    write_summary(&out_dir.join("redundant.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareLassoOutcome {
    /// Accuracy before / after the final structural prune, per arm.
    pub csgd_pre_accuracy: f32,
    pub csgd_post_accuracy: f32,
    pub lasso_pre_accuracy: f32,
    pub lasso_post_accuracy: f32,
    pub chi_initial: f64,
    pub chi_final: f64,
    pub phi_initial: f64,
    pub phi_final: f64,
    pub lasso_strength: f32,
    pub csgd_checkpoint: PathBuf,
    pub lasso_checkpoint: PathBuf,
}

/// Runs centripetal SGD and group-Lasso side by side from one pretrained
/// base with identical schedules. Four accuracy curves are emitted —
/// before and after a simulated prune, per arm — plus the χ curve on the
/// centripetal arm and the φ curve on the Lasso arm. The centripetal arm
/// ends with a verified trim; the Lasso arm ends with a hard zero-out of
/// its penalized filters and no finetuning.
pub fn compare_lasso(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<CompareLassoOutcome> {
    ensure_dir(out_dir)?;
    let (train, test) = load_datasets(cfg, seed)?;
    let baseline = train_baseline(cfg, &out_dir.join("base"), seed)?;
    let (base_model, _) = crate::checkpoint::load_checkpoint(&baseline.checkpoint)?;
    let spec = base_model.spec.clone();
    let epochs = cfg.csgd_epochs();

    // ----- Centripetal arm -----
    let targets = strip_followers(&spec, &cfg.resolve_targets(&spec)?)?;
    let mut csgd_model = base_model.clone();
    let assignment = assign_for_model(
        &csgd_model,
        cfg.csgd.scheme,
        &targets,
        subseed(seed, SEED_CLUSTERS),
    )?;
    let csgd_opt =
        CsgdOptimizer::new(&csgd_model, &assignment, cfg.train.weight_decay, cfg.csgd.epsilon)?;
    let chi_initial = chi(&csgd_model, &assignment)?;

    let mut pre_log = MetricsLog::to_path(&out_dir.join("csgd_pre.csv"))?;
    let mut post_log = MetricsLog::to_path(&out_dir.join("csgd_post.csv"))?;
    let (test_ref, assignment_ref) = (&test, &assignment);
    run_phase(
        &mut csgd_model,
        &train,
        &Stepper::Csgd(&csgd_opt),
        &cfg.train,
        epochs,
        seed,
        &mut pre_log,
        |model, epoch| {
            // Simulated prune at this point in training: snap a copy, trim,
            // evaluate what the pruned network would score right now.
            let (snapped, _) = snap_clusters(model, assignment_ref, f32::MAX)?;
            let trimmed = trim_network(&snapped, assignment_ref)?;
            post_log.push(MetricsRecord {
                epoch,
                step: 0,
                accuracy: Some(evaluate(&trimmed, test_ref)? as f64),
                ..Default::default()
            })?;
            Ok(EpochExtra {
                accuracy: Some(evaluate(model, test_ref)? as f64),
                chi: Some(chi(model, assignment_ref)?),
                ..Default::default()
            })
        },
    )?;

    let csgd_pre_accuracy = evaluate(&csgd_model, &test)?;
    let chi_final = chi(&csgd_model, &assignment)?;
    let (snapped, _) = snap_clusters(&csgd_model, &assignment, cfg.csgd.snap_tolerance)?;
    let trimmed = trim_network(&snapped, &assignment)?;
    let diff = verify_equivalence(&snapped, &trimmed, VERIFY_SAMPLES, subseed(seed, SEED_VERIFY))?;
    if diff > EQUIV_TOLERANCE {
        return Err(Error::EquivalenceGate {
            max_diff: diff,
            tolerance: EQUIV_TOLERANCE,
        });
    }
    // The drop is measured against the snapped model: that is the network
    // the trim actually replaces.
    let csgd_snapped_accuracy = evaluate(&snapped, &test)?;
    let csgd_post_accuracy = evaluate(&trimmed, &test)?;
    let csgd_checkpoint = out_dir.join("csgd_trimmed.ckpt");
    save_checkpoint(&csgd_checkpoint, &trimmed, seed, "compare-lasso")?;

    // ----- Group-Lasso arm -----
    let (num, den) = parse_fraction(&cfg.lasso.fraction)?;
    let mut penalized: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (id, c) in spec.conv_widths() {
        if cfg.csgd.exclude.contains(&id) {
            continue;
        }
        let prune_count = apply_fraction(c, num, den).min(c - 1);
        let keep = magnitude_remaining_set(
            match base_model.conv(&id) {
                Ok((kernel, ..)) => kernel,
                Err(e) => return Err(e),
            },
            c - prune_count,
        )?;
        let cut: Vec<usize> = (0..c).filter(|j| !keep.contains(j)).collect();
        penalized.insert(id, cut);
    }
    let strength = if cfg.lasso.strength > 0.0 {
        cfg.lasso.strength
    } else {
        auto_lasso_strength(&base_model, &train, &penalized, cfg.train.batch, seed)?
    };
    let lasso_map: BTreeMap<String, (Vec<usize>, f32)> = penalized
        .iter()
        .map(|(id, set)| (id.clone(), (set.clone(), strength)))
        .collect();
    let lasso_opt = SgdOptimizer::with_lasso(cfg.train.weight_decay, lasso_map);

    let mut lasso_model = base_model.clone();
    let phi_initial = phi(&lasso_model, &penalized)?;
    let mut lasso_pre_log = MetricsLog::to_path(&out_dir.join("lasso_pre.csv"))?;
    let mut lasso_post_log = MetricsLog::to_path(&out_dir.join("lasso_post.csv"))?;
    let penalized_ref = &penalized;
    run_phase(
        &mut lasso_model,
        &train,
        &Stepper::Sgd(&lasso_opt),
        &cfg.train,
        epochs,
        seed,
        &mut lasso_pre_log,
        |model, epoch| {
            let zeroed = zero_out_prune(model, penalized_ref)?;
            lasso_post_log.push(MetricsRecord {
                epoch,
                step: 0,
                accuracy: Some(evaluate(&zeroed, test_ref)? as f64),
                ..Default::default()
            })?;
            Ok(EpochExtra {
                accuracy: Some(evaluate(model, test_ref)? as f64),
                phi: Some(phi(model, penalized_ref)?),
                ..Default::default()
            })
        },
    )?;

    let lasso_pre_accuracy = evaluate(&lasso_model, &test)?;
    let phi_final = phi(&lasso_model, &penalized)?;
    let zeroed = zero_out_prune(&lasso_model, &penalized)?;
    let lasso_post_accuracy = evaluate(&zeroed, &test)?;
    let lasso_checkpoint = out_dir.join("lasso_zeroed.ckpt");
    save_checkpoint(&lasso_checkpoint, &zeroed, seed, "compare-lasso")?;

    let outcome = CompareLassoOutcome {
        csgd_pre_accuracy: csgd_snapped_accuracy.max(csgd_pre_accuracy),
        csgd_post_accuracy,
        lasso_pre_accuracy,
        lasso_post_accuracy,
        chi_initial,
        chi_final,
        phi_initial,
        phi_final,
        lasso_strength: strength,
        csgd_checkpoint,
        lasso_checkpoint,
    };
    write_summary(&out_dir.join("compare_lasso.json"), &outcome)?;
    Ok(outcome)
}

/// Penalty strength making the group-Lasso subgradient roughly 10% of the
/// task gradient over the penalized kernels at step 0.
fn auto_lasso_strength(
    model: &Model,
    train: &Dataset,
    penalized: &BTreeMap<String, Vec<usize>>,
    batch: usize,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, SEED_BATCHES));
    let order = train.epoch_order(&mut rng);
    let take = order.len().min(batch);
    let (x, labels) = train.batch(&order[..take])?;
    let mut probe = model.clone();
    let mut tape = GradTape::new();
    let logits = probe.forward_train(&mut tape, &x, 0.0)?;
    let loss = tape.softmax_xent(&logits, &labels)?;
    let grads = tape.backward(&loss)?;

    let mut task_sq = 0.0f64;
    let mut filters = 0usize;
    for (id, set) in penalized {
        let (kernel, ..) = probe.conv(id)?;
        let grad = grads.grad(kernel)?;
        let c = kernel.shape()[3];
        let gdata = grad.data();
        for row in 0..kernel.len() / c {
            for &j in set {
                task_sq += (gdata[row * c + j] as f64).powi(2);
            }
        }
        filters += set.len();
    }
    if filters == 0 {
        return Err(Error::InvalidConfig(
            "group-Lasso comparison needs at least one penalized filter".into(),
        ));
    }
    // Each penalized filter contributes a unit-norm subgradient direction,
    // so the full subgradient has norm strength·√filters.
    Ok((0.1 * task_sq.sqrt() / (filters as f64).sqrt()) as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepArm {
    pub epsilon: f32,
    /// First optimizer step at which χ ≤ threshold, if reached.
    pub crossing_step: Option<usize>,
    pub chi_final: f64,
    /// Equivalence gate result after snapping and trimming this arm.
    pub max_logit_diff: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub chi_initial: f64,
    pub chi_threshold: f64,
    pub arms: Vec<SweepArm>,
}

/// Trains one arm per ε from a common initialization at a constant
/// learning rate, recording χ after every step until it crosses the
/// threshold (a fixed fraction of the shared initial χ) or the step
/// budget runs out. An ε = 0 control arm is always included: without the
/// centripetal pull, χ only drifts with weight decay and never crosses.
pub fn epsilon_sweep(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<SweepOutcome> {
    ensure_dir(out_dir)?;
    let spec = cfg.model.build_spec()?;
    let (train, _) = load_datasets(cfg, seed)?;
    let init = build_model(&spec, seed)?;
    let targets = strip_followers(&spec, &cfg.resolve_targets(&spec)?)?;
    let assignment = assign_for_model(
        &init,
        cfg.csgd.scheme,
        &targets,
        subseed(seed, SEED_CLUSTERS),
    )?;
    let chi_initial = chi(&init, &assignment)?;
    let chi_threshold = chi_initial * cfg.sweep.chi_threshold_ratio;
    let tau = cfg.train.lr;

    let mut epsilons = cfg.sweep.epsilons.clone();
    if !epsilons.contains(&0.0) {
        epsilons.push(0.0);
    }

    let mut arms = Vec::new();
    for (arm_index, &epsilon) in epsilons.iter().enumerate() {
        let mut model = init.clone();
        let opt = CsgdOptimizer::new(&model, &assignment, cfg.train.weight_decay, epsilon)?;
        let mut log = MetricsLog::to_path(&out_dir.join(format!("sweep_arm{arm_index}.csv")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, SEED_BATCHES));
        let start = Instant::now();

        let mut crossing_step = None;
        let mut step = 0usize;
        'arm: loop {
            let order = train.epoch_order(&mut rng);
            for chunk in order.chunks(cfg.train.batch) {
                let (x, labels) = train.batch(chunk)?;
                let mut tape = GradTape::new();
                let logits = model.forward_train(&mut tape, &x, cfg.train.bn_momentum)?;
                let loss = tape.softmax_xent(&logits, &labels)?;
                let grads = tape.backward(&loss)?;
                opt.step(&mut model, &grads, tau)?;
                step += 1;

                let chi_now = chi(&model, &assignment)?;
                log.push(MetricsRecord {
                    epoch: 0,
                    step,
                    loss: Some(loss.item()? as f64),
                    chi: Some(chi_now),
                    lr: Some(tau as f64),
                    wall_secs: Some(start.elapsed().as_secs_f64()),
                    ..Default::default()
                })?;
                if chi_now <= chi_threshold {
                    crossing_step = Some(step);
                    break 'arm;
                }
                if step >= cfg.sweep.max_steps {
                    break 'arm;
                }
            }
        }

        // Every arm must end losslessly trimmable: snapping makes cluster
        // members identical, so the gate holds regardless of convergence.
        let (snapped, _) = snap_clusters(&model, &assignment, f32::MAX)?;
        let trimmed = trim_network(&snapped, &assignment)?;
        let max_logit_diff = verify_equivalence(
            &snapped,
            &trimmed,
            VERIFY_SAMPLES,
            subseed(seed, SEED_VERIFY),
        )?;
        if max_logit_diff > EQUIV_TOLERANCE {
            return Err(Error::EquivalenceGate {
                max_diff: max_logit_diff,
                tolerance: EQUIV_TOLERANCE,
            });
        }
        arms.push(SweepArm {
            epsilon,
            crossing_step,
            chi_final: chi(&model, &assignment)?,
            max_logit_diff,
        });
    }

    let outcome = SweepOutcome {
        chi_initial,
        chi_threshold,
        arms,
    };
    write_summary(&out_dir.join("sweep.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlimVsClipOutcome {
    pub base_flops: u64,
    pub slim_flops: u64,
    pub clip_flops: u64,
    /// |slim − clip| as a fraction of the base FLOPs.
    pub flops_gap: f64,
    pub slim_accuracy: f32,
    pub clip_accuracy: f32,
    /// `[internal, output]` widths per stage after each trim.
    pub slim_stage_widths: Vec<[usize; 2]>,
    pub clip_stage_widths: Vec<[usize; 2]>,
    pub slim: PruneOutcome,
    pub clip: PruneOutcome,
}

/// Prunes the same pretrained residual network two ways at matched FLOPs:
/// globally ("slim", every conv layer at the config ratio) and on the
/// blocks' internal layers only ("clip", constrained layers untouched),
/// with the clip width chosen so the two target costs agree as closely as
/// the integer widths allow.
pub fn slim_vs_clip(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<SlimVsClipOutcome> {
    ensure_dir(out_dir)?;
    let spec = cfg.model.build_spec()?;
    let base_cost = spec.cost()?;

    let baseline = train_baseline(cfg, &out_dir.join("base"), seed)?;
    let (base_model, _) = crate::checkpoint::load_checkpoint(&baseline.checkpoint)?;

    // Slim targets: the config ratio on every conv layer.
    let slim_targets = cfg.resolve_targets(&spec)?;
    let slim_spec = spec_with_widths(&spec, &slim_targets);
    let slim_cost = slim_spec.cost()?;

    // Clip targets: internal block layers only, keep fraction searched so
    // the clipped cost lands nearest the slim cost.
    let internal: Vec<(String, usize)> = spec
        .conv_widths()
        .into_iter()
        .filter(|(id, _)| id.contains('b') && id.ends_with("c1"))
        .collect();
    if internal.is_empty() {
        return Err(Error::InvalidConfig(
            "slim-vs-clip needs a residual model with internal block layers".into(),
        ));
    }
    let mut best: Option<(u64, BTreeMap<String, usize>)> = None;
    let granularity = 64u64;
    for num in 1..granularity {
        let candidate: BTreeMap<String, usize> = internal
            .iter()
            .map(|(id, c)| (id.clone(), apply_fraction(*c, num, granularity)))
            .collect();
        let cost = spec_with_widths(&spec, &candidate).cost()?;
        let gap = cost.flops.abs_diff(slim_cost.flops);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, candidate));
        }
    }
    let (_, clip_targets) = best.unwrap();
    let clip_cost = spec_with_widths(&spec, &clip_targets).cost()?;

    let slim = prune_pretrained(
        cfg,
        &base_model,
        out_dir,
        seed,
        &PruneRun {
            label: "slim",
            targets: Some(slim_targets),
            epsilon: None,
        },
    )?;
    let clip = prune_pretrained(
        cfg,
        &base_model,
        out_dir,
        seed,
        &PruneRun {
            label: "clip",
            targets: Some(clip_targets),
            epsilon: None,
        },
    )?;

    let slim_spec_after = spec_with_widths(&spec, &slim.widths_after.iter().cloned().collect());
    let clip_spec_after = spec_with_widths(&spec, &clip.widths_after.iter().cloned().collect());
    let outcome = SlimVsClipOutcome {
        base_flops: base_cost.flops,
        slim_flops: slim_cost.flops,
        clip_flops: clip_cost.flops,
        flops_gap: slim_cost.flops.abs_diff(clip_cost.flops) as f64 / base_cost.flops as f64,
        slim_accuracy: slim.post_trim_accuracy,
        clip_accuracy: clip.post_trim_accuracy,
        slim_stage_widths: stage_width_pairs(&slim_spec_after),
        clip_stage_widths: stage_width_pairs(&clip_spec_after),
        slim,
        clip,
    };
    write_summary(&out_dir.join("slim_vs_clip.json"), &outcome)?;
    Ok(outcome)
}
