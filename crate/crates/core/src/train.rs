//! Training orchestration. The encoder learns the auxiliary
//! classification task under the combined objective with color mix-up
//! and jitter augmentation; a seeded per-class holdout picks the best
//! epoch. The one-class model is then fit on encoded target-class
//! tiles with a second, stronger jitter pass.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::artifact::{EncoderArtifact, SvmArtifact};
use crate::augment::{
    apply_mixup, build_class_histograms, build_mixup_tables, color_jitter, JitterRanges,
    MixupTables,
};
use crate::config::{CenterMode, RunConfig};
use crate::error::{Error, Result};
use crate::loss::{batch_class_means, init_centers, update_centers, CenterState};
use crate::mat::Mat;
use crate::nn::{self, Batch, EncoderModel, ImageTensor, SgdState};
use crate::ocsvm::{self, AnomalyScore};
use crate::pipeline::{channel_means, normalize_tile};
use crate::rng::derive_rng;
use crate::tile::ImageTile;

/// Per-class share of tiles withheld for checkpoint selection.
pub const VALIDATION_FRACTION: f64 = 0.1;
/// Tiles sampled per class when building mix-up histograms.
pub const HISTOGRAM_BUDGET: usize = 200;
/// Inference batch size; grouping only, no effect on values.
const ENCODE_CHUNK: usize = 64;

const HOLDOUT_STREAM: u64 = 0x686f;
const EPOCH_STREAM: u64 = 0x6570;
const SVM_STREAM: u64 = 0x7376;

/// One epoch's record: mean cross-entropy per tile, mean lambda-weighted
/// center term per batch, their sum, plus holdout accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub center: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,cross_entropy,center_loss,total_loss,val_accuracy\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.cross_entropy, e.center, e.total, e.val_accuracy
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub artifact: EncoderArtifact,
    pub log: Vec<EpochLog>,
    /// Epoch whose checkpoint the artifact holds (earliest best).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn class_count(labels: &[usize]) -> Result<usize> {
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::parameter(
            "auxiliary training needs at least 2 classes; got fewer",
        ));
    }
    let n = present.len();
    if present != (0..n).collect::<Vec<_>>() {
        return Err(Error::parameter(format!(
            "class labels must be contiguous from 0, got {present:?}"
        )));
    }
    Ok(n)
}

fn center_subset(mode: CenterMode, target: usize, n: usize) -> Result<Vec<usize>> {
    match mode {
        CenterMode::TargetOnly => {
            if target >= n {
                return Err(Error::parameter(format!(
                    "target class {target} not among the {n} training classes"
                )));
            }
            Ok(vec![target])
        }
        CenterMode::AllClasses => Ok((0..n).collect()),
        CenterMode::ExcludeTarget => {
            let subset: Vec<usize> = (0..n).filter(|&k| k != target).collect();
            if subset.is_empty() {
                return Err(Error::parameter("excluding the target leaves no centered class"));
            }
            Ok(subset)
        }
    }
}

/// Seeded per-class holdout indices (sorted), roughly
/// [`VALIDATION_FRACTION`] of each class and at least one tile.
fn holdout_indices(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut held = Vec::new();
    for (k, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::parameter(format!(
                "class {k} has {} tiles; at least 2 are needed to hold out validation",
                members.len()
            )));
        }
        let take = ((members.len() as f64 * VALIDATION_FRACTION) as usize).max(1);
        let mut rng = derive_rng(seed, &[HOLDOUT_STREAM, k as u64]);
        let picks = rand::seq::index::sample(&mut rng, members.len(), take);
        held.extend(picks.iter().map(|p| members[p]));
    }
    held.sort_unstable();
    Ok(held)
}

/// The jitter-instead-of-mix-up variant keeps the configured
/// brightness/contrast ranges and adds the strong hue/saturation ones.
fn effective_jitter(cfg: &RunConfig) -> JitterRanges {
    let mut j = cfg.augment.jitter;
    if cfg.augment.hue_sat_only {
        let full = JitterRanges::full_color();
        j.saturation = full.saturation;
        j.hue = full.hue;
    }
    j
}

fn accuracy(model: &EncoderModel, inputs: &[ImageTensor], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (chunk_x, chunk_y) in inputs.chunks(ENCODE_CHUNK).zip(labels.chunks(ENCODE_CHUNK)) {
        let (_, logits) = nn::forward(model, chunk_x)?;
        for (row, &y) in logits.iter_rows().zip(chunk_y) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if best == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains the auxiliary classifier and returns the checkpoint with the
/// best holdout accuracy (earliest epoch on ties). `class_groups` maps
/// every class id to its stain group for mix-up; `tiles[i]` has label
/// `labels[i]`. Fully deterministic in `cfg.seed`.
pub fn train_encoder(
    tiles: &[ImageTile],
    labels: &[usize],
    class_groups: &BTreeMap<usize, usize>,
    cfg: &RunConfig,
) -> Result<TrainedEncoder> {
    if tiles.is_empty() || tiles.len() != labels.len() {
        return Err(Error::shape(format!(
            "got {} tiles and {} labels",
            tiles.len(),
            labels.len()
        )));
    }
    cfg.validate()?;
    let n = class_count(labels)?;
    let subset = center_subset(cfg.objective.center_mode, cfg.target_class, n)?;

    let held = holdout_indices(labels, n, cfg.seed)?;
    let mut is_held = vec![false; tiles.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let train_idx: Vec<usize> = (0..tiles.len()).filter(|&i| !is_held[i]).collect();

    let means = channel_means(train_idx.iter().map(|&i| &tiles[i]))?;

    let mixup: Option<MixupTables> = if cfg.augment.mixup {
        let mut by_class: BTreeMap<usize, Vec<&ImageTile>> = BTreeMap::new();
        for &i in &train_idx {
            by_class.entry(labels[i]).or_default().push(&tiles[i]);
        }
        for k in 0..n {
            if !class_groups.contains_key(&k) {
                return Err(Error::parameter(format!("class {k} has no stain group")));
            }
        }
        let hists = build_class_histograms(&by_class, HISTOGRAM_BUDGET, cfg.seed)?;
        Some(build_mixup_tables(&hists, class_groups)?)
    } else {
        None
    };
    let jitter = effective_jitter(cfg);

    let mut model = nn::init_model(cfg.seed, cfg.encoder.feature_dim, n)?;
    let mut sgd = SgdState::new(&model, cfg.encoder.learning_rate, cfg.encoder.momentum)?;

    // Centers start at the initial model's class means over the clean
    // training tiles.
    let init_inputs: Vec<ImageTensor> =
        train_idx.iter().map(|&i| normalize_tile(&tiles[i], means)).collect();
    let init_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut centers =
        init_centers(&model, &init_inputs, &init_labels, subset, cfg.objective.beta)?;
    drop(init_inputs);

    let val_inputs: Vec<ImageTensor> =
        held.iter().map(|&i| normalize_tile(&tiles[i], means)).collect();
    let val_labels: Vec<usize> = held.iter().map(|&i| labels[i]).collect();

    let mut log = Vec::with_capacity(cfg.encoder.epochs);
    let mut best: Option<(f64, usize, EncoderModel, CenterState)> = None;
    let mut order = train_idx.clone();

    for epoch in 0..cfg.encoder.epochs {
        let mut rng = derive_rng(cfg.seed, &[EPOCH_STREAM, epoch as u64]);
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0);
        let mut batches = 0usize;
        let mut samples = 0usize;
        for ids in order.chunks(cfg.encoder.batch_size) {
            let mut inputs = Vec::with_capacity(ids.len());
            let mut batch_labels = Vec::with_capacity(ids.len());
            for &i in ids {
                let mut t = tiles[i].clone();
                if let Some(tables) = &mixup {
                    t = apply_mixup(&t, labels[i], tables, &mut rng)?.0;
                }
                let t = color_jitter(&t, &jitter, &mut rng)?;
                inputs.push(normalize_tile(&t, means));
                batch_labels.push(labels[i]);
            }
            let batch = Batch { inputs, labels: batch_labels };
            // The objective is the literal batch-summed cross-entropy
            // plus the lambda-weighted center term. Summing (rather
            // than averaging) the sample losses is what lets the
            // near-zero head escape its flat start within the epoch
            // budget; see the note on HEAD_INIT_STD.
            let (lb, grads) = nn::backward(&model, &batch, &centers, cfg.objective.lambda)?;
            nn::sgd_step(&mut model, &grads, &mut sgd)?;

            // The running centers track the post-update features of the
            // same batch.
            let feats = nn::features(&model, &batch.inputs)?;
            let bm = batch_class_means(&feats, &batch.labels)?;
            update_centers(&mut centers, &bm)?;

            sums.0 += lb.cross_entropy;
            sums.1 += lb.center;
            samples += batch.inputs.len();
            batches += 1;
        }

        let val_accuracy = accuracy(&model, &val_inputs, &val_labels)?;
        // Log mean cross-entropy per tile and the mean lambda-weighted
        // center term per batch, so curves are comparable across batch
        // sizes.
        let ce = sums.0 / samples as f64;
        let center = sums.1 / batches as f64;
        log.push(EpochLog {
            epoch,
            cross_entropy: ce,
            center,
            total: ce + center,
            val_accuracy,
        });
        let improved = best.as_ref().map_or(true, |(acc, ..)| val_accuracy > *acc);
        if improved {
            best = Some((val_accuracy, epoch, model.clone(), centers.clone()));
        }
    }

    let (best_val_accuracy, best_epoch, best_model, best_centers) =
        best.expect("at least one epoch ran");
    Ok(TrainedEncoder {
        artifact: EncoderArtifact {
            model: best_model,
            centers: best_centers,
            channel_means: means,
        },
        log,
        best_epoch,
        best_val_accuracy,
    })
}

/// Encodes clean tiles with the artifact's normalization and encoder.
pub fn encode_tiles(enc: &EncoderArtifact, tiles: &[ImageTile]) -> Result<Mat> {
    let mut out = Mat::zeros(tiles.len(), enc.model.feature_dim);
    let mut row = 0;
    for chunk in tiles.chunks(ENCODE_CHUNK) {
        let inputs: Vec<ImageTensor> =
            chunk.iter().map(|t| normalize_tile(t, enc.channel_means)).collect();
        let feats = nn::features(&enc.model, &inputs)?;
        for r in feats.iter_rows() {
            out.row_mut(row).copy_from_slice(r);
            row += 1;
        }
    }
    Ok(out)
}

pub fn score_encoded(svm: &SvmArtifact, features: &Mat) -> Result<Vec<AnomalyScore>> {
    features.iter_rows().map(|r| svm.model.decision(r)).collect()
}

/// Encode-then-score convenience for corpus splits.
pub fn score_tiles(
    enc: &EncoderArtifact,
    svm: &SvmArtifact,
    tiles: &[ImageTile],
) -> Result<Vec<AnomalyScore>> {
    score_encoded(svm, &encode_tiles(enc, tiles)?)
}

/// Fit diagnostics recorded alongside the one-class artifact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmTrainLog {
    pub train_tiles: usize,
    /// Feature rows fitted: one clean plus one jittered per tile.
    pub feature_count: usize,
    pub support_count: usize,
    pub free_support_count: usize,
    pub pair_updates: u64,
    pub kkt_residual: f64,
    pub gamma: f64,
    /// Fraction of training features scoring anomalous; bounded by nu
    /// up to solver tolerance.
    pub train_anomalous_fraction: f64,
}

/// Fits the one-class model on target-class tiles. Each tile
/// contributes its clean encoding and one strongly jittered encoding,
/// so the normal region covers the color variation scoring will meet.
pub fn train_ocsvm(
    enc: &EncoderArtifact,
    tiles: &[ImageTile],
    cfg: &RunConfig,
) -> Result<(SvmArtifact, SvmTrainLog)> {
    if tiles.is_empty() {
        return Err(Error::parameter("one-class training needs at least one tile"));
    }
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, &[SVM_STREAM]);
    let ranges = JitterRanges::full_color();
    let mut augmented: Vec<ImageTile> = Vec::with_capacity(2 * tiles.len());
    augmented.extend(tiles.iter().cloned());
    for t in tiles {
        augmented.push(color_jitter(t, &ranges, &mut rng)?);
    }

    let features = encode_tiles(enc, &augmented)?;
    let (model, report) =
        ocsvm::fit_with_report(&features, cfg.svm.nu, cfg.svm.gamma.to_choice())?;

    let anomalous = features
        .iter_rows()
        .filter(|r| model.decision(r).map(|s| s.is_anomalous).unwrap_or(true))
        .count();
    let log = SvmTrainLog {
        train_tiles: tiles.len(),
        feature_count: features.rows(),
        support_count: report.support_count,
        free_support_count: report.free_support_count,
        pair_updates: report.pair_updates,
        kkt_residual: report.kkt_residual,
        gamma: model.gamma,
        train_anomalous_fraction: anomalous as f64 / features.rows() as f64,
    };
    Ok((SvmArtifact { model }, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::encode_encoder;
    use crate::config::GammaSetting;
    use crate::synth::{self, tile_seed};

    /// Four classes, two stain groups, in-memory tiles.
    fn tiny_dataset(per_class: usize, side: usize) -> (Vec<ImageTile>, Vec<usize>, BTreeMap<usize, usize>) {
        let all = synth::default_classes();
        let picks = [0usize, 1, 4, 5];
        let mut tiles = Vec::new();
        let mut labels = Vec::new();
        let mut groups = BTreeMap::new();
        for (new_id, &ci) in picks.iter().enumerate() {
            groups.insert(new_id, all[ci].group);
            for i in 0..per_class {
                tiles.push(
                    synth::gen_tile(&all[ci], side, tile_seed(5, 0, ci as u64, i as u64)).unwrap(),
                );
                labels.push(new_id);
            }
        }
        (tiles, labels, groups)
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 3;
        cfg.encoder.feature_dim = 8;
        cfg.encoder.epochs = 2;
        cfg.encoder.batch_size = 16;
        cfg
    }

    #[test]
    fn training_runs_logs_and_is_deterministic() {
        let (tiles, labels, groups) = tiny_dataset(20, 32);
        let cfg = tiny_config();
        let a = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();
        let b = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();

        assert_eq!(a.log.len(), 2);
        for e in &a.log {
            assert!(e.cross_entropy.is_finite() && e.total >= 0.0);
            assert!((0.0..=1.0).contains(&e.val_accuracy));
        }
        assert_eq!(a.best_epoch, a.log.iter().enumerate()
            .max_by(|x, y| x.1.val_accuracy.total_cmp(&y.1.val_accuracy).then(y.0.cmp(&x.0)))
            .unwrap().0, "earliest epoch with max accuracy");
        assert_eq!(
            encode_encoder(&a.artifact),
            encode_encoder(&b.artifact),
            "same seed, same artifact bytes"
        );

        let mut cfg2 = cfg.clone();
        cfg2.seed = 4;
        let c = train_encoder(&tiles, &labels, &groups, &cfg2).unwrap();
        assert_ne!(encode_encoder(&a.artifact), encode_encoder(&c.artifact));
    }

    #[test]
    fn lambda_zero_zeroes_the_center_column() {
        let (tiles, labels, groups) = tiny_dataset(12, 32);
        let mut cfg = tiny_config();
        cfg.encoder.epochs = 1;
        cfg.objective.lambda = 0.0;
        let r = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();
        for e in &r.log {
            assert_eq!(e.center, 0.0);
            assert_eq!(e.total, e.cross_entropy);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (tiles, mut labels, groups) = tiny_dataset(8, 32);
        let cfg = tiny_config();

        // Single class.
        let ones = vec![0usize; tiles.len()];
        assert!(train_encoder(&tiles, &ones, &groups, &cfg).is_err());

        // Non-contiguous ids.
        for l in labels.iter_mut() {
            if *l == 3 {
                *l = 7;
            }
        }
        assert!(train_encoder(&tiles, &labels, &groups, &cfg).is_err());

        // Mix-up without a stain group for some class.
        let (tiles, labels, mut groups) = tiny_dataset(8, 32);
        groups.remove(&2);
        assert!(train_encoder(&tiles, &labels, &groups, &cfg).is_err());

        // Target missing under target-only centering.
        let (tiles, labels, groups) = tiny_dataset(8, 32);
        let mut cfg2 = cfg.clone();
        cfg2.target_class = 9;
        assert!(train_encoder(&tiles, &labels, &groups, &cfg2).is_err());
    }

    #[test]
    fn center_subset_modes() {
        assert_eq!(center_subset(CenterMode::TargetOnly, 2, 4).unwrap(), vec![2]);
        assert_eq!(center_subset(CenterMode::AllClasses, 2, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(center_subset(CenterMode::ExcludeTarget, 2, 4).unwrap(), vec![0, 1, 3]);
        assert!(center_subset(CenterMode::TargetOnly, 4, 4).is_err());
    }

    #[test]
    fn holdout_is_seeded_and_sized() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let a = holdout_indices(&labels, 4, 7).unwrap();
        let b = holdout_indices(&labels, 4, 7).unwrap();
        let c = holdout_indices(&labels, 4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 4, "10% of 10 per class, at least 1");
        let mut per_class = [0usize; 4];
        for &i in &a {
            per_class[labels[i]] += 1;
        }
        assert_eq!(per_class, [1, 1, 1, 1]);
    }

    #[test]
    fn ocsvm_training_respects_nu_and_is_deterministic() {
        let (tiles, labels, groups) = tiny_dataset(15, 32);
        let cfg = tiny_config();
        let enc = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();

        let target: Vec<ImageTile> = tiles
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 0)
            .map(|(t, _)| t.clone())
            .take(12)
            .collect();

        let mut cfg_svm = cfg.clone();
        cfg_svm.svm.nu = 0.3;
        let (svm_a, log_a) = train_ocsvm(&enc.artifact, &target, &cfg_svm).unwrap();
        let (svm_b, _) = train_ocsvm(&enc.artifact, &target, &cfg_svm).unwrap();
        assert_eq!(svm_a.model, svm_b.model);

        assert_eq!(log_a.feature_count, 2 * target.len());
        assert!(log_a.train_anomalous_fraction <= 0.3 + 2.0 / log_a.feature_count as f64);
        assert!(log_a.support_count as f64 >= 0.3 * log_a.feature_count as f64 - 1.0);

        // nu = 1 forces every point to the box cap, so all are support.
        cfg_svm.svm.nu = 1.0;
        let (_, log_full) = train_ocsvm(&enc.artifact, &target, &cfg_svm).unwrap();
        assert_eq!(log_full.support_count, log_full.feature_count);
    }

    /// Stability probe at near-default hyperparameters: prints the loss
    /// curve so divergence or dead plateaus are visible. Run with
    /// `cargo test -p anomatile --lib -- --ignored stability --nocapture`.
    #[test]
    #[ignore]
    fn training_stability_probe() {
        let all = synth::default_classes();
        let per_class: usize =
            std::env::var("PROBE_PER_CLASS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
        let mut tiles = Vec::new();
        let mut labels = Vec::new();
        let mut groups = BTreeMap::new();
        for (ci, class) in all.iter().enumerate() {
            groups.insert(ci, class.group);
            for i in 0..per_class {
                tiles.push(
                    synth::gen_tile(class, 64, tile_seed(77, 0, ci as u64, i as u64)).unwrap(),
                );
                labels.push(ci);
            }
        }
        let mut cfg = RunConfig::default();
        cfg.seed = 1;
        let t0 = std::time::Instant::now();
        let r = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();
        for e in &r.log {
            println!(
                "epoch {:2}  ce {:9.3}  center {:8.3}  total {:9.3}  val_acc {:.3}",
                e.epoch, e.cross_entropy, e.center, e.total, e.val_accuracy
            );
        }
        println!(
            "best epoch {} val_acc {:.3}  ({} tiles, {:.1}s)",
            r.best_epoch,
            r.best_val_accuracy,
            tiles.len(),
            t0.elapsed().as_secs_f64()
        );

        // Fresh-tile confusion matrix: rows true class, columns argmax.
        let per = 40usize;
        let mut confusion = vec![vec![0usize; all.len()]; all.len()];
        for (ci, class) in all.iter().enumerate() {
            let fresh: Vec<ImageTile> = (0..per)
                .map(|i| {
                    synth::gen_tile(class, 64, tile_seed(77, 7, ci as u64, i as u64)).unwrap()
                })
                .collect();
            let inputs: Vec<nn::ImageTensor> = fresh
                .iter()
                .map(|t| crate::pipeline::normalize_tile(t, r.artifact.channel_means))
                .collect();
            for chunk in inputs.chunks(ENCODE_CHUNK) {
                let (_, logits) = nn::forward(&r.artifact.model, chunk).unwrap();
                for row in logits.iter_rows() {
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap();
                    confusion[ci][best] += 1;
                }
            }
        }
        for (ci, row) in confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:3}")).collect();
            println!("true {ci}: [{}]", cells.join(" "));
        }
    }

    /// Reports whether pooled features of an untrained encoder already
    /// separate the four classes of one stain group: nearest-class-mean
    /// accuracy on clean and on augmented tiles. If this sits at chance
    /// the classifier head has no linear shortcut and training must
    /// first reshape the convolution stack.
    #[test]
    #[ignore]
    fn feature_probe() {
        let all = synth::default_classes();
        let per = 120usize;
        let fit = 80usize;
        let mut tiles: Vec<Vec<ImageTile>> = Vec::new();
        for ci in 0..4usize {
            tiles.push(
                (0..per)
                    .map(|i| {
                        synth::gen_tile(&all[ci], 64, tile_seed(77, 21, ci as u64, i as u64))
                            .unwrap()
                    })
                    .collect(),
            );
        }
        let means =
            crate::pipeline::channel_means(tiles.iter().flatten().collect::<Vec<_>>().into_iter())
                .unwrap();
        let model = nn::init_model(1, 32, 8).unwrap();

        let by_class: BTreeMap<usize, Vec<&ImageTile>> =
            tiles.iter().enumerate().map(|(ci, v)| (ci, v.iter().collect())).collect();
        let groups: BTreeMap<usize, usize> = (0..4).map(|ci| (ci, 0usize)).collect();
        let hists = build_class_histograms(&by_class, 200_000, 5).unwrap();
        let tables = build_mixup_tables(&hists, &groups).unwrap();
        let mut rng = derive_rng(9, &[41]);
        let jit = JitterRanges::brightness_contrast();

        for aug in [false, true] {
            let feats: Vec<Vec<Vec<f64>>> = tiles
                .iter()
                .map(|v| {
                    v.iter()
                        .map(|t| {
                            let t = if aug {
                                let (mixed, _) = apply_mixup(t, 0, &tables, &mut rng).unwrap();
                                color_jitter(&mixed, &jit, &mut rng).unwrap()
                            } else {
                                t.clone()
                            };
                            let x = crate::pipeline::normalize_tile(&t, means);
                            let f = nn::features(&model, std::slice::from_ref(&x)).unwrap();
                            let row = f.iter_rows().next().unwrap().to_vec();
                            row
                        })
                        .collect()
                })
                .collect();
            let d = feats[0][0].len();
            // Standardize per dimension over the fit set so no single
            // large-scale feature dominates the distance.
            let mut mu = vec![0.0f64; d];
            let mut sd = vec![0.0f64; d];
            let nfit = (4 * fit) as f64;
            for ci in 0..4 {
                for f in &feats[ci][..fit] {
                    for (m, v) in mu.iter_mut().zip(f) {
                        *m += v / nfit;
                    }
                }
            }
            for ci in 0..4 {
                for f in &feats[ci][..fit] {
                    for k in 0..d {
                        sd[k] += (f[k] - mu[k]) * (f[k] - mu[k]) / nfit;
                    }
                }
            }
            for s in sd.iter_mut() {
                *s = s.sqrt().max(1e-12);
            }
            let z = |f: &[f64], k: usize| (f[k] - mu[k]) / sd[k];
            let mut centers = vec![vec![0.0f64; d]; 4];
            for ci in 0..4 {
                for f in &feats[ci][..fit] {
                    for k in 0..d {
                        centers[ci][k] += z(f, k) / fit as f64;
                    }
                }
            }
            let mut hits = 0usize;
            let mut total = 0usize;
            let mut confusion = [[0usize; 4]; 4];
            for ci in 0..4 {
                for f in &feats[ci][fit..] {
                    let best = (0..4)
                        .min_by(|&a, &b| {
                            let da: f64 = (0..d)
                                .map(|k| (centers[a][k] - z(f, k)) * (centers[a][k] - z(f, k)))
                                .sum();
                            let db: f64 = (0..d)
                                .map(|k| (centers[b][k] - z(f, k)) * (centers[b][k] - z(f, k)))
                                .sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    confusion[ci][best] += 1;
                    hits += usize::from(best == ci);
                    total += 1;
                }
            }
            println!(
                "untrained features, {} tiles: nearest-mean acc {:.3}",
                if aug { "augmented" } else { "clean" },
                hits as f64 / total as f64
            );
            for (ci, row) in confusion.iter().enumerate() {
                println!("  true {ci}: {row:?}");
            }
        }
    }

    /// Full-pipeline probe at default hyperparameters: encoder on the
    /// auxiliary task, one-class SVM on the target class, balanced
    /// accuracy and AUROC on held-out normal and lesioned tiles. Run
    /// with `cargo test -p anomatile --lib --release -- --ignored
    /// pipeline --nocapture`.
    #[test]
    #[ignore]
    fn pipeline_probe() {
        use crate::metrics::{auroc, balanced_accuracy, LabeledScores};
        use crate::synth::{inject_lesion, lesion_seed, LesionKind, LesionSpec};

        let all = synth::default_classes();
        let per_class: usize =
            std::env::var("PROBE_PER_CLASS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
        let corpus_seed: u64 =
            std::env::var("PROBE_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(90);
        let target = 0usize;
        let side = 64;

        let t0 = std::time::Instant::now();
        let mut tiles = Vec::new();
        let mut labels = Vec::new();
        let mut groups = BTreeMap::new();
        for (ci, class) in all.iter().enumerate() {
            groups.insert(ci, class.group);
            for i in 0..per_class {
                tiles.push(
                    synth::gen_tile(class, side, tile_seed(corpus_seed, 0, ci as u64, i as u64))
                        .unwrap(),
                );
                labels.push(ci);
            }
        }
        let spec = &all[target];
        let gen_split = |split: u64, n: usize| -> Vec<ImageTile> {
            (0..n)
                .map(|i| {
                    synth::gen_tile(
                        spec,
                        side,
                        tile_seed(corpus_seed, split, target as u64, i as u64),
                    )
                    .unwrap()
                })
                .collect()
        };
        let svm_tiles = gen_split(1, 400);
        let normal = gen_split(2, 150);
        let anomalous: Vec<ImageTile> = gen_split(3, 150)
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let lspec = LesionSpec {
                    kind: LesionKind::ALL[i % 3],
                    coverage: 0.3,
                    intensity: 0.85,
                };
                let ts = tile_seed(corpus_seed, 3, target as u64, i as u64);
                inject_lesion(t, &lspec, lesion_seed(ts)).unwrap().0
            })
            .collect();
        println!("corpus built in {:.1}s", t0.elapsed().as_secs_f64());

        let mut cfg = RunConfig::default();
        cfg.seed = 1;
        let t1 = std::time::Instant::now();
        let enc = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();
        println!(
            "encoder best epoch {} val_acc {:.3}  ({:.1}s)",
            enc.best_epoch,
            enc.best_val_accuracy,
            t1.elapsed().as_secs_f64()
        );

        let t2 = std::time::Instant::now();
        let (svm, log) = train_ocsvm(&enc.artifact, &svm_tiles, &cfg).unwrap();
        println!(
            "svm: {} SVs / {} rows, gamma {:.4}, train outlier frac {:.3}  ({:.1}s)",
            log.support_count,
            log.feature_count,
            log.gamma,
            log.train_anomalous_fraction,
            t2.elapsed().as_secs_f64()
        );

        let mut scores = Vec::new();
        let mut truth = Vec::new();
        for s in score_tiles(&enc.artifact, &svm, &normal).unwrap() {
            scores.push(s.score);
            truth.push(false);
        }
        for s in score_tiles(&enc.artifact, &svm, &anomalous).unwrap() {
            scores.push(s.score);
            truth.push(true);
        }
        let data = LabeledScores::new(scores.clone(), truth).unwrap();
        let bacc = balanced_accuracy(&data, 0.0).unwrap();
        let auc = auroc(&data).unwrap();
        println!(
            "pipeline bacc {:.4}  auroc {:.4}  (total {:.1}s)",
            bacc,
            auc,
            t0.elapsed().as_secs_f64()
        );
        let n_norm = normal.len();
        for (ki, kind) in LesionKind::ALL.iter().enumerate() {
            let mut s = scores[..n_norm].to_vec();
            let mut t = vec![false; n_norm];
            let mut caught = 0usize;
            let mut total = 0usize;
            for (i, &sc) in scores[n_norm..].iter().enumerate() {
                if i % 3 == ki {
                    s.push(sc);
                    t.push(true);
                    total += 1;
                    if sc < 0.0 {
                        caught += 1;
                    }
                }
            }
            let d = LabeledScores::new(s, t).unwrap();
            println!(
                "  {:8} auroc {:.4}  detected {}/{}",
                kind.name(),
                auroc(&d).unwrap(),
                caught,
                total
            );
        }
    }

    #[test]
    fn fixed_gamma_is_honored() {
        let (tiles, labels, groups) = tiny_dataset(10, 32);
        let cfg = tiny_config();
        let enc = train_encoder(&tiles, &labels, &groups, &cfg).unwrap();
        let target: Vec<ImageTile> =
            tiles.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(t, _)| t.clone()).collect();
        let mut cfg2 = cfg;
        cfg2.svm.gamma = GammaSetting::Fixed(0.5);
        let (svm, log) = train_ocsvm(&enc.artifact, &target, &cfg2).unwrap();
        assert_eq!(svm.model.gamma, 0.5);
        assert_eq!(log.gamma, 0.5);
    }
}
