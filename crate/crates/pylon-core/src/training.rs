//! Deterministic training: BCE loss, Adam, reduce-on-plateau LR schedule
//! and lowest-validation-loss model selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, load_png_gray, resize_bicubic, DatasetManifest, Split};
use crate::error::{PylonError, Result};
use crate::models::{Mode, Model};
use crate::tensor::ops::bce_with_logits;
use crate::tensor::{adam_step, AdamState, Tensor4};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub stop_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            plateau_factor: 0.2,
            plateau_patience: 1,
            plateau_min_delta: 1e-4,
            stop_lr: 1e-6,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(PylonError::Config(format!(
                "plateau_factor {} must be in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.stop_lr >= self.lr0 {
            return Err(PylonError::Config(format!(
                "stop_lr {} must be below lr0 {}",
                self.stop_lr, self.lr0
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(PylonError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Reduce-on-plateau bookkeeping.
#[derive(Debug, Clone)]
pub struct PlateauState {
    best: f64,
    stale_epochs: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }
}

impl PlateauState {
    /// Feed one epoch's validation loss; returns the (possibly reduced) lr.
    /// The loss must improve on the best seen by more than `min_delta`;
    /// otherwise, after more than `patience` stale epochs, lr is multiplied
    /// by `factor` and the stale counter resets.
    pub fn reduce_on_plateau(&mut self, val_loss: f64, lr: f64, cfg: &TrainConfig) -> f64 {
        if val_loss < self.best - cfg.plateau_min_delta {
            self.best = val_loss;
            self.stale_epochs = 0;
            lr
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs > cfg.plateau_patience {
                self.stale_epochs = 0;
                lr * cfg.plateau_factor
            } else {
                lr
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).map(|e| e.val_loss)
    }
}

/// Named deterministic RNG stream: independent sequences for init,
/// shuffling and augmentation derived from one experiment seed.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha20Rng {
    // FNV-1a over the stream name picks the ChaCha stream id.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// A fully materialized split: images as (1,1,h,w) tensors plus multi-label
/// target vectors in class order.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub images: Vec<Tensor4>,
    pub labels: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    pub n_classes: usize,
}

impl InMemoryDataset {
    pub fn from_manifest(
        manifest: &DatasetManifest,
        root: &Path,
        split: Split,
        input_size: usize,
    ) -> Result<InMemoryDataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for rec in manifest.split_records(split) {
            let img = load_png_gray(&root.join(&rec.image_path))?;
            let img = resize_bicubic(&img, input_size, input_size)?;
            images.push(img);
            labels.push(
                manifest
                    .label_vector(rec)
                    .into_iter()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .collect(),
            );
            ids.push(rec.image_id());
        }
        Ok(InMemoryDataset {
            images,
            labels,
            ids,
            n_classes: manifest.classes.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn batch(&self, idx: &[usize], aug: Option<&mut ChaCha20Rng>) -> Result<(Tensor4, Tensor4)> {
        let (h, w) = (self.images[idx[0]].h, self.images[idx[0]].w);
        let mut x = Tensor4::zeros(idx.len(), 1, h, w);
        let mut t = Tensor4::zeros(idx.len(), self.n_classes, 1, 1);
        let mut aug = aug;
        for (bi, &i) in idx.iter().enumerate() {
            let img = match aug.as_deref_mut() {
                Some(rng) => augment(&self.images[i], rng)?,
                None => self.images[i].clone(),
            };
            let start = x.idx(bi, 0, 0, 0);
            x.data[start..start + h * w].copy_from_slice(&img.data);
            for (ci, &l) in self.labels[i].iter().enumerate() {
                *t.at_mut(bi, ci, 0, 0) = l;
            }
        }
        Ok((x, t))
    }
}

/// Mean BCE loss of a model over a dataset in eval mode.
pub fn evaluate_loss(model: &Model, set: &InMemoryDataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, t) = set.batch(chunk, None)?;
        let out = model.infer(&x)?;
        total += bce_with_logits(&out.logits, &t)? * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Train with seeded shuffling, Adam and the plateau schedule. The model is
/// left holding the weights of its best-validation epoch; when `ckpt_path`
/// is given that snapshot is also saved there.
pub fn fit(
    model: &mut Model,
    train: &InMemoryDataset,
    val: &InMemoryDataset,
    cfg: &TrainConfig,
    ckpt_path: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(PylonError::Config("fit: train and val sets must be non-empty".into()));
    }

    let mut shuffle_rng = stream_rng(cfg.seed, "shuffle");
    let mut augment_rng = stream_rng(cfg.seed, "augment");
    let mut adam = AdamState::new(model.params(), cfg.lr0);
    let mut plateau = PlateauState::default();
    let mut log = TrainLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<(Vec<Tensor4>, Vec<(Vec<f64>, Vec<f64>)>)> = None;

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut train_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug = cfg.augment.then_some(&mut augment_rng);
            let (x, t) = train.batch(chunk, aug)?;
            let mut pass = model.forward_pass(&x, Mode::Train)?;
            let loss_node = pass.graph.bce_loss(pass.logits, t)?;
            let loss = pass.graph.value(loss_node).data[0];
            if !loss.is_finite() {
                return Err(PylonError::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            train_loss += loss * chunk.len() as f64;
            model.zero_grads();
            model.backward_from(&pass, loss_node)?;
            adam_step(model.params_mut(), &mut adam)?;
            model.apply_bn_updates(&pass.bn_updates);
        }
        train_loss /= train.len() as f64;

        let val_loss = evaluate_loss(model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(PylonError::Numerical(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }

        if val_loss < best_val {
            best_val = val_loss;
            log.best_epoch = epoch;
            best_snapshot = Some((
                model.params().iter().map(|p| p.value.clone()).collect(),
                model
                    .bn_stats()
                    .iter()
                    .map(|s| (s.mean.clone(), s.var.clone()))
                    .collect(),
            ));
        }

        let lr_before = adam.lr;
        adam.lr = plateau.reduce_on_plateau(val_loss, adam.lr, cfg);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: lr_before,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if adam.lr < cfg.stop_lr {
            break;
        }
    }

    if let Some((params, stats)) = best_snapshot {
        for (p, v) in model.params_mut().iter_mut().zip(params) {
            p.value = v;
        }
        for (s, (m, v)) in model.bn_stats_mut().iter_mut().zip(stats) {
            s.mean = m;
            s.var = v;
        }
    }
    if let Some(path) = ckpt_path {
        model.save(path)?;
    }
    Ok(log)
}

/// Mean and (population) standard deviation, the "m ± s" table convention.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderConfig, PylonConfig, VariantKind};

    fn plateau_trajectory(losses: &[f64], cfg: &TrainConfig) -> Vec<f64> {
        let mut st = PlateauState::default();
        let mut lr = cfg.lr0;
        let mut out = Vec::new();
        for &l in losses {
            lr = st.reduce_on_plateau(l, lr, cfg);
            out.push(lr);
        }
        out
    }

    #[test]
    fn plateau_triggers_after_epoch_three_on_flat_losses() {
        let cfg = TrainConfig::default();
        let lrs = plateau_trajectory(&[1.0, 1.0, 1.0], &cfg);
        assert_eq!(lrs, vec![1e-4, 1e-4, 2e-5]);
    }

    #[test]
    fn strictly_decreasing_losses_never_reduce() {
        let cfg = TrainConfig::default();
        let losses: Vec<f64> = (0..10).map(|i| 1.0 - 0.01 * i as f64).collect();
        let lrs = plateau_trajectory(&losses, &cfg);
        assert!(lrs.iter().all(|&l| l == 1e-4));
    }

    #[test]
    fn repeated_plateaus_walk_the_ladder_to_stop() {
        // 1e-4 -> 2e-5 -> 4e-6 -> 8e-7; the last is below the 1e-6 stop lr.
        let cfg = TrainConfig::default();
        let mut st = PlateauState::default();
        let mut lr = cfg.lr0;
        let mut reductions = Vec::new();
        for _ in 0..20 {
            let before = lr;
            lr = st.reduce_on_plateau(1.0, lr, &cfg);
            if lr != before {
                reductions.push(lr);
            }
            if lr < cfg.stop_lr {
                break;
            }
        }
        assert_eq!(reductions, vec![2e-5, 4.000000000000001e-6, 8.000000000000002e-7]);
        assert!(*reductions.last().unwrap() < 1e-6);
    }

    #[test]
    fn sub_min_delta_improvements_count_as_plateau() {
        let cfg = TrainConfig::default();
        let lrs = plateau_trajectory(&[1.0, 0.99995, 0.99991], &cfg);
        assert_eq!(lrs[2], 2e-5);
    }

    #[test]
    fn stream_rngs_are_independent_and_reproducible() {
        use rand::Rng;
        let a: f64 = stream_rng(5, "shuffle").gen();
        let b: f64 = stream_rng(5, "shuffle").gen();
        let c: f64 = stream_rng(5, "augment").gen();
        let d: f64 = stream_rng(6, "shuffle").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn same_seed_same_shuffle_order() {
        use rand::seq::SliceRandom;
        let mut o1: Vec<usize> = (0..50).collect();
        let mut o2: Vec<usize> = (0..50).collect();
        o1.shuffle(&mut stream_rng(9, "shuffle"));
        o2.shuffle(&mut stream_rng(9, "shuffle"));
        assert_eq!(o1, o2);
    }

    fn micro_model(seed: u64) -> Model {
        let enc = EncoderConfig {
            in_channels: 1,
            stage_channels: [4, 8, 8, 16],
            input_size: 64,
        };
        let cfg = PylonConfig {
            n_classes: 2,
            decoder_channels: 8,
            ..Default::default()
        };
        Model::build(VariantKind::Pylon, enc, cfg, seed).unwrap()
    }

    fn micro_dataset(n: usize, seed: u64) -> InMemoryDataset {
        use rand::Rng;
        let mut rng = stream_rng(seed, "data");
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let has_blob = i % 2 == 0;
            let mut img = Tensor4::filled(1, 1, 64, 64, 0.5);
            if has_blob {
                let cy = rng.gen_range(16..48);
                let cx = rng.gen_range(16..48);
                for y in cy - 8..cy + 8 {
                    for x in cx - 8..cx + 8 {
                        *img.at_mut(0, 0, y, x) = 0.9;
                    }
                }
            }
            images.push(img);
            labels.push(vec![if has_blob { 1.0 } else { 0.0 }, 0.0]);
            ids.push(format!("m{i}"));
        }
        InMemoryDataset {
            images,
            labels,
            ids,
            n_classes: 2,
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let train = micro_dataset(8, 1);
        let val = micro_dataset(4, 2);
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let mut m1 = micro_model(7);
        let log1 = fit(&mut m1, &train, &val, &cfg, None).unwrap();
        let mut m2 = micro_model(7);
        let log2 = fit(&mut m2, &train, &val, &cfg, None).unwrap();
        for (a, b) in log1.epochs.iter().zip(&log2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        }
        for (p, q) in m1.params().iter().zip(m2.params()) {
            assert_eq!(p.value.data, q.value.data);
        }
    }

    #[test]
    fn loss_decreases_over_first_steps_on_fixed_batch() {
        let train = micro_dataset(4, 5);
        let val = micro_dataset(4, 6);
        let mut model = micro_model(11);
        let cfg = TrainConfig {
            max_epochs: 10,
            batch_size: 4,
            lr0: 1e-3,
            seed: 0,
            ..Default::default()
        };
        let log = fit(&mut model, &train, &val, &cfg, None).unwrap();
        let first = log.epochs.first().unwrap().train_loss;
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_val_loss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let train = micro_dataset(8, 1);
        let val = micro_dataset(4, 2);
        let mut model = micro_model(3);
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        fit(&mut model, &train, &val, &cfg, Some(&path)).unwrap();
        let loaded = Model::load(&path).unwrap();
        let a = evaluate_loss(&model, &val, 4).unwrap();
        let b = evaluate_loss(&loaded, &val, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (1.25f64).sqrt()).abs() < 1e-15);
    }
}
