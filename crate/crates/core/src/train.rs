//! Two-stage training: the main network on the total loss with per-step
//! focal-factor updates, then the suppression network on recorded confidences.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{HatError, Result};
use crate::infer::record_stream;
use crate::losses::{focal_factors_for, update_accumulator, FocalFactors, GradientRatioAccumulator};
use crate::model::HatModel;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::postproc::{build_osn_training_set, osn_loss, OsnDataset};
use crate::prediction::GroundTruthInstance;

pub const ADAM_EPS: f64 = 1e-8;
pub const OSN_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct VideoData {
    pub id: String,
    pub features: Tensor<f32>,
    pub gt: Vec<GroundTruthInstance>,
}

/// Adaptive moment estimation over a chosen subset of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter whose `grads` entry is present.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        if self.m.len() < store.len() {
            let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(Some(g)) = grads.get(id.0) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = store.value_mut(id);
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mi = b1 * *m as f64 + (1.0 - b1) * g;
                let vi = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mi as f32;
                *v = vi as f32;
                *w -= (self.lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub windows: usize,
    /// Mean per-window total loss.
    pub loss: f64,
    pub classification: f64,
    pub offset: f64,
    pub length: f64,
    pub anticipation: f64,
}

fn add_scaled(acc: &mut [Option<Tensor<f32>>], grads: Vec<Option<Tensor<f32>>>, k: f32) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += k * y;
                    }
                }
                None => *a = Some(g.scale(k)),
            }
        }
    }
}

/// Every `(video, t)` window, `t = 1..=T`.
pub fn windows(data: &[VideoData]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(v, d)| (1..=d.features.rows()).map(move |t| (v, t)))
        .collect()
}

pub struct MainTrainer<'a> {
    pub model: &'a HatModel,
    pub adam: Adam,
    pub accumulator: GradientRatioAccumulator,
    pub steps: usize,
}

impl<'a> MainTrainer<'a> {
    pub fn new(model: &'a HatModel) -> Self {
        let t = &model.config.train;
        MainTrainer {
            model,
            adam: Adam::new(t.lr, t.beta1, t.beta2),
            accumulator: GradientRatioAccumulator::new(model.config.classes),
            steps: 0,
        }
    }

    pub fn factors(&self) -> FocalFactors {
        let c = &self.model.config;
        focal_factors_for(c.loss_variant, &self.accumulator, c.lambda_b, c.focal_scale)
    }

    /// One optimisation step over a batch of windows. Focal factors are fixed
    /// for the step; the accumulator is updated after the parameter update.
    pub fn step(&mut self, store: &mut ParamStore<f32>, data: &[VideoData], batch: &[(usize, usize)]) -> Result<EpochStats> {
        let factors = self.factors();
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
        let mut stats = EpochStats::default();
        let mut logit_updates = Vec::with_capacity(batch.len());
        let k = 1.0 / batch.len() as f32;
        for &(v, t) in batch {
            let video = &data[v];
            let mut tape = Tape::new(store);
            let w = self.model.window_loss(&mut tape, &video.features, &video.gt, t, &factors)?;
            let total = tape.value(w.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(HatError::NonFiniteLoss { step: self.steps });
            }
            let g = tape.backward(w.total).map_err(|_| HatError::NonFiniteLoss { step: self.steps })?;
            add_scaled(&mut grads, g.into_params(), k);
            stats.windows += 1;
            stats.loss += total;
            stats.classification += w.classification;
            stats.offset += w.offset;
            stats.length += w.length;
            stats.anticipation += w.anticipation;
            logit_updates.push((w.logit_grads, w.labels));
        }
        for (id, p) in store.iter() {
            if !HatModel::is_main_param(&p.name) {
                grads[id.0] = None;
            }
        }
        self.adam.step(store, &grads);
        for (g, labels) in &logit_updates {
            update_accumulator(&mut self.accumulator, g, labels);
        }
        self.steps += 1;
        Ok(stats)
    }

    /// One pass over every window in a seeded random order.
    pub fn epoch(&mut self, store: &mut ParamStore<f32>, data: &[VideoData], epoch: usize) -> Result<EpochStats> {
        let cfg = &self.model.config;
        let mut order = windows(data);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut rng);
        let mut total = EpochStats {
            epoch,
            ..Default::default()
        };
        for batch in order.chunks(cfg.train.batch_size) {
            let s = self.step(store, data, batch)?;
            total.windows += s.windows;
            total.loss += s.loss;
            total.classification += s.classification;
            total.offset += s.offset;
            total.length += s.length;
            total.anticipation += s.anticipation;
        }
        let n = total.windows.max(1) as f64;
        total.loss /= n;
        total.classification /= n;
        total.offset /= n;
        total.length /= n;
        total.anticipation /= n;
        Ok(total)
    }
}

pub fn write_epoch_log(path: &Path, rows: &[EpochStats]) -> Result<()> {
    let mut s = String::from("epoch,windows,loss,classification,offset,length,anticipation\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.windows, r.loss, r.classification, r.offset, r.length, r.anticipation
        ));
    }
    std::fs::write(path, s).map_err(|e| HatError::io(path, e))
}

/// Records every training video with the current network and builds the
/// suppression-network table.
pub fn osn_dataset(model: &HatModel, store: &ParamStore<f32>, data: &[VideoData]) -> Result<OsnDataset> {
    let cfg = &model.config;
    let mut ds = OsnDataset::new(cfg.anchor.l_s * cfg.classes, cfg.classes);
    for video in data {
        let frames = record_stream(model, store, &video.features)?;
        if frames.is_empty() {
            continue;
        }
        ds.extend(&build_osn_training_set(&frames, cfg.classes, cfg.postproc.theta_nms, cfg.postproc.osn_targets)?)?;
    }
    Ok(ds)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OsnStats {
    pub rows: usize,
    pub positives: usize,
    /// Mean masked cross-entropy per supervised entry, per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Masked binary cross-entropy on the `osn.*` parameters only.
pub fn train_osn(model: &HatModel, store: &mut ParamStore<f32>, ds: &OsnDataset, config: &RunConfig) -> Result<OsnStats> {
    let mut stats = OsnStats {
        rows: ds.rows(),
        positives: ds.targets.iter().filter(|&&v| v > 0.5).count(),
        epoch_loss: Vec::new(),
    };
    if ds.rows() == 0 {
        return Ok(stats);
    }
    let mut adam = Adam::new(config.train.osn_lr, config.train.beta1, config.train.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed().wrapping_add(0x05e7));
    let mut order: Vec<usize> = (0..ds.rows()).collect();
    for _ in 0..config.train.osn_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(OSN_BATCH) {
            let x: Vec<f32> = batch.iter().flat_map(|&r| ds.input(r).iter().copied()).collect();
            let y: Vec<f32> = batch.iter().flat_map(|&r| ds.target(r).iter().copied()).collect();
            let mut tape = Tape::new(store);
            let xin = tape.input(Tensor::new(vec![batch.len(), ds.input_dim], x)?);
            let z = model.osn.logits(&mut tape, xin)?;
            let (loss, n) = osn_loss(&mut tape, z, &y)?;
            if n == 0 {
                continue;
            }
            let scaled = tape.scale(loss, 1.0 / n as f32);
            sum += tape.value(loss).data()[0] as f64;
            count += n;
            let grads = tape.backward(scaled)?.into_params();
            adam.step(store, &grads);
        }
        stats.epoch_loss.push(sum / count.max(1) as f64);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, ProceduralGrammar};

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut store, &[Some(Tensor::new(vec![2], vec![0.5, -2.0]).unwrap())]);
        // The first bias-corrected step has magnitude lr in every coordinate.
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn short_training_reduces_loss_and_updates_accumulator() {
        let mut cfg = RunConfig::toy();
        cfg.train.batch_size = 4;
        let (model, mut store) = HatModel::build::<f32>(&cfg).unwrap();
        let g = ProceduralGrammar::default();
        let data: Vec<VideoData> = (0..2)
            .map(|i| {
                let v = generate(&g, 60, i).unwrap().0;
                VideoData {
                    id: format!("v{i}"),
                    features: v.features,
                    gt: v.annotations,
                }
            })
            .collect();
        let mut tr = MainTrainer::new(&model);
        let first = tr.epoch(&mut store, &data, 0).unwrap();
        let mut last = first.clone();
        for e in 1..4 {
            last = tr.epoch(&mut store, &data, e).unwrap();
        }
        assert_eq!(first.windows, 120);
        assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
        assert!(tr.accumulator.g_neg.iter().all(|&v| v > 0.0));
        let before: Vec<f32> = store.iter().filter(|(_, p)| p.name.starts_with("osn.")).flat_map(|(_, p)| p.value.data().to_vec()).collect();
        let ds = osn_dataset(&model, &store, &data).unwrap();
        let s = train_osn(&model, &mut store, &ds, &cfg).unwrap();
        assert_eq!(s.rows, ds.rows());
        let after: Vec<f32> = store.iter().filter(|(_, p)| p.name.starts_with("osn.")).flat_map(|(_, p)| p.value.data().to_vec()).collect();
        if ds.rows() > 0 {
            assert_ne!(before, after);
        }
    }
}
