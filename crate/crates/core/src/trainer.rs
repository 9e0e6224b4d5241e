//! Adam, the plateau learning-rate schedule and the epoch loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bearingnet::{Model, ModelError, TileInput};
use crate::geogrid::{Heading, MapSpec, RelCoord, TileId};
use crate::numcore::Tensor;
use crate::synthcity::{mix, CityRaster, Patch, SamplePose};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Minimum absolute decrease of the validation loss that counts as an
    /// improvement.
    pub plateau_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 16,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 5,
            plateau_factor: 0.5,
            plateau_threshold: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 20 epochs at a learning rate suited to the small desk model.
    pub fn desk() -> Self {
        Self { lr: 1e-3, epochs: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(TrainError::Config("lr must be positive and batch_size at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(TrainError::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(TrainError::Config("plateau factor must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Fails before touching anything if a gradient is
    /// not finite.
    pub fn update(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[&str],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Config("optimizer state does not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(TrainError::Config(format!(
                    "gradient shape mismatch for {}",
                    names.get(i).unwrap_or(&"?")
                )));
            }
            if g.has_non_finite() {
                return Err(TrainError::NonFinite(format!("gradient of {}", names.get(i).unwrap_or(&"?"))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for (j, g) in grads[i].data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after more than `patience`
/// consecutive epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, threshold: f64) -> Self {
        Self { patience, factor, threshold, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records a validation loss and returns the new learning rate.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// One training record. Tiles are indexes into [`TrainSet::tiles`] in the
/// canonical block order.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub uvp: Tensor,
    pub tiles: [usize; 4],
    pub rel: RelCoord,
    pub heading: Heading,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub tiles: Vec<Tensor>,
    pub samples: Vec<TrainSample>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tiles_of(&self, s: &TrainSample) -> [Tensor; 4] {
        s.tiles.map(|i| self.tiles[i].clone())
    }
}

/// Every tile of `city` as a `[3, n, n]` tensor in [`TileId::linear`](crate::geogrid::TileId::linear) order.
pub fn city_tile_tensors(city: &CityRaster) -> Vec<Tensor> {
    let n = city.spec.rst_px();
    let t = city.spec.tiles_per_side;
    (0..t * t)
        .map(|i| {
            let data = city.tile_chw(TileId { ix: i % t, iy: i / t }).into_iter().map(f64::from).collect();
            Tensor::new(&[3, n, n], data).expect("tile buffer is 3xNxN")
        })
        .collect()
}

/// Training record for a rendered pair whose city tiles start at
/// `tile_offset` in the owning [`TrainSet`].
pub fn train_sample(
    spec: &MapSpec,
    pose: &SamplePose,
    uvp: &Patch,
    tile_offset: usize,
) -> Result<TrainSample, TrainError> {
    let ids = spec.rsb_tiles(pose.rsb).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(TrainSample {
        uvp: uvp.to_tensor(),
        tiles: ids.map(|t| tile_offset + t.linear(spec.tiles_per_side)),
        rel: pose.rel,
        heading: pose.heading,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

fn sample_loss_and_grads(model: &Model, set: &TrainSet, s: &TrainSample) -> Result<(f64, Vec<Tensor>), TrainError> {
    let tiles = set.tiles_of(s);
    Ok(model.loss_and_grads(&s.uvp, TileInput::Raw(&tiles), s.rel, s.heading)?)
}

/// Mean loss over `set` without gradients. Per-sample losses are summed
/// in index order, so the result does not depend on the thread count.
pub fn mean_loss(model: &Model, set: &TrainSet) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Config("empty evaluation set".into()));
    }
    let losses = set
        .samples
        .par_iter()
        .map(|s| {
            let tiles = set.tiles_of(s);
            model.loss_value(&s.uvp, TileInput::Raw(&tiles), s.rel, s.heading)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let total: f64 = losses.iter().sum();
    if !total.is_finite() {
        return Err(TrainError::NonFinite("validation loss".into()));
    }
    Ok(total / set.len() as f64)
}

/// Trains `model` in place with mini-batch Adam and returns the best
/// validation checkpoint and the per-epoch history. `on_epoch` sees each
/// record as soon as it is produced.
///
/// Batch gradients are per-sample gradients summed in sample order and
/// divided by the batch size; the result is bit-identical for any thread
/// count.
pub fn train(
    model: &mut Model,
    train_set: &TrainSet,
    val_set: &TrainSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and validation splits must be nonempty".into()));
    }
    let names: Vec<String> = model.params.entries.iter().map(|p| p.name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut params = model.params.tensors();
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut plateau = Plateau::new(cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold);
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(model, train_set, &train_set.samples[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite("training loss".into()));
                }
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut params, &grads, &name_refs, lr)?;
            model.params.set_tensors(params.clone())?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = mean_loss(model, val_set)?;
        let rec = EpochRecord { epoch, train_loss, val_loss, lr };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((model.clone(), epoch, val_loss));
        }
        lr = plateau.step(val_loss, lr);
    }
    let (best, best_epoch, best_val_loss) =
        best.ok_or_else(|| TrainError::Config("epochs must be at least 1".into()))?;
    Ok(TrainOutcome { best, best_epoch, best_val_loss, history })
}

/// Writes `epoch,train_loss,val_loss,lr` rows.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io { path: path.to_path_buf(), source: e };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "epoch,train_loss,val_loss,lr").map_err(io)?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).map_err(io)?;
    }
    w.flush().map_err(io)
}
