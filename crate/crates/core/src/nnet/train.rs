use rand::seq::SliceRandom;
use rand::RngCore;

use super::{AdamConfig, AdamState, Batch, FcnModel, Real, Tensor4};
use crate::error::{Error, Result};

/// One training example: a network input, its regression target (already
/// cropped to the model's output extent) and a per-channel loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
    /// `false` excludes that output channel from the loss.
    pub include: Vec<bool>,
}

impl<T: Real> Patch<T> {
    pub fn new(input: Tensor4<T>, target: Tensor4<T>) -> Self {
        let include = vec![true; target.channels()];
        Self { input, target, include }
    }
}

/// Supplies the training patches for each epoch, e.g. redrawing background
/// samples and augmentations.
pub trait PatchSource<T> {
    fn epoch_patches(&mut self, epoch: usize, rng: &mut dyn RngCore) -> Result<Vec<Patch<T>>>;
}

impl<T: Real> PatchSource<T> for Vec<Patch<T>> {
    fn epoch_patches(&mut self, _epoch: usize, _rng: &mut dyn RngCore) -> Result<Vec<Patch<T>>> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training loss of the untrained model on the first epoch's patches.
    pub initial_train_loss: f64,
}

/// Keeps the snapshot with the lowest score; ties keep the earlier one.
#[derive(Debug, Clone)]
pub struct BestSnapshot<M> {
    best: Option<(usize, f64, M)>,
}

impl<M: Clone> Default for BestSnapshot<M> {
    fn default() -> Self {
        Self { best: None }
    }
}

impl<M: Clone> BestSnapshot<M> {
    pub fn offer(&mut self, epoch: usize, score: f64, snapshot: &M) -> bool {
        let better = match &self.best {
            None => true,
            Some((_, s, _)) => score < *s,
        };
        if better {
            self.best = Some((epoch, score, snapshot.clone()));
        }
        better
    }

    pub fn best(&self) -> Option<(usize, f64, &M)> {
        self.best.as_ref().map(|(e, s, m)| (*e, *s, m))
    }

    pub fn into_best(self) -> Option<(usize, f64, M)> {
        self.best
    }
}

/// `loss = mean((pred - target)^2)`, `grad = 2 (pred - target) / N`.
pub fn mse_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    let include = vec![true; pred.channels()];
    masked_mse_loss(pred, target, &include)
}

/// MSE restricted to the included channels; excluded channels get zero
/// gradient.
pub fn masked_mse_loss<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    include: &[bool],
) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() || include.len() != pred.channels() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?} ({} mask entries)",
            pred.shape(),
            target.shape(),
            include.len()
        )));
    }
    let b = Batch::single(pred);
    let t = Batch::single(target);
    let (loss, grad) = batch_loss(&b, &t, &[include.to_vec()])?;
    Ok((loss, grad.member(0)))
}

/// Mean over batch members of each member's masked MSE, with the gradient
/// of that mean.
pub(crate) fn batch_loss<T: Real>(
    pred: &Batch<T>,
    target: &Batch<T>,
    include: &[Vec<bool>],
) -> Result<(f64, Batch<T>)> {
    if pred.dims != target.dims || pred.channels != target.channels || pred.batch != target.batch {
        return Err(Error::Shape("prediction and target batches differ in shape".into()));
    }
    let nb = pred.batch;
    let nv = pred.voxels();
    let mut grad = Batch::zeros(pred.channels, nb, pred.dims);
    let mut total = 0.0f64;
    for (b, mask) in include.iter().enumerate().take(nb) {
        let n = mask.iter().filter(|&&m| m).count() * nv;
        if n == 0 {
            continue;
        }
        let mut sq = 0.0f64;
        let scale = T::from_f64(2.0 / (n as f64 * nb as f64));
        for (c, &inc) in mask.iter().enumerate() {
            if !inc {
                continue;
            }
            let p = pred.slot(c, b);
            let t = target.slot(c, b);
            let g = grad.slot_mut(c, b);
            for i in 0..nv {
                let d = p[i] - t[i];
                sq += d.as_f64() * d.as_f64();
                g[i] = scale * d;
            }
        }
        total += sq / n as f64;
    }
    Ok((total / nb as f64, grad))
}

fn assemble<T: Real>(patches: &[&Patch<T>]) -> Result<(Batch<T>, Batch<T>, Vec<Vec<bool>>)> {
    let inputs: Vec<&Tensor4<T>> = patches.iter().map(|p| &p.input).collect();
    let targets: Vec<&Tensor4<T>> = patches.iter().map(|p| &p.target).collect();
    Ok((
        Batch::from_tensors(&inputs)?,
        Batch::from_tensors(&targets)?,
        patches.iter().map(|p| p.include.clone()).collect(),
    ))
}

/// Mean per-patch loss of `model` over `patches`, evaluated in batches.
pub fn evaluate_loss<T: Real>(model: &FcnModel<T>, patches: &[Patch<T>], batch_size: usize) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("no patches to evaluate".into()));
    }
    let mut total = 0.0;
    let refs: Vec<&Patch<T>> = patches.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, t, m) = assemble(chunk)?;
        let y = model.forward_batch(&x)?;
        let (loss, _) = batch_loss(&y, &t, &m)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// Mini-batch Adam training. The model is left holding the weights of the
/// epoch with the lowest validation loss.
pub fn train_model<T: Real>(
    model: &mut FcnModel<T>,
    source: &mut dyn PatchSource<T>,
    val: &[Patch<T>],
    schedule: &Schedule,
    rng: &mut dyn RngCore,
    mut progress: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<TrainReport> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if schedule.epochs == 0 || schedule.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let mut adam = AdamState::for_model(schedule.adam, model);
    let mut best = BestSnapshot::default();
    let mut stats = Vec::with_capacity(schedule.epochs);
    let mut initial_train_loss = f64::NAN;

    for epoch in 0..schedule.epochs {
        let patches = source.epoch_patches(epoch, rng)?;
        if patches.is_empty() {
            return Err(Error::InvalidArgument(format!("no training patches in epoch {epoch}")));
        }
        if epoch == 0 {
            initial_train_loss = evaluate_loss(model, &patches, schedule.batch_size)?;
        }
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(rng);
        let mut running = 0.0;
        for idx in order.chunks(schedule.batch_size) {
            let members: Vec<&Patch<T>> = idx.iter().map(|&i| &patches[i]).collect();
            let (x, t, m) = assemble(&members)?;
            let acts = model.forward_cached(&x)?;
            let (loss, grad) = batch_loss(acts.last().expect("layers"), &t, &m)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            running += loss * members.len() as f64;
            let grads = model.backward(&x, &acts, &grad, false)?;
            adam.update_model(model, &grads)?;
        }
        let train_loss = running / patches.len() as f64;
        let val_loss = evaluate_loss(model, val, schedule.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        best.offer(epoch, val_loss, model);
        let s = EpochStats {
            epoch,
            train_loss,
            val_loss,
            patches: patches.len(),
        };
        if let Some(cb) = progress.as_mut() {
            cb(&s);
        }
        stats.push(s);
    }
    let (best_epoch, best_val_loss, snapshot) = best.into_best().expect("at least one epoch");
    *model = snapshot;
    Ok(TrainReport {
        epochs: stats,
        best_epoch,
        best_val_loss,
        initial_train_loss,
    })
}
