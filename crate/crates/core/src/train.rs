//! Training loop: warm-up schedule, per-epoch mixture-ratio refresh, batched
//! Adam updates and best-validation model retention.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{normalize_intensity, sample_augmentation, CutoutAugmentation};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{
    global_consistency_loss, negative_loss, supervised_loss, total_loss, ConsistencyOptions,
    LossParts, LossReport, LossWeights, NegativeOptions, Phase,
};
use crate::metrics::{argmax, dice, keep_largest_component};
use crate::mixture::{em_estimate, em_init, inputs_from_probmap, labeled_counts, MixtureRatios};
use crate::model::{round_f32, AdamState, SegModel};
use crate::partition::partition;
use crate::phantom::stream;
use crate::tensor::{Image, LabelMap, ScribbleMask, Tensor};

const SALT_SHUFFLE: u64 = 0x5f1e;
const SALT_AUGMENT: u64 = 0xa96e;

/// Which loss terms and augmentations are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub cutout: bool,
    pub negative: bool,
    pub global: bool,
}

impl Ablation {
    /// Partial cross-entropy only.
    pub const SUPERVISED: Ablation = Ablation::new(false, false, false);
    pub const CUTOUT: Ablation = Ablation::new(true, false, false);
    pub const PU: Ablation = Ablation::new(false, true, false);
    pub const PU_CUTOUT: Ablation = Ablation::new(true, true, false);
    pub const FULL: Ablation = Ablation::new(true, true, true);

    const NAMED: [(&'static str, Ablation); 5] = [
        ("l+", Self::SUPERVISED),
        ("l+cutout", Self::CUTOUT),
        ("l+l-", Self::PU),
        ("l+cutout+l-", Self::PU_CUTOUT),
        ("full", Self::FULL),
    ];

    pub const fn new(cutout: bool, negative: bool, global: bool) -> Self {
        Self {
            cutout,
            negative,
            global,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::NAMED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, a)| a)
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        Self::NAMED.iter().map(|(n, _)| *n)
    }

    /// Canonical name, or a `cutout=..,negative=..,global=..` description.
    pub fn name(&self) -> String {
        match Self::NAMED.iter().find(|(_, a)| a == self) {
            Some((n, _)) => n.to_string(),
            None => format!(
                "cutout={},negative={},global={}",
                self.cutout, self.negative, self.global
            ),
        }
    }

    /// Whether the augmented view `X'` is needed at all.
    fn uses_augmented_view(&self) -> bool {
        self.cutout || self.global
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Side of the cutout square; ignored when cutout is disabled.
    pub square_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub negative: NegativeOptions,
    pub consistency: ConsistencyOptions,
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 20,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            square_size: 16,
            seed: 0,
            ablation: Ablation::FULL,
            negative: NegativeOptions::default(),
            consistency: ConsistencyOptions::default(),
            em_tol: 1e-6,
            em_max_iters: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        // a zero rate is allowed as a null-update diagnostic
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        let w = self.weights;
        if !(w.lambda1 >= 0.0 && w.lambda2 >= 0.0 && w.lambda1.is_finite() && w.lambda2.is_finite())
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.em_tol > 0.0) || self.em_max_iters == 0 {
            return bad("EM tolerance and iteration cap must be positive".into());
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }
}

/// A training or evaluation image with intensities already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Image,
    pub scribble: ScribbleMask,
    pub mask: LabelMap,
}

impl Example {
    /// Normalizes `image` to zero mean and unit variance.
    pub fn new(
        id: impl Into<String>,
        image: &Image,
        scribble: ScribbleMask,
        mask: LabelMap,
    ) -> Self {
        let id = id.into();
        let (image, flat) = normalize_intensity(image);
        if flat {
            log::warn!("image {id} has zero variance; left centered only");
        }
        Self {
            id,
            image,
            scribble,
            mask,
        }
    }
}

/// Mixture ratios of the unlabeled pixels of one image under the current
/// model. Falls back to the labeled frequencies when EM cannot run.
pub fn estimate_ratios(
    model: &SegModel,
    example: &Example,
    cfg: &TrainConfig,
) -> Result<MixtureRatios> {
    let probs = model.forward(&example.image)?;
    let classes = model.classes();
    let inputs = match inputs_from_probmap(probs.data(), classes, &example.scribble) {
        Ok(inputs) => inputs,
        Err(Error::NoUnlabeled) => return em_init(&labeled_counts(&example.scribble, classes)),
        Err(e) => return Err(e),
    };
    match em_estimate(&inputs, cfg.em_tol, cfg.em_max_iters) {
        Ok(out) => {
            if !out.converged {
                log::debug!(
                    "EM on {} stopped after {} iterations",
                    example.id,
                    out.iterations
                );
            }
            Ok(out.ratios)
        }
        Err(e) => {
            log::warn!(
                "EM failed on {} ({e}); using labeled frequencies",
                example.id
            );
            em_init(inputs.labeled_freqs())
        }
    }
}

/// The augmentation used for image `index` in `epoch`.
pub fn augmentation_for(
    example: &Example,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<CutoutAugmentation> {
    let mut rng = stream(
        cfg.seed,
        ((epoch as u64) << 32) | index as u64,
        SALT_AUGMENT,
    );
    let size = if cfg.ablation.cutout {
        cfg.square_size
    } else {
        0
    };
    sample_augmentation(
        example.image.height(),
        example.image.width(),
        size,
        &mut rng,
    )
}

/// Loss and parameter gradients for one image.
pub fn image_gradients(
    model: &SegModel,
    example: &Example,
    alpha: Option<&MixtureRatios>,
    aug: Option<&CutoutAugmentation>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(Vec<Tensor>, LossReport)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let x = g.constant(example.image.to_tensor());
    let probs = model.forward_graph(&mut g, &params, x)?;
    let (mut sup, labeled) =
        supervised_loss(&mut g, probs, &example.scribble, cfg.negative.reduction)?;
    let mut labeled_pixels = labeled;

    let mut global = None;
    if let Some(aug) = aug {
        let x_aug = g.constant(aug.apply(&example.image.to_tensor())?);
        let probs_aug = model.forward_graph(&mut g, &params, x_aug)?;
        // labels follow the geometric transform; cutout pixels keep their label
        let scribble_aug = aug.transform().apply_grid(&example.scribble)?;
        let (sup_aug, labeled_aug) =
            supervised_loss(&mut g, probs_aug, &scribble_aug, cfg.negative.reduction)?;
        let both = g.add(sup, sup_aug)?;
        sup = g.scale(both, 0.5)?;
        labeled_pixels += labeled_aug;
        if cfg.ablation.global {
            global = Some(global_consistency_loss(
                &mut g,
                probs,
                probs_aug,
                aug,
                cfg.consistency,
            )?);
        }
    }

    let mut negative = None;
    let mut negative_pixels = 0;
    if let (Phase::Full, Some(alpha)) = (phase, alpha) {
        let split = partition(g.value(probs), &example.scribble, alpha)?;
        let neg = negative_loss(&mut g, probs, &split, cfg.negative)?;
        negative_pixels = neg.pixels;
        negative = Some(neg.value);
    }

    let parts = LossParts {
        supervised: Some(sup),
        negative,
        global,
    };
    let (loss, mut report) = total_loss(&mut g, parts, cfg.weights, phase)?;
    report.labeled_pixels = labeled_pixels;
    report.negative_pixels = negative_pixels;
    g.backward(loss)?;
    Ok((params.iter().map(|&p| g.grad(p)).collect(), report))
}

/// One Adam step with moments and parameters kept at `f32` precision.
pub fn adam_update(
    model: &mut SegModel,
    state: &mut AdamState,
    grads: &[Tensor],
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in model.params_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            round_f32(&mut m[k..=k]);
            round_f32(&mut v[k..=k]);
            let step = cfg.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_eps);
            p[k] -= step;
        }
        round_f32(p);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over images of the per-image loss terms.
    pub loss: LossReport,
    /// Ratios used for the negative loss, in dataset order (empty when unused).
    pub ratios: Vec<MixtureRatios>,
    pub seconds: f64,
}

/// Trains one epoch in place.
pub fn train_epoch(
    model: &mut SegModel,
    optimizer: &mut AdamState,
    data: &[Example],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let start = Instant::now();
    let phase = cfg.phase(epoch);
    let ratios: Vec<MixtureRatios> = if phase == Phase::Full && cfg.ablation.negative {
        let snapshot: &SegModel = model;
        data.par_iter()
            .map(|ex| estimate_ratios(snapshot, ex, cfg))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(cfg.seed, epoch as u64, SALT_SHUFFLE));

    let mut reports = Vec::with_capacity(data.len());
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let snapshot: &SegModel = model;
        let results: Vec<(Vec<Tensor>, LossReport)> = batch
            .par_iter()
            .map(|&i| {
                let ex = &data[i];
                let aug = if cfg.ablation.uses_augmented_view() {
                    Some(augmentation_for(ex, cfg, epoch, i)?)
                } else {
                    None
                };
                image_gradients(snapshot, ex, ratios.get(i), aug.as_ref(), cfg, phase)
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;

        let mut grads: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        for (g, report) in &results {
            if !report.total.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {b}: non-finite loss {}",
                    report.total
                )));
            }
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        adam_update(model, optimizer, &grads, cfg);
        reports.extend(results.into_iter().map(|(_, r)| r));
    }
    Ok(EpochStats {
        epoch,
        phase,
        loss: LossReport::mean(&reports),
        ratios,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Label prediction, optionally keeping only the largest component per class.
pub fn predict(model: &SegModel, image: &Image, postprocess: bool) -> Result<LabelMap> {
    let pred = argmax(&model.forward(image)?);
    Ok(if postprocess {
        keep_largest_component(&pred, model.classes() - 1)
    } else {
        pred
    })
}

/// Per-class Dice averaged over `data`, with post-processing.
pub fn validation_dice(model: &SegModel, data: &[Example]) -> Result<Vec<f64>> {
    let fg = model.classes() - 1;
    let per_image: Vec<Vec<f64>> = data
        .par_iter()
        .map(|ex| {
            let pred = predict(model, &ex.image, true)?;
            Ok((1..=fg as u8).map(|c| dice(&pred, &ex.mask, c)).collect())
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; fg];
    for row in &per_image {
        for (m, d) in mean.iter_mut().zip(row) {
            *m += d;
        }
    }
    let n = per_image.len().max(1) as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossReport,
    pub val_dice: Vec<f64>,
    pub val_mean_dice: f64,
    pub seconds: f64,
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SegModel,
    pub optimizer: AdamState,
    pub history: Vec<HistoryRow>,
    pub best: SegModel,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
}

impl Trainer {
    pub fn new(model: SegModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamState::new(&model),
            best: model.clone(),
            model,
            config,
            history: Vec::new(),
            best_epoch: None,
            best_score: f64::NEG_INFINITY,
        })
    }

    /// Restores a run from its last state; `best` is the best model so far
    /// and the epoch it was recorded at.
    pub fn resume(
        model: SegModel,
        optimizer: AdamState,
        history: Vec<HistoryRow>,
        best: Option<(SegModel, usize)>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (best, best_epoch) = match best {
            Some((m, e)) => (m, Some(e)),
            None => (model.clone(), None),
        };
        let best_score = best_epoch
            .and_then(|e| history.iter().find(|r| r.epoch == e))
            .map_or(f64::NEG_INFINITY, |r| r.val_mean_dice);
        Ok(Self {
            config,
            model,
            optimizer,
            history,
            best,
            best_epoch,
            best_score,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn finished(&self) -> bool {
        self.epochs_done() >= self.config.epochs
    }

    /// Trains the next epoch, validates, and updates the best model.
    pub fn step(&mut self, train: &[Example], val: &[Example]) -> Result<&HistoryRow> {
        let epoch = self.epochs_done();
        let stats = train_epoch(
            &mut self.model,
            &mut self.optimizer,
            train,
            &self.config,
            epoch,
        )?;
        let val_dice = validation_dice(&self.model, val)?;
        let val_mean_dice = val_dice.iter().sum::<f64>() / val_dice.len().max(1) as f64;
        if val.is_empty() || val_mean_dice > self.best_score {
            self.best = self.model.clone();
            self.best_epoch = Some(epoch);
            self.best_score = val_mean_dice;
        }
        log::info!(
            "epoch {epoch} [{}] loss {:.4} (L+ {:.4}, L- {:.4}, Lg {:.4}) val dice {:.4} in {:.1}s",
            stats.phase.as_str(),
            stats.loss.total,
            stats.loss.supervised,
            stats.loss.negative,
            stats.loss.global,
            val_mean_dice,
            stats.seconds
        );
        self.history.push(HistoryRow {
            epoch,
            phase: stats.phase,
            loss: stats.loss,
            val_dice,
            val_mean_dice,
            seconds: stats.seconds,
        });
        Ok(self.history.last().expect("just pushed"))
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: SegModel,
    pub best_epoch: Option<usize>,
    pub last: SegModel,
    pub history: Vec<HistoryRow>,
}

/// Trains for `config.epochs` epochs from `model`.
pub fn fit(
    model: SegModel,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(model, config.clone())?;
    while !trainer.finished() {
        trainer.step(train, val)?;
    }
    Ok(FitOutcome {
        best: trainer.best,
        best_epoch: trainer.best_epoch,
        last: trainer.model,
        history: trainer.history,
    })
}
