//! Per-branch variational objective (weighted KL + expected soft Dice) and
//! its average over branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiRaterCase;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics;
use crate::network::{Model, Variant};
use crate::tensor::Tensor;
use crate::variational::{PriorSpec, WeightMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeightMode {
    /// `kl_beta / batches_per_epoch`
    PerBatchCount,
    /// `kl_beta`
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub kl_weight_mode: KlWeightMode,
    pub kl_beta: f64,
    pub mc_train_samples: usize,
    pub prior: PriorSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: 1.0,
            kl_weight_mode: KlWeightMode::PerBatchCount,
            kl_beta: 1.0,
            mc_train_samples: 1,
            prior: PriorSpec::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::Config(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if self.mc_train_samples == 0 {
            return Err(Error::Config("mc_train_samples must be >= 1".into()));
        }
        self.prior.validate()
    }

    pub fn kl_scale(&self, batches_per_epoch: usize) -> f64 {
        match self.kl_weight_mode {
            KlWeightMode::PerBatchCount => self.kl_beta / batches_per_epoch.max(1) as f64,
            KlWeightMode::Fixed => self.kl_beta,
        }
    }
}

fn dice_parts(pred: &[f32], target: &[f32], smooth: f64) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p as f64 * t as f64;
        total += p as f64 + t as f64;
    }
    (2.0 * inter + smooth, total + smooth)
}

fn check_dice_inputs(pred: &Grid<f32>, target: &Grid<f32>, smooth: f64) -> Result<()> {
    pred.ensure_same_shape(target, "soft dice")?;
    if !(smooth > 0.0) {
        return Err(Error::Range(format!("dice smoothing must be > 0, got {smooth}")));
    }
    let in_unit = |g: &Grid<f32>| g.data.iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit(pred) || !in_unit(target) {
        return Err(Error::Range("soft dice inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
///
/// Targets are usually binary masks; probability targets (used by the
/// single-decoder baseline) are accepted as well.
pub fn soft_dice_loss(pred: &Grid<f32>, target: &Grid<f32>, smooth: f64) -> Result<f64> {
    check_dice_inputs(pred, target, smooth)?;
    let (num, den) = dice_parts(&pred.data, &target.data, smooth);
    Ok(1.0 - num / den)
}

/// Soft Dice loss and its gradient with respect to `pred`.
pub fn soft_dice_loss_grad(pred: &Grid<f32>, target: &Grid<f32>, smooth: f64) -> Result<(f64, Vec<f64>)> {
    check_dice_inputs(pred, target, smooth)?;
    Ok(dice_with_grad(&pred.data, &target.data, smooth))
}

fn dice_with_grad(pred: &[f32], target: &[f32], smooth: f64) -> (f64, Vec<f64>) {
    let (num, den) = dice_parts(pred, target, smooth);
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t as f64 * den - num) / (den * den))
        .collect();
    (1.0 - num / den, grad)
}

/// A minibatch plus the epoch context needed for KL weighting.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub cases: Vec<&'a MultiRaterCase>,
    pub batches_per_epoch: usize,
}

impl<'a> Batch<'a> {
    pub fn new(cases: Vec<&'a MultiRaterCase>, batches_per_epoch: usize) -> Self {
        Self {
            cases,
            batches_per_epoch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchTerms {
    /// Unweighted KL of the branch posterior to the prior.
    pub kl: f64,
    pub kl_scale: f64,
    /// Mean soft Dice over weight draws and batch cases.
    pub dice: f64,
}

impl BranchTerms {
    pub fn loss(&self) -> f64 {
        self.kl * self.kl_scale + self.dice
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub branches: Vec<BranchTerms>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.branches.iter().map(BranchTerms::loss).sum::<f64>() / self.branches.len() as f64
    }

    pub fn weighted_kl(&self) -> f64 {
        self.branches.iter().map(|b| b.kl * b.kl_scale).sum::<f64>() / self.branches.len() as f64
    }

    pub fn dice(&self) -> f64 {
        self.branches.iter().map(|b| b.dice).sum::<f64>() / self.branches.len() as f64
    }
}

/// Training target of branch `r` for one case: rater `r`'s mask, or the
/// probability map for the single-decoder baseline.
pub fn branch_target(model: &Model, case: &MultiRaterCase, r: usize) -> Result<Grid<f32>> {
    if model.variant() == Variant::Vanilla {
        let map = metrics::probability_map(&case.sample_set()?);
        return Ok(map.values.map(|&v| v as f32));
    }
    let mask = case.rater_masks.get(r).ok_or_else(|| Error::MissingRater {
        case: case.case_id.clone(),
        rater: r,
    })?;
    Ok(mask.map(|&v| v as f32))
}

/// KL-weighted expected Dice of branch `r` on `batch`.
pub fn branch_loss<R: Rng + ?Sized>(model: &Model, batch: &Batch, r: usize, rng: &mut R, config: &LossConfig) -> Result<f64> {
    Ok(objective(model, batch, &[r], rng, config, None)?.total())
}

/// Mean of the branch losses over all branches.
pub fn total_loss<R: Rng + ?Sized>(model: &Model, batch: &Batch, rng: &mut R, config: &LossConfig) -> Result<f64> {
    Ok(loss_breakdown(model, batch, rng, config)?.total())
}

pub fn loss_breakdown<R: Rng + ?Sized>(model: &Model, batch: &Batch, rng: &mut R, config: &LossConfig) -> Result<LossBreakdown> {
    let branches: Vec<usize> = (0..model.num_branches()).collect();
    objective(model, batch, &branches, rng, config, None)
}

/// Evaluates the objective averaged over `branches` and, when `grad` is
/// given, accumulates its gradient w.r.t. the model parameters.
///
/// Weights are drawn once per (draw, branch) and shared across the batch,
/// draw-major then branch order.
pub(crate) fn objective<R: Rng + ?Sized>(
    model: &Model,
    batch: &Batch,
    branches: &[usize],
    rng: &mut R,
    config: &LossConfig,
    grad: Option<&mut [f32]>,
) -> Result<LossBreakdown> {
    config.validate()?;
    if batch.cases.is_empty() {
        return Err(Error::EmptySet("batch"));
    }
    if branches.is_empty() {
        return Err(Error::EmptySet("branch list"));
    }
    let draws = config.mc_train_samples;
    let kl_scale = config.kl_scale(batch.batches_per_epoch);
    let mode = WeightMode::Sample;

    let mut drawn = Vec::with_capacity(draws);
    for _ in 0..draws {
        let per_branch = branches
            .iter()
            .map(|&r| model.draw_decoder(r, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        drawn.push(per_branch);
    }
    let mut encoders: Vec<usize> = branches.iter().map(|&r| model.encoder_of(r)).collect::<Result<_>>()?;
    encoders.sort_unstable();
    encoders.dedup();
    let enc_drawn = encoders
        .iter()
        .map(|&e| model.draw_encoder(e))
        .collect::<Result<Vec<_>>>()?;

    let want_grad = grad.is_some();
    let mut dec_grads: Vec<Vec<_>> = if want_grad {
        (0..draws)
            .flat_map(|_| branches.iter().map(|&r| model.zero_decoder_grads(r)))
            .collect()
    } else {
        Vec::new()
    };
    let mut enc_grads: Vec<_> = if want_grad {
        encoders.iter().map(|&e| model.zero_encoder_grads(e)).collect()
    } else {
        Vec::new()
    };

    let mut dice_sums = vec![0.0f64; branches.len()];
    let norm = 1.0 / (batch.cases.len() * draws) as f64;
    let grad_scale = norm / branches.len() as f64;

    for &case in &batch.cases {
        let image = Tensor::from_grid(&case.image);
        let caches = encoders
            .iter()
            .zip(&enc_drawn)
            .map(|(&e, d)| model.encoder_forward(e, d, &image))
            .collect::<Result<Vec<_>>>()?;
        let mut d_feats: Vec<Vec<Tensor>> = caches
            .iter()
            .map(|c| c.features.iter().map(Tensor::zeros_like).collect())
            .collect();
        let targets = branches
            .iter()
            .map(|&r| branch_target(model, case, r))
            .collect::<Result<Vec<_>>>()?;
        for (d, per_branch) in drawn.iter().enumerate() {
            for (bi, &r) in branches.iter().enumerate() {
                let slot = encoders.binary_search(&model.encoder_of(r)?).expect("encoder collected");
                let feats = &caches[slot].features;
                let cache = model.decoder_forward(r, &per_branch[bi], feats)?;
                let target = &targets[bi];
                if target.shape() != (cache.prob.height, cache.prob.width) {
                    return Err(Error::Shape(format!(
                        "case `{}`: target {}x{} vs prediction {}x{}",
                        case.case_id, target.height, target.width, cache.prob.height, cache.prob.width
                    )));
                }
                let (loss, dprob) = dice_with_grad(&cache.prob.data, &target.data, config.dice_smooth);
                dice_sums[bi] += loss;
                if want_grad {
                    let dprob: Vec<f32> = dprob.iter().map(|g| (g * grad_scale) as f32).collect();
                    model.decoder_backward(
                        r,
                        &per_branch[bi],
                        &cache,
                        feats,
                        &dprob,
                        &mut dec_grads[d * branches.len() + bi],
                        &mut d_feats[slot],
                    );
                }
            }
        }
        if want_grad {
            for (slot, &e) in encoders.iter().enumerate() {
                let d = std::mem::take(&mut d_feats[slot]);
                model.encoder_backward(e, &enc_drawn[slot], &caches[slot], d, &mut enc_grads[slot]);
            }
        }
    }

    let mut terms = Vec::with_capacity(branches.len());
    for (bi, &r) in branches.iter().enumerate() {
        terms.push(BranchTerms {
            kl: model.decoder_kl(r, &config.prior)?,
            kl_scale,
            dice: dice_sums[bi] * norm,
        });
    }

    if let Some(out) = grad {
        for (d, per_branch) in drawn.iter().enumerate() {
            for (bi, &r) in branches.iter().enumerate() {
                model.scatter_decoder(r, &per_branch[bi], &dec_grads[d * branches.len() + bi], out);
            }
        }
        for (slot, &e) in encoders.iter().enumerate() {
            model.scatter_encoder(e, &enc_drawn[slot], &enc_grads[slot], out);
        }
        for &r in branches {
            model.decoder_kl_grad(r, &config.prior, kl_scale / branches.len() as f64, out)?;
        }
    }
    Ok(LossBreakdown { branches: terms })
}
