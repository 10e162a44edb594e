//! Training loop: minibatch SGD or Adam under a polynomial learning-rate
//! schedule, seeded internal validation split and Monte Carlo prediction.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MultiRaterCase};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{self, Batch, LossConfig};
use crate::metrics;
use crate::network::{member_seed, Model, PredictionSet, Variant};
use crate::tensor::Tensor;
use crate::variational::WeightMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_mc_eval: usize,
    /// Fraction of the training cases held out for internal validation.
    pub val_fraction: f64,
    /// Validation Q-score is computed every `val_every` epochs and on the
    /// last epoch; 0 disables it.
    pub val_every: usize,
    /// Posterior draws per branch for the validation Q-score.
    pub val_n_mc: usize,
    /// Restore the parameters of the epoch with the best validation Q-score.
    pub keep_best: bool,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr0: 1e-3,
            epochs: 200,
            batch_size: 4,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_mc_eval: 50,
            val_fraction: 0.2,
            val_every: 1,
            val_n_mc: 5,
            keep_best: false,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for one variant: Adam at 5e-3 for OMBA, SGD at 1e-3 otherwise.
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = Self::default();
        if variant == Variant::Omba {
            cfg.optimizer = OptimizerKind::Adam;
            cfg.lr0 = 5e-3;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("lr0 must be > 0, epochs and batch_size >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.poly_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("poly_power, momentum in [0,1) and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and adam_eps > 0".into()));
        }
        if self.n_mc_eval == 0 || self.val_n_mc == 0 {
            return Err(Error::Config("n_mc_eval and val_n_mc must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// `lr0 * (1 - step / total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!("step {step} of {total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub dice: f64,
    pub lr: f64,
    pub val_q_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_ndjson().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

enum OptState {
    Sgd { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, t: i32 },
}

struct Optimizer {
    state: OptState,
    momentum: f32,
    weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Optimizer {
    fn new(config: &TrainConfig, n: usize) -> Self {
        let state = match config.optimizer {
            OptimizerKind::Sgd => OptState::Sgd { velocity: vec![0.0; n] },
            OptimizerKind::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        };
        Self {
            state,
            momentum: config.momentum as f32,
            weight_decay: config.weight_decay as f32,
            beta1: config.adam_beta1 as f32,
            beta2: config.adam_beta2 as f32,
            eps: config.adam_eps as f32,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        let lr = lr as f32;
        let wd = self.weight_decay;
        match &mut self.state {
            OptState::Sgd { velocity } => {
                for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = self.momentum * *v + g + wd * *p;
                    *p -= lr * *v;
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - self.beta1.powi(*t);
                let c2 = 1.0 - self.beta2.powi(*t);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g + wd * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// Per-epoch means of the objective terms.
struct EpochStats {
    loss: f64,
    kl: f64,
    dice: f64,
    lr: f64,
}

/// Optimization state of one network trained on its own case list.
struct Trainer {
    model: Model,
    cases: Vec<MultiRaterCase>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
    grad: Vec<f32>,
}

impl Trainer {
    fn new(model: Model, cases: Vec<MultiRaterCase>, config: &TrainConfig, seed: u64) -> Self {
        let n = model.param_count();
        let batches = cases.len().div_ceil(config.batch_size);
        Self {
            optimizer: Optimizer::new(config, n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            total_steps: batches * config.epochs,
            grad: vec![0.0; n],
            model,
            cases,
        }
    }

    fn run_epoch(&mut self, epoch: usize, config: &TrainConfig) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        order.shuffle(&mut self.rng);
        let batches_per_epoch = order.len().div_ceil(config.batch_size);
        let (mut loss, mut kl, mut dice) = (0.0, 0.0, 0.0);
        let first_lr = poly_lr(self.step, self.total_steps, config.lr0, config.poly_power)?;
        for chunk in order.chunks(config.batch_size) {
            let lr = poly_lr(self.step, self.total_steps, config.lr0, config.poly_power)?;
            let batch = Batch::new(chunk.iter().map(|&i| &self.cases[i]).collect(), batches_per_epoch);
            self.grad.iter_mut().for_each(|g| *g = 0.0);
            let branches: Vec<usize> = (0..self.model.num_branches()).collect();
            let terms = losses::objective(
                &self.model,
                &batch,
                &branches,
                &mut self.rng,
                &config.loss,
                Some(&mut self.grad),
            )?;
            let total = terms.total();
            if !total.is_finite() || self.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: self.step,
                    loss: total,
                });
            }
            self.optimizer.step(self.model.params_mut(), &self.grad, lr);
            self.step += 1;
            loss += total;
            kl += terms.weighted_kl();
            dice += terms.dice();
        }
        let n = batches_per_epoch as f64;
        Ok(EpochStats {
            loss: loss / n,
            kl: kl / n,
            dice: dice / n,
            lr: first_lr,
        })
    }
}

/// Flushes subnormal floats to zero on this thread while alive. Late in
/// training, gradients and optimizer moments decay into the subnormal range,
/// where x86 arithmetic is an order of magnitude slower.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the control word read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Seeded split of `cases` into (train, internal validation). At least one
/// training case is always kept.
pub fn split_validation(cases: &[MultiRaterCase], fraction: f64, seed: u64) -> (Vec<MultiRaterCase>, Vec<MultiRaterCase>) {
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_val = ((cases.len() as f64 * fraction).round() as usize).min(cases.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| cases[i].clone()).collect::<Vec<_>>()
    };
    (pick(train_idx), pick(val_idx))
}

fn check_raters(model: &Model, cases: &[MultiRaterCase]) -> Result<()> {
    let raters = Dataset::new(cases.to_vec()).rater_count()?;
    if model.variant() != Variant::Vanilla && model.num_branches() != raters {
        return Err(Error::RaterMismatch {
            model: model.num_branches(),
            dataset: raters,
        });
    }
    Ok(())
}

/// Trains on `cases` after holding out `config.val_fraction` of them for
/// internal validation.
pub fn train(model: &Model, cases: &[MultiRaterCase], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptySet("training cases"));
    }
    let (train_cases, val_cases) = split_validation(cases, config.val_fraction, config.seed);
    train_with_validation(model, &train_cases, &val_cases, config)
}

/// Trains on `train_cases`, scoring `val_cases` (if any) during training.
///
/// The ensemble variant trains member `r` as an independent single-decoder
/// network on rater `r`'s masks with seed `member_seed(seed, r)`.
pub fn train_with_validation(
    model: &Model,
    train_cases: &[MultiRaterCase],
    val_cases: &[MultiRaterCase],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_cases.is_empty() {
        return Err(Error::EmptySet("training cases"));
    }
    check_raters(model, train_cases)?;
    let _ftz = FlushDenormals::enable();

    let mut trainers = if model.variant() == Variant::Ensemble {
        let pool = Dataset::new(train_cases.to_vec());
        (0..model.num_branches())
            .map(|r| {
                let seed = member_seed(config.seed, r);
                Ok(Trainer::new(model.ensemble_member(r)?, pool.select_rater(r)?.cases, config, seed))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![Trainer::new(model.clone(), train_cases.to_vec(), config, config.seed)]
    };

    let mut current = model.clone();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<f32>)> = None;
    for epoch in 0..config.epochs {
        let mut stats = EpochStats {
            loss: 0.0,
            kl: 0.0,
            dice: 0.0,
            lr: 0.0,
        };
        for trainer in &mut trainers {
            let s = trainer.run_epoch(epoch, config)?;
            stats.loss += s.loss;
            stats.kl += s.kl;
            stats.dice += s.dice;
            stats.lr = s.lr;
        }
        let k = trainers.len() as f64;
        if model.variant() == Variant::Ensemble {
            for (r, t) in trainers.iter().enumerate() {
                current.set_ensemble_member(r, &t.model)?;
            }
        } else {
            current = trainers[0].model.clone();
        }

        let last = epoch + 1 == config.epochs;
        let due = config.val_every > 0 && ((epoch + 1) % config.val_every == 0 || last);
        let val_q_score = if !val_cases.is_empty() && due {
            let report = metrics::evaluate(&current, val_cases, config.val_n_mc, None, config.seed)?;
            Some(report.q_score)
        } else {
            None
        };
        if let (true, Some(q)) = (config.keep_best, val_q_score) {
            if best.as_ref().is_none_or(|(b, _)| q > *b) {
                best = Some((q, current.params().to_vec()));
            }
        }
        let record = EpochRecord {
            epoch,
            loss: stats.loss / k,
            kl: stats.kl / k,
            dice: stats.dice / k,
            lr: stats.lr,
            val_q_score,
        };
        info!(
            "epoch {epoch}: loss {:.5} dice {:.5} kl {:.3e} lr {:.3e} val_q {:?}",
            record.loss, record.dice, record.kl, record.lr, record.val_q_score
        );
        log.records.push(record);
    }
    if let Some((_, params)) = best {
        current.set_params(params)?;
    }
    Ok(TrainOutcome { model: current, log })
}

/// Posterior predictive for one image. Deterministic models are evaluated
/// once per branch whatever `n_mc` is.
pub fn mc_predict<R: rand::Rng + ?Sized>(model: &Model, image: &Grid<f32>, n_mc: usize, rng: &mut R) -> Result<PredictionSet> {
    let draws = if model.is_stochastic() {
        n_mc
    } else {
        if n_mc > 1 {
            warn!("{} model is deterministic; using 1 draw instead of {n_mc}", model.variant());
        }
        1
    };
    model.forward(&Tensor::from_grid(image), rng, draws, WeightMode::Sample)
}

/// Total loss over a batch and its gradient w.r.t. the flat parameter
/// vector.
pub fn loss_and_gradient<R: rand::Rng + ?Sized>(
    model: &Model,
    batch: &Batch,
    rng: &mut R,
    config: &LossConfig,
) -> Result<(f64, Vec<f32>)> {
    let mut grad = vec![0.0; model.param_count()];
    let branches: Vec<usize> = (0..model.num_branches()).collect();
    let terms = losses::objective(model, batch, &branches, rng, config, Some(&mut grad))?;
    Ok((terms.total(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9).unwrap(), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1e-3, 0.9).unwrap();
        assert!((half - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 5.359e-4).abs() < 1e-7);
        assert!(poly_lr(101, 100, 1e-3, 0.9).is_err());
        assert!(poly_lr(0, 0, 1e-3, 0.9).is_err());
    }

    #[test]
    fn sgd_and_adam_move_against_the_gradient() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                optimizer: kind,
                ..Default::default()
            };
            let mut opt = Optimizer::new(&cfg, 2);
            let mut p = vec![1.0f32, -1.0];
            opt.step(&mut p, &[2.0, -3.0], 0.1);
            assert!(p[0] < 1.0 && p[1] > -1.0);
        }
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&cfg, 1);
        let mut p = vec![0.0f32];
        opt.step(&mut p, &[123.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn ndjson_round_trip() {
        let log = TrainingLog {
            records: vec![EpochRecord {
                epoch: 0,
                loss: 0.5,
                kl: 0.0,
                dice: 0.5,
                lr: 1e-3,
                val_q_score: None,
            }],
        };
        let text = log.to_ndjson();
        assert!(text.contains("\"val_q_score\":null"));
        assert_eq!(TrainingLog::parse(&text).unwrap(), log);
    }
}
