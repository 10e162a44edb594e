//! Evaluation metrics for predicted segmentation distributions: staged Dice
//! (Q-score), generalized energy distance, sample diversity and similarity,
//! plus the pixelwise error and gamma maps used for visual inspection.
//!
//! Conventions shared by every metric here:
//! * Dice of two empty masks is 1 and IoU of two empty masks is 1.
//! * Within-set expectations average over ordered pairs `i != j` and are 0 for
//!   a single-element set; cross expectations include every ordered pair.
//! * GED is an estimator and may come out slightly negative; it is not clipped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiRaterCase;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::network::Model;
use crate::tensor::Tensor;
use crate::variational::WeightMode;

/// Clip applied to probabilities inside cross-entropy maps.
pub const CE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub values: Grid<f64>,
}

impl ProbabilityMap {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some(v) = values.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("probability map value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn from_f32(grid: &Grid<f32>) -> Result<Self> {
        Self::new(grid.map(|&v| v as f64))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    masks: Vec<Mask>,
}

impl SampleSet {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let first = masks.first().ok_or(Error::EmptySet("sample set"))?;
        for m in &masks {
            first.ensure_same_shape(m, "sample set")?;
            if !m.is_binary() {
                return Err(Error::Range("sample masks must be {0, 1}-valued".into()));
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.masks[0].shape()
    }
}

/// Fraction of raters marking each pixel foreground.
pub fn probability_map(rater_masks: &SampleSet) -> ProbabilityMap {
    let (h, w) = rater_masks.shape();
    let m = rater_masks.len();
    let mut counts = vec![0usize; h * w];
    for mask in rater_masks.masks() {
        for (c, &v) in counts.iter_mut().zip(&mask.data) {
            *c += v as usize;
        }
    }
    ProbabilityMap {
        values: Grid {
            height: h,
            width: w,
            data: counts.into_iter().map(|c| c as f64 / m as f64).collect(),
        },
    }
}

fn in_level(q: f64, level: usize, levels: usize) -> bool {
    let lo = level as f64 / levels as f64;
    if level + 1 == levels {
        lo <= q && q <= 1.0
    } else {
        lo <= q && q < (level + 1) as f64 / levels as f64
    }
}

/// Indicator of the `level`-th of `levels` equal-width probability bands; the
/// top band is closed at 1.
pub fn level_mask(q: &ProbabilityMap, level: usize, levels: usize) -> Result<Mask> {
    if levels == 0 || level >= levels {
        return Err(Error::Range(format!("level {level} of {levels}")));
    }
    Ok(q.values.map(|&v| u8::from(in_level(v, level, levels))))
}

fn dice(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mean Dice over `levels` probability bands.
pub fn q_score(pred: &ProbabilityMap, gt: &ProbabilityMap, levels: usize) -> Result<f64> {
    pred.values.ensure_same_shape(&gt.values, "q-score")?;
    let mut sum = 0.0;
    for l in 0..levels.max(1) {
        sum += dice(&level_mask(pred, l, levels)?, &level_mask(gt, l, levels)?);
    }
    Ok(sum / levels as f64)
}

/// `1 - IoU`, with the IoU of two empty masks taken as 1.
pub fn mask_distance(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_shape(b, "mask distance")?;
    Ok(distance(a, b))
}

fn distance(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn cross_mean(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.shape() != b.shape() {
        let (ah, aw) = a.shape();
        let (bh, bw) = b.shape();
        return Err(Error::Shape(format!("sample sets {ah}x{aw} vs {bh}x{bw}")));
    }
    let mut sum = 0.0;
    for s in a.masks() {
        for y in b.masks() {
            sum += distance(s, y);
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

fn within_mean(a: &SampleSet) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += distance(&a.masks[i], &a.masks[j]);
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Squared generalized energy distance `2E[d(s,y)] - E[d(s,s')] - E[d(y,y')]`.
pub fn ged(pred: &SampleSet, gt: &SampleSet) -> Result<f64> {
    Ok(2.0 * cross_mean(pred, gt)? - within_mean(pred) - within_mean(gt))
}

/// Mean pairwise distance between predicted samples.
pub fn diversity(pred: &SampleSet) -> f64 {
    within_mean(pred)
}

/// `1 - E[d(s, y)]` over all prediction/annotation pairs.
pub fn similarity(pred: &SampleSet, gt: &SampleSet) -> Result<f64> {
    Ok(1.0 - cross_mean(pred, gt)?)
}

fn cross_entropy(target: f64, prob: f64) -> f64 {
    let p = prob.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn check_probs(preds: &[Grid<f64>]) -> Result<(usize, usize)> {
    let first = preds.first().ok_or(Error::EmptySet("prediction samples"))?;
    for p in preds {
        first.ensure_same_shape(p, "prediction samples")?;
    }
    Ok(first.shape())
}

/// Pixelwise mean cross-entropy over every (annotation, prediction) pair.
pub fn error_map(gt_samples: &SampleSet, pred_samples: &[Grid<f64>]) -> Result<Grid<f64>> {
    let (h, w) = check_probs(pred_samples)?;
    if gt_samples.shape() != (h, w) {
        return Err(Error::Shape("error map: annotation and prediction sizes differ".into()));
    }
    let pairs = (gt_samples.len() * pred_samples.len()) as f64;
    let mut out = vec![0.0; h * w];
    for y in gt_samples.masks() {
        for s in pred_samples {
            for (i, o) in out.iter_mut().enumerate() {
                *o += cross_entropy(y.data[i] as f64, s.data[i]);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= pairs);
    Grid::from_vec(h, w, out)
}

/// Pixelwise mean cross-entropy between the mean prediction and each sample.
pub fn gamma_map(pred_samples: &[Grid<f64>]) -> Result<Grid<f64>> {
    let (h, w) = check_probs(pred_samples)?;
    let n = pred_samples.len() as f64;
    let mut mean = vec![0.0; h * w];
    for s in pred_samples {
        mean.iter_mut().zip(&s.data).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = vec![0.0; h * w];
    for s in pred_samples {
        for (i, o) in out.iter_mut().enumerate() {
            *o += cross_entropy(mean[i], s.data[i]);
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    Grid::from_vec(h, w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub q_score: f64,
    pub ged: f64,
    pub diversity: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub q_score: f64,
    pub ged: f64,
    pub diversity: f64,
    pub similarity: f64,
    pub per_case: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn from_cases(variant: Option<String>, per_case: Vec<CaseMetrics>) -> Result<Self> {
        if per_case.is_empty() {
            return Err(Error::EmptySet("per-case metrics"));
        }
        let n = per_case.len() as f64;
        let mean = |f: fn(&CaseMetrics) -> f64| per_case.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            variant,
            q_score: mean(|c| c.q_score),
            ged: mean(|c| c.ged),
            diversity: mean(|c| c.diversity),
            similarity: mean(|c| c.similarity),
            per_case,
        })
    }
}

/// Scores one prediction against a case's annotations.
pub fn score_case(case_id: &str, fused: &ProbabilityMap, samples: &SampleSet, raters: &SampleSet, levels: usize) -> Result<CaseMetrics> {
    let gt = probability_map(raters);
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        q_score: q_score(fused, &gt, levels)?,
        ged: ged(samples, raters)?,
        diversity: diversity(samples),
        similarity: similarity(samples, raters)?,
    })
}

/// Per-case prediction seed: case `i` of a run seeded with `seed`.
pub(crate) fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Runs `n_mc` posterior draws per branch on every case and aggregates the
/// four metrics. `levels` defaults to raters + 1 when `None`.
pub fn evaluate(model: &Model, cases: &[MultiRaterCase], n_mc: usize, levels: Option<usize>, seed: u64) -> Result<MetricsReport> {
    evaluate_with(model, cases, n_mc, levels, seed, |_, _| Ok(()))
}

/// [`evaluate`] with a callback receiving each case's prediction.
pub fn evaluate_with(
    model: &Model,
    cases: &[MultiRaterCase],
    n_mc: usize,
    levels: Option<usize>,
    seed: u64,
    mut on_case: impl FnMut(&MultiRaterCase, &crate::network::PredictionSet) -> Result<()>,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::EmptySet("evaluation cases"));
    }
    let mut per_case = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let raters = case.sample_set()?;
        let levels = levels.unwrap_or(raters.len() + 1);
        let n_draws = if model.is_stochastic() { n_mc } else { 1 };
        let mut rng = case_rng(seed, i);
        let pred = model.forward(&Tensor::from_grid(&case.image), &mut rng, n_draws, WeightMode::Sample)?;
        let samples = SampleSet::new(pred.mc_samples.clone())?;
        let fused = ProbabilityMap::from_f32(&pred.fused)?;
        per_case.push(score_case(&case.case_id, &fused, &samples, &raters, levels)?);
        on_case(case, &pred)?;
    }
    MetricsReport::from_cases(Some(model.variant().to_string()), per_case)
}
