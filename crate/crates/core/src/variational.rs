//! Mean-field Gaussian weight posteriors with reparameterized sampling and a
//! closed-form KL divergence to a diagonal Gaussian prior.
//!
//! A posterior entry is `N(mu, sigma^2)` with `sigma = softplus(rho)`. Samples
//! are drawn as `w = mu + sigma * eps`, `eps ~ N(0, 1)`, so the gradient of any
//! downstream loss flows to `mu` directly and to `rho` through
//! `eps * sigmoid(rho)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvShape, Tensor};

/// Posterior scale a freshly initialized layer starts from.
pub const INITIAL_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Draw a fresh weight sample.
    Sample,
    /// Use the posterior means.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        let prior = Self { mean, std };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) || !self.mean.is_finite() {
            return Err(Error::Config(format!(
                "prior needs finite mean and std > 0, got N({}, {}^2)",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// `ln(1 + e^rho)`, stable for large |rho|.
pub fn softplus(rho: f64) -> f64 {
    if rho > 30.0 {
        rho
    } else {
        rho.exp().ln_1p()
    }
}

pub fn inverse_softplus(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// KL(N(mu, softplus(rho)^2) || prior) for one entry.
pub fn kl_entry(mu: f64, rho: f64, prior: &PriorSpec) -> f64 {
    let sigma = softplus(rho);
    let dm = mu - prior.mean;
    (prior.std / sigma).ln() + (sigma * sigma + dm * dm) / (2.0 * prior.std * prior.std) - 0.5
}

/// Partial derivatives of [`kl_entry`] with respect to `mu` and `rho`.
pub fn kl_entry_grad(mu: f64, rho: f64, prior: &PriorSpec) -> (f64, f64) {
    let sigma = softplus(rho);
    let var_p = prior.std * prior.std;
    let d_sigma = -1.0 / sigma + sigma / var_p;
    ((mu - prior.mean) / var_p, d_sigma * logistic(rho))
}

pub(crate) fn kl_slices(mu: &[f32], rho: &[f32], prior: &PriorSpec) -> f64 {
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| kl_entry(m as f64, r as f64, prior))
        .sum()
}

/// Adds `scale * dKL` into the gradient buffers.
pub(crate) fn kl_grad_slices(
    mu: &[f32],
    rho: &[f32],
    prior: &PriorSpec,
    scale: f64,
    grad_mu: &mut [f32],
    grad_rho: &mut [f32],
) {
    for i in 0..mu.len() {
        let (gm, gr) = kl_entry_grad(mu[i] as f64, rho[i] as f64, prior);
        grad_mu[i] += (scale * gm) as f32;
        grad_rho[i] += (scale * gr) as f32;
    }
}

/// Fills `out` with `mu + softplus(rho) * eps` and records `eps`.
pub(crate) fn sample_slices<R: Rng + ?Sized>(
    mu: &[f32],
    rho: &[f32],
    rng: &mut R,
    out: &mut Vec<f32>,
    eps: &mut Vec<f32>,
) {
    out.clear();
    eps.clear();
    for (&m, &r) in mu.iter().zip(rho) {
        let e: f32 = rng.sample(StandardNormal);
        eps.push(e);
        out.push(m + softplus(r as f64) as f32 * e);
    }
}

/// Gradient of a loss w.r.t. `rho` given its gradient w.r.t. the sampled weights.
pub(crate) fn rho_grad_from_weight_grad(grad_w: f32, eps: f32, rho: f32) -> f32 {
    grad_w * eps * logistic(rho as f64) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub shape: Vec<usize>,
    pub mu: Vec<f32>,
    pub rho: Vec<f32>,
}

impl GaussianVariational {
    pub fn new(shape: Vec<usize>, mu: Vec<f32>, rho: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mu.len() != n || rho.len() != n {
            return Err(Error::Shape(format!(
                "posterior of shape {shape:?} needs {n} entries, got mu {} and rho {}",
                mu.len(),
                rho.len()
            )));
        }
        Ok(Self { shape, mu, rho })
    }

    /// Posterior with the given means and a uniform scale `sigma`.
    pub fn with_sigma(shape: Vec<usize>, mu: Vec<f32>, sigma: f64) -> Result<Self> {
        let rho = vec![inverse_softplus(sigma) as f32; mu.len()];
        Self::new(shape, mu, rho)
    }

    /// Fan-in scaled uniform means and the initial posterior scale.
    pub fn init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let bound = (6.0 / fan_in.max(1) as f32).sqrt();
        let mu = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            shape,
            mu,
            rho: vec![inverse_softplus(INITIAL_SIGMA) as f32; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r as f64)).collect()
    }
}

/// Draws `mu + softplus(rho) * eps` with i.i.d. standard-normal `eps`.
pub fn sample_weights<R: Rng + ?Sized>(params: &GaussianVariational, rng: &mut R) -> Vec<f32> {
    let (mut out, mut eps) = (Vec::new(), Vec::new());
    sample_slices(&params.mu, &params.rho, rng, &mut out, &mut eps);
    out
}

/// Sum over entries of the closed-form KL to the prior.
pub fn kl_to_prior(params: &GaussianVariational, prior: &PriorSpec) -> f64 {
    kl_slices(&params.mu, &params.rho, prior)
}

/// Gradients of [`kl_to_prior`] with respect to `mu` and `rho`.
pub fn kl_to_prior_grad(params: &GaussianVariational, prior: &PriorSpec) -> (Vec<f64>, Vec<f64>) {
    params
        .mu
        .iter()
        .zip(&params.rho)
        .map(|(&m, &r)| kl_entry_grad(m as f64, r as f64, prior))
        .unzip()
}

/// Same-padded convolution whose weight `[cout, cin, k, k]` and bias `[cout]`
/// come from Gaussian posteriors, either sampled or at their means.
pub fn variational_conv<R: Rng + ?Sized>(
    input: &Tensor,
    params: &GaussianVariational,
    bias_params: &GaussianVariational,
    rng: &mut R,
    mode: WeightMode,
) -> Result<Tensor> {
    let [cout, cin, kh, kw] = params.shape[..] else {
        return Err(Error::Shape(format!(
            "convolution posterior must be 4-D, got {:?}",
            params.shape
        )));
    };
    if kh != kw {
        return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if bias_params.len() != cout {
        return Err(Error::Shape(format!(
            "bias posterior has {} entries for {cout} output channels",
            bias_params.len()
        )));
    }
    let shape = ConvShape {
        cin,
        cout,
        kernel: kh,
    };
    let (weight, bias) = match mode {
        WeightMode::Sample => (sample_weights(params, rng), sample_weights(bias_params, rng)),
        WeightMode::Mean => (params.mu.clone(), bias_params.mu.clone()),
    };
    conv2d(input, shape, &weight, &bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_variance_limit_returns_means() {
        let p = GaussianVariational::new(vec![3], vec![0.5, -1.0, 2.0], vec![-200.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_weights(&p, &mut rng), p.mu);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = GaussianVariational::with_sigma(vec![2, 2], vec![0.0; 4], 0.3).unwrap();
        let a = sample_weights(&p, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_weights(&p, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn standard_normal_moments() {
        let p = GaussianVariational::with_sigma(vec![1], vec![0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_weights(&p, &mut rng)[0] as f64).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn kl_closed_form_values() {
        let prior = PriorSpec::default();
        let q = GaussianVariational::with_sigma(vec![1], vec![0.0], 1.0).unwrap();
        assert!(kl_to_prior(&q, &prior).abs() < 1e-6);
        let q = GaussianVariational::with_sigma(vec![1], vec![1.0], 1.0).unwrap();
        assert!((kl_to_prior(&q, &prior) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let prior = PriorSpec::new(0.2, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for _ in 0..200 {
            let mu: f64 = rng.gen_range(-2.0..2.0);
            let rho: f64 = rng.gen_range(-4.0..2.0);
            let (gm, gr) = kl_entry_grad(mu, rho, &prior);
            let fm = (kl_entry(mu + h, rho, &prior) - kl_entry(mu - h, rho, &prior)) / (2.0 * h);
            let fr = (kl_entry(mu, rho + h, &prior) - kl_entry(mu, rho - h, &prior)) / (2.0 * h);
            assert!((gm - fm).abs() <= 1e-3 * fm.abs().max(1e-6));
            assert!((gr - fr).abs() <= 1e-3 * fr.abs().max(1e-6));
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for s in [1e-3, 0.05, 1.0, 7.5] {
            assert!((softplus(inverse_softplus(s)) - s).abs() < 1e-9 * s.max(1.0));
        }
    }

    #[test]
    fn mean_mode_with_vanishing_sigma_is_deterministic_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = GaussianVariational::new(vec![2, 3, 3, 3], mu.clone(), vec![-100.0; 54]).unwrap();
        let b = GaussianVariational::new(vec![2], vec![0.1, -0.2], vec![-100.0; 2]).unwrap();
        let x = Tensor::from_vec(3, 4, 4, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
        let expected = conv2d(&x, ConvShape { cin: 3, cout: 2, kernel: 3 }, &mu, &[0.1, -0.2]).unwrap();
        for mode in [WeightMode::Mean, WeightMode::Sample] {
            let y = variational_conv(&x, &w, &b, &mut rng, mode).unwrap();
            assert_eq!(y, expected);
        }
    }

    #[test]
    fn zero_means_give_zero_output() {
        let w = GaussianVariational::with_sigma(vec![2, 1, 3, 3], vec![0.0; 18], 0.5).unwrap();
        let b = GaussianVariational::with_sigma(vec![2], vec![0.0; 2], 0.5).unwrap();
        let x = Tensor::from_vec(1, 3, 3, vec![1.0; 9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = variational_conv(&x, &w, &b, &mut rng, WeightMode::Mean).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_by_hand() {
        // out = 2 * x + 0.5 on a 2x2 single-channel input.
        let w = GaussianVariational::with_sigma(vec![1, 1, 1, 1], vec![2.0], 0.1).unwrap();
        let b = GaussianVariational::with_sigma(vec![1], vec![0.5], 0.1).unwrap();
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, -1.0, 0.25, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = variational_conv(&x, &w, &b, &mut rng, WeightMode::Mean).unwrap();
        assert_eq!(y.data, vec![2.5, -1.5, 1.0, 6.5]);
    }

    #[test]
    fn conv_rejects_incompatible_channels() {
        let w = GaussianVariational::with_sigma(vec![1, 2, 3, 3], vec![0.0; 18], 0.1).unwrap();
        let b = GaussianVariational::with_sigma(vec![1], vec![0.0], 0.1).unwrap();
        let x = Tensor::zeros(3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            variational_conv(&x, &w, &b, &mut rng, WeightMode::Mean),
            Err(Error::Shape(_))
        ));
    }

    /// Pathwise gradient of E[(w - t)^2] w.r.t. (mu, rho) against the analytic
    /// expectation gradient (2(mu - t), 2 sigma sigmoid(rho)).
    #[test]
    fn reparameterized_gradient_matches_expectation() {
        let (mu, rho, target) = (0.7f32, 0.3f32, -0.4f32);
        let p = GaussianVariational::new(vec![1], vec![mu], vec![rho]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 20_000;
        let (mut g_mu, mut g_rho) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let (mut w, mut eps) = (Vec::new(), Vec::new());
            sample_slices(&p.mu, &p.rho, &mut rng, &mut w, &mut eps);
            let dw = 2.0 * (w[0] - target);
            g_mu += dw as f64;
            g_rho += rho_grad_from_weight_grad(dw, eps[0], rho) as f64;
        }
        g_mu /= n as f64;
        g_rho /= n as f64;
        let sigma = softplus(rho as f64);
        let exact_mu = 2.0 * (mu - target) as f64;
        let exact_rho = 2.0 * sigma * logistic(rho as f64);
        assert!((g_mu - exact_mu).abs() <= 0.05 * exact_mu.abs());
        assert!((g_rho - exact_rho).abs() <= 0.05 * exact_rho.abs());
    }

    proptest! {
        #[test]
        fn sigma_is_positive(rho in -50.0f64..50.0) {
            prop_assert!(softplus(rho) > 0.0);
        }

        #[test]
        fn kl_is_nonnegative_and_additive(
            mu in proptest::collection::vec(-3.0f32..3.0, 1..12),
            rho in proptest::collection::vec(-5.0f32..3.0, 12),
            split in 0usize..12,
        ) {
            let prior = PriorSpec::default();
            let rho = &rho[..mu.len()];
            let total = kl_slices(&mu, rho, &prior);
            prop_assert!(total >= -1e-9);
            let k = split.min(mu.len());
            let parts = kl_slices(&mu[..k], &rho[..k], &prior) + kl_slices(&mu[k..], &rho[k..], &prior);
            prop_assert!((total - parts).abs() <= 1e-9 * total.abs().max(1.0));
        }
    }
}
