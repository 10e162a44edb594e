//! One-encoder-m-decoder U-Net with optional rater-specific attention gates on
//! the skip connections and optional Gaussian-posterior decoder weights.
//!
//! All trainable values live in one flat `f32` vector. Layers only hold index
//! ranges into it, which keeps optimizers, checkpoints and gradient buffers
//! trivially aligned with the model.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::tensor::{self, sigmoid, ConvShape, Tensor};
use crate::variational::{self, PriorSpec, WeightMode};

/// Probability at or above which a decoder output counts as foreground.
pub const SAMPLE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single decoder trained on the fused probability map.
    Vanilla,
    /// Shared encoder, one plain decoder per rater.
    Om,
    /// `Om` with attention gates on every skip connection.
    Oma,
    /// `Oma` with Bayesian decoders.
    Omba,
    /// One full U-Net per rater, outputs averaged.
    Ensemble,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::Om,
        Variant::Oma,
        Variant::Omba,
        Variant::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Om => "om",
            Variant::Oma => "oma",
            Variant::Omba => "omba",
            Variant::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of resolution levels.
    pub depth: usize,
    pub base_channels: usize,
    pub num_branches: usize,
    pub use_attention: bool,
    pub use_bayesian_decoders: bool,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            num_branches: 3,
            use_attention: false,
            use_bayesian_decoders: false,
            input_channels: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 || self.num_branches == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "base_channels, num_branches and input_channels must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be divisible by `2^(depth-1)`.
    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        let div = 1usize << (self.depth - 1);
        if channels != self.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {channels}",
                self.input_channels
            )));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not divisible by 2^(depth-1) = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Slot {
    Fixed(Range<usize>),
    Gaussian { mu: Range<usize>, rho: Range<usize> },
}

impl Slot {
    fn ranges(&self) -> Vec<Range<usize>> {
        match self {
            Slot::Fixed(r) => vec![r.clone()],
            Slot::Gaussian { mu, rho } => vec![mu.clone(), rho.clone()],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    shape: ConvShape,
    weight: Slot,
    bias: Slot,
}

/// Concrete weights for one forward pass through a layer.
#[derive(Clone, Debug)]
pub(crate) struct DrawnConv {
    w: Vec<f32>,
    b: Vec<f32>,
    w_eps: Option<Vec<f32>>,
    b_eps: Option<Vec<f32>>,
}

/// Gradient with respect to the drawn weights of one layer.
#[derive(Clone, Debug)]
pub(crate) struct ConvGrad {
    dw: Vec<f32>,
    db: Vec<f32>,
}

impl Conv {
    fn draw<R: Rng + ?Sized>(&self, params: &[f32], mode: WeightMode, rng: &mut R) -> DrawnConv {
        let mut one = |slot: &Slot| match slot {
            Slot::Fixed(r) => (params[r.clone()].to_vec(), None),
            Slot::Gaussian { mu, .. } if mode == WeightMode::Mean => (params[mu.clone()].to_vec(), None),
            Slot::Gaussian { mu, rho } => {
                let (mut out, mut eps) = (Vec::new(), Vec::new());
                variational::sample_slices(&params[mu.clone()], &params[rho.clone()], rng, &mut out, &mut eps);
                (out, Some(eps))
            }
        };
        let (w, w_eps) = one(&self.weight);
        let (b, b_eps) = one(&self.bias);
        DrawnConv { w, b, w_eps, b_eps }
    }

    fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            dw: vec![0.0; self.shape.weight_len()],
            db: vec![0.0; self.shape.cout],
        }
    }

    fn forward(&self, x: &Tensor, drawn: &DrawnConv) -> Result<Tensor> {
        tensor::conv2d(x, self.shape, &drawn.w, &drawn.b)
    }

    fn backward(&self, x: &Tensor, drawn: &DrawnConv, dy: &Tensor, grad: &mut ConvGrad, need_dx: bool) -> Option<Tensor> {
        tensor::conv2d_backward(x, self.shape, &drawn.w, dy, &mut grad.dw, &mut grad.db, need_dx)
    }

    /// Maps gradients w.r.t. drawn weights onto the stored parameters.
    fn scatter(&self, params: &[f32], drawn: &DrawnConv, grad: &ConvGrad, out: &mut [f32]) {
        let mut one = |slot: &Slot, g: &[f32], eps: &Option<Vec<f32>>| match slot {
            Slot::Fixed(r) => out[r.clone()].iter_mut().zip(g).for_each(|(o, v)| *o += v),
            Slot::Gaussian { mu, rho } => {
                out[mu.clone()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
                if let Some(eps) = eps {
                    let rho_vals = &params[rho.clone()];
                    for (i, o) in out[rho.clone()].iter_mut().enumerate() {
                        *o += variational::rho_grad_from_weight_grad(g[i], eps[i], rho_vals[i]);
                    }
                }
            }
        };
        one(&self.weight, &grad.dw, &drawn.w_eps);
        one(&self.bias, &grad.db, &drawn.b_eps);
    }

    fn gaussian_slots(&self) -> impl Iterator<Item = (&Range<usize>, &Range<usize>)> {
        [&self.weight, &self.bias].into_iter().filter_map(|s| match s {
            Slot::Gaussian { mu, rho } => Some((mu, rho)),
            Slot::Fixed(_) => None,
        })
    }
}

/// Allocates parameter ranges and writes their initial values.
struct Allocator<'a> {
    params: &'a mut Vec<f32>,
    rng: ChaCha8Rng,
}

impl Allocator<'_> {
    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, bayesian: bool) -> Conv {
        let shape = ConvShape { cin, cout, kernel };
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f32).sqrt();
        let rho0 = variational::inverse_softplus(variational::INITIAL_SIGMA) as f32;
        let mut alloc = |len: usize, init: &mut dyn FnMut(&mut ChaCha8Rng) -> f32| {
            let start = self.params.len();
            for _ in 0..len {
                let v = init(&mut self.rng);
                self.params.push(v);
            }
            start..start + len
        };
        let (nw, nb) = (shape.weight_len(), cout);
        if bayesian {
            let w_mu = alloc(nw, &mut |r| r.gen_range(-bound..bound));
            let w_rho = alloc(nw, &mut |_| rho0);
            let b_mu = alloc(nb, &mut |_| 0.0);
            let b_rho = alloc(nb, &mut |_| rho0);
            Conv {
                shape,
                weight: Slot::Gaussian { mu: w_mu, rho: w_rho },
                bias: Slot::Gaussian { mu: b_mu, rho: b_rho },
            }
        } else {
            let w = alloc(nw, &mut |r| r.gen_range(-bound..bound));
            let b = alloc(nb, &mut |_| 0.0);
            Conv {
                shape,
                weight: Slot::Fixed(w),
                bias: Slot::Fixed(b),
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    /// Two convolutions per level, level k at `2k` and `2k + 1`.
    convs: Vec<Conv>,
    span: Range<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LevelLayers {
    /// Indices of F_x (gating feature) and F_f (skip feature).
    gate: Option<(usize, usize)>,
    conv1: usize,
    conv2: usize,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Ordered deepest level first.
    levels: Vec<LevelLayers>,
    head: usize,
    convs: Vec<Conv>,
    encoder: usize,
    span: Range<usize>,
}

fn build_encoder(alloc: &mut Allocator, cfg: &NetworkConfig) -> Encoder {
    let start = alloc.params.len();
    let mut convs = Vec::with_capacity(2 * cfg.depth);
    for k in 0..cfg.depth {
        let cin = if k == 0 { cfg.input_channels } else { cfg.channels(k - 1) };
        convs.push(alloc.conv(cin, cfg.channels(k), 3, false));
        convs.push(alloc.conv(cfg.channels(k), cfg.channels(k), 3, false));
    }
    Encoder {
        convs,
        span: start..alloc.params.len(),
    }
}

fn build_decoder(alloc: &mut Allocator, cfg: &NetworkConfig, encoder: usize) -> Decoder {
    let start = alloc.params.len();
    let bayes = cfg.use_bayesian_decoders;
    let mut convs = Vec::new();
    let mut levels = Vec::new();
    for k in (0..cfg.depth - 1).rev() {
        let (c_skip, c_up) = (cfg.channels(k), cfg.channels(k + 1));
        let gate = cfg.use_attention.then(|| {
            convs.push(alloc.conv(c_up, c_skip, 1, bayes));
            convs.push(alloc.conv(c_skip, c_skip, 1, bayes));
            (convs.len() - 2, convs.len() - 1)
        });
        convs.push(alloc.conv(c_up + c_skip, c_skip, 3, bayes));
        convs.push(alloc.conv(c_skip, c_skip, 3, bayes));
        levels.push(LevelLayers {
            gate,
            conv1: convs.len() - 2,
            conv2: convs.len() - 1,
        });
    }
    convs.push(alloc.conv(cfg.channels(0), 1, 1, bayes));
    Decoder {
        levels,
        head: convs.len() - 1,
        convs,
        encoder,
        span: start..alloc.params.len(),
    }
}

/// Seed of ensemble member `r`, so each member can be reproduced as a
/// standalone single-decoder network.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    // splitmix64 finalizer over (seed, member)
    let mut z = seed ^ (member as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outputs of a full forward pass for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// Per-branch probability map, averaged over weight draws.
    pub branch_probs: Vec<Grid<f32>>,
    /// Every per-draw output thresholded at 0.5, branch-major.
    pub mc_samples: Vec<Mask>,
    /// The per-draw probability maps behind `mc_samples`.
    pub sample_probs: Vec<Grid<f32>>,
    /// Uniform mixture of the branch maps.
    pub fused: Grid<f32>,
    pub draws_per_branch: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    variant: Variant,
    config: NetworkConfig,
    seed: u64,
    params: Vec<f32>,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
}

/// Effective architecture switches for a ladder variant.
pub fn variant_config(variant: Variant, config: &NetworkConfig) -> NetworkConfig {
    let mut cfg = config.clone();
    let (m, att, bayes) = match variant {
        Variant::Vanilla => (1, false, false),
        Variant::Om => (config.num_branches, false, false),
        Variant::Oma => (config.num_branches, true, false),
        Variant::Omba => (config.num_branches, true, true),
        Variant::Ensemble => (config.num_branches, false, false),
    };
    cfg.num_branches = m;
    cfg.use_attention = att;
    cfg.use_bayesian_decoders = bayes;
    cfg
}

pub fn build_model(variant: Variant, config: &NetworkConfig, seed: u64) -> Result<Model> {
    Model::build(variant, config, seed)
}

impl Model {
    pub fn build(variant: Variant, config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = variant_config(variant, config);
        let mut params = Vec::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        if variant == Variant::Ensemble {
            for r in 0..cfg.num_branches {
                let mut alloc = Allocator {
                    params: &mut params,
                    rng: ChaCha8Rng::seed_from_u64(member_seed(seed, r)),
                };
                encoders.push(build_encoder(&mut alloc, &cfg));
                decoders.push(build_decoder(&mut alloc, &cfg, r));
            }
        } else {
            let mut alloc = Allocator {
                params: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            encoders.push(build_encoder(&mut alloc, &cfg));
            for _ in 0..cfg.num_branches {
                decoders.push(build_decoder(&mut alloc, &cfg, 0));
            }
        }
        Ok(Self {
            variant,
            config: cfg,
            seed,
            params,
            encoders,
            decoders,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_branches(&self) -> usize {
        self.decoders.len()
    }

    pub fn encoder_count(&self) -> usize {
        self.encoders.len()
    }

    pub fn decoder_count(&self) -> usize {
        self.decoders.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "model has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Index range of encoder `e`'s parameters in [`Model::params`].
    pub fn encoder_span(&self, e: usize) -> Result<Range<usize>> {
        self.encoders
            .get(e)
            .map(|enc| enc.span.clone())
            .ok_or(Error::Index { index: e, len: self.encoders.len() })
    }

    /// Index range of decoder `r`'s parameters in [`Model::params`].
    pub fn decoder_span(&self, r: usize) -> Result<Range<usize>> {
        self.decoder(r).map(|d| d.span.clone())
    }

    /// Encoder feeding branch `r`.
    pub fn encoder_of(&self, r: usize) -> Result<usize> {
        self.decoder(r).map(|d| d.encoder)
    }

    /// Whether any layer carries a weight posterior.
    pub fn is_stochastic(&self) -> bool {
        self.decoders
            .iter()
            .flat_map(|d| &d.convs)
            .any(|c| c.gaussian_slots().next().is_some())
    }

    /// Index ranges of every (mu, rho) pair in decoder `r`.
    pub fn posterior_spans(&self, r: usize) -> Result<Vec<(Range<usize>, Range<usize>)>> {
        Ok(self
            .decoder(r)?
            .convs
            .iter()
            .flat_map(|c| c.gaussian_slots().map(|(m, r)| (m.clone(), r.clone())).collect::<Vec<_>>())
            .collect())
    }

    /// Parameter ranges of the attention gates of decoder `r`, deepest first.
    pub fn gate_spans(&self, r: usize) -> Result<Vec<Range<usize>>> {
        let dec = self.decoder(r)?;
        Ok(dec
            .levels
            .iter()
            .filter_map(|l| l.gate)
            .flat_map(|(a, b)| {
                [a, b].into_iter().flat_map(|i| {
                    let c = &dec.convs[i];
                    c.weight.ranges().into_iter().chain(c.bias.ranges())
                })
            })
            .collect())
    }

    fn decoder(&self, r: usize) -> Result<&Decoder> {
        self.decoders.get(r).ok_or(Error::Index {
            index: r,
            len: self.decoders.len(),
        })
    }

    /// KL divergence of decoder `r`'s posteriors to the prior (0 when deterministic).
    pub fn decoder_kl(&self, r: usize, prior: &PriorSpec) -> Result<f64> {
        let dec = self.decoder(r)?;
        Ok(dec
            .convs
            .iter()
            .flat_map(|c| c.gaussian_slots())
            .map(|(mu, rho)| variational::kl_slices(&self.params[mu.clone()], &self.params[rho.clone()], prior))
            .sum())
    }

    pub(crate) fn decoder_kl_grad(&self, r: usize, prior: &PriorSpec, scale: f64, grad: &mut [f32]) -> Result<()> {
        let dec = self.decoder(r)?;
        for (mu, rho) in dec.convs.iter().flat_map(|c| c.gaussian_slots()) {
            // mu and rho ranges are disjoint and mu precedes rho
            let (lo, hi) = grad.split_at_mut(rho.start);
            variational::kl_grad_slices(
                &self.params[mu.clone()],
                &self.params[rho.clone()],
                prior,
                scale,
                &mut lo[mu.clone()],
                &mut hi[..rho.len()],
            );
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        self.config.check_input(image.channels, image.height, image.width)
    }

    /// Shared-encoder features, one tensor per resolution level.
    pub fn encode(&self, encoder: usize, image: &Tensor) -> Result<Vec<Tensor>> {
        let drawn = self.draw_encoder(encoder)?;
        Ok(self.encoder_forward(encoder, &drawn, image)?.features)
    }

    /// Foreground probability map of branch `r`.
    pub fn decode_branch<R: Rng + ?Sized>(
        &self,
        features: &[Tensor],
        r: usize,
        rng: &mut R,
        mode: WeightMode,
    ) -> Result<Grid<f32>> {
        let drawn = self.draw_decoder(r, mode, rng)?;
        let cache = self.decoder_forward(r, &drawn, features)?;
        Ok(cache.prob_grid())
    }

    /// Attention coefficients of branch `r`, deepest level first; empty when
    /// the model has no gates.
    pub fn gate_coefficients<R: Rng + ?Sized>(
        &self,
        features: &[Tensor],
        r: usize,
        rng: &mut R,
        mode: WeightMode,
    ) -> Result<Vec<Tensor>> {
        let drawn = self.draw_decoder(r, mode, rng)?;
        let cache = self.decoder_forward(r, &drawn, features)?;
        Ok(cache.levels.into_iter().filter_map(|l| l.gate.map(|g| g.coeff)).collect())
    }

    /// Runs every branch `n_mc` times and fuses the branch maps uniformly.
    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor, rng: &mut R, n_mc: usize, mode: WeightMode) -> Result<PredictionSet> {
        if n_mc == 0 {
            return Err(Error::Range("n_mc must be >= 1".into()));
        }
        self.check_image(image)?;
        let features = (0..self.encoders.len())
            .map(|e| self.encode(e, image))
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = (image.height, image.width);
        let mut branch_probs = Vec::with_capacity(self.decoders.len());
        let mut mc_samples = Vec::with_capacity(self.decoders.len() * n_mc);
        let mut sample_probs = Vec::with_capacity(self.decoders.len() * n_mc);
        for (r, dec) in self.decoders.iter().enumerate() {
            let stochastic = mode == WeightMode::Sample && dec.convs.iter().any(|c| c.gaussian_slots().next().is_some());
            let mut acc = vec![0.0f64; h * w];
            let mut last: Option<Grid<f32>> = None;
            for _ in 0..n_mc {
                let prob = match (&last, stochastic) {
                    (Some(p), false) => p.clone(),
                    _ => self.decode_branch(&features[dec.encoder], r, rng, mode)?,
                };
                acc.iter_mut().zip(&prob.data).for_each(|(a, &p)| *a += p as f64);
                mc_samples.push(Mask::threshold(&prob, SAMPLE_THRESHOLD));
                sample_probs.push(prob.clone());
                last = Some(prob);
            }
            let mean = acc.iter().map(|a| (a / n_mc as f64) as f32).collect();
            branch_probs.push(Grid::from_vec(h, w, mean)?);
        }
        let fused = fuse(&branch_probs)?;
        Ok(PredictionSet {
            branch_probs,
            mc_samples,
            sample_probs,
            fused,
            draws_per_branch: n_mc,
        })
    }

    pub(crate) fn draw_encoder(&self, e: usize) -> Result<Vec<DrawnConv>> {
        let enc = self.encoders.get(e).ok_or(Error::Index {
            index: e,
            len: self.encoders.len(),
        })?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(enc
            .convs
            .iter()
            .map(|c| c.draw(&self.params, WeightMode::Mean, &mut rng))
            .collect())
    }

    pub(crate) fn draw_decoder<R: Rng + ?Sized>(&self, r: usize, mode: WeightMode, rng: &mut R) -> Result<Vec<DrawnConv>> {
        Ok(self
            .decoder(r)?
            .convs
            .iter()
            .map(|c| c.draw(&self.params, mode, rng))
            .collect())
    }

    pub(crate) fn encoder_forward(&self, e: usize, drawn: &[DrawnConv], image: &Tensor) -> Result<EncoderCache> {
        self.check_image(image)?;
        let enc = &self.encoders[e];
        let depth = self.config.depth;
        let mut inputs = Vec::with_capacity(depth);
        let mut hidden = Vec::with_capacity(depth);
        let mut features: Vec<Tensor> = Vec::with_capacity(depth);
        let mut pool_args = Vec::with_capacity(depth);
        for k in 0..depth {
            let x = if k == 0 {
                image.clone()
            } else {
                let (pooled, arg) = tensor::maxpool2(&features[k - 1])?;
                pool_args.push(arg);
                pooled
            };
            let mut a = enc.convs[2 * k].forward(&x, &drawn[2 * k])?;
            tensor::relu_inplace(&mut a);
            let mut b = enc.convs[2 * k + 1].forward(&a, &drawn[2 * k + 1])?;
            tensor::relu_inplace(&mut b);
            inputs.push(x);
            hidden.push(a);
            features.push(b);
        }
        Ok(EncoderCache {
            inputs,
            hidden,
            features,
            pool_args,
        })
    }

    pub(crate) fn encoder_backward(
        &self,
        e: usize,
        drawn: &[DrawnConv],
        cache: &EncoderCache,
        mut d_features: Vec<Tensor>,
        grads: &mut [ConvGrad],
    ) {
        let enc = &self.encoders[e];
        let depth = self.config.depth;
        let mut d = d_features.pop().expect("one gradient per level");
        for k in (0..depth).rev() {
            tensor::relu_backward(&cache.features[k], &mut d);
            let mut da = enc.convs[2 * k + 1]
                .backward(&cache.hidden[k], &drawn[2 * k + 1], &d, &mut grads[2 * k + 1], true)
                .expect("input grad requested");
            tensor::relu_backward(&cache.hidden[k], &mut da);
            let dx = enc.convs[2 * k].backward(&cache.inputs[k], &drawn[2 * k], &da, &mut grads[2 * k], k > 0);
            if k > 0 {
                let prev = &cache.features[k - 1];
                let dprev = tensor::maxpool2_backward(prev.shape(), &cache.pool_args[k - 1], &dx.expect("input grad requested"));
                d = d_features.pop().expect("one gradient per level");
                d.add_assign(&dprev);
            }
        }
    }

    pub(crate) fn decoder_forward(&self, r: usize, drawn: &[DrawnConv], features: &[Tensor]) -> Result<DecoderCache> {
        let dec = self.decoder(r)?;
        let depth = self.config.depth;
        if features.len() != depth {
            return Err(Error::Shape(format!("expected {depth} feature levels, got {}", features.len())));
        }
        let mut x = features[depth - 1].clone();
        let mut levels = Vec::with_capacity(dec.levels.len());
        for (i, lv) in dec.levels.iter().enumerate() {
            let k = depth - 2 - i;
            let up = tensor::upsample2(&x);
            let skip = &features[k];
            let (gated, gate) = match lv.gate {
                Some((gx, gf)) => {
                    let (fa, cache) = gate_forward(skip, &up, (&dec.convs[gx], &drawn[gx]), (&dec.convs[gf], &drawn[gf]))?;
                    (fa, Some(cache))
                }
                None => (skip.clone(), None),
            };
            let cat = tensor::concat_channels(&up, &gated)?;
            let mut h1 = dec.convs[lv.conv1].forward(&cat, &drawn[lv.conv1])?;
            tensor::relu_inplace(&mut h1);
            let mut h2 = dec.convs[lv.conv2].forward(&h1, &drawn[lv.conv2])?;
            tensor::relu_inplace(&mut h2);
            x = h2.clone();
            levels.push(LevelCache {
                up,
                gate,
                cat,
                h1,
                h2,
            });
        }
        let mut prob = dec.convs[dec.head].forward(&x, &drawn[dec.head])?;
        prob.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(DecoderCache {
            levels,
            head_input: x,
            prob,
        })
    }

    /// Backpropagates `d_prob` through decoder `r`, accumulating layer
    /// gradients and adding feature gradients into `d_features`.
    pub(crate) fn decoder_backward(
        &self,
        r: usize,
        drawn: &[DrawnConv],
        cache: &DecoderCache,
        features: &[Tensor],
        d_prob: &[f32],
        grads: &mut [ConvGrad],
        d_features: &mut [Tensor],
    ) {
        let dec = &self.decoders[r];
        let depth = self.config.depth;
        let mut dlogit = cache.prob.zeros_like();
        for ((d, &p), &g) in dlogit.data.iter_mut().zip(&cache.prob.data).zip(d_prob) {
            *d = g * p * (1.0 - p);
        }
        let mut dx = dec.convs[dec.head]
            .backward(&cache.head_input, &drawn[dec.head], &dlogit, &mut grads[dec.head], true)
            .expect("input grad requested");
        for (i, lv) in dec.levels.iter().enumerate().rev() {
            let k = depth - 2 - i;
            let lc = &cache.levels[i];
            tensor::relu_backward(&lc.h2, &mut dx);
            let mut dh1 = dec.convs[lv.conv2]
                .backward(&lc.h1, &drawn[lv.conv2], &dx, &mut grads[lv.conv2], true)
                .expect("input grad requested");
            tensor::relu_backward(&lc.h1, &mut dh1);
            let dcat = dec.convs[lv.conv1]
                .backward(&lc.cat, &drawn[lv.conv1], &dh1, &mut grads[lv.conv1], true)
                .expect("input grad requested");
            let (mut d_up, d_gated) = tensor::split_channels(&dcat, lc.up.channels);
            let d_skip = match (lv.gate, &lc.gate) {
                (Some((gx, gf)), Some(gc)) => {
                    let (fx, ff) = grads_pair(grads, gx, gf);
                    let (d_skip, d_gating) = gate_backward(
                        &features[k],
                        &lc.up,
                        gc,
                        &d_gated,
                        (&dec.convs[gx], &drawn[gx], fx),
                        (&dec.convs[gf], &drawn[gf], ff),
                    );
                    d_up.add_assign(&d_gating);
                    d_skip
                }
                _ => d_gated,
            };
            d_features[k].add_assign(&d_skip);
            dx = tensor::upsample2_backward(&d_up);
        }
        d_features[depth - 1].add_assign(&dx);
    }

    pub(crate) fn zero_encoder_grads(&self, e: usize) -> Vec<ConvGrad> {
        self.encoders[e].convs.iter().map(Conv::zero_grad).collect()
    }

    pub(crate) fn zero_decoder_grads(&self, r: usize) -> Vec<ConvGrad> {
        self.decoders[r].convs.iter().map(Conv::zero_grad).collect()
    }

    pub(crate) fn scatter_encoder(&self, e: usize, drawn: &[DrawnConv], grads: &[ConvGrad], out: &mut [f32]) {
        for ((c, d), g) in self.encoders[e].convs.iter().zip(drawn).zip(grads) {
            c.scatter(&self.params, d, g, out);
        }
    }

    pub(crate) fn scatter_decoder(&self, r: usize, drawn: &[DrawnConv], grads: &[ConvGrad], out: &mut [f32]) {
        for ((c, d), g) in self.decoders[r].convs.iter().zip(drawn).zip(grads) {
            c.scatter(&self.params, d, g, out);
        }
    }

    /// Extracts ensemble member `r` as a standalone single-decoder network.
    pub fn ensemble_member(&self, r: usize) -> Result<Model> {
        if self.variant != Variant::Ensemble {
            return Err(Error::Config(format!("{} model has no ensemble members", self.variant)));
        }
        let mut member = Model::build(Variant::Vanilla, &self.config, member_seed(self.seed, r))?;
        let span = self.encoder_span(r)?.start..self.decoder_span(r)?.end;
        member.set_params(self.params[span].to_vec())?;
        Ok(member)
    }

    /// Writes a standalone member network back into slot `r`.
    pub fn set_ensemble_member(&mut self, r: usize, member: &Model) -> Result<()> {
        let span = self.encoder_span(r)?.start..self.decoder_span(r)?.end;
        if member.param_count() != span.len() {
            return Err(Error::Shape(format!(
                "member has {} parameters, slot {r} holds {}",
                member.param_count(),
                span.len()
            )));
        }
        self.params[span].copy_from_slice(member.params());
        Ok(())
    }
}

fn grads_pair(grads: &mut [ConvGrad], a: usize, b: usize) -> (&mut ConvGrad, &mut ConvGrad) {
    assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Pixelwise mean of the branch maps, summed in sorted order so the result
/// does not depend on branch order.
fn fuse(branch_probs: &[Grid<f32>]) -> Result<Grid<f32>> {
    let first = branch_probs.first().ok_or(Error::EmptySet("branch outputs"))?;
    let m = branch_probs.len();
    let mut vals = vec![0.0f32; m];
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        for (v, g) in vals.iter_mut().zip(branch_probs) {
            *v = g.data[i];
        }
        vals.sort_by(f32::total_cmp);
        let s: f64 = vals.iter().map(|&v| v as f64).sum();
        out.push((s / m as f64) as f32);
    }
    Grid::from_vec(first.height, first.width, out)
}

pub(crate) struct EncoderCache {
    inputs: Vec<Tensor>,
    hidden: Vec<Tensor>,
    pub(crate) features: Vec<Tensor>,
    pool_args: Vec<Vec<u32>>,
}

struct GateCache {
    /// ReLU(F_x(f_s) + F_f(f_e)).
    pre: Tensor,
    coeff: Tensor,
}

struct LevelCache {
    up: Tensor,
    gate: Option<GateCache>,
    cat: Tensor,
    h1: Tensor,
    h2: Tensor,
}

pub(crate) struct DecoderCache {
    levels: Vec<LevelCache>,
    head_input: Tensor,
    pub(crate) prob: Tensor,
}

impl DecoderCache {
    pub(crate) fn prob_grid(&self) -> Grid<f32> {
        Grid {
            height: self.prob.height,
            width: self.prob.width,
            data: self.prob.data.clone(),
        }
    }
}

fn gate_forward(
    f_e: &Tensor,
    f_s: &Tensor,
    (fx, dx): (&Conv, &DrawnConv),
    (ff, df): (&Conv, &DrawnConv),
) -> Result<(Tensor, GateCache)> {
    if (f_e.height, f_e.width) != (f_s.height, f_s.width) {
        return Err(Error::Shape(format!(
            "attention gate inputs {}x{} and {}x{}",
            f_e.height, f_e.width, f_s.height, f_s.width
        )));
    }
    let mut pre = fx.forward(f_s, dx)?;
    pre.add_assign(&ff.forward(f_e, df)?);
    tensor::relu_inplace(&mut pre);
    let mut coeff = pre.clone();
    coeff.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut out = f_e.clone();
    out.data.iter_mut().zip(&coeff.data).for_each(|(o, a)| *o *= a);
    Ok((out, GateCache { pre, coeff }))
}

/// Returns gradients w.r.t. the skip feature f_e and the gating feature f_s.
fn gate_backward(
    f_e: &Tensor,
    f_s: &Tensor,
    cache: &GateCache,
    d_out: &Tensor,
    (fx, dx, gx): (&Conv, &DrawnConv, &mut ConvGrad),
    (ff, df, gf): (&Conv, &DrawnConv, &mut ConvGrad),
) -> (Tensor, Tensor) {
    let mut d_fe = d_out.clone();
    let mut d_pre = d_out.clone();
    for i in 0..d_out.data.len() {
        let a = cache.coeff.data[i];
        d_fe.data[i] = d_out.data[i] * a;
        d_pre.data[i] = if cache.pre.data[i] > 0.0 {
            d_out.data[i] * f_e.data[i] * a * (1.0 - a)
        } else {
            0.0
        };
    }
    let d_fs = fx.backward(f_s, dx, &d_pre, gx, true).expect("input grad requested");
    let d_fe_gate = ff.backward(f_e, df, &d_pre, gf, true).expect("input grad requested");
    d_fe.add_assign(&d_fe_gate);
    (d_fe, d_fs)
}

/// Weights of the two 1x1 convolutions of an attention gate. `gating_*` maps
/// the decoder feature f_s, `skip_*` the encoder skip feature f_e; both map to
/// f_e's channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGateParams {
    pub skip_channels: usize,
    pub gating_channels: usize,
    /// `[skip_channels][gating_channels]`
    pub gating_weight: Vec<f32>,
    pub gating_bias: Vec<f32>,
    /// `[skip_channels][skip_channels]`
    pub skip_weight: Vec<f32>,
    pub skip_bias: Vec<f32>,
}

impl AttentionGateParams {
    pub fn zeros(skip_channels: usize, gating_channels: usize) -> Self {
        Self {
            skip_channels,
            gating_channels,
            gating_weight: vec![0.0; skip_channels * gating_channels],
            gating_bias: vec![0.0; skip_channels],
            skip_weight: vec![0.0; skip_channels * skip_channels],
            skip_bias: vec![0.0; skip_channels],
        }
    }

    fn layers(&self) -> ((Conv, DrawnConv), (Conv, DrawnConv)) {
        let conv = |cin, cout| Conv {
            shape: ConvShape { cin, cout, kernel: 1 },
            weight: Slot::Fixed(0..0),
            bias: Slot::Fixed(0..0),
        };
        let drawn = |w: &[f32], b: &[f32]| DrawnConv {
            w: w.to_vec(),
            b: b.to_vec(),
            w_eps: None,
            b_eps: None,
        };
        (
            (conv(self.gating_channels, self.skip_channels), drawn(&self.gating_weight, &self.gating_bias)),
            (conv(self.skip_channels, self.skip_channels), drawn(&self.skip_weight, &self.skip_bias)),
        )
    }
}

/// Gated skip feature `f_e * sigmoid(ReLU(F_x(f_s) + F_f(f_e)))` and the
/// gating coefficients.
pub fn attention_gate(f_e: &Tensor, f_s: &Tensor, params: &AttentionGateParams) -> Result<(Tensor, Tensor)> {
    let ((cx, dx), (cf, df)) = params.layers();
    let (out, cache) = gate_forward(f_e, f_s, (&cx, &dx), (&cf, &df))?;
    Ok((out, cache.coeff))
}

impl Tensor {
    pub fn from_grid(grid: &Grid<f32>) -> Self {
        Tensor {
            channels: 1,
            height: grid.height,
            width: grid.width,
            data: grid.data.clone(),
        }
    }
}
