//! The attacking agent: a small CNN policy, action sampling and the one-step
//! REINFORCE update.
//!
//! Architecture: two 3×3 stride-2 convolutions (padding 1) with 8 and 16
//! filters and ReLU, global average pooling, then one linear head per action
//! slot producing `(μ_row, log σ_row, μ_col, log σ_col, logit_1..logit_C)`.
//! Means are squashed with a sigmoid into normalized `[0, 1]` coordinates.
//!
//! Sampling draws `row, col ~ N(μ, σ)` and one brightness draw per channel
//! `b ~ N(sigmoid(logit), 0.1)`; coordinates are clamped to `[0, 1)` and
//! floored onto the pixel grid, brightness is `Write` when `b ≥ 0.5`.
//! The log-probability is taken on the raw continuous draws so the whole
//! estimator stays differentiable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::nn::{self, KERNEL};
use crate::image::{ActionSet, Dims, Image, PixelAction, ERASE, WRITE};
use crate::weights::{Tensor, WeightFile, WeightsError};

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
/// Standard deviation of the brightness draw.
pub const BRIGHTNESS_SIGMA: f64 = 0.1;
/// σ of the coordinate distributions at initialization, in normalized units.
pub const INITIAL_SIGMA: f64 = 0.3;
/// Global gradient-norm clip for one update.
pub const GRAD_CLIP: f64 = 5.0;
/// `log σ` is clamped to this range in the forward pass.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-7.0, 1.0);

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("policy expects {expected:?}, observed {got:?}")]
    DimMismatch { expected: Dims, got: Dims },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad policy weights: {0}")]
    Weights(#[from] WeightsError),
}

fn conv_out(n: usize) -> usize {
    nn::conv_out(n, 2)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Normal log-density.
pub fn normal_log_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let t = (x - mean) / sigma;
    -0.5 * t * t - sigma.ln() - HALF_LN_2PI
}

/// Observation size and slot count; fixes the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    pub dims: Dims,
    pub slots: usize,
}

impl PolicyShape {
    pub fn new(dims: Dims, slots: usize) -> Self {
        Self { dims, slots }
    }

    /// Outputs per slot: 4 coordinate parameters and one logit per channel.
    pub fn head_width(&self) -> usize {
        4 + self.dims.channels
    }

    fn sizes(&self) -> [usize; 6] {
        let c = self.dims.channels;
        [
            CONV1_FILTERS * c * KERNEL * KERNEL,
            CONV1_FILTERS,
            CONV2_FILTERS * CONV1_FILTERS * KERNEL * KERNEL,
            CONV2_FILTERS,
            self.slots * self.head_width() * CONV2_FILTERS,
            self.slots * self.head_width(),
        ]
    }

    fn offsets(&self) -> Layout {
        let s = self.sizes();
        let mut o = [0usize; 7];
        for i in 0..6 {
            o[i + 1] = o[i] + s[i];
        }
        Layout { o }
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().sum()
    }
}

struct Layout {
    o: [usize; 7],
}

impl Layout {
    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.o[i]..self.o[i + 1]
    }
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;
const TENSOR_NAMES: [&str; 6] = [
    "policy.conv1.weight",
    "policy.conv1.bias",
    "policy.conv2.weight",
    "policy.conv2.bias",
    "policy.head.weight",
    "policy.head.bias",
];

/// All policy parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn from_values(shape: PolicyShape, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), shape.num_params());
        Self { shape, values }
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn part(&self, i: usize) -> &[f64] {
        &self.values[self.shape.offsets().range(i)]
    }

    fn tensor_shapes(&self) -> [Vec<usize>; 6] {
        let c = self.shape.dims.channels;
        let hw = self.shape.head_width();
        let n = self.shape.slots;
        [
            vec![CONV1_FILTERS, c, KERNEL, KERNEL],
            vec![CONV1_FILTERS],
            vec![CONV2_FILTERS, CONV1_FILTERS, KERNEL, KERNEL],
            vec![CONV2_FILTERS],
            vec![n, hw, CONV2_FILTERS],
            vec![n, hw],
        ]
    }

    /// Dump in the flat-float weights format (values rounded to f32).
    pub fn to_weights(&self) -> WeightFile {
        let d = self.shape.dims;
        let mut tensors = vec![Tensor::new(
            "policy.shape",
            vec![4],
            vec![d.channels as f32, d.height as f32, d.width as f32, self.shape.slots as f32],
        )];
        for (i, shape) in self.tensor_shapes().into_iter().enumerate() {
            tensors.push(Tensor::from_f64(TENSOR_NAMES[i], shape, self.part(i)));
        }
        WeightFile { tensors }
    }

    pub fn from_weights(file: &WeightFile) -> Result<Self, AgentError> {
        let s = file.expect("policy.shape", &[4])?;
        let v: Vec<usize> = s.data.iter().map(|&f| f as usize).collect();
        if v.iter().any(|&x| x == 0) {
            return Err(WeightsError::Malformed(format!("bad policy.shape {:?}", s.data)).into());
        }
        let shape = PolicyShape::new(Dims::new(v[0], v[1], v[2]), v[3]);
        let mut params = Self::zeros(shape);
        let layout = shape.offsets();
        for (i, tshape) in params.tensor_shapes().into_iter().enumerate() {
            let t = file.expect(TENSOR_NAMES[i], &tshape)?;
            params.values[layout.range(i)].copy_from_slice(&t.to_f64());
        }
        Ok(params)
    }
}

/// Fresh parameters: conv weights `N(0, 1/fan_in)`, zero biases, zero head
/// weights and head biases giving `μ = 0.5` and `σ = 0.3`.
pub fn init_policy(rng: &mut ChaCha8Rng, shape: PolicyShape) -> PolicyParams {
    let mut p = PolicyParams::zeros(shape);
    let layout = shape.offsets();
    let c = shape.dims.channels;
    for (part, fan_in) in [
        (CONV1_W, c * KERNEL * KERNEL),
        (CONV2_W, CONV1_FILTERS * KERNEL * KERNEL),
    ] {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.values[layout.range(part)] {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * scale;
        }
    }
    let hw = shape.head_width();
    let head_b = layout.range(HEAD_B);
    for s in 0..shape.slots {
        p.values[head_b.start + s * hw + 1] = INITIAL_SIGMA.ln();
        p.values[head_b.start + s * hw + 3] = INITIAL_SIGMA.ln();
    }
    p
}

/// Distribution parameters for one action slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDistribution {
    pub mu_row: f64,
    pub sigma_row: f64,
    pub mu_col: f64,
    pub sigma_col: f64,
    pub brightness_logits: Vec<f64>,
}

impl SlotDistribution {
    pub fn brightness_means(&self) -> Vec<f64> {
        self.brightness_logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub slots: Vec<SlotDistribution>,
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    cols1: Vec<f64>,
    cols2: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    heads: Vec<f64>,
    out: PolicyOutput,
}

fn forward(params: &PolicyParams, x: &Image) -> Result<Forward, AgentError> {
    let shape = params.shape;
    let d = shape.dims;
    if x.dims() != d {
        return Err(AgentError::DimMismatch {
            expected: d,
            got: x.dims(),
        });
    }
    let (cols1, h1h, h1w) = nn::im2col(x.data(), d.channels, d.height, d.width, 2);
    let a1 = nn::conv_cols(&cols1, h1h * h1w, params.part(CONV1_W), params.part(CONV1_B));
    let h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let (cols2, h2h, h2w) = nn::im2col(&h1, CONV1_FILTERS, h1h, h1w, 2);
    let a2 = nn::conv_cols(&cols2, h2h * h2w, params.part(CONV2_W), params.part(CONV2_B));
    let area = (h2h * h2w) as f64;
    let pooled: Vec<f64> = a2
        .chunks(h2h * h2w)
        .map(|ch| ch.iter().map(|v| v.max(0.0)).sum::<f64>() / area)
        .collect();

    let hw = shape.head_width();
    let hwt = params.part(HEAD_W);
    let hb = params.part(HEAD_B);
    let mut heads = vec![0.0; shape.slots * hw];
    for (j, z) in heads.iter_mut().enumerate() {
        let row = &hwt[j * CONV2_FILTERS..(j + 1) * CONV2_FILTERS];
        *z = hb[j] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
    }
    if heads.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite("policy forward"));
    }
    let (lo, hi) = LOG_SIGMA_RANGE;
    let slots = heads
        .chunks(hw)
        .map(|z| SlotDistribution {
            mu_row: sigmoid(z[0]),
            sigma_row: z[1].clamp(lo, hi).exp(),
            mu_col: sigmoid(z[2]),
            sigma_col: z[3].clamp(lo, hi).exp(),
            brightness_logits: z[4..].to_vec(),
        })
        .collect();
    Ok(Forward {
        cols1,
        cols2,
        a1,
        a2,
        pooled,
        heads,
        out: PolicyOutput { slots },
    })
}

/// Per-slot distribution parameters for observation `x`.
pub fn policy_forward(params: &PolicyParams, x: &Image) -> Result<PolicyOutput, AgentError> {
    forward(params, x).map(|f| f.out)
}

/// Continuous draws for one slot, before clamping and quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSample {
    pub row: f64,
    pub col: f64,
    pub brightness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub action_set: ActionSet,
    pub raw: Vec<SlotSample>,
    pub log_prob: f64,
}

/// Maps a normalized coordinate draw onto `[0, n)`.
pub fn to_index(u: f64, n: usize) -> usize {
    let u = u.clamp(0.0, 1.0);
    ((u * n as f64).floor() as usize).min(n - 1)
}

fn quantize(b: f64) -> f64 {
    if b >= 0.5 {
        WRITE
    } else {
        ERASE
    }
}

/// Log-density of `raw` under `dist`, summed over every slot and component.
pub fn log_prob(dist: &PolicyOutput, raw: &[SlotSample]) -> f64 {
    dist.slots
        .iter()
        .zip(raw)
        .map(|(s, r)| {
            normal_log_pdf(r.row, s.mu_row, s.sigma_row)
                + normal_log_pdf(r.col, s.mu_col, s.sigma_col)
                + s.brightness_means()
                    .iter()
                    .zip(&r.brightness)
                    .map(|(&m, &b)| normal_log_pdf(b, m, BRIGHTNESS_SIGMA))
                    .sum::<f64>()
        })
        .sum()
}

/// Turns raw draws into pixel actions on a `height × width` grid.
pub fn quantize_actions(raw: &[SlotSample], height: usize, width: usize) -> ActionSet {
    ActionSet::new(
        raw.iter()
            .map(|r| PixelAction {
                row: to_index(r.row, height),
                col: to_index(r.col, width),
                values: r.brightness.iter().map(|&b| quantize(b)).collect(),
            })
            .collect(),
    )
}

pub fn sample_actions(
    dist: &PolicyOutput,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> SampledBatch {
    let draw = |rng: &mut ChaCha8Rng, mean: f64, sigma: f64| -> f64 {
        Normal::new(mean, sigma)
            .expect("sigma is positive and finite")
            .sample(rng)
    };
    let raw: Vec<SlotSample> = dist
        .slots
        .iter()
        .map(|s| SlotSample {
            row: draw(rng, s.mu_row, s.sigma_row),
            col: draw(rng, s.mu_col, s.sigma_col),
            brightness: s
                .brightness_means()
                .into_iter()
                .map(|m| draw(rng, m, BRIGHTNESS_SIGMA))
                .collect(),
        })
        .collect();
    SampledBatch {
        action_set: quantize_actions(&raw, height, width),
        log_prob: log_prob(dist, &raw),
        raw,
    }
}

/// `∇_θ log π(raw | θ, x)` by backpropagation through the forward pass.
pub fn log_prob_gradient(
    params: &PolicyParams,
    x: &Image,
    raw: &[SlotSample],
) -> Result<Vec<f64>, AgentError> {
    let shape = params.shape;
    let d = shape.dims;
    let fw = forward(params, x)?;
    let layout = shape.offsets();
    let mut grad = vec![0.0; shape.num_params()];
    let hw = shape.head_width();
    let (lo, hi) = LOG_SIGMA_RANGE;

    // d log π / d head outputs
    let mut dz = vec![0.0; fw.heads.len()];
    for (s, (dist, r)) in fw.out.slots.iter().zip(raw).enumerate() {
        let z = &fw.heads[s * hw..(s + 1) * hw];
        let g = &mut dz[s * hw..(s + 1) * hw];
        let coord = |u: f64, mu: f64, sigma: f64, z_log_sigma: f64| {
            let t = (u - mu) / sigma;
            let d_mu = t / sigma * mu * (1.0 - mu);
            let d_log_sigma = if (lo..=hi).contains(&z_log_sigma) {
                t * t - 1.0
            } else {
                0.0
            };
            (d_mu, d_log_sigma)
        };
        (g[0], g[1]) = coord(r.row, dist.mu_row, dist.sigma_row, z[1]);
        (g[2], g[3]) = coord(r.col, dist.mu_col, dist.sigma_col, z[3]);
        for (c, &b) in r.brightness.iter().enumerate() {
            let m = sigmoid(z[4 + c]);
            g[4 + c] = (b - m) / (BRIGHTNESS_SIGMA * BRIGHTNESS_SIGMA) * m * (1.0 - m);
        }
    }

    // heads
    let head_w = params.part(HEAD_W);
    let mut d_pooled = vec![0.0; CONV2_FILTERS];
    {
        let gw = &mut grad[layout.range(HEAD_W)];
        for (j, &g) in dz.iter().enumerate() {
            for f in 0..CONV2_FILTERS {
                gw[j * CONV2_FILTERS + f] = g * fw.pooled[f];
                d_pooled[f] += g * head_w[j * CONV2_FILTERS + f];
            }
        }
    }
    grad[layout.range(HEAD_B)].copy_from_slice(&dz);

    // global average pool + relu
    let (h1h, h1w) = (conv_out(d.height), conv_out(d.width));
    let (h2h, h2w) = (conv_out(h1h), conv_out(h1w));
    let area = h2h * h2w;
    let da2: Vec<f64> = fw
        .a2
        .iter()
        .enumerate()
        .map(|(i, &a)| if a > 0.0 { d_pooled[i / area] / area as f64 } else { 0.0 })
        .collect();

    // conv2
    let mut dcols2 = vec![0.0; fw.cols2.len()];
    {
        let (gw2, gb2) = split_pair(&mut grad, &layout, CONV2_W, CONV2_B);
        nn::conv_cols_backward(&fw.cols2, area, params.part(CONV2_W), &da2, gw2, gb2, Some(&mut dcols2));
    }
    let dh1 = nn::col2im(&dcols2, CONV1_FILTERS, h1h, h1w, 2);
    let da1: Vec<f64> = dh1
        .iter()
        .zip(&fw.a1)
        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
        .collect();

    // conv1
    {
        let (gw1, gb1) = split_pair(&mut grad, &layout, CONV1_W, CONV1_B);
        nn::conv_cols_backward(&fw.cols1, h1h * h1w, params.part(CONV1_W), &da1, gw1, gb1, None);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite("log-prob gradient"));
    }
    Ok(grad)
}

fn split_pair<'a>(
    grad: &'a mut [f64],
    layout: &Layout,
    w: usize,
    b: usize,
) -> (&'a mut [f64], &'a mut [f64]) {
    let (wr, br) = (layout.range(w), layout.range(b));
    debug_assert_eq!(wr.end, br.start);
    let (left, right) = grad[wr.start..br.end].split_at_mut(wr.len());
    (left, right)
}

/// Parameters, RNG and epoch counter owned by one attack worker.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub rng: ChaCha8Rng,
    /// Epoch within the current Remember process.
    pub epoch: usize,
    /// Total parameter updates applied.
    pub steps: u64,
}

impl TrainState {
    pub fn new(seed: u64, shape: PolicyShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_policy(&mut rng, shape);
        Self {
            params,
            rng,
            epoch: 0,
            steps: 0,
        }
    }

    /// Re-draws parameters from the state's own RNG stream.
    pub fn reinitialize(&mut self) {
        self.params = init_policy(&mut self.rng, self.params.shape);
        self.epoch = 0;
    }

    pub fn sample(&mut self, x: &Image) -> Result<SampledBatch, AgentError> {
        let out = policy_forward(&self.params, x)?;
        let d = self.params.shape.dims;
        Ok(sample_actions(&out, d.height, d.width, &mut self.rng))
    }
}

/// One SGD ascent step on `r · ∇ log π`, gradient-norm clipped at 5.
pub fn reinforce_update(
    state: &mut TrainState,
    x: &Image,
    batch: &SampledBatch,
    reward: f64,
    learning_rate: f64,
) -> Result<(), AgentError> {
    reinforce_update_many(state, x, &[(batch, reward)], learning_rate)
}

/// Averages `r_i · ∇ log π_i` over several samples of the same observation.
pub fn reinforce_update_many(
    state: &mut TrainState,
    x: &Image,
    samples: &[(&SampledBatch, f64)],
    learning_rate: f64,
) -> Result<(), AgentError> {
    if samples.iter().any(|(_, r)| !r.is_finite()) {
        return Err(AgentError::NonFinite("reward"));
    }
    let n = state.params.shape.num_params();
    let mut total = vec![0.0; n];
    for (batch, reward) in samples {
        if *reward == 0.0 {
            continue;
        }
        let g = log_prob_gradient(&state.params, x, &batch.raw)?;
        for (t, gi) in total.iter_mut().zip(g) {
            *t += reward * gi / samples.len() as f64;
        }
    }
    let norm = total.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(AgentError::NonFinite("policy gradient"));
    }
    let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
    for (p, g) in state.params.values.iter_mut().zip(&total) {
        *p += learning_rate * scale * g;
    }
    state.steps += 1;
    Ok(())
}
