//! Generator, critic and regression-baseline networks, plus checkpoints.
//!
//! Networks are plain [`ParameterSet`]s with a forward function over a
//! [`Graph`]; parameter names are stable and double as checkpoint keys.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use textpose_tensor::{concat, BoundParams, Element, Graph, Parameter, ParameterSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::posecodec::{HeatmapStack, Keypoint, KeypointPose, MAP_SIZE, NUM_JOINTS};
use crate::textenc::{SentenceEmbedding, EMBED_DIM};

pub const NOISE_DIM: usize = 128;
pub const TEXT_PROJ_DIM: usize = 128;
const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LEAK: f64 = 0.2;
/// Initial bias of the generator's sigmoid head: sigmoid(-4) ~ 0.018, close
/// to the mostly-empty heatmap background.
const HEAD_BIAS: f32 = -4.0;
/// The regression net predicts offsets from the frame center.
const FRAME_CENTER: f64 = (MAP_SIZE as f64 - 1.0) / 2.0;

/// Layer widths. The four transposed-conv stages double 4 -> 64; the critic
/// mirrors them with strided convs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels at 4x4, 8x8, 16x16, 32x32 in the generator; the 64x64 output
    /// always has one channel per joint.
    pub gen_channels: [usize; 4],
    /// Channels at 32x32, 16x16, 8x8, 4x4 in the critic.
    pub critic_channels: [usize; 4],
    /// Hidden width of the regression baseline and its critic.
    pub regression_hidden: usize,
}

impl ModelConfig {
    /// The widths of the reference architecture.
    pub fn full() -> Self {
        Self { gen_channels: [512, 256, 128, 64], critic_channels: [64, 128, 256, 512], regression_hidden: 512 }
    }

    /// Narrow layers for single-core desk-scale runs.
    pub fn desk() -> Self {
        Self { gen_channels: [64, 32, 16, 8], critic_channels: [8, 16, 32, 64], regression_hidden: 128 }
    }

    /// Narrow generator and a very narrow critic for the synthetic
    /// three-class experiment.
    pub fn toy() -> Self {
        Self { gen_channels: [64, 32, 16, 16], critic_channels: [4, 8, 16, 32], regression_hidden: 128 }
    }

    /// Tiny widths for unit tests.
    pub fn tiny() -> Self {
        Self { gen_channels: [8, 4, 4, 4], critic_channels: [4, 4, 4, 8], regression_hidden: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_channels.iter().chain(&self.critic_channels).any(|&c| c == 0) || self.regression_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

struct Init<'a> {
    set: ParameterSet,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Weight and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn layer(&mut self, name: &str, wshape: &[usize], bias: usize, fan_in: usize) {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("sized")
        };
        let w = draw(wshape);
        let b = draw(&[bias]);
        self.set.insert(format!("{name}.weight"), w).expect("unique names");
        self.set.insert(format!("{name}.bias"), b).expect("unique names");
    }
}

fn init_set(seed: u64, f: impl FnOnce(&mut Init)) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { set: ParameterSet::new(), rng: &mut rng };
    f(&mut init);
    init.set
}

fn linear<'g, T: Element>(p: &BoundParams<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = x.matmul(w)?;
    let shape = y.shape();
    Ok(y.add(b.reshape([1, shape[1]])?.expand(&shape)?)?)
}

fn add_channel_bias<'g, T: Element>(p: &BoundParams<'g, T>, name: &str, y: Var<'g, T>) -> Result<Var<'g, T>> {
    let b = p.get(&format!("{name}.bias"))?;
    let shape = y.shape();
    Ok(y.add(b.reshape([1, shape[1], 1, 1])?.expand(&shape)?)?)
}

fn conv<'g, T: Element>(p: &BoundParams<'g, T>, name: &str, x: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
    let y = x.conv2d(p.get(&format!("{name}.weight"))?, stride, pad)?;
    add_channel_bias(p, name, y)
}

fn conv_t<'g, T: Element>(p: &BoundParams<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let y = x.conv_transpose2d(p.get(&format!("{name}.weight"))?, STRIDE, PAD)?;
    add_channel_bias(p, name, y)
}

fn check_finite(t: &Tensor<f32>, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_batch<T: Element>(a: Var<'_, T>, b: Var<'_, T>, dims: (usize, usize)) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa[1] != dims.0 {
        return Err(Error::Dimension { expected: dims.0, found: *sa.last().unwrap_or(&0) });
    }
    if sb.len() != 2 || sb[1] != dims.1 {
        return Err(Error::Dimension { expected: dims.1, found: *sb.last().unwrap_or(&0) });
    }
    if sa[0] != sb[0] {
        return Err(Error::Dimension { expected: sa[0], found: sb[0] });
    }
    Ok(sa[0])
}

/// Parameter names of the text projections, the unit zeroed and frozen
/// during unconditional pre-training.
pub fn text_projection_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.text_proj.weight"), format!("{prefix}.text_proj.bias")]
}

/// A 64-bit copy of a parameter set (values only), for reference checks.
pub fn widen(params: &ParameterSet) -> ParameterSet<f64> {
    let mut out = ParameterSet::new();
    for p in params.iter() {
        out.insert(p.name.clone(), p.value.cast()).expect("names are unique");
    }
    out
}

/// Zero and freeze (or unfreeze) the text projection of a network.
pub fn set_text_frozen(params: &mut ParameterSet, prefix: &str, frozen: bool) -> Result<()> {
    for name in text_projection_names(prefix) {
        if frozen {
            params.zero(&name)?;
        }
        params.set_frozen(&name, frozen)?;
    }
    Ok(())
}

/// Noise and text to a `17 x 64 x 64` heatmap stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Generator {
    pub const PREFIX: &'static str = "gen";

    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.gen_channels;
        let params = init_set(seed, |i| {
            i.layer("gen.text_proj", &[EMBED_DIM, TEXT_PROJ_DIM], TEXT_PROJ_DIM, EMBED_DIM);
            let joint = NOISE_DIM + TEXT_PROJ_DIM;
            i.layer("gen.dense", &[joint, c[0] * 16], c[0] * 16, joint);
            let chans = [c[0], c[1], c[2], c[3], NUM_JOINTS];
            for s in 0..4 {
                let (ci, co) = (chans[s], chans[s + 1]);
                i.layer(&format!("gen.up{}", s + 1), &[ci, co, KERNEL, KERNEL], co, co * KERNEL * KERNEL);
            }
        });
        let mut g = Self { config: config.clone(), params };
        g.params.get_mut("gen.up4.bias")?.value = Tensor::full([NUM_JOINTS], HEAD_BIAS);
        Ok(g)
    }

    /// `z: [N, 128]`, `h: [N, 300]` to `[N, 17, 64, 64]` in (0, 1).
    pub fn forward<'g, T: Element>(&self, p: &BoundParams<'g, T>, z: Var<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let n = check_batch(z, h, (NOISE_DIM, EMBED_DIM))?;
        let th = linear(p, "gen.text_proj", h)?;
        let joint = concat(&[z, th], 1)?;
        let c0 = self.config.gen_channels[0];
        let mut x = linear(p, "gen.dense", joint)?.relu().reshape([n, c0, 4, 4])?;
        for s in 1..=4 {
            x = conv_t(p, &format!("gen.up{s}"), x)?;
            x = if s < 4 { x.relu() } else { x.sigmoid() };
        }
        Ok(x)
    }

    /// One stack per row of `z` / `h`, without recording gradients.
    pub fn generate_batch(&self, z: &Tensor<f32>, h: &Tensor<f32>) -> Result<Vec<HeatmapStack>> {
        check_finite(z, "generate")?;
        check_finite(h, "generate")?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.forward(&p, g.constant(z), g.constant(h))?.value();
        let n = out.shape()[0];
        (0..n).map(|i| HeatmapStack::from_vec(out.index_first(i).into_vec())).collect()
    }

    pub fn generate(&self, z: &[f32], h: &SentenceEmbedding) -> Result<HeatmapStack> {
        let z = Tensor::new([1, z.len()], z.to_vec())?;
        let h = Tensor::new([1, EMBED_DIM], h.as_slice().to_vec())?;
        Ok(self.generate_batch(&z, &h)?.remove(0))
    }
}

/// Scores a (heatmap stack, text) pair with one unbounded real.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Critic {
    pub const PREFIX: &'static str = "critic";

    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.critic_channels;
        let params = init_set(seed, |i| {
            let chans = [NUM_JOINTS, c[0], c[1], c[2], c[3]];
            for s in 0..4 {
                let (ci, co) = (chans[s], chans[s + 1]);
                i.layer(&format!("critic.down{}", s + 1), &[co, ci, KERNEL, KERNEL], co, ci * KERNEL * KERNEL);
            }
            i.layer("critic.text_proj", &[EMBED_DIM, TEXT_PROJ_DIM], TEXT_PROJ_DIM, EMBED_DIM);
            let fused = c[3] + TEXT_PROJ_DIM;
            i.layer("critic.fuse", &[c[3], fused, 1, 1], c[3], fused);
            i.layer("critic.head", &[c[3] * 16, 1], 1, c[3] * 16);
        });
        Ok(Self { config: config.clone(), params })
    }

    /// `x: [N, 17, 64, 64]`, `h: [N, 300]` to `[N, 1]`.
    pub fn forward<'g, T: Element>(&self, p: &BoundParams<'g, T>, x: Var<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != HeatmapStack::SHAPE {
            return Err(Error::Format(format!("critic input must be [N, 17, 64, 64], got {xs:?}")));
        }
        let n = xs[0];
        let hs = h.shape();
        if hs != [n, EMBED_DIM] {
            return Err(Error::Format(format!("critic text must be [{n}, {EMBED_DIM}], got {hs:?}")));
        }
        self.head(p, self.trunk(p, x)?, h)
    }

    /// Image path only: `[N, 17, 64, 64]` to `[N, C, 4, 4]`. Captions enter
    /// after it, so one trunk pass can be scored against several captions.
    pub fn trunk<'g, T: Element>(&self, p: &BoundParams<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut y = x;
        for s in 1..=4 {
            y = conv(p, &format!("critic.down{s}"), y, STRIDE, PAD)?.leaky_relu(T::lit(LEAK));
        }
        Ok(y)
    }

    /// Text fusion and output layer on top of [`Critic::trunk`].
    pub fn head<'g, T: Element>(&self, p: &BoundParams<'g, T>, y: Var<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let n = y.shape()[0];
        let hs = h.shape();
        if hs != [n, EMBED_DIM] {
            return Err(Error::Format(format!("critic text must be [{n}, {EMBED_DIM}], got {hs:?}")));
        }
        // the projected text is tiled over the 4x4 grid
        let th = linear(p, "critic.text_proj", h)?.reshape([n, TEXT_PROJ_DIM, 1, 1])?.expand(&[n, TEXT_PROJ_DIM, 4, 4])?;
        let fused = conv(p, "critic.fuse", concat(&[y, th], 1)?, 1, 0)?.leaky_relu(T::lit(LEAK));
        let flat = fused.reshape([n, self.config.critic_channels[3] * 16])?;
        linear(p, "critic.head", flat)
    }

    pub fn criticize(&self, x: &HeatmapStack, h: &SentenceEmbedding) -> Result<f32> {
        check_finite(&x.to_tensor(), "criticize")?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let xt = x.to_tensor().reshape([1, NUM_JOINTS, MAP_SIZE, MAP_SIZE])?;
        let ht = Tensor::new([1, EMBED_DIM], h.as_slice().to_vec())?;
        Ok(self.forward(&p, g.constant(&xt), g.constant(&ht))?.value().item())
    }
}

/// Per joint: x, y and a visibility probability.
pub const REGRESSION_OUT: usize = NUM_JOINTS * 3;

/// Fully connected baseline that regresses keypoints directly.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionGenerator {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressedJoint {
    pub x: f32,
    pub y: f32,
    pub visibility: f32,
}

impl RegressedJoint {
    /// Coordinates clamped into the frame; visible iff probability > 0.5.
    pub fn to_keypoint(self) -> Keypoint {
        let hi = MAP_SIZE as f32 - 1e-3;
        Keypoint { x: self.x.clamp(0.0, hi), y: self.y.clamp(0.0, hi), visible: self.visibility > 0.5 }
    }
}

pub fn regressed_to_pose(joints: &[RegressedJoint]) -> KeypointPose {
    let mut pose = KeypointPose::empty();
    for (k, j) in pose.joints.iter_mut().zip(joints) {
        *k = j.to_keypoint();
    }
    pose
}

impl RegressionGenerator {
    pub const PREFIX: &'static str = "reg";

    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let hdim = config.regression_hidden;
        let params = init_set(seed, |i| {
            i.layer("reg.text_proj", &[EMBED_DIM, TEXT_PROJ_DIM], TEXT_PROJ_DIM, EMBED_DIM);
            let joint = NOISE_DIM + TEXT_PROJ_DIM;
            i.layer("reg.fc1", &[joint, hdim], hdim, joint);
            i.layer("reg.fc2", &[hdim, hdim], hdim, hdim);
            i.layer("reg.coords", &[hdim, NUM_JOINTS * 2], NUM_JOINTS * 2, hdim);
            i.layer("reg.visibility", &[hdim, NUM_JOINTS], NUM_JOINTS, hdim);
        });
        Ok(Self { config: config.clone(), params })
    }

    /// Returns `(coords [N, 34], visibility [N, 17])`; coordinates are
    /// interleaved `x0, y0, x1, y1, ...` in heatmap pixels and unclamped.
    pub fn forward<'g, T: Element>(&self, p: &BoundParams<'g, T>, z: Var<'g, T>, h: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        check_batch(z, h, (NOISE_DIM, EMBED_DIM))?;
        let th = linear(p, "reg.text_proj", h)?;
        let a = linear(p, "reg.fc1", concat(&[z, th], 1)?)?.relu();
        let b = linear(p, "reg.fc2", a)?.relu();
        let coords = linear(p, "reg.coords", b)?.add_scalar(T::lit(FRAME_CENTER));
        let vis = linear(p, "reg.visibility", b)?.sigmoid();
        Ok((coords, vis))
    }

    pub fn regress(&self, z: &[f32], h: &SentenceEmbedding) -> Result<Vec<RegressedJoint>> {
        let zt = Tensor::new([1, z.len()], z.to_vec())?;
        let ht = Tensor::new([1, EMBED_DIM], h.as_slice().to_vec())?;
        check_finite(&zt, "regress")?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let (c, v) = self.forward(&p, g.constant(&zt), g.constant(&ht))?;
        let (c, v) = (c.value(), v.value());
        Ok((0..NUM_JOINTS)
            .map(|j| RegressedJoint { x: c.data()[2 * j], y: c.data()[2 * j + 1], visibility: v.data()[j] })
            .collect())
    }
}

/// Critic of the regression baseline: scores (keypoint vector, text).
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionCritic {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl RegressionCritic {
    pub const PREFIX: &'static str = "rcritic";

    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let hdim = config.regression_hidden;
        let params = init_set(seed, |i| {
            i.layer("rcritic.text_proj", &[EMBED_DIM, TEXT_PROJ_DIM], TEXT_PROJ_DIM, EMBED_DIM);
            let input = REGRESSION_OUT + TEXT_PROJ_DIM;
            i.layer("rcritic.fc1", &[input, hdim], hdim, input);
            i.layer("rcritic.fc2", &[hdim, hdim], hdim, hdim);
            i.layer("rcritic.head", &[hdim, 1], 1, hdim);
        });
        Ok(Self { config: config.clone(), params })
    }

    /// `pose: [N, 51]` (coordinates scaled to [0, 1) followed by visibility),
    /// `h: [N, 300]` to `[N, 1]`.
    pub fn forward<'g, T: Element>(&self, p: &BoundParams<'g, T>, pose: Var<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        check_batch(pose, h, (REGRESSION_OUT, EMBED_DIM))?;
        let th = linear(p, "rcritic.text_proj", h)?;
        let a = linear(p, "rcritic.fc1", concat(&[pose, th], 1)?)?.leaky_relu(T::lit(LEAK));
        let b = linear(p, "rcritic.fc2", a)?.leaky_relu(T::lit(LEAK));
        linear(p, "rcritic.head", b)
    }
}

/// Scores (sample, text) pairs; implemented by every critic.
pub trait Scorer {
    fn score<'g>(&self, p: &BoundParams<'g, f32>, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>>;

    /// The caption-independent part of `score`; `score(x, h)` equals
    /// `score_features(features(x), h)`.
    fn features<'g>(&self, _p: &BoundParams<'g, f32>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(x)
    }

    fn score_features<'g>(&self, p: &BoundParams<'g, f32>, f: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        self.score(p, f, h)
    }

    fn params(&self) -> &ParameterSet;
}

impl Scorer for Critic {
    fn score<'g>(&self, p: &BoundParams<'g, f32>, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        self.forward(p, x, h)
    }

    fn features<'g>(&self, p: &BoundParams<'g, f32>, x: Var<'g>) -> Result<Var<'g>> {
        self.trunk(p, x)
    }

    fn score_features<'g>(&self, p: &BoundParams<'g, f32>, f: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        self.head(p, f, h)
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }
}

impl Scorer for RegressionCritic {
    fn score<'g>(&self, p: &BoundParams<'g, f32>, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        self.forward(p, x, h)
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }
}

/// `D(x, h) = wx . vec(x) + wh . h`, whose input gradient is `(wx, wh)`
/// everywhere. Useful as a reference critic.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub params: ParameterSet,
}

impl LinearCritic {
    pub fn new(wx: Vec<f32>, wh: Vec<f32>) -> Result<Self> {
        let mut params = ParameterSet::new();
        let (nx, nh) = (wx.len(), wh.len());
        params.insert("linear.wx", Tensor::new([nx, 1], wx)?)?;
        params.insert("linear.wh", Tensor::new([nh, 1], wh)?)?;
        Ok(Self { params })
    }
}

impl Scorer for LinearCritic {
    fn score<'g>(&self, p: &BoundParams<'g, f32>, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        let n = x.shape()[0];
        let flat = x.reshape([n, x.shape()[1..].iter().product::<usize>()])?;
        Ok(flat.matmul(p.get("linear.wx")?)?.add(h.matmul(p.get("linear.wh")?)?)?)
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }
}

/// Width of the keypoint vector scored by the regression critic.
pub const POSE_VECTOR_LEN: usize = REGRESSION_OUT;

/// Keypoint vector seen by the regression critic: coordinates divided by 64
/// and gated by visibility (interleaved `x, y`), then the 17 visibilities.
pub fn pose_vector(pose: &KeypointPose) -> [f32; POSE_VECTOR_LEN] {
    let mut v = [0.0; POSE_VECTOR_LEN];
    for (j, k) in pose.joints.iter().enumerate() {
        if k.visible {
            v[2 * j] = k.x / MAP_SIZE as f32;
            v[2 * j + 1] = k.y / MAP_SIZE as f32;
            v[2 * NUM_JOINTS + j] = 1.0;
        }
    }
    v
}

/// A generator / critic pair of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum Networks {
    Heatmap { generator: Generator, critic: Critic },
    Regression { generator: RegressionGenerator, critic: RegressionCritic },
}

pub const GENERATOR_SET: &str = "generator";
pub const CRITIC_SET: &str = "critic";

impl Networks {
    pub fn heatmap(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::Heatmap { generator: Generator::new(config, seed)?, critic: Critic::new(config, seed.wrapping_add(1))? })
    }

    pub fn regression(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::Regression {
            generator: RegressionGenerator::new(config, seed)?,
            critic: RegressionCritic::new(config, seed.wrapping_add(1))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Heatmap { generator, .. } => &generator.config,
            Self::Regression { generator, .. } => &generator.config,
        }
    }

    pub fn prefixes(&self) -> (&'static str, &'static str) {
        match self {
            Self::Heatmap { .. } => (Generator::PREFIX, Critic::PREFIX),
            Self::Regression { .. } => (RegressionGenerator::PREFIX, RegressionCritic::PREFIX),
        }
    }

    pub fn generator_params(&self) -> &ParameterSet {
        match self {
            Self::Heatmap { generator, .. } => &generator.params,
            Self::Regression { generator, .. } => &generator.params,
        }
    }

    pub fn generator_params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Self::Heatmap { generator, .. } => &mut generator.params,
            Self::Regression { generator, .. } => &mut generator.params,
        }
    }

    pub fn critic_params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Self::Heatmap { critic, .. } => &mut critic.params,
            Self::Regression { critic, .. } => &mut critic.params,
        }
    }

    pub fn critic(&self) -> &dyn Scorer {
        match self {
            Self::Heatmap { critic, .. } => critic,
            Self::Regression { critic, .. } => critic,
        }
    }

    /// Zero and freeze, or unfreeze, the text projections of both nets.
    pub fn set_text_frozen(&mut self, frozen: bool) -> Result<()> {
        let (g, d) = self.prefixes();
        set_text_frozen(self.generator_params_mut(), g, frozen)?;
        set_text_frozen(self.critic_params_mut(), d, frozen)
    }

    /// Generated samples in the critic's input space, plus visibility
    /// probabilities for the regression family.
    pub fn generate<'g>(&self, p: &BoundParams<'g, f32>, z: Var<'g>, h: Var<'g>) -> Result<(Var<'g>, Option<Var<'g>>)> {
        match self {
            Self::Heatmap { generator, .. } => Ok((generator.forward(p, z, h)?, None)),
            Self::Regression { generator, .. } => {
                let (coords, vis) = generator.forward(p, z, h)?;
                let n = z.shape()[0];
                let gate = vis.reshape([n, NUM_JOINTS, 1])?.expand(&[n, NUM_JOINTS, 2])?.reshape([n, 2 * NUM_JOINTS])?;
                let scaled = coords.scale(1.0 / MAP_SIZE as f32).mul(gate)?;
                Ok((concat(&[scaled, vis], 1)?, Some(vis)))
            }
        }
    }

    /// Generated samples without recording gradients.
    pub fn generate_detached(&self, z: &Tensor<f32>, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = self.generator_params().bind_constant(&g);
        Ok(self.generate(&p, g.constant(z), g.constant(h))?.0.value())
    }

    /// Keypoint poses for each row of `z` / `h`.
    pub fn sample_poses(&self, z: &Tensor<f32>, h: &Tensor<f32>, threshold: f32) -> Result<Vec<KeypointPose>> {
        check_finite(z, "generate")?;
        check_finite(h, "generate")?;
        match self {
            Self::Heatmap { generator, .. } => Ok(generator
                .generate_batch(z, h)?
                .iter()
                .map(|s| crate::posecodec::extract_pose(s, threshold))
                .collect()),
            Self::Regression { generator, .. } => {
                let g = Graph::new();
                let p = generator.params.bind_constant(&g);
                let (c, v) = generator.forward(&p, g.constant(z), g.constant(h))?;
                let (c, v) = (c.value(), v.value());
                Ok((0..z.shape()[0])
                    .map(|i| {
                        let joints: Vec<RegressedJoint> = (0..NUM_JOINTS)
                            .map(|j| RegressedJoint {
                                x: c.data()[i * 2 * NUM_JOINTS + 2 * j],
                                y: c.data()[i * 2 * NUM_JOINTS + 2 * j + 1],
                                visibility: v.data()[i * NUM_JOINTS + j],
                            })
                            .collect();
                        regressed_to_pose(&joints)
                    })
                    .collect())
            }
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Heatmap { .. } => "heatmap",
            Self::Regression { .. } => "regression",
        }
    }

    fn sets(&self) -> [(&'static str, &ParameterSet); 2] {
        match self {
            Self::Heatmap { generator, critic } => [(GENERATOR_SET, &generator.params), (CRITIC_SET, &critic.params)],
            Self::Regression { generator, critic } => [(GENERATOR_SET, &generator.params), (CRITIC_SET, &critic.params)],
        }
    }

    pub fn architecture_hash(&self) -> String {
        architecture_hash(self.sets())
    }

    pub fn to_checkpoint(&self, variant: &str, phase: u8, config: serde_json::Value) -> Checkpoint {
        let sets = self.sets().map(|(n, s)| (n.to_string(), s.clone())).to_vec();
        Checkpoint::new(variant, phase, self.generator_params().step(), self.config(), config, sets)
    }

    /// Rebuild networks from a checkpoint; `regression` selects the family.
    pub fn from_checkpoint(ck: &Checkpoint, regression: bool) -> Result<Self> {
        let mut nets = if regression { Self::regression(&ck.meta.model, 0)? } else { Self::heatmap(&ck.meta.model, 0)? };
        let expected = nets.architecture_hash();
        if expected != ck.meta.architecture_hash {
            return Err(Error::ArchitectureMismatch { expected, found: ck.meta.architecture_hash.clone() });
        }
        *nets.generator_params_mut() = ck.set(GENERATOR_SET)?.clone();
        *nets.critic_params_mut() = ck.set(CRITIC_SET)?.clone();
        Ok(nets)
    }
}

/// Hex sha256 over parameter names and shapes, in order.
pub fn architecture_hash<'a>(sets: impl IntoIterator<Item = (&'a str, &'a ParameterSet)>) -> String {
    let mut h = Sha256::new();
    for (name, set) in sets {
        h.update(format!("[{name}]\n"));
        for p in set.iter() {
            h.update(format!("{} {:?}\n", p.name, p.value.shape()));
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PGAN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture_hash: String,
    pub variant: String,
    pub phase: u8,
    pub step: u64,
    pub model: ModelConfig,
    /// Free-form snapshot of the run configuration.
    pub config: serde_json::Value,
}

/// Named parameter sets (with optimizer state) plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sets: Vec<(String, ParameterSet)>,
}

impl Checkpoint {
    /// Builds metadata whose hash covers `sets`.
    pub fn new(variant: &str, phase: u8, step: u64, model: &ModelConfig, config: serde_json::Value, sets: Vec<(String, ParameterSet)>) -> Self {
        let architecture_hash = architecture_hash(sets.iter().map(|(n, s)| (n.as_str(), s)));
        let meta = CheckpointMeta { architecture_hash, variant: variant.into(), phase, step, model: model.clone(), config };
        Self { meta, sets }
    }

    pub fn set(&self, name: &str) -> Result<&ParameterSet> {
        self.sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("checkpoint has no parameter set {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(meta);
        out.extend((self.sets.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        };
        for (name, set) in &self.sets {
            put_str(&mut out, name);
            out.extend(set.step().to_le_bytes());
            out.extend((set.len() as u32).to_le_bytes());
            for p in set.iter() {
                put_str(&mut out, &p.name);
                out.push(p.frozen as u8);
                out.extend((p.value.rank() as u32).to_le_bytes());
                for &d in p.value.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for t in [&p.value, &p.m, &p.v] {
                    for x in t.data() {
                        out.extend(x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { buf: &bytes[CHECKPOINT_MAGIC.len()..] };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let nsets = r.u32()?;
        let mut sets = Vec::new();
        for _ in 0..nsets {
            let name = r.string()?;
            let step = r.u64()?;
            let count = r.u32()?;
            let mut set = ParameterSet::new();
            for _ in 0..count {
                let pname = r.string()?;
                let frozen = r.take(1)?[0] != 0;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let mut tensors = (0..3).map(|_| Tensor::new(shape.clone(), r.f32s(n)?).map_err(Error::from));
                let value = tensors.next().expect("3")?;
                let m = tensors.next().expect("3")?;
                let v = tensors.next().expect("3")?;
                set.insert_parameter(Parameter { name: pname, value, m, v, frozen })?;
            }
            set.set_step(step);
            sets.push((name, set));
        }
        if !r.buf.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.buf.len())));
        }
        let found = architecture_hash(sets.iter().map(|(n, s)| (n.as_str(), s)));
        if found != meta.architecture_hash {
            return Err(Error::Format("checkpoint metadata hash does not match its parameters".into()));
        }
        Ok(Self { meta, sets })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// [`Checkpoint::load`], then require the architecture hash to match.
    pub fn load_expecting(path: impl AsRef<Path>, expected_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.meta.architecture_hash != expected_hash {
            return Err(Error::ArchitectureMismatch {
                expected: expected_hash.to_string(),
                found: ck.meta.architecture_hash,
            });
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated("checkpoint"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated("checkpoint"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
