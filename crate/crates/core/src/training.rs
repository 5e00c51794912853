//! Adversarial objectives, Lipschitz and gradient penalties, the vanilla and
//! regression baselines, and the two-phase training loop.
//!
//! Phase 1 trains an unconditional pose model with the text projections of
//! both networks zeroed and frozen; phase 2 releases them and adds the
//! mismatched-caption critic term and the interpolated-caption generator
//! term.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use textpose_tensor::{backward, concat, AdamConfig, Graph, Tensor, Var};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::model::{pose_vector, Networks, NOISE_DIM};
use crate::posecodec::{self, HeatmapStack, KeypointPose, NUM_JOINTS};
use crate::textenc::{embed_sentence, VocabEmbedding, EMBED_DIM};

/// Probability floor and ceiling applied before every logarithm.
pub const PROB_CLAMP: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    WganLp,
    WganGp,
    Vanilla,
    Regression,
}

impl Variant {
    pub fn penalty(self) -> Option<PenaltyKind> {
        match self {
            Variant::WganLp | Variant::Regression => Some(PenaltyKind::Lp),
            Variant::WganGp => Some(PenaltyKind::Gp),
            Variant::Vanilla => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::WganLp => "wgan-lp",
            Variant::WganGp => "wgan-gp",
            Variant::Vanilla => "vanilla",
            Variant::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wgan-lp" => Ok(Variant::WganLp),
            "wgan-gp" => Ok(Variant::WganGp),
            "vanilla" => Ok(Variant::Vanilla),
            "regression" => Ok(Variant::Regression),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    /// One-sided: `max(0, |grad| - 1)^2`.
    Lp,
    /// Two-sided: `(|grad| - 1)^2`.
    Gp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Unconditional,
    Conditional,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Unconditional => 1,
            Phase::Conditional => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Phase::Unconditional),
            2 => Ok(Phase::Conditional),
            _ => Err(Error::Config(format!("phase must be 1 or 2, got {n}"))),
        }
    }

    /// Penalty weight used when the configuration does not set one.
    pub fn default_lambda(self) -> f64 {
        match self {
            Phase::Unconditional => 10.0,
            Phase::Conditional => 150.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub hflip_prob: f64,
    /// Rotations are drawn uniformly from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { hflip_prob: 0.5, max_rotation: 10.0 }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self { hflip_prob: 0.0, max_rotation: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub phase: Phase,
    /// Penalty weight; `None` picks the phase default (10, then 150).
    pub lambda: Option<f64>,
    pub n_critic: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub sigma: f64,
    pub augmentation: Augmentation,
    /// Generator steps between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::WganLp,
            phase: Phase::Unconditional,
            lambda: None,
            n_critic: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            batch_size: 32,
            steps: 500,
            seed: 0,
            sigma: posecodec::DEFAULT_SIGMA,
            augmentation: Augmentation::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn new(variant: Variant, phase: Phase) -> Self {
        Self { variant, phase, ..Self::default() }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.phase.default_lambda())
    }

    /// The configuration with defaults filled in, as recorded in snapshots.
    pub fn resolved(&self) -> Self {
        Self { lambda: Some(self.lambda()), ..self.clone() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda() >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for mismatched captions");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam settings out of range");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.augmentation.hflip_prob) {
            return bad("hflip_prob must lie in [0, 1]");
        }
        if !(0.0..=posecodec::MAX_ROTATION_DEGREES).contains(&self.augmentation.max_rotation) {
            return bad("max_rotation must lie in [0, 45]");
        }
        Ok(())
    }
}

/// Per generator step: critic quantities are averaged over that step's
/// critic updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: u8,
    /// Full critic objective, penalty included.
    pub d_loss: f64,
    pub g_loss: f64,
    /// Unweighted penalty.
    pub penalty: f64,
    /// Mean real-pair score minus mean mismatched-pair score.
    pub mismatch: f64,
    /// Mean real score minus mean fake score.
    pub wasserstein: f64,
    pub critic_updates: u64,
    pub generator_updates: u64,
}

/// Critic objective and its diagnostic terms.
pub struct CriticTerms<'g> {
    pub loss: Var<'g>,
    pub wasserstein: f64,
    pub mismatch: f64,
}

fn mean_value(v: Var<'_>) -> f64 {
    v.value().data().iter().map(|&x| x as f64).sum::<f64>() / v.value().numel() as f64
}

/// `-E[D(x,h) - D(G(z,h),h)] - E[D(x,h) - D(x,h_mis)]` from batch scores;
/// without mismatched scores only the first expectation is used.
pub fn wgan_critic_loss<'g>(real: Var<'g>, fake: Var<'g>, mismatched: Option<Var<'g>>) -> Result<CriticTerms<'g>> {
    if real.value().numel() == 0 || fake.value().numel() == 0 {
        return Err(Error::EmptyBatch);
    }
    let (r, f) = (real.mean(), fake.mean());
    let mut loss = f.sub(r)?;
    let mut mismatch = 0.0;
    if let Some(m) = mismatched {
        if m.value().numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let m = m.mean();
        loss = loss.add(m.sub(r)?)?;
        mismatch = mean_value(r) - mean_value(m);
    }
    Ok(CriticTerms { loss, wasserstein: mean_value(r) - mean_value(f), mismatch })
}

/// `-E[D(G(z,h),h)] - E[D(G(z,h12),h12)]` with `h12` the mean of two
/// captions; the second term is optional.
pub fn wgan_generator_loss<'g>(fake: Var<'g>, interpolated: Option<Var<'g>>) -> Result<Var<'g>> {
    if fake.value().numel() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut loss = fake.mean().neg();
    if let Some(i) = interpolated {
        loss = loss.sub(i.mean())?;
    }
    Ok(loss)
}

fn clamped_log(p: Var<'_>) -> Var<'_> {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).log()
}

/// Mean binary cross-entropy of probabilities `p` against a constant label.
fn bce_mean<'g>(p: Var<'g>, label: bool) -> Var<'g> {
    let q = if label { p } else { p.neg().add_scalar(1.0) };
    clamped_log(q).mean().neg()
}

/// Discriminator loss of the vanilla baseline from raw critic outputs:
/// the sum of three batch-mean cross-entropies (real pairs labelled 1, fakes
/// and mismatched pairs 0), so `D = 0.5` everywhere gives `3 log 2`.
pub fn vanilla_critic_loss<'g>(real: Var<'g>, fake: Var<'g>, mismatched: Option<Var<'g>>) -> Result<CriticTerms<'g>> {
    if real.value().numel() == 0 || fake.value().numel() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut loss = bce_mean(real.sigmoid(), true).add(bce_mean(fake.sigmoid(), false))?;
    let mut mismatch = 0.0;
    if let Some(m) = mismatched {
        loss = loss.add(bce_mean(m.sigmoid(), false))?;
        mismatch = mean_value(real) - mean_value(m);
    }
    Ok(CriticTerms { loss, wasserstein: mean_value(real) - mean_value(fake), mismatch })
}

/// Non-saturating generator loss `-log D` averaged over every generated
/// sample (`log 2` when `D = 0.5`).
pub fn vanilla_generator_loss<'g>(fake: Var<'g>, interpolated: Option<Var<'g>>) -> Result<Var<'g>> {
    if fake.value().numel() == 0 {
        return Err(Error::EmptyBatch);
    }
    let all = match interpolated {
        Some(i) => concat(&[fake, i], 0)?,
        None => fake,
    };
    Ok(bce_mean(all.sigmoid(), true))
}

/// Cross-entropy between predicted visibility probabilities `[N, 17]` and
/// ground-truth flags, summed over joints and averaged over the batch.
pub fn visibility_entropy<'g>(prob: Var<'g>, truth: &Tensor<f32>) -> Result<Var<'g>> {
    let shape = prob.shape();
    if shape != truth.shape() {
        return Err(Error::Format(format!("visibility shapes {shape:?} and {:?} differ", truth.shape())));
    }
    let g = prob.graph();
    let t = g.constant(truth);
    let not_t = g.constant(&truth.map(|v| 1.0 - v));
    let pos = t.mul(clamped_log(prob))?;
    let neg = not_t.mul(clamped_log(prob.neg().add_scalar(1.0)))?;
    Ok(pos.add(neg)?.sum().scale(-1.0 / shape[0] as f32))
}

/// `eps * x + (1 - eps) * g`.
pub fn interpolate_sample(x: &HeatmapStack, g: &HeatmapStack, epsilon: f32) -> Result<HeatmapStack> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::OutOfUnitRange { what: "epsilon", value: epsilon as f64 });
    }
    let v = x.as_slice().iter().zip(g.as_slice()).map(|(&a, &b)| epsilon * a + (1.0 - epsilon) * b).collect();
    HeatmapStack::from_vec(v)
}

/// Row-wise `eps_i * x_i + (1 - eps_i) * g_i` over the leading axis.
pub fn interpolate_rows(x: &Tensor<f32>, g: &Tensor<f32>, eps: &[f32]) -> Result<Tensor<f32>> {
    if x.shape() != g.shape() || x.shape().first() != Some(&eps.len()) {
        return Err(Error::Format(format!("cannot interpolate {:?} with {:?}", x.shape(), g.shape())));
    }
    let row = x.numel() / eps.len().max(1);
    let data = x
        .data()
        .chunks(row)
        .zip(g.data().chunks(row))
        .zip(eps)
        .flat_map(|((a, b), &e)| a.iter().zip(b).map(move |(&a, &b)| e * a + (1.0 - e) * b))
        .collect();
    Ok(Tensor::new(x.shape(), data)?)
}

/// Penalty on the joint input gradient `grad_{x,h} D(x, h)` at the given
/// points, differentiable with respect to the critic parameters bound in
/// `score`. Returns the batch-mean penalty and the per-sample norms.
pub fn penalty<'g>(
    graph: &'g Graph<f32>,
    score: impl FnOnce(Var<'g>, Var<'g>) -> Result<Var<'g>>,
    x_hat: &Tensor<f32>,
    h: &Tensor<f32>,
    kind: PenaltyKind,
) -> Result<(Var<'g>, Vec<f64>)> {
    let n = x_hat.shape()[0];
    let xv = graph.input(x_hat, true);
    let hv = graph.input(h, true);
    let s = score(xv, hv)?;
    let grads = backward(s.sum(), &[xv, hv], true)?;
    let gx = grads[0].reshape([n, x_hat.numel() / n])?;
    let gh = grads[1].reshape([n, h.numel() / n])?;
    let norm = concat(&[gx, gh], 1)?.row_l2_norm()?;
    let excess = norm.add_scalar(-1.0);
    let per_sample = match kind {
        PenaltyKind::Lp => excess.relu().square(),
        PenaltyKind::Gp => excess.square(),
    };
    let norms = norm.value().data().iter().map(|&v| v as f64).collect();
    Ok((per_sample.mean(), norms))
}

/// A permutation without fixed points: shuffle, then swap each fixed point
/// with its successor.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    if n < 2 {
        return p;
    }
    for i in 0..n {
        if p[i] == i {
            p.swap(i, (i + 1) % n);
        }
    }
    p
}

/// For each row, a different row chosen uniformly.
pub fn distinct_partners<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|i| (i + 1 + rng.random_range(0..n - 1)) % n).collect()
}

pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("sized")
}

/// Stack equally shaped tensors along a new leading axis-0 concatenation.
fn cat_rows(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(shape, data)?)
}

fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let width = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let data = rows.iter().flat_map(|&r| t.data()[r * width..(r + 1) * width].iter().copied()).collect();
    Tensor::new(shape, data).expect("sized")
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub nets: Networks,
    data: &'a [Sample],
    embeddings: HashMap<String, Vec<f32>>,
    rng: ChaCha8Rng,
    critic_updates: u64,
    generator_updates: u64,
    run_info: serde_json::Value,
}

impl<'a> Trainer<'a> {
    /// Prepares `nets` for the configured phase; phase 2 needs captions on
    /// every sample and a vocabulary to embed them.
    pub fn new(config: TrainConfig, mut nets: Networks, data: &'a [Sample], vocab: Option<&VocabEmbedding>) -> Result<Self> {
        config.validate()?;
        if data.len() < config.batch_size {
            return Err(Error::InsufficientData { needed: config.batch_size, available: data.len() });
        }
        let regression = matches!(nets, Networks::Regression { .. });
        if regression != (config.variant == Variant::Regression) {
            return Err(Error::Config(format!("variant {} does not match {} networks", config.variant.name(), nets.family())));
        }
        let mut embeddings = HashMap::new();
        match config.phase {
            Phase::Unconditional => nets.set_text_frozen(true)?,
            Phase::Conditional => {
                nets.set_text_frozen(false)?;
                let vocab = vocab.ok_or_else(|| Error::Config("the conditional phase needs a text embedding".into()))?;
                for s in data {
                    if s.captions.is_empty() {
                        return Err(Error::MissingCaptions(s.id.clone()));
                    }
                    for c in &s.captions {
                        embeddings.entry(c.clone()).or_insert_with(|| embed_sentence(vocab, c).into_vec());
                    }
                }
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ ((config.phase.number() as u64) << 56));
        Ok(Self { config, nets, data, embeddings, rng, critic_updates: 0, generator_updates: 0, run_info: serde_json::Value::Null })
    }

    /// Extra settings recorded under `"run"` in checkpoint snapshots, such as
    /// the text backend needed to use the checkpoint later.
    pub fn with_run_info(mut self, info: serde_json::Value) -> Self {
        self.run_info = info;
        self
    }

    pub fn into_networks(self) -> Networks {
        self.nets
    }

    fn conditional(&self) -> bool {
        self.config.phase == Phase::Conditional
    }

    fn embed(&self, captions: &[String]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(captions.len() * EMBED_DIM);
        for c in captions {
            match self.embeddings.get(c).filter(|_| self.conditional()) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(std::iter::repeat_n(0.0, EMBED_DIM)),
            }
        }
        Tensor::new([captions.len(), EMBED_DIM], data).expect("sized")
    }

    fn augment_pose(&mut self, pose: &KeypointPose) -> Result<KeypointPose> {
        let aug = self.config.augmentation;
        let mut p = *pose;
        if aug.hflip_prob > 0.0 && self.rng.random_bool(aug.hflip_prob) {
            p = p.hflip();
        }
        if aug.max_rotation > 0.0 {
            p = posecodec::rotate_pose(&p, self.rng.random_range(-aug.max_rotation..=aug.max_rotation))?;
        }
        Ok(p)
    }

    /// Augmented real samples in the critic's input space. Flips and
    /// rotations act on keypoints before rendering.
    fn real_batch(&mut self, picked: &[(usize, String)]) -> Result<Tensor<f32>> {
        let n = picked.len();
        match self.nets {
            Networks::Heatmap { .. } => {
                let mut data = Vec::with_capacity(n * HeatmapStack::LEN);
                for &(i, _) in picked {
                    let pose = self.augment_pose(&self.data[i].pose)?;
                    data.extend(posecodec::render_heatmaps(&pose, self.config.sigma)?.into_vec());
                }
                let [j, hh, ww] = HeatmapStack::SHAPE;
                Ok(Tensor::new([n, j, hh, ww], data)?)
            }
            Networks::Regression { .. } => {
                let mut data = Vec::with_capacity(n * crate::model::POSE_VECTOR_LEN);
                for &(i, _) in picked {
                    let p = self.augment_pose(&self.data[i].pose)?;
                    data.extend(pose_vector(&p));
                }
                Ok(Tensor::new([n, crate::model::POSE_VECTOR_LEN], data)?)
            }
        }
    }

    fn critic_step(&mut self) -> Result<(f64, f64, f64, f64)> {
        let b = self.config.batch_size;
        let picked = data::sample_captioned(self.data, b, &mut self.rng)?;
        let captions: Vec<String> = picked.iter().map(|(_, c)| c.clone()).collect();
        let h = self.embed(&captions);
        let real = self.real_batch(&picked)?;
        let z = randn(&[b, NOISE_DIM], &mut self.rng);
        let fake = self.nets.generate_detached(&z, &h)?;
        let conditional = self.conditional();
        let h_mis = conditional.then(|| gather_rows(&h, &derangement(b, &mut self.rng)));
        let eps: Vec<f32> = (0..b).map(|_| self.rng.random::<f32>()).collect();

        let graph = Graph::new();
        let critic = self.nets.critic();
        let pd = critic.params().bind(&graph);
        // real images are scored against both their own and mismatched captions,
        // so their caption-independent features are computed once
        let feats = critic.features(&pd, graph.constant(&cat_rows(&[&real, &fake])?))?;
        let (feats, h_all) = match &h_mis {
            Some(hm) => (concat(&[feats, feats.slice(0, 0, b)?], 0)?, cat_rows(&[&h, &h, hm])?),
            None => (feats, cat_rows(&[&h, &h])?),
        };
        let scores = critic.score_features(&pd, feats, graph.constant(&h_all))?;
        let s_real = scores.slice(0, 0, b)?;
        let s_fake = scores.slice(0, b, b)?;
        let s_mis = if conditional { Some(scores.slice(0, 2 * b, b)?) } else { None };
        let (terms, pen) = match self.config.variant.penalty() {
            Some(kind) => {
                let terms = wgan_critic_loss(s_real, s_fake, s_mis)?;
                let x_hat = interpolate_rows(&real, &fake, &eps)?;
                let (pen, _) = penalty(&graph, |x, hh| critic.score(&pd, x, hh), &x_hat, &h, kind)?;
                (terms, Some(pen))
            }
            None => (vanilla_critic_loss(s_real, s_fake, s_mis)?, None),
        };
        let (loss, pen_value) = match pen {
            Some(p) => (terms.loss.add(p.scale(self.config.lambda() as f32))?, p.value().item() as f64),
            None => (terms.loss, 0.0),
        };
        let grads = pd.gradients(loss)?;
        let d_loss = loss.value().item() as f64;
        let adam = self.config.adam();
        self.nets.critic_params_mut().adam_step(&grads, &adam)?;
        self.critic_updates += 1;
        Ok((d_loss, pen_value, terms.mismatch, terms.wasserstein))
    }

    fn generator_step(&mut self) -> Result<f64> {
        let b = self.config.batch_size;
        let picked = data::sample_captioned(self.data, b, &mut self.rng)?;
        let captions: Vec<String> = picked.iter().map(|(_, c)| c.clone()).collect();
        let h = self.embed(&captions);
        let conditional = self.conditional();
        let (z_all, h_all) = if conditional {
            let partners = distinct_partners(b, &mut self.rng);
            let other = gather_rows(&h, &partners);
            let mid = Tensor::new(h.shape(), h.data().iter().zip(other.data()).map(|(a, c)| 0.5 * (a + c)).collect())?;
            let z = randn(&[2 * b, NOISE_DIM], &mut self.rng);
            (z, cat_rows(&[&h, &mid])?)
        } else {
            (randn(&[b, NOISE_DIM], &mut self.rng), h.clone())
        };

        let graph = Graph::new();
        let pg = self.nets.generator_params().bind(&graph);
        let critic = self.nets.critic();
        let pd = critic.params().bind_constant(&graph);
        let hv = graph.constant(&h_all);
        let (fake, vis) = self.nets.generate(&pg, graph.constant(&z_all), hv)?;
        let scores = critic.score(&pd, fake, hv)?;
        let s_fake = scores.slice(0, 0, b)?;
        let s_interp = if conditional { Some(scores.slice(0, b, b)?) } else { None };
        let mut loss = match self.config.variant {
            Variant::Vanilla => vanilla_generator_loss(s_fake, s_interp)?,
            _ => wgan_generator_loss(s_fake, s_interp)?,
        };
        if let Some(vis) = vis {
            let truth: Vec<f32> = picked
                .iter()
                .flat_map(|&(i, _)| self.data[i].pose.joints.map(|k| k.visible as u8 as f32))
                .collect();
            let truth = Tensor::new([b, NUM_JOINTS], truth)?;
            loss = loss.add(visibility_entropy(vis.slice(0, 0, b)?, &truth)?)?;
        }
        let grads = pg.gradients(loss)?;
        let g_loss = loss.value().item() as f64;
        let adam = self.config.adam();
        self.nets.generator_params_mut().adam_step(&grads, &adam)?;
        self.generator_updates += 1;
        Ok(g_loss)
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn step(&mut self) -> Result<LossReport> {
        let _flush = textpose_tensor::FlushDenormals::new();
        let mut acc = [0.0; 4];
        for _ in 0..self.config.n_critic {
            let (d, p, m, w) = self.critic_step()?;
            for (a, v) in acc.iter_mut().zip([d, p, m, w]) {
                *a += v;
            }
        }
        let g_loss = self.generator_step()?;
        let k = self.config.n_critic as f64;
        let report = LossReport {
            step: self.nets.generator_params().step(),
            phase: self.config.phase.number(),
            d_loss: acc[0] / k,
            g_loss,
            penalty: acc[1] / k,
            mismatch: acc[2] / k,
            wasserstein: acc[3] / k,
            critic_updates: self.critic_updates,
            generator_updates: self.generator_updates,
        };
        for v in [report.d_loss, report.g_loss, report.penalty, report.wasserstein] {
            if !v.is_finite() {
                return Err(Error::NonFinite("training step"));
            }
        }
        Ok(report)
    }

    /// Run `config.steps` generator steps, checkpointing every
    /// `checkpoint_every` steps into `checkpoint_dir` when given.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, mut on_report: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(self.config.steps);
        for i in 1..=self.config.steps {
            let r = self.step()?;
            on_report(&r);
            reports.push(r);
            let k = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir.filter(|_| k > 0 && i % k == 0) {
                self.checkpoint(dir)?;
            }
        }
        Ok(reports)
    }

    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let step = self.nets.generator_params().step();
        let path = dir.join(format!("{}-phase{}-step{step:06}.ckpt", self.config.variant.name(), self.config.phase.number()));
        let train = serde_json::to_value(self.config.resolved()).map_err(|e| Error::Format(e.to_string()))?;
        let snapshot = serde_json::json!({ "train": train, "run": self.run_info });
        self.nets.to_checkpoint(self.config.variant.name(), self.config.phase.number(), snapshot).save(&path)?;
        Ok(path)
    }
}

pub const LOSS_CSV_HEADER: &str = "step,d_loss,g_loss,penalty,wasserstein_estimate";

/// Append reports to a loss CSV, writing the header when the file is new.
pub fn append_loss_csv(path: impl AsRef<Path>, reports: &[LossReport]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{LOSS_CSV_HEADER}").map_err(io)?;
    }
    for r in reports {
        writeln!(f, "{},{},{},{},{}", r.step, r.d_loss, r.g_loss, r.penalty, r.wasserstein).map_err(io)?;
    }
    Ok(())
}

/// Rows of a loss CSV as `(step, d_loss, g_loss, penalty, wasserstein)`.
pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<(u64, f64, f64, f64, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format(format!("{}: unexpected loss CSV header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Format(format!("{}:{}: malformed row", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((f[0].parse().map_err(|_| bad())?, num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?))
        })
        .collect()
}

/// Mean |Wasserstein estimate| over the first and the last `fraction` of
/// the reports.
pub fn wasserstein_trend(reports: &[LossReport], fraction: f64) -> (f64, f64) {
    let k = ((reports.len() as f64 * fraction).ceil() as usize).max(1).min(reports.len());
    let mean = |rs: &[LossReport]| rs.iter().map(|r| r.wasserstein.abs()).sum::<f64>() / rs.len().max(1) as f64;
    (mean(&reports[..k]), mean(&reports[reports.len() - k..]))
}
