//! Nearest-neighbour pose metrics, interpolation sweeps, distance
//! histograms and the class-match score for synthetic data.
//!
//! Every metric is a plain average of per-pose values summed in input order,
//! so the scalar results are reproducible bit for bit. Nearest-neighbour
//! ties go to the lowest reference index.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textpose_tensor::Tensor;

use crate::data::Sample;
use crate::model::{Networks, NOISE_DIM};
use crate::posecodec::{pose_distance, KeypointPose, NUM_JOINTS, VISIBILITY_PENALTY};
use crate::textenc::{embed_sentence, interpolate, SentenceEmbedding, VocabEmbedding, EMBED_DIM};
use crate::training::randn;
use crate::{Error, Result};

/// Generations per caption.
pub const DEFAULT_K: usize = 10;

/// Weights `w` of `w * a + (1 - w) * b`, first endpoint first.
pub const INTERPOLATION_WEIGHTS: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.0];

pub const HIST_BINS: usize = 64;
/// Largest possible pose distance: every joint visible in exactly one pose.
pub const HIST_MAX: f64 = NUM_JOINTS as f64 * VISIBILITY_PENALTY;

/// Rows per generator call when sampling many poses.
const GENERATE_CHUNK: usize = 64;

/// A pose with the embedding of its caption.
#[derive(Clone, Copy, Debug)]
pub struct Captioned<'a> {
    pub pose: &'a KeypointPose,
    pub embedding: &'a SentenceEmbedding,
}

/// Index and distance of the closest item; the first wins ties.
fn nearest<T>(items: &[T], dist: impl Fn(&T) -> f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.iter().enumerate() {
        let d = dist(item);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn nonempty<T>(items: &[T], what: &'static str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptySet(what));
    }
    Ok(())
}

fn check_embeddings(items: &[Captioned], what: &'static str) -> Result<()> {
    nonempty(items, what)?;
    match items.iter().find(|c| c.embedding.as_slice().len() != EMBED_DIM) {
        Some(c) => Err(Error::Dimension { expected: EMBED_DIM, found: c.embedding.as_slice().len() }),
        None => Ok(()),
    }
}

/// Index of the reference pose closest to `pose`.
pub fn nearest_pose(pose: &KeypointPose, references: &[KeypointPose]) -> Result<usize> {
    nonempty(references, "reference poses")?;
    Ok(nearest(references, |r| pose_distance(pose, r)).expect("nonempty").0)
}

/// Distance from each generated pose to its nearest reference.
pub fn nn_pose_values(generated: &[KeypointPose], references: &[KeypointPose]) -> Result<Vec<f64>> {
    nonempty(generated, "generated poses")?;
    nonempty(references, "reference poses")?;
    Ok(generated
        .iter()
        .map(|g| nearest(references, |r| pose_distance(g, r)).expect("nonempty").1)
        .collect())
}

pub fn nn_pose_distance(generated: &[KeypointPose], references: &[KeypointPose]) -> Result<f64> {
    Ok(mean(&nn_pose_values(generated, references)?))
}

/// Pose distance to the reference whose caption embedding is closest to
/// the generated pose's input embedding.
pub fn text_nn_pose_values(generated: &[Captioned], references: &[Captioned]) -> Result<Vec<f64>> {
    check_embeddings(generated, "generated poses")?;
    check_embeddings(references, "reference poses")?;
    let mut cache: Option<(&SentenceEmbedding, usize)> = None;
    Ok(generated
        .iter()
        .map(|g| {
            // consecutive generations usually share their caption
            let idx = match cache {
                Some((e, i)) if std::ptr::eq(e, g.embedding) || e == g.embedding => i,
                _ => {
                    let i = nearest(references, |r| g.embedding.distance(r.embedding)).expect("nonempty").0;
                    cache = Some((g.embedding, i));
                    i
                }
            };
            pose_distance(g.pose, references[idx].pose)
        })
        .collect())
}

pub fn text_nn_pose_distance(generated: &[Captioned], references: &[Captioned]) -> Result<f64> {
    Ok(mean(&text_nn_pose_values(generated, references)?))
}

/// Mean distance from each generated pose to every reference.
pub fn all_pose_values(generated: &[KeypointPose], references: &[KeypointPose]) -> Result<Vec<f64>> {
    nonempty(generated, "generated poses")?;
    nonempty(references, "reference poses")?;
    Ok(generated
        .iter()
        .map(|g| references.iter().map(|r| pose_distance(g, r)).sum::<f64>() / references.len() as f64)
        .collect())
}

/// Mean over all generated x reference pairs.
pub fn all_pose_distance(generated: &[KeypointPose], references: &[KeypointPose]) -> Result<f64> {
    nonempty(generated, "generated poses")?;
    nonempty(references, "reference poses")?;
    let mut sum = 0.0;
    for g in generated {
        for r in references {
            sum += pose_distance(g, r);
        }
    }
    Ok(sum / (generated.len() * references.len()) as f64)
}

/// Distance of every draw to the ground truth of its caption, flattened in
/// caption-major order.
pub fn gt_values(generated: &[Vec<KeypointPose>], ground_truth: &[KeypointPose]) -> Result<Vec<f64>> {
    nonempty(generated, "generated poses")?;
    if generated.len() != ground_truth.len() {
        return Err(Error::Misaligned("ground-truth distance"));
    }
    if generated.iter().any(Vec::is_empty) {
        return Err(Error::EmptySet("draws per caption"));
    }
    Ok(generated
        .iter()
        .zip(ground_truth)
        .flat_map(|(draws, gt)| draws.iter().map(move |g| pose_distance(g, gt)))
        .collect())
}

pub fn gt_distance(generated: &[Vec<KeypointPose>], ground_truth: &[KeypointPose]) -> Result<f64> {
    Ok(mean(&gt_values(generated, ground_truth)?))
}

/// Embedding distance between each input caption and the caption of the
/// reference pose nearest to the generated pose.
pub fn text_distance_of_nn_values(generated: &[Captioned], references: &[Captioned]) -> Result<Vec<f64>> {
    check_embeddings(generated, "generated poses")?;
    check_embeddings(references, "reference poses")?;
    Ok(generated
        .iter()
        .map(|g| {
            let i = nearest(references, |r| pose_distance(g.pose, r.pose)).expect("nonempty").0;
            g.embedding.distance(references[i].embedding)
        })
        .collect())
}

pub fn text_distance_of_nn(generated: &[Captioned], references: &[Captioned]) -> Result<f64> {
    Ok(mean(&text_distance_of_nn_values(generated, references)?))
}

/// Scalar metrics for one model. `d_p_nn`, `d_p_tnn` and `d_p_all` are
/// measured against the training poses; the `_val` pair, `d_p_gt` and
/// `d_t_pnn` against the validation poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub k: usize,
    /// Number of generated poses.
    pub samples: usize,
    pub d_p_nn: f64,
    pub d_p_tnn: f64,
    pub d_p_all: f64,
    pub d_p_nn_val: f64,
    pub d_p_gt: f64,
    pub d_p_all_val: f64,
    pub d_t_pnn: f64,
}

pub const METRIC_CSV_HEADER: &str = "variant,k,samples,d_p_nn,d_p_tnn,d_p_all,d_p_nn_val,d_p_gt,d_p_all_val,d_t_pnn";

impl MetricReport {
    fn values(&self) -> [f64; 7] {
        [self.d_p_nn, self.d_p_tnn, self.d_p_all, self.d_p_nn_val, self.d_p_gt, self.d_p_all_val, self.d_t_pnn]
    }

    /// Values are finite and nonnegative, and nearest never exceeds average.
    pub fn check(&self) -> Result<()> {
        if self.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("metric report"));
        }
        // summing many equal distances rounds, so the average can land a
        // little below values that are all equal to it
        let slack = |all: f64| all * (1.0 + 1e-9);
        if self.d_p_nn > slack(self.d_p_all) || self.d_p_nn_val > slack(self.d_p_all_val) {
            return Err(Error::Format(format!(
                "nearest-neighbour distance exceeds the average ({} > {} or {} > {})",
                self.d_p_nn, self.d_p_all, self.d_p_nn_val, self.d_p_all_val
            )));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.variant, self.k, self.samples);
        for v in self.values() {
            write!(row, ",{v}").expect("write to String");
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{METRIC_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn from_csv(text: &str) -> Result<Vec<Self>> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some(METRIC_CSV_HEADER) {
            return Err(Error::Format("metric CSV: unexpected header".into()));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 10 {
                    return Err(Error::Format(format!("metric CSV: expected 10 fields in {line:?}")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("metric CSV: {s:?}: {e}")));
                let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("metric CSV: {s:?}: {e}")));
                Ok(Self {
                    variant: f[0].to_string(),
                    k: int(f[1])?,
                    samples: int(f[2])?,
                    d_p_nn: num(f[3])?,
                    d_p_tnn: num(f[4])?,
                    d_p_all: num(f[5])?,
                    d_p_nn_val: num(f[6])?,
                    d_p_gt: num(f[7])?,
                    d_p_all_val: num(f[8])?,
                    d_t_pnn: num(f[9])?,
                })
            })
            .collect()
    }
}

/// Per-pose values behind a [`MetricReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawDistances {
    pub nn: Vec<f64>,
    pub tnn: Vec<f64>,
    pub all: Vec<f64>,
    pub nn_val: Vec<f64>,
    pub gt: Vec<f64>,
    pub all_val: Vec<f64>,
    pub t_pnn: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub threshold: f32,
    pub variant: String,
    /// Evaluate only the first this many validation captions.
    pub max_captions: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            threshold: crate::posecodec::DEFAULT_THRESHOLD,
            variant: "wgan-lp".into(),
            max_captions: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub raw: RawDistances,
}

/// Embeds each distinct caption once.
#[derive(Default)]
pub struct EmbeddingCache(HashMap<String, SentenceEmbedding>);

impl EmbeddingCache {
    pub fn get(&mut self, vocab: &VocabEmbedding, caption: &str) -> &SentenceEmbedding {
        self.0.entry(caption.to_string()).or_insert_with(|| embed_sentence(vocab, caption))
    }

    /// One `(pose index, caption)` row per caption of every sample.
    fn rows<'s>(samples: &'s [Sample]) -> Vec<(usize, &'s str)> {
        samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.captions.iter().map(move |c| (i, c.as_str())))
            .collect()
    }
}

/// `k` poses per embedding with noise drawn from `rng` in row order.
pub fn generate_for_embeddings(
    nets: &Networks,
    embeddings: &[&SentenceEmbedding],
    k: usize,
    threshold: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<KeypointPose>>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let rows: Vec<&SentenceEmbedding> = embeddings.iter().flat_map(|e| std::iter::repeat_n(*e, k)).collect();
    let mut poses = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(GENERATE_CHUNK) {
        let z = randn(&[chunk.len(), NOISE_DIM], rng);
        let h: Vec<f32> = chunk.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
        let h = Tensor::new(vec![chunk.len(), EMBED_DIM], h)?;
        poses.extend(nets.sample_poses(&z, &h, threshold)?);
    }
    let mut it = poses.into_iter();
    Ok(embeddings.iter().map(|_| it.by_ref().take(k).collect()).collect())
}

/// Generates `k` poses for every validation caption and measures them
/// against the training and validation sets.
pub fn evaluate(
    nets: &Networks,
    train: &[Sample],
    val: &[Sample],
    vocab: &VocabEmbedding,
    options: &EvalOptions,
) -> Result<Evaluation> {
    nonempty(train, "training set")?;
    nonempty(val, "validation set")?;
    let mut cache = EmbeddingCache::default();
    let train_rows = EmbeddingCache::rows(train);
    let mut val_rows = EmbeddingCache::rows(val);
    nonempty(&val_rows, "validation captions")?;
    for (_, c) in train_rows.iter().chain(&val_rows) {
        cache.get(vocab, c);
    }
    let cache = cache.0;
    let all_val_rows = val_rows.clone();
    if let Some(m) = options.max_captions {
        val_rows.truncate(m.max(1));
    }

    let inputs: Vec<&SentenceEmbedding> = val_rows.iter().map(|(_, c)| &cache[*c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let generated = generate_for_embeddings(nets, &inputs, options.k, options.threshold, &mut rng)?;

    let flat: Vec<KeypointPose> = generated.iter().flatten().cloned().collect();
    let flat_captioned: Vec<Captioned> = generated
        .iter()
        .zip(&inputs)
        .flat_map(|(draws, e)| draws.iter().map(move |pose| Captioned { pose, embedding: e }))
        .collect();
    let train_poses: Vec<KeypointPose> = train.iter().map(|s| s.pose.clone()).collect();
    let val_poses: Vec<KeypointPose> = val.iter().map(|s| s.pose.clone()).collect();
    fn captioned<'s>(samples: &'s [Sample], rows: &[(usize, &str)], cache: &'s HashMap<String, SentenceEmbedding>) -> Vec<Captioned<'s>> {
        rows.iter().map(|(i, c)| Captioned { pose: &samples[*i].pose, embedding: &cache[*c] }).collect()
    }
    let train_captioned = captioned(train, &train_rows, &cache);
    nonempty(&train_captioned, "training captions")?;
    let val_captioned = captioned(val, &all_val_rows, &cache);
    let gt: Vec<KeypointPose> = val_rows.iter().map(|(i, _)| val[*i].pose.clone()).collect();

    let raw = RawDistances {
        nn: nn_pose_values(&flat, &train_poses)?,
        tnn: text_nn_pose_values(&flat_captioned, &train_captioned)?,
        all: all_pose_values(&flat, &train_poses)?,
        nn_val: nn_pose_values(&flat, &val_poses)?,
        gt: gt_values(&generated, &gt)?,
        all_val: all_pose_values(&flat, &val_poses)?,
        t_pnn: text_distance_of_nn_values(&flat_captioned, &val_captioned)?,
    };
    let report = MetricReport {
        variant: options.variant.clone(),
        k: options.k,
        samples: flat.len(),
        d_p_nn: mean(&raw.nn),
        d_p_tnn: mean(&raw.tnn),
        d_p_all: all_pose_distance(&flat, &train_poses)?,
        d_p_nn_val: mean(&raw.nn_val),
        d_p_gt: mean(&raw.gt),
        d_p_all_val: all_pose_distance(&flat, &val_poses)?,
        d_t_pnn: mean(&raw.t_pnn),
    };
    report.check()?;
    Ok(Evaluation { report, raw })
}

/// Counts over [`HIST_BINS`] equal bins of `[0, HIST_MAX]`; larger values
/// land in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub family: String,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_width() -> f64 {
        HIST_MAX / HIST_BINS as f64
    }

    pub fn from_values(family: &str, values: &[f64]) -> Self {
        let mut counts = vec![0u64; HIST_BINS];
        for &v in values {
            let b = ((v.max(0.0) / Self::bin_width()) as usize).min(HIST_BINS - 1);
            counts[b] += 1;
        }
        Self { family: family.to_string(), counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean of the bin centres weighted by count.
    pub fn mean(&self) -> f64 {
        let w = Self::bin_width();
        let s: f64 = self.counts.iter().enumerate().map(|(i, &c)| c as f64 * (i as f64 + 0.5) * w).sum();
        s / self.total() as f64
    }
}

/// One histogram per pose-distance family. The text distance is on a
/// different scale and is left out.
pub fn distance_histograms(raw: &RawDistances) -> Vec<Histogram> {
    [
        ("nn", &raw.nn),
        ("tnn", &raw.tnn),
        ("all", &raw.all),
        ("nn_val", &raw.nn_val),
        ("gt", &raw.gt),
        ("all_val", &raw.all_val),
    ]
    .into_iter()
    .map(|(name, v)| Histogram::from_values(name, v))
    .collect()
}

pub const HISTOGRAM_CSV_HEADER: &str = "family,bin,lower,upper,count";

pub fn histograms_csv(hists: &[Histogram]) -> String {
    let w = Histogram::bin_width();
    let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(out, "{},{i},{},{},{c}", h.family, i as f64 * w, (i + 1) as f64 * w).expect("write to String");
        }
    }
    out
}

/// A pose generated at one interpolation weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub weight: f64,
    pub pose: KeypointPose,
}

fn generate_one(nets: &Networks, z: &[f32], h: &SentenceEmbedding, threshold: f32) -> Result<KeypointPose> {
    if z.len() != NOISE_DIM {
        return Err(Error::Dimension { expected: NOISE_DIM, found: z.len() });
    }
    let z = Tensor::new(vec![1, NOISE_DIM], z.to_vec())?;
    let h = Tensor::new(vec![1, EMBED_DIM], h.as_slice().to_vec())?;
    Ok(nets.sample_poses(&z, &h, threshold)?.remove(0))
}

/// Poses for `interpolate(h1, h2, w)` at each of [`INTERPOLATION_WEIGHTS`]
/// with the noise held fixed.
pub fn interpolation_sweep(
    nets: &Networks,
    z: &[f32],
    h1: &SentenceEmbedding,
    h2: &SentenceEmbedding,
    threshold: f32,
) -> Result<Vec<SweepPoint>> {
    INTERPOLATION_WEIGHTS
        .iter()
        .map(|&w| Ok(SweepPoint { weight: w, pose: generate_one(nets, z, &interpolate(h1, h2, w)?, threshold)? }))
        .collect()
}

/// `w * z1 + (1 - w) * z2`, returning the endpoints unchanged.
pub fn interpolate_noise(z1: &[f32], z2: &[f32], w: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::OutOfUnitRange { what: "interpolation weight", value: w });
    }
    if z1.len() != z2.len() {
        return Err(Error::Dimension { expected: z1.len(), found: z2.len() });
    }
    Ok(match w {
        1.0 => z1.to_vec(),
        0.0 => z2.to_vec(),
        _ => z1.iter().zip(z2).map(|(&a, &b)| (w * a as f64 + (1.0 - w) * b as f64) as f32).collect(),
    })
}

/// Poses for interpolated noise with the caption held fixed.
pub fn noise_interpolation_sweep(
    nets: &Networks,
    h: &SentenceEmbedding,
    z1: &[f32],
    z2: &[f32],
    threshold: f32,
) -> Result<Vec<SweepPoint>> {
    INTERPOLATION_WEIGHTS
        .iter()
        .map(|&w| Ok(SweepPoint { weight: w, pose: generate_one(nets, &interpolate_noise(z1, z2, w)?, h, threshold)? }))
        .collect()
}

/// Mean pose distance between neighbouring sweep points, and the distance
/// between the two ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothness {
    pub adjacent_mean: f64,
    pub endpoint: f64,
}

pub fn sweep_smoothness(points: &[SweepPoint]) -> Result<Smoothness> {
    if points.len() < 2 {
        return Err(Error::EmptySet("sweep"));
    }
    let steps: Vec<f64> = points.windows(2).map(|w| pose_distance(&w[0].pose, &w[1].pose)).collect();
    Ok(Smoothness {
        adjacent_mean: mean(&steps),
        endpoint: pose_distance(&points[0].pose, &points[points.len() - 1].pose),
    })
}

/// Index of the closest prototype.
pub fn nearest_prototype(pose: &KeypointPose, prototypes: &[KeypointPose]) -> Result<usize> {
    nonempty(prototypes, "class prototypes")?;
    nearest_pose(pose, prototypes)
}

/// Fraction of generations whose nearest prototype is their caption's class.
/// `generated` pairs a class index with the poses drawn for one caption.
pub fn class_match(generated: &[(usize, Vec<KeypointPose>)], prototypes: &[KeypointPose]) -> Result<f64> {
    nonempty(prototypes, "class prototypes")?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (class, poses) in generated {
        if *class >= prototypes.len() {
            return Err(Error::Config(format!("class {class} has no prototype")));
        }
        for p in poses {
            hits += (nearest_prototype(p, prototypes)? == *class) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptySet("generated poses"));
    }
    Ok(hits as f64 / total as f64)
}

/// Draws `k` poses per caption of every labelled sample and scores them
/// with [`class_match`].
pub fn class_match_on(
    nets: &Networks,
    samples: &[Sample],
    vocab: &VocabEmbedding,
    prototypes: &[KeypointPose],
    k: usize,
    seed: u64,
) -> Result<f64> {
    let mut cache = EmbeddingCache::default();
    let mut labels = Vec::new();
    for s in samples {
        let Some(class) = s.class else { continue };
        for c in &s.captions {
            cache.get(vocab, c);
            labels.push((class, c.as_str()));
        }
    }
    let inputs: Vec<&SentenceEmbedding> = labels.iter().map(|(_, c)| &cache.0[*c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = generate_for_embeddings(nets, &inputs, k, crate::posecodec::DEFAULT_THRESHOLD, &mut rng)?;
    let generated: Vec<(usize, Vec<KeypointPose>)> = labels.iter().map(|(c, _)| *c).zip(poses).collect();
    class_match(&generated, prototypes)
}

/// Published full-scale COCO results, for ordering comparisons only. The
/// pose-distance convention behind them is not known, so absolute values
/// are not comparable with ours.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedResult {
    pub model: &'static str,
    /// Against the training set: nn, text-nn, all.
    pub train: [f64; 3],
    /// Against the validation set: nn, gt, all, text distance of nn.
    pub val: [f64; 4],
}

pub const PUBLISHED: [PublishedResult; 4] = [
    PublishedResult { model: "vanilla", train: [205.2, 344.9, 351.1], val: [218.8, 343.2, 352.0, 10.8] },
    PublishedResult { model: "wgan-gp", train: [82.9, 260.5, 293.8], val: [110.2, 255.7, 293.4, 10.5] },
    PublishedResult { model: "regression", train: [98.0, 268.1, 291.1], val: [128.2, 264.7, 290.8, 10.5] },
    PublishedResult { model: "wgan-lp", train: [77.2, 253.6, 287.2], val: [102.3, 246.0, 286.9, 10.5] },
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posecodec::Keypoint;
    use rand::Rng;

    fn pose_at(dx: f32, dy: f32) -> KeypointPose {
        let mut p = KeypointPose::empty();
        for (j, k) in p.joints.iter_mut().enumerate() {
            *k = Keypoint::visible(20.0 + j as f32 + dx, 10.0 + 2.0 * j as f32 + dy);
        }
        p
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> KeypointPose {
        let mut p = KeypointPose::empty();
        for k in p.joints.iter_mut() {
            if rng.random_bool(0.8) {
                *k = Keypoint::visible(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            }
        }
        p
    }

    fn embedding(seed: u64) -> SentenceEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SentenceEmbedding::new((0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn nn_of_a_subset_is_zero() {
        let refs: Vec<_> = (0..4).map(|i| pose_at(i as f32, 0.0)).collect();
        assert_eq!(nn_pose_distance(&refs[1..3], &refs).unwrap(), 0.0);
    }

    #[test]
    fn nn_on_small_fixture() {
        // every joint shifts by (3, 4) -> 5 px per joint
        let refs = vec![pose_at(0.0, 0.0), pose_at(30.0, 40.0), pose_at(-3.0, -4.0), pose_at(6.0, 8.0)];
        let gen = vec![pose_at(3.0, 4.0), pose_at(27.0, 36.0), pose_at(-6.0, -8.0)];
        let d = nn_pose_distance(&gen, &refs).unwrap();
        assert!((d - 5.0 * 17.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn single_reference_nn_equals_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen: Vec<_> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let r = vec![random_pose(&mut rng)];
        let nn = nn_pose_distance(&gen, &r).unwrap();
        let all = all_pose_distance(&gen, &r).unwrap();
        assert!((nn - all).abs() < 1e-12);
    }

    #[test]
    fn all_distance_on_two_by_two() {
        let gen = vec![pose_at(0.0, 0.0), pose_at(3.0, 4.0)];
        let refs = vec![pose_at(0.0, 0.0), pose_at(6.0, 8.0)];
        // pairwise per-joint distances 0, 10, 5, 5
        let d = all_pose_distance(&gen, &refs).unwrap();
        assert!((d - 17.0 * 20.0 / 4.0).abs() < 1e-12);
        let copies = vec![pose_at(6.0, 8.0); 3];
        assert!((all_pose_distance(&gen, &copies).unwrap() - 17.0 * 7.5).abs() < 1e-12);
        let one = vec![pose_at(1.0, 1.0)];
        assert_eq!(all_pose_distance(&one, &one).unwrap(), 0.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let p = vec![pose_at(0.0, 0.0)];
        assert!(matches!(nn_pose_distance(&[], &p), Err(Error::EmptySet(_))));
        assert!(matches!(all_pose_distance(&p, &[]), Err(Error::EmptySet(_))));
        assert!(matches!(gt_distance(&[vec![]], &p), Err(Error::EmptySet(_))));
        assert!(matches!(gt_distance(&[p.clone()], &[]), Err(Error::Misaligned(_))));
        assert!(class_match(&[(0, p.clone())], &[]).is_err());
    }

    #[test]
    fn text_nn_picks_the_identical_caption() {
        let poses = [pose_at(0.0, 0.0), pose_at(10.0, 0.0), pose_at(0.0, 10.0)];
        let embs = [embedding(1), embedding(2), embedding(3)];
        let refs: Vec<Captioned> = (0..3).map(|i| Captioned { pose: &poses[i], embedding: &embs[i] }).collect();
        let g = pose_at(3.0, 4.0);
        let gen = [Captioned { pose: &g, embedding: &embs[1] }];
        let d = text_nn_pose_distance(&gen, &refs).unwrap();
        assert!((d - pose_distance(&g, &poses[1])).abs() < 1e-12);
    }

    #[test]
    fn text_ties_go_to_the_lowest_index() {
        let poses = [pose_at(0.0, 0.0), pose_at(30.0, 40.0)];
        let e = embedding(5);
        let refs = [Captioned { pose: &poses[0], embedding: &e }, Captioned { pose: &poses[1], embedding: &e }];
        let g = pose_at(30.0, 40.0);
        let d = text_nn_pose_distance(&[Captioned { pose: &g, embedding: &e }], &refs).unwrap();
        assert!((d - 17.0 * 50.0).abs() < 1e-12);
        let swapped = [refs[1], refs[0]];
        assert_eq!(text_nn_pose_distance(&[Captioned { pose: &g, embedding: &e }], &swapped).unwrap(), 0.0);
    }

    #[test]
    fn text_nn_on_two_references() {
        let poses = [pose_at(0.0, 0.0), pose_at(6.0, 8.0)];
        let ea = SentenceEmbedding::new(vec![0.0; EMBED_DIM]).unwrap();
        let mut v = vec![0.0; EMBED_DIM];
        v[0] = 2.0;
        let eb = SentenceEmbedding::new(v.clone()).unwrap();
        v[0] = 1.5;
        let query = SentenceEmbedding::new(v).unwrap();
        let refs = [Captioned { pose: &poses[0], embedding: &ea }, Captioned { pose: &poses[1], embedding: &eb }];
        let g = pose_at(3.0, 4.0);
        // text distances 1.5 and 0.5: the second reference, 5 px per joint
        let d = text_nn_pose_distance(&[Captioned { pose: &g, embedding: &query }], &refs).unwrap();
        assert!((d - 85.0).abs() < 1e-12);
    }

    #[test]
    fn text_distance_of_nn_fixtures() {
        let poses = [pose_at(0.0, 0.0), pose_at(20.0, 20.0)];
        let embs = [embedding(1), embedding(2)];
        let refs: Vec<Captioned> = (0..2).map(|i| Captioned { pose: &poses[i], embedding: &embs[i] }).collect();
        let copy = [Captioned { pose: &poses[1], embedding: &embs[1] }];
        assert_eq!(text_distance_of_nn(&copy, &refs).unwrap(), 0.0);

        let g = pose_at(1.0, 1.0);
        let q = embedding(9);
        let d = text_distance_of_nn(&[Captioned { pose: &g, embedding: &q }], &refs).unwrap();
        let want: f64 = q.as_slice().iter().zip(embs[0].as_slice()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        assert!((d - want).abs() < 1e-12);

        // one caption everywhere: the pose neighbour does not matter
        let same: Vec<Captioned> = (0..2).map(|i| Captioned { pose: &poses[i], embedding: &embs[0] }).collect();
        let far = pose_at(19.0, 19.0);
        let d = text_distance_of_nn(&[Captioned { pose: &far, embedding: &q }], &same).unwrap();
        assert!((d - want).abs() < 1e-12);
    }

    #[test]
    fn gt_distance_copies_and_k_one() {
        let gt = vec![pose_at(0.0, 0.0), pose_at(5.0, 5.0)];
        let copies: Vec<Vec<KeypointPose>> = gt.iter().map(|p| vec![p.clone(); 3]).collect();
        assert_eq!(gt_distance(&copies, &gt).unwrap(), 0.0);
        let single = vec![vec![pose_at(3.0, 4.0)], vec![pose_at(5.0, 5.0)]];
        assert!((gt_distance(&single, &gt).unwrap() - (85.0 + 0.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_reference_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen: Vec<_> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let mut refs: Vec<_> = (0..9).map(|_| random_pose(&mut rng)).collect();
        let nn = nn_pose_distance(&gen, &refs).unwrap();
        let all = all_pose_distance(&gen, &refs).unwrap();
        refs.reverse();
        assert_eq!(nn_pose_distance(&gen, &refs).unwrap(), nn);
        assert!((all_pose_distance(&gen, &refs).unwrap() - all).abs() < 1e-9 * all);
        assert!(nn <= all);
    }

    #[test]
    fn histogram_counts_and_mean() {
        let h = Histogram::from_values("nn", &[0.0; 7]);
        assert_eq!(h.counts[0], 7);
        assert_eq!(h.total(), 7);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..HIST_MAX)).collect();
        let h = Histogram::from_values("all", &values);
        assert_eq!(h.total(), 500);
        assert!((h.mean() - mean(&values)).abs() <= Histogram::bin_width() / 2.0);
        assert_eq!(Histogram::from_values("x", &[HIST_MAX * 2.0]).counts[HIST_BINS - 1], 1);
    }

    #[test]
    fn histogram_csv_has_one_row_per_bin() {
        let raw = RawDistances { nn: vec![1.0, 2.0], gt: vec![500.0], ..Default::default() };
        let csv = histograms_csv(&distance_histograms(&raw));
        assert!(csv.starts_with(HISTOGRAM_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 6 * HIST_BINS);
        assert!(csv.lines().any(|l| l.starts_with("nn,0,0,") && l.ends_with(",2")));
    }

    #[test]
    fn report_csv_round_trip_and_check() {
        let r = MetricReport {
            variant: "wgan-lp".into(),
            k: 10,
            samples: 40,
            d_p_nn: 1.5,
            d_p_tnn: 2.25,
            d_p_all: 3.0,
            d_p_nn_val: 1.0,
            d_p_gt: 2.0,
            d_p_all_val: 2.5,
            d_t_pnn: 0.125,
        };
        r.check().unwrap();
        assert_eq!(MetricReport::from_csv(&r.to_csv()).unwrap(), vec![r.clone()]);
        let bad = MetricReport { d_p_nn: 4.0, ..r.clone() };
        assert!(bad.check().is_err());
        assert!(MetricReport { d_t_pnn: f64::NAN, ..r }.check().is_err());
    }

    #[test]
    fn check_tolerates_rounding_of_equal_distances() {
        // every generated pose is empty, so all pair distances are equal
        let generated = vec![KeypointPose::empty(); 810];
        let mut full = KeypointPose::empty();
        for (j, k) in full.joints.iter_mut().enumerate() {
            *k = Keypoint::visible(j as f32, 2.0 * j as f32);
        }
        let references = vec![full; 90];
        let nn = nn_pose_distance(&generated, &references).unwrap();
        let all = all_pose_distance(&generated, &references).unwrap();
        let r = MetricReport {
            variant: "x".into(),
            k: 1,
            samples: 300,
            d_p_nn: nn,
            d_p_tnn: nn,
            d_p_all: all,
            d_p_nn_val: nn,
            d_p_gt: nn,
            d_p_all_val: all,
            d_t_pnn: 0.0,
        };
        r.check().unwrap();
    }

    #[test]
    fn class_match_of_prototypes_and_single_class() {
        let protos = vec![pose_at(0.0, 0.0), pose_at(20.0, 0.0), pose_at(0.0, 20.0)];
        let gen: Vec<_> = protos.iter().enumerate().map(|(c, p)| (c, vec![p.clone(); 3])).collect();
        assert_eq!(class_match(&gen, &protos).unwrap(), 1.0);
        let one = vec![pose_at(0.0, 0.0)];
        assert_eq!(class_match(&[(0, vec![pose_at(9.0, 3.0), pose_at(-4.0, 1.0)])], &one).unwrap(), 1.0);
    }

    #[test]
    fn class_match_of_random_poses_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let protos = vec![pose_at(-10.0, 0.0), pose_at(10.0, 0.0), pose_at(0.0, 15.0)];
        // poses drawn uniformly from the three classes' region, labels independent
        let gen: Vec<_> = (0..300)
            .map(|i| (i % 3, vec![pose_at(rng.random_range(-15.0..15.0), rng.random_range(-5.0..20.0))]))
            .collect();
        let m = class_match(&gen, &protos).unwrap();
        assert!((m - 1.0 / 3.0).abs() <= 0.1, "{m}");
    }

    #[test]
    fn noise_interpolation_keeps_endpoints() {
        let z1: Vec<f32> = (0..8).map(|i| i as f32 * 0.37).collect();
        let z2: Vec<f32> = (0..8).map(|i| -(i as f32) * 1.1).collect();
        assert_eq!(interpolate_noise(&z1, &z2, 1.0).unwrap(), z1);
        assert_eq!(interpolate_noise(&z1, &z2, 0.0).unwrap(), z2);
        assert_eq!(interpolate_noise(&z1, &z1, 0.25).unwrap(), z1);
        assert!(interpolate_noise(&z1, &z2, 1.5).is_err());
    }

    #[test]
    fn sweeps_hit_endpoints_and_repeat_for_equal_inputs() {
        use crate::model::ModelConfig;
        let nets = Networks::heatmap(&ModelConfig::tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = randn(&[1, NOISE_DIM], &mut rng).data().to_vec();
        let z2 = randn(&[1, NOISE_DIM], &mut rng).data().to_vec();
        let (h1, h2) = (embedding(1), embedding(2));
        let sweep = interpolation_sweep(&nets, &z, &h1, &h2, 0.2).unwrap();
        assert_eq!(sweep.len(), 5);
        assert_eq!(sweep[0].pose, generate_one(&nets, &z, &h1, 0.2).unwrap());
        assert_eq!(sweep[4].pose, generate_one(&nets, &z, &h2, 0.2).unwrap());
        let flat = interpolation_sweep(&nets, &z, &h1, &h1, 0.2).unwrap();
        assert!(flat.iter().all(|p| p.pose == flat[0].pose));

        let noise = noise_interpolation_sweep(&nets, &h1, &z, &z2, 0.2).unwrap();
        assert_eq!(noise[0].pose, sweep[0].pose);
        assert_eq!(noise[4].pose, generate_one(&nets, &z2, &h1, 0.2).unwrap());
        let same = noise_interpolation_sweep(&nets, &h1, &z, &z, 0.2).unwrap();
        assert!(same.iter().all(|p| p.pose == same[0].pose));
        let s = sweep_smoothness(&sweep).unwrap();
        assert!(s.adjacent_mean.is_finite() && s.endpoint.is_finite());
    }

    #[test]
    fn batched_generation_is_deterministic() {
        use crate::model::ModelConfig;
        let nets = Networks::heatmap(&ModelConfig::tiny(), 3).unwrap();
        let (a, b) = (embedding(1), embedding(2));
        let run = || generate_for_embeddings(&nets, &[&a, &b], 3, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let first = run();
        assert_eq!(first.len(), 2);
        assert!(first.iter().all(|d| d.len() == 3));
        assert_eq!(first, run());
    }

    #[test]
    fn published_values_order_vanilla_last() {
        let lp = PUBLISHED.iter().find(|r| r.model == "wgan-lp").unwrap();
        let van = PUBLISHED.iter().find(|r| r.model == "vanilla").unwrap();
        assert_eq!(lp.train, [77.2, 253.6, 287.2]);
        assert_eq!(lp.val, [102.3, 246.0, 286.9, 10.5]);
        assert_eq!(van.train, [205.2, 344.9, 351.1]);
        assert!(PUBLISHED.iter().all(|r| r.train[0] >= lp.train[0] && r.train[0] <= van.train[0]));
    }
}
