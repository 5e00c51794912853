//! Datasets: COCO keypoint/caption ingestion, a synthetic stick-figure
//! dataset, the JSON cache, and batch sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posecodec::{self, HeatmapStack, Keypoint, KeypointPose, MAP_SIZE, NUM_JOINTS};

/// Minimum number of labelled keypoints for a person to be kept.
pub const MIN_VISIBLE_KEYPOINTS: usize = 8;
/// Longer side of the person box after normalization, in heatmap pixels.
pub const BOX_TARGET: f64 = 60.0;

/// Reference sizes of the COCO 2017 release after filtering.
pub const EXPECTED_TRAIN_POSES: usize = 116_021;
pub const EXPECTED_VAL_POSES: usize = 4_812;
pub const EXPECTED_TRAIN_IMAGES: usize = 17_326;
pub const EXPECTED_VAL_IMAGES: usize = 714;

/// One COCO person instance with its image's captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub image_id: u64,
    /// `x, y, w, h` in image pixels.
    pub bbox: [f64; 4],
    /// `x, y, v` per joint; `v` is the COCO code 0 (unlabelled), 1 (labelled,
    /// occluded) or 2 (visible).
    pub keypoints: [[f64; 3]; NUM_JOINTS],
    pub captions: Vec<String>,
    pub source: String,
}

/// A training sample in the heatmap frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub pose: KeypointPose,
    pub captions: Vec<String>,
    /// Synthetic class index, absent for real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[derive(Deserialize)]
struct KeypointFile {
    annotations: Vec<KeypointAnnotation>,
}

#[derive(Deserialize)]
struct KeypointAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    #[serde(default = "person_category")]
    category_id: u64,
    #[serde(default)]
    keypoints: Vec<f64>,
    #[serde(default)]
    bbox: Vec<f64>,
}

fn person_category() -> u64 {
    1
}

#[derive(Deserialize)]
struct CaptionFile {
    annotations: Vec<CaptionAnnotation>,
}

#[derive(Deserialize)]
struct CaptionAnnotation {
    image_id: u64,
    caption: String,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        offset: byte_offset(&bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Byte offset of a 1-based line / column position.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let line_start: usize = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(<[u8]>::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestCounts {
    pub annotations: usize,
    pub images: usize,
    pub single_person_images: usize,
    pub kept: usize,
    pub dropped_few_keypoints: usize,
    pub dropped_no_caption: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub samples: Vec<AnnotatedSample>,
    pub counts: IngestCounts,
}

/// Keep images with exactly one person annotation having at least
/// `min_visible` labelled keypoints, joined with the image's captions.
/// Output is ordered by image id.
pub fn ingest_coco(keypoints: impl AsRef<Path>, captions: impl AsRef<Path>, split: &str, min_visible: usize) -> Result<Ingested> {
    let kp: KeypointFile = read_json(keypoints.as_ref())?;
    let caps: CaptionFile = read_json(captions.as_ref())?;
    let mut by_image: BTreeMap<u64, Vec<&KeypointAnnotation>> = BTreeMap::new();
    for a in kp.annotations.iter().filter(|a| a.category_id == 1) {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut captions: HashMap<u64, Vec<String>> = HashMap::new();
    for c in caps.annotations {
        captions.entry(c.image_id).or_default().push(c.caption.trim().to_string());
    }
    let mut counts = IngestCounts { annotations: kp.annotations.len(), images: by_image.len(), ..Default::default() };
    let mut samples = Vec::new();
    for (&image_id, anns) in &by_image {
        if anns.len() != 1 {
            continue;
        }
        counts.single_person_images += 1;
        let a = anns[0];
        if a.keypoints.len() != NUM_JOINTS * 3 || a.bbox.len() != 4 {
            return Err(Error::Format(format!(
                "annotation {} of image {image_id}: expected {} keypoint values and a 4-value bbox",
                a.id,
                NUM_JOINTS * 3
            )));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, c) in joints.iter_mut().zip(a.keypoints.chunks_exact(3)) {
            j.copy_from_slice(c);
        }
        if joints.iter().filter(|k| k[2] > 0.0).count() < min_visible {
            counts.dropped_few_keypoints += 1;
            continue;
        }
        let Some(caps) = captions.get(&image_id).filter(|c| !c.is_empty()) else {
            log::warn!("image {image_id} has no captions; dropped");
            counts.dropped_no_caption += 1;
            continue;
        };
        samples.push(AnnotatedSample {
            image_id,
            bbox: [a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]],
            keypoints: joints,
            captions: caps.iter().take(5).cloned().collect(),
            source: format!("coco:{split}:{}", a.id),
        });
    }
    counts.kept = samples.len();
    let expected = match split {
        "train2017" | "train" => Some(EXPECTED_TRAIN_IMAGES),
        "val2017" | "val" => Some(EXPECTED_VAL_IMAGES),
        _ => None,
    };
    if let Some(exp) = expected.filter(|&e| e != counts.kept) {
        log::warn!("split {split}: kept {} single-person images, the 2017 release gives {exp}", counts.kept);
    }
    Ok(Ingested { samples, counts })
}

/// Map the person box into the heatmap frame: longer side to 60 px,
/// box center to the frame center. Only COCO code 2 counts as visible.
pub fn normalize_sample(s: &AnnotatedSample) -> Result<KeypointPose> {
    let [bx, by, w, h] = s.bbox;
    if !(w > 0.0 && h > 0.0) || !s.bbox.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateBox(s.bbox));
    }
    let scale = BOX_TARGET / w.max(h);
    let (cx, cy) = (bx + w / 2.0, by + h / 2.0);
    let c = (MAP_SIZE as f64 - 1.0) / 2.0;
    let mut pose = KeypointPose::empty();
    for (k, &[x, y, v]) in pose.joints.iter_mut().zip(&s.keypoints) {
        if v == 2.0 {
            *k = Keypoint::visible((c + (x - cx) * scale) as f32, (c + (y - cy) * scale) as f32);
        }
    }
    Ok(pose)
}

impl AnnotatedSample {
    pub fn to_sample(&self) -> Result<Sample> {
        Ok(Sample { id: self.source.clone(), pose: normalize_sample(self)?, captions: self.captions.clone(), class: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub captions: Vec<String>,
    /// Mean pose; every sample jitters each joint around it.
    pub prototype: KeypointPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<SynthClass>,
    pub samples_per_class: usize,
    /// Per-joint Gaussian jitter in pixels.
    pub jitter: f64,
    pub seed: u64,
}

/// Required ratio of mean inter-class to mean intra-class pose distance.
pub const SEPARABILITY_RATIO: f64 = 5.0;

fn pose(points: [(f32, f32); NUM_JOINTS]) -> KeypointPose {
    let mut p = KeypointPose::empty();
    for (k, (x, y)) in p.joints.iter_mut().zip(points) {
        *k = Keypoint::visible(x, y);
    }
    p
}

// Figures face the viewer, so the person's left side is on the image right.
const HEAD: [(f32, f32); 5] = [(32.0, 9.0), (34.0, 7.0), (30.0, 7.0), (36.0, 8.0), (28.0, 8.0)];
const STANDING_LEGS: [(f32, f32); 6] = [(36.0, 36.0), (28.0, 36.0), (37.0, 47.0), (27.0, 47.0), (37.0, 58.0), (27.0, 58.0)];

pub fn arms_up_class() -> SynthClass {
    let mut p = HEAD.to_vec();
    p.extend([(38.0, 17.0), (26.0, 17.0), (41.0, 8.0), (23.0, 8.0), (37.0, 1.0), (27.0, 1.0)]);
    p.extend(STANDING_LEGS);
    SynthClass {
        name: "arms-up".into(),
        captions: vec![
            "person raising arms overhead".into(),
            "man raising arms overhead".into(),
            "woman raising arms overhead".into(),
        ],
        prototype: pose(p.try_into().expect("17 joints")),
    }
}

pub fn t_pose_class() -> SynthClass {
    let mut p = HEAD.to_vec();
    p.extend([(38.0, 17.0), (26.0, 17.0), (49.0, 17.0), (15.0, 17.0), (60.0, 17.0), (4.0, 17.0)]);
    p.extend(STANDING_LEGS);
    SynthClass {
        name: "t-pose".into(),
        captions: vec![
            "person stretching arms sideways".into(),
            "man stretching arms sideways".into(),
            "woman stretching arms sideways".into(),
        ],
        prototype: pose(p.try_into().expect("17 joints")),
    }
}

pub fn sitting_class() -> SynthClass {
    // lowered torso, thighs spread to the sides, hands resting on the knees
    let p: Vec<(f32, f32)> = HEAD
        .iter()
        .map(|&(x, y)| (x, y + 12.0))
        .chain([(38.0, 29.0), (26.0, 29.0), (40.0, 38.0), (24.0, 38.0), (46.0, 46.0), (18.0, 46.0)])
        .chain([(36.0, 46.0), (28.0, 46.0), (48.0, 48.0), (16.0, 48.0), (49.0, 61.0), (15.0, 61.0)])
        .collect();
    SynthClass {
        name: "sitting".into(),
        captions: vec![
            "person sitting on chair".into(),
            "man sitting on chair".into(),
            "woman sitting on chair".into(),
        ],
        prototype: pose(p.try_into().expect("17 joints")),
    }
}

impl SyntheticSpec {
    /// Arms-up, T-pose and sitting figures.
    pub fn three_class(samples_per_class: usize, seed: u64) -> Self {
        Self { classes: vec![arms_up_class(), t_pose_class(), sitting_class()], samples_per_class, jitter: 0.5, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Mean inter-class and intra-class pose distance over all sample pairs.
pub fn class_distance_means(samples: &[Sample]) -> (f64, f64) {
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let d = posecodec::pose_distance(&a.pose, &b.pose);
            if a.class == b.class {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (inter / n_inter.max(1) as f64, intra / n_intra.max(1) as f64)
}

/// Jittered class prototypes, interleaved by class; every tenth sample
/// (index % 10 == 9) goes to the validation split.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes.is_empty() || spec.samples_per_class == 0 {
        return Err(Error::Config("synthetic spec needs at least one class and one sample".into()));
    }
    if spec.classes.iter().any(|c| c.captions.is_empty()) {
        return Err(Error::Config("every synthetic class needs a caption template".into()));
    }
    let jitter = Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let last = MAP_SIZE as f32 - 1.0;
    let mut all = Vec::with_capacity(spec.samples_per_class * spec.classes.len());
    for i in 0..spec.samples_per_class {
        for (ci, class) in spec.classes.iter().enumerate() {
            let mut pose = class.prototype;
            for k in pose.joints.iter_mut().filter(|k| k.visible) {
                k.x = (k.x + jitter.sample(&mut rng) as f32).clamp(0.0, last);
                k.y = (k.y + jitter.sample(&mut rng) as f32).clamp(0.0, last);
            }
            all.push(Sample {
                id: format!("synth:{}:{i}", class.name),
                pose,
                captions: class.captions.clone(),
                class: Some(ci),
            });
        }
    }
    if spec.classes.len() > 1 {
        let (inter, intra) = class_distance_means(&all);
        let ratio = inter / intra;
        if !(ratio > SEPARABILITY_RATIO) {
            return Err(Error::NotSeparable { ratio, required: SEPARABILITY_RATIO });
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in all.into_iter().enumerate() {
        if i % 10 == 9 {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    Ok(Dataset { train, val })
}

/// Per-class mean of the visible joint positions.
pub fn class_prototypes(samples: &[Sample], num_classes: usize) -> Vec<KeypointPose> {
    let mut sums = vec![[(0.0f64, 0.0f64, 0usize); NUM_JOINTS]; num_classes];
    for s in samples {
        let Some(c) = s.class.filter(|&c| c < num_classes) else { continue };
        for (acc, k) in sums[c].iter_mut().zip(&s.pose.joints) {
            if k.visible {
                acc.0 += k.x as f64;
                acc.1 += k.y as f64;
                acc.2 += 1;
            }
        }
    }
    sums.iter()
        .map(|joints| {
            let mut p = KeypointPose::empty();
            for (k, &(x, y, n)) in p.joints.iter_mut().zip(joints) {
                if n > 0 {
                    *k = Keypoint::visible((x / n as f64) as f32, (y / n as f64) as f32);
                }
            }
            p
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: String,
    train: Vec<Sample>,
    val: Vec<Sample>,
}

const CACHE_FORMAT: &str = "textpose-dataset-1";

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = CacheFile { format: CACHE_FORMAT.into(), train: data.train.clone(), val: data.val.clone() };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file: CacheFile = read_json(path)?;
    if file.format != CACHE_FORMAT {
        return Err(Error::Format(format!("{}: unknown dataset cache format {:?}", path.display(), file.format)));
    }
    Ok(Dataset { train: file.train, val: file.val })
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub heatmaps: Vec<HeatmapStack>,
    pub captions: Vec<String>,
    pub poses: Vec<KeypointPose>,
}

/// Distinct sample indices drawn uniformly, each with one of its captions
/// chosen uniformly (empty when the sample has none).
pub fn sample_captioned<R: Rng>(split: &[Sample], batch_size: usize, rng: &mut R) -> Result<Vec<(usize, String)>> {
    if batch_size > split.len() {
        return Err(Error::InsufficientData { needed: batch_size, available: split.len() });
    }
    let indices = sample_indices(rng, split.len(), batch_size).into_vec();
    Ok(indices
        .into_iter()
        .map(|i| {
            let caps = &split[i].captions;
            let caption = match caps.len() {
                0 => String::new(),
                n => caps[rng.random_range(0..n)].clone(),
            };
            (i, caption)
        })
        .collect())
}

/// [`sample_captioned`] plus heatmaps rendered with `sigma`.
pub fn sample_batch<R: Rng>(split: &[Sample], batch_size: usize, sigma: f64, rng: &mut R) -> Result<Batch> {
    let picked = sample_captioned(split, batch_size, rng)?;
    let mut batch = Batch { indices: Vec::new(), heatmaps: Vec::new(), captions: Vec::new(), poses: Vec::new() };
    for (i, caption) in picked {
        let s = &split[i];
        batch.heatmaps.push(posecodec::render_heatmaps(&s.pose, sigma)?);
        batch.captions.push(caption);
        batch.poses.push(s.pose);
        batch.indices.push(i);
    }
    Ok(batch)
}
