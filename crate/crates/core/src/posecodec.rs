//! Keypoint poses, their heatmap encoding, the pose distance, and
//! heatmap-space augmentation.
//!
//! Everything here works in the 64x64 heatmap frame: `x` is the column and
//! `y` the row, both in pixels, with pixel centers at integer coordinates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use textpose_tensor::Tensor;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;
pub const MAP_SIZE: usize = 64;
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_THRESHOLD: f32 = 0.2;

/// Penalty for a joint that is visible in exactly one of two poses: the
/// diagonal of the heatmap frame.
pub const VISIBILITY_PENALTY: f64 = MAP_SIZE as f64 * std::f64::consts::SQRT_2;

/// Joint names in COCO order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Limb edges used for drawing, as in the COCO skeleton.
pub const LIMBS: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Left/right counterpart of a joint; the nose maps to itself.
pub fn mirror_joint(j: usize) -> usize {
    match j {
        0 => 0,
        j if j % 2 == 1 => j + 1,
        j => j - 1,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(x: f32, y: f32) -> Self {
        Self { x, y, visible: true }
    }

    pub const HIDDEN: Keypoint = Keypoint { x: 0.0, y: 0.0, visible: false };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointPose {
    pub joints: [Keypoint; NUM_JOINTS],
}

impl KeypointPose {
    pub fn empty() -> Self {
        Self { joints: [Keypoint::HIDDEN; NUM_JOINTS] }
    }

    pub fn num_visible(&self) -> usize {
        self.joints.iter().filter(|k| k.visible).count()
    }

    /// Mirror about the vertical axis: `x -> 63 - x` and left/right swapped.
    pub fn hflip(&self) -> Self {
        let mut out = Self::empty();
        for (j, k) in self.joints.iter().enumerate() {
            out.joints[mirror_joint(j)] = Keypoint { x: (MAP_SIZE - 1) as f32 - k.x, ..*k };
        }
        out
    }
}

/// `J x 64 x 64` per-joint confidence maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    data: Vec<f32>,
}

const CHANNEL: usize = MAP_SIZE * MAP_SIZE;

impl HeatmapStack {
    pub const SHAPE: [usize; 3] = [NUM_JOINTS, MAP_SIZE, MAP_SIZE];
    pub const LEN: usize = NUM_JOINTS * CHANNEL;

    pub fn zeros() -> Self {
        Self { data: vec![0.0; Self::LEN] }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Dimension { expected: Self::LEN, found: data.len() });
        }
        Ok(Self { data })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.shape() != Self::SHAPE {
            return Err(Error::Format(format!("expected heatmap shape {:?}, got {:?}", Self::SHAPE, t.shape())));
        }
        Self::from_vec(t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(Self::SHAPE, self.data.clone()).expect("fixed shape")
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        &self.data[j * CHANNEL..(j + 1) * CHANNEL]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.data[j * CHANNEL..(j + 1) * CHANNEL]
    }

    pub fn get(&self, j: usize, y: usize, x: usize) -> f32 {
        self.data[j * CHANNEL + y * MAP_SIZE + x]
    }

    /// Dump layout: `HMP1`, then J, H, W as little-endian `u32`, then the
    /// values as little-endian `f32` in channel, row, column order.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * Self::LEN);
        out.extend_from_slice(HEATMAP_MAGIC);
        for d in Self::SHAPE {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("heatmap dump"));
        }
        if &bytes[..4] != HEATMAP_MAGIC {
            return Err(Error::Format("heatmap dump: bad magic bytes".into()));
        }
        let dims: Vec<usize> =
            bytes[4..16].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
        if dims != Self::SHAPE {
            return Err(Error::Format(format!("heatmap dump: expected shape {:?}, got {dims:?}", Self::SHAPE)));
        }
        let body = &bytes[16..];
        if body.len() != 4 * Self::LEN {
            return Err(Error::Truncated("heatmap dump"));
        }
        Self::from_vec(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn save_dump(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_dump_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_dump_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub const HEATMAP_MAGIC: &[u8; 4] = b"HMP1";

/// Render a pose as peak-normalized Gaussians centered on the rounded joint
/// pixel; values below the smallest normal `f32` are stored as zero.
/// Returns the stack and how many coordinates had to be clamped into the
/// frame.
pub fn render_heatmaps_counted(pose: &KeypointPose, sigma: f64) -> Result<(HeatmapStack, usize)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut stack = HeatmapStack::zeros();
    let mut clamped = 0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let last = (MAP_SIZE - 1) as f64;
    for (j, k) in pose.joints.iter().enumerate() {
        if !k.visible {
            continue;
        }
        if !k.x.is_finite() || !k.y.is_finite() {
            return Err(Error::NonFinite("render_heatmaps"));
        }
        let inside = |v: f32| (0.0..MAP_SIZE as f32).contains(&v);
        if !inside(k.x) || !inside(k.y) {
            clamped += 1;
        }
        let cx = (k.x as f64).round().clamp(0.0, last);
        let cy = (k.y as f64).round().clamp(0.0, last);
        // exp(-(du^2 + dv^2) / 2s^2) factors into row and column terms
        let gx: Vec<f64> = (0..MAP_SIZE).map(|u| (-(u as f64 - cx).powi(2) * inv).exp()).collect();
        let gy: Vec<f64> = (0..MAP_SIZE).map(|v| (-(v as f64 - cy).powi(2) * inv).exp()).collect();
        let ch = stack.channel_mut(j);
        for (v, row) in ch.chunks_exact_mut(MAP_SIZE).enumerate() {
            for (u, px) in row.iter_mut().enumerate() {
                // far tails would be f32 subnormals, which are slow to compute with
                let g = gy[v] * gx[u];
                *px = if g < f32::MIN_POSITIVE as f64 { 0.0 } else { g as f32 };
            }
        }
    }
    Ok((stack, clamped))
}

/// [`render_heatmaps_counted`], logging a warning when clamping happened.
pub fn render_heatmaps(pose: &KeypointPose, sigma: f64) -> Result<HeatmapStack> {
    let (stack, clamped) = render_heatmaps_counted(pose, sigma)?;
    if clamped > 0 {
        log::warn!("{clamped} keypoint(s) outside the heatmap frame were clamped to the border");
    }
    Ok(stack)
}

/// Per channel, the first row-major maximum becomes the joint location; the
/// joint is visible iff that maximum exceeds `threshold`.
pub fn extract_pose(stack: &HeatmapStack, threshold: f32) -> KeypointPose {
    let mut pose = KeypointPose::empty();
    for (j, k) in pose.joints.iter_mut().enumerate() {
        let ch = stack.channel(j);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate().skip(1) {
            if v > ch[best] {
                best = i;
            }
        }
        *k = Keypoint {
            x: (best % MAP_SIZE) as f32,
            y: (best / MAP_SIZE) as f32,
            visible: ch[best] > threshold,
        };
    }
    pose
}

/// Sum over joints of the pixel distance when visible in both poses, the
/// frame diagonal when visible in exactly one, and zero otherwise.
pub fn pose_distance(a: &KeypointPose, b: &KeypointPose) -> f64 {
    a.joints
        .iter()
        .zip(&b.joints)
        .map(|(p, q)| match (p.visible, q.visible) {
            (true, true) => {
                let dx = p.x as f64 - q.x as f64;
                let dy = p.y as f64 - q.y as f64;
                (dx * dx + dy * dy).sqrt()
            }
            (false, false) => 0.0,
            _ => VISIBILITY_PENALTY,
        })
        .sum()
}

/// Mirror every channel about the vertical axis and swap left/right channels.
pub fn hflip(stack: &HeatmapStack) -> HeatmapStack {
    let mut out = HeatmapStack::zeros();
    for j in 0..NUM_JOINTS {
        let src = stack.channel(j);
        let dst = out.channel_mut(mirror_joint(j));
        for (srow, drow) in src.chunks_exact(MAP_SIZE).zip(dst.chunks_exact_mut(MAP_SIZE)) {
            for (u, v) in drow.iter_mut().enumerate() {
                *v = srow[MAP_SIZE - 1 - u];
            }
        }
    }
    out
}

pub const MAX_ROTATION_DEGREES: f64 = 45.0;

/// Rotate about the frame center (31.5, 31.5) with bilinear sampling.
/// Positive angles turn counter-clockwise as displayed (x right, y down).
/// Samples falling outside the frame read zero.
pub fn rotate(stack: &HeatmapStack, degrees: f64) -> Result<HeatmapStack> {
    if !degrees.is_finite() || degrees.abs() > MAX_ROTATION_DEGREES {
        return Err(Error::AngleOutOfRange(degrees));
    }
    Ok(rotate_any(stack, degrees))
}

/// [`rotate`] without the angle guard.
pub(crate) fn rotate_any(stack: &HeatmapStack, degrees: f64) -> HeatmapStack {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (MAP_SIZE as f64 - 1.0) / 2.0;
    let n = MAP_SIZE as isize;
    let mut out = HeatmapStack::zeros();
    // source position for each destination pixel, shared by all channels
    let mut taps = Vec::with_capacity(CHANNEL);
    for v in 0..MAP_SIZE {
        for u in 0..MAP_SIZE {
            let (dx, dy) = (u as f64 - c, v as f64 - c);
            let sx = c + dx * cos - dy * sin;
            let sy = c + dx * sin + dy * cos;
            let (x0, y0) = (sx.floor(), sy.floor());
            taps.push((x0 as isize, y0 as isize, (sx - x0) as f32, (sy - y0) as f32));
        }
    }
    for j in 0..NUM_JOINTS {
        let src = stack.channel(j);
        let at = |x: isize, y: isize| if x >= 0 && y >= 0 && x < n && y < n { src[(y * n + x) as usize] } else { 0.0 };
        for (dst, &(x0, y0, fx, fy)) in out.channel_mut(j).iter_mut().zip(&taps) {
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            *dst = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rotate keypoint coordinates the same way [`rotate`] turns heatmaps.
/// Joints leaving the frame are clamped to its border.
pub fn rotate_pose(pose: &KeypointPose, degrees: f64) -> Result<KeypointPose> {
    if !degrees.is_finite() || degrees.abs() > MAX_ROTATION_DEGREES {
        return Err(Error::AngleOutOfRange(degrees));
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c = (MAP_SIZE as f64 - 1.0) / 2.0;
    let last = (MAP_SIZE - 1) as f64;
    let mut out = *pose;
    for k in out.joints.iter_mut().filter(|k| k.visible) {
        let (dx, dy) = (k.x as f64 - c, k.y as f64 - c);
        k.x = (c + dx * cos + dy * sin).clamp(0.0, last) as f32;
        k.y = (c - dx * sin + dy * cos).clamp(0.0, last) as f32;
    }
    Ok(out)
}

pub const SVG_SIZE: usize = 256;
const SVG_SCALE: f32 = (SVG_SIZE / MAP_SIZE) as f32;

/// Draw a pose: limbs between visible joints and a circle per visible joint.
pub fn pose_to_svg(pose: &KeypointPose) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#);
    for &(a, b) in &LIMBS {
        let (p, q) = (pose.joints[a], pose.joints[b]);
        if p.visible && q.visible {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="steelblue" stroke-width="3"/>"#,
                p.x * SVG_SCALE,
                p.y * SVG_SCALE,
                q.x * SVG_SCALE,
                q.y * SVG_SCALE
            );
        }
    }
    for (j, k) in pose.joints.iter().enumerate() {
        if k.visible {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="crimson"><title>{}</title></circle>"#,
                k.x * SVG_SCALE,
                k.y * SVG_SCALE,
                JOINT_NAMES[j]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
