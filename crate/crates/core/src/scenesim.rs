//! Synthetic clips of moving colored shapes with one attended object per frame.
//!
//! The attended object moves fast and is drawn on top; distractors drift
//! slowly and include at least one object of the same class. Flow is exact
//! (integer displacements), truncated to +-20 px and scaled to [-1, 1].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchorgeom::BBox;
use crate::diffcore::Tensor;

pub const FLOW_LIMIT: f64 = 20.0;
pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("could not place {objects} objects without heavy overlap after {retries} attempts")]
    Placement { objects: usize, retries: usize },
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("blob {file} is truncated: expected {expected} bytes, found {found}")]
    Truncated { file: PathBuf, expected: usize, found: usize },
    #[error("checksum mismatch for sample {sample} ({file})")]
    Checksum { sample: usize, file: PathBuf },
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("sample index {index} out of range ({len} samples)")]
    OutOfRange { index: usize, len: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPolicy {
    Fixed,
    SwitchOnce,
}

impl std::str::FromStr for AttentionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "switch-once" => Ok(Self::SwitchOnce),
            _ => Err(format!("unknown attention policy `{s}` (expected fixed or switch-once)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub resolution: (usize, usize),
    pub clip_len: usize,
    pub classes: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive speed range of the attended object, px/frame.
    pub speed: (i64, i64),
    /// Inclusive speed range of distractors, px/frame.
    pub distractor_speed: (i64, i64),
    /// Inclusive object size range, px.
    pub size: (usize, usize),
    /// Probability per frame and axis of a +-1 px motion jitter.
    pub jitter: f64,
    pub policy: AttentionPolicy,
    /// Static background specks per 16 pixels.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
            clip_len: 7,
            classes: 5,
            objects: (5, 9),
            speed: (3, 6),
            distractor_speed: (0, 1),
            size: (10, 18),
            jitter: 0.1,
            policy: AttentionPolicy::Fixed,
            clutter: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || self.clip_len == 0 {
            return bad("resolution and clip length must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.objects.0 < 2 || self.objects.0 > self.objects.1 {
            return bad(format!("objects per scene must be a range starting at 2 or more, got {:?}", self.objects));
        }
        if self.size.0 < 2 || self.size.0 > self.size.1 || self.size.1 > h.min(w) {
            return bad(format!("object size range {:?} does not fit a {h}x{w} frame", self.size));
        }
        for (name, r) in [("speed", self.speed), ("distractor_speed", self.distractor_speed)] {
            if r.0 < 0 || r.0 > r.1 {
                return bad(format!("{name} must be a nonnegative range, got {r:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter) || !(self.clutter >= 0.0) {
            return bad("jitter must lie in [0, 1] and clutter must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub objects: Vec<SceneObject>,
    pub attended: usize,
    /// Normalized (x, y).
    pub gaze: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    /// `[N, H, W, 3]` in [0, 1].
    pub frames: Tensor,
    /// `[N, H, W, 2]` in [-1, 1]; channel 0 is x.
    pub flows: Tensor,
    pub annotations: Vec<FrameAnnotation>,
}

impl ClipSample {
    /// All-zero clip with a single centered annotation per frame.
    pub fn blank(n: usize, h: usize, w: usize) -> Self {
        let obj = SceneObject { bbox: BBox::new(0.5, 0.5, 0.25, 0.25), class_id: 0 };
        let ann = FrameAnnotation { objects: vec![obj, obj], attended: 0, gaze: (0.5, 0.5) };
        Self { frames: Tensor::zeros(&[n, h, w, 3]), flows: Tensor::zeros(&[n, h, w, 2]), annotations: vec![ann; n] }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Ground truth of frame `t`: attended box and class.
    pub fn target(&self, t: usize) -> SceneObject {
        let a = &self.annotations[t];
        a.objects[a.attended]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Square,
    Circle,
    Triangle,
    Bar,
    Ring,
}

pub const ARCHETYPES: [Archetype; 5] = [Archetype::Square, Archetype::Circle, Archetype::Triangle, Archetype::Bar, Archetype::Ring];

const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.10],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
];

/// Shape and color of class `k`.
pub fn class_style(k: usize) -> (Archetype, [f64; 3]) {
    (ARCHETYPES[k % ARCHETYPES.len()], PALETTE[(k * 3 + k / PALETTE.len()) % PALETTE.len()])
}

/// Binary sprite, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Archetype, size: usize) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let r2 = (s / 2.0) * (s / 2.0);
        let (w, h) = match shape {
            Archetype::Bar => (size, (size / 3).max(2)),
            _ => (size, size),
        };
        let mut bits = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let d2 = dx * dx + dy * dy;
                bits[y * w + x] = match shape {
                    Archetype::Square | Archetype::Bar => true,
                    Archetype::Circle => d2 <= r2,
                    Archetype::Ring => d2 <= r2 && d2 >= r2 * 0.3,
                    Archetype::Triangle => {
                        let half = (y as f64 + 1.0) / s * s / 2.0;
                        (x as f64 - c).abs() <= half
                    }
                };
            }
        }
        Self { w, h, bits }
    }

    /// Tight pixel extents `(x0, y0, x1, y1)`, inclusive.
    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let mut e = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.bits[y * self.w + x] {
                    e = (e.0.min(x), e.1.min(y), e.2.max(x), e.3.max(y));
                }
            }
        }
        e
    }
}

/// One object's sprite and its top-left position per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub class_id: usize,
    pub mask: Mask,
    pub color: [f64; 3],
    pub positions: Vec<(i64, i64)>,
}

impl ObjectTrack {
    pub fn bbox(&self, t: usize, h: usize, w: usize) -> BBox {
        let (x0, y0, x1, y1) = self.mask.extents();
        let (px, py) = self.positions[t];
        BBox::from_corners(
            (px + x0 as i64) as f64 / w as f64,
            (py + y0 as i64) as f64 / h as f64,
            (px + x1 as i64 + 1) as f64 / w as f64,
            (py + y1 as i64 + 1) as f64 / h as f64,
        )
    }
}

/// Index of the topmost object per pixel for frame `t`, drawing tracks in
/// `order`.
pub fn owners(tracks: &[ObjectTrack], order: &[usize], t: usize, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut own = vec![None; h * w];
    for &j in order {
        let tr = &tracks[j];
        let (px, py) = tr.positions[t];
        for y in 0..tr.mask.h {
            for x in 0..tr.mask.w {
                if !tr.mask.bits[y * tr.mask.w + x] {
                    continue;
                }
                let (gx, gy) = (px + x as i64, py + y as i64);
                if gx >= 0 && gy >= 0 && (gx as usize) < w && (gy as usize) < h {
                    own[gy as usize * w + gx as usize] = Some(j);
                }
            }
        }
    }
    own
}

pub fn flow_value(displacement_px: f64) -> f64 {
    displacement_px.clamp(-FLOW_LIMIT, FLOW_LIMIT) / FLOW_LIMIT
}

/// Flow `[N, H, W, 2]` from per-frame ownership maps: the displacement of the
/// owning object from frame t to t+1. The last frame repeats the previous one.
pub fn synth_flow(tracks: &[ObjectTrack], owner_maps: &[Vec<Option<usize>>], h: usize, w: usize) -> Tensor {
    let n = owner_maps.len();
    let mut flow = vec![0.0; n * h * w * 2];
    for t in 0..n.saturating_sub(1) {
        for (p, own) in owner_maps[t].iter().enumerate() {
            if let Some(j) = own {
                let (x0, y0) = tracks[*j].positions[t];
                let (x1, y1) = tracks[*j].positions[t + 1];
                flow[(t * h * w + p) * 2] = flow_value((x1 - x0) as f64);
                flow[(t * h * w + p) * 2 + 1] = flow_value((y1 - y0) as f64);
            }
        }
    }
    if n >= 2 {
        let plane = h * w * 2;
        flow.copy_within((n - 2) * plane..(n - 1) * plane, (n - 1) * plane);
    }
    Tensor::new(vec![n, h, w, 2], flow).expect("sized above")
}

fn draw_velocity(rng: &mut ChaCha8Rng, range: (i64, i64)) -> (i64, i64) {
    let s = rng.random_range(range.0..=range.1);
    if s == 0 {
        return (0, 0);
    }
    let other = rng.random_range(-s..=s);
    let sign = if rng.random_bool(0.5) { 1 } else { -1 };
    if rng.random_bool(0.5) {
        (sign * s, other)
    } else {
        (other, sign * s)
    }
}

fn step_axis(pos: i64, v: &mut i64, d: i64, max: i64) -> i64 {
    let mut p = pos + d;
    if p < 0 {
        p = -p;
        *v = -*v;
    } else if p > max {
        p = 2 * max - p;
        *v = -*v;
    }
    p.clamp(0, max)
}

fn pixel_box(x: i64, y: i64, m: &Mask) -> [f64; 4] {
    [x as f64, y as f64, (x + m.w as i64) as f64, (y + m.h as i64) as f64]
}

fn overlap_fraction(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let small = ((a[2] - a[0]) * (a[3] - a[1])).min((b[2] - b[0]) * (b[3] - b[1]));
    iw * ih / small
}

/// Generates one clip. Deterministic in `(config, seed)`.
pub fn synth_sample(config: &SimConfig, seed: u64) -> Result<ClipSample, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(seed);
    render(config, &mut rng)
}

fn render(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<ClipSample, SimError> {
    let (h, w) = cfg.resolution;
    let n = cfg.clip_len;
    let k = rng.random_range(cfg.objects.0..=cfg.objects.1);

    // attended object per frame
    let first = rng.random_range(0..k);
    let mut attended = vec![first; n];
    if cfg.policy == AttentionPolicy::SwitchOnce && n >= 2 {
        let at = rng.random_range(1..n);
        let mut next = rng.random_range(0..k - 1);
        if next >= first {
            next += 1;
        }
        attended[at..].iter_mut().for_each(|a| *a = next);
    }

    // classes: a same-class distractor next to the first attended object
    let target_class = rng.random_range(0..cfg.classes);
    let twin = (first + 1 + rng.random_range(0..k - 1)) % k;
    let classes: Vec<usize> = (0..k)
        .map(|j| if j == first || j == twin { target_class } else { rng.random_range(0..cfg.classes) })
        .collect();

    let mut tracks: Vec<ObjectTrack> = Vec::with_capacity(k);
    let mut placed: Vec<[f64; 4]> = Vec::with_capacity(k);
    for (j, &class_id) in classes.iter().enumerate() {
        let (shape, color) = class_style(class_id);
        let mask = Mask::new(shape, rng.random_range(cfg.size.0..=cfg.size.1));
        let (mx, my) = ((w - mask.w) as i64, (h - mask.h) as i64);
        let mut pos = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (x, y) = (rng.random_range(0..=mx), rng.random_range(0..=my));
            let b = pixel_box(x, y, &mask);
            // the first attended object must start mostly unoccluded
            let limit = if j == first { 0.25 } else { 0.6 };
            if placed.iter().all(|p| overlap_fraction(*p, b) <= limit) {
                pos = Some((x, y));
                placed.push(b);
                break;
            }
        }
        let Some(start) = pos else {
            return Err(SimError::Placement { objects: k, retries: PLACEMENT_RETRIES });
        };
        tracks.push(ObjectTrack { class_id, mask, color, positions: vec![start] });
    }

    let mut fast: Vec<(i64, i64)> = (0..k).map(|_| draw_velocity(rng, cfg.speed)).collect();
    let mut slow: Vec<(i64, i64)> = (0..k).map(|_| draw_velocity(rng, cfg.distractor_speed)).collect();
    for t in 0..n.saturating_sub(1) {
        for j in 0..k {
            let v = if attended[t] == j { &mut fast[j] } else { &mut slow[j] };
            let mut d = *v;
            for axis in [&mut d.0, &mut d.1] {
                if rng.random_bool(cfg.jitter) {
                    *axis += if rng.random_bool(0.5) { 1 } else { -1 };
                }
            }
            let tr = &mut tracks[j];
            let (x, y) = tr.positions[t];
            let nx = step_axis(x, &mut v.0, d.0, (w - tr.mask.w) as i64);
            let ny = step_axis(y, &mut v.1, d.1, (h - tr.mask.h) as i64);
            tr.positions.push((nx, ny));
        }
    }

    let background = clutter_layer(cfg, rng);
    let mut frames = Vec::with_capacity(n * h * w * 3);
    let mut owner_maps = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for t in 0..n {
        let mut order: Vec<usize> = (0..k).filter(|&j| j != attended[t]).collect();
        order.push(attended[t]);
        let own = owners(&tracks, &order, t, h, w);
        for (p, o) in own.iter().enumerate() {
            let px = match o {
                Some(j) => tracks[*j].color,
                None => background[p],
            };
            frames.extend_from_slice(&px);
        }
        owner_maps.push(own);

        let objects: Vec<SceneObject> =
            tracks.iter().enumerate().map(|(j, tr)| SceneObject { bbox: tr.bbox(t, h, w), class_id: classes[j] }).collect();
        let b = objects[attended[t]].bbox;
        let gx = Normal::new(b.cx, 0.1 * b.w).expect("finite").sample(rng).clamp(0.0, 1.0);
        let gy = Normal::new(b.cy, 0.1 * b.h).expect("finite").sample(rng).clamp(0.0, 1.0);
        annotations.push(FrameAnnotation { objects, attended: attended[t], gaze: (gx, gy) });
    }
    let flows = synth_flow(&tracks, &owner_maps, h, w);
    Ok(ClipSample { frames: Tensor::new(vec![n, h, w, 3], frames).expect("sized above"), flows, annotations })
}

/// Static background: mid gray with small randomly colored specks.
fn clutter_layer(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (h, w) = cfg.resolution;
    let mut bg = vec![[0.45, 0.45, 0.45]; h * w];
    let specks = (cfg.clutter * (h * w) as f64 / 16.0).round() as usize;
    for _ in 0..specks {
        let (sw, sh) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.65));
        for y in y0..(y0 + sh).min(h) {
            for x in x0..(x0 + sw).min(w) {
                bg[y * w + x] = tint;
            }
        }
    }
    bg
}

/// Random access to clips.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<ClipSample, SimError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [ClipSample] {
    fn len(&self) -> usize {
        <[ClipSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<ClipSample, SimError> {
        <[ClipSample]>::get(self, index).cloned().ok_or(SimError::OutOfRange { index, len: <[ClipSample]>::len(self) })
    }
}

impl SampleSource for Vec<ClipSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<ClipSample, SimError> {
        SampleSource::get(self.as_slice(), index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Clips rendered on demand; sample `i` of a split always has the same content.
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub config: SimConfig,
    pub split: Split,
    pub count: usize,
}

impl SynthSplit {
    pub fn new(config: SimConfig, split: Split, count: usize) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self { config, split, count })
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        let tag = match self.split {
            Split::Train => 0u64,
            Split::Test => 1u64,
        };
        (tag << 40) | index as u64
    }
}

impl SampleSource for SynthSplit {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<ClipSample, SimError> {
        if index >= self.count {
            return Err(SimError::OutOfRange { index, len: self.count });
        }
        synth_sample(&self.config, self.sample_seed(index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub frames: BlobEntry,
    pub flows: BlobEntry,
    pub annotations: Vec<FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub config: SimConfig,
    pub samples: Vec<SampleEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

fn encode_blob(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `source` as a dataset directory at `dir`.
pub fn write_dataset<S: SampleSource + ?Sized>(source: &S, config: &SimConfig, dir: &Path) -> Result<Manifest, SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut samples = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let s = source.get(i)?;
        let blob = |tag: &str, t: &Tensor| -> Result<BlobEntry, SimError> {
            let file = format!("{i:06}.{tag}.f64");
            let bytes = encode_blob(t);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok(BlobEntry { file, shape: t.shape().to_vec(), sha256: hex::encode(Sha256::digest(&bytes)) })
        };
        let frames = blob("frames", &s.frames)?;
        let flows = blob("flows", &s.flows)?;
        samples.push(SampleEntry { frames, flows, annotations: s.annotations });
    }
    let manifest = Manifest { version: DATASET_VERSION, count: samples.len(), config: config.clone(), samples };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SimError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Lazily loaded dataset directory. Blobs are verified on every read.
#[derive(Debug, Clone)]
pub struct DiskSplit {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl DiskSplit {
    pub fn open(dir: &Path) -> Result<Self, SimError> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(SimError::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| SimError::Manifest(e.to_string()))?;
        let found = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| SimError::Manifest("no version field".into()))?;
        if found != DATASET_VERSION as u64 {
            return Err(SimError::Version { found: found as u32, expected: DATASET_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| SimError::Manifest(e.to_string()))?;
        if manifest.count != manifest.samples.len() {
            return Err(SimError::Manifest(format!("count {} but {} entries", manifest.count, manifest.samples.len())));
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    fn read_blob(&self, sample: usize, entry: &BlobEntry) -> Result<Tensor, SimError> {
        let path = self.dir.join(&entry.file);
        if !path.is_file() {
            return Err(SimError::MissingFile(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let expected = entry.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(SimError::Truncated { file: path, expected, found: bytes.len() });
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(SimError::Checksum { sample, file: path });
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Tensor::new(entry.shape.clone(), data).map_err(|e| SimError::Manifest(e.to_string()))
    }
}

impl SampleSource for DiskSplit {
    fn len(&self) -> usize {
        self.manifest.count
    }

    fn get(&self, index: usize) -> Result<ClipSample, SimError> {
        let e = self.manifest.samples.get(index).ok_or(SimError::OutOfRange { index, len: self.manifest.count })?;
        Ok(ClipSample {
            frames: self.read_blob(index, &e.frames)?,
            flows: self.read_blob(index, &e.flows)?,
            annotations: e.annotations.clone(),
        })
    }
}

/// Reads every sample of a dataset directory into memory.
pub fn read_dataset(dir: &Path) -> Result<Vec<ClipSample>, SimError> {
    let d = DiskSplit::open(dir)?;
    (0..d.len()).map(|i| d.get(i)).collect()
}

/// Per-sample checksums keyed by blob file name.
pub fn checksums(manifest: &Manifest) -> BTreeMap<String, String> {
    manifest
        .samples
        .iter()
        .flat_map(|s| [(s.frames.file.clone(), s.frames.sha256.clone()), (s.flows.file.clone(), s.flows.sha256.clone())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig { resolution: (32, 32), clip_len: 5, size: (6, 10), objects: (3, 5), ..SimConfig::default() }
    }

    #[test]
    fn same_seed_same_sample() {
        let c = small();
        assert_eq!(synth_sample(&c, 4).unwrap(), synth_sample(&c, 4).unwrap());
        assert_ne!(synth_sample(&c, 4).unwrap(), synth_sample(&c, 5).unwrap());
    }

    #[test]
    fn fixed_policy_keeps_attention() {
        let s = synth_sample(&small(), 1).unwrap();
        assert!(s.annotations.windows(2).all(|p| p[0].attended == p[1].attended));
    }

    #[test]
    fn switch_once_changes_exactly_once() {
        let c = SimConfig { policy: AttentionPolicy::SwitchOnce, ..small() };
        for seed in 0..20 {
            let s = synth_sample(&c, seed).unwrap();
            let changes = s.annotations.windows(2).filter(|p| p[0].attended != p[1].attended).count();
            assert_eq!(changes, 1);
        }
    }

    #[test]
    fn flow_rule_arithmetic() {
        assert_eq!(flow_value(40.0), 1.0);
        assert_eq!(flow_value(10.0), 0.5);
        assert_eq!(flow_value(-25.0), -1.0);
    }

    fn track(positions: Vec<(i64, i64)>) -> ObjectTrack {
        ObjectTrack { class_id: 0, mask: Mask::new(Archetype::Square, 4), color: [1.0; 3], positions }
    }

    #[test]
    fn flow_of_static_and_fast_objects() {
        let (h, w) = (16, 64);
        let tr = vec![track(vec![(2, 2), (2, 2), (2, 2)])];
        let maps: Vec<_> = (0..3).map(|t| owners(&tr, &[0], t, h, w)).collect();
        assert!(synth_flow(&tr, &maps, h, w).data().iter().all(|v| *v == 0.0));

        for (step, want) in [(40, 1.0), (10, 0.5)] {
            let tr = vec![track(vec![(0, 2), (step, 2), (2 * step.min(25), 2)])];
            let maps: Vec<_> = (0..3).map(|t| owners(&tr, &[0], t, h, w)).collect();
            let f = synth_flow(&tr, &maps, h, w);
            let at = (2 * w + 1) * 2;
            assert_eq!(f.data()[at], want);
            // last frame repeats the previous flow
            let plane = h * w * 2;
            assert_eq!(&f.data()[2 * plane..], &f.data()[plane..2 * plane]);
        }
    }

    #[test]
    fn masks_are_tight_for_every_archetype() {
        for a in ARCHETYPES {
            for s in [6, 11, 16] {
                let m = Mask::new(a, s);
                let (x0, y0, x1, y1) = m.extents();
                assert!(x0 <= 1 && y0 <= 1 && x1 + 2 >= m.w && y1 + 2 >= m.h, "{a:?} {s}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        assert!(SimConfig { objects: (1, 3), ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { classes: 1, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { size: (10, 80), ..SimConfig::default() }.validate().is_err());
    }

    #[test]
    fn crowded_scene_fails_placement() {
        let c = SimConfig { resolution: (12, 12), size: (12, 12), objects: (9, 9), ..SimConfig::default() };
        assert!(matches!(synth_sample(&c, 0), Err(SimError::Placement { .. })));
    }
}
