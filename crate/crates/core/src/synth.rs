//! Synthetic moving-blob clips, the `.atmc` clip file format, and the
//! four-operation visualization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ClipBatch;
use crate::error::{Error, Result};
use crate::interact::{op_add, op_div_log, op_mul_local, op_sub, ArithOp, MulParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// 0 right, 1 left.
    #[default]
    Direction2,
    /// 0 right, 1 left, 2 down, 3 up.
    Direction4,
    /// 0 slow (half the velocity), 1 fast.
    Speed2,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Direction2 | Task::Speed2 => 2,
            Task::Direction4 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthClipSpec {
    pub task: Task,
    pub frames: usize,
    pub image_size: usize,
    /// Gaussian standard deviation of the blob, in pixels.
    pub radius: f64,
    /// Pixels per frame.
    pub velocity: f64,
    /// Per-pixel, per-frame Gaussian noise.
    pub noise: f64,
    pub label: usize,
    pub seed: u64,
}

impl Default for SynthClipSpec {
    fn default() -> Self {
        Self {
            task: Task::Direction2,
            frames: 8,
            image_size: 28,
            radius: 2.5,
            velocity: 2.0,
            noise: 0.05,
            label: 0,
            seed: 0,
        }
    }
}

/// A single-clip `[T, C, H, W]` float32 pixel array with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
    pub label: usize,
}

impl Clip {
    pub fn new(dims: [usize; 4], data: Vec<f32>, label: usize) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::Shape(format!("clip dims {dims:?} with {} values", data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange { index, value });
        }
        Ok(Self { dims, data, label })
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Same clip with the frame order reversed.
    pub fn reversed(&self) -> Clip {
        let data = (0..self.dims[0]).rev().flat_map(|t| self.frame(t).iter().copied()).collect();
        Clip { dims: self.dims, data, label: self.label }
    }
}

fn render_blob(size: usize, cx: f64, cy: f64, sigma: f64, out: &mut [f32]) {
    let k = 1.0 / (2.0 * sigma * sigma);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            out[y * size + x] = (-(dx * dx + dy * dy) * k).exp() as f32;
        }
    }
}

/// Renders one clip. The seed fixes start position and noise; the label only
/// picks the direction or speed. Reversed directions are exact frame reversals
/// of the forward clip with the same seed.
pub fn gen_clip(spec: &SynthClipSpec) -> Result<Clip> {
    let k = spec.task.num_classes();
    if spec.label >= k {
        return Err(Error::InvalidArgument(format!("label {} for a {k}-class task", spec.label)));
    }
    if spec.frames == 0 || spec.image_size == 0 || spec.radius <= 0.0 || spec.velocity < 0.0 || spec.noise < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid clip spec {spec:?}")));
    }
    let (t_len, size, r) = (spec.frames, spec.image_size, spec.radius);
    let speed = match (spec.task, spec.label) {
        (Task::Speed2, 0) => 0.5 * spec.velocity,
        _ => spec.velocity,
    };
    let path = speed * (t_len - 1) as f64;
    let room = size as f64 - 1.0 - 2.0 * r;
    if room < 0.0 || path > room {
        return Err(Error::OutOfBounds(format!("travel {path} px with radius {r} does not fit in {size} px")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let along0 = r + rng.gen::<f64>() * (room - path);
    let across = r + rng.gen::<f64>() * room;
    let flip = spec.task == Task::Speed2 && rng.gen::<bool>();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let vertical = spec.task == Task::Direction4 && spec.label >= 2;
    let n = size * size;
    let mut data = vec![0f32; t_len * n];
    for t in 0..t_len {
        let along = along0 + speed * t as f64;
        let along = if flip { size as f64 - 1.0 - along } else { along };
        let (cx, cy) = if vertical { (across, along) } else { (along, across) };
        let frame = &mut data[t * n..(t + 1) * n];
        render_blob(size, cx, cy, r, frame);
        if spec.noise > 0.0 {
            for v in frame.iter_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let clip = Clip::new([t_len, 1, size, size], data, spec.label)?;
    let backwards = matches!((spec.task, spec.label), (Task::Direction2 | Task::Direction4, 1 | 3));
    Ok(if backwards { clip.reversed() } else { clip })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Template for every clip; `label` and `seed` are overwritten.
    pub clip: SynthClipSpec,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { clip: SynthClipSpec::default(), train_size: 400, test_size: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Test seeds start this far above train seeds.
const TEST_SEED_OFFSET: u64 = 1 << 32;

/// A clip together with the seed that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub clip: Clip,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.clip.task.num_classes();
        for (name, n) in [("train_size", self.train_size), ("test_size", self.test_size)] {
            if n == 0 || n % k != 0 {
                return Err(Error::Config(format!("{name} {n} must be a positive multiple of {k} classes")));
            }
        }
        Ok(())
    }

    pub fn seeds(&self, split: Split) -> std::ops::Range<u64> {
        let k = self.clip.task.num_classes() as u64;
        let (base, n) = match split {
            Split::Train => (self.seed, self.train_size as u64),
            Split::Test => (self.seed + TEST_SEED_OFFSET, self.test_size as u64),
        };
        base..base + n / k
    }

    /// One clip per class for every seed of the split, classes interleaved.
    pub fn generate(&self, split: Split) -> Result<Vec<Sample>> {
        self.validate()?;
        let mut out = Vec::new();
        for seed in self.seeds(split) {
            for label in 0..self.clip.task.num_classes() {
                let clip = gen_clip(&SynthClipSpec { label, seed, ..self.clip.clone() })?;
                out.push(Sample { seed, clip });
            }
        }
        Ok(out)
    }
}

/// Stacks clips into a float64 batch.
pub fn to_batch(samples: &[&Clip]) -> Result<ClipBatch> {
    let Some(first) = samples.first() else { return Err(Error::EmptySplit) };
    let dims = first.dims;
    if let Some(bad) = samples.iter().find(|c| c.dims != dims) {
        return Err(Error::Shape(format!("clip dims {:?} vs {dims:?}", bad.dims)));
    }
    let data: Vec<f64> = samples.iter().flat_map(|c| c.data.iter().map(|&v| v as f64)).collect();
    let clips = Tensor::new(&[samples.len(), dims[0], dims[1], dims[2], dims[3]], data)?;
    ClipBatch::new(clips, samples.iter().map(|c| c.label).collect())
}

pub const CLIP_MAGIC: [u8; 4] = *b"ATMC";
pub const CLIP_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 * 4 + 4;

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.data.len());
    out.extend_from_slice(&CLIP_MAGIC);
    out.push(CLIP_VERSION);
    for d in clip.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(clip.label as u32).to_le_bytes());
    for v in &clip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode_clip(bytes: &[u8]) -> Result<Clip> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != CLIP_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    if bytes[4] != CLIP_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let raw = [u32_at(bytes, 5), u32_at(bytes, 9), u32_at(bytes, 13), u32_at(bytes, 17)];
    let label = u32_at(bytes, 21) as usize;
    let payload = raw
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(Error::DimOverflow(raw))?;
    if bytes.len() < payload {
        return Err(Error::Truncated { expected: payload, found: bytes.len() });
    }
    if bytes.len() > payload {
        return Err(Error::InvalidArgument(format!("{} trailing bytes after payload", bytes.len() - payload)));
    }
    let data =
        bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    Clip::new(raw.map(|d| d as usize), data, label)
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    Ok(fs::write(path, encode_clip(clip))?)
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    decode_clip(&fs::read(path)?)
}

/// `<root>/<split>/<label>/<seed>.atmc`
pub fn clip_path(root: &Path, split: Split, label: usize, seed: u64) -> PathBuf {
    root.join(split.name()).join(label.to_string()).join(format!("{seed}.atmc"))
}

pub fn write_split(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let path = clip_path(root, split, s.clip.label, s.seed);
        fs::create_dir_all(path.parent().expect("clip path has a parent"))?;
        write_clip(&path, &s.clip)?;
    }
    Ok(())
}

/// Reads every clip of a split, ordered by seed then label.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.name());
    let mut out = Vec::new();
    for label_dir in fs::read_dir(&dir)? {
        let label_dir = label_dir?.path();
        let Some(label) = label_dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        for entry in fs::read_dir(&label_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("atmc") {
                continue;
            }
            let seed =
                path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| {
                    Error::InvalidArgument(format!("clip file name {} is not a seed", path.display()))
                })?;
            let clip = read_clip(&path)?;
            if clip.label != label {
                return Err(Error::InvalidArgument(format!("{} holds label {}", path.display(), clip.label)));
            }
            out.push(Sample { seed, clip });
        }
    }
    out.sort_by_key(|s| (s.seed, s.clip.label));
    Ok(out)
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// Min-max normalizes `values` to 0..=255; a constant map becomes all zeros.
    pub fn normalized(width: usize, height: usize, values: &[f64]) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels =
            values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect();
        Self { width, height, pixels }
    }

    /// Binary P5 encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("not a P5 image: {why}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("short header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("magic or depth"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() != width * height {
            return Err(bad("pixel count"));
        }
        Ok(Self { width, height, pixels: body.to_vec() })
    }
}

/// Raw `[H, W]` maps of the four operations between two frames. The local
/// multiplication map is its centre offset.
pub fn op_maps(frame_a: &Tensor, frame_b: &Tensor, mul: &MulParams, eps: f64) -> Result<[(ArithOp, Tensor); 4]> {
    if frame_a.ndim() != 2 || frame_a.shape() != frame_b.shape() {
        return Err(Error::Shape(format!("frames {:?} and {:?}", frame_a.shape(), frame_b.shape())));
    }
    let (h, w) = (frame_a.shape()[0], frame_a.shape()[1]);
    let a = frame_a.reshape(&[1, 1, h, w])?;
    let b = frame_b.reshape(&[1, 1, h, w])?;
    let flat = |t: Tensor| t.reshape(&[h, w]);
    let centre = mul.offsets() / 2;
    Ok([
        (ArithOp::Add, flat(op_add(&a, &b)?)?),
        (ArithOp::Sub, flat(op_sub(&a, &b)?)?),
        (ArithOp::Mul, flat(op_mul_local(&a, &b, mul)?.narrow(1, centre, 1)?)?),
        (ArithOp::Div, flat(op_div_log(&a, &b, eps)?)?),
    ])
}

/// One normalized grayscale image per operation, in + − × ÷ order.
pub fn visualize_ops(frame_a: &Tensor, frame_b: &Tensor, mul: &MulParams, eps: f64) -> Result<Vec<(ArithOp, Pgm)>> {
    let (h, w) = (frame_a.shape()[0], frame_a.shape().get(1).copied().unwrap_or(1));
    Ok(op_maps(frame_a, frame_b, mul, eps)?.into_iter().map(|(op, m)| (op, Pgm::normalized(w, h, m.data()))).collect())
}
