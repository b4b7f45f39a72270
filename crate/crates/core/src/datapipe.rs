//! Dataset manifests, raw frame files, clip sampling and augmentation.
//!
//! A dataset is a JSON manifest plus one directory of frame files per video.
//! Each frame file is a `VF01` container:
//!
//! ```text
//! b"VF01" | height: u32 LE | width: u32 LE | height·width·3 bytes of RGB
//! ```
//!
//! Training clips draw, in this order and from a per-clip ChaCha8 stream:
//! the temporal start, the crop position, the crop scale and the flip.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const FRAME_MAGIC: [u8; 4] = *b"VF01";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub frame_count: usize,
    /// `(height, width)`
    pub frame_size: [usize; 2],
    pub label: usize,
    /// Frame directory, relative to the manifest unless absolute.
    pub uri: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub manifest_version: u32,
    pub class_names: Vec<String>,
    /// RGB mean in pixel units, computed from the training split.
    #[serde(default)]
    pub channel_mean: Option<[f64; 3]>,
    pub videos: Vec<VideoEntry>,
    pub splits: BTreeMap<String, Split>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, videos: Vec<VideoEntry>, splits: BTreeMap<String, Split>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            manifest_version: MANIFEST_VERSION,
            class_names,
            channel_mean: None,
            videos,
            splits,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest; relative URIs resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.manifest_version != MANIFEST_VERSION {
            return bad(format!("manifest_version {} is not supported (expected {MANIFEST_VERSION})", self.manifest_version));
        }
        if self.class_names.is_empty() {
            return bad("class_names is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return bad(format!("duplicate video id {:?}", v.id));
            }
            if v.frame_count == 0 {
                return bad(format!("video {:?} has no frames", v.id));
            }
            if v.frame_size[0] < 2 || v.frame_size[1] < 2 {
                return bad(format!("video {:?} frame size {:?} is below 2x2", v.id, v.frame_size));
            }
            if v.label >= self.class_names.len() {
                return bad(format!("video {:?} label {} does not index {} classes", v.id, v.label, self.class_names.len()));
            }
            if !self.splits.contains_key(&v.id) {
                return bad(format!("video {:?} is not assigned to a split", v.id));
            }
        }
        if let Some(id) = self.splits.keys().find(|id| !seen.contains(id.as_str())) {
            return bad(format!("split lists unknown video {id:?}"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Videos of one split, in manifest order.
    pub fn split_videos(&self, split: Split) -> Vec<&VideoEntry> {
        self.videos.iter().filter(|v| self.splits.get(&v.id) == Some(&split)).collect()
    }

    pub fn video_dir(&self, video: &VideoEntry) -> PathBuf {
        self.root.join(&video.uri)
    }

    pub fn frame_path(&self, video: &VideoEntry, index: usize) -> PathBuf {
        self.video_dir(video).join(frame_file_name(index))
    }

    pub fn require_channel_mean(&self) -> Result<[f64; 3]> {
        self.channel_mean
            .ok_or_else(|| Error::Manifest("channel_mean is missing; compute it from the training split first".into()))
    }

    pub fn read_frame(&self, video: &VideoEntry, index: usize) -> Result<Frame> {
        let path = self.frame_path(video, index);
        let frame = Frame::read(&path)?;
        if [frame.height, frame.width] != video.frame_size {
            return Err(Error::Frame {
                path,
                reason: format!("size {}x{} differs from manifest {:?}", frame.height, frame.width, video.frame_size),
            });
        }
        Ok(frame)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.vf")
}

/// An 8-bit RGB frame, interleaved `(row, column, channel)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!("{height}x{width} RGB frame needs {} bytes, got {}", height * width * 3, data.len())));
        }
        Ok(Frame { height, width, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Frame { path: path.to_path_buf(), reason };
        if bytes.len() < 12 {
            return Err(err(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != FRAME_MAGIC {
            return Err(err("missing VF01 magic".into()));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if height == 0 || width == 0 || body.len() != height * width * 3 {
            return Err(err(format!("{height}x{width} header with {} payload bytes", body.len())));
        }
        Ok(Frame { height, width, data: body.to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub const SCALES: [f64; 4] = [
    0.840_896_415_253_714_6, // 2^(-1/4)
    std::f64::consts::FRAC_1_SQRT_2,
    0.594_603_557_501_360_5, // 2^(-3/4)
    0.5,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub clip_len: usize,
    pub crop_scales: Vec<f64>,
    pub flip_probability: f64,
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { clip_len: 16, crop_scales: SCALES.to_vec(), flip_probability: 0.5, output_size: 112 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.output_size == 0 {
            return Err(Error::config("clip_len and output_size must be positive"));
        }
        if self.crop_scales.is_empty() || self.crop_scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::config(format!("crop scales must lie in (0, 1], got {:?}", self.crop_scales)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config(format!("flip probability {} is not in [0, 1]", self.flip_probability)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];
}

/// A square crop `[top, top + side) × [left, left + side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Square crop of side `round(scale · min(height, width))` at `position`.
pub fn crop_box(height: usize, width: usize, position: CropPosition, scale: f64) -> Result<CropBox> {
    let short = height.min(width);
    let side = (scale * short as f64).round();
    if !(side >= 1.0) || side as usize > short {
        return Err(Error::config(format!("scale {scale} gives crop side {side} on a {height}x{width} frame")));
    }
    let side = side as usize;
    let (dh, dw) = (height - side, width - side);
    let (top, left) = match position {
        CropPosition::TopLeft => (0, 0),
        CropPosition::TopRight => (0, dw),
        CropPosition::BottomLeft => (dh, 0),
        CropPosition::BottomRight => (dh, dw),
        CropPosition::Center => (dh / 2, dw / 2),
    };
    Ok(CropBox { top, left, side })
}

/// `len` indices from `start`, wrapping around `frame_count`.
pub fn loop_indices(start: usize, frame_count: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| (start + i) % frame_count).collect()
}

/// Uniform start in `[0, frame_count - clip_len]` (0 for short videos),
/// then looped indices.
pub fn sample_training_clip<R: Rng + ?Sized>(frame_count: usize, clip_len: usize, rng: &mut R) -> Vec<usize> {
    let last = frame_count.saturating_sub(clip_len);
    let start = rng.random_range(0..=last);
    loop_indices(start, frame_count, clip_len)
}

/// Non-overlapping windows from 0; the final partial one is loop-padded.
pub fn eval_clips(frame_count: usize, clip_len: usize) -> Vec<Vec<usize>> {
    (0..frame_count.div_ceil(clip_len)).map(|w| loop_indices(w * clip_len, frame_count, clip_len)).collect()
}

/// Bilinear resize of one plane with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
            let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Mirrors each row of a `h × w` plane in place.
pub fn flip_horizontal(plane: &mut [f32], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

/// Subtracts `mean[c]` from every value of channel `c` of a `(C, ...)` clip.
pub fn mean_subtract(clip: &mut [f32], mean: &[f64; 3]) {
    let per = clip.len() / 3;
    for (c, chunk) in clip.chunks_mut(per).enumerate() {
        let m = mean[c] as f32;
        chunk.iter_mut().for_each(|v| *v -= m);
    }
}

/// What was drawn for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipProvenance {
    pub video_id: String,
    pub start_frame: usize,
    pub crop: CropBox,
    pub position: CropPosition,
    pub scale: f64,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct ClipBatch {
    /// `(B, 3, clip_len, S, S)`, mean-subtracted.
    pub data: Tensor<f32>,
    pub labels: Vec<usize>,
    pub provenance: Vec<ClipProvenance>,
}

/// Independent stream for clip `index` of `epoch`.
pub fn clip_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"r3dclip\0");
    ChaCha8Rng::from_seed(key)
}

/// Turns selected frames into one `(3, T, S, S)` clip: crop, resize,
/// optional flip, mean subtraction.
pub fn frames_to_clip(frames: &[Frame], crop: CropBox, size: usize, flip: bool, mean: &[f64; 3]) -> Result<Vec<f32>> {
    let t = frames.len();
    let plane = size * size;
    let mut out = vec![0f32; 3 * t * plane];
    let mut src = vec![0f32; crop.side * crop.side];
    for (fi, f) in frames.iter().enumerate() {
        if crop.top + crop.side > f.height || crop.left + crop.side > f.width {
            return Err(Error::dim(format!("crop {crop:?} exceeds {}x{} frame", f.height, f.width)));
        }
        for c in 0..3 {
            for y in 0..crop.side {
                let row = ((crop.top + y) * f.width + crop.left) * 3 + c;
                for x in 0..crop.side {
                    src[y * crop.side + x] = f.data[row + 3 * x] as f32;
                }
            }
            let mut resized = resize_bilinear(&src, crop.side, crop.side, size, size);
            if flip {
                flip_horizontal(&mut resized, size);
            }
            let dst = &mut out[(c * t + fi) * plane..(c * t + fi + 1) * plane];
            dst.copy_from_slice(&resized);
        }
    }
    mean_subtract(&mut out, mean);
    Ok(out)
}

/// Reads frames and applies the training augmentation for one clip.
pub fn training_clip<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    video: &VideoEntry,
    cfg: &AugmentConfig,
    mean: &[f64; 3],
    rng: &mut R,
) -> Result<(Vec<f32>, ClipProvenance)> {
    let indices = sample_training_clip(video.frame_count, cfg.clip_len, rng);
    let position = CropPosition::ALL[rng.random_range(0..CropPosition::ALL.len())];
    let scale = cfg.crop_scales[rng.random_range(0..cfg.crop_scales.len())];
    let flipped = rng.random::<f64>() < cfg.flip_probability;
    let [h, w] = video.frame_size;
    let crop = crop_box(h, w, position, scale)?;
    let frames = read_indices(manifest, video, &indices)?;
    let data = frames_to_clip(&frames, crop, cfg.output_size, flipped, mean)?;
    let provenance = ClipProvenance { video_id: video.id.clone(), start_frame: indices[0], crop, position, scale, flipped };
    Ok((data, provenance))
}

fn read_indices(manifest: &DatasetManifest, video: &VideoEntry, indices: &[usize]) -> Result<Vec<Frame>> {
    let mut cache: BTreeMap<usize, Frame> = BTreeMap::new();
    indices
        .iter()
        .map(|&i| {
            if let Some(f) = cache.get(&i) {
                return Ok(f.clone());
            }
            let f = manifest.read_frame(video, i)?;
            cache.insert(i, f.clone());
            Ok(f)
        })
        .collect()
}

/// Deterministic evaluation clips for one video: centre crop at scale 1,
/// no flip, one clip per window of [`eval_clips`].
pub fn evaluation_clips(manifest: &DatasetManifest, video: &VideoEntry, cfg: &AugmentConfig, mean: &[f64; 3]) -> Result<Tensor<f32>> {
    let [h, w] = video.frame_size;
    let crop = crop_box(h, w, CropPosition::Center, 1.0)?;
    let frames: Vec<Frame> = (0..video.frame_count).map(|i| manifest.read_frame(video, i)).collect::<Result<_>>()?;
    let windows = eval_clips(video.frame_count, cfg.clip_len);
    let mut data = Vec::new();
    for win in &windows {
        let sel: Vec<Frame> = win.iter().map(|&i| frames[i].clone()).collect();
        data.extend(frames_to_clip(&sel, crop, cfg.output_size, false, mean)?);
    }
    Tensor::new(vec![windows.len(), 3, cfg.clip_len, cfg.output_size, cfg.output_size], data)
}

/// One augmented clip per `(video, clip index)` pair, prepared in parallel.
/// Clip `k` of the batch draws from `clip_rng(seed, epoch, first_index + k)`.
pub fn training_batch(
    manifest: &DatasetManifest,
    videos: &[&VideoEntry],
    cfg: &AugmentConfig,
    mean: &[f64; 3],
    seed: u64,
    epoch: u64,
    first_index: u64,
) -> Result<ClipBatch> {
    if videos.is_empty() {
        return Err(Error::EmptySplit("empty batch".into()));
    }
    let clips: Vec<(Vec<f32>, ClipProvenance)> = videos
        .par_iter()
        .enumerate()
        .map(|(k, v)| training_clip(manifest, v, cfg, mean, &mut clip_rng(seed, epoch, first_index + k as u64)))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(clips.len() * clips[0].0.len());
    let mut provenance = Vec::with_capacity(clips.len());
    for (d, p) in clips {
        data.extend(d);
        provenance.push(p);
    }
    let s = cfg.output_size;
    Ok(ClipBatch {
        data: Tensor::new(vec![videos.len(), 3, cfg.clip_len, s, s], data)?,
        labels: videos.iter().map(|v| v.label).collect(),
        provenance,
    })
}

/// Per-channel mean over every pixel of every frame in `split`.
pub fn compute_channel_mean(manifest: &DatasetManifest, split: Split) -> Result<[f64; 3]> {
    let videos = manifest.split_videos(split);
    if videos.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?} split has no videos")));
    }
    let per_video: Vec<([u64; 3], u64)> = videos
        .par_iter()
        .map(|v| {
            let mut sums = [0u64; 3];
            let mut pixels = 0u64;
            for i in 0..v.frame_count {
                let f = manifest.read_frame(v, i)?;
                for px in f.data.chunks_exact(3) {
                    for c in 0..3 {
                        sums[c] += px[c] as u64;
                    }
                }
                pixels += (f.height * f.width) as u64;
            }
            Ok((sums, pixels))
        })
        .collect::<Result<_>>()?;
    let mut sums = [0u64; 3];
    let mut pixels = 0;
    for (s, p) in per_video {
        for c in 0..3 {
            sums[c] += s[c];
        }
        pixels += p;
    }
    Ok(sums.map(|s| s as f64 / pixels as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    /// `(height, width)`
    pub frame_size: [usize; 2],
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_noise() -> f64 {
    12.0
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, videos_per_class: usize, frames_per_video: usize, frame_size: [usize; 2], seed: u64) -> Self {
        SyntheticConfig {
            num_classes,
            videos_per_class,
            frames_per_video,
            frame_size,
            seed,
            train_fraction: default_train_fraction(),
            noise_std: default_noise(),
        }
    }
}

/// Temporal frequency (cycles per frame) of class `c` of `n`.
pub fn class_frequency(c: usize, n: usize) -> f64 {
    0.4 * c as f64 / n.max(2).saturating_sub(1) as f64
}

/// One synthetic video: a drifting colour grating plus a global brightness
/// pulse, both at the class's temporal frequency. Orientation, spatial
/// frequency, phases, contrast, tint and pixel noise vary per video.
const PULSE_AMPLITUDE: f64 = 30.0;

struct GratingVideo {
    freq_t: f64,
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
    pulse_phase: f64,
    tint: [f64; 3],
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl GratingVideo {
    fn new(class: usize, num_classes: usize, noise_std: f64, mut rng: ChaCha8Rng) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let k = rng.random_range(0.08..0.12);
        GratingVideo {
            freq_t: class_frequency(class, num_classes),
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.random_range(0.0..1.0),
            amplitude: rng.random_range(55.0..75.0),
            pulse_phase: rng.random_range(0.0..1.0),
            tint: [rng.random_range(0.9..1.0), rng.random_range(0.9..1.0), rng.random_range(0.9..1.0)],
            noise: Normal::new(0.0, noise_std.max(0.0)).expect("finite noise"),
            rng,
        }
    }

    fn frame(&mut self, t: usize, h: usize, w: usize) -> Frame {
        let pulse = PULSE_AMPLITUDE * (std::f64::consts::TAU * (self.freq_t * t as f64 + self.pulse_phase)).sin();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let arg = self.kx * x as f64 + self.ky * y as f64 - self.freq_t * t as f64 + self.phase;
                let s = (std::f64::consts::TAU * arg).sin();
                for c in 0..3 {
                    let v = 128.0 + self.amplitude * self.tint[c] * s + pulse + self.noise.sample(&mut self.rng);
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Frame { height: h, width: w, data }
    }
}

/// Writes a synthetic dataset under `out_dir` (frames in `videos/<id>/`,
/// manifest in `manifest.json`, channel mean filled from the train split).
pub fn generate_synthetic_dataset(out_dir: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let [h, w] = cfg.frame_size;
    if cfg.num_classes < 2 || cfg.videos_per_class == 0 || cfg.frames_per_video == 0 || h < 2 || w < 2 {
        return Err(Error::config(format!("synthetic dataset needs >= 2 classes and positive counts, got {cfg:?}")));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::config(format!("train_fraction must lie in (0, 1), got {}", cfg.train_fraction)));
    }
    let n_train = ((cfg.train_fraction * cfg.videos_per_class as f64).round() as usize).clamp(1, cfg.videos_per_class);
    let mut videos = Vec::new();
    let mut splits = BTreeMap::new();
    for c in 0..cfg.num_classes {
        for v in 0..cfg.videos_per_class {
            let id = format!("c{c:02}_v{v:03}");
            let split = if v < n_train { Split::Train } else { Split::Test };
            splits.insert(id.clone(), split);
            videos.push(VideoEntry {
                uri: format!("videos/{id}"),
                id,
                frame_count: cfg.frames_per_video,
                frame_size: [h, w],
                label: c,
            });
        }
    }
    let class_names = (0..cfg.num_classes).map(|c| format!("subject_{c:02}")).collect();
    let mut manifest = DatasetManifest::new(class_names, videos, splits, out_dir)?;

    manifest.videos.par_iter().enumerate().try_for_each(|(i, v)| -> Result<()> {
        let dir = manifest.video_dir(v);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut video = GratingVideo::new(v.label, cfg.num_classes, cfg.noise_std, clip_rng(cfg.seed, u64::MAX, i as u64));
        for t in 0..v.frame_count {
            video.frame(t, h, w).write(&dir.join(frame_file_name(t)))?;
        }
        Ok(())
    })?;
    manifest.channel_mean = Some(compute_channel_mean(&manifest, Split::Train)?);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
