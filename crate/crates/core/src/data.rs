//! Data pipeline: image-sequence ingest, BD degradation (Gaussian blur plus
//! 4x subsampling), training-patch extraction and deterministic synthetic
//! clip generation.
//!
//! Dataset layout on disk: `<root>/<clip_id>/<frame_index:08d>.png`, 8-bit
//! RGB. The synthetic writer adds a `manifest.json` next to the clip
//! directories. Pixels are `f32` in `[0,1]` everywhere in memory; 8-bit
//! quantization happens only at file I/O and inside the metrics.

use crate::error::{Error, Result};
use ndarray::{s, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

pub const SCALE: usize = 4;

/// An ordered clip of same-sized RGB frames with pixel values in `[0,1]`.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Array3<f32>>,
    pub clip_id: String,
    pub frame_rate: Option<f32>,
}

impl FrameSequence {
    /// Build a sequence, enforcing the shared-shape and value-range
    /// invariants.
    pub fn new(frames: Vec<Array3<f32>>, clip_id: impl Into<String>) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.is_empty() {
            return Err(Error::EmptyDataset(format!("clip '{clip_id}' has no frames")));
        }
        let d0 = frames[0].dim();
        if d0.0 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "clip '{clip_id}': expected 3 channels, got {}",
                d0.0
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != d0 {
                return Err(Error::ShapeMismatch(format!(
                    "clip '{clip_id}': frame {i} is {:?}, frame 0 is {:?}",
                    f.dim(),
                    d0
                )));
            }
            for &v in f.iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvariantViolation(format!(
                        "clip '{clip_id}': frame {i} pixel {v} outside [0,1]"
                    )));
                }
            }
        }
        Ok(FrameSequence {
            frames,
            clip_id,
            frame_rate: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width) shared by every frame.
    pub fn dims(&self) -> (usize, usize) {
        let d = self.frames[0].dim();
        (d.1, d.2)
    }
}

/// One training example: an LR patch clip and its 4x HR counterpart.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub lr_patch_seq: FrameSequence,
    pub hr_patch_seq: FrameSequence,
    pub clip_id: String,
    /// Crop origin (row, col) in LR coordinates.
    pub origin: (usize, usize),
}

/// BD degradation parameters: isotropic Gaussian blur then strided
/// subsampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub scale: usize,
    pub blur_sigma: f64,
    pub kernel_size: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            scale: SCALE,
            blur_sigma: 1.6,
            kernel_size: 13,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale != SCALE {
            return Err(Error::InvalidArgument(format!(
                "degradation scale must be {SCALE}, got {}",
                self.scale
            )));
        }
        // Kernel must be odd and wide enough to hold ~4 sigma of support.
        let min_k = {
            let m = (4.0 * self.blur_sigma + 1.0).ceil() as usize;
            if m % 2 == 0 {
                m + 1
            } else {
                m
            }
        };
        if self.kernel_size % 2 == 0 || self.kernel_size < min_k {
            return Err(Error::InvalidArgument(format!(
                "kernel_size {} must be odd and >= {min_k} for sigma {}",
                self.kernel_size, self.blur_sigma
            )));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps (the 2-D kernel is separable).
    pub fn taps(&self) -> Vec<f32> {
        let k = self.kernel_size;
        let c = (k / 2) as f64;
        let s2 = 2.0 * self.blur_sigma * self.blur_sigma;
        let raw: Vec<f64> = (0..k)
            .map(|i| (-((i as f64 - c) * (i as f64 - c)) / s2).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / sum) as f32).collect()
    }
}

// ------------------------------------------------------------------ ingest

/// Numeric-aware filename comparison: digit runs compare by value, other
/// runs lexicographically, so `2.png` sorts before `10.png`.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (ab, bb) = (a.as_bytes(), b.as_bytes());
    let (mut i, mut j) = (0, 0);
    while i < ab.len() && j < bb.len() {
        if ab[i].is_ascii_digit() && bb[j].is_ascii_digit() {
            let i0 = i;
            let j0 = j;
            while i < ab.len() && ab[i].is_ascii_digit() {
                i += 1;
            }
            while j < bb.len() && bb[j].is_ascii_digit() {
                j += 1;
            }
            let da = a[i0..i].trim_start_matches('0');
            let db = b[j0..j].trim_start_matches('0');
            let ord = da.len().cmp(&db.len()).then_with(|| da.cmp(db));
            if ord != Ordering::Equal {
                return ord;
            }
        } else {
            let ord = ab[i].cmp(&bb[j]);
            if ord != Ordering::Equal {
                return ord;
            }
            i += 1;
            j += 1;
        }
    }
    (ab.len() - i).cmp(&(bb.len() - j))
}

fn decode_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Quantize a `[0,1]` frame to 8-bit and write it as an RGB PNG.
pub fn save_frame(frame: &Array3<f32>, path: &Path) -> Result<()> {
    let (ch, h, w) = frame.dim();
    if ch != 3 {
        return Err(Error::ShapeMismatch(format!(
            "save_frame: expected 3 channels, got {ch}"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(frame[[0, y, x]]),
                quantize(frame[[1, y, x]]),
                quantize(frame[[2, y, x]]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Round-to-nearest 8-bit quantization of a `[0,1]` value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load the frames of one clip directory, natural-sorted by filename.
pub fn load_sequence(directory: &Path, pattern: &str) -> Result<FrameSequence> {
    let names = list_frames(directory, pattern)?;
    let mut frames = Vec::with_capacity(names.len());
    for name in &names {
        frames.push(decode_frame(&directory.join(name))?);
    }
    let clip_id = directory
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".to_string());
    FrameSequence::new(frames, clip_id)
}

/// Natural-sorted frame filenames of one clip directory; the order matches
/// [`load_sequence`].
pub fn list_frames(directory: &Path, pattern: &str) -> Result<Vec<String>> {
    if !directory.is_dir() {
        return Err(Error::NotFound(format!(
            "sequence directory {}",
            directory.display()
        )));
    }
    let matcher = glob::Pattern::new(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad filename pattern '{pattern}': {e}")))?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(directory)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if matcher.matches(&name) {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no files matching '{pattern}' in {}",
            directory.display()
        )));
    }
    names.sort_by(|a, b| natural_cmp(a, b));
    Ok(names)
}

// ------------------------------------------------------------- degradation

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (reflect-101: `-1 -> 1`, `n -> n-2`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of one plane with reflect-101 borders.
fn blur_plane(src: &[f32], h: usize, w: usize, taps: &[f32]) -> Vec<f32> {
    let r = taps.len() / 2;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..][..w];
        for x in 0..w {
            let mut acc = 0f32;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * row[reflect(x as isize + t as isize - r as isize, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + t as isize - r as isize, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Blur + subsample one frame without the final range clamp. This is the
/// linear path the linearity property is stated on.
pub fn bd_degrade_frame_linear(
    frame: &Array3<f32>,
    spec: &DegradationSpec,
) -> Result<Array3<f32>> {
    spec.validate()?;
    let (ch, h, w) = frame.dim();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::ShapeMismatch(format!(
            "bd_degrade: dims {h}x{w} not divisible by {}",
            spec.scale
        )));
    }
    let taps = spec.taps();
    let (hl, wl) = (h / spec.scale, w / spec.scale);
    let mut out = Array3::<f32>::zeros((ch, hl, wl));
    let fs = frame.as_slice().unwrap();
    for cc in 0..ch {
        let blurred = blur_plane(&fs[cc * h * w..][..h * w], h, w, &taps);
        // Subsample every scale-th pixel starting at index 0.
        for y in 0..hl {
            for x in 0..wl {
                out[[cc, y, x]] = blurred[(y * spec.scale) * w + x * spec.scale];
            }
        }
    }
    Ok(out)
}

/// BD degradation of a whole clip: Gaussian blur, then 4x subsampling from
/// index 0. Output values are clamped back into `[0,1]` (the positive
/// unit-sum kernel only leaves the range by float rounding).
pub fn bd_degrade(hr: &FrameSequence, spec: &DegradationSpec) -> Result<FrameSequence> {
    let mut frames = Vec::with_capacity(hr.len());
    for f in &hr.frames {
        let mut lr = bd_degrade_frame_linear(f, spec)?;
        lr.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(lr);
    }
    let mut out = FrameSequence::new(frames, hr.clip_id.clone())?;
    out.frame_rate = hr.frame_rate;
    Ok(out)
}

// ------------------------------------------------------------------ crops

/// Draw a training patch pair. The generator is `ChaCha8` seeded with
/// `rng_seed`; draws happen in the documented order: temporal start, then
/// row, then column, each via `random_range` on the inclusive valid range.
pub fn sample_patch(
    hr: &FrameSequence,
    lr: &FrameSequence,
    patch: usize,
    n_frames: usize,
    rng_seed: u64,
) -> Result<TrainingSample> {
    let (hh, hw) = hr.dims();
    let (lh, lw) = lr.dims();
    if hh != SCALE * lh || hw != SCALE * lw {
        return Err(Error::ShapeMismatch(format!(
            "sample_patch: hr {hh}x{hw} is not {SCALE}x the lr {lh}x{lw}"
        )));
    }
    if hr.len() != lr.len() {
        return Err(Error::ShapeMismatch(format!(
            "sample_patch: hr has {} frames, lr {}",
            hr.len(),
            lr.len()
        )));
    }
    if patch == 0 || patch > lh || patch > lw {
        return Err(Error::ShapeMismatch(format!(
            "sample_patch: patch {patch} exceeds lr dims {lh}x{lw}"
        )));
    }
    if n_frames == 0 || n_frames > lr.len() {
        return Err(Error::ShapeMismatch(format!(
            "sample_patch: n_frames {n_frames} exceeds clip length {}",
            lr.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let t0 = rng.random_range(0..=lr.len() - n_frames);
    let row = rng.random_range(0..=lh - patch);
    let col = rng.random_range(0..=lw - patch);
    let mut lr_frames = Vec::with_capacity(n_frames);
    let mut hr_frames = Vec::with_capacity(n_frames);
    for f in t0..t0 + n_frames {
        lr_frames.push(
            lr.frames[f]
                .slice(s![.., row..row + patch, col..col + patch])
                .to_owned(),
        );
        let (hr0, hc0) = (SCALE * row, SCALE * col);
        hr_frames.push(
            hr.frames[f]
                .slice(s![.., hr0..hr0 + SCALE * patch, hc0..hc0 + SCALE * patch])
                .to_owned(),
        );
    }
    Ok(TrainingSample {
        lr_patch_seq: FrameSequence::new(lr_frames, lr.clip_id.clone())?,
        hr_patch_seq: FrameSequence::new(hr_frames, hr.clip_id.clone())?,
        clip_id: lr.clip_id.clone(),
        origin: (row, col),
    })
}

// -------------------------------------------------------------- synthetic

/// Derive an independent stream seed from a base seed and an index
/// (splitmix64 finalizer).
pub(crate) fn mix_seed(base: u64, k: u64) -> u64 {
    let mut z = base ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Textured base image: smoothed noise plus random rectangles plus a
/// sinusoidal grating, clamped to `[0,1]`. High-frequency content is
/// deliberate so that super-resolution can beat bicubic interpolation.
fn synthetic_base(rng: &mut ChaCha8Rng, size: usize) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, size, size));
    // Smoothed noise bed per channel.
    let smooth = DegradationSpec {
        scale: SCALE,
        blur_sigma: 1.0,
        kernel_size: 9,
    };
    let taps = smooth.taps();
    for cc in 0..3 {
        let noise: Vec<f32> = (0..size * size).map(|_| rng.random::<f32>()).collect();
        let blurred = blur_plane(&noise, size, size, &taps);
        for y in 0..size {
            for x in 0..size {
                img[[cc, y, x]] = 0.25 + 0.5 * blurred[y * size + x];
            }
        }
    }
    // Hard-edged rectangles carry broadband detail.
    let n_rects = 6 + rng.random_range(0..4);
    for _ in 0..n_rects {
        let rh = rng.random_range(size / 8..=size / 3);
        let rw = rng.random_range(size / 8..=size / 3);
        let y0 = rng.random_range(0..size - rh);
        let x0 = rng.random_range(0..size - rw);
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for cc in 0..3 {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    img[[cc, y, x]] = 0.7 * color[cc] + 0.3 * img[[cc, y, x]];
                }
            }
        }
    }
    // One diagonal grating per clip, frequency below LR Nyquist so it stays
    // recoverable after the BD blur.
    let fx = rng.random_range(0.04..0.10);
    let fy = rng.random_range(0.04..0.10);
    let phase = rng.random::<f32>() * std::f32::consts::TAU;
    for cc in 0..3 {
        let amp = 0.10 + 0.08 * rng.random::<f32>();
        for y in 0..size {
            for x in 0..size {
                let v = (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + phase).sin();
                img[[cc, y, x]] += amp * v;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Horizontal circular shift of a frame by `shift` pixels (content moves
/// right).
fn shift_frame(frame: &Array3<f32>, shift: usize) -> Array3<f32> {
    let (ch, h, w) = frame.dim();
    let s = shift % w;
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for cc in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out[[cc, y, x]] = frame[[cc, y, (x + w - s) % w]];
            }
        }
    }
    out
}

/// Generate `n_clips` synthetic (HR, LR) clip pairs. Each clip is a
/// textured base image translating horizontally by `motion` HR pixels per
/// frame as a circular shift; LR clips come from [`bd_degrade`]. Fully
/// reproducible from `rng_seed`.
pub fn make_synthetic_dataset(
    n_clips: usize,
    n_frames: usize,
    hr_size: usize,
    motion: usize,
    rng_seed: u64,
) -> Result<Vec<(FrameSequence, FrameSequence)>> {
    if hr_size % SCALE != 0 {
        return Err(Error::ShapeMismatch(format!(
            "make_synthetic_dataset: hr_size {hr_size} not divisible by {SCALE}"
        )));
    }
    if n_clips == 0 || n_frames == 0 {
        return Err(Error::InvalidArgument(
            "make_synthetic_dataset: n_clips and n_frames must be positive".into(),
        ));
    }
    if hr_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "make_synthetic_dataset: hr_size {hr_size} too small (minimum 16)"
        )));
    }
    let spec = DegradationSpec::default();
    let mut out = Vec::with_capacity(n_clips);
    for clip in 0..n_clips {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, clip as u64));
        let base = synthetic_base(&mut rng, hr_size);
        let frames: Vec<Array3<f32>> = (0..n_frames)
            .map(|f| shift_frame(&base, f * motion))
            .collect();
        let hr = FrameSequence::new(frames, format!("clip{clip:03}"))?;
        let lr = bd_degrade(&hr, &spec)?;
        out.push((hr, lr));
    }
    Ok(out)
}

// ---------------------------------------------------------------- on disk

/// `manifest.json` written next to the synthetic clip directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub motion: usize,
    pub hr_size: usize,
    pub n_frames: usize,
    pub clips: Vec<String>,
    pub degradation: DegradationSpec,
}

/// Write a synthetic dataset: HR frames under
/// `<root>/<clip_id>/<frame_index:08d>.png` plus `manifest.json`. LR clips
/// are not stored; they are re-derived with [`bd_degrade`] at load time.
pub fn write_synthetic_dataset(
    root: &Path,
    n_clips: usize,
    n_frames: usize,
    hr_size: usize,
    motion: usize,
    rng_seed: u64,
) -> Result<DatasetManifest> {
    let clips = make_synthetic_dataset(n_clips, n_frames, hr_size, motion, rng_seed)?;
    fs::create_dir_all(root)?;
    let mut ids = Vec::with_capacity(clips.len());
    for (hr, _) in &clips {
        let dir = root.join(&hr.clip_id);
        fs::create_dir_all(&dir)?;
        for (i, frame) in hr.frames.iter().enumerate() {
            save_frame(frame, &dir.join(format!("{i:08}.png")))?;
        }
        ids.push(hr.clip_id.clone());
    }
    let manifest = DatasetManifest {
        seed: rng_seed,
        motion,
        hr_size,
        n_frames,
        clips: ids,
        degradation: DegradationSpec::default(),
    };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// A dataset root holding HR clips; LR degrades on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub clip_dirs: Vec<PathBuf>,
    pub degradation: DegradationSpec,
}

impl Dataset {
    /// Open a dataset root: every subdirectory containing PNGs is one clip.
    /// If a `manifest.json` is present its degradation spec is honored.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::NotFound(format!(
                "dataset root {}",
                root.display()
            )));
        }
        let degradation = match fs::read(root.join("manifest.json")) {
            Ok(bytes) => {
                let m: DatasetManifest = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::InvalidDataset(format!("bad manifest.json: {e}")))?;
                m.degradation
            }
            Err(_) => DegradationSpec::default(),
        };
        let mut clip_dirs: Vec<PathBuf> = Vec::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                clip_dirs.push(entry.path());
            }
        }
        clip_dirs.sort_by(|a, b| {
            natural_cmp(
                &a.file_name().unwrap_or_default().to_string_lossy(),
                &b.file_name().unwrap_or_default().to_string_lossy(),
            )
        });
        if clip_dirs.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no clip directories under {}",
                root.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            clip_dirs,
            degradation,
        })
    }

    pub fn n_clips(&self) -> usize {
        self.clip_dirs.len()
    }

    /// Load one clip as an (HR, LR) pair.
    pub fn load_pair(&self, idx: usize) -> Result<(FrameSequence, FrameSequence)> {
        let dir = self.clip_dirs.get(idx).ok_or_else(|| {
            Error::InvalidArgument(format!("clip index {idx} out of {}", self.n_clips()))
        })?;
        let hr = load_sequence(dir, "*.png")?;
        let lr = bd_degrade(&hr, &self.degradation)?;
        Ok((hr, lr))
    }
}
