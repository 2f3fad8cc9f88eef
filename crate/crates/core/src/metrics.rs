//! Losses and evaluation metrics: Charbonnier (elementwise mean), the
//! auxiliary-loss composition, PSNR/SSIM on 8-bit quantized values, BT.601
//! luma extraction, and the bicubic upsampling baseline.

use crate::data::{quantize, FrameSequence};
use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

/// Loss composition knobs. `aux_weight` is the lambda applied to the
/// auxiliary term.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct LossConfig {
    pub charbonnier_eps: f64,
    pub aux_weight: f64,
    pub aux_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            charbonnier_eps: 1e-12,
            aux_weight: 1.0,
            aux_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "charbonnier_eps must be > 0, got {}",
                self.charbonnier_eps
            )));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "aux_weight must be >= 0, got {}",
                self.aux_weight
            )));
        }
        Ok(())
    }
}

/// Mean over all elements of `sqrt(d^2 + eps)` with `d = pred - gt`,
/// accumulated in `f64`.
pub fn charbonnier(pred: &Array4<f32>, gt: &Array4<f32>, eps: f64) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "charbonnier: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "charbonnier eps must be > 0, got {eps}"
        )));
    }
    let mut acc = 0f64;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let d = (*p - *g) as f64;
        acc += (d * d + eps).sqrt();
    }
    Ok(acc / pred.len() as f64)
}

fn frame_as_batch(f: &Array3<f32>) -> Array4<f32> {
    f.clone().insert_axis(ndarray::Axis(0))
}

/// Mean over frames of the per-frame Charbonnier loss.
pub fn aux_loss(aux_frames: &FrameSequence, gt: &FrameSequence, eps: f64) -> Result<f64> {
    if aux_frames.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "aux_loss: {} aux frames vs {} gt frames",
            aux_frames.len(),
            gt.len()
        )));
    }
    let mut acc = 0f64;
    for (a, g) in aux_frames.frames.iter().zip(gt.frames.iter()) {
        acc += charbonnier(&frame_as_batch(a), &frame_as_batch(g), eps)?;
    }
    Ok(acc / aux_frames.len() as f64)
}

/// Total loss with per-term breakdown for logging.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossComponents {
    pub main: f64,
    pub aux: Option<f64>,
    pub total: f64,
}

/// Compose main + lambda * aux. With aux disabled or lambda = 0 the total
/// bit-equals the main term.
pub fn total_loss(
    sr: &FrameSequence,
    aux: Option<&FrameSequence>,
    gt: &FrameSequence,
    cfg: &LossConfig,
) -> Result<LossComponents> {
    cfg.validate()?;
    let mut main = 0f64;
    if sr.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "total_loss: {} sr frames vs {} gt frames",
            sr.len(),
            gt.len()
        )));
    }
    for (s, g) in sr.frames.iter().zip(gt.frames.iter()) {
        main += charbonnier(&frame_as_batch(s), &frame_as_batch(g), cfg.charbonnier_eps)?;
    }
    main /= sr.len() as f64;
    if !cfg.aux_enabled {
        return Ok(LossComponents {
            main,
            aux: None,
            total: main,
        });
    }
    let aux_frames = aux.ok_or_else(|| {
        Error::InvalidState("total_loss: aux loss enabled but no aux frames present".into())
    })?;
    let a = aux_loss(aux_frames, gt, cfg.charbonnier_eps)?;
    let total = if cfg.aux_weight == 0.0 {
        main
    } else {
        main + cfg.aux_weight * a
    };
    Ok(LossComponents {
        main,
        aux: Some(a),
        total,
    })
}

// ----------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum ChannelMode {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "Y")]
    Y,
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelMode::Rgb => write!(f, "RGB"),
            ChannelMode::Y => write!(f, "Y"),
        }
    }
}

/// ITU-R BT.601 luma: `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`,
/// computed in `f64`, output single-channel in `[0,1]`.
pub fn rgb_to_y(frame: &Array3<f32>) -> Result<Array3<f32>> {
    let (ch, h, w) = frame.dim();
    if ch != 3 {
        return Err(Error::ShapeMismatch(format!(
            "rgb_to_y: expected 3 channels, got {ch}"
        )));
    }
    let mut out = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = frame[[0, y, x]] as f64;
            let g = frame[[1, y, x]] as f64;
            let b = frame[[2, y, x]] as f64;
            out[[0, y, x]] = ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0) as f32;
        }
    }
    Ok(out)
}

/// Crop `n` pixels from every spatial border.
pub fn crop_border(frame: &Array3<f32>, n: usize) -> Result<Array3<f32>> {
    let (_, h, w) = frame.dim();
    if 2 * n >= h || 2 * n >= w {
        return Err(Error::ShapeMismatch(format!(
            "crop_border: crop {n} leaves nothing of a {h}x{w} frame"
        )));
    }
    Ok(frame
        .slice(ndarray::s![.., n..h - n, n..w - n])
        .to_owned())
}

/// Mode conversion followed by 8-bit quantization; returns planes of
/// values in `0..=255` as `f64` for the metric arithmetic.
fn metric_planes(frame: &Array3<f32>, mode: ChannelMode) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let converted = match mode {
        ChannelMode::Rgb => frame.clone(),
        ChannelMode::Y => rgb_to_y(frame)?,
    };
    let (ch, h, w) = converted.dim();
    let mut planes = Vec::with_capacity(ch);
    for cc in 0..ch {
        let mut p = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                p.push(quantize(converted[[cc, y, x]]) as f64);
            }
        }
        planes.push(p);
    }
    Ok((planes, h, w))
}

/// PSNR in dB on the 8-bit scale, or the infinity sentinel for identical
/// quantized inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsnrValue {
    Finite(f64),
    Infinite,
}

impl PsnrValue {
    pub fn as_finite(&self) -> Option<f64> {
        match self {
            PsnrValue::Finite(v) => Some(*v),
            PsnrValue::Infinite => None,
        }
    }
}

impl std::fmt::Display for PsnrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsnrValue::Finite(v) => write!(f, "{v:.6}"),
            PsnrValue::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for PsnrValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PsnrValue::Finite(v) => s.serialize_f64(*v),
            PsnrValue::Infinite => s.serialize_str("inf"),
        }
    }
}

/// `10 log10(255^2 / MSE)` after quantization (and Y conversion in Y mode).
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>, mode: ChannelMode) -> Result<PsnrValue> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (pa, _, _) = metric_planes(a, mode)?;
    let (pb, _, _) = metric_planes(b, mode)?;
    let mut se = 0f64;
    let mut n = 0usize;
    for (qa, qb) in pa.iter().zip(pb.iter()) {
        for (x, y) in qa.iter().zip(qb.iter()) {
            let d = x - y;
            se += d * d;
            n += 1;
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PsnrValue::Infinite);
    }
    Ok(PsnrValue::Finite(10.0 * (255.0 * 255.0 / mse).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0f64; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in t.iter_mut() {
        *v /= sum;
    }
    t
}

/// Horizontal-then-vertical valid-mode weighted sums of a plane; output is
/// `(h-10) x (w-10)`.
fn valid_gauss(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * plane[y * w + x + t];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * tmp[(y + t) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// L=255, valid-only window positions, mean over positions and channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>, mode: ChannelMode) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (pa, h, w) = metric_planes(a, mode)?;
    let (pb, _, _) = metric_planes(b, mode)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = ssim_taps();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0f64;
    let mut count = 0usize;
    for (qa, qb) in pa.iter().zip(pb.iter()) {
        let n = qa.len();
        let mut a2 = vec![0f64; n];
        let mut b2 = vec![0f64; n];
        let mut ab = vec![0f64; n];
        for i in 0..n {
            a2[i] = qa[i] * qa[i];
            b2[i] = qb[i] * qb[i];
            ab[i] = qa[i] * qb[i];
        }
        let mu_a = valid_gauss(qa, h, w, &taps);
        let mu_b = valid_gauss(qb, h, w, &taps);
        let e_a2 = valid_gauss(&a2, h, w, &taps);
        let e_b2 = valid_gauss(&b2, h, w, &taps);
        let e_ab = valid_gauss(&ab, h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_a2[i] - ma * ma;
            let vb = e_b2[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let v = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += v;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------- reports

/// Per-clip metric row.
#[derive(Debug, Clone, Serialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub n_frames: usize,
    pub psnr_db: PsnrValue,
    pub ssim: f64,
}

/// Evaluation report: per-clip rows plus means. Infinite PSNR rows are
/// excluded from the mean and counted in `n_psnr_excluded`.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub channel_mode: ChannelMode,
    pub rows: Vec<ClipMetrics>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    pub n_psnr_excluded: usize,
}

impl MetricReport {
    pub fn from_rows(channel_mode: ChannelMode, rows: Vec<ClipMetrics>) -> Self {
        let mut psum = 0f64;
        let mut pn = 0usize;
        let mut ssum = 0f64;
        for r in &rows {
            if let Some(v) = r.psnr_db.as_finite() {
                psum += v;
                pn += 1;
            }
            ssum += r.ssim;
        }
        let n_psnr_excluded = rows.len() - pn;
        MetricReport {
            channel_mode,
            mean_psnr_db: if pn > 0 { Some(psum / pn as f64) } else { None },
            mean_ssim: if rows.is_empty() {
                0.0
            } else {
                ssum / rows.len() as f64
            },
            n_psnr_excluded,
            rows,
        }
    }

    /// Tab-separated table: header, one row per clip, and a mean row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("clip_id\tn_frames\tpsnr_db\tssim\tchannel_mode\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\n",
                r.clip_id, r.n_frames, r.psnr_db, r.ssim, self.channel_mode
            ));
        }
        let total_frames: usize = self.rows.iter().map(|r| r.n_frames).sum();
        let mean_psnr = match self.mean_psnr_db {
            Some(v) => format!("{v:.6}"),
            None => "inf".to_string(),
        };
        s.push_str(&format!(
            "mean\t{}\t{}\t{:.6}\t{}\n",
            total_frames, mean_psnr, self.mean_ssim, self.channel_mode
        ));
        s
    }
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MetricReport", 5)?;
        st.serialize_field("channel_mode", &self.channel_mode)?;
        st.serialize_field("rows", &self.rows)?;
        match self.mean_psnr_db {
            Some(v) => st.serialize_field("mean_psnr_db", &v)?,
            None => st.serialize_field("mean_psnr_db", "inf")?,
        }
        st.serialize_field("mean_ssim", &self.mean_ssim)?;
        st.serialize_field("n_psnr_excluded", &self.n_psnr_excluded)?;
        st.end()
    }
}

// --------------------------------------------------------------- baseline

/// Catmull-Rom style cubic kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-axis 4-tap cubic table with half-pixel centers and edge clamping.
fn cubic_axis(len: usize, f: usize) -> Vec<([usize; 4], [f64; 4])> {
    let mut table = Vec::with_capacity(len * f);
    for o in 0..len * f {
        let u = (o as f64 + 0.5) / f as f64 - 0.5;
        let i0 = u.floor() as isize;
        let frac = u - i0 as f64;
        let mut idx = [0usize; 4];
        let mut wgt = [0f64; 4];
        for t in 0..4 {
            let i = i0 - 1 + t as isize;
            idx[t] = i.clamp(0, len as isize - 1) as usize;
            wgt[t] = cubic(frac - (t as f64 - 1.0));
        }
        // Taps of a = -0.5 cubic sum to 1 analytically; normalize away
        // rounding so constant images stay constant.
        let sum: f64 = wgt.iter().sum();
        for w in wgt.iter_mut() {
            *w /= sum;
        }
        table.push((idx, wgt));
    }
    table
}

/// Bicubic (a = -0.5) 4x upsampling of one frame, the evaluation baseline.
/// Output is clamped to `[0,1]`.
pub fn bicubic_x4(frame: &Array3<f32>) -> Array3<f32> {
    let (ch, h, w) = frame.dim();
    let f = crate::data::SCALE;
    let tx = cubic_axis(w, f);
    let ty = cubic_axis(h, f);
    let (hf, wf) = (h * f, w * f);
    let mut out = Array3::<f32>::zeros((ch, hf, wf));
    let mut tmp = vec![0f64; h * wf];
    for cc in 0..ch {
        for y in 0..h {
            for (xo, (idx, wgt)) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += wgt[t] * frame[[cc, y, idx[t]]] as f64;
                }
                tmp[y * wf + xo] = acc;
            }
        }
        for (yo, (idx, wgt)) in ty.iter().enumerate() {
            for xo in 0..wf {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += wgt[t] * tmp[idx[t] * wf + xo];
                }
                out[[cc, yo, xo]] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    out
}
