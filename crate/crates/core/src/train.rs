//! Seeded training loop: cosine-annealed dual learning rates with a flow
//! freeze window, bias-corrected Adam, global-norm gradient clipping,
//! checksummed checkpoints, per-clip evaluation, and the four-variant
//! ablation driver.
//!
//! Every batch is a pure function of (seed, iteration), so resuming from a
//! checkpoint is bit-equivalent to uninterrupted training.

use crate::data::{mix_seed, sample_patch, FrameSequence};
use crate::error::{Error, Result};
use crate::metrics::{
    bicubic_x4, crop_border, psnr, ssim, ChannelMode, ClipMetrics, LossConfig, MetricReport,
    PsnrValue,
};
use crate::model::{forward_session, model_stats, Model, ModelConfig};
use crate::params::{check_finite, ParamGroup, ParamStore, Session};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 10.0;
const CKPT_MAGIC: &[u8; 8] = b"MSVSRCKP";
pub const CKPT_VERSION: u32 = 1;

/// Optimization schedule and sampling geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_main_init: f64,
    pub lr_flow_init: f64,
    pub lr_final: f64,
    pub flow_freeze_iters: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub n_frames: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: a proportional shrink of the full schedule
    /// that trains in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            total_iters: 2000,
            lr_main_init: 2e-4,
            lr_flow_init: 2e-5,
            lr_final: 2e-7,
            flow_freeze_iters: 100,
            batch_size: 2,
            patch_size: 32,
            n_frames: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            seed: 0,
            loss: LossConfig::default(),
        }
    }

    /// Full-scale schedule.
    pub fn paper() -> Self {
        TrainConfig {
            total_iters: 300_000,
            flow_freeze_iters: 2500,
            batch_size: 16,
            patch_size: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flow_freeze_iters > self.total_iters {
            return Err(Error::ConfigError(format!(
                "flow_freeze_iters {} exceeds total_iters {}",
                self.flow_freeze_iters, self.total_iters
            )));
        }
        for (name, v) in [
            ("lr_main_init", self.lr_main_init),
            ("lr_flow_init", self.lr_flow_init),
            ("lr_final", self.lr_final),
        ] {
            if !(v > 0.0) {
                return Err(Error::ConfigError(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.lr_final > self.lr_main_init {
            return Err(Error::ConfigError(format!(
                "lr_final {} exceeds lr_main_init {}",
                self.lr_final, self.lr_main_init
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("n_frames", self.n_frames),
        ] {
            if v == 0 {
                return Err(Error::ConfigError(format!("{name} must be >= 1")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigError(format!("{name} must be in [0,1), got {b}")));
            }
        }
        self.loss.validate()
    }
}

/// Cosine-annealed learning rate at iteration `iter`. The flow group reads
/// zero inside the freeze window. Endpoints are exact by construction.
pub fn lr_at(iter: usize, cfg: &TrainConfig, which: ParamGroup) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iter {iter} outside [0, {}]",
            cfg.total_iters
        )));
    }
    if which == ParamGroup::Flow && iter < cfg.flow_freeze_iters {
        return Ok(0.0);
    }
    let init = match which {
        ParamGroup::Main => cfg.lr_main_init,
        ParamGroup::Flow => cfg.lr_flow_init,
    };
    if iter == 0 || cfg.total_iters == 0 {
        return Ok(init);
    }
    if iter == cfg.total_iters {
        return Ok(cfg.lr_final);
    }
    let frac = iter as f64 / cfg.total_iters as f64;
    Ok(cfg.lr_final + (init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// First and second Adam moments, one pair per parameter in registration
/// order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Array4<f32>>,
    pub v: Vec<Array4<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Array4<f32>> = store
            .ids()
            .map(|id| Array4::zeros(store.value(id).dim()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Scale all gradients so their global L2 norm is at most
/// [`GRAD_CLIP_NORM`]; returns the pre-clip norm.
fn clip_gradients(grads: &mut [Array4<f32>]) -> f64 {
    let mut sq = 0f64;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > GRAD_CLIP_NORM {
        let s = (GRAD_CLIP_NORM / norm) as f32;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One bias-corrected Adam update over both parameter groups.
fn adam_step(
    store: &mut ParamStore<f32>,
    adam: &mut AdamState,
    grads: &[Array4<f32>],
    lr_main: f64,
    lr_flow: f64,
    cfg: &TrainConfig,
) {
    adam.step += 1;
    let t = adam.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let lr = match store.group(id) {
            ParamGroup::Main => lr_main,
            ParamGroup::Flow => lr_flow,
        };
        let g = &grads[i];
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
            let gf = g as f64;
            *m = (b1 * (*m as f64) + (1.0 - b1) * gf) as f32;
            *v = (b2 * (*v as f64) + (1.0 - b2) * gf * gf) as f32;
        });
        if lr != 0.0 {
            let w = store.value_mut(id);
            ndarray::Zip::from(w)
                .and(&adam.m[i])
                .and(&adam.v[i])
                .for_each(|w, &m, &v| {
                    let mhat = (m as f64) / c1;
                    let vhat = (v as f64) / c2;
                    *w = ((*w as f64) - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
                });
        }
    }
}

/// Full training state at one iteration boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: usize,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// Weight tensors in registration order.
    pub weights: Vec<Array4<f32>>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_model(
        iteration: usize,
        model: &Model<f32>,
        train_cfg: &TrainConfig,
        adam: &AdamState,
    ) -> Self {
        Checkpoint {
            iteration,
            model_cfg: model.cfg.clone(),
            train_cfg: train_cfg.clone(),
            weights: model.store.ids().map(|id| model.store.value(id).clone()).collect(),
            adam: adam.clone(),
        }
    }

    /// Rebuild the model and load the stored weights into it.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model_cfg.clone(), self.train_cfg.seed)?;
        if model.store.len() != self.weights.len() {
            return Err(Error::VersionError(format!(
                "checkpoint has {} tensors, model expects {}",
                self.weights.len(),
                model.store.len()
            )));
        }
        for (id, w) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&self.weights) {
            if model.store.value(id).dim() != w.dim() {
                return Err(Error::VersionError(format!(
                    "checkpoint tensor shape {:?} does not match {:?}",
                    w.dim(),
                    model.store.value(id).dim()
                )));
            }
            model.store.value_mut(id).assign(w);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    iteration: usize,
    adam_step: usize,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: Vec<ParamMeta>,
}

fn push_arrays(buf: &mut Vec<u8>, arrays: &[Array4<f32>]) {
    for a in arrays {
        for &v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize: magic, version, JSON header, weight/m/v payloads (little
/// endian f32), and a trailing SHA-256 over everything before it.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let (store, _) = crate::model::register_model::<f32>(&ckpt.model_cfg, ckpt.train_cfg.seed)?;
    let params: Vec<ParamMeta> = store
        .ids()
        .map(|id| {
            let d = store.value(id).dim();
            ParamMeta {
                name: store.name(id).to_string(),
                shape: [d.0, d.1, d.2, d.3],
            }
        })
        .collect();
    let header = CkptHeader {
        iteration: ckpt.iteration,
        adam_step: ckpt.adam.step,
        model_cfg: ckpt.model_cfg.clone(),
        train_cfg: ckpt.train_cfg.clone(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header_bytes.len() + 64);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    push_arrays(&mut buf, &ckpt.weights);
    push_arrays(&mut buf, &ckpt.adam.m);
    push_arrays(&mut buf, &ckpt.adam.v);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_arrays(
    payload: &[u8],
    offset: &mut usize,
    metas: &[ParamMeta],
) -> Result<Vec<Array4<f32>>> {
    let mut out = Vec::with_capacity(metas.len());
    for meta in metas {
        let n: usize = meta.shape.iter().product();
        let bytes = n * 4;
        let end = *offset + bytes;
        if end > payload.len() {
            return Err(Error::VersionError(format!(
                "payload too short for tensor {}",
                meta.name
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for chunk in payload[*offset..end].chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        *offset = end;
        let [a, b, c, d] = meta.shape;
        out.push(
            Array4::from_shape_vec((a, b, c, d), vals)
                .map_err(|e| Error::VersionError(format!("bad tensor shape: {e}")))?,
        );
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < CKPT_MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::ChecksumMismatch(format!(
            "{}: file too short",
            path.display()
        )));
    }
    let (body, stored_sum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_sum {
        return Err(Error::ChecksumMismatch(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    if &body[..8] != CKPT_MAGIC {
        return Err(Error::ChecksumMismatch(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::VersionError(format!(
            "checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > body.len() {
        return Err(Error::ChecksumMismatch(format!(
            "{}: header extends past file end",
            path.display()
        )));
    }
    let header: CkptHeader = serde_json::from_slice(&body[20..20 + hlen])?;
    header.model_cfg.validate()?;
    header.train_cfg.validate()?;

    let (store, _) =
        crate::model::register_model::<f32>(&header.model_cfg, header.train_cfg.seed)?;
    if store.len() != header.params.len() {
        return Err(Error::VersionError(format!(
            "checkpoint lists {} tensors, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (id, meta) in store.ids().zip(&header.params) {
        let d = store.value(id).dim();
        if store.name(id) != meta.name || [d.0, d.1, d.2, d.3] != meta.shape {
            return Err(Error::VersionError(format!(
                "parameter layout mismatch at {}",
                meta.name
            )));
        }
    }

    let payload = &body[20 + hlen..];
    let mut offset = 0usize;
    let weights = read_arrays(payload, &mut offset, &header.params)?;
    let m = read_arrays(payload, &mut offset, &header.params)?;
    let v = read_arrays(payload, &mut offset, &header.params)?;
    if offset != payload.len() {
        return Err(Error::VersionError(format!(
            "{} unexpected trailing bytes in payload",
            payload.len() - offset
        )));
    }
    Ok(Checkpoint {
        iteration: header.iteration,
        model_cfg: header.model_cfg,
        train_cfg: header.train_cfg,
        weights,
        adam: AdamState {
            step: header.adam_step,
            m,
            v,
        },
    })
}

/// One loss-history row; `loss_aux` is absent when the auxiliary loss is
/// off.
#[derive(Debug, Clone, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr_main: f64,
    pub lr_flow: f64,
    pub loss_main: f64,
    pub loss_aux: Option<f64>,
    pub loss_total: f64,
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iter,lr_main,lr_flow,loss_main,loss_aux,loss_total\n");
    for r in rows {
        let aux = r.loss_aux.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.lr_main, r.lr_flow, r.loss_main, aux, r.loss_total
        ));
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Periodic checkpoint interval in iterations; 0 writes only the final
    /// checkpoint.
    pub checkpoint_interval: usize,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

fn stack_frames(frames: &[&FrameSequence], t: usize) -> Array4<f32> {
    let (h, w) = frames[0].dims();
    let mut out = Array4::zeros((frames.len(), 3, h, w));
    for (b, seq) in frames.iter().enumerate() {
        out.slice_mut(ndarray::s![b, .., .., ..])
            .assign(&seq.frames[t]);
    }
    out
}

/// Train a model on in-memory (HR, LR) clip pairs. Fully deterministic
/// given (configs, data); resuming reproduces uninterrupted runs bit for
/// bit.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    clips: &[(FrameSequence, FrameSequence)],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::EmptyDataset("no training clips".into()));
    }
    let div = model_cfg.flow.divisor();
    if train_cfg.patch_size % div != 0 {
        return Err(Error::ConfigError(format!(
            "patch_size {} not divisible by flow pyramid divisor {div}",
            train_cfg.patch_size
        )));
    }

    let (mut model, mut adam, start_iter) = match &opts.resume {
        Some(ckpt) => {
            if ckpt.model_cfg != *model_cfg || ckpt.train_cfg != *train_cfg {
                return Err(Error::ConfigError(
                    "resume checkpoint was produced by a different configuration".into(),
                ));
            }
            (ckpt.to_model()?, ckpt.adam.clone(), ckpt.iteration)
        }
        None => {
            let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
            let adam = AdamState::new(&model.store);
            (model, adam, 0)
        }
    };

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }

    let bsz = train_cfg.batch_size;
    let nf = train_cfg.n_frames;
    let eps = train_cfg.loss.charbonnier_eps;
    let aux_on = model_cfg.use_aux_loss
        && train_cfg.loss.aux_enabled
        && train_cfg.loss.aux_weight > 0.0;
    let mut history = Vec::with_capacity(train_cfg.total_iters.saturating_sub(start_iter));

    for iter in start_iter..train_cfg.total_iters {
        let lr_main = lr_at(iter, train_cfg, ParamGroup::Main)?;
        let lr_flow = lr_at(iter, train_cfg, ParamGroup::Flow)?;

        // Batch sampling is derived from (seed, iter) alone.
        let mut samples = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let s = mix_seed(
                train_cfg.seed ^ 0x5452_4149,
                (iter * bsz + b) as u64,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let clip_idx = rng.random_range(0..clips.len());
            let patch_seed = rng.random::<u64>();
            let (hr, lr) = &clips[clip_idx];
            samples.push(sample_patch(hr, lr, train_cfg.patch_size, nf, patch_seed)?);
        }
        let lr_seqs: Vec<&FrameSequence> = samples.iter().map(|s| &s.lr_patch_seq).collect();
        let hr_seqs: Vec<&FrameSequence> = samples.iter().map(|s| &s.hr_patch_seq).collect();

        let mut sess = Session::bind(&model.store, true);
        let lr_vars: Vec<_> = (0..nf)
            .map(|t| sess.tape.input(stack_frames(&lr_seqs, t)))
            .collect();
        // A non-finite weight first surfaces as an offset/mask guard trip
        // inside alignment; during training that is divergence.
        let out = forward_session(&mut sess, &model.cfg, &model.ids, &lr_vars).map_err(|e| {
            match e {
                Error::InvariantViolation(m) => Error::NumericalDivergence(format!(
                    "non-finite activations at iteration {iter}: {m}"
                )),
                other => other,
            }
        })?;

        let mut main_acc = None;
        for t in 0..nf {
            let hr_var = sess.tape.input(stack_frames(&hr_seqs, t));
            let c = sess.tape.charbonnier(out.sr[t], hr_var, eps)?;
            main_acc = Some(match main_acc {
                Some(acc) => sess.tape.add(acc, c)?,
                None => c,
            });
        }
        let main = sess.tape.scale(main_acc.unwrap(), 1.0 / nf as f64);

        let (total, aux_val) = if aux_on {
            let aux_frames = out.aux.as_ref().expect("aux head present");
            let mut aux_acc = None;
            for t in 0..nf {
                let hr_var = sess.tape.input(stack_frames(&hr_seqs, t));
                let c = sess.tape.charbonnier(aux_frames[t], hr_var, eps)?;
                aux_acc = Some(match aux_acc {
                    Some(acc) => sess.tape.add(acc, c)?,
                    None => c,
                });
            }
            let aux = sess.tape.scale(aux_acc.unwrap(), 1.0 / nf as f64);
            let weighted = sess.tape.scale(aux, train_cfg.loss.aux_weight);
            let total = sess.tape.add(main, weighted)?;
            let aux_v = sess.tape.value(aux)[[0, 0, 0, 0]] as f64;
            (total, Some(aux_v))
        } else {
            (main, None)
        };

        let loss_main = sess.tape.value(main)[[0, 0, 0, 0]] as f64;
        let loss_total = sess.tape.value(total)[[0, 0, 0, 0]] as f64;
        if !loss_total.is_finite() || !loss_main.is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "loss became non-finite at iteration {iter}"
            )));
        }

        sess.tape.backward(total);
        let mut grads = sess.param_grads();
        drop(sess);
        check_finite(&grads)?;
        clip_gradients(&mut grads);
        adam_step(&mut model.store, &mut adam, &grads, lr_main, lr_flow, train_cfg);

        history.push(HistoryRow {
            iter,
            lr_main,
            lr_flow,
            loss_main,
            loss_aux: aux_val,
            loss_total,
        });

        if opts.checkpoint_interval > 0 && (iter + 1) % opts.checkpoint_interval == 0 {
            if let Some(dir) = &opts.out_dir {
                let ckpt = Checkpoint::from_model(iter + 1, &model, train_cfg, &adam);
                save_checkpoint(&ckpt, &dir.join(format!("ckpt_{:07}.bin", iter + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint::from_model(train_cfg.total_iters, &model, train_cfg, &adam);
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&checkpoint, &dir.join("ckpt_final.bin"))?;
        fs::write(dir.join("train_log.csv"), history_to_csv(&history))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

/// Per-clip PSNR/SSIM: frame metrics averaged over the clip. A clip whose
/// every frame is identical to the reference reports the infinite PSNR
/// sentinel; otherwise infinite frames are excluded from the mean.
pub fn clip_metrics(
    sr: &FrameSequence,
    hr: &FrameSequence,
    mode: ChannelMode,
    crop: usize,
) -> Result<ClipMetrics> {
    if sr.len() != hr.len() {
        return Err(Error::ShapeMismatch(format!(
            "clip '{}': {} SR frames vs {} HR frames",
            hr.clip_id,
            sr.len(),
            hr.len()
        )));
    }
    let mut psum = 0f64;
    let mut pn = 0usize;
    let mut ssum = 0f64;
    for (s, h) in sr.frames.iter().zip(&hr.frames) {
        let sc = crop_border(s, crop)?;
        let hc = crop_border(h, crop)?;
        match psnr(&sc, &hc, mode)? {
            PsnrValue::Finite(v) => {
                psum += v;
                pn += 1;
            }
            PsnrValue::Infinite => {}
        }
        ssum += ssim(&sc, &hc, mode)?;
    }
    Ok(ClipMetrics {
        clip_id: hr.clip_id.clone(),
        n_frames: sr.len(),
        psnr_db: if pn > 0 {
            PsnrValue::Finite(psum / pn as f64)
        } else {
            PsnrValue::Infinite
        },
        ssim: ssum / sr.len() as f64,
    })
}

/// Model metrics next to the bicubic x4 baseline on the same clips.
pub struct EvalOutput {
    pub model: MetricReport,
    pub bicubic: MetricReport,
}

fn eval_one(
    model: &Model<f32>,
    hr: &FrameSequence,
    lr: &FrameSequence,
    mode: ChannelMode,
    crop: usize,
) -> Result<(ClipMetrics, ClipMetrics)> {
    let out = model.forward(lr)?;
    let row = clip_metrics(&out.sr_frames, hr, mode, crop)?;
    let mut bic = FrameSequence::new(
        lr.frames.iter().map(bicubic_x4).collect(),
        hr.clip_id.clone(),
    )?;
    bic.frame_rate = hr.frame_rate;
    let base = clip_metrics(&bic, hr, mode, crop)?;
    Ok((row, base))
}

/// Evaluate a model over (HR, LR) clip pairs. `workers > 1` runs clips in
/// parallel; results are order-stable either way.
pub fn evaluate(
    model: &Model<f32>,
    pairs: &[(FrameSequence, FrameSequence)],
    mode: ChannelMode,
    crop: usize,
    workers: usize,
) -> Result<EvalOutput> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no evaluation clips".into()));
    }
    let rows: Vec<(ClipMetrics, ClipMetrics)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            pairs
                .par_iter()
                .map(|(hr, lr)| eval_one(model, hr, lr, mode, crop))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        pairs
            .iter()
            .map(|(hr, lr)| eval_one(model, hr, lr, mode, crop))
            .collect::<Result<Vec<_>>>()?
    };
    let (model_rows, bicubic_rows): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(EvalOutput {
        model: MetricReport::from_rows(mode, model_rows),
        bicubic: MetricReport::from_rows(mode, bicubic_rows),
    })
}

/// One ablation table row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_ram: bool,
    pub use_lfm: bool,
    pub use_aux: bool,
    pub param_count: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

/// The four ablation variants in canonical order.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 4] = [
    ("A", false, false, false),
    ("B", true, false, false),
    ("C", true, true, false),
    ("full", true, true, true),
];

/// Train and evaluate the selected variants with identical seed and data.
/// `selected` is a subset of {A, B, C, full}; empty selects all four.
pub fn ablate(
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    clips: &[(FrameSequence, FrameSequence)],
    selected: &[String],
    mode: ChannelMode,
) -> Result<Vec<AblationRow>> {
    for name in selected {
        if !ABLATION_VARIANTS.iter().any(|(v, ..)| v == name) {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation variant '{name}' (expected A, B, C, full)"
            )));
        }
    }
    let mut rows = Vec::new();
    for (name, ram, lfm, aux) in ABLATION_VARIANTS {
        if !selected.is_empty() && !selected.iter().any(|s| s == name) {
            continue;
        }
        let mut cfg = base_cfg.clone();
        cfg.use_ram = ram;
        cfg.use_lfm = lfm;
        cfg.use_aux_loss = aux;
        let stats = model_stats(&cfg)?;
        let outcome = train(&cfg, train_cfg, clips, &TrainOptions::default())?;
        let model = outcome.checkpoint.to_model()?;
        let eval = evaluate(&model, clips, mode, 0, 1)?;
        let initial = outcome.history.first().map(|r| r.loss_total);
        let fin = outcome.history.last().map(|r| r.loss_total);
        rows.push(AblationRow {
            variant: name.to_string(),
            use_ram: ram,
            use_lfm: lfm,
            use_aux: aux,
            param_count: stats.param_count,
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss: fin.unwrap_or(f64::NAN),
            psnr_db: eval.model.mean_psnr_db,
            ssim: eval.model.mean_ssim,
        });
    }
    Ok(rows)
}

/// Render the ablation table as TSV.
pub fn ablation_to_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant\tram\tlfm\taux\tparams\tinitial_loss\tfinal_loss\tpsnr_db\tssim\n",
    );
    for r in rows {
        let p = r
            .psnr_db
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "inf".into());
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}\n",
            r.variant, r.use_ram, r.use_lfm, r.use_aux, r.param_count, r.initial_loss,
            r.final_loss, p, r.ssim
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use ndarray::{Array3, Axis};

    fn desk_tiny() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::tiny();
        let mut tc = TrainConfig::desk();
        tc.total_iters = 4;
        tc.flow_freeze_iters = 2;
        tc.batch_size = 1;
        tc.patch_size = 8;
        tc.n_frames = 2;
        tc.seed = 7;
        (model, tc)
    }

    fn data() -> Vec<(FrameSequence, FrameSequence)> {
        make_synthetic_dataset(2, 3, 32, 1, 99).unwrap()
    }

    #[test]
    fn lr_schedule_matches_paper_contract() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg, ParamGroup::Main).unwrap(), 2e-4);
        assert_eq!(lr_at(300_000, &cfg, ParamGroup::Main).unwrap(), 2e-7);
        let mid = lr_at(150_000, &cfg, ParamGroup::Main).unwrap();
        let want = 2e-7 + (2e-4 - 2e-7) / 2.0;
        assert!((mid - want).abs() < 1e-18, "{mid} vs {want}");
        assert_eq!(lr_at(2499, &cfg, ParamGroup::Flow).unwrap(), 0.0);
        let thaw = lr_at(2500, &cfg, ParamGroup::Flow).unwrap();
        let frac = 2500.0 / 300_000.0;
        let expect =
            2e-7 + (2e-5 - 2e-7) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        assert_eq!(thaw, expect);
        assert!(matches!(
            lr_at(300_001, &cfg, ParamGroup::Main).unwrap_err(),
            Error::InvalidArgument(_)
        ));
        let mut prev = f64::INFINITY;
        for t in (0..=300_000).step_by(300) {
            let v = lr_at(t, &cfg, ParamGroup::Main).unwrap();
            assert!(v <= prev + 1e-18, "non-increasing violated at {t}");
            prev = v;
        }
    }

    #[test]
    fn zero_iters_returns_initialization() {
        let (mc, mut tc) = desk_tiny();
        tc.total_iters = 0;
        tc.flow_freeze_iters = 0;
        let clips = data();
        let out = train(&mc, &tc, &clips, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.iteration, 0);
        assert!(out.history.is_empty());
        let fresh = Model::<f32>::new(mc, tc.seed).unwrap();
        for (id, w) in fresh.store.ids().zip(&out.checkpoint.weights) {
            assert_eq!(fresh.store.value(id), w);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (mc, tc) = desk_tiny();
        let clips = data();
        let a = train(&mc, &tc, &clips, &TrainOptions::default()).unwrap();
        let b = train(&mc, &tc, &clips, &TrainOptions::default()).unwrap();
        assert_eq!(a.history.len(), 4);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
        }
        for (wa, wb) in a.checkpoint.weights.iter().zip(&b.checkpoint.weights) {
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn flow_weights_frozen_then_released() {
        let (mc, mut tc) = desk_tiny();
        tc.total_iters = 2;
        tc.flow_freeze_iters = 2;
        let clips = data();
        let out = train(&mc, &tc, &clips, &TrainOptions::default()).unwrap();
        let fresh = Model::<f32>::new(mc.clone(), tc.seed).unwrap();
        let mut main_moved = false;
        for (id, w) in fresh.store.ids().zip(&out.checkpoint.weights) {
            match fresh.store.group(id) {
                ParamGroup::Flow => assert_eq!(
                    fresh.store.value(id),
                    w,
                    "frozen flow weight moved: {}",
                    fresh.store.name(id)
                ),
                ParamGroup::Main => {
                    if fresh.store.value(id) != w {
                        main_moved = true;
                    }
                }
            }
        }
        assert!(main_moved, "main weights should have moved");

        // With the freeze ended, flow weights move too.
        let mut tc2 = tc.clone();
        tc2.total_iters = 3;
        tc2.flow_freeze_iters = 0;
        let out2 = train(&mc, &tc2, &clips, &TrainOptions::default()).unwrap();
        let mut flow_moved = false;
        for (id, w) in fresh.store.ids().zip(&out2.checkpoint.weights) {
            if fresh.store.group(id) == ParamGroup::Flow && fresh.store.value(id) != w {
                flow_moved = true;
            }
        }
        assert!(flow_moved, "flow weights should move after the freeze");
    }

    #[test]
    fn checkpoint_roundtrip_resume_and_corruption() {
        let (mc, tc) = desk_tiny();
        let clips = data();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            checkpoint_interval: 2,
            resume: None,
        };
        let full = train(&mc, &tc, &clips, &opts).unwrap();

        let mid_path = dir.path().join("ckpt_0000002.bin");
        let mid = load_checkpoint(&mid_path).unwrap();
        assert_eq!(mid.iteration, 2);

        // Round trip is lossless.
        let reload = load_checkpoint(&dir.path().join("ckpt_final.bin")).unwrap();
        for (a, b) in reload.weights.iter().zip(&full.checkpoint.weights) {
            assert_eq!(a, b);
        }
        assert_eq!(reload.adam.step, full.checkpoint.adam.step);

        // Resume from the midpoint reproduces the uninterrupted run.
        let resumed = train(
            &mc,
            &tc,
            &clips,
            &TrainOptions {
                resume: Some(mid),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.history.len(), 2);
        for (r, f) in resumed.history.iter().zip(&full.history[2..]) {
            assert_eq!(r.loss_total.to_bits(), f.loss_total.to_bits());
        }
        for (a, b) in resumed
            .checkpoint
            .weights
            .iter()
            .zip(&full.checkpoint.weights)
        {
            assert_eq!(a, b);
        }

        // Truncation breaks the checksum; version skew is its own error.
        let bytes = fs::read(&mid_path).unwrap();
        fs::write(&mid_path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&mid_path).unwrap_err(),
            Error::ChecksumMismatch(_)
        ));
        let mut skewed = bytes.clone();
        skewed[8] = 0xFF;
        let body_len = skewed.len() - 32;
        let digest = Sha256::digest(&skewed[..body_len]);
        skewed[body_len..].copy_from_slice(&digest);
        fs::write(&mid_path, &skewed).unwrap();
        assert!(matches!(
            load_checkpoint(&mid_path).unwrap_err(),
            Error::VersionError(_)
        ));
    }

    #[test]
    fn nan_weights_abort_with_divergence() {
        let (mc, tc) = desk_tiny();
        let clips = data();
        let model = Model::<f32>::new(mc.clone(), tc.seed).unwrap();
        let mut ckpt = Checkpoint::from_model(0, &model, &tc, &AdamState::new(&model.store));
        ckpt.weights[0][[0, 0, 0, 0]] = f32::NAN;
        let err = train(
            &mc,
            &tc,
            &clips,
            &TrainOptions {
                resume: Some(ckpt),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalDivergence(_)));
    }

    #[test]
    fn clip_metrics_ground_truth_sentinel() {
        let clips = data();
        let hr = &clips[0].0;
        let row = clip_metrics(hr, hr, ChannelMode::Rgb, 0).unwrap();
        assert_eq!(row.psnr_db, PsnrValue::Infinite);
        assert!((row.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_zero_weight_model_matches_bilinear_metrics() {
        let (mc, tc) = desk_tiny();
        let clips = data();
        let mut model = Model::<f32>::new(mc, tc.seed).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.value_mut(id).fill(0.0);
        }
        let eval = evaluate(&model, &clips, ChannelMode::Y, 2, 1).unwrap();
        assert_eq!(eval.model.rows.len(), 2);
        assert_eq!(eval.bicubic.rows.len(), 2);
        // Independent bilinear baseline per clip.
        for ((hr, lr), row) in clips.iter().zip(&eval.model.rows) {
            let up: Vec<Array3<f32>> = lr
                .frames
                .iter()
                .map(|f| {
                    let b = f.clone().insert_axis(Axis(0));
                    crate::autodiff::resample::bilinear_up_forward(&b, 4)
                        .index_axis_move(Axis(0), 0)
                })
                .collect();
            let bl = FrameSequence::new(up, hr.clip_id.clone()).unwrap();
            let want = clip_metrics(&bl, hr, ChannelMode::Y, 2).unwrap();
            assert_eq!(row.psnr_db, want.psnr_db);
            assert_eq!(row.ssim, want.ssim);
        }
        // Parallel evaluation returns the same report.
        let eval2 = evaluate(&model, &clips, ChannelMode::Y, 2, 2).unwrap();
        for (a, b) in eval.model.rows.iter().zip(&eval2.model.rows) {
            assert_eq!(a.psnr_db, b.psnr_db);
            assert_eq!(a.ssim.to_bits(), b.ssim.to_bits());
        }
    }

    #[test]
    fn history_csv_shape() {
        let rows = vec![
            HistoryRow {
                iter: 0,
                lr_main: 2e-4,
                lr_flow: 0.0,
                loss_main: 0.5,
                loss_aux: Some(0.25),
                loss_total: 0.75,
            },
            HistoryRow {
                iter: 1,
                lr_main: 1e-4,
                lr_flow: 1e-5,
                loss_main: 0.4,
                loss_aux: None,
                loss_total: 0.4,
            },
        ];
        let csv = history_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,lr_main,lr_flow,loss_main,loss_aux,loss_total"
        );
        assert_eq!(lines.next().unwrap(), "0,0.0002,0,0.5,0.25,0.75");
        assert_eq!(lines.next().unwrap(), "1,0.0001,0.00001,0.4,,0.4");
    }

    #[test]
    fn ablate_rejects_unknown_variant() {
        let (mc, tc) = desk_tiny();
        let err = ablate(&mc, &tc, &data(), &["Z".to_string()], ChannelMode::Y).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn config_validation_bounds() {
        let mut tc = TrainConfig::desk();
        tc.flow_freeze_iters = tc.total_iters + 1;
        assert!(matches!(tc.validate().unwrap_err(), Error::ConfigError(_)));
        let mut tc = TrainConfig::desk();
        tc.lr_final = 1.0;
        assert!(matches!(tc.validate().unwrap_err(), Error::ConfigError(_)));
        let mut tc = TrainConfig::desk();
        tc.adam_beta2 = 1.0;
        assert!(matches!(tc.validate().unwrap_err(), Error::ConfigError(_)));
        assert!(TrainConfig::paper().validate().is_ok());
    }
}
