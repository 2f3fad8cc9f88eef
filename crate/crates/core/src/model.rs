//! Three-stage video super-resolution network.
//!
//! Stage 1 fuses each frame with its flow-aligned neighbors (local fusion
//! module). Stage 2 runs alternating backward/forward propagation branches
//! with flow-guided deformable alignment, optionally supervised by an
//! auxiliary upsampling head. Stage 3 re-aligns both temporal neighbors
//! with the stage-2 alignment parameters and fuses them into the final
//! feature, which a pixel-shuffle head reconstructs on top of a bilinear
//! global residual.

use crate::align::{
    flow_guided_align, re_align, register_fga, register_ram, AlignmentParams, FgaIds, RamIds,
    VarParams,
};
use crate::autodiff::{Real, Var};
use crate::data::{mix_seed, FrameSequence};
use crate::error::{Error, Result};
use crate::flow::{flow_forward, pad_to_multiple, register_flow_net, FlowNetIds, FlowPyramidConfig};
use crate::params::{
    register_block, register_conv, BlockIds, ConvIds, ParamGroup, ParamStore, Session,
};
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SCALE: usize = 4;

/// Structure of the full network. Ablation flags prune whole modules and
/// only ever remove parameters, never change output shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_extract_blocks: usize,
    pub n_fusion_blocks: usize,
    pub n_propagation_branches: usize,
    pub n_blocks_per_branch: usize,
    pub n_recon_blocks: usize,
    pub scale: usize,
    pub deform_groups: usize,
    pub use_lfm: bool,
    pub use_ram: bool,
    pub use_aux_loss: bool,
    pub flow: FlowPyramidConfig,
}

impl ModelConfig {
    /// Small config for tests: every stage present at minimum depth.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 16,
            n_extract_blocks: 1,
            n_fusion_blocks: 1,
            n_propagation_branches: 2,
            n_blocks_per_branch: 1,
            n_recon_blocks: 1,
            scale: SCALE,
            deform_groups: 1,
            use_lfm: true,
            use_ram: true,
            use_aux_loss: true,
            flow: FlowPyramidConfig {
                n_levels: 3,
                base_channels: 8,
            },
        }
    }

    /// Standard model, around 1.45M parameters.
    pub fn pp_msvsr() -> Self {
        ModelConfig {
            channels: 32,
            n_extract_blocks: 3,
            n_fusion_blocks: 2,
            n_propagation_branches: 4,
            n_blocks_per_branch: 5,
            n_recon_blocks: 3,
            scale: SCALE,
            deform_groups: 8,
            use_lfm: true,
            use_ram: true,
            use_aux_loss: true,
            flow: FlowPyramidConfig {
                n_levels: 5,
                base_channels: 32,
            },
        }
    }

    /// Large model, around 7.4M parameters.
    pub fn pp_msvsr_l() -> Self {
        ModelConfig {
            channels: 64,
            n_extract_blocks: 5,
            n_fusion_blocks: 4,
            n_propagation_branches: 4,
            n_blocks_per_branch: 10,
            n_recon_blocks: 8,
            scale: SCALE,
            deform_groups: 8,
            use_lfm: true,
            use_ram: true,
            use_aux_loss: true,
            flow: FlowPyramidConfig {
                n_levels: 5,
                base_channels: 64,
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "pp-msvsr" => Ok(Self::pp_msvsr()),
            "pp-msvsr-l" => Ok(Self::pp_msvsr_l()),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected tiny, pp-msvsr, pp-msvsr-l)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != SCALE {
            return Err(Error::ConfigError(format!(
                "scale must be {SCALE}, got {}",
                self.scale
            )));
        }
        for (name, v) in [
            ("n_extract_blocks", self.n_extract_blocks),
            ("n_fusion_blocks", self.n_fusion_blocks),
            ("n_propagation_branches", self.n_propagation_branches),
            ("n_blocks_per_branch", self.n_blocks_per_branch),
            ("n_recon_blocks", self.n_recon_blocks),
            ("deform_groups", self.deform_groups),
        ] {
            if v == 0 {
                return Err(Error::ConfigError(format!("{name} must be >= 1")));
            }
        }
        if self.channels == 0 || self.channels % 16 != 0 {
            return Err(Error::ConfigError(format!(
                "channels must be a positive multiple of 16 (pixel-shuffle x4 head), got {}",
                self.channels
            )));
        }
        if self.channels % self.deform_groups != 0 {
            return Err(Error::ConfigError(format!(
                "channels {} not divisible by deform_groups {}",
                self.channels, self.deform_groups
            )));
        }
        self.flow.validate()
    }
}

#[derive(Debug, Clone)]
pub struct LfmIds {
    pub fga: FgaIds,
    pub fuse: ConvIds,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct BranchIds {
    pub fga: FgaIds,
    pub fuse: ConvIds,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct AuxIds {
    pub conv1: ConvIds,
    pub proj: ConvIds,
}

#[derive(Debug, Clone)]
pub struct Stage3Ids {
    pub ram: Option<RamIds>,
    pub fga: Option<FgaIds>,
    pub fuse: ConvIds,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct ReconIds {
    pub blocks: Vec<BlockIds>,
    pub up1: ConvIds,
    pub up2: ConvIds,
    pub proj: ConvIds,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub extract_head: ConvIds,
    pub extract_blocks: Vec<BlockIds>,
    pub lfm: Option<LfmIds>,
    pub branches: Vec<BranchIds>,
    pub aux: Option<AuxIds>,
    pub stage3: Stage3Ids,
    pub recon: ReconIds,
    pub flow: FlowNetIds,
}

fn register_blocks<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    n: usize,
    ch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BlockIds> {
    (0..n)
        .map(|i| register_block(store, &format!("{prefix}.block{i}"), ch, ParamGroup::Main, rng))
        .collect()
}

/// Register every learnable tensor in a fixed order; the order is the
/// checkpoint layout.
pub fn register_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, ModelIds)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4d4f44e1));
    let c = cfg.channels;
    let g = ParamGroup::Main;
    let dg = cfg.deform_groups;

    let extract_head = register_conv(&mut store, "extract.head", c, 3, 3, g, false, &mut rng);
    let extract_blocks = register_blocks(&mut store, "extract", cfg.n_extract_blocks, c, &mut rng);

    let lfm = cfg.use_lfm.then(|| LfmIds {
        fga: register_fga(&mut store, "lfm.fga", c, dg, &mut rng),
        fuse: register_conv(&mut store, "lfm.fuse", c, 3 * c, 3, g, false, &mut rng),
        blocks: register_blocks(&mut store, "lfm", cfg.n_fusion_blocks, c, &mut rng),
    });

    let branches = (0..cfg.n_propagation_branches)
        .map(|b| BranchIds {
            fga: register_fga(&mut store, &format!("prop.b{b}.fga"), c, dg, &mut rng),
            fuse: register_conv(
                &mut store,
                &format!("prop.b{b}.fuse"),
                c,
                2 * c,
                3,
                g,
                false,
                &mut rng,
            ),
            blocks: register_blocks(
                &mut store,
                &format!("prop.b{b}"),
                cfg.n_blocks_per_branch,
                c,
                &mut rng,
            ),
        })
        .collect();

    // Zero projection: the branch starts as an exact bilinear passthrough
    // and grows its influence on the trunk only as its own weights learn.
    let aux = cfg.use_aux_loss.then(|| AuxIds {
        conv1: register_conv(&mut store, "aux.conv1", c, c, 3, g, false, &mut rng),
        proj: register_conv(
            &mut store,
            "aux.proj",
            3 * SCALE * SCALE,
            c,
            3,
            g,
            true,
            &mut rng,
        ),
    });

    let stage3 = Stage3Ids {
        ram: cfg
            .use_ram
            .then(|| register_ram(&mut store, "stage3.ram", c, dg, &mut rng)),
        fga: (!cfg.use_ram).then(|| register_fga(&mut store, "stage3.fga", c, dg, &mut rng)),
        fuse: register_conv(&mut store, "stage3.fuse", c, 3 * c, 3, g, false, &mut rng),
        blocks: register_blocks(&mut store, "stage3", cfg.n_fusion_blocks, c, &mut rng),
    };

    let recon = ReconIds {
        blocks: register_blocks(&mut store, "recon", cfg.n_recon_blocks, c, &mut rng),
        up1: register_conv(&mut store, "recon.up1", 4 * c, c, 3, g, false, &mut rng),
        up2: register_conv(&mut store, "recon.up2", 4 * c, c, 3, g, false, &mut rng),
        proj: register_conv(&mut store, "recon.proj", 3, c, 3, g, false, &mut rng),
    };

    let flow = register_flow_net(&mut store, &cfg.flow, "flow", &mut rng);

    Ok((
        store,
        ModelIds {
            extract_head,
            extract_blocks,
            lfm,
            branches,
            aux,
            stage3,
            recon,
            flow,
        },
    ))
}

/// Per-frame residual feature extraction; no temporal mixing.
pub fn extract_features<T: Real>(
    sess: &mut Session<T>,
    ids: &ModelIds,
    frames: &[Var],
) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("no frames to extract".into()));
    }
    frames
        .iter()
        .map(|&f| {
            let h = sess.conv_act(ids.extract_head, f, 1, 1)?;
            sess.res_blocks(&ids.extract_blocks, h)
        })
        .collect()
}

/// Neighbor feature plus the flow from the current frame to it.
pub type NeighborIn = Option<(Var, Var)>;

/// Stage-1 local fusion of one frame with its aligned neighbors. A missing
/// neighbor duplicates the aligned existing one; with no neighbors at all
/// (single-frame clip) the current feature fills all three slots and no
/// alignment runs.
pub fn local_fusion<T: Real>(
    sess: &mut Session<T>,
    ids: &LfmIds,
    g_cur: Var,
    prev: NeighborIn,
    next: NeighborIn,
    deform_groups: usize,
) -> Result<Var> {
    let align = |sess: &mut Session<T>, (g_n, flow): (Var, Var)| -> Result<Var> {
        Ok(flow_guided_align(sess, &ids.fga, g_n, g_cur, flow, deform_groups)?.0)
    };
    let (a_prev, a_next) = match (prev, next) {
        (Some(p), Some(n)) => {
            let ap = align(sess, p)?;
            let an = align(sess, n)?;
            (ap, an)
        }
        (Some(p), None) => {
            let ap = align(sess, p)?;
            (ap, ap)
        }
        (None, Some(n)) => {
            let an = align(sess, n)?;
            (an, an)
        }
        (None, None) => (g_cur, g_cur),
    };
    let cat = sess.tape.concat_channels(&[a_prev, g_cur, a_next])?;
    let h = sess.conv_act(ids.fuse, cat, 1, 1)?;
    sess.res_blocks(&ids.blocks, h)
}

/// Stage-2 output: final-branch features plus the alignment parameters of
/// the last branch in each temporal direction, for stage-3 reuse.
pub struct Propagated {
    pub f2: Vec<Var>,
    /// Params aligning the (i+1) neighbor onto frame i (last backward
    /// branch); None at the right boundary.
    pub params_next: Vec<Option<VarParams>>,
    /// Params aligning the (i-1) neighbor onto frame i (last forward
    /// branch); None at the left boundary.
    pub params_prev: Vec<Option<VarParams>>,
}

/// Alternating backward/forward propagation branches; branch 0 runs
/// backward. Each step aligns the running hidden feature onto the current
/// frame, fuses, and refines with residual blocks.
pub fn propagate<T: Real>(
    sess: &mut Session<T>,
    cfg: &ModelConfig,
    ids: &ModelIds,
    fused: &[Var],
    flow_to_prev: &[Option<Var>],
    flow_to_next: &[Option<Var>],
) -> Result<Propagated> {
    let n = fused.len();
    if flow_to_prev.len() != n || flow_to_next.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "propagate: {n} frames but {} / {} flows",
            flow_to_prev.len(),
            flow_to_next.len()
        )));
    }
    let nb = cfg.n_propagation_branches;
    let last_backward = (0..nb).rev().find(|b| b % 2 == 0);
    let last_forward = (0..nb).rev().find(|b| b % 2 == 1);

    let mut feats: Vec<Var> = fused.to_vec();
    let mut params_next: Vec<Option<VarParams>> = vec![None; n];
    let mut params_prev: Vec<Option<VarParams>> = vec![None; n];
    let bc = sess.tape.shape(fused[0]).1;

    for b in 0..nb {
        let backward = b % 2 == 0;
        let branch = &ids.branches[b];
        let order: Vec<usize> = if backward {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        let mut new_feats = feats.clone();
        let mut hidden: Option<Var> = None;
        for &i in &order {
            let x = feats[i];
            let cat = match hidden {
                Some(h) => {
                    let flow = if backward {
                        flow_to_next[i].ok_or_else(|| {
                            Error::ShapeMismatch(format!("missing flow to next at frame {i}"))
                        })?
                    } else {
                        flow_to_prev[i].ok_or_else(|| {
                            Error::ShapeMismatch(format!("missing flow to prev at frame {i}"))
                        })?
                    };
                    let (aligned, params) =
                        flow_guided_align(sess, &branch.fga, h, x, flow, cfg.deform_groups)?;
                    if backward && Some(b) == last_backward {
                        params_next[i] = Some(params);
                    }
                    if !backward && Some(b) == last_forward {
                        params_prev[i] = Some(params);
                    }
                    sess.tape.concat_channels(&[aligned, x])?
                }
                None => {
                    let (nn, _, hh, ww) = sess.tape.shape(x);
                    let zeros = sess.tape.input(Array4::<T>::zeros((nn, bc, hh, ww)));
                    sess.tape.concat_channels(&[zeros, x])?
                }
            };
            let h = sess.conv_act(branch.fuse, cat, 1, 1)?;
            let h = sess.res_blocks(&branch.blocks, h)?;
            let out = sess.tape.add(x, h)?;
            new_feats[i] = out;
            hidden = Some(out);
        }
        feats = new_feats;
    }
    Ok(Propagated {
        f2: feats,
        params_next,
        params_prev,
    })
}

/// Auxiliary upsampling head on a stage-2 feature: conv + projection to
/// 3 * scale^2 channels, pixel-shuffle x4, and the same bilinear x4 base as
/// the main head so the branch supervises detail rather than re-deriving the
/// whole image. Owns its weights; never shared with the main reconstruction
/// head.
pub fn aux_head<T: Real>(
    sess: &mut Session<T>,
    ids: Option<&AuxIds>,
    f2: Var,
    lr_frame: Var,
) -> Result<Var> {
    let ids = ids.ok_or_else(|| Error::InvalidState("auxiliary head is disabled".into()))?;
    let h = sess.conv_act(ids.conv1, f2, 1, 1)?;
    let detail = sess.conv(ids.proj, h, 1, 1)?;
    let up = sess.tape.pixel_shuffle(detail, SCALE)?;
    let base = sess.tape.bilinear_upsample(lr_frame, SCALE);
    sess.tape.add(up, base)
}

/// Stage-3 fusion: re-align both temporal neighbors with the stage-2
/// parameters (or plain flow-guided alignment when the re-align module is
/// disabled) and fuse with the current feature. Missing neighbors
/// contribute zero slots.
pub fn stage3_fuse<T: Real>(
    sess: &mut Session<T>,
    cfg: &ModelConfig,
    ids: &ModelIds,
    f2: &[Var],
    params_next: &[Option<VarParams>],
    params_prev: &[Option<VarParams>],
    flow_to_prev: &[Option<Var>],
    flow_to_next: &[Option<Var>],
) -> Result<Vec<Var>> {
    let n = f2.len();
    if params_next.len() != n || params_prev.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "stage3_fuse: {n} frames but {} / {} params",
            params_next.len(),
            params_prev.len()
        )));
    }
    let s3 = &ids.stage3;
    let dg = cfg.deform_groups;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let slot = |sess: &mut Session<T>,
                        nbr: Option<usize>,
                        params: &Option<VarParams>,
                        flow: &Option<Var>|
         -> Result<Var> {
            let cur = f2[i];
            let (bn, bc, bh, bw) = sess.tape.shape(cur);
            let aligned = match (nbr, &s3.ram) {
                (Some(j), Some(ram)) => match params {
                    Some(p) => Some(re_align(sess, ram, cur, f2[j], p, dg)?.0),
                    None => None,
                },
                (Some(j), None) => {
                    let fga = s3.fga.as_ref().expect("stage3 alignment ids");
                    match flow {
                        Some(fl) => Some(flow_guided_align(sess, fga, f2[j], cur, *fl, dg)?.0),
                        None => None,
                    }
                }
                (None, _) => None,
            };
            Ok(match aligned {
                Some(a) => a,
                None => sess.tape.input(Array4::<T>::zeros((bn, bc, bh, bw))),
            })
        };
        let next_idx = (i + 1 < n).then_some(i + 1);
        let prev_idx = (i > 0).then(|| i - 1);
        let a_next = slot(sess, next_idx, &params_next[i], &flow_to_next[i])?;
        let a_prev = slot(sess, prev_idx, &params_prev[i], &flow_to_prev[i])?;
        let cat = sess.tape.concat_channels(&[f2[i], a_next, a_prev])?;
        let h = sess.conv_act(s3.fuse, cat, 1, 1)?;
        let h = sess.res_blocks(&s3.blocks, h)?;
        out.push(sess.tape.add(f2[i], h)?);
    }
    Ok(out)
}

/// Reconstruction head: residual blocks, two pixel-shuffle x2 stages, a
/// 3-channel projection, and the bilinear x4 of the LR frame as a global
/// residual.
pub fn reconstruct_upsample<T: Real>(
    sess: &mut Session<T>,
    ids: &ReconIds,
    f_aligned: Var,
    lr_frame: Var,
) -> Result<Var> {
    let r = sess.res_blocks(&ids.blocks, f_aligned)?;
    let u = sess.conv(ids.up1, r, 1, 1)?;
    let u = sess.tape.pixel_shuffle(u, 2)?;
    let u = sess.tape.leaky_relu(u, crate::params::LEAKY_SLOPE);
    let u = sess.conv(ids.up2, u, 1, 1)?;
    let u = sess.tape.pixel_shuffle(u, 2)?;
    let u = sess.tape.leaky_relu(u, crate::params::LEAKY_SLOPE);
    let img = sess.conv(ids.proj, u, 1, 1)?;
    let base = sess.tape.bilinear_upsample(lr_frame, SCALE);
    sess.tape.add(img, base)
}

/// Everything the training loop needs from one forward pass.
pub struct SessionForward {
    pub sr: Vec<Var>,
    pub aux: Option<Vec<Var>>,
    pub params_next: Vec<Option<VarParams>>,
    pub f2: Vec<Var>,
}

/// Full forward pass over a batched clip: `lr_frames[t]` is (B, 3, H, W).
/// H and W must be divisible by the flow pyramid divisor; the array-level
/// [`Model::forward`] pads beforehand.
pub fn forward_session<T: Real>(
    sess: &mut Session<T>,
    cfg: &ModelConfig,
    ids: &ModelIds,
    lr_frames: &[Var],
) -> Result<SessionForward> {
    if lr_frames.is_empty() {
        return Err(Error::EmptyDataset("empty clip".into()));
    }
    let n = lr_frames.len();

    let mut flow_to_prev: Vec<Option<Var>> = vec![None; n];
    let mut flow_to_next: Vec<Option<Var>> = vec![None; n];
    for i in 0..n {
        if i > 0 {
            let f = flow_forward(sess, &ids.flow, lr_frames[i], lr_frames[i - 1])?;
            flow_to_prev[i] = Some(f);
        }
        if i + 1 < n {
            let f = flow_forward(sess, &ids.flow, lr_frames[i], lr_frames[i + 1])?;
            flow_to_next[i] = Some(f);
        }
    }

    let g = extract_features(sess, ids, lr_frames)?;

    let fused: Vec<Var> = match &ids.lfm {
        Some(lfm) => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let prev = (i > 0).then(|| (g[i - 1], flow_to_prev[i].unwrap()));
                let next = (i + 1 < n).then(|| (g[i + 1], flow_to_next[i].unwrap()));
                out.push(local_fusion(sess, lfm, g[i], prev, next, cfg.deform_groups)?);
            }
            out
        }
        None => g,
    };

    let prop = propagate(sess, cfg, ids, &fused, &flow_to_prev, &flow_to_next)?;

    let aux = match &ids.aux {
        Some(_) => {
            let mut frames = Vec::with_capacity(n);
            for (i, &f) in prop.f2.iter().enumerate() {
                frames.push(aux_head(sess, ids.aux.as_ref(), f, lr_frames[i])?);
            }
            Some(frames)
        }
        None => None,
    };

    let f3 = stage3_fuse(
        sess,
        cfg,
        ids,
        &prop.f2,
        &prop.params_next,
        &prop.params_prev,
        &flow_to_prev,
        &flow_to_next,
    )?;

    let mut sr = Vec::with_capacity(n);
    for i in 0..n {
        sr.push(reconstruct_upsample(sess, &ids.recon, f3[i], lr_frames[i])?);
    }
    Ok(SessionForward {
        sr,
        aux,
        params_next: prop.params_next,
        f2: prop.f2,
    })
}

/// Inference output for one clip.
pub struct ForwardOutput {
    pub sr_frames: FrameSequence,
    pub aux_frames: Option<FrameSequence>,
    /// Stage-2 parameters aligning frame i+1 onto frame i, as consumed by
    /// stage 3; None at the right boundary.
    pub stage2_params: Vec<Option<AlignmentParams<f32>>>,
}

/// A config, its parameter store, and the id map binding them together.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (store, ids) = register_model(&cfg, seed)?;
        Ok(Model { cfg, store, ids })
    }
}

impl Model<f32> {
    /// Run one clip at batch size 1, padding to the flow divisor and
    /// cropping back. Outputs are clamped to [0, 1].
    pub fn forward(&self, lr: &FrameSequence) -> Result<ForwardOutput> {
        let (h, w) = lr.dims();
        let div = self.cfg.flow.divisor();
        let mut sess = Session::bind(&self.store, false);
        let frames: Vec<Var> = lr
            .frames
            .iter()
            .map(|f| {
                let b = pad_to_multiple(&f.clone().insert_axis(Axis(0)), div);
                sess.tape.input(b)
            })
            .collect();
        let out = forward_session(&mut sess, &self.cfg, &self.ids, &frames)?;

        let crop = |sess: &Session<f32>, v: Var| -> Result<ndarray::Array3<f32>> {
            let full = sess.tape.value(v);
            if full.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalDivergence("non-finite output frame".into()));
            }
            Ok(full
                .slice(ndarray::s![0, .., ..SCALE * h, ..SCALE * w])
                .mapv(|x| x.clamp(0.0, 1.0)))
        };
        let sr: Vec<_> = out
            .sr
            .iter()
            .map(|&v| crop(&sess, v))
            .collect::<Result<_>>()?;
        let aux = match &out.aux {
            Some(frames) => {
                let mut seq = FrameSequence::new(
                    frames
                        .iter()
                        .map(|&v| crop(&sess, v))
                        .collect::<Result<_>>()?,
                    format!("{}_aux", lr.clip_id),
                )?;
                seq.frame_rate = lr.frame_rate;
                Some(seq)
            }
            None => None,
        };
        let stage2_params = out
            .params_next
            .iter()
            .map(|p| {
                p.as_ref().map(|p| AlignmentParams {
                    offsets: sess.tape.value(p.offsets).clone(),
                    masks: sess.tape.value(p.masks).clone(),
                })
            })
            .collect();
        let mut sr_frames = FrameSequence::new(sr, lr.clip_id.clone())?;
        sr_frames.frame_rate = lr.frame_rate;
        Ok(ForwardOutput {
            sr_frames,
            aux_frames: aux,
            stage2_params,
        })
    }
}

/// Learnable-scalar counts, total and by top-level module.
#[derive(Debug, Clone, Serialize)]
pub struct ModelStats {
    pub param_count: usize,
    pub per_module: Vec<(String, usize)>,
}

pub fn model_stats(cfg: &ModelConfig) -> Result<ModelStats> {
    let (store, _) = register_model::<f32>(cfg, 0)?;
    let per_module: Vec<(String, usize)> = store
        .module_names()
        .into_iter()
        .map(|m| {
            let count = store.scalar_count_prefix(&format!("{m}."));
            (m, count)
        })
        .collect();
    Ok(ModelStats {
        param_count: store.scalar_count(),
        per_module,
    })
}
