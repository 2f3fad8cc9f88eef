//! Command-line front end: subcommand parsing, config-file precedence
//! (defaults < `--config` JSON < flags), run manifests, and stable exit
//! codes (0 success, 2 config error, 3 data error, 4 divergence).

use crate::data::{list_frames, load_sequence, save_frame, write_synthetic_dataset, Dataset, FrameSequence};
use crate::error::{Error, Result};
use crate::metrics::{ChannelMode, MetricReport};
use crate::model::{model_stats, ModelConfig};
use crate::train::{
    ablate, ablation_to_tsv, clip_metrics, evaluate, load_checkpoint, train, AblationRow,
    Checkpoint, TrainConfig, TrainOptions,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

/// Dataset root fallback when `--data` is absent.
pub const DATA_ROOT_ENV: &str = "MSVSR_DATA_ROOT";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "msvsr", version, about = "Multi-stage video super-resolution tool")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset of HR clips (LR derives at load time)
    MakeData(MakeDataArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint, or compare two frame directories
    Eval(EvalArgs),
    /// Upscale an LR frame directory 4x with a checkpoint
    Infer(InferArgs),
    /// Train and compare the ablation variants A, B, C, full
    Ablate(AblateArgs),
    /// Print total and per-module parameter counts for a preset
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// Output dataset root
    #[arg(long)]
    pub out: PathBuf,
    /// Number of clips (default 2)
    #[arg(long)]
    pub clips: Option<usize>,
    /// Frames per clip (default 10)
    #[arg(long)]
    pub frames: Option<usize>,
    /// HR frame edge in pixels, multiple of 4 (default 64)
    #[arg(long)]
    pub hr_size: Option<usize>,
    /// Peak per-frame motion in HR pixels (default 4)
    #[arg(long)]
    pub motion: Option<usize>,
    /// RNG seed (default 7)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Flags shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Model preset: tiny, pp-msvsr, pp-msvsr-l (default tiny)
    #[arg(long)]
    pub model: Option<String>,
    /// Total iterations (default 2000)
    #[arg(long)]
    pub iters: Option<usize>,
    /// Batch size (default 2)
    #[arg(long)]
    pub batch: Option<usize>,
    /// LR patch edge in pixels (default 32)
    #[arg(long)]
    pub patch: Option<usize>,
    /// Frames per training sample (default 5)
    #[arg(long)]
    pub frames: Option<usize>,
    /// RNG seed (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Auxiliary loss weight (default 1)
    #[arg(long)]
    pub aux_weight: Option<f64>,
    /// Disable the local fusion module
    #[arg(long)]
    pub no_lfm: bool,
    /// Disable the re-align module
    #[arg(long)]
    pub no_ram: bool,
    /// Disable the auxiliary loss head
    #[arg(long)]
    pub no_aux: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Dataset root (default $MSVSR_DATA_ROOT)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Resume from a checkpoint written by an identical configuration
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory (default runs/train)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Periodic checkpoint interval in iterations, 0 = final only (default 0)
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint path
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset root (default $MSVSR_DATA_ROOT)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metric channel mode: y or rgb (default y)
    #[arg(long)]
    pub channel_mode: Option<String>,
    /// Pixels cropped from each border before metrics (default 0)
    #[arg(long)]
    pub crop_border: Option<usize>,
    /// Worker threads for per-clip evaluation (default 1)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Compare two frame directories instead of running a model
    #[arg(long, num_args = 2, value_names = ["DIR_A", "DIR_B"])]
    pub compare_dirs: Vec<PathBuf>,
    /// Output directory (default runs/eval)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint path
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// LR input frame directory (PNG)
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory (default runs/infer)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write auxiliary-head frames to this directory
    #[arg(long)]
    pub aux_out: Option<PathBuf>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma-separated subset of A,B,C,full (default all)
    #[arg(long)]
    pub variants: Option<String>,
    /// Metric channel mode: y or rgb (default y)
    #[arg(long)]
    pub channel_mode: Option<String>,
    /// Dataset root (default $MSVSR_DATA_ROOT)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default runs/ablate)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Model preset: tiny, pp-msvsr, pp-msvsr-l (default tiny)
    #[arg(long)]
    pub model: Option<String>,
    /// Output directory (default runs/stats)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

// ------------------------------------------------------- config resolution

/// Flat JSON config file, keys named after flags.
#[derive(Debug)]
struct ConfigMap(serde_json::Map<String, Value>);

impl ConfigMap {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(ConfigMap(serde_json::Map::new()));
        };
        let text = fs::read_to_string(p)
            .map_err(|e| Error::ConfigError(format!("config {}: {e}", p.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::ConfigError(format!("config {}: {e}", p.display())))?;
        let Value::Object(map) = v else {
            return Err(Error::ConfigError(format!(
                "config {}: expected a flat JSON object",
                p.display()
            )));
        };
        for (k, val) in &map {
            if val.is_object() || val.is_array() {
                return Err(Error::ConfigError(format!(
                    "config key '{k}' must be a scalar"
                )));
            }
        }
        Ok(ConfigMap(map))
    }

    fn bad(key: &str, want: &str, got: &Value) -> Error {
        Error::ConfigError(format!("config key '{key}': expected {want}, got {got}"))
    }

    fn usize_(&self, key: &str) -> Result<Option<usize>> {
        self.0
            .get(key)
            .map(|v| {
                v.as_u64()
                    .map(|u| u as usize)
                    .ok_or_else(|| Self::bad(key, "a non-negative integer", v))
            })
            .transpose()
    }

    fn u64_(&self, key: &str) -> Result<Option<u64>> {
        self.0
            .get(key)
            .map(|v| v.as_u64().ok_or_else(|| Self::bad(key, "a non-negative integer", v)))
            .transpose()
    }

    fn f64_(&self, key: &str) -> Result<Option<f64>> {
        self.0
            .get(key)
            .map(|v| v.as_f64().ok_or_else(|| Self::bad(key, "a number", v)))
            .transpose()
    }

    fn bool_(&self, key: &str) -> Result<Option<bool>> {
        self.0
            .get(key)
            .map(|v| v.as_bool().ok_or_else(|| Self::bad(key, "a boolean", v)))
            .transpose()
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        self.0
            .get(key)
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Self::bad(key, "a string", v))
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }
}

fn default_out(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

fn channel_mode_of(flag: &Option<String>, cfg: &ConfigMap) -> Result<ChannelMode> {
    let s = flag
        .clone()
        .or(cfg.string("channel-mode")?)
        .unwrap_or_else(|| "y".into());
    match s.to_ascii_lowercase().as_str() {
        "y" => Ok(ChannelMode::Y),
        "rgb" => Ok(ChannelMode::Rgb),
        other => Err(Error::ConfigError(format!(
            "unknown channel mode '{other}' (expected y or rgb)"
        ))),
    }
}

fn data_root(flag: &Option<PathBuf>, cfg: &ConfigMap) -> Result<PathBuf> {
    if let Some(p) = flag.clone().or(cfg.path("data")?) {
        return Ok(p);
    }
    std::env::var_os(DATA_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::ConfigError(format!(
                "no dataset root: pass --data or set {DATA_ROOT_ENV}"
            ))
        })
}

/// Resolve model and train configs from flags over config file over either
/// a resume checkpoint's snapshots or the presets.
fn resolve_model_train(
    flags: &TrainFlags,
    cfg: &ConfigMap,
    base: Option<(&ModelConfig, &TrainConfig)>,
) -> Result<(ModelConfig, TrainConfig)> {
    let named = flags.model.clone().or(cfg.string("model")?);
    let mut mc = match (&named, base) {
        (Some(n), _) => ModelConfig::by_name(n)?,
        (None, Some((m, _))) => m.clone(),
        (None, None) => ModelConfig::tiny(),
    };
    if flags.no_lfm || cfg.bool_("no-lfm")?.unwrap_or(false) {
        mc.use_lfm = false;
    }
    if flags.no_ram || cfg.bool_("no-ram")?.unwrap_or(false) {
        mc.use_ram = false;
    }
    if flags.no_aux || cfg.bool_("no-aux")?.unwrap_or(false) {
        mc.use_aux_loss = false;
    }
    let mut tc = base.map(|(_, t)| t.clone()).unwrap_or_else(TrainConfig::desk);
    if let Some(v) = flags.iters.or(cfg.usize_("iters")?) {
        tc.total_iters = v;
    }
    if let Some(v) = flags.batch.or(cfg.usize_("batch")?) {
        tc.batch_size = v;
    }
    if let Some(v) = flags.patch.or(cfg.usize_("patch")?) {
        tc.patch_size = v;
    }
    if let Some(v) = flags.frames.or(cfg.usize_("frames")?) {
        tc.n_frames = v;
    }
    if let Some(v) = flags.seed.or(cfg.u64_("seed")?) {
        tc.seed = v;
    }
    if let Some(v) = flags.aux_weight.or(cfg.f64_("aux-weight")?) {
        tc.loss.aux_weight = v;
    }
    // The default freeze window tracks shortened schedules; an explicit
    // value is taken literally and validated downstream.
    match cfg.usize_("flow-freeze")? {
        Some(v) => tc.flow_freeze_iters = v,
        None => tc.flow_freeze_iters = tc.flow_freeze_iters.min(tc.total_iters),
    }
    Ok((mc, tc))
}

fn parse_variants(spec: Option<String>) -> Vec<String> {
    spec.map(|s| {
        s.split(',')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect()
    })
    .unwrap_or_default()
}

// ------------------------------------------------------------ run manifest

/// One record per run: the resolved configuration, artifacts, timing, and
/// exit status. Failed runs record the error.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub resolved: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub ended: String,
    pub exit_status: i32,
    pub error: Option<String>,
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(RUN_MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(m)?)?;
    Ok(p)
}

// ------------------------------------------------------- prepared commands

enum Job {
    MakeData {
        out: PathBuf,
        clips: usize,
        frames: usize,
        hr_size: usize,
        motion: usize,
        seed: u64,
    },
    Train {
        data: PathBuf,
        mc: ModelConfig,
        tc: TrainConfig,
        opts: TrainOptions,
    },
    Eval {
        out: PathBuf,
        ckpt: PathBuf,
        data: PathBuf,
        mode: ChannelMode,
        crop: usize,
        workers: usize,
    },
    EvalCompare {
        out: PathBuf,
        dir_a: PathBuf,
        dir_b: PathBuf,
        mode: ChannelMode,
        crop: usize,
    },
    Infer {
        out: PathBuf,
        ckpt: PathBuf,
        input: PathBuf,
        aux_out: Option<PathBuf>,
    },
    Ablate {
        out: PathBuf,
        data: PathBuf,
        mc: ModelConfig,
        tc: TrainConfig,
        variants: Vec<String>,
        mode: ChannelMode,
    },
    Stats {
        out: PathBuf,
        model: String,
    },
}

struct Prep {
    command: &'static str,
    out_dir: PathBuf,
    resolved: Value,
    seed: Option<u64>,
    job: Job,
}

fn prepare(cmd: &Cmd) -> Result<Prep> {
    match cmd {
        Cmd::MakeData(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let clips = a.clips.or(cfg.usize_("clips")?).unwrap_or(2);
            let frames = a.frames.or(cfg.usize_("frames")?).unwrap_or(10);
            let hr_size = a.hr_size.or(cfg.usize_("hr-size")?).unwrap_or(64);
            let motion = a.motion.or(cfg.usize_("motion")?).unwrap_or(4);
            let seed = a.seed.or(cfg.u64_("seed")?).unwrap_or(7);
            let out = a.out.clone();
            Ok(Prep {
                command: "make-data",
                out_dir: out.clone(),
                resolved: json!({
                    "out": out, "clips": clips, "frames": frames,
                    "hr-size": hr_size, "motion": motion, "seed": seed,
                }),
                seed: Some(seed),
                job: Job::MakeData {
                    out,
                    clips,
                    frames,
                    hr_size,
                    motion,
                    seed,
                },
            })
        }
        Cmd::Train(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let resume_path = a.resume.clone().or(cfg.path("resume")?);
            let resume: Option<Checkpoint> = match &resume_path {
                Some(p) if !p.is_file() => {
                    return Err(Error::NotFound(format!("checkpoint {}", p.display())))
                }
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let base = resume.as_ref().map(|c| (&c.model_cfg, &c.train_cfg));
            let (mc, tc) = resolve_model_train(&a.flags, &cfg, base)?;
            let data = data_root(&a.data, &cfg)?;
            let out = a
                .out
                .clone()
                .or(cfg.path("out")?)
                .unwrap_or_else(|| default_out("train"));
            let interval = a
                .checkpoint_interval
                .or(cfg.usize_("checkpoint-interval")?)
                .unwrap_or(0);
            let seed = tc.seed;
            Ok(Prep {
                command: "train",
                out_dir: out.clone(),
                resolved: json!({
                    "data": data, "out": out, "resume": resume_path,
                    "checkpoint-interval": interval,
                    "model_cfg": mc, "train_cfg": tc,
                }),
                seed: Some(seed),
                job: Job::Train {
                    data,
                    mc,
                    tc,
                    opts: TrainOptions {
                        out_dir: Some(out),
                        checkpoint_interval: interval,
                        resume,
                    },
                },
            })
        }
        Cmd::Eval(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let mode = channel_mode_of(&a.channel_mode, &cfg)?;
            let crop = a.crop_border.or(cfg.usize_("crop-border")?).unwrap_or(0);
            let workers = a.workers.or(cfg.usize_("workers")?).unwrap_or(1);
            let out = a
                .out
                .clone()
                .or(cfg.path("out")?)
                .unwrap_or_else(|| default_out("eval"));
            if !a.compare_dirs.is_empty() {
                let (dir_a, dir_b) = (a.compare_dirs[0].clone(), a.compare_dirs[1].clone());
                return Ok(Prep {
                    command: "eval",
                    out_dir: out.clone(),
                    resolved: json!({
                        "compare-dirs": [dir_a, dir_b], "out": out,
                        "channel-mode": mode.to_string(), "crop-border": crop,
                    }),
                    seed: None,
                    job: Job::EvalCompare {
                        out,
                        dir_a,
                        dir_b,
                        mode,
                        crop,
                    },
                });
            }
            let ckpt = a.ckpt.clone().or(cfg.path("ckpt")?).ok_or_else(|| {
                Error::ConfigError("eval requires --ckpt or --compare-dirs".into())
            })?;
            let data = data_root(&a.data, &cfg)?;
            Ok(Prep {
                command: "eval",
                out_dir: out.clone(),
                resolved: json!({
                    "ckpt": ckpt, "data": data, "out": out,
                    "channel-mode": mode.to_string(), "crop-border": crop,
                    "workers": workers,
                }),
                seed: None,
                job: Job::Eval {
                    out,
                    ckpt,
                    data,
                    mode,
                    crop,
                    workers,
                },
            })
        }
        Cmd::Infer(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let ckpt = a
                .ckpt
                .clone()
                .or(cfg.path("ckpt")?)
                .ok_or_else(|| Error::ConfigError("infer requires --ckpt".into()))?;
            let input = a
                .input
                .clone()
                .or(cfg.path("in")?)
                .ok_or_else(|| Error::ConfigError("infer requires --in".into()))?;
            let out = a
                .out
                .clone()
                .or(cfg.path("out")?)
                .unwrap_or_else(|| default_out("infer"));
            let aux_out = a.aux_out.clone().or(cfg.path("aux-out")?);
            Ok(Prep {
                command: "infer",
                out_dir: out.clone(),
                resolved: json!({
                    "ckpt": ckpt, "in": input, "out": out, "aux-out": aux_out,
                }),
                seed: None,
                job: Job::Infer {
                    out,
                    ckpt,
                    input,
                    aux_out,
                },
            })
        }
        Cmd::Ablate(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let (mc, tc) = resolve_model_train(&a.flags, &cfg, None)?;
            let data = data_root(&a.data, &cfg)?;
            let mode = channel_mode_of(&a.channel_mode, &cfg)?;
            let out = a
                .out
                .clone()
                .or(cfg.path("out")?)
                .unwrap_or_else(|| default_out("ablate"));
            let variants = parse_variants(a.variants.clone().or(cfg.string("variants")?));
            let seed = tc.seed;
            Ok(Prep {
                command: "ablate",
                out_dir: out.clone(),
                resolved: json!({
                    "data": data, "out": out, "variants": variants.join(","),
                    "channel-mode": mode.to_string(),
                    "model_cfg": mc, "train_cfg": tc,
                }),
                seed: Some(seed),
                job: Job::Ablate {
                    out,
                    data,
                    mc,
                    tc,
                    variants,
                    mode,
                },
            })
        }
        Cmd::Stats(a) => {
            let cfg = ConfigMap::load(a.config.as_deref())?;
            let model = a
                .model
                .clone()
                .or(cfg.string("model")?)
                .unwrap_or_else(|| "tiny".into());
            let out = a
                .out
                .clone()
                .or(cfg.path("out")?)
                .unwrap_or_else(|| default_out("stats"));
            Ok(Prep {
                command: "stats",
                out_dir: out.clone(),
                resolved: json!({ "model": model, "out": out }),
                seed: None,
                job: Job::Stats { out, model },
            })
        }
    }
}

// ---------------------------------------------------------------- execution

fn load_clips(root: &Path) -> Result<Vec<(FrameSequence, FrameSequence)>> {
    let ds = Dataset::open(root)?;
    (0..ds.n_clips()).map(|i| ds.load_pair(i)).collect()
}

fn fmt_psnr(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "inf".into())
}

fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| variant | RAM | LFM | Aux-Loss | params | initial loss | final loss | PSNR (dB) | SSIM |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    let onoff = |b: bool| if b { "on" } else { "off" };
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.6} | {:.6} | {} | {:.6} |\n",
            r.variant,
            onoff(r.use_ram),
            onoff(r.use_lfm),
            onoff(r.use_aux),
            r.param_count,
            r.initial_loss,
            r.final_loss,
            fmt_psnr(r.psnr_db),
            r.ssim
        ));
    }
    s
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::NotFound(format!("{what} {}", path.display())))
    }
}

fn execute(job: Job) -> Result<Vec<PathBuf>> {
    match job {
        Job::MakeData {
            out,
            clips,
            frames,
            hr_size,
            motion,
            seed,
        } => {
            let manifest = write_synthetic_dataset(&out, clips, frames, hr_size, motion, seed)?;
            println!(
                "wrote {} clips of {frames} frames ({hr_size}x{hr_size}) to {}",
                manifest.clips.len(),
                out.display()
            );
            let mut artifacts = vec![out.join("manifest.json")];
            artifacts.extend(manifest.clips.iter().map(|c| out.join(c)));
            Ok(artifacts)
        }
        Job::Train { data, mc, tc, opts } => {
            let clips = load_clips(&data)?;
            let outcome = train(&mc, &tc, &clips, &opts)?;
            if let Some(last) = outcome.history.last() {
                println!("final loss {}", last.loss_total);
            }
            println!("checkpoint at iteration {}", outcome.checkpoint.iteration);
            let dir = opts.out_dir.as_deref().expect("set during prepare");
            Ok(vec![dir.join("ckpt_final.bin"), dir.join("train_log.csv")])
        }
        Job::Eval {
            out,
            ckpt,
            data,
            mode,
            crop,
            workers,
        } => {
            require_file(&ckpt, "checkpoint")?;
            let model = load_checkpoint(&ckpt)?.to_model()?;
            let pairs = load_clips(&data)?;
            let report = evaluate(&model, &pairs, mode, crop, workers)?;
            fs::create_dir_all(&out)?;
            let tsv = out.join("report.tsv");
            let bic = out.join("report_bicubic.tsv");
            let js = out.join("report.json");
            fs::write(&tsv, report.model.to_tsv())?;
            fs::write(&bic, report.bicubic.to_tsv())?;
            fs::write(
                &js,
                serde_json::to_string_pretty(&json!({
                    "model": report.model, "bicubic": report.bicubic,
                }))?,
            )?;
            println!(
                "model   psnr {} ssim {:.4}",
                fmt_psnr(report.model.mean_psnr_db),
                report.model.mean_ssim
            );
            println!(
                "bicubic psnr {} ssim {:.4}",
                fmt_psnr(report.bicubic.mean_psnr_db),
                report.bicubic.mean_ssim
            );
            Ok(vec![tsv, bic, js])
        }
        Job::EvalCompare {
            out,
            dir_a,
            dir_b,
            mode,
            crop,
        } => {
            let sa = load_sequence(&dir_a, "*.png")?;
            let sb = load_sequence(&dir_b, "*.png")?;
            let row = clip_metrics(&sa, &sb, mode, crop)?;
            let report = MetricReport::from_rows(mode, vec![row]);
            fs::create_dir_all(&out)?;
            let tsv = out.join("report.tsv");
            let js = out.join("report.json");
            fs::write(&tsv, report.to_tsv())?;
            fs::write(
                &js,
                serde_json::to_string_pretty(&json!({ "compare": report }))?,
            )?;
            println!(
                "compare psnr {} ssim {:.4}",
                fmt_psnr(report.mean_psnr_db),
                report.mean_ssim
            );
            Ok(vec![tsv, js])
        }
        Job::Infer {
            out,
            ckpt,
            input,
            aux_out,
        } => {
            require_file(&ckpt, "checkpoint")?;
            let model = load_checkpoint(&ckpt)?.to_model()?;
            if aux_out.is_some() && !model.cfg.use_aux_loss {
                return Err(Error::InvalidState(
                    "checkpoint has no auxiliary head; cannot honor --aux-out".into(),
                ));
            }
            let names = list_frames(&input, "*.png")?;
            let lr = load_sequence(&input, "*.png")?;
            let fwd = model.forward(&lr)?;
            fs::create_dir_all(&out)?;
            let mut artifacts = Vec::new();
            for (name, frame) in names.iter().zip(&fwd.sr_frames.frames) {
                let p = out.join(name);
                save_frame(frame, &p)?;
                artifacts.push(p);
            }
            if let Some(adir) = &aux_out {
                let aux = fwd.aux_frames.as_ref().expect("aux head checked above");
                fs::create_dir_all(adir)?;
                for (name, frame) in names.iter().zip(&aux.frames) {
                    let p = adir.join(name);
                    save_frame(frame, &p)?;
                    artifacts.push(p);
                }
            }
            println!("wrote {} frames to {}", names.len(), out.display());
            Ok(artifacts)
        }
        Job::Ablate {
            out,
            data,
            mc,
            tc,
            variants,
            mode,
        } => {
            let clips = load_clips(&data)?;
            let rows = ablate(&mc, &tc, &clips, &variants, mode)?;
            fs::create_dir_all(&out)?;
            let tsv = out.join("ablation.tsv");
            let md = out.join("ablation.md");
            fs::write(&tsv, ablation_to_tsv(&rows))?;
            let table = ablation_markdown(&rows);
            fs::write(&md, &table)?;
            print!("{table}");
            Ok(vec![tsv, md])
        }
        Job::Stats { out, model } => {
            let cfg = ModelConfig::by_name(&model)?;
            let stats = model_stats(&cfg)?;
            println!("model {model}");
            println!("total {}", stats.param_count);
            for (module, count) in &stats.per_module {
                println!("  {module} {count}");
            }
            fs::create_dir_all(&out)?;
            let js = out.join("stats.json");
            let modules: serde_json::Map<String, Value> = stats
                .per_module
                .iter()
                .map(|(m, c)| (m.clone(), json!(c)))
                .collect();
            fs::write(
                &js,
                serde_json::to_string_pretty(&json!({
                    "model": model, "total": stats.param_count, "modules": modules,
                }))?,
            )?;
            Ok(vec![js])
        }
    }
}

// -------------------------------------------------------------- entry point

fn fallback_out(cmd: &Cmd) -> (&'static str, PathBuf) {
    match cmd {
        Cmd::MakeData(a) => ("make-data", a.out.clone()),
        Cmd::Train(a) => (
            "train",
            a.out.clone().unwrap_or_else(|| default_out("train")),
        ),
        Cmd::Eval(a) => ("eval", a.out.clone().unwrap_or_else(|| default_out("eval"))),
        Cmd::Infer(a) => (
            "infer",
            a.out.clone().unwrap_or_else(|| default_out("infer")),
        ),
        Cmd::Ablate(a) => (
            "ablate",
            a.out.clone().unwrap_or_else(|| default_out("ablate")),
        ),
        Cmd::Stats(a) => (
            "stats",
            a.out.clone().unwrap_or_else(|| default_out("stats")),
        ),
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn run_command(cmd: &Cmd) -> i32 {
    let started = now_rfc3339();
    let prep = match prepare(cmd) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            let (command, out_dir) = fallback_out(cmd);
            let code = e.exit_code();
            let _ = write_manifest(
                &out_dir,
                &RunManifest {
                    command: command.into(),
                    resolved: Value::Null,
                    seed: None,
                    artifacts: vec![],
                    started,
                    ended: now_rfc3339(),
                    exit_status: code,
                    error: Some(e.to_string()),
                },
            );
            return code;
        }
    };
    let Prep {
        command,
        out_dir,
        resolved,
        seed,
        job,
    } = prep;
    match execute(job) {
        Ok(artifacts) => {
            let m = RunManifest {
                command: command.into(),
                resolved,
                seed,
                artifacts,
                started,
                ended: now_rfc3339(),
                exit_status: 0,
                error: None,
            };
            match write_manifest(&out_dir, &m) {
                Ok(_) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            let _ = write_manifest(
                &out_dir,
                &RunManifest {
                    command: command.into(),
                    resolved,
                    seed,
                    artifacts: vec![],
                    started,
                    ended: now_rfc3339(),
                    exit_status: code,
                    error: Some(e.to_string()),
                },
            );
            code
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    run_command(&cli.cmd)
}
