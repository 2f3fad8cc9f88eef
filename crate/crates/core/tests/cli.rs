//! End-to-end runs of the installed binary: artifact layout, exit codes,
//! reproducibility, and the documented failure modes.

use msvsr::data::{bd_degrade, load_sequence, save_frame, DegradationSpec};
use msvsr::model::ModelConfig;
use msvsr::train::{save_checkpoint, train, TrainConfig, TrainOptions};
use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_msvsr");

fn run(args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    cmd.env_remove("MSVSR_DATA_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn msvsr");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn make_data(dir: &Path, clips: usize, frames: usize, hr: usize) {
    let (code, _, err) = run(
        &[
            "make-data",
            "--out",
            dir.to_str().unwrap(),
            "--clips",
            &clips.to_string(),
            "--frames",
            &frames.to_string(),
            "--hr-size",
            &hr.to_string(),
            "--motion",
            "1",
            "--seed",
            "13",
        ],
        &[],
    );
    assert_eq!(code, 0, "make-data failed: {err}");
}

fn manifest(dir: &Path) -> serde_json::Value {
    let raw = fs::read_to_string(dir.join("run_manifest.json")).expect("run_manifest.json");
    serde_json::from_str(&raw).unwrap()
}

fn png_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_data_is_reproducible_and_validates_size() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    make_data(&a, 2, 3, 32);
    make_data(&b, 2, 3, 32);
    let pa = png_bytes(&a);
    assert_eq!(pa.len(), 6);
    assert_eq!(pa, png_bytes(&b), "same seed must give identical bytes");
    assert!(a.join("manifest.json").is_file());
    assert_eq!(manifest(&a)["exit_status"], 0);

    let c = tmp.path().join("c");
    let (code, _, err) = run(
        &["make-data", "--out", c.to_str().unwrap(), "--hr-size", "63"],
        &[],
    );
    assert_eq!(code, 3, "stderr: {err}");
    assert!(manifest(&c)["error"].as_str().unwrap().contains("63"));
}

#[test]
fn train_writes_artifacts_and_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, 1, 3, 32);
    let common = [
        "--model", "tiny", "--iters", "6", "--batch", "1", "--patch", "8", "--frames", "2",
        "--seed", "3",
    ];
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    for r in [&r1, &r2] {
        let mut args: Vec<&str> = vec!["train"];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--data", data.to_str().unwrap(), "--out", r.to_str().unwrap()]);
        let (code, _, err) = run(&args, &[]);
        assert_eq!(code, 0, "train failed: {err}");
    }
    assert!(r1.join("ckpt_final.bin").is_file());
    let csv1 = fs::read_to_string(r1.join("train_log.csv")).unwrap();
    assert_eq!(csv1.lines().count(), 7, "header plus one row per iteration");
    assert_eq!(csv1, fs::read_to_string(r2.join("train_log.csv")).unwrap());
    let m = manifest(&r1);
    assert_eq!(m["command"], "train");
    assert_eq!(m["exit_status"], 0);
    assert!(m["error"].is_null());

    // Resuming under a different model preset contradicts the checkpoint.
    let (code, _, err) = run(
        &[
            "train",
            "--resume",
            r1.join("ckpt_final.bin").to_str().unwrap(),
            "--model",
            "pp-msvsr",
            "--data",
            data.to_str().unwrap(),
            "--out",
            tmp.path().join("r3").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn data_root_env_substitutes_for_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, 1, 2, 32);
    let out = tmp.path().join("run");
    let (code, _, err) = run(
        &[
            "train", "--model", "tiny", "--iters", "1", "--batch", "1", "--patch", "8",
            "--frames", "2", "--out", out.to_str().unwrap(),
        ],
        &[("MSVSR_DATA_ROOT", data.to_str().unwrap())],
    );
    assert_eq!(code, 0, "stderr: {err}");

    let (code, _, _) = run(&["train", "--model", "tiny", "--iters", "1"], &[]);
    assert_eq!(code, 2, "no data root anywhere is a config error");
}

#[test]
fn eval_compare_dirs_and_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, 1, 2, 32);
    let clip = data.join("clip000");
    let out = tmp.path().join("cmp");
    let (code, stdout, err) = run(
        &[
            "eval",
            "--compare-dirs",
            clip.to_str().unwrap(),
            clip.to_str().unwrap(),
            "--channel-mode",
            "rgb",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "stderr: {err}");
    assert!(stdout.contains("psnr inf"), "stdout: {stdout}");
    let tsv = fs::read_to_string(out.join("report.tsv")).unwrap();
    let mean = tsv.lines().last().unwrap();
    assert!(mean.starts_with("mean\t") && mean.contains("\tinf\t") && mean.contains("1.000000"));

    let (code, _, _) = run(
        &[
            "eval",
            "--ckpt",
            tmp.path().join("nope.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            tmp.path().join("e2").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 3);
}

#[test]
fn infer_zero_weights_reduce_to_bilinear_and_mirror_names() {
    let tmp = tempfile::tempdir().unwrap();

    // A checkpoint whose weights are all zero: the network must act as a
    // pure bilinear x4 upsampler.
    let mc = ModelConfig::tiny();
    let mut tc = TrainConfig::desk();
    tc.total_iters = 0;
    tc.flow_freeze_iters = 0;
    tc.batch_size = 1;
    tc.patch_size = 8;
    tc.n_frames = 2;
    let clips = msvsr::data::make_synthetic_dataset(1, 2, 32, 1, 3).unwrap();
    let mut ckpt = train(&mc, &tc, &clips, &TrainOptions::default())
        .unwrap()
        .checkpoint;
    for w in &mut ckpt.weights {
        w.fill(0.0);
    }
    let ckpt_path = tmp.path().join("zero.bin");
    save_checkpoint(&ckpt, &ckpt_path).unwrap();

    // LR input frames on disk, named like a real clip.
    let hr = &clips[0].0;
    let lr = bd_degrade(hr, &DegradationSpec::default()).unwrap();
    let in_dir = tmp.path().join("lr");
    fs::create_dir_all(&in_dir).unwrap();
    for (i, f) in lr.frames.iter().enumerate() {
        save_frame(f, &in_dir.join(format!("{i:08}.png"))).unwrap();
    }

    let out_dir = tmp.path().join("sr");
    let (code, _, err) = run(
        &[
            "infer",
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--in",
            in_dir.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "stderr: {err}");

    let mut names: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    assert_eq!(names, vec!["00000000.png", "00000001.png"]);

    // Byte-for-byte expectation built from the library path.
    let lr_disk = load_sequence(&in_dir, "*.png").unwrap();
    let want_dir = tmp.path().join("want");
    fs::create_dir_all(&want_dir).unwrap();
    for (i, f) in lr_disk.frames.iter().enumerate() {
        let f4 = f.clone().insert_axis(ndarray::Axis(0));
        let up = msvsr::autodiff::resample::bilinear_up_forward(&f4, 4)
            .index_axis_move(ndarray::Axis(0), 0);
        save_frame(&up, &want_dir.join(format!("{i:08}.png"))).unwrap();
    }
    for n in &names {
        assert_eq!(
            fs::read(out_dir.join(n)).unwrap(),
            fs::read(want_dir.join(n)).unwrap(),
            "frame {n} differs from bilinear upsampling"
        );
    }
}

#[test]
fn aux_out_requires_an_aux_head() {
    let tmp = tempfile::tempdir().unwrap();
    let mut mc = ModelConfig::tiny();
    mc.use_aux_loss = false;
    let mut tc = TrainConfig::desk();
    tc.total_iters = 0;
    tc.flow_freeze_iters = 0;
    tc.batch_size = 1;
    tc.patch_size = 8;
    tc.n_frames = 2;
    let clips = msvsr::data::make_synthetic_dataset(1, 2, 32, 1, 3).unwrap();
    let ckpt = train(&mc, &tc, &clips, &TrainOptions::default())
        .unwrap()
        .checkpoint;
    let ckpt_path = tmp.path().join("noaux.bin");
    save_checkpoint(&ckpt, &ckpt_path).unwrap();

    let in_dir = tmp.path().join("lr");
    fs::create_dir_all(&in_dir).unwrap();
    save_frame(&clips[0].1.frames[0], &in_dir.join("0.png")).unwrap();

    let (code, _, err) = run(
        &[
            "infer",
            "--ckpt",
            ckpt_path.to_str().unwrap(),
            "--in",
            in_dir.to_str().unwrap(),
            "--out",
            tmp.path().join("sr").to_str().unwrap(),
            "--aux-out",
            tmp.path().join("aux").to_str().unwrap(),
        ],
        &[],
    );
    assert_ne!(code, 0);
    assert!(err.contains("auxiliary"), "stderr: {err}");
}

#[test]
fn stats_reports_param_totals_and_rejects_unknown() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, target) in [("pp-msvsr", 1_450_000.0), ("pp-msvsr-l", 7_400_000.0)] {
        let out = tmp.path().join(name);
        let (code, stdout, err) = run(
            &["stats", "--model", name, "--out", out.to_str().unwrap()],
            &[],
        );
        assert_eq!(code, 0, "stderr: {err}");
        let total: f64 = stdout
            .lines()
            .find_map(|l| l.strip_prefix("total "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(
            (total - target).abs() / target < 0.25,
            "{name}: {total} vs {target}"
        );
        assert!(out.join("stats.json").is_file());
    }
    let (code, _, _) = run(
        &[
            "stats", "--model", "nonsense", "--out", tmp.path().join("x").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 2);
}

#[test]
fn ablate_runs_selected_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_data(&data, 1, 3, 32);
    let out = tmp.path().join("abl");
    let (code, stdout, err) = run(
        &[
            "ablate", "--variants", "A,full", "--model", "tiny", "--iters", "6", "--batch", "1",
            "--patch", "8", "--frames", "2", "--seed", "4",
            "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 0, "stderr: {err}");
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("A\t") && rows[1].starts_with("full\t"));
    assert!(stdout.contains("| A |") && stdout.contains("| full |"));
    assert!(out.join("ablation.md").is_file());
}

#[test]
fn help_lists_every_train_flag() {
    let (code, stdout, _) = run(&["train", "--help"], &[]);
    assert_eq!(code, 0);
    for flag in [
        "--model", "--iters", "--batch", "--patch", "--frames", "--seed", "--aux-weight",
        "--no-lfm", "--no-ram", "--no-aux", "--resume", "--out", "--config", "--data",
    ] {
        assert!(stdout.contains(flag), "help is missing {flag}");
    }
    let (code, stdout, _) = run(&["--help"], &[]);
    assert_eq!(code, 0);
    for sub in ["make-data", "train", "eval", "infer", "ablate", "stats"] {
        assert!(stdout.contains(sub), "help is missing {sub}");
    }
}
