//! Black-box tests of the command-line contract: exit codes, artifact
//! layout, determinism of produced files, and the PPM format.

use anonybench_core::checkpoint::file_digest;
use anonybench_core::config::TrainConfig;
use anonybench_core::manifest::RunManifest;
use anonybench_core::synthdata::make_splits;
use anonybench_core::{ppm, rng};
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_anonybench");

const TINY_CONFIG: &str = "\
gen.height = 8\n\
gen.width = 8\n\
gen.frames = 4\n\
gen.train_clips = 24\n\
gen.eval_clips = 16\n\
gen.train_privacy = 24\n\
gen.eval_privacy = 16\n\
width_anonymizer = 4\n\
width_utility = 4\n\
width_budget = 4\n\
proj_dim = 8\n\
proj_hidden = 16\n\
budget_feat = 16\n\
batch_action = 8\n\
batch_privacy = 8\n\
skip = 2\n\
epochs_pretrain = 6\n\
epochs_anon = 2\n\
epochs_action = 4\n\
epochs_privacy = 4\n\
epochs_utility_init = 2\n\
lr_utility = 0.1\n\
lr_budget = 0.2\n\
sweep.b_grid = 0.3\n\
sweep.lambda_grid = 1.0\n\
";

struct Workdir {
    dir: PathBuf,
}

impl Workdir {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("anonybench-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("tiny.cfg"), TINY_CONFIG).unwrap();
        Workdir { dir }
    }

    fn cfg(&self) -> PathBuf {
        self.dir.join("tiny.cfg")
    }

    fn out(&self) -> PathBuf {
        self.dir.join("out")
    }

    fn run(&self, args: &[&str]) -> std::process::Output {
        Command::new(BIN)
            .current_dir(&self.dir)
            .env_remove("ANONYBENCH_OUT")
            .args(args)
            .output()
            .unwrap()
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn parsed_tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_lines(TINY_CONFIG).unwrap();
    cfg
}

#[test]
fn missing_config_exits_2() {
    let w = Workdir::new("missing-config");
    let out = w.run(&["pretrain", "--config", "nope.cfg"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let w = Workdir::new("bad-key");
    std::fs::write(w.dir.join("bad.cfg"), "definitely_not_a_key = 1\n").unwrap();
    let out = w.run(&["pretrain", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("definitely_not_a_key"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_probe_kind_exits_2() {
    let w = Workdir::new("bad-probe");
    let p = w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"]);
    assert_eq!(code(&p), 0, "{}", String::from_utf8_lossy(&p.stderr));
    let out = w.run(&[
        "probe",
        "--config",
        "tiny.cfg",
        "--checkpoint",
        "out/pretrain/anonymizer.ckpt",
        "--kind",
        "mystery",
        "--out",
        "out",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unwritable_output_exits_4() {
    let w = Workdir::new("unwritable");
    // the config file itself cannot be a directory root
    let out = w.run(&["pretrain", "--config", "tiny.cfg", "--out", "tiny.cfg/sub"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn incompatible_checkpoint_exits_2() {
    let w = Workdir::new("incompat");
    let p = w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"]);
    assert_eq!(code(&p), 0);
    // widths changed: shapes in the checkpoint no longer match
    let out = w.run(&[
        "train",
        "--config",
        "tiny.cfg",
        "--pretrained",
        "out/pretrain/anonymizer.ckpt",
        "--set",
        "width_anonymizer=8",
        "--out",
        "out",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_writes_verifiable_artifacts_and_is_deterministic() {
    let w = Workdir::new("pretrain-det");
    assert_eq!(code(&w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"])), 0);
    let ckpt = w.out().join("pretrain/anonymizer.ckpt");
    assert!(ckpt.exists());

    let manifest = RunManifest::load(&w.out().join("pretrain/manifest.json")).unwrap();
    assert!(manifest.outputs_verify(&w.out().join("pretrain")));
    assert_eq!(manifest.config_digest, parsed_tiny_config().digest());

    let first = file_digest(&ckpt).unwrap();
    assert_eq!(code(&w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"])), 0);
    assert_eq!(file_digest(&ckpt).unwrap(), first, "rerun changed the checkpoint bytes");
}

#[test]
fn env_var_overrides_output_root() {
    let w = Workdir::new("envvar");
    let out = Command::new(BIN)
        .current_dir(&w.dir)
        .env("ANONYBENCH_OUT", "envout")
        .args(["pretrain", "--config", "tiny.cfg"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(w.dir.join("envout/pretrain/anonymizer.ckpt").exists());
}

#[test]
fn dumped_ppm_files_round_trip_the_quantized_frames() {
    let w = Workdir::new("ppm");
    assert_eq!(code(&w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"])), 0);
    assert_eq!(
        code(&w.run(&[
            "dump-frames",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "out/pretrain/anonymizer.ckpt",
            "--clips",
            "0",
            "--out",
            "out",
        ])),
        0
    );
    // the raw dump must equal the quantized generator output bit-exactly
    let cfg = parsed_tiny_config();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let clip = &splits.action.eval[0];
    for t in 0..clip.t {
        let path = w.out().join(format!("frames/clip000_f{t}_raw.ppm"));
        let (bytes, h, ww) = ppm::read_ppm(&path).unwrap();
        assert_eq!((h, ww), (cfg.gen.height, cfg.gen.width));
        let expected: Vec<u8> = clip.frame(t).iter().map(|&v| ppm::quantize(v)).collect();
        assert_eq!(bytes, expected, "frame {t} differs");
    }
    // anonymized dumps exist with B in the name
    assert!(w.out().join("frames/clip000_f0_B0.3.ppm").exists());
}

#[test]
fn single_cell_sweep_matches_direct_train_run() {
    let w = Workdir::new("sweep-eq");
    assert_eq!(code(&w.run(&["pretrain", "--config", "tiny.cfg", "--out", "out"])), 0);
    assert_eq!(
        code(&w.run(&[
            "train",
            "--config",
            "tiny.cfg",
            "--pretrained",
            "out/pretrain/anonymizer.ckpt",
            "--out",
            "out",
        ])),
        0
    );
    assert_eq!(code(&w.run(&["sweep", "--config", "tiny.cfg", "--out", "out"])), 0);

    // the tiny grid is {B=0.3} x {lambda=1}, i.e. the train config itself
    let direct = file_digest(&w.out().join("train/a_star.ckpt")).unwrap();
    let cell = file_digest(&w.out().join("sweep/cells/b0.3_lam1/a_star.ckpt")).unwrap();
    assert_eq!(direct, cell, "sweep cell diverged from the direct pipeline");

    let direct_curves = std::fs::read(w.out().join("train/curves.csv")).unwrap();
    let cell_curves = std::fs::read(w.out().join("sweep/cells/b0.3_lam1/curves.csv")).unwrap();
    assert_eq!(direct_curves, cell_curves);
}

#[test]
fn interrupted_sweep_resumes_from_completed_cells() {
    let w = Workdir::new("sweep-resume");
    assert_eq!(code(&w.run(&["sweep", "--config", "tiny.cfg", "--out", "out"])), 0);
    let csv = w.out().join("sweep/sweep.csv");
    let first = std::fs::read(&csv).unwrap();

    // drop the aggregate, keep the cells: the rerun must reuse every cell
    std::fs::remove_file(&csv).unwrap();
    let out = w.run(&["sweep", "--config", "tiny.cfg", "--out", "out"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2 reused"), "{stdout}");
    assert_eq!(std::fs::read(&csv).unwrap(), first);
}

#[test]
fn sweep_csv_has_one_row_per_cell_and_stable_schema() {
    let w = Workdir::new("sweep-schema");
    assert_eq!(
        code(&w.run(&[
            "sweep",
            "--config",
            "tiny.cfg",
            "--set",
            "sweep.b_grid=0.3,0.9",
            "--set",
            "sweep.lambda_grid=0.0,1.0",
            "--out",
            "out",
        ])),
        0
    );
    let text = std::fs::read_to_string(w.out().join("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.trim_end().lines().collect();
    assert_eq!(lines.len(), 1 + 4, "header + 2 B-cells + 2 lambda-cells");
    assert!(lines[0].starts_with("run_id,protocol,B,lambda,mu,tau,seed,top1,cmap,f1,ap_attr_0"));
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), lines[0].split(',').count());
    }
}

#[test]
fn gen_data_exports_ppm_sequences_with_label_index() {
    let w = Workdir::new("gendata");
    assert_eq!(code(&w.run(&["gen-data", "--config", "tiny.cfg", "--out", "out"])), 0);
    let labels: serde_json::Value =
        serde_json::from_slice(&std::fs::read(w.out().join("data/labels.json")).unwrap()).unwrap();
    assert_eq!(labels["action_train"].as_array().unwrap().len(), 24);
    assert_eq!(labels["privacy_eval"].as_array().unwrap().len(), 16);
    // 24 clips x 4 frames in action_train
    let count = std::fs::read_dir(w.out().join("data/action_train")).unwrap().count();
    assert_eq!(count, 24 * 4);
    // privacy stills are single frames
    let count = std::fs::read_dir(w.out().join("data/privacy_train")).unwrap().count();
    assert_eq!(count, 24);

    // deterministic dataset digest in the manifest
    let manifest = RunManifest::load(&w.out().join("data/manifest.json")).unwrap();
    let cfg = parsed_tiny_config();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    assert_eq!(manifest.dataset_digests["action"], splits.action.digest());
    let _ = rng::derive(0, 0, 0);
}
