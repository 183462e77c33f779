use anonybench_core::checkpoint::{self, write_atomic};
use anonybench_core::config::TrainConfig;
use anonybench_core::manifest::RunManifest;
use anonybench_core::pipeline::{
    self, load_anonymizer_checkpoint, save_anonymizer_checkpoint, ProbeKind,
};
use anonybench_core::sweep;
use anonybench_core::synthdata::make_splits;
use anonybench_core::trainer::anonymized_frames;
use anonybench_core::{ppm, Error, Result};
use std::path::Path;

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got {item:?}")));
        };
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn record_outputs(manifest: &mut RunManifest, dir: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        manifest
            .output_digests
            .insert((*name).to_string(), checkpoint::file_digest(&dir.join(name))?);
    }
    Ok(())
}

pub fn pretrain(config: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let dir = out.join("pretrain");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("pretrain", &cfg);

    let splits = make_splits(&cfg.gen, cfg.seed)?;
    manifest.dataset_digests.insert("action".into(), splits.action.digest());
    let (anon, curve, holdout_mae) = pipeline::pretrain(&cfg, &splits)?;

    let ckpt = dir.join("anonymizer.ckpt");
    save_anonymizer_checkpoint(
        &ckpt,
        &anon,
        &cfg,
        serde_json::json!({"holdout_mae": holdout_mae, "epochs": cfg.epochs_pretrain}),
    )?;
    let mut log = String::from("epoch,l1\n");
    for (e, v) in curve.iter().enumerate() {
        log.push_str(&format!("{e},{v:.6}\n"));
    }
    write_atomic(&dir.join("pretrain_log.csv"), log.as_bytes())?;

    record_outputs(&mut manifest, &dir, &["anonymizer.ckpt", "pretrain_log.csv"])?;
    manifest.finish();
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "pretrained {} epochs, held-out MAE {holdout_mae:.4}; checkpoint at {}",
        cfg.epochs_pretrain,
        ckpt.display()
    );
    Ok(())
}

pub fn train(config: &Path, overrides: &[String], pretrained: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let dir = out.join("train");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("train", &cfg);
    manifest
        .input_digests
        .insert("pretrained".into(), checkpoint::file_digest(pretrained).map_err(into_config)?);

    let anon = load_anonymizer_checkpoint(pretrained, &cfg)?;
    let splits = make_splits(&cfg.gen, cfg.seed)?;
    manifest.dataset_digests.insert("action".into(), splits.action.digest());
    manifest.dataset_digests.insert("privacy".into(), splits.privacy.digest());

    let utility_init = anonybench_core::trainer::init_utility(&cfg, &splits)?;
    let prepared = pipeline::Prepared {
        splits,
        pretrained: anon,
        pretrain_curve: Vec::new(),
        holdout_mae: f64::NAN,
        utility_init,
    };
    let state = pipeline::train_anonymization(&cfg, &prepared)?;

    let (meta, arrays) = state.to_arrays(&cfg);
    checkpoint::save(&dir.join("a_star.ckpt"), &meta, &arrays)?;
    write_atomic(&dir.join("curves.csv"), sweep::curves_csv(&state.curves).as_bytes())?;

    record_outputs(&mut manifest, &dir, &["a_star.ckpt", "curves.csv"])?;
    manifest.finish();
    manifest.save(&dir.join("manifest.json"))?;
    let last = state.curves.last();
    println!(
        "trained {} epochs; final l_t {:.4}, l_b {:.4}, l_penalty {:.4}",
        state.epoch,
        last.map(|c| c.l_t).unwrap_or(f64::NAN),
        last.map(|c| c.l_b).unwrap_or(f64::NAN),
        last.map(|c| c.l_penalty).unwrap_or(f64::NAN),
    );
    Ok(())
}

fn into_config(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("cannot read input file: {io}")),
        other => other,
    }
}

pub fn probe(
    config: &Path,
    overrides: &[String],
    ckpt: &Path,
    kind: &str,
    novel_eval: bool,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let kind: ProbeKind = kind.parse()?;
    let dir = out.join("probe");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("probe", &cfg);
    manifest
        .input_digests
        .insert("checkpoint".into(), checkpoint::file_digest(ckpt).map_err(into_config)?);

    let anon = load_anonymizer_checkpoint(ckpt, &cfg)?;
    let splits = make_splits(&cfg.gen, cfg.seed)?;
    let report = pipeline::run_probe(&cfg, Some(&anon), kind, novel_eval, &splits)?;

    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&dir.join("metrics.json"), &json)?;

    let mut csv = sweep::csv_header(cfg.gen.k_privacy);
    csv.push('\n');
    csv.push_str(&metrics_csv_row(&cfg, &report));
    csv.push('\n');
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;

    for a in &report.excluded_attributes {
        manifest.notes.push(format!("attribute {a} excluded from cMAP (no positives)"));
    }
    record_outputs(&mut manifest, &dir, &["metrics.json", "metrics.csv"])?;
    manifest.finish();
    manifest.save(&dir.join("manifest.json"))?;
    match (report.top1, report.cmap) {
        (Some(t), _) => println!("probe top1 {t:.4} ({})", report.protocol),
        (_, Some(c)) => {
            println!("probe cMAP {c:.4}, F1 {:.4} ({})", report.f1.unwrap_or(f64::NAN), report.protocol)
        }
        _ => {}
    }
    Ok(())
}

fn metrics_csv_row(cfg: &TrainConfig, report: &anonybench_core::metrics::MetricsReport) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
    let mut cols = vec![
        "probe".to_string(),
        report.protocol.to_string(),
        cfg.b.to_string(),
        cfg.lambda_penalty.to_string(),
        cfg.mu.to_string(),
        cfg.tau.to_string(),
        cfg.seed.to_string(),
        fmt(report.top1),
        fmt(report.cmap),
        fmt(report.f1),
    ];
    for k in 0..cfg.gen.k_privacy {
        let ap = report.per_attribute_ap.get(k).copied().unwrap_or(f64::NAN);
        cols.push(if ap.is_nan() { "NA".into() } else { format!("{ap:.6}") });
    }
    cols.push("NA".into()); // l_penalty_final is a training-run quantity
    cols.push(format!("{:.6}", 0.0));
    cols.join(",")
}

pub fn sweep(config: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let outcome = sweep::run_sweep(&cfg, &out.join("sweep"))?;
    println!(
        "sweep wrote {} rows to {} ({} reused, {} failed)",
        outcome.rows,
        outcome.csv_path.display(),
        outcome.reused_cells.len(),
        outcome.failed_cells.len()
    );
    Ok(())
}

pub fn dump_frames(
    config: &Path,
    overrides: &[String],
    ckpt: &Path,
    clips: &str,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    if cfg.gen.channels != 3 {
        return Err(Error::Config("PPM export needs 3-channel frames".into()));
    }
    let indices: Result<Vec<usize>> = clips
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad clip index {s:?}")))
        })
        .collect();
    let indices = indices?;

    let dir = out.join("frames");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("dump-frames", &cfg);
    manifest
        .input_digests
        .insert("checkpoint".into(), checkpoint::file_digest(ckpt).map_err(into_config)?);

    let anon = load_anonymizer_checkpoint(ckpt, &cfg)?;
    let splits = make_splits(&cfg.gen, cfg.seed)?;
    let (h, w) = (cfg.gen.height, cfg.gen.width);
    let flen = cfg.gen.channels * h * w;
    let mut written = Vec::new();
    for &ci in &indices {
        let clip = splits.action.eval.get(ci).ok_or_else(|| {
            Error::Config(format!(
                "clip index {ci} out of range ({} eval clips)",
                splits.action.eval.len()
            ))
        })?;
        let anonymized = anonymized_frames(Some(&anon), std::slice::from_ref(clip), &cfg)?;
        for t in 0..clip.t {
            let raw_name = format!("clip{ci:03}_f{t}_raw.ppm");
            ppm::write_ppm(&dir.join(&raw_name), clip.frame(t), h, w)?;
            let anon_name = format!("clip{ci:03}_f{t}_B{}.ppm", cfg.b);
            ppm::write_ppm(&dir.join(&anon_name), &anonymized[0][t * flen..(t + 1) * flen], h, w)?;
            written.push(raw_name);
            written.push(anon_name);
        }
    }
    let names: Vec<&str> = written.iter().map(|s| s.as_str()).collect();
    record_outputs(&mut manifest, &dir, &names)?;
    manifest.finish();
    manifest.save(&dir.join("manifest.json"))?;
    println!("wrote {} frames to {}", written.len(), dir.display());
    Ok(())
}

pub fn gen_data(config: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    if cfg.gen.channels != 3 {
        return Err(Error::Config("PPM export needs 3-channel frames".into()));
    }
    let dir = out.join("data");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("gen-data", &cfg);
    let splits = make_splits(&cfg.gen, cfg.seed)?;
    manifest.dataset_digests.insert("action".into(), splits.action.digest());
    manifest.dataset_digests.insert("privacy".into(), splits.privacy.digest());

    let (h, w) = (cfg.gen.height, cfg.gen.width);
    let mut labels = serde_json::Map::new();
    for (name, clips) in [
        ("action_train", &splits.action.train),
        ("action_eval", &splits.action.eval),
        ("privacy_train", &splits.privacy.train),
        ("privacy_eval", &splits.privacy.eval),
    ] {
        let subdir = dir.join(name);
        std::fs::create_dir_all(&subdir)?;
        let mut entries = Vec::new();
        for (i, clip) in clips.iter().enumerate() {
            for t in 0..clip.t {
                ppm::write_ppm(&subdir.join(format!("c{i:04}_f{t:02}.ppm")), clip.frame(t), h, w)?;
            }
            entries.push(serde_json::json!({
                "clip": i,
                "frames": clip.t,
                "y_t": clip.y_t,
                "y_b": clip.y_b,
                "seed": clip.seed,
            }));
        }
        labels.insert(name.to_string(), serde_json::Value::Array(entries));
    }
    let mut bytes = serde_json::to_vec_pretty(&serde_json::Value::Object(labels))?;
    bytes.push(b'\n');
    write_atomic(&dir.join("labels.json"), &bytes)?;

    record_outputs(&mut manifest, &dir, &["labels.json"])?;
    manifest.finish();
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "generated {} action clips and {} privacy stills under {}",
        splits.action.train.len() + splits.action.eval.len(),
        splits.privacy.train.len() + splits.privacy.eval.len(),
        dir.display()
    );
    Ok(())
}
