//! (B, lambda) sweep harness: runs the full pipeline per grid cell, writes
//! one CSV row per cell, and resumes from completed cells via their
//! manifests. Cells are pure functions of the configuration, so parallel
//! execution and resume cannot change any byte of the output.

use crate::checkpoint::{self, write_atomic};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::manifest::RunManifest;
use crate::pipeline::{self, Prepared};
use crate::trainer::EpochLog;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub b: f64,
    pub lambda: f64,
}

impl CellSpec {
    pub fn run_id(&self) -> String {
        format!("b{}_lam{}", self.b, self.lambda)
    }
}

/// Default grid: the B grid at the configured lambda anchor plus the lambda
/// grid at the configured B anchor; the full cross product on request.
pub fn grid(cfg: &TrainConfig) -> Vec<CellSpec> {
    if cfg.sweep_full_cross {
        cfg.sweep_b_grid
            .iter()
            .flat_map(|&b| cfg.sweep_lambda_grid.iter().map(move |&l| CellSpec { b, lambda: l }))
            .collect()
    } else {
        let mut cells: Vec<CellSpec> = cfg
            .sweep_b_grid
            .iter()
            .map(|&b| CellSpec { b, lambda: cfg.lambda_penalty })
            .collect();
        cells.extend(cfg.sweep_lambda_grid.iter().map(|&l| CellSpec { b: cfg.b, lambda: l }));
        cells
    }
}

pub fn csv_header(k_privacy: usize) -> String {
    let mut cols = vec![
        "run_id", "protocol", "B", "lambda", "mu", "tau", "seed", "top1", "cmap", "f1",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for k in 0..k_privacy {
        cols.push(format!("ap_attr_{k}"));
    }
    cols.push("l_penalty_final".into());
    cols.push("wall_seconds".into());
    cols.join(",")
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// One data row in the sweep schema. `metrics` is None for a failed cell,
/// which leaves every metric field as the NA flag.
pub fn csv_row(
    run_id: &str,
    protocol: &str,
    cfg: &TrainConfig,
    spec: CellSpec,
    metrics: Option<(&pipeline::CellOutcome, f64)>,
) -> String {
    let mut cols = vec![
        run_id.to_string(),
        protocol.to_string(),
        spec.b.to_string(),
        spec.lambda.to_string(),
        cfg.mu.to_string(),
        cfg.tau.to_string(),
        cfg.seed.to_string(),
    ];
    match metrics {
        Some((cell, wall)) => {
            cols.push(fmt_metric(cell.top1));
            cols.push(fmt_metric(cell.privacy.cmap));
            cols.push(fmt_metric(cell.privacy.f1));
            for k in 0..cfg.gen.k_privacy {
                let ap = cell.privacy.per_attribute_ap[k];
                cols.push(if ap.is_nan() { "NA".into() } else { fmt_metric(ap) });
            }
            cols.push(fmt_metric(cell.l_penalty_final));
            cols.push(fmt_metric(wall));
        }
        None => {
            cols.extend(std::iter::repeat_n("NA".to_string(), 3 + cfg.gen.k_privacy + 2));
        }
    }
    cols.join(",")
}

pub fn curves_csv(curves: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_t,l_b,l_penalty,l_a,wall_seconds\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.epoch,
            fmt_metric(c.l_t),
            fmt_metric(c.l_b),
            fmt_metric(c.l_penalty),
            fmt_metric(c.l_a),
            fmt_metric(c.wall)
        ));
    }
    out
}

pub struct SweepOutcome {
    pub csv_path: PathBuf,
    pub rows: usize,
    pub failed_cells: Vec<String>,
    pub reused_cells: Vec<String>,
}

fn cell_config(base: &TrainConfig, spec: CellSpec) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.b = spec.b;
    cfg.lambda_penalty = spec.lambda;
    cfg
}

/// Runs every grid cell (in parallel with `cfg.jobs` workers), reusing cells
/// whose manifests verify, and assembles the sweep CSV in grid order.
pub fn run_sweep(cfg: &TrainConfig, out_dir: &Path) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new("sweep", cfg);
    let prepared = pipeline::prepare(cfg)?;
    manifest
        .dataset_digests
        .insert("action".into(), prepared.splits.action.digest());
    manifest
        .dataset_digests
        .insert("privacy".into(), prepared.splits.privacy.digest());

    let cells = grid(cfg);
    let results: Vec<Mutex<Option<(String, bool, bool)>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.jobs.min(cells.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let spec = cells[i];
                let row = run_or_reuse_cell(cfg, spec, &prepared, out_dir);
                *results[i].lock().unwrap() = Some(row);
            });
        }
    });

    let mut csv = csv_header(cfg.gen.k_privacy);
    csv.push('\n');
    let mut failed = Vec::new();
    let mut reused = Vec::new();
    for (i, slot) in results.iter().enumerate() {
        let (row, ok, was_reused) =
            slot.lock().unwrap().take().expect("worker left a cell unfinished");
        csv.push_str(&row);
        csv.push('\n');
        if !ok {
            failed.push(cells[i].run_id());
        }
        if was_reused {
            reused.push(cells[i].run_id());
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    manifest
        .output_digests
        .insert("sweep.csv".into(), checkpoint::file_digest(&csv_path)?);
    for id in &failed {
        manifest.notes.push(format!("cell {id} failed"));
    }
    for id in &reused {
        manifest.notes.push(format!("cell {id} reused from a previous run"));
    }
    manifest.finish();
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(SweepOutcome { csv_path, rows: cells.len(), failed_cells: failed, reused_cells: reused })
}

/// Returns (csv row, succeeded, reused).
fn run_or_reuse_cell(
    base: &TrainConfig,
    spec: CellSpec,
    prepared: &Prepared,
    out_dir: &Path,
) -> (String, bool, bool) {
    let cell_cfg = cell_config(base, spec);
    let cell_dir = out_dir.join("cells").join(spec.run_id());
    let manifest_path = cell_dir.join("manifest.json");

    if let Ok(m) = RunManifest::load(&manifest_path) {
        if m.config_digest == cell_cfg.digest() && m.outputs_verify(&cell_dir) {
            if let Ok(row) = std::fs::read_to_string(cell_dir.join("row.csv")) {
                return (row.trim_end().to_string(), true, true);
            }
        }
    }

    match run_cell_to_dir(&cell_cfg, spec, prepared, &cell_dir) {
        Ok(row) => (row, true, false),
        Err(e) => {
            let row = csv_row(&spec.run_id(), "known-data", &cell_cfg, spec, None);
            let mut m = RunManifest::new("sweep-cell", &cell_cfg);
            m.notes.push(format!("cell failed: {e}"));
            m.finish();
            let _ = std::fs::create_dir_all(&cell_dir);
            let _ = m.save(&manifest_path);
            (row, false, false)
        }
    }
}

fn run_cell_to_dir(
    cfg: &TrainConfig,
    spec: CellSpec,
    prepared: &Prepared,
    cell_dir: &Path,
) -> Result<String> {
    std::fs::create_dir_all(cell_dir)?;
    let cell = pipeline::run_cell(cfg, spec.b, spec.lambda, prepared)?;
    let row = csv_row(&spec.run_id(), "known-data", cfg, spec, Some((&cell, cell.wall_seconds)));

    let mut manifest = RunManifest::new("sweep-cell", cfg);
    write_atomic(cell_dir.join("curves.csv").as_path(), curves_csv(&cell.curves).as_bytes())?;
    write_atomic(cell_dir.join("row.csv").as_path(), format!("{row}\n").as_bytes())?;
    let (meta, arrays) = cell.state.to_arrays(cfg);
    checkpoint::save(cell_dir.join("a_star.ckpt").as_path(), &meta, &arrays)?;
    for name in ["curves.csv", "row.csv", "a_star.ckpt"] {
        manifest
            .output_digests
            .insert(name.into(), checkpoint::file_digest(&cell_dir.join(name))?);
    }
    manifest.finish();
    manifest.save(&cell_dir.join("manifest.json"))?;
    Ok(row)
}
