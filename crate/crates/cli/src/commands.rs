use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ifl_core::analysis::{accuracy_chart_svg, build_report, Curve, ExperimentReport, RunSummary, REPORT_FIELDS};
use ifl_core::attack::{score_attack_sweep, to_pnm, DlgConfig, SweepConfig};
use ifl_core::crypto::VERSION;
use ifl_core::protocol::{run_training, RoundRecord, StopRule};

use crate::artifacts::*;
use crate::config::ExperimentConfig;

/// Root for run directories when the config names none.
pub const OUTPUT_ROOT_ENV: &str = "IFL_OUTPUT_ROOT";

pub fn experiment_dir(cfg: &ExperimentConfig, output_root: &Path) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| output_root.to_path_buf()).join(&cfg.name)
}

/// Trains every repetition of `cfg` into `<root>/<name>/rep-NNN` and returns
/// the run directories.
pub fn cmd_train(cfg: &ExperimentConfig, output_root: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let exp_dir = experiment_dir(cfg, output_root);
    let window = match cfg.stop {
        StopRule::Convergence(rule) => rule.window,
        StopRule::Fixed => 1,
    };
    let mut dirs = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let dir = exp_dir.join(format!("rep-{rep:03}"));
        create_fresh_dir(&dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
        let manifest = Manifest {
            experiment: cfg.name.clone(),
            label: cfg.label(),
            repetition: rep,
            master_seed: cfg.seed,
            run_seed: cfg.run_seed(rep),
            rho: cfg.schedule.rho(),
            eta: cfg.eta,
            baseline: cfg.baseline,
            wire_version: VERSION,
            versions: Versions { ifl_core: ifl_core::VERSION.into(), ifl_cli: env!("CARGO_PKG_VERSION").into() },
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;

        let prepared = cfg.prepare(rep)?;
        let run = run_training(&cfg.training(rep)?, &prepared.data)?;
        write_run(&dir, &run, &cfg.snapshot_rounds)?;
        let totals = run.ledger.totals();
        let summary = SummaryFile {
            summary: run.summary(&manifest.label, manifest.rho, cfg.eta, cfg.baseline, window),
            converged_at: run.converged_at,
            rounds_run: run.history.len(),
            enc_ops: totals.enc_ops,
            dec_ops: totals.dec_ops,
        };
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone)]
pub struct AttackOptions {
    pub rounds: Vec<usize>,
    pub images_per_class: usize,
    pub seed: u64,
    pub dlg: DlgConfig,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self { rounds: Vec::new(), images_per_class: 10, seed: 0, dlg: DlgConfig::default() }
    }
}

#[derive(Serialize)]
struct AttackCsvRow {
    round: usize,
    is_authentic: bool,
    image_id: u64,
    class: usize,
    matched_id: u64,
    uqi: f64,
    msssim: f64,
    vif: f64,
    matching_loss: f64,
    iterations: usize,
    recovered_label: usize,
}

/// Attacks the captured rounds of one run directory. Results go to a new
/// `attacks/<tag>` subdirectory; the run's own files are only read.
pub fn cmd_attack(run_dir: &Path, opts: &AttackOptions) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let manifest: Manifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let spec = cfg.spec()?;
    let mask = read_mask(run_dir)?;
    let captures = opts.rounds.iter().map(|&r| read_capture(run_dir, &spec, r)).collect::<Result<Vec<_>>>()?;
    let prepared = cfg.prepare(manifest.repetition)?;
    let sweep = SweepConfig { images_per_class: opts.images_per_class, lr: cfg.local.lr, dlg: opts.dlg, seed: opts.seed };
    let out = score_attack_sweep(&spec, &captures, &mask, &opts.rounds, &prepared.authentic, &prepared.synthetic, &sweep)?;

    let rounds: Vec<String> = opts.rounds.iter().map(|r| r.to_string()).collect();
    let tag = format!("r{}-k{}-s{}", if rounds.is_empty() { "none".into() } else { rounds.join("_") }, opts.images_per_class, opts.seed);
    let dir = run_dir.join("attacks").join(tag);
    create_fresh_dir(&dir)?;
    write_json(&dir.join("options.json"), &serde_json::json!({
        "rounds": opts.rounds,
        "images_per_class": opts.images_per_class,
        "seed": opts.seed,
        "dlg": opts.dlg,
    }))?;
    write_csv(
        &dir.join("attack.csv"),
        out.rows.iter().map(|r| AttackCsvRow {
            round: r.round,
            is_authentic: r.is_authentic,
            image_id: r.image_id,
            class: r.class,
            matched_id: r.matched_id,
            uqi: r.uqi,
            msssim: r.msssim,
            vif: r.vif,
            matching_loss: r.matching_loss,
            iterations: r.iterations,
            recovered_label: r.recovered_label,
        }),
    )?;
    write_csv(&dir.join("rounds.csv"), &out.rounds)?;
    let images = dir.join("images");
    let pools = [&prepared.authentic, &prepared.synthetic];
    for (row, img) in &out.recovered {
        fs::create_dir_all(&images)?;
        let stem = format!("round-{:04}-id{}", row.round, row.image_id);
        let ext = if img.shape()[0] == 1 { "pgm" } else { "ppm" };
        fs::write(images.join(format!("{stem}-recovered.{ext}")), to_pnm(img)?)?;
        let pool = if row.is_authentic { pools[0] } else { pools[1] };
        if let Some(truth) = pool.iter().find(|s| s.id == row.image_id) {
            fs::write(images.join(format!("{stem}-truth.{ext}")), to_pnm(&truth.pixels)?)?;
        }
    }
    Ok(dir)
}

#[derive(Serialize)]
struct ReportCsvRow<'a> {
    label: &'a str,
    rho: f64,
    eta: f64,
    baseline: bool,
    repetitions: usize,
    averaged: usize,
    field: &'a str,
    value: f64,
    delta_pct: Option<f64>,
}

/// Builds the summary table over the runs found under `paths` and writes
/// `report.csv`, `report.txt` and `accuracy.svg` into the new `out` directory.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<ExperimentReport> {
    if paths.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut curves: Vec<Curve> = Vec::new();
    for p in paths {
        for dir in find_runs(p)? {
            let s: SummaryFile = read_json(&dir.join(SUMMARY_FILE))?;
            let history: Vec<RoundRecord> = csv::Reader::from_path(dir.join("history.csv"))
                .with_context(|| format!("reading {}", dir.join("history.csv").display()))?
                .deserialize()
                .collect::<Result<_, _>>()?;
            curves.push(Curve {
                label: format!("{} [{}]", s.summary.label, dir.file_name().unwrap_or_default().to_string_lossy()),
                points: history.iter().map(|h| h.test_accuracy).collect(),
            });
            summaries.push(s.summary);
        }
    }
    let report = build_report(&summaries)?;
    create_fresh_dir(out)?;
    let mut rows = Vec::new();
    for r in &report.rows {
        for (i, field) in REPORT_FIELDS.iter().enumerate() {
            rows.push(ReportCsvRow {
                label: &r.label,
                rho: r.rho,
                eta: r.eta,
                baseline: r.baseline,
                repetitions: r.repetitions,
                averaged: r.averaged,
                field,
                value: r.values[i],
                delta_pct: r.deltas_pct[i],
            });
        }
    }
    write_csv(&out.join("report.csv"), rows)?;
    fs::write(out.join("report.txt"), report.to_text_table())?;
    fs::write(out.join("accuracy.svg"), accuracy_chart_svg(&curves))?;
    Ok(report)
}
