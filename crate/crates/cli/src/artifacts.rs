use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ifl_core::analysis::RunSummary;
use ifl_core::crypto::{EncryptionMask, MaskedModel};
use ifl_core::nn::{ModelParams, ModelSpec};
use ifl_core::protocol::{DatasetKind, Direction, RoundCapture, TrainingRun};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Everything needed to reproduce a run directory besides `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub label: String,
    pub repetition: usize,
    pub master_seed: u64,
    pub run_seed: u64,
    pub rho: f64,
    pub eta: f64,
    pub baseline: bool,
    pub wire_version: u16,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub ifl_core: String,
    pub ifl_cli: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub converged_at: Option<usize>,
    pub rounds_run: usize,
    pub enc_ops: u64,
    pub dec_ops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaptureMeta {
    round: usize,
    is_authentic: bool,
    clients: usize,
    /// Run lengths of the coordinates the server could read, first run false.
    before_known_runs: Vec<u32>,
}

#[derive(Serialize)]
struct TimingRow {
    round: usize,
    enc_time: f64,
    dec_time: f64,
    train_time: f64,
    agg_time: f64,
}

#[derive(Serialize)]
struct TraceRow {
    round: usize,
    direction: &'static str,
    client: Option<usize>,
    is_encrypted: bool,
    dataset: Option<&'static str>,
    header_bytes: usize,
    plaintext_bytes: usize,
    ciphertext_bytes: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Creates `dir` and fails if it already exists, so no command overwrites
/// earlier results.
pub fn create_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        bail!("{} already exists; refusing to overwrite previous results", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn round_name(round: usize) -> String {
    format!("round-{round:04}")
}

fn params_bytes(p: &ModelParams) -> Vec<u8> {
    MaskedModel::plaintext(p.flat.clone()).to_bytes()
}

fn read_params(spec: &ModelSpec, path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let m = MaskedModel::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if m.is_encrypted {
        bail!("{} holds an encrypted model, expected plaintext", path.display());
    }
    Ok(ModelParams::from_flat(spec, m.plain)?)
}

pub fn write_run(dir: &Path, run: &TrainingRun, snapshot_rounds: &[usize]) -> Result<()> {
    write_csv(&dir.join("history.csv"), &run.history)?;
    write_csv(&dir.join("ledger.csv"), &run.ledger.records)?;
    write_csv(
        &dir.join("timings.csv"),
        run.ledger.records.iter().map(|r| TimingRow {
            round: r.round,
            enc_time: r.timings.enc_time,
            dec_time: r.timings.dec_time,
            train_time: r.timings.train_time,
            agg_time: r.timings.agg_time,
        }),
    )?;
    write_csv(
        &dir.join("trace.csv"),
        run.trace.iter().map(|t| TraceRow {
            round: t.round,
            direction: match t.direction {
                Direction::Upload { .. } => "upload",
                Direction::Broadcast => "broadcast",
            },
            client: match t.direction {
                Direction::Upload { client } => Some(client),
                Direction::Broadcast => None,
            },
            is_encrypted: t.is_encrypted,
            dataset: t.dataset.map(|d| match d {
                DatasetKind::Authentic => "authentic",
                DatasetKind::Synthetic => "synthetic",
            }),
            header_bytes: t.header_bytes,
            plaintext_bytes: t.plaintext_bytes,
            ciphertext_bytes: t.ciphertext_bytes,
        }),
    )?;
    write_json(&dir.join("mask.json"), &run.mask.runs())?;
    fs::write(dir.join("final_model.bin"), params_bytes(&run.final_model))?;

    let snapshots = dir.join("snapshots");
    for cap in run.captures.iter().filter(|c| snapshot_rounds.contains(&c.round)) {
        fs::create_dir_all(&snapshots)?;
        fs::write(snapshots.join(format!("{}.bin", round_name(cap.round))), params_bytes(&cap.model_after))?;
    }
    for cap in &run.captures {
        let cdir = dir.join("captures").join(round_name(cap.round));
        fs::create_dir_all(&cdir)?;
        let meta = CaptureMeta {
            round: cap.round,
            is_authentic: cap.is_authentic,
            clients: cap.uploads.len(),
            before_known_runs: EncryptionMask::from_bits(cap.before_known.clone()).runs(),
        };
        write_json(&cdir.join("meta.json"), &meta)?;
        fs::write(cdir.join("model_before.bin"), params_bytes(&cap.model_before))?;
        fs::write(cdir.join("server_before.bin"), params_bytes(&cap.server_before))?;
        fs::write(cdir.join("model_after.bin"), params_bytes(&cap.model_after))?;
        for (i, up) in cap.uploads.iter().enumerate() {
            fs::write(cdir.join(format!("upload-{i:03}.bin")), up.to_bytes())?;
        }
    }
    Ok(())
}

pub fn read_mask(dir: &Path) -> Result<EncryptionMask> {
    let runs: Vec<u32> = read_json(&dir.join("mask.json"))?;
    Ok(EncryptionMask::from_runs(&runs))
}

pub fn read_capture(dir: &Path, spec: &ModelSpec, round: usize) -> Result<RoundCapture> {
    let cdir = dir.join("captures").join(round_name(round));
    if !cdir.is_dir() {
        bail!("missing artifact: no captured messages for round {round} in {}", dir.display());
    }
    let meta: CaptureMeta = read_json(&cdir.join("meta.json"))?;
    let mut uploads = Vec::with_capacity(meta.clients);
    for i in 0..meta.clients {
        let path = cdir.join(format!("upload-{i:03}.bin"));
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        uploads.push(MaskedModel::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?);
    }
    Ok(RoundCapture {
        round: meta.round,
        is_authentic: meta.is_authentic,
        model_before: read_params(spec, &cdir.join("model_before.bin"))?,
        server_before: read_params(spec, &cdir.join("server_before.bin"))?,
        before_known: EncryptionMask::from_runs(&meta.before_known_runs).bits().to_vec(),
        model_after: read_params(spec, &cdir.join("model_after.bin"))?,
        uploads,
    })
}

/// Run directories below `path`: the path itself when it holds a summary,
/// otherwise its immediate subdirectories that do, in name order.
pub fn find_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(SUMMARY_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        bail!("missing artifact: no run summaries under {}", path.display());
    }
    Ok(runs)
}
