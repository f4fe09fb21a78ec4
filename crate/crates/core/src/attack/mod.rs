//! Gradient inversion (DLG) against plaintext model updates and the image
//! similarity scores used to judge what it recovers.

mod dlg;
mod metrics;

pub use dlg::{dlg_attack, infer_gradient, simulate_client_step, AttackResult, AttackTarget, DlgConfig, InferredGradient, Optimizer};
pub use metrics::{msssim, msssim_scales, score_images, uqi, vif, Scores, MSSSIM_WEIGHTS, UQI_WINDOW};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crypto::EncryptionMask;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::protocol::RoundCapture;
use crate::seed::derive_seed2;
use crate::tensor::Tensor;

/// One attacked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub round: usize,
    pub is_authentic: bool,
    pub image_id: u64,
    pub class: usize,
    /// Authentic image the scores refer to: the victim itself in authentic
    /// rounds, the best MSSSIM match in synthetic rounds.
    pub matched_id: u64,
    pub uqi: f64,
    pub msssim: f64,
    pub vif: f64,
    pub matching_loss: f64,
    pub iterations: usize,
    pub recovered_label: usize,
}

/// Per-round summary: the maximum of each metric in authentic rounds, the
/// mean of the best-match scores in synthetic rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScores {
    pub round: usize,
    pub is_authentic: bool,
    pub uqi: f64,
    pub msssim: f64,
    pub vif: f64,
    pub attacked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub images_per_class: usize,
    pub lr: f64,
    pub dlg: DlgConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<AttackRow>,
    pub rounds: Vec<RoundScores>,
    pub recovered: Vec<(AttackRow, Tensor)>,
}

/// The first `per_class` images of every class, in class order.
pub fn pick_per_class(pool: &[LabeledImage], per_class: usize) -> Vec<&LabeledImage> {
    let classes = pool.iter().map(|s| s.label + 1).max().unwrap_or(0);
    (0..classes).flat_map(|c| pool.iter().filter(move |s| s.label == c).take(per_class)).collect()
}

/// Attacks the single-image client update implied by each requested round.
///
/// The attacker starts from the server's view of the inbound model and only
/// uses coordinates that were plaintext both in the broadcast and in the
/// upload.
///
/// Victims come from `authentic` in authentic rounds and from `synthetic` in
/// synthetic rounds; a synthetic recovery is scored against every image of
/// `authentic` and the best MSSSIM match is kept.
pub fn score_attack_sweep(
    spec: &ModelSpec,
    captures: &[RoundCapture],
    mask: &EncryptionMask,
    round_ids: &[usize],
    authentic: &[LabeledImage],
    synthetic: &[LabeledImage],
    cfg: &SweepConfig,
) -> Result<SweepOutput> {
    let mut out = SweepOutput { rows: Vec::new(), rounds: Vec::new(), recovered: Vec::new() };
    for &round in round_ids {
        let cap = captures
            .iter()
            .find(|c| c.round == round)
            .ok_or_else(|| Error::MissingArtifact(format!("no captured messages for round {round}")))?;
        let victims = pick_per_class(if cap.is_authentic { authentic } else { synthetic }, cfg.images_per_class);
        let results: Vec<(AttackRow, Tensor)> = victims
            .par_iter()
            .map(|v| attack_one(spec, cap, mask, v, authentic, cfg))
            .collect::<Result<_>>()?;
        let n = results.len();
        let summary = if n == 0 {
            RoundScores { round, is_authentic: cap.is_authentic, uqi: 0.0, msssim: 0.0, vif: 0.0, attacked: 0 }
        } else if cap.is_authentic {
            let max = |f: fn(&AttackRow) -> f64| results.iter().map(|(r, _)| f(r)).fold(f64::NEG_INFINITY, f64::max);
            RoundScores { round, is_authentic: true, uqi: max(|r| r.uqi), msssim: max(|r| r.msssim), vif: max(|r| r.vif), attacked: n }
        } else {
            let mean = |f: fn(&AttackRow) -> f64| results.iter().map(|(r, _)| f(r)).sum::<f64>() / n as f64;
            RoundScores { round, is_authentic: false, uqi: mean(|r| r.uqi), msssim: mean(|r| r.msssim), vif: mean(|r| r.vif), attacked: n }
        };
        out.rounds.push(summary);
        for (row, img) in results {
            out.rows.push(row.clone());
            out.recovered.push((row, img));
        }
    }
    Ok(out)
}

fn attack_one(
    spec: &ModelSpec,
    cap: &RoundCapture,
    mask: &EncryptionMask,
    victim: &LabeledImage,
    authentic: &[LabeledImage],
    cfg: &SweepConfig,
) -> Result<(AttackRow, Tensor)> {
    let after = simulate_client_step(spec, &cap.model_before, &victim.pixels, victim.label, cfg.lr)?;
    if mask.len() != after.len() || cap.before_known.len() != after.len() {
        return Err(Error::LengthMismatch { expected: after.len(), actual: mask.len().min(cap.before_known.len()) });
    }
    let observable = cap
        .before_known
        .iter()
        .zip(mask.bits())
        .map(|(&known, &enc)| known && !(enc && cap.is_authentic))
        .collect();
    let target = AttackTarget { spec: spec.clone(), before: cap.server_before.clone(), after, observable, lr: cfg.lr };
    let dlg = DlgConfig { seed: derive_seed2(cfg.seed, "dlg", cap.round as u64, victim.id), ..cfg.dlg };
    let result = dlg_attack(&target, &dlg)?;
    let (matched_id, scores) = if cap.is_authentic {
        (victim.id, score_images(&victim.pixels, &result.image)?)
    } else {
        let mut best: Option<(u64, f64, &LabeledImage)> = None;
        for a in authentic {
            let s = msssim(&a.pixels, &result.image)?;
            if best.is_none_or(|b| s > b.1) {
                best = Some((a.id, s, a));
            }
        }
        let (id, _, img) = best.ok_or(Error::EmptyDataset)?;
        (id, score_images(&img.pixels, &result.image)?)
    };
    let row = AttackRow {
        round: cap.round,
        is_authentic: cap.is_authentic,
        image_id: victim.id,
        class: victim.label,
        matched_id,
        uqi: scores.uqi,
        msssim: scores.msssim,
        vif: scores.vif,
        matching_loss: result.matching_loss,
        iterations: result.iterations,
        recovered_label: result.label(),
    };
    Ok((row, result.image))
}

/// Binary PGM (one channel) or PPM (three channels) encoding of an image with
/// values in `[0, 1]`.
pub fn to_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(Error::InvalidShape(format!("cannot write shape {:?} as PGM/PPM", image.shape()))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let v = image.values();
    for i in 0..h * w {
        for ch in 0..c {
            out.push((v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_header_and_layout() {
        let t = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let bytes = to_pnm(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 128, 0]);
        let g = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(to_pnm(&g).unwrap().starts_with(b"P5"));
    }

    #[test]
    fn empty_round_list_gives_empty_table() {
        let spec = ModelSpec::mlp([1, 1, 2], &[], 2, crate::nn::Activation::Tanh).unwrap();
        let cfg = SweepConfig { images_per_class: 1, lr: 0.1, dlg: DlgConfig::default(), seed: 0 };
        let out = score_attack_sweep(&spec, &[], &EncryptionMask::none(6), &[], &[], &[], &cfg).unwrap();
        assert!(out.rows.is_empty() && out.rounds.is_empty());
        assert!(score_attack_sweep(&spec, &[], &EncryptionMask::none(6), &[3], &[], &[], &cfg).is_err());
    }
}
