//! The interleaved training loop: authentic rounds train on private data and
//! upload selectively encrypted models, synthetic rounds train on shareable
//! data and upload plaintext.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{detect_convergence, ConvergenceRule, RunSummary};
use crate::crypto::{
    add_weighted, build_mask, decrypt_values, encrypt_masked, keygen, CryptoParams, EncryptionMask, Keypair, MaskedModel,
    WireSize,
};
use crate::data::{partition_dirichlet, partition_iid, ClientDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{accuracy, backward, forward, init_params, train_local, LocalTraining, ModelParams, ModelSpec};
use crate::seed::{derive_seed, derive_seed2, rng_for};
use crate::tensor::Tensor;

/// `rho_syn` of every `rho_tot` consecutive rounds are synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub rho_syn: u32,
    pub rho_tot: u32,
}

impl RoundSchedule {
    pub fn new(rho_syn: u32, rho_tot: u32) -> Result<Self> {
        let s = Self { rho_syn, rho_tot };
        s.validate()?;
        Ok(s)
    }

    pub fn all_authentic() -> Self {
        Self { rho_syn: 0, rho_tot: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_tot == 0 || self.rho_syn >= self.rho_tot {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= rho_syn < rho_tot, got {}/{}",
                self.rho_syn, self.rho_tot
            )));
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.rho_syn as f64 / self.rho_tot as f64
    }

    pub fn authentic_rounds(&self, horizon: u64) -> u64 {
        (0..horizon).filter(|&t| is_authentic_round(t, self)).count() as u64
    }
}

/// Zero-based round predicate: `t mod rho_tot < rho_tot - rho_syn`.
pub fn is_authentic_round(t: u64, sched: &RoundSchedule) -> bool {
    t % u64::from(sched.rho_tot) < u64::from(sched.rho_tot - sched.rho_syn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Authentic,
    Synthetic,
}

/// Operation counts, byte counts and wall time a client spends in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClientCost {
    pub enc_ops: u64,
    pub dec_ops: u64,
    pub upload: WireSize,
    pub enc_time: f64,
    pub dec_time: f64,
    pub train_time: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ClientDataset,
    pub params: ModelParams,
    pub training: LocalTraining,
    pub seed: u64,
}

/// Result of [`client_round`]: the outbound message and what it cost.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub message: MaskedModel,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    pub cost: ClientCost,
}

/// Decrypts the incoming model if needed, trains on the authentic or
/// synthetic data and returns an encrypted or plaintext upload.
pub fn client_round(
    state: &mut ClientState,
    spec: &ModelSpec,
    incoming: &MaskedModel,
    mask: &EncryptionMask,
    keys: &Keypair,
    round: u64,
    is_auth: bool,
) -> Result<ClientUpdate> {
    let mut cost = ClientCost::default();
    let flat = if incoming.is_encrypted {
        let start = Instant::now();
        let flat = decrypt_values(incoming, mask, keys)?;
        cost.dec_time = start.elapsed().as_secs_f64();
        cost.dec_ops = 1;
        flat
    } else {
        incoming.plain.clone()
    };
    state.params = ModelParams::from_flat(spec, flat)?;
    let (dataset, kind) = if is_auth {
        (&state.data.authentic, DatasetKind::Authentic)
    } else {
        (&state.data.synthetic, DatasetKind::Synthetic)
    };
    let start = Instant::now();
    let train_seed = derive_seed2(state.seed, "train", round, state.client_id as u64);
    state.params = train_local(spec, &state.params, dataset, &state.training, train_seed)?;
    cost.train_time = start.elapsed().as_secs_f64();
    let message = if is_auth {
        let start = Instant::now();
        let mut rng = rng_for(derive_seed(state.seed, "encrypt", round), "encrypt", state.client_id as u64);
        let m = encrypt_masked(&state.params, mask, &keys.public, &mut rng)?;
        cost.enc_time = start.elapsed().as_secs_f64();
        cost.enc_ops = 1;
        m
    } else {
        MaskedModel::plaintext(state.params.flat.clone())
    };
    cost.upload = message.wire_size();
    Ok(ClientUpdate { message, dataset: kind, dataset_size: dataset.len(), cost })
}

/// Weighted average of the client models, homomorphic on the encrypted part.
/// Models are combined in the order given.
pub fn server_aggregate(models: &[MaskedModel], weights: &[f64], mask: &EncryptionMask, is_auth: bool) -> Result<MaskedModel> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::LengthMismatch { expected: models.len(), actual: weights.len() });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum(total));
    }
    if models.iter().any(|m| m.is_encrypted != is_auth) {
        return Err(Error::MixedEncryption);
    }
    if is_auth {
        if models.iter().any(|m| &m.mask != mask) {
            return Err(Error::MaskMismatch);
        }
        let cipher = models[0].cipher.as_ref().ok_or_else(|| Error::Malformed("encrypted model without ciphertext".into()))?;
        let params = cipher.params();
        let mut acc = MaskedModel::zeros_like(&models[0], params.scale_bits + params.weight_bits);
        for (m, &w) in models.iter().zip(weights) {
            acc = add_weighted(&acc, m, w)?;
        }
        Ok(acc)
    } else {
        let len = models[0].plain.len();
        if models.iter().any(|m| m.plain.len() != len) {
            return Err(Error::LengthMismatch { expected: len, actual: models.iter().map(|m| m.plain.len()).max().unwrap_or(0) });
        }
        let mut acc = vec![0.0; len];
        for (m, &w) in models.iter().zip(weights) {
            for (a, v) in acc.iter_mut().zip(&m.plain) {
                *a += w * v;
            }
        }
        Ok(MaskedModel::plaintext(acc))
    }
}

/// Where the encryption mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Largest mean absolute gradient on one probe batch per client.
    Sensitivity,
    /// Seeded uniform selection.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StopRule {
    /// Exactly `rounds` rounds.
    Fixed,
    /// Stop at the round the detector fires, or after `rounds`.
    Convergence(ConvergenceRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub spec: ModelSpec,
    pub schedule: RoundSchedule,
    pub eta: f64,
    pub mask_source: MaskSource,
    pub local: LocalTraining,
    pub crypto: CryptoParams,
    pub rounds: usize,
    pub stop: StopRule,
    pub seed: u64,
    /// Rounds whose inbound model and uploads are kept for later attacks.
    #[serde(default)]
    pub capture_rounds: Vec<usize>,
    #[serde(default)]
    pub parallel: bool,
}

/// Client datasets plus the held-out evaluation set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub clients: Vec<ClientDataset>,
    pub test: Vec<LabeledImage>,
}

impl FederatedData {
    /// Splits the authentic pool across `num_clients` with per-class
    /// Dirichlet(`alpha`) shares (IID when `alpha` is `None`) and deals the
    /// synthetic pool IID.
    pub fn from_pools(
        authentic: &[LabeledImage],
        synthetic: &[LabeledImage],
        test: Vec<LabeledImage>,
        num_clients: usize,
        alpha: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let plan = match alpha {
            Some(a) => partition_dirichlet(authentic, num_clients, a, derive_seed(seed, "partition", 0))?,
            None => partition_iid(authentic, num_clients, derive_seed(seed, "partition", 0))?,
        };
        let auth = plan.apply(authentic);
        let syn = partition_iid(synthetic, num_clients, derive_seed(seed, "partition", 1))?.apply(synthetic);
        let clients = auth
            .into_iter()
            .zip(syn)
            .enumerate()
            .map(|(client_id, (authentic, synthetic))| ClientDataset { client_id, authentic, synthetic })
            .collect();
        Ok(Self { clients, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub is_authentic: bool,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub enc_time: f64,
    pub dec_time: f64,
    pub train_time: f64,
    pub agg_time: f64,
}

/// Costs of one round summed over all clients. Upload bytes count every
/// client's message, broadcast bytes count one copy per receiving client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub round: usize,
    pub is_authentic: bool,
    pub upload_plaintext_bytes: u64,
    pub upload_ciphertext_bytes: u64,
    pub broadcast_plaintext_bytes: u64,
    pub broadcast_ciphertext_bytes: u64,
    pub enc_ops: u64,
    pub dec_ops: u64,
    #[serde(skip)]
    pub timings: RoundTimings,
}

impl LedgerRecord {
    pub fn plaintext_bytes_sent(&self) -> u64 {
        self.upload_plaintext_bytes + self.broadcast_plaintext_bytes
    }

    pub fn ciphertext_bytes_sent(&self) -> u64 {
        self.upload_ciphertext_bytes + self.broadcast_ciphertext_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.plaintext_bytes_sent() + self.ciphertext_bytes_sent()
    }

    fn add(&mut self, other: &LedgerRecord) {
        self.upload_plaintext_bytes += other.upload_plaintext_bytes;
        self.upload_ciphertext_bytes += other.upload_ciphertext_bytes;
        self.broadcast_plaintext_bytes += other.broadcast_plaintext_bytes;
        self.broadcast_ciphertext_bytes += other.broadcast_ciphertext_bytes;
        self.enc_ops += other.enc_ops;
        self.dec_ops += other.dec_ops;
        self.timings.enc_time += other.timings.enc_time;
        self.timings.dec_time += other.timings.dec_time;
        self.timings.train_time += other.timings.train_time;
        self.timings.agg_time += other.timings.agg_time;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub num_clients: usize,
    pub records: Vec<LedgerRecord>,
}

impl CostLedger {
    /// Sum over the first `rounds` records.
    pub fn totals_through(&self, rounds: usize) -> LedgerRecord {
        let mut total = LedgerRecord::default();
        for r in self.records.iter().take(rounds) {
            total.add(r);
        }
        total.round = rounds.min(self.records.len());
        total
    }

    pub fn totals(&self) -> LedgerRecord {
        self.totals_through(self.records.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "direction", rename_all = "lowercase")]
pub enum Direction {
    Upload { client: usize },
    Broadcast,
}

/// One transmitted message. Broadcast entries stand for the copy sent to
/// every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    #[serde(flatten)]
    pub direction: Direction,
    pub is_encrypted: bool,
    pub dataset: Option<DatasetKind>,
    pub header_bytes: usize,
    pub plaintext_bytes: usize,
    pub ciphertext_bytes: usize,
}

/// Messages of a captured round. `model_before` is the decrypted inbound
/// model, the point at which the clients' updates start.
///
/// `server_before` is what the server can read of that model: each
/// coordinate holds the latest value it has seen in plaintext, and
/// `before_known` marks the coordinates that were plaintext in this round's
/// broadcast.
#[derive(Debug, Clone)]
pub struct RoundCapture {
    pub round: usize,
    pub is_authentic: bool,
    pub model_before: ModelParams,
    pub server_before: ModelParams,
    pub before_known: Vec<bool>,
    pub model_after: ModelParams,
    pub uploads: Vec<MaskedModel>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub history: Vec<RoundRecord>,
    pub ledger: CostLedger,
    pub trace: Vec<TraceEntry>,
    pub captures: Vec<RoundCapture>,
    pub mask: EncryptionMask,
    pub final_model: ModelParams,
    pub converged_at: Option<usize>,
}

impl TrainingRun {
    /// Per-client totals over the rounds that ran. Accuracy is the mean of the
    /// last `window` test accuracies.
    pub fn summary(&self, label: &str, rho: f64, eta: f64, baseline: bool, window: usize) -> RunSummary {
        let n = self.ledger.num_clients.max(1) as f64;
        let totals = self.ledger.totals();
        let tail = &self.history[self.history.len().saturating_sub(window.max(1))..];
        let accuracy_pct = if tail.is_empty() { 0.0 } else { tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len() as f64 };
        RunSummary {
            label: label.to_string(),
            rho,
            eta,
            baseline,
            converged: self.converged_at.is_some(),
            rounds_to_convergence: self.history.len(),
            accuracy_pct,
            ciphertext_mb: totals.ciphertext_bytes_sent() as f64 / n / 1e6,
            total_comm_mb: totals.total_bytes() as f64 / n / 1e6,
            comp_time_s: (totals.timings.enc_time + totals.timings.dec_time + totals.timings.train_time) / n,
        }
    }
}

/// Mean absolute gradient of each parameter on one shuffled probe batch of
/// every client's authentic data, averaged over clients.
pub fn probe_sensitivity(spec: &ModelSpec, params: &ModelParams, clients: &[ClientDataset], batch: usize, seed: u64) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; params.len()];
    for c in clients {
        let mut samples: Vec<&LabeledImage> = c.authentic.iter().collect();
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        samples.shuffle(&mut rng_for(seed, "probe", c.client_id as u64));
        samples.truncate(batch.max(1));
        let x = Tensor::stack(samples.iter().map(|s| &s.pixels))?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let (_, cache) = forward(spec, params, &x)?;
        let (_, g) = backward(spec, params, &cache, &labels)?;
        for (a, v) in acc.iter_mut().zip(&g.params) {
            *a += v.abs() / clients.len() as f64;
        }
    }
    Ok(acc)
}

fn trace_entry(round: usize, direction: Direction, m: &MaskedModel, dataset: Option<DatasetKind>) -> TraceEntry {
    let size = m.wire_size();
    TraceEntry {
        round,
        direction,
        is_encrypted: m.is_encrypted,
        dataset,
        header_bytes: size.header,
        plaintext_bytes: size.plaintext,
        ciphertext_bytes: size.ciphertext,
    }
}

fn harness_view(m: &MaskedModel, mask: &EncryptionMask, keys: &Keypair) -> Result<Vec<f64>> {
    if m.is_encrypted {
        decrypt_values(m, mask, keys)
    } else {
        Ok(m.plain.clone())
    }
}

/// Runs the federated training loop. Every random stream derives from
/// `config.seed`; the run is reproducible bit for bit, in parallel or not.
pub fn run_training(config: &TrainingConfig, data: &FederatedData) -> Result<TrainingRun> {
    config.schedule.validate()?;
    config.crypto.validate()?;
    if let StopRule::Convergence(rule) = &config.stop {
        rule.validate()?;
    }
    let n = data.clients.len();
    if n == 0 {
        return Err(Error::InvalidArgument("at least one client is required".into()));
    }
    if data.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = &config.spec;
    let initial = init_params(spec, derive_seed(config.seed, "init", 0));
    let keys = keygen(derive_seed(config.seed, "keys", 0), config.crypto)?;
    let sensitivity = match config.mask_source {
        MaskSource::Sensitivity => Some(probe_sensitivity(spec, &initial, &data.clients, config.local.batch_size, config.seed)?),
        MaskSource::Random => None,
    };
    let mask = build_mask(config.eta, initial.len(), sensitivity.as_deref(), derive_seed(config.seed, "mask", 0))?;

    let mut clients: Vec<ClientState> = data
        .clients
        .iter()
        .map(|d| ClientState {
            client_id: d.client_id,
            data: d.clone(),
            params: initial.clone(),
            training: config.local,
            seed: config.seed,
        })
        .collect();
    clients.sort_by_key(|c| c.client_id);

    let mut broadcast = MaskedModel::plaintext(initial.flat.clone());
    let mut history = Vec::new();
    let mut ledger = CostLedger { num_clients: n, records: Vec::new() };
    let mut trace = Vec::new();
    let mut captures = Vec::new();
    let mut converged_at = None;
    let mut accuracies = Vec::new();
    let mut server_view = initial.clone();
    let mut inbound = initial.clone();

    for t in 0..config.rounds {
        let is_auth = is_authentic_round(t as u64, &config.schedule);
        let mut record = LedgerRecord { round: t, is_authentic: is_auth, ..Default::default() };
        let size = broadcast.wire_size();
        record.broadcast_plaintext_bytes = (n * (size.header + size.plaintext)) as u64;
        record.broadcast_ciphertext_bytes = (n * size.ciphertext) as u64;
        trace.push(trace_entry(t, Direction::Broadcast, &broadcast, None));
        let before_known: Vec<bool> = mask.bits().iter().map(|&b| !(b && broadcast.is_encrypted)).collect();
        for (i, &k) in before_known.iter().enumerate() {
            if k {
                server_view.flat[i] = inbound.flat[i];
            }
        }
        let model_before = captures_round(config, t).then(|| inbound.clone());

        let step = |c: &mut ClientState| client_round(c, spec, &broadcast, &mask, &keys, t as u64, is_auth);
        let updates: Vec<ClientUpdate> = if config.parallel {
            clients.par_iter_mut().map(step).collect::<Result<_>>()?
        } else {
            clients.iter_mut().map(step).collect::<Result<_>>()?
        };

        for (c, u) in clients.iter().zip(&updates) {
            record.upload_plaintext_bytes += (u.cost.upload.header + u.cost.upload.plaintext) as u64;
            record.upload_ciphertext_bytes += u.cost.upload.ciphertext as u64;
            record.enc_ops += u.cost.enc_ops;
            record.dec_ops += u.cost.dec_ops;
            record.timings.enc_time += u.cost.enc_time;
            record.timings.dec_time += u.cost.dec_time;
            record.timings.train_time += u.cost.train_time;
            trace.push(trace_entry(t, Direction::Upload { client: c.client_id }, &u.message, Some(u.dataset)));
        }

        let total: usize = updates.iter().map(|u| u.dataset_size).sum();
        let mut weights: Vec<f64> = updates.iter().map(|u| u.dataset_size as f64 / total as f64).collect();
        let rest: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - rest;
        let messages: Vec<MaskedModel> = updates.into_iter().map(|u| u.message).collect();
        let start = Instant::now();
        broadcast = server_aggregate(&messages, &weights, &mask, is_auth)?;
        record.timings.agg_time = start.elapsed().as_secs_f64();

        let current = ModelParams::from_flat(spec, harness_view(&broadcast, &mask, &keys)?)?;
        let acc = accuracy(spec, &current, &data.test)?;
        history.push(RoundRecord { round: t, is_authentic: is_auth, test_accuracy: acc });
        accuracies.push(acc);
        if let Some(before) = model_before {
            captures.push(RoundCapture {
                model_after: current.clone(),
                round: t,
                is_authentic: is_auth,
                model_before: before,
                server_before: server_view.clone(),
                before_known,
                uploads: messages,
            });
        }
        inbound = current;

        let stop = match &config.stop {
            StopRule::Fixed => false,
            StopRule::Convergence(rule) => {
                converged_at = detect_convergence(&accuracies, rule);
                converged_at.is_some()
            }
        };
        let last = stop || t + 1 == config.rounds;
        if last && broadcast.is_encrypted {
            // Clients open the final model.
            let start = Instant::now();
            for _ in 0..n {
                decrypt_values(&broadcast, &mask, &keys)?;
            }
            record.timings.dec_time += start.elapsed().as_secs_f64();
            record.dec_ops += n as u64;
        }
        ledger.records.push(record);
        if stop {
            break;
        }
    }

    Ok(TrainingRun { history, ledger, trace, captures, mask, final_model: inbound, converged_at })
}

fn captures_round(config: &TrainingConfig, t: usize) -> bool {
    config.capture_rounds.contains(&t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::encrypt_values;
    use crate::data::make_toy_dataset;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn predicate_examples() {
        let s0 = RoundSchedule::all_authentic();
        assert!((0..20).all(|t| is_authentic_round(t, &s0)));
        let s = RoundSchedule::new(1, 4).unwrap();
        let pattern: Vec<bool> = (0..8).map(|t| is_authentic_round(t, &s)).collect();
        assert_eq!(pattern, [true, true, true, false, true, true, true, false]);
        let h = RoundSchedule::new(1, 2).unwrap();
        assert!((0..20).all(|t| is_authentic_round(t, &h) == (t % 2 == 0)));
        assert!(RoundSchedule::new(2, 2).is_err());
        assert!(RoundSchedule::new(0, 0).is_err());
    }

    #[test]
    fn plaintext_aggregation_examples() {
        let mask = EncryptionMask::none(1);
        let a = MaskedModel::plaintext(vec![1.0]);
        let b = MaskedModel::plaintext(vec![5.0]);
        assert_eq!(server_aggregate(&[a.clone(), b], &[0.25, 0.75], &mask, false).unwrap().plain, vec![4.0]);
        assert_eq!(server_aggregate(&[a.clone()], &[1.0], &mask, false).unwrap().plain, vec![1.0]);
        assert!(matches!(server_aggregate(&[a.clone()], &[0.9], &mask, false), Err(Error::WeightSum(_))));
        assert!(matches!(server_aggregate(&[a], &[1.0], &mask, true), Err(Error::MixedEncryption)));
    }

    #[test]
    fn encrypted_aggregation_matches_plaintext() {
        let keys = keygen(3, CryptoParams { ring_degree: 64, ..Default::default() }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.11).cos()).collect();
        let mask = build_mask(0.4, 50, None, 1).unwrap();
        let ea = encrypt_values(&a, &mask, &keys.public, &mut rng).unwrap();
        let eb = encrypt_values(&b, &mask, &keys.public, &mut rng).unwrap();
        let agg = server_aggregate(&[ea, eb], &[0.3, 0.7], &mask, true).unwrap();
        let out = decrypt_values(&agg, &mask, &keys).unwrap();
        for i in 0..50 {
            assert!((out[i] - (0.3 * a[i] + 0.7 * b[i])).abs() < 1e-5);
        }
    }

    fn setup(n: usize) -> (ModelSpec, FederatedData) {
        let spec = ModelSpec::mlp([3, 8, 8], &[8], 3, Activation::Tanh).unwrap();
        let pool = make_toy_dataset(3, 12 * n, 8, 4).unwrap();
        let test = make_toy_dataset(3, 5, 8, 99).unwrap();
        let clients = (0..n)
            .map(|i| {
                let mine: Vec<LabeledImage> = pool.iter().skip(i).step_by(n).cloned().collect();
                let (authentic, synthetic) = mine.split_at(mine.len() / 2 + i);
                ClientDataset { client_id: i, authentic: authentic.to_vec(), synthetic: synthetic.to_vec() }
            })
            .collect();
        (spec, FederatedData { clients, test })
    }

    fn config(spec: ModelSpec, schedule: RoundSchedule, eta: f64, rounds: usize) -> TrainingConfig {
        TrainingConfig {
            spec,
            schedule,
            eta,
            mask_source: MaskSource::Sensitivity,
            local: LocalTraining { epochs: 1, batch_size: 8, lr: 0.1 },
            crypto: CryptoParams { ring_degree: 64, ..Default::default() },
            rounds,
            stop: StopRule::Fixed,
            seed: 17,
            capture_rounds: vec![1],
            parallel: false,
        }
    }

    #[test]
    fn client_round_contract() {
        let (spec, data) = setup(2);
        let keys = keygen(1, CryptoParams { ring_degree: 64, ..Default::default() }).unwrap();
        let p = init_params(&spec, 0);
        let mask = build_mask(0.2, p.len(), None, 0).unwrap();
        let mut state = ClientState {
            client_id: 0,
            data: data.clients[0].clone(),
            params: p.clone(),
            training: LocalTraining { epochs: 0, ..Default::default() },
            seed: 1,
        };
        let incoming = MaskedModel::plaintext(p.flat.clone());
        let auth = client_round(&mut state, &spec, &incoming, &mask, &keys, 0, true).unwrap();
        assert!(auth.message.is_encrypted);
        assert_eq!((auth.cost.enc_ops, auth.cost.dec_ops), (1, 0));
        let syn = client_round(&mut state, &spec, &auth.message, &mask, &keys, 1, false).unwrap();
        assert!(!syn.message.is_encrypted);
        assert_eq!(syn.cost.upload.ciphertext, 0);
        assert_eq!(syn.cost.dec_ops, 1);
        for (a, b) in syn.message.plain.iter().zip(&p.flat) {
            assert!((a - b).abs() < 1e-6);
        }
        let plain = client_round(&mut state, &spec, &incoming, &mask, &keys, 2, false).unwrap();
        assert_eq!(plain.message.plain, p.flat);
    }

    #[test]
    fn half_schedule_alternates_and_counts() {
        let (spec, data) = setup(3);
        let run = run_training(&config(spec, RoundSchedule::new(1, 2).unwrap(), 0.2, 10), &data).unwrap();
        let encrypted_rounds = run.ledger.records.iter().filter(|r| r.enc_ops > 0).count();
        assert_eq!(encrypted_rounds, 5);
        assert_eq!(run.ledger.totals().enc_ops, 15);
        assert_eq!(run.ledger.totals().dec_ops, 15);
        for e in &run.trace {
            if let Direction::Upload { .. } = e.direction {
                let auth = e.round % 2 == 0;
                assert_eq!(e.is_encrypted, auth);
                assert_eq!(e.dataset, Some(if auth { DatasetKind::Authentic } else { DatasetKind::Synthetic }));
                assert_eq!(e.ciphertext_bytes > 0, auth);
            }
        }
        assert_eq!(run.captures.len(), 1);
        assert!(!run.captures[0].is_authentic);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (spec, data) = setup(3);
        let cfg = config(spec, RoundSchedule::new(1, 4).unwrap(), 0.3, 6);
        let a = run_training(&cfg, &data).unwrap();
        let b = run_training(&TrainingConfig { parallel: true, ..cfg }, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn convergence_stop_ends_early() {
        let (spec, data) = setup(2);
        let mut cfg = config(spec, RoundSchedule::all_authentic(), 0.0, 200);
        cfg.local.lr = 1e-9;
        cfg.stop = StopRule::Convergence(ConvergenceRule::default());
        let run = run_training(&cfg, &data).unwrap();
        assert_eq!(run.converged_at, Some(10));
        assert_eq!(run.history.len(), 11);
    }
}
