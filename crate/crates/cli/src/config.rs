use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use ifl_core::analysis::ConvergenceRule;
use ifl_core::crypto::CryptoParams;
use ifl_core::data::{load_cifar10_binary, split_authentic_synthetic, stratified_holdout, LabeledImage, ToyConfig};
use ifl_core::nn::{Activation, LocalTraining, ModelSpec};
use ifl_core::protocol::{FederatedData, MaskSource, RoundSchedule, StopRule, TrainingConfig};
use ifl_core::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Toy(ToyConfig),
    Cifar10 {
        files: Vec<PathBuf>,
        /// Keep at most this many images of each class.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_class: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    ToyCnn,
    LenetLite,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: ModelName,
    pub activation: Activation,
    /// Hidden layer widths, MLP only.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Runs sharing a label are averaged into one report row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub baseline: bool,
    pub seed: u64,
    pub repetitions: usize,
    pub rounds: usize,
    pub clients: usize,
    /// Dirichlet concentration of the authentic split; IID when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub test_per_class: usize,
    pub eta: f64,
    pub mask_source: MaskSource,
    pub schedule: RoundSchedule,
    pub model: ModelConfig,
    pub local: LocalTraining,
    pub crypto: CryptoParams,
    pub stop: StopRule,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub capture_rounds: Vec<usize>,
    #[serde(default)]
    pub snapshot_rounds: Vec<usize>,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut toy = ToyConfig::new(10, 150, 16, 1);
        toy.class_strength = 0.15;
        toy.individual_strength = 0.4;
        toy.noise = 0.1;
        Self {
            name: "experiment".into(),
            label: None,
            baseline: false,
            seed: 0,
            repetitions: 1,
            rounds: 120,
            clients: 3,
            alpha: Some(0.5),
            test_per_class: 50,
            eta: 0.2,
            mask_source: MaskSource::Sensitivity,
            schedule: RoundSchedule::all_authentic(),
            model: ModelConfig { name: ModelName::ToyCnn, activation: Activation::Tanh, hidden: Vec::new() },
            local: LocalTraining { epochs: 1, batch_size: 16, lr: 0.02 },
            crypto: CryptoParams::default(),
            stop: StopRule::Convergence(ConvergenceRule::default()),
            dataset: DatasetConfig::Toy(toy),
            capture_rounds: Vec::new(),
            snapshot_rounds: Vec::new(),
            parallel: false,
            output_dir: None,
        }
    }
}

/// Pools a run draws from. Test images are held out before the
/// authentic/synthetic split.
pub struct Prepared {
    pub authentic: Vec<LabeledImage>,
    pub synthetic: Vec<LabeledImage>,
    pub data: FederatedData,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("rho={:.2} eta={:.2}", self.schedule.rho(), self.eta))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.name.is_empty() && !self.name.contains(['/', '\\']), "name must be a non-empty path component");
        ensure!(self.repetitions > 0, "repetitions must be positive");
        ensure!(self.rounds > 0, "rounds must be positive");
        ensure!(self.clients > 0, "clients must be positive");
        ensure!(self.seed <= i64::MAX as u64, "seed must fit in a signed 64-bit integer");
        if let Some(a) = self.alpha {
            ensure!(a > 0.0 && a.is_finite(), "alpha must be positive, got {a}");
        }
        ensure!((0.0..=1.0).contains(&self.eta), "eta must lie in [0, 1], got {}", self.eta);
        ensure!(self.local.epochs > 0 && self.local.batch_size > 0, "local epochs and batch size must be positive");
        ensure!(self.local.lr > 0.0 && self.local.lr.is_finite(), "local learning rate must be positive");
        self.schedule.validate()?;
        self.crypto.validate()?;
        if let StopRule::Convergence(rule) = &self.stop {
            rule.validate()?;
        }
        match &self.dataset {
            DatasetConfig::Toy(t) => {
                ensure!(t.per_class > self.test_per_class, "toy per_class must exceed test_per_class");
                ensure!(t.seed <= i64::MAX as u64, "dataset seed must fit in a signed 64-bit integer");
            }
            DatasetConfig::Cifar10 { files, .. } => ensure!(!files.is_empty(), "cifar10 needs at least one batch file"),
        }
        for &r in self.capture_rounds.iter().chain(&self.snapshot_rounds) {
            ensure!(r < self.rounds, "round {r} is beyond the horizon of {} rounds", self.rounds);
        }
        self.spec()?;
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetConfig::Toy(t) => (t.channels, t.size),
            DatasetConfig::Cifar10 { .. } => (3, 32),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Toy(t) => t.num_classes,
            DatasetConfig::Cifar10 { .. } => 10,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let (c, s) = self.input_shape();
        let k = self.num_classes();
        let act = self.model.activation;
        Ok(match self.model.name {
            ModelName::ToyCnn => ModelSpec::toy_cnn(c, s, k, act)?,
            ModelName::LenetLite => ModelSpec::lenet_lite(c, s, k, act)?,
            ModelName::Mlp => ModelSpec::mlp([c, s, s], &self.model.hidden, k, act)?,
        })
    }

    /// Seed of repetition `rep`; every other stream of the run derives from it.
    pub fn run_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, "repetition", rep as u64)
    }

    pub fn training(&self, rep: usize) -> Result<TrainingConfig> {
        let mut capture: Vec<usize> = self.capture_rounds.iter().chain(&self.snapshot_rounds).copied().collect();
        capture.sort_unstable();
        capture.dedup();
        Ok(TrainingConfig {
            spec: self.spec()?,
            schedule: self.schedule,
            eta: self.eta,
            mask_source: self.mask_source,
            local: self.local,
            crypto: self.crypto,
            rounds: self.rounds,
            stop: self.stop,
            seed: self.run_seed(rep),
            capture_rounds: capture,
            parallel: self.parallel,
        })
    }

    fn pool(&self) -> Result<Vec<LabeledImage>> {
        match &self.dataset {
            DatasetConfig::Toy(t) => Ok(t.generate()?),
            DatasetConfig::Cifar10 { files, per_class } => {
                let mut pool = Vec::new();
                for (i, f) in files.iter().enumerate() {
                    pool.extend(load_cifar10_binary(f, (i * 10_000) as u64).with_context(|| format!("loading {}", f.display()))?);
                }
                if let Some(cap) = per_class {
                    let mut seen = [0usize; 10];
                    pool.retain(|s| {
                        seen[s.label] += 1;
                        seen[s.label] <= *cap
                    });
                }
                Ok(pool)
            }
        }
    }

    /// Regenerates the data of repetition `rep`. The pools depend only on the
    /// dataset section and master seed; the client split on the repetition.
    pub fn prepare(&self, rep: usize) -> Result<Prepared> {
        let pool = self.pool()?;
        let classes = pool.iter().map(|s| s.label + 1).max().unwrap_or(0);
        if classes != self.num_classes() {
            bail!("dataset has {classes} classes, the model expects {}", self.num_classes());
        }
        let (rest, test) = stratified_holdout(&pool, self.test_per_class, derive_seed(self.seed, "holdout", 0));
        let (authentic, synthetic) = split_authentic_synthetic(&rest, derive_seed(self.seed, "split", 0))?;
        let data = FederatedData::from_pools(&authentic, &synthetic, test, self.clients, self.alpha, self.run_seed(rep))?;
        Ok(Prepared { authentic, synthetic, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn odd_values_round_trip() {
        let cfg = ExperimentConfig {
            label: Some("x".into()),
            alpha: None,
            eta: 0.1 + 0.2,
            schedule: RoundSchedule::new(1, 4).unwrap(),
            stop: StopRule::Fixed,
            dataset: DatasetConfig::Cifar10 { files: vec!["a.bin".into(), "b.bin".into()], per_class: Some(7) },
            capture_rounds: vec![3, 4],
            output_dir: Some("out".into()),
            ..Default::default()
        };
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            ExperimentConfig { eta: 1.5, ..Default::default() },
            ExperimentConfig { repetitions: 0, ..Default::default() },
            ExperimentConfig { alpha: Some(0.0), ..Default::default() },
            ExperimentConfig { capture_rounds: vec![500], ..Default::default() },
            ExperimentConfig { name: "a/b".into(), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.rho_syn = 3;
        cfg.schedule.rho_tot = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::default().to_toml().unwrap();
        assert!(toml::from_str::<ExperimentConfig>(&format!("bogus = 1\n{text}")).is_err());
    }
}
