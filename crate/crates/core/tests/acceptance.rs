//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use ifl_core::analysis::{build_report, cost_fedavg_he, cost_heintfl, ConvergenceRule, RunSummary};
use ifl_core::attack::{score_attack_sweep, DlgConfig, RoundScores, SweepConfig};
use ifl_core::crypto::*;
use ifl_core::data::*;
use ifl_core::nn::{Activation, LocalTraining, ModelSpec};
use ifl_core::protocol::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn training(spec: &ModelSpec, schedule: RoundSchedule, eta: f64, local: LocalTraining, rounds: usize, stop: StopRule, seed: u64) -> TrainingConfig {
    TrainingConfig {
        spec: spec.clone(),
        schedule,
        eta,
        mask_source: MaskSource::Sensitivity,
        local,
        crypto: CryptoParams::default(),
        rounds,
        stop,
        seed,
        capture_rounds: vec![],
        parallel: false,
    }
}

fn homomorphic_equivalence() -> Outcome {
    let keys = keygen(1, CryptoParams::default()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let models: Vec<Vec<f64>> = (0..3).map(|_| (0..100).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
        w[2] = 1.0 - w[0] - w[1];
        let mask = build_mask(rng.random_range(0.05..1.0), 100, None, trial).unwrap();
        let enc: Vec<MaskedModel> = models.iter().map(|m| encrypt_values(m, &mask, &keys.public, &mut rng).unwrap()).collect();
        let plain: Vec<MaskedModel> = models.iter().map(|m| MaskedModel::plaintext(m.clone())).collect();
        let got = decrypt_values(&server_aggregate(&enc, &w, &mask, true).unwrap(), &mask, &keys).unwrap();
        let want = server_aggregate(&plain, &w, &EncryptionMask::none(100), false).unwrap().plain;
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    outcome(worst < 1e-5, format!("max deviation {worst:.2e} over 50 configurations"))
}

fn small_federation(seed: u64) -> (ModelSpec, FederatedData) {
    let pool = make_toy_dataset(10, 20, 16, seed).unwrap();
    let (rest, test) = stratified_holdout(&pool, 5, seed);
    let (auth, syn) = split_authentic_synthetic(&rest, seed).unwrap();
    let data = FederatedData::from_pools(&auth, &syn, test, 3, Some(0.5), seed).unwrap();
    (ModelSpec::mlp([3, 16, 16], &[], 10, Activation::Tanh).unwrap(), data)
}

fn schedule_exactness() -> Outcome {
    for (syn, tot) in [(0, 1), (1, 4), (1, 2)] {
        let s = RoundSchedule::new(syn, tot).unwrap();
        for horizon in 1..=120u64 {
            let counted = (0..horizon).filter(|&t| is_authentic_round(t, &s)).count() as u64;
            if counted != ((1.0 - s.rho()) * horizon as f64).ceil() as u64 {
                return outcome(false, format!("rho {syn}/{tot} horizon {horizon}: {counted} authentic rounds"));
            }
        }
    }
    let (spec, data) = small_federation(3);
    let local = LocalTraining { epochs: 1, batch_size: 16, lr: 0.05 };
    let horizon = 20;
    let mut ops = Vec::new();
    for (syn, tot) in [(0, 1), (1, 4), (1, 2)] {
        let s = RoundSchedule::new(syn, tot).unwrap();
        let run = run_training(&training(&spec, s, 0.2, local, horizon, StopRule::Fixed, 5), &data).unwrap();
        let totals = run.ledger.totals();
        if totals.enc_ops != 3 * s.authentic_rounds(horizon as u64) {
            return outcome(false, format!("rho {syn}/{tot}: {} encryptions", totals.enc_ops));
        }
        ops.push(totals.enc_ops + totals.dec_ops);
    }
    let ratio = ops[2] as f64 / ops[0] as f64;
    outcome(ratio <= 0.52, format!("enc+dec ops rho=0.5 / rho=0 = {ratio:.3} ({} / {})", ops[2], ops[0]))
}

fn ciphertext_volume() -> Outcome {
    let (spec, data) = small_federation(4);
    let local = LocalTraining { epochs: 1, batch_size: 16, lr: 0.05 };
    let bytes = |s: RoundSchedule| {
        let run = run_training(&training(&spec, s, 0.2, local, 30, StopRule::Fixed, 6), &data).unwrap();
        run.ledger.totals().ciphertext_bytes_sent() as f64
    };
    let full = bytes(RoundSchedule::all_authentic());
    let half = bytes(RoundSchedule::new(1, 2).unwrap());
    let ratio = half / full;
    outcome(ratio <= 0.55, format!("ciphertext bytes rho=0.5 / rho=0 = {ratio:.3}"))
}

struct PrivacyRuns {
    plain: RoundScores,
    eta10: RoundScores,
    eta20: RoundScores,
    synthetic: RoundScores,
}

fn privacy_runs() -> PrivacyRuns {
    let size = 32;
    let pool = make_toy_dataset(10, 60, size, 1).unwrap();
    let (rest, test) = stratified_holdout(&pool, 10, 2);
    let (auth, syn) = split_authentic_synthetic(&rest, 3).unwrap();
    let n = 4;
    let a = partition_dirichlet(&auth, n, 0.5, 4).unwrap().apply(&auth);
    let s = partition_iid(&syn, n, 5).unwrap().apply(&syn);
    let clients = (0..n).map(|i| ClientDataset { client_id: i, authentic: a[i].clone(), synthetic: s[i].clone() }).collect();
    let data = FederatedData { clients, test };
    let spec = ModelSpec::toy_cnn(3, size, 10, Activation::Tanh).unwrap();
    let local = LocalTraining { epochs: 1, batch_size: 16, lr: 0.01 };
    let sweep = SweepConfig { images_per_class: 4, lr: 0.1, dlg: DlgConfig::default(), seed: 11 };
    let attack = |eta: f64, schedule: RoundSchedule, round: usize| {
        let cfg = TrainingConfig { capture_rounds: vec![round], ..training(&spec, schedule, eta, local, 10, StopRule::Fixed, 7) };
        let run = run_training(&cfg, &data).unwrap();
        let out = score_attack_sweep(&spec, &run.captures, &run.mask, &[round], &auth, &syn, &sweep).unwrap();
        out.rounds[0].clone()
    };
    let all = RoundSchedule::all_authentic();
    PrivacyRuns {
        plain: attack(0.0, all, 6),
        eta10: attack(0.1, all, 6),
        eta20: attack(0.2, all, 6),
        synthetic: attack(0.2, RoundSchedule::new(1, 2).unwrap(), 7),
    }
}

fn metrics(s: &RoundScores) -> [f64; 3] {
    [s.uqi, s.msssim, s.vif]
}

fn fmt_scores(s: &RoundScores) -> String {
    format!("uqi {:.3} msssim {:.3} vif {:.3}", s.uqi, s.msssim, s.vif)
}

fn privacy_direction(p: &PrivacyRuns) -> Outcome {
    let (a, b, c) = (metrics(&p.plain), metrics(&p.eta10), metrics(&p.eta20));
    let ordered = (0..3).all(|m| a[m] > b[m] && b[m] >= c[m]);
    let pass = ordered && a[1] > 0.9 && b[1] < 0.75 && c[1] < 0.75 && p.plain.attacked == 40;
    let gaps = [(a[1] - 0.9640).abs(), (b[1] - 0.7000).abs(), (c[1] - 0.6407).abs()];
    outcome(
        pass,
        format!(
            "eta=0 [{}] eta=0.1 [{}] eta=0.2 [{}]; msssim within 0.15 of reference: {}",
            fmt_scores(&p.plain),
            fmt_scores(&p.eta10),
            fmt_scores(&p.eta20),
            gaps.iter().all(|g| *g <= 0.15)
        ),
    )
}

fn synthetic_direction(p: &PrivacyRuns) -> Outcome {
    let (s, c) = (metrics(&p.synthetic), metrics(&p.eta20));
    let pass = !p.synthetic.is_authentic && (0..3).all(|m| s[m] < c[m]);
    let deltas: Vec<String> = (0..3).map(|m| format!("{:+.1}%", 100.0 * (s[m] - c[m]) / c[m])).collect();
    outcome(pass, format!("synthetic [{}] vs eta=0.2 authentic; deltas {}", fmt_scores(&p.synthetic), deltas.join(" ")))
}

fn accuracy_runs() -> Vec<RunSummary> {
    let (size, n) = (16, 5);
    let rule = ConvergenceRule::default();
    let mut summaries = Vec::new();
    for seed in 0..5u64 {
        let mut toy = ToyConfig::new(10, 150, size, 100 + seed);
        toy.class_strength = 0.15;
        toy.individual_strength = 0.4;
        toy.noise = 0.1;
        let pool = toy.generate().unwrap();
        let (rest, test) = stratified_holdout(&pool, 50, seed);
        let (auth, syn) = split_authentic_synthetic(&rest, seed).unwrap();
        let a = partition_dirichlet(&auth, n, 0.5, seed).unwrap().apply(&auth);
        let s = partition_iid(&syn, n, seed).unwrap().apply(&syn);
        let clients = (0..n).map(|i| ClientDataset { client_id: i, authentic: a[i].clone(), synthetic: s[i].clone() }).collect();
        let data = FederatedData { clients, test };
        let spec = ModelSpec::toy_cnn(3, size, 10, Activation::Tanh).unwrap();
        let local = LocalTraining { epochs: 1, batch_size: 16, lr: 0.02 };
        for (syn_rounds, tot) in [(0, 1), (1, 4), (1, 2)] {
            let schedule = RoundSchedule::new(syn_rounds, tot).unwrap();
            let cfg = training(&spec, schedule, 0.2, local, 300, StopRule::Convergence(rule), seed);
            let run = run_training(&cfg, &data).unwrap();
            summaries.push(run.summary(&format!("rho={syn_rounds}/{tot}"), schedule.rho(), 0.2, syn_rounds == 0, rule.window));
        }
    }
    summaries
}

fn accuracy_direction(runs: &[RunSummary]) -> (Outcome, Outcome) {
    let report = build_report(runs).unwrap();
    let get = |label: &str, field: &str| report.rows.iter().find(|r| r.label == label).and_then(|r| r.value(field)).unwrap();
    let acc = ["rho=0/1", "rho=1/4", "rho=1/2"].map(|l| get(l, "accuracy_pct"));
    let rounds = ["rho=0/1", "rho=1/4", "rho=1/2"].map(|l| get(l, "rounds_to_convergence"));
    let gain = 100.0 * (acc[2] - acc[0]) / acc[0];
    let accuracy = outcome(
        acc[2] >= acc[1] && acc[1] > acc[0],
        format!("trimmed accuracy rho=0 {:.2}% rho=0.25 {:.2}% rho=0.5 {:.2}% (rho=0.5 gain {gain:+.1}%)", acc[0], acc[1], acc[2]),
    );
    let convergence = outcome(
        rounds[1] > rounds[0] && rounds[2] > rounds[0],
        format!("trimmed rounds rho=0 {:.1} rho=0.25 {:.1} rho=0.5 {:.1}", rounds[0], rounds[1], rounds[2]),
    );
    (accuracy, convergence)
}

fn cost_formulas() -> Outcome {
    let (cf, che, che_hat) = (1.5, 0.25, 0.25);
    let eq1 = cost_fedavg_he(77.0, cf, che);
    let eq2 = cost_heintfl(92.0, 0.5, cf, che_hat);
    let exact = eq1 == 77.0 * 1.75 && eq2 == 92.0 * 1.5 + 0.5 * 92.0 * 0.25;
    let degenerate = (1..=200).all(|n| cost_heintfl(n as f64, 0.0, cf, che) == cost_fedavg_he(n as f64, cf, che));
    outcome(exact && degenerate, format!("fedavg+he(n=77) = {eq1}, interleaved(n=92, rho=0.5) = {eq2}, rho=0 degenerates: {degenerate}"))
}

fn oracle_suites() -> Outcome {
    let targets = ["nn_oracles", "metric_oracles", "protocol_oracles", "crypto_oracles", "attack_oracles", "data_oracles"];
    let mut cmd = Command::new(env!("CARGO"));
    cmd.args(["test", "-q", "-p", "ifl-core", "--lib"]);
    for t in targets {
        cmd.args(["--test", t]);
    }
    if !cfg!(debug_assertions) {
        cmd.arg("--release");
    }
    match cmd.output() {
        Ok(out) => {
            let text = String::from_utf8_lossy(&out.stdout);
            let passed: usize = text
                .lines()
                .filter_map(|l| l.strip_prefix("test result: ok. "))
                .filter_map(|l| l.split(' ').next()?.parse::<usize>().ok())
                .sum();
            outcome(out.status.success(), format!("{passed} oracle and unit tests passed across {} targets", targets.len() + 1))
        }
        Err(e) => outcome(false, format!("could not run cargo: {e}")),
    }
}

fn report(id: usize, name: &str, start: Instant, o: Outcome, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    let status = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} {status} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
}

fn main() -> ExitCode {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "homomorphic aggregation equivalence", t, homomorphic_equivalence(), &mut failures);
    let t = Instant::now();
    report(2, "schedule exactness", t, schedule_exactness(), &mut failures);
    let t = Instant::now();
    report(3, "ciphertext volume direction", t, ciphertext_volume(), &mut failures);
    let t = Instant::now();
    let privacy = privacy_runs();
    report(4, "privacy direction", t, privacy_direction(&privacy), &mut failures);
    report(5, "synthetic round privacy direction", t, synthetic_direction(&privacy), &mut failures);
    let t = Instant::now();
    let (accuracy, convergence) = accuracy_direction(&accuracy_runs());
    report(6, "accuracy improvement direction", t, accuracy, &mut failures);
    report(7, "convergence rounds direction", t, convergence, &mut failures);
    let t = Instant::now();
    report(8, "cost formulas", t, cost_formulas(), &mut failures);
    let t = Instant::now();
    report(9, "oracle suites", t, oracle_suites(), &mut failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
