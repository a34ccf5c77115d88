//! Acceptance checks. Each test prints one `criterion N ... PASS|FAIL` line.
//!
//! Expected values are computed here from first principles (closed forms,
//! finite differences, independent re-derivations) rather than taken from
//! the library under test.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use fbcode::channel::{derive_seed, rng_from_seed};
use fbcode::codec::{jpsd_logits, run_ipse, run_traces, MessageBatch, Noise, Snrs};
use fbcode::config::{desk_scale_config, reference_config, ExperimentConfig, FeedbackMode, Precision};
use fbcode::evaluation::{estimate_bler, BernoulliOracle, EstimateOptions};
use fbcode::networks::{freeze_stats, Model, NormMode};
use fbcode::tensor::Tensor;
use fbcode::training::{cross_entropy_loss, read_losses, train_loop, TrainOptions, Trainer};
use fbcode::archive;

// Written to the raw stderr handle so the line survives libtest output capture.
fn emit(line: String) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    emit(format!("criterion {n:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" }));
}

#[test]
fn criterion_01_configuration_fidelity() {
    let cfg = reference_config();
    let p = &cfg.protocol;
    let n = &cfg.network;
    let acc = p.accounting();
    let got = (
        (p.message_bits, p.m, p.l, p.rounds),
        (acc.forward_uses, acc.feedback_uses, acc.direction_changes),
        (n.d_in_parity, n.d_in_feedback, n.d_in_decoder),
        (n.n_layers_parity, n.n_layers_feedback, n.n_layers_decoder),
        n.d_model,
        (n.d_out_parity, n.d_out_feedback, n.d_out_decoder),
    );
    // Widths: parity sees m bits plus T-1 past parity and T-1 past feedback
    // symbols; feedback and decoder see T observations and T-1 feedbacks.
    let (m, t) = (3usize, 9usize);
    let want = (
        (51, 3, 17, 9),
        (17 * t, 17 * (t - 1), 2 * t - 1),
        (m + 2 * (t - 1), t + t - 1, t + t - 1),
        (2, 2, 3),
        32,
        (1, 1, 1 << m),
    );
    let rate_ok = (p.rate - 1.0 / 3.0).abs() < 1e-15 && (p.message_bits as f64 / acc.forward_uses as f64 - p.rate).abs() < 1e-15;
    let valid = cfg.validate().is_valid();
    let pass = got == want && rate_ok && valid;
    report(1, "configuration fidelity", pass, &format!("{got:?}, R = {}", p.rate));
    assert!(pass);
}

#[test]
fn criterion_02_power_constraint_audit() {
    let start = Instant::now();
    let cfg = reference_config();
    let mut model = Model::<f32>::new(&cfg, 11).unwrap();
    freeze_stats(&mut model, cfg.eval.calibration_batch, &mut rng_from_seed(12)).unwrap();
    let audit = fbcode::evaluation::power_audit(&model, 100_000, 10_000, Snrs::from_protocol(&cfg.protocol), 13).unwrap();
    let pass = (audit.forward_power - 1.0).abs() <= 0.02 && (audit.feedback_power - 1.0).abs() <= 0.02;
    report(
        2,
        "power constraint audit",
        pass,
        &format!(
            "forward {:.5}, feedback {:.5} over {} messages, tolerance 2%, {:.0} s",
            audit.forward_power,
            audit.feedback_power,
            audit.messages,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn gradcheck_config() -> ExperimentConfig {
    let mut cfg = desk_scale_config(FeedbackMode::Active);
    cfg = cfg
        .with_overrides(&[
            "K=4", "m=2", "l=2", "T=2", "N_per_block=2", "R=1.0", "d_model=8", "n_heads=2", "d_ffn=16",
            "n_layers_parity=1", "n_layers_feedback=1", "n_layers_decoder=1", "batch_size=8", "precision=\"f64\"",
        ])
        .unwrap();
    cfg.train.curriculum.clear();
    cfg.protocol.snr_ff_db = 0.0;
    cfg.protocol.snr_fb_db = 10.0;
    cfg.validate().into_result().unwrap();
    cfg
}

#[test]
fn criterion_03_gradient_check() {
    let cfg = gradcheck_config();
    assert_eq!(cfg.train.precision, Precision::F64);
    let mut trainer = Trainer::<f64>::new(&cfg).unwrap();
    let snrs = Snrs::from_protocol(&cfg.protocol);
    let (_, analytic) = trainer.loss_and_grads(0, snrs).unwrap();
    let names = trainer.model.params.names().to_vec();
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    // Groups whose true gradient vanishes identically (a constant shift of a
    // symbol network's output is removed by power normalization) have no
    // meaningful relative error; both gradients must then be ~0 in absolute
    // terms, at the level of finite-difference noise.
    let zero_level = 1e-8;
    let mut zero_groups = Vec::new();
    let mut zero_ok = true;
    for (i, name) in names.iter().enumerate() {
        let len = trainer.model.params.tensors()[i].len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let orig = trainer.model.params.tensors()[i].data()[j];
            trainer.model.params.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = trainer.loss_and_grads(0, snrs).unwrap().0;
            trainer.model.params.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = trainer.loss_and_grads(0, snrs).unwrap().0;
            trainer.model.params.tensors_mut()[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let a = analytic[i].data();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(a).max(norm(&numeric));
        if scale < zero_level {
            zero_ok &= norm(a) < 1e-12 && norm(&numeric) < zero_level;
            zero_groups.push(name.clone());
            continue;
        }
        let rel = diff / scale;
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    let pass = worst.0 < 1e-4 && zero_ok;
    report(
        3,
        "gradient check",
        pass,
        &format!(
            "{} parameter groups, worst relative error {:.2e} in {}; {} groups with vanishing gradient {:?} below {zero_level:.0e}: {zero_ok}",
            names.len() - zero_groups.len(),
            worst.0,
            worst.1,
            zero_groups.len(),
            zero_groups
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_loss_sanity() {
    let cfg = reference_config();
    let mut model = Model::<f64>::new(&cfg, 3).unwrap();
    for name in ["decoder.map.weight", "decoder.map.bias"] {
        let t = model.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let batch = 16;
    let mut rng = rng_from_seed(4);
    let messages = MessageBatch::random(batch, cfg.protocol.message_bits, &mut rng);
    let noise = Noise::sample(&cfg.protocol.layout(), batch, &mut rng);
    let params = model.params.bind(false);
    let ep = run_ipse(&model, &params, &messages, Snrs::from_protocol(&cfg.protocol), &noise, NormMode::Train).unwrap();
    let logits = jpsd_logits(&model, &params, &ep).unwrap();
    let loss = cross_entropy_loss(&logits, &messages.labels(cfg.protocol.m), batch).value().get(0, 0);
    let expected = 17.0 * 3.0 * std::f64::consts::LN_2;
    let pass = (loss - expected).abs() < 1e-3;
    report(4, "loss sanity", pass, &format!("loss {loss:.6}, l*m*ln2 = {expected:.6}, tolerance 1e-3"));
    assert!(pass);
}

fn frozen_desk_model(mode: FeedbackMode, seed: u64) -> Model<f64> {
    let cfg = desk_scale_config(mode);
    let mut model = Model::<f64>::new(&cfg, seed).unwrap();
    freeze_stats(&mut model, 2048, &mut rng_from_seed(seed + 1)).unwrap();
    model
}

#[test]
fn criterion_05_causality() {
    let start = Instant::now();
    let mut all_ok = true;
    let mut checked = 0;
    for mode in [FeedbackMode::Active, FeedbackMode::Passive, FeedbackMode::SystematicFirst] {
        let model = frozen_desk_model(mode, 21);
        let proto = &model.config.protocol;
        let lay = proto.layout();
        let mut rng = rng_from_seed(22);
        let messages = MessageBatch::random(100, proto.message_bits, &mut rng);
        let noise = Noise::sample(&lay, 100, &mut rng);
        let snrs = Snrs::from_protocol(proto);
        let base = run_traces(&model, &messages, snrs, &noise, NormMode::Frozen).unwrap();
        for tau in 1..=proto.rounds {
            // Replace every noise sample of round tau and later.
            let mut future = noise.clone();
            for r in tau - 1..proto.rounds {
                for v in future.forward[r].iter_mut() {
                    *v = -*v + 0.5;
                }
                if r < proto.rounds - 1 {
                    for v in future.feedback[r].iter_mut() {
                        *v = -*v + 0.5;
                    }
                }
            }
            let other = run_traces(&model, &messages, snrs, &future, NormMode::Frozen).unwrap();
            for (a, b) in base.iter().zip(&other) {
                let bits = |v: &[Vec<f64>], n: usize| v[..n].iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
                all_ok &= bits(&a.forward, tau) == bits(&b.forward, tau);
                all_ok &= bits(&a.feedback, tau - 1) == bits(&b.feedback, tau - 1);
                checked += 1;
            }
        }
    }
    report(
        5,
        "causality",
        all_ok,
        &format!("{checked} episode/round pairs across three modes, {:.1} s", start.elapsed().as_secs_f64()),
    );
    assert!(all_ok);
}

#[test]
fn criterion_06_passive_and_systematic_modes() {
    let model = frozen_desk_model(FeedbackMode::Passive, 31);
    let proto = &model.config.protocol;
    let mut rng = rng_from_seed(32);
    let messages = MessageBatch::random(50, proto.message_bits, &mut rng);
    let noise = Noise::sample(&proto.layout(), 50, &mut rng);
    let mut alpha_err: f64 = 0.0;
    let mut exact = true;
    for (ff, fb) in [(2.0, 20.0), (-1.0, 5.0), (10.0, 100.0)] {
        let snrs = Snrs::new(ff, fb);
        let alpha = 1.0 / (1.0 + 10f64.powf(-ff / 10.0)).sqrt();
        alpha_err = alpha_err.max((fbcode::protocol::compute_alpha(snrs.sigma2_ff()).unwrap() - alpha).abs());
        let lib_alpha = fbcode::protocol::compute_alpha(snrs.sigma2_ff()).unwrap();
        for tr in run_traces(&model, &messages, snrs, &noise, NormMode::Frozen).unwrap() {
            for (c_fb, y) in tr.feedback.iter().zip(&tr.forward_rx) {
                exact &= c_fb.iter().zip(y).all(|(c, y)| *c == lib_alpha * y);
            }
        }
    }
    let sys = frozen_desk_model(FeedbackMode::SystematicFirst, 33);
    let sys_proto = &sys.config.protocol;
    let sys_msgs = MessageBatch::random(50, sys_proto.message_bits, &mut rng);
    let sys_noise = Noise::sample(&sys_proto.layout(), 50, &mut rng);
    let mut bpsk = true;
    for (b, tr) in run_traces(&sys, &sys_msgs, Snrs::from_protocol(sys_proto), &sys_noise, NormMode::Frozen)
        .unwrap()
        .iter()
        .enumerate()
    {
        let first = &tr.forward[0];
        bpsk &= first.len() == sys_proto.message_bits;
        bpsk &= first.iter().zip(sys_msgs.message(b)).all(|(c, &bit)| *c == if bit == 1 { 1.0 } else { -1.0 });
    }
    let pass = exact && alpha_err < 1e-12 && bpsk;
    report(
        6,
        "passive and systematic modes",
        pass,
        &format!("feedback == alpha*y exactly: {exact}, alpha error {alpha_err:.1e}, first round in {{-1,+1}}^K: {bpsk}"),
    );
    assert!(pass);
}

struct DeskRun {
    bler: f64,
    errors: u64,
    trials: u64,
    initial_loss: f64,
    final_loss: f64,
    seconds: f64,
}

fn desk_run(mode: FeedbackMode, seed: u64) -> DeskRun {
    let start = Instant::now();
    let mut cfg = desk_scale_config(mode);
    cfg.train.seed = seed;
    let dir = tempfile::tempdir().unwrap();
    let out = train_loop::<f32>(&cfg, &TrainOptions { out_dir: dir.path().to_path_buf(), ..Default::default() }).unwrap();
    let losses = read_losses(&out.metrics).unwrap();
    let tail = &losses[losses.len() - 100..];
    let (model, _) = archive::load_model::<f32>(out.archive.as_ref().unwrap()).unwrap();
    let opts = EstimateOptions::from_config(&cfg.eval, derive_seed(seed, "acceptance-bler"));
    let point = estimate_bler(&model, Snrs::from_protocol(&cfg.protocol), &opts).unwrap();
    DeskRun {
        bler: point.bler,
        errors: point.block_errors,
        trials: point.trials,
        initial_loss: losses[0],
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn active_seed0() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run(FeedbackMode::Active, 0))
}

#[test]
fn criterion_07_desk_scale_learning() {
    let run = active_seed0();
    let pass = run.bler < 0.1 && run.final_loss < run.initial_loss / 5.0;
    report(
        7,
        "desk-scale learning",
        pass,
        &format!(
            "BLER {:.4} ({} errors / {} messages), loss {:.4} -> {:.4} (last-100 mean), {:.0} s",
            run.bler, run.errors, run.trials, run.initial_loss, run.final_loss, run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_active_vs_passive() {
    let mut active = vec![active_seed0().bler];
    active.extend([1, 2].map(|s| desk_run(FeedbackMode::Active, s).bler));
    let passive: Vec<f64> = [0, 1, 2].map(|s| desk_run(FeedbackMode::Passive, s).bler).to_vec();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, p) = (mean(&active), mean(&passive));
    let holds = a <= p;
    // Desk-scale variance is high, so a reversal is reported, not failed.
    emit(format!(
        "criterion  8 active vs passive: {} (mean BLER active {a:.4} {active:?}, passive {p:.4} {passive:?})",
        if holds { "PASS" } else { "FLAG" }
    ));
}

#[test]
fn criterion_09_bler_estimator_calibration() {
    let start = Instant::now();
    let p = 1e-2;
    let oracle = BernoulliOracle { p, message_bits: 12, m: 3 };
    let eval = reference_config().eval;
    let mut within = 0;
    let mut estimates = Vec::new();
    for seed in 0..100 {
        let point = estimate_bler(&oracle, Snrs::new(0.0, 20.0), &EstimateOptions::from_config(&eval, seed)).unwrap();
        assert!(point.block_errors >= 100);
        if (point.bler - p).abs() <= 0.2 * p {
            within += 1;
        }
        estimates.push(point.bler);
    }
    let mean = estimates.iter().sum::<f64>() / 100.0;
    let pass = within >= 95;
    report(
        9,
        "BLER estimator calibration",
        pass,
        &format!("{within}/100 runs within 20% of p = 1e-2, mean estimate {mean:.5}, {:.1} s", start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let cfg = desk_scale_config(FeedbackMode::Active);
    let losses = || {
        let mut t = Trainer::<f32>::new(&cfg).unwrap();
        (0..10).map(|_| t.step().unwrap().loss).collect::<Vec<_>>()
    };
    let same_losses = losses() == losses();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wt");
    let mut model = Model::<f32>::new(&cfg, 5).unwrap();
    freeze_stats(&mut model, 512, &mut rng_from_seed(6)).unwrap();
    archive::save_model(&model, &path, Default::default()).unwrap();
    let (back, _) = archive::load_model::<f32>(&path).unwrap();
    let bit_exact = model.params.iter().zip(back.params.iter()).all(|((na, a), (nb, b))| {
        na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back.parity_stats == model.parity_stats
        && back.feedback_stats == model.feedback_stats;

    let mut short = cfg.clone();
    short.train.total_batches = 20;
    short.train.checkpoint_interval = 10;
    short.train.curriculum[0].length = 5;
    short.train.curriculum[1].length = 5;
    short.train.batch_size = 64;
    short.eval.calibration_batch = 256;
    let full = train_loop::<f32>(&short, &TrainOptions { out_dir: dir.path().join("full"), ..Default::default() }).unwrap();
    let part_dir = dir.path().join("part");
    train_loop::<f32>(&short, &TrainOptions { out_dir: part_dir.clone(), stop_after: Some(10), ..Default::default() }).unwrap();
    let resumed = train_loop::<f32>(
        &short,
        &TrainOptions { out_dir: part_dir.clone(), resume: Some(part_dir.join("ckpt_10")), ..Default::default() },
    )
    .unwrap();
    let resume_equal = resumed.trainer.model == full.trainer.model
        && read_losses(&resumed.metrics).unwrap() == read_losses(&full.metrics).unwrap();

    let pass = same_losses && bit_exact && resume_equal;
    report(
        10,
        "determinism and persistence",
        pass,
        &format!("same-seed losses equal: {same_losses}, archive bit-exact: {bit_exact}, resume equals uninterrupted: {resume_equal}"),
    );
    assert!(pass);
}
