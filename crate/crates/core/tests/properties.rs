use proptest::prelude::*;

use fbcode::autodiff::Var;
use fbcode::codec::{bits_to_index, index_to_bits, Snrs};
use fbcode::config::{desk_scale_config, reference_config, ExperimentConfig, FeedbackMode, StdConvention};
use fbcode::evaluation::{wilson_interval, BlerPoint};
use fbcode::networks::{power_normalize, NormMode, PowerNormStats};
use fbcode::tensor::Tensor;
use fbcode::training::{cross_entropy_loss, curriculum_snrs, lr_at};

proptest! {
    #[test]
    fn block_index_round_trip(m in 1usize..12, seed in any::<u64>()) {
        let p = (seed % (1u64 << m)) as usize;
        let bits = index_to_bits(p, m).unwrap();
        prop_assert_eq!(bits.len(), m);
        prop_assert_eq!(bits_to_index(&bits).unwrap(), p);
    }

    #[test]
    fn loss_ignores_per_block_shifts(
        logits in prop::collection::vec(-5.0f64..5.0, 4 * 8),
        shifts in prop::collection::vec(-50.0f64..50.0, 4),
        labels in prop::collection::vec(0usize..8, 4),
    ) {
        let base = Tensor::from_vec(4, 8, logits.clone());
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + shifts[i / 8]).collect();
        let a = cross_entropy_loss(&Var::constant(base), &labels, 1).value().get(0, 0);
        let b = cross_entropy_loss(&Var::constant(Tensor::from_vec(4, 8, shifted)), &labels, 1).value().get(0, 0);
        prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn curriculum_stays_between_segment_endpoints(batch in 0u64..60_000) {
        let cfg = reference_config();
        let s = curriculum_snrs(batch, &cfg.train, Snrs::from_protocol(&cfg.protocol));
        if batch < 20_000 {
            prop_assert!(s.ff_db <= 3.0 && s.ff_db >= -1.0 && s.fb_db == 100.0);
        } else if batch < 40_000 {
            prop_assert!(s.ff_db == -1.0 && s.fb_db <= 100.0 && s.fb_db > 20.0);
        } else {
            prop_assert_eq!(s, Snrs::new(-1.0, 20.0));
        }
        // One step never jumps by more than one increment.
        let next = curriculum_snrs(batch + 1, &cfg.train, Snrs::from_protocol(&cfg.protocol));
        prop_assert!((next.ff_db - s.ff_db).abs() <= 4.0 / 20_000.0 + 1e-12);
        prop_assert!((next.fb_db - s.fb_db).abs() <= 80.0 / 20_000.0 + 1e-12);
    }

    #[test]
    fn lr_decays_monotonically(a in 0u64..140_000, b in 0u64..140_000) {
        let cfg = reference_config();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(lo, &cfg.train) >= lr_at(hi, &cfg.train));
        prop_assert!(lr_at(hi, &cfg.train) >= cfg.train.lr_decay.lr_final);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(n in 1u64..1_000_000, frac in 0.0f64..1.0) {
        let k = ((n as f64) * frac) as u64;
        let (lo, hi) = wilson_interval(k, n, 1.96);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn error_rate_relation_holds_for_consistent_counts(
        errors in 0u64..1000,
        extra_blocks in prop::collection::vec(0u64..3, 0..1000),
    ) {
        // Each wrong message has between 1 and l = 4 wrong blocks.
        let trials = 5000;
        let wrong_blocks: u64 = (0..errors as usize).map(|i| 1 + extra_blocks.get(i).copied().unwrap_or(0)).sum();
        let p = BlerPoint::from_counts(Snrs::new(0.0, 20.0), trials, errors, trials * 4, wrong_blocks, false);
        prop_assert!(p.check_invariant(4).is_ok());
    }

    #[test]
    fn train_mode_normalization_gives_unit_power(
        data in prop::collection::vec(-3.0f64..3.0, 16 * 4),
        offset in -10.0f64..10.0,
        gain in 0.1f64..10.0,
    ) {
        let raw: Vec<f64> = data.iter().map(|v| offset + gain * v).collect();
        let stats = PowerNormStats::unfrozen(1, 4);
        let x = Var::constant(Tensor::from_vec(64, 1, raw));
        let (out, _) = match power_normalize(&x, &stats, 1, NormMode::Train, StdConvention::Population) {
            Ok(v) => v,
            Err(_) => return Ok(()), // a constant column has no defined scale
        };
        let v = out.value();
        for pos in 0..4 {
            let col: Vec<f64> = (0..16).map(|b| v.get(b * 4 + pos, 0)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let power = col.iter().map(|c| c * c).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((power - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_toml_round_trip(
        l in 1usize..20,
        m in 1usize..6,
        t in 1usize..10,
        ff in -5.0f64..10.0,
        mode in prop_oneof![Just(FeedbackMode::Active), Just(FeedbackMode::Passive)],
    ) {
        let k = l * m;
        let cfg = desk_scale_config(mode)
            .with_overrides(&[
                format!("K={k}"),
                format!("l={l}"),
                format!("m={m}"),
                format!("T={t}"),
                format!("N_per_block={l}"),
                format!("R={}", k as f64 / (l * t) as f64),
                format!("snr_ff_db={ff}"),
            ])
            .unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(cfg.network.d_in_parity, m + 2 * (t - 1));
        prop_assert_eq!(cfg.network.d_in_decoder, 2 * t - 1);
    }

    #[test]
    fn tensor_archive_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = fbcode::channel::rng_from_seed(seed);
        let data: Vec<f32> = fbcode::channel::standard_normals(&mut rng, rows * cols).iter().map(|&v| v as f32 * 1e3).collect();
        let t = Tensor::from_vec(rows, cols, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wt");
        fbcode::archive::write_tensors(&path, &reference_config(), &[("x".to_string(), &t)], (false, false), Default::default()).unwrap();
        let back = fbcode::archive::TensorFile::read(&path).unwrap().tensor::<f32>("x").unwrap();
        prop_assert_eq!(back, t);
    }
}
