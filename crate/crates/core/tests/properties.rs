//! Cross-module invariants that run on every build: sequence-generator
//! algebra, training-gradient fidelity, channel physics, estimator sanity,
//! and result-artifact hygiene. Everything here is deterministic and the
//! whole file is budgeted to finish in well under thirty seconds.

use std::collections::HashSet;

use patternbench::channel::{
    add_awgn, hard_decision_ber_theory, modulate_binary, transmit, AwgnConfig,
};
use patternbench::harness::{
    derive_seed, records_to_csv_string, run_experiment, ExperimentSpec, PatternKind, PatternSpec,
    Topology,
};
use patternbench::imdd::{
    apply_dispersion, imdd_link, shape_pulses, FieldWaveform, ImddConfig,
};
use patternbench::mlp::{gradient_check, make_windows, MlpModel};
use patternbench::seqgen::{
    extend_with_zero, lfsr_generate, random_bits, repeat_to_length, BitSequence, PrbsSpec,
};

// ---------------------------------------------------------------------------
// LFSR algebra
// ---------------------------------------------------------------------------

/// Check the defining recurrence b[n] = b[n-r] ^ b[n-r+1] cyclically over
/// the whole period, where r is the register order.
fn assert_recurrence(bits: &[u8], order: usize) {
    let p = bits.len();
    for n in 0..p {
        let expect = bits[(n + p - order) % p] ^ bits[(n + p - order + 1) % p];
        assert_eq!(
            bits[n], expect,
            "recurrence violated at position {n} (order {order})"
        );
    }
}

/// Pack the cyclic window of `l` bits starting at `n` into an integer.
fn window_code(bits: &[u8], n: usize, l: usize) -> u32 {
    let p = bits.len();
    (0..l).fold(0u32, |acc, k| (acc << 1) | u32::from(bits[(n + k) % p]))
}

#[test]
fn prbs7_recurrence_balance_and_window_universality_exhaustive() {
    let seq = lfsr_generate(&PrbsSpec::prbs7()).unwrap();
    assert_eq!(seq.len(), 127);
    assert_recurrence(&seq.bits, 7);

    let ones: usize = seq.bits.iter().map(|&b| b as usize).sum();
    assert_eq!(ones, 64, "maximal-length sequence has 2^(r-1) ones");
    assert_eq!(seq.len() - ones, 63);

    // Every nonzero 7-bit word appears exactly once per cyclic period.
    let codes: HashSet<u32> = (0..127).map(|n| window_code(&seq.bits, n, 7)).collect();
    assert_eq!(codes.len(), 127);
    assert!(!codes.contains(&0), "all-zeros word cannot appear");

    // Zero extension completes the De Bruijn property: all 128 words.
    let ext = extend_with_zero(&seq).unwrap();
    assert_eq!(ext.len(), 128);
    let codes: HashSet<u32> = (0..128).map(|n| window_code(&ext.bits, n, 7)).collect();
    assert_eq!(codes.len(), 128);
}

#[test]
fn prbs15_recurrence_balance_and_window_universality() {
    let seq = lfsr_generate(&PrbsSpec::prbs15()).unwrap();
    assert_eq!(seq.len(), 32767);
    assert_recurrence(&seq.bits, 15);

    let ones: usize = seq.bits.iter().map(|&b| b as usize).sum();
    assert_eq!(ones, 16384);
    assert_eq!(seq.len() - ones, 16383);

    let ext = extend_with_zero(&seq).unwrap();
    let codes: HashSet<u32> = (0..ext.len())
        .map(|n| window_code(&ext.bits, n, 15))
        .collect();
    assert_eq!(codes.len(), 32768, "every 15-bit word exactly once");
}

#[test]
fn parity_shortcut_prbs7_exhaustive() {
    // b[n] = b[n+6] ^ b[n-1]: the recurrence reindexed so that the centre
    // bit of a window is a parity of two other in-window positions.
    let seq = lfsr_generate(&PrbsSpec::prbs7()).unwrap();
    let p = seq.len();
    for n in 0..p {
        let predicted = seq.bits[(n + 6) % p] ^ seq.bits[(n + p - 1) % p];
        assert_eq!(seq.bits[n], predicted, "shortcut violated at {n}");
    }
}

#[test]
fn parity_shortcut_prbs15_exhaustive() {
    let seq = lfsr_generate(&PrbsSpec::prbs15()).unwrap();
    let p = seq.len();
    for n in 0..p {
        let predicted = seq.bits[(n + 14) % p] ^ seq.bits[(n + p - 1) % p];
        assert_eq!(seq.bits[n], predicted, "shortcut violated at {n}");
    }
}

#[test]
fn repeated_unit_window_multiset_is_cyclic_invariant() {
    // Rotating the repeating unit permutes which window is seen when, but
    // the multiset of windows over one full period is unchanged. This is
    // why a cyclic offset at evaluation time cannot change the BER of a
    // receiver that classifies windows independently.
    let unit = random_bits(32, derive_seed(7, "cyclic-unit")).unwrap();
    let l = 9usize;
    let periods = 3usize;
    let collect = |bits: &[u8]| -> Vec<Vec<u8>> {
        let repeated = repeat_to_length(
            &BitSequence {
                bits: bits.to_vec(),
                ..unit.clone()
            },
            bits.len() * periods,
        )
        .unwrap();
        let mut windows: Vec<Vec<u8>> = (0..bits.len())
            .map(|i| repeated.bits[i..i + l].to_vec())
            .collect();
        windows.sort();
        windows
    };
    let reference = collect(&unit.bits);
    for offset in 1..unit.len() {
        let mut rotated = unit.bits.clone();
        rotated.rotate_left(offset);
        assert_eq!(
            collect(&rotated),
            reference,
            "window multiset changed under cyclic offset {offset}"
        );
    }
}

// ---------------------------------------------------------------------------
// Training-gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn gradient_check_across_seeds_topologies_and_class_counts() {
    // Analytic backprop vs central finite differences for every topology /
    // class-count combination on five seeds each. Windows come from a real
    // noisy modulated sequence so the input statistics match actual use.
    let l = 5usize;
    let n_bits = 24usize;
    for seed in 0..5u64 {
        let bits_a = random_bits(n_bits, derive_seed(seed, "gc-a")).unwrap();
        let bits_b = random_bits(n_bits, derive_seed(seed, "gc-b")).unwrap();
        let rx = transmit(
            &bits_a,
            &AwgnConfig::new(10.0, derive_seed(seed, "gc-noise")).unwrap(),
        )
        .unwrap();
        let labels2 = bits_a.bits.clone();
        let labels4: Vec<u8> = bits_a
            .bits
            .iter()
            .zip(&bits_b.bits)
            .map(|(&a, &b)| (a << 1) | b)
            .collect();
        for hidden in &[vec![8usize], vec![64, 64]] {
            for (labels, n_classes) in [(&labels2, 2usize), (&labels4, 4usize)] {
                let ds = make_windows(&rx.samples, labels, l, 1, n_classes).unwrap();
                let mut sizes = vec![l];
                sizes.extend_from_slice(hidden);
                sizes.push(n_classes);
                let model =
                    MlpModel::new(&sizes, 0.01, derive_seed(seed, "gc-init")).unwrap();
                let report = gradient_check(&model, &ds, 1e-5).unwrap();
                assert!(
                    report.max_relative_error < 1e-5,
                    "gradient mismatch {:.3e} (seed {seed}, sizes {sizes:?}, {n_classes} classes)",
                    report.max_relative_error
                );
                assert!(
                    report.kink_crossings < model.num_params() / 5,
                    "too many kink exclusions to trust the check: {}",
                    report.kink_crossings
                );
            }
        }
    }
}

#[test]
fn softmax_outputs_are_normalized_probabilities() {
    // The forward pass must emit a valid distribution even for inputs far
    // outside the normalizer's fitted range (logits in the hundreds).
    for seed in 0..3u64 {
        for &scale in &[1.0, 1e3, 1e6] {
            let sizes = [9usize, 8, 4];
            let model = MlpModel::new(&sizes, 0.01, derive_seed(seed, "sm-init")).unwrap();
            let window: Vec<f64> = (0..9)
                .map(|i| scale * (((i * 2654435761usize + seed as usize) % 17) as f64 - 8.0))
                .collect();
            let probs = model.forward(&window).unwrap();
            assert_eq!(probs.len(), 4);
            let sum: f64 = probs.iter().sum();
            assert!(
                (sum - 1.0).abs() < 1e-12,
                "probabilities sum to {sum} (scale {scale})"
            );
            assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
    // A zeroed network produces exactly the uniform distribution.
    let uniform = MlpModel::zeroed(&[5, 8, 4], 0.01)
        .unwrap()
        .forward(&[0.3, -1.0, 2.0, 0.0, 7.0])
        .unwrap();
    for p in uniform {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

// ---------------------------------------------------------------------------
// Channel physics
// ---------------------------------------------------------------------------

#[test]
fn dispersion_round_trip_recovers_field() {
    let symbols = PatternSpec::new(PatternKind::Random)
        .pam4_symbols(256, derive_seed(3, "rt-pattern"))
        .unwrap();
    let cfg = ImddConfig::defaults(f64::INFINITY, 1);
    let field = shape_pulses(&symbols, &cfg).unwrap();
    let mut inverse_cfg = cfg;
    inverse_cfg.dispersion_ps_nm_km = -cfg.dispersion_ps_nm_km;
    let there = apply_dispersion(&field, &cfg).unwrap();
    let back = apply_dispersion(&there, &inverse_cfg).unwrap();
    let peak = field
        .samples
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    let worst = field
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max);
    assert!(
        worst / peak < 1e-9,
        "round-trip residual {worst:.3e} vs peak {peak:.3e}"
    );
}

#[test]
fn dispersion_matches_gaussian_broadening_theory() {
    // Independent closed-form oracle: a Gaussian field pulse of 1/e
    // half-width T0 keeps a Gaussian intensity profile under quadratic
    // spectral phase, with RMS width (T0/sqrt(2)) * sqrt(1 + (b2*L/T0^2)^2).
    let cfg = ImddConfig::defaults(f64::INFINITY, 1);
    let fs = cfg.sample_rate();
    let n = 1 << 14;
    let t0 = 20.0e-12;
    let centre = (n / 2) as f64;
    let field = FieldWaveform {
        samples: (0..n)
            .map(|i| {
                let t = (i as f64 - centre) / fs;
                rustfft::num_complex::Complex::new((-t * t / (2.0 * t0 * t0)).exp(), 0.0)
            })
            .collect(),
        sample_rate: fs,
    };
    let rms_width = |w: &FieldWaveform| {
        let intensity: Vec<f64> = w.samples.iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = intensity.iter().sum();
        let mean: f64 = intensity
            .iter()
            .enumerate()
            .map(|(i, &v)| i as f64 * v)
            .sum::<f64>()
            / total;
        let var: f64 = intensity
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64 - mean).powi(2) * v)
            .sum::<f64>()
            / total;
        var.sqrt() / fs
    };
    for fiber_km in [10.0, 20.0] {
        let mut c = cfg;
        c.fiber_km = fiber_km;
        let out = apply_dispersion(&field, &c).unwrap();
        let b2l = c.beta2_s2_per_m() * fiber_km * 1000.0;
        let theory = (t0 / 2f64.sqrt()) * (1.0 + (b2l / (t0 * t0)).powi(2)).sqrt();
        let measured = rms_width(&out);
        assert!(
            (measured - theory).abs() / theory < 1e-3,
            "{fiber_km} km: measured {measured:.4e}, theory {theory:.4e}"
        );
    }
}

#[test]
fn hard_decision_ber_is_monotone_in_snr() {
    // Theory curve: strictly decreasing on a fine grid.
    let mut prev = f64::INFINITY;
    let mut snr = 0.0;
    while snr <= 15.0 {
        let ber = hard_decision_ber_theory(snr);
        assert!(ber < prev, "theory BER not decreasing at {snr} dB");
        prev = ber;
        snr += 0.5;
    }
    // Monte-Carlo estimates: decreasing over well-separated SNR points
    // (the spacing makes the ordering robust to sampling noise).
    let n = 300_000usize;
    let bits = random_bits(n, derive_seed(11, "mono-bits")).unwrap();
    let tx = modulate_binary(&bits);
    let mut prev = f64::INFINITY;
    for (i, &snr) in [6.0, 9.0, 12.0].iter().enumerate() {
        let cfg = AwgnConfig::new(snr, derive_seed(11, &format!("mono-noise-{i}"))).unwrap();
        let rx = add_awgn(&tx, &cfg).unwrap();
        let errors = rx
            .iter()
            .zip(&bits.bits)
            .filter(|(&s, &b)| u8::from(s >= 0.0) != b)
            .count();
        let ber = errors as f64 / n as f64;
        assert!(
            ber < prev,
            "measured BER not decreasing at {snr} dB ({ber:.3e} vs {prev:.3e})"
        );
        prev = ber;
    }
}

#[test]
fn imdd_link_is_deterministic_and_noise_scales_with_snr() {
    let symbols = PatternSpec::new(PatternKind::Random)
        .pam4_symbols(512, derive_seed(5, "imdd-prop"))
        .unwrap();
    let cfg = ImddConfig::defaults(20.0, 77);
    let a = imdd_link(&symbols, &cfg).unwrap();
    let b = imdd_link(&symbols, &cfg).unwrap();
    assert_eq!(a.samples, b.samples, "same config must give identical output");

    // Residual noise power halves (in dB: -3) when SNR rises by 3 dB.
    let clean = imdd_link(&symbols, &ImddConfig::defaults(f64::INFINITY, 77)).unwrap();
    let power = |w: &[f64], c: &[f64]| -> f64 {
        w.iter()
            .zip(c)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / w.len() as f64
    };
    let p20 = power(&a.samples, &clean.samples);
    let high = imdd_link(&symbols, &ImddConfig::defaults(23.0, 78)).unwrap();
    let p23 = power(&high.samples, &clean.samples);
    let ratio_db = 10.0 * (p20 / p23).log10();
    assert!(
        (ratio_db - 3.0).abs() < 0.35,
        "noise power ratio {ratio_db:.2} dB, expected 3 dB"
    );
}

// ---------------------------------------------------------------------------
// Artifact hygiene
// ---------------------------------------------------------------------------

fn small_sweep_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::sweep_snr(
        PatternSpec::new(PatternKind::Prbs7),
        9,
        vec![8.0, 10.0],
    );
    spec.train_size = 1 << 10;
    spec.eval_size = 1 << 10;
    spec.epochs = 1;
    spec.allow_small_eval = true;
    spec
}

#[test]
fn experiment_results_are_bit_exact_reproducible() {
    let spec = small_sweep_spec();
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    let strip = |records: &[patternbench::harness::ResultRecord]| {
        let mut rs = records.to_vec();
        for r in &mut rs {
            r.wall_time_s = 0.0; // timing is the only permitted difference
        }
        records_to_csv_string(&rs).unwrap()
    };
    assert_eq!(
        strip(&a.records),
        strip(&b.records),
        "identical spec must reproduce identical results"
    );

    let mut other = small_sweep_spec();
    other.master_seed = 1;
    let c = run_experiment(&other).unwrap();
    assert_ne!(
        strip(&a.records),
        strip(&c.records),
        "a different master seed must change the draw"
    );
}

#[test]
fn every_record_passes_metadata_validation() {
    let mut all = Vec::new();

    let sweep = run_experiment(&small_sweep_spec()).unwrap();
    all.extend(sweep.records);

    let mut rep = ExperimentSpec::repeated_random(vec![9.0]);
    rep.train_size = 1 << 10;
    rep.eval_size = 1 << 10;
    rep.epochs = 1;
    rep.allow_small_eval = true;
    all.extend(run_experiment(&rep).unwrap().records);

    let mut imdd = ExperimentSpec::imdd(vec![20.0]);
    imdd.topology = Topology::Shallow8;
    imdd.train_size = 33_000; // one PRBS15 PAM4 unit is 32768 symbols
    imdd.eval_size = 33_000;
    imdd.epochs = 1;
    imdd.allow_small_eval = true;
    all.extend(run_experiment(&imdd).unwrap().records);

    assert!(!all.is_empty());
    for record in &all {
        record
            .validate()
            .unwrap_or_else(|e| panic!("incomplete record {record:?}: {e}"));
    }

    // The records survive a CSV round trip unchanged.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    patternbench::harness::write_records_path(&path, &all).unwrap();
    let back = patternbench::harness::read_records_path(&path).unwrap();
    assert_eq!(all.len(), back.len());
    for (x, y) in all.iter().zip(&back) {
        assert_eq!(
            records_to_csv_string(std::slice::from_ref(x)).unwrap(),
            records_to_csv_string(std::slice::from_ref(y)).unwrap()
        );
    }
}
