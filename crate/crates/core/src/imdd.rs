//! PAM4 intensity-modulated direct-detection link: raised-cosine pulse
//! shaping, chromatic dispersion as an all-pass quadratic-phase filter,
//! square-law photodetection, and post-detector AWGN.
//!
//! Dispersion plus square-law detection makes the received intensity a
//! nonlinear function of the transmitted levels — the channel memory a
//! learned equalizer legitimately compensates.

use crate::seqgen::SymbolSequence;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Transmitted field amplitudes for PAM4 symbols 0..3: equally spaced in
/// field, so detected intensities are the squares {0, 1/9, 4/9, 1}.
pub const FIELD_LEVELS: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];

pub const SPEED_OF_LIGHT_M_S: f64 = 2.997_924_58e8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImddError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("symbols must be nonempty and 4-ary")]
    BadSymbols,
    #[error("snr_db must be a real number or +inf, got NaN or -inf")]
    InvalidSnr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImddConfig {
    pub baud_rate: f64,
    pub samples_per_symbol: usize,
    pub rolloff: f64,
    pub fiber_km: f64,
    pub dispersion_ps_nm_km: f64,
    pub wavelength_nm: f64,
    pub snr_db: f64,
    pub rng_seed: u64,
}

impl ImddConfig {
    /// 32 Gbaud, 2 samples/symbol, roll-off 0.95, 10 km of D = 17 ps/nm/km
    /// fiber at 1550 nm.
    pub fn defaults(snr_db: f64, rng_seed: u64) -> Self {
        ImddConfig {
            baud_rate: 32e9,
            samples_per_symbol: 2,
            rolloff: 0.95,
            fiber_km: 10.0,
            dispersion_ps_nm_km: 17.0,
            wavelength_nm: 1550.0,
            snr_db,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ImddError> {
        if !self.baud_rate.is_finite() || self.baud_rate <= 0.0 {
            return Err(ImddError::BadConfig("baud_rate must be > 0".into()));
        }
        if self.samples_per_symbol < 2 {
            return Err(ImddError::BadConfig(
                "samples_per_symbol must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(ImddError::BadConfig("rolloff must be in [0, 1]".into()));
        }
        if self.fiber_km.is_nan() || self.fiber_km < 0.0 {
            return Err(ImddError::BadConfig("fiber_km must be >= 0".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(ImddError::InvalidSnr);
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> f64 {
        self.baud_rate * self.samples_per_symbol as f64
    }

    /// Group-velocity dispersion beta2 in s^2/m (negative for anomalous
    /// dispersion): beta2 = -D * lambda^2 / (2*pi*c).
    pub fn beta2_s2_per_m(&self) -> f64 {
        let d_s_per_m2 = self.dispersion_ps_nm_km * 1e-6; // ps/nm/km -> s/m^2
        let lambda_m = self.wavelength_nm * 1e-9;
        -d_s_per_m2 * lambda_m * lambda_m / (2.0 * std::f64::consts::PI * SPEED_OF_LIGHT_M_S)
    }
}

/// Real-valued waveform (post-detector domain).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// Complex optical field at the fiber input/output.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldWaveform {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
}

/// Raised-cosine impulse response sampled at `sps` points per symbol over
/// ±`half_span_symbols`, peak 1 at t = 0, exact zeros at nonzero integer
/// symbol offsets. The removable singularity at t = ±1/(2β) takes its limit
/// value (β/2)·sin(π/(2β)).
pub fn raised_cosine_taps(sps: usize, rolloff: f64, half_span_symbols: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let half = (half_span_symbols * sps) as isize;
    (-half..=half)
        .map(|k| {
            let t = k as f64 / sps as f64;
            if k == 0 {
                return 1.0;
            }
            let sinc = (PI * t).sin() / (PI * t);
            if rolloff == 0.0 {
                return sinc;
            }
            let denom = 1.0 - (2.0 * rolloff * t) * (2.0 * rolloff * t);
            if denom.abs() < 1e-9 {
                // t = ±1/(2β): L'Hôpital limit of the full expression.
                return (rolloff / 2.0) * (PI / (2.0 * rolloff)).sin();
            }
            sinc * (PI * rolloff * t).cos() / denom
        })
        .collect()
}

/// Symbols through truncation to ±16 symbols keeps residual ISI below 1e-3
/// at roll-off 0.95.
pub const RC_HALF_SPAN_SYMBOLS: usize = 16;

/// Upsample the PAM4 symbols to field impulses and shape them with the
/// raised-cosine pulse, cyclically over the whole burst. Symbol k peaks at
/// sample k·sps.
pub fn shape_pulses(symbols: &SymbolSequence, cfg: &ImddConfig) -> Result<FieldWaveform, ImddError> {
    cfg.validate()?;
    if symbols.is_empty() || symbols.m != 4 {
        return Err(ImddError::BadSymbols);
    }
    let sps = cfg.samples_per_symbol;
    let n = symbols.len() * sps;
    let taps = raised_cosine_taps(sps, cfg.rolloff, RC_HALF_SPAN_SYMBOLS);
    let half = (taps.len() - 1) / 2;
    let mut field = vec![0.0f64; n];
    for (k, &sym) in symbols.symbols.iter().enumerate() {
        let level = FIELD_LEVELS[sym as usize];
        if level == 0.0 {
            continue;
        }
        let centre = k * sps;
        for (j, &tap) in taps.iter().enumerate() {
            let idx = (centre + n + j - half) % n;
            field[idx] += level * tap;
        }
    }
    Ok(FieldWaveform {
        samples: field.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        sample_rate: cfg.sample_rate(),
    })
}

/// All-pass chromatic dispersion H(f) = exp(+j·2π²·β₂·L·f²) applied over the
/// discrete spectrum of the cyclic burst. Zero fiber length is an exact
/// identity (no transform round-trip).
pub fn apply_dispersion(field: &FieldWaveform, cfg: &ImddConfig) -> Result<FieldWaveform, ImddError> {
    cfg.validate()?;
    if cfg.fiber_km == 0.0 || cfg.dispersion_ps_nm_km == 0.0 {
        return Ok(field.clone());
    }
    let n = field.samples.len();
    let mut spectrum = field.samples.clone();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let beta2 = cfg.beta2_s2_per_m();
    let length_m = cfg.fiber_km * 1000.0;
    let fs = field.sample_rate;
    let two_pi_sq = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
    for (k, bin) in spectrum.iter_mut().enumerate() {
        // FFT bin frequency with the upper half mapped to negative.
        let kf = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        let f = kf * fs / n as f64;
        let phase = two_pi_sq * beta2 * length_m * f * f;
        *bin *= Complex64::from_polar(1.0, phase);
    }
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let scale = 1.0 / n as f64;
    for v in &mut spectrum {
        *v *= scale;
    }
    Ok(FieldWaveform {
        samples: spectrum,
        sample_rate: field.sample_rate,
    })
}

/// Photodetector: real intensity |field|²; noise is NOT added here.
pub fn square_law_detect(field: &FieldWaveform) -> Waveform {
    Waveform {
        samples: field.samples.iter().map(|a| a.norm_sqr()).collect(),
        sample_rate: field.sample_rate,
    }
}

/// Add electrical AWGN after detection with σ² = mean(y²) / SNR_linear.
/// Negative output samples are kept (Gaussian electrical-noise model).
pub fn add_intensity_noise(wave: &Waveform, snr_db: f64, rng_seed: u64) -> Result<Waveform, ImddError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(ImddError::InvalidSnr);
    }
    if snr_db == f64::INFINITY {
        return Ok(wave.clone());
    }
    let n = wave.samples.len().max(1) as f64;
    let signal_power = wave.samples.iter().map(|&y| y * y).sum::<f64>() / n;
    let sigma = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|_| ImddError::InvalidSnr)?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    Ok(Waveform {
        samples: wave
            .samples
            .iter()
            .map(|&y| y + normal.sample(&mut rng))
            .collect(),
        sample_rate: wave.sample_rate,
    })
}

/// Noiseless link: shaping, dispersion, square-law detection.
pub fn propagate_noiseless(symbols: &SymbolSequence, cfg: &ImddConfig) -> Result<Waveform, ImddError> {
    let shaped = shape_pulses(symbols, cfg)?;
    let dispersed = apply_dispersion(&shaped, cfg)?;
    Ok(square_law_detect(&dispersed))
}

/// Full link: shaping, dispersion, square-law detection, post-detector AWGN
/// at the configured SNR. Returns the real waveform fed to the receiver.
pub fn imdd_link(symbols: &SymbolSequence, cfg: &ImddConfig) -> Result<Waveform, ImddError> {
    let clean = propagate_noiseless(symbols, cfg)?;
    add_intensity_noise(&clean, cfg.snr_db, cfg.rng_seed)
}

/// Linear-interpolation percentile of a sorted slice, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Rank-based PAM4 hard decision: thresholds at the 25/50/75 percentiles of
/// the given samples, symbols assigned by bin in increasing level order.
/// This is the no-equalizer baseline receiver.
pub fn quartile_decide(samples: &[f64]) -> Vec<u8> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = [
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.50),
        percentile(&sorted, 0.75),
    ];
    samples
        .iter()
        .map(|&s| {
            if s < t[0] {
                0
            } else if s < t[1] {
                1
            } else if s < t[2] {
                2
            } else {
                3
            }
        })
        .collect()
}

/// Fixed-reference hard decision: nearest noiseless intensity level
/// {0, 1/9, 4/9, 1}. Useful for loopback tests without dispersion.
pub fn nearest_intensity_decide(samples: &[f64]) -> Vec<u8> {
    let levels: Vec<f64> = FIELD_LEVELS.iter().map(|&l| l * l).collect();
    samples
        .iter()
        .map(|&s| {
            let mut best = 0u8;
            let mut best_d = f64::INFINITY;
            for (i, &l) in levels.iter().enumerate() {
                let d = (s - l).abs();
                if d < best_d {
                    best = i as u8;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// On-symbol (centre) samples of a waveform at `sps` samples per symbol.
pub fn centre_samples(wave: &Waveform, sps: usize) -> Vec<f64> {
    wave.samples.iter().step_by(sps).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqgen::{
        extend_with_zero, lfsr_generate, pam4_from_bit_streams, random_bits, BitMap, PrbsSpec,
        Provenance, RANDOM_ALGORITHM,
    };
    use approx::assert_relative_eq;

    fn symbols_from(vals: Vec<u8>) -> SymbolSequence {
        SymbolSequence {
            symbols: vals,
            m: 4,
            bit_map: BitMap::gray(),
            provenance: Provenance::Random {
                algorithm: RANDOM_ALGORITHM,
                seed: 0,
            },
            period: None,
        }
    }

    fn random_symbols(n: usize, seed: u64) -> SymbolSequence {
        let a = random_bits(n, seed).unwrap();
        let b = random_bits(n, seed + 1).unwrap();
        pam4_from_bit_streams(&a, &b, 0, BitMap::gray()).unwrap()
    }

    #[test]
    fn rc_taps_peak_and_integer_zeros() {
        let taps = raised_cosine_taps(2, 0.95, RC_HALF_SPAN_SYMBOLS);
        assert_eq!(taps.len(), 65);
        let half = 32;
        assert_eq!(taps[half], 1.0);
        for k in 1..=16isize {
            let idx = (half as isize + 2 * k) as usize;
            assert!(
                taps[idx].abs() < 1e-12,
                "tap at symbol offset {k} is {}",
                taps[idx]
            );
            let idx = (half as isize - 2 * k) as usize;
            assert!(taps[idx].abs() < 1e-12);
        }
    }

    #[test]
    fn rc_singularity_takes_limit_value() {
        // At roll-off 1 the singular points t = ±1/2 land on sample ticks at
        // 2 samples/symbol; the limit value is (β/2)·sin(π/(2β)) = 0.5.
        let taps = raised_cosine_taps(2, 1.0, RC_HALF_SPAN_SYMBOLS);
        let half = 32;
        assert_relative_eq!(taps[half + 1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(taps[half - 1], 0.5, max_relative = 1e-12);
        // Continuity: a roll-off epsilon away from a tick singularity stays
        // close to the analytic values around it.
        let near = raised_cosine_taps(2, 1.0 - 1e-9, RC_HALF_SPAN_SYMBOLS);
        assert_relative_eq!(near[half + 1], 0.5, max_relative = 1e-6);
    }

    #[test]
    fn single_symbol_peaks_at_one() {
        let mut vals = vec![0u8; 64];
        vals[32] = 3;
        let cfg = ImddConfig {
            fiber_km: 0.0,
            ..ImddConfig::defaults(f64::INFINITY, 0)
        };
        let field = shape_pulses(&symbols_from(vals), &cfg).unwrap();
        let centre = field.samples[32 * 2].re;
        assert!((centre - 1.0).abs() < 1e-3, "peak {centre}");
    }

    #[test]
    fn centre_samples_are_isi_free_without_fiber() {
        let symbols = random_symbols(512, 7);
        let cfg = ImddConfig {
            fiber_km: 0.0,
            ..ImddConfig::defaults(f64::INFINITY, 0)
        };
        let wave = imdd_link(&symbols, &cfg).unwrap();
        let centres = centre_samples(&wave, cfg.samples_per_symbol);
        for (k, &y) in centres.iter().enumerate() {
            let level = FIELD_LEVELS[symbols.symbols[k] as usize];
            assert!(
                (y - level * level).abs() < 1e-3,
                "symbol {k}: intensity {y} vs {}",
                level * level
            );
        }
    }

    #[test]
    fn noiseless_dispersion_free_loopback_has_zero_errors() {
        let vals: Vec<u8> = (0..512).map(|i| if i % 2 == 0 { 0 } else { 3 }).collect();
        let symbols = symbols_from(vals.clone());
        let cfg = ImddConfig {
            fiber_km: 0.0,
            ..ImddConfig::defaults(f64::INFINITY, 0)
        };
        let wave = imdd_link(&symbols, &cfg).unwrap();
        let decided = nearest_intensity_decide(&centre_samples(&wave, 2));
        assert_eq!(decided, vals);
    }

    #[test]
    fn beta2_matches_standard_fiber() {
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        // -21.67 ps^2/km at D = 17 ps/nm/km, 1550 nm.
        let ps2_per_km = cfg.beta2_s2_per_m() * 1e24 * 1e3;
        assert_relative_eq!(ps2_per_km, -21.67, max_relative = 1e-3);
    }

    #[test]
    fn zero_fiber_dispersion_is_exact_identity() {
        let symbols = random_symbols(256, 9);
        let cfg = ImddConfig {
            fiber_km: 0.0,
            ..ImddConfig::defaults(f64::INFINITY, 0)
        };
        let field = shape_pulses(&symbols, &cfg).unwrap();
        let out = apply_dispersion(&field, &cfg).unwrap();
        assert_eq!(out, field);
    }

    #[test]
    fn dispersion_preserves_energy() {
        let symbols = random_symbols(1024, 11);
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        let field = shape_pulses(&symbols, &cfg).unwrap();
        let out = apply_dispersion(&field, &cfg).unwrap();
        let e_in: f64 = field.samples.iter().map(|a| a.norm_sqr()).sum();
        let e_out: f64 = out.samples.iter().map(|a| a.norm_sqr()).sum();
        assert_relative_eq!(e_in, e_out, max_relative = 1e-9);
    }

    #[test]
    fn dispersion_round_trip_recovers_input() {
        let symbols = random_symbols(1024, 13);
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        let inverse_cfg = ImddConfig {
            dispersion_ps_nm_km: -cfg.dispersion_ps_nm_km,
            ..cfg
        };
        let field = shape_pulses(&symbols, &cfg).unwrap();
        let there = apply_dispersion(&field, &cfg).unwrap();
        let back = apply_dispersion(&there, &inverse_cfg).unwrap();
        let max_err = field
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn dispersion_actually_spreads_the_field() {
        let symbols = random_symbols(512, 15);
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        let field = shape_pulses(&symbols, &cfg).unwrap();
        let out = apply_dispersion(&field, &cfg).unwrap();
        let max_diff = field
            .samples
            .iter()
            .zip(&out.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-2, "10 km of fiber must change the waveform");
    }

    #[test]
    fn square_law_is_phase_blind() {
        let symbols = random_symbols(128, 17);
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        let field = shape_pulses(&symbols, &cfg).unwrap();
        let rotated = FieldWaveform {
            samples: field
                .samples
                .iter()
                .map(|a| a * Complex64::from_polar(1.0, 1.234))
                .collect(),
            sample_rate: field.sample_rate,
        };
        let a = square_law_detect(&field);
        let b = square_law_detect(&rotated);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
        }
        assert_eq!(square_law_detect(&FieldWaveform {
            samples: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            sample_rate: 1.0,
        })
        .samples, vec![1.0, 0.0]);
    }

    #[test]
    fn intensity_noise_matches_requested_snr() {
        let symbols = random_symbols(50_000, 19);
        let cfg = ImddConfig::defaults(20.0, 23);
        let clean = propagate_noiseless(&symbols, &cfg).unwrap();
        let noisy = add_intensity_noise(&clean, 20.0, 23).unwrap();
        let n = clean.samples.len() as f64;
        let signal_power = clean.samples.iter().map(|&y| y * y).sum::<f64>() / n;
        let noise_power = clean
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(c, y)| (y - c) * (y - c))
            .sum::<f64>()
            / n;
        let measured_snr_db = 10.0 * (signal_power / noise_power).log10();
        assert!(
            (measured_snr_db - 20.0).abs() < 0.1,
            "measured SNR {measured_snr_db} dB"
        );
    }

    #[test]
    fn link_is_deterministic_per_seed() {
        let symbols = random_symbols(256, 29);
        let cfg = ImddConfig::defaults(25.0, 31);
        let a = imdd_link(&symbols, &cfg).unwrap();
        let b = imdd_link(&symbols, &cfg).unwrap();
        assert_eq!(a, b);
        let c = imdd_link(
            &symbols,
            &ImddConfig {
                rng_seed: 32,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infinite_snr_link_adds_no_noise() {
        let symbols = random_symbols(128, 37);
        let cfg = ImddConfig::defaults(f64::INFINITY, 0);
        let clean = propagate_noiseless(&symbols, &cfg).unwrap();
        let linked = imdd_link(&symbols, &cfg).unwrap();
        assert_eq!(clean, linked);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = ImddConfig::defaults(20.0, 0);
        assert!(good.validate().is_ok());
        assert!(ImddConfig { samples_per_symbol: 1, ..good }.validate().is_err());
        assert!(ImddConfig { rolloff: 1.5, ..good }.validate().is_err());
        assert!(ImddConfig { fiber_km: -1.0, ..good }.validate().is_err());
        assert!(ImddConfig { snr_db: f64::NAN, ..good }.validate().is_err());
        assert!(ImddConfig { baud_rate: 0.0, ..good }.validate().is_err());
    }

    #[test]
    fn quartile_decide_recovers_balanced_jittered_clusters() {
        // Exactly balanced clusters around the four intensity levels with
        // tie-breaking jitter: quartile thresholds fall in the gaps and every
        // sample is binned correctly. (On exactly tied noiseless samples a
        // rank-based decision is ill-defined; the baseline targets noisy
        // waveforms.)
        let levels = [0.0, 1.0 / 9.0, 4.0 / 9.0, 1.0];
        let mut samples = Vec::new();
        let mut truth = Vec::new();
        for rep in 0..100 {
            for (sym, &level) in levels.iter().enumerate() {
                samples.push(level + 1e-6 * (rep as f64 - 49.5));
                truth.push(sym as u8);
            }
        }
        let decided = quartile_decide(&samples);
        assert_eq!(decided, truth);
        // Rank-based bins hold a quarter of the samples each.
        let mut counts = [0usize; 4];
        for &d in &decided {
            counts[d as usize] += 1;
        }
        assert_eq!(counts, [100, 100, 100, 100]);
    }

    #[test]
    fn dispersed_link_has_a_high_snr_error_floor() {
        // High-SNR quartile-decision BER with 10 km of fiber. The measured
        // floor is ~7.5e-2 with rank thresholds; tuned fixed thresholds
        // reach ~5.5e-2 (the bins are not equally occupied once dispersion
        // skews the intensity clusters). Assert the qualitative band that
        // any threshold rule in this family lands in.
        let n = 100_000;
        let symbols = random_symbols(n, 43);
        let cfg = ImddConfig::defaults(40.0, 47);
        let wave = imdd_link(&symbols, &cfg).unwrap();
        let decided = quartile_decide(&centre_samples(&wave, 2));
        let mut bit_errors = 0u64;
        for (got, &sent) in decided.iter().zip(&symbols.symbols) {
            bit_errors += u64::from(symbols.bit_map.bit_errors(sent, *got));
        }
        let ber = bit_errors as f64 / (2 * n) as f64;
        assert!(
            (0.02..=0.08).contains(&ber),
            "quartile floor BER {ber} outside [0.02, 0.08]"
        );
    }

    #[test]
    fn floor_is_snr_independent_at_high_snr() {
        let n = 50_000;
        let symbols = random_symbols(n, 53);
        let mut bers = Vec::new();
        for &snr in &[40.0, 50.0, 60.0] {
            let cfg = ImddConfig::defaults(snr, 59);
            let wave = imdd_link(&symbols, &cfg).unwrap();
            let decided = quartile_decide(&centre_samples(&wave, 2));
            let mut bit_errors = 0u64;
            for (got, &sent) in decided.iter().zip(&symbols.symbols) {
                bit_errors += u64::from(symbols.bit_map.bit_errors(sent, *got));
            }
            bers.push(bit_errors as f64 / (2 * n) as f64);
        }
        let lo = bers.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = bers.iter().cloned().fold(0.0, f64::max);
        assert!(
            hi / lo < 1.2,
            "floor should be flat at high SNR: {bers:?}"
        );
    }

    #[test]
    fn prbs15_pam4_symbols_feed_the_link() {
        let ext = extend_with_zero(&lfsr_generate(&PrbsSpec::prbs15()).unwrap()).unwrap();
        let symbols = pam4_from_bit_streams(&ext, &ext, 1 << 14, BitMap::gray()).unwrap();
        let cfg = ImddConfig::defaults(30.0, 61);
        let wave = imdd_link(&symbols, &cfg).unwrap();
        assert_eq!(wave.samples.len(), symbols.len() * 2);
        assert_eq!(wave.sample_rate, 64e9);
    }

    /// Fit intensity at symbol centres as an additive per-symbol-position
    /// model (one-hot features over a 33-symbol window) and return the RMS
    /// residual. Any affine function of the transmitted levels lies inside
    /// this model class.
    fn one_hot_linear_residual(fiber_km: f64) -> f64 {
        let n = 4096;
        let symbols = random_symbols(n, 67);
        let cfg = ImddConfig {
            fiber_km,
            ..ImddConfig::defaults(f64::INFINITY, 0)
        };
        let wave = propagate_noiseless(&symbols, &cfg).unwrap();
        let centres = centre_samples(&wave, 2);
        let half = 16usize;
        let rows: Vec<usize> = (half..n - half).collect();
        let n_feat = 33 * 4 + 1;
        let mut a = nalgebra::DMatrix::<f64>::zeros(rows.len(), n_feat);
        let mut y = nalgebra::DVector::<f64>::zeros(rows.len());
        for (r, &k) in rows.iter().enumerate() {
            a[(r, 0)] = 1.0;
            for off in 0..33 {
                let sym = symbols.symbols[k + off - half] as usize;
                a[(r, 1 + off * 4 + sym)] = 1.0;
            }
            y[r] = centres[k];
        }
        // One-hot blocks are rank-deficient (each sums to the intercept);
        // SVD least squares handles that.
        let svd = a.clone().svd(true, true);
        let coef = svd.solve(&y, 1e-10).unwrap();
        let resid = &a * &coef - &y;
        (resid.norm_squared() / rows.len() as f64).sqrt()
    }

    #[test]
    fn dispersion_breaks_additive_symbol_models() {
        let r0 = one_hot_linear_residual(0.0);
        let r10 = one_hot_linear_residual(10.0);
        // Without fiber the centre intensity is exactly level², an additive
        // per-symbol function: residual at numerical-noise level. With
        // dispersion, square-law detection mixes neighboring symbols
        // nonlinearly and no additive model fits.
        assert!(r0 < 1e-6, "0 km residual {r0}");
        assert!(r10 > 10.0 * r0.max(1e-12), "10 km residual {r10} vs {r0}");
        assert!(r10 > 1e-3, "10 km residual should be macroscopic: {r10}");
    }
}
