//! Test-pattern generation: PRBS via Fibonacci LFSR, seeded random bits,
//! cyclic repetition, and PAM4 symbol construction from bit-stream pairs.
//!
//! Every sequence carries provenance (pattern kind, generator, seed) so that
//! downstream result records can state exactly which pattern was transmitted.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Algorithm identifier recorded in the provenance of random sequences.
pub const RANDOM_ALGORITHM: &str = "chacha12";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeqError {
    #[error("LFSR seed must be a nonzero {0}-bit state")]
    ZeroSeed(u32),
    #[error("tap set must contain the register order {order} and stay within 1..={order}")]
    BadTaps { order: u32 },
    #[error("expected one PRBS period of 2^{order}-1 = {expected} bits, got {actual}")]
    NotOnePeriod {
        order: u32,
        expected: usize,
        actual: usize,
    },
    #[error("sequence is already zero-extended")]
    AlreadyExtended,
    #[error("zero-extension only applies to PRBS sequences")]
    NotPrbs,
    #[error("bit count must be at least 1")]
    EmptyRequest,
    #[error("cannot repeat an empty unit")]
    EmptyUnit,
    #[error("target length {total} is shorter than the unit ({unit})")]
    TotalShorterThanUnit { total: usize, unit: usize },
    #[error("bit streams must have equal length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("bit streams coincide after the cyclic shift; symbols would collapse to two levels")]
    DegenerateAlignment,
    #[error("symbol map must be a bijection between symbols and bit pairs")]
    BadBitMap,
}

/// LFSR description: register order, feedback taps (as delays), initial state.
///
/// The generated sequence obeys `b[n] = XOR of b[n - t] over all taps t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrbsSpec {
    pub order: u32,
    pub taps: Vec<u32>,
    /// Initial register contents, bit `j` of this word is `b[j]`.
    pub seed: u64,
}

impl PrbsSpec {
    /// PRBS7: feedback x^7 + x^6 + 1, all-ones start state.
    pub fn prbs7() -> Self {
        PrbsSpec {
            order: 7,
            taps: vec![7, 6],
            seed: (1 << 7) - 1,
        }
    }

    /// PRBS15: feedback x^15 + x^14 + 1, all-ones start state.
    pub fn prbs15() -> Self {
        PrbsSpec {
            order: 15,
            taps: vec![15, 14],
            seed: (1 << 15) - 1,
        }
    }

    /// One period of the maximal-length sequence: 2^order - 1 bits.
    pub fn period(&self) -> usize {
        (1usize << self.order) - 1
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        let mask = if self.order >= 64 {
            u64::MAX
        } else {
            (1u64 << self.order) - 1
        };
        if self.seed & mask == 0 {
            return Err(SeqError::ZeroSeed(self.order));
        }
        let has_order_tap = self.taps.contains(&self.order);
        let in_range = self.taps.iter().all(|&t| (1..=self.order).contains(&t));
        if !has_order_tap || !in_range || self.taps.is_empty() {
            return Err(SeqError::BadTaps { order: self.order });
        }
        Ok(())
    }
}

/// Where a bit sequence came from; feeds the per-result metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Prbs { spec: PrbsSpec, extended: bool },
    Random { algorithm: &'static str, seed: u64 },
}

impl Provenance {
    /// Short pattern-kind label ("prbs7", "random", ...). Repetition is a
    /// property of the sequence, not the generator, so "repeated-random" is
    /// derived by callers from `period` + kind.
    pub fn kind_label(&self) -> String {
        match self {
            Provenance::Prbs { spec, .. } => format!("prbs{}", spec.order),
            Provenance::Random { .. } => "random".to_string(),
        }
    }
}

/// A finite 0/1 sequence with provenance and an optional repeat period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSequence {
    pub bits: Vec<u8>,
    pub provenance: Provenance,
    /// Length of the repeating unit, if the sequence is (built to be) periodic.
    pub period: Option<usize>,
}

impl BitSequence {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Pattern label for result records: periodic random units are
    /// "repeated-random", everything else reports its generator kind.
    pub fn pattern_label(&self) -> String {
        match (&self.provenance, self.period) {
            (Provenance::Random { .. }, Some(_)) => "repeated-random".to_string(),
            (p, _) => p.kind_label(),
        }
    }

    /// Length of the repeating unit, or the whole length when not periodic.
    pub fn pattern_len(&self) -> usize {
        self.period.unwrap_or(self.bits.len())
    }

    pub fn is_repeated(&self) -> bool {
        match self.period {
            Some(p) => self.bits.len() > p,
            None => false,
        }
    }
}

/// Generate exactly one period (2^order - 1 bits) of the maximal-length
/// sequence described by `spec`.
pub fn lfsr_generate(spec: &PrbsSpec) -> Result<BitSequence, SeqError> {
    spec.validate()?;
    let n = spec.order as usize;
    let period = spec.period();
    let mut bits = Vec::with_capacity(period);
    for j in 0..n.min(period) {
        bits.push(((spec.seed >> j) & 1) as u8);
    }
    for t in n..period {
        let mut b = 0u8;
        for &tap in &spec.taps {
            b ^= bits[t - tap as usize];
        }
        bits.push(b);
    }
    Ok(BitSequence {
        bits,
        provenance: Provenance::Prbs {
            spec: spec.clone(),
            extended: false,
        },
        period: Some(period),
    })
}

/// Longest run of zeros treated cyclically; returns (start index, length).
fn longest_cyclic_zero_run(bits: &[u8]) -> (usize, usize) {
    let n = bits.len();
    let anchor = bits
        .iter()
        .position(|&b| b == 1)
        .expect("all-zero sequence has no LFSR state");
    let mut best = (0usize, 0usize);
    let mut run_start = 0usize;
    let mut run_len = 0usize;
    for off in 0..n {
        let idx = (anchor + off) % n;
        if bits[idx] == 0 {
            if run_len == 0 {
                run_start = idx;
            }
            run_len += 1;
            if run_len > best.1 {
                best = (run_start, run_len);
            }
        } else {
            run_len = 0;
        }
    }
    best
}

/// Insert one extra 0 adjacent to the longest zero run, producing a
/// power-of-two-length unit whose cyclic windows of `order` bits cover every
/// word exactly once (the all-zero word included).
pub fn extend_with_zero(seq: &BitSequence) -> Result<BitSequence, SeqError> {
    let spec = match &seq.provenance {
        Provenance::Prbs { extended: true, .. } => return Err(SeqError::AlreadyExtended),
        Provenance::Prbs {
            spec,
            extended: false,
        } => spec.clone(),
        Provenance::Random { .. } => return Err(SeqError::NotPrbs),
    };
    let expected = spec.period();
    if seq.bits.len() != expected {
        return Err(SeqError::NotOnePeriod {
            order: spec.order,
            expected,
            actual: seq.bits.len(),
        });
    }
    let (start, len) = longest_cyclic_zero_run(&seq.bits);
    let insert_at = (start + len) % seq.bits.len();
    let mut bits = seq.bits.clone();
    // When the run wraps the array boundary the insertion point lands just
    // past the prefix part, which still extends the cyclic run.
    bits.insert(insert_at, 0);
    Ok(BitSequence {
        bits,
        provenance: Provenance::Prbs {
            spec,
            extended: true,
        },
        period: Some(expected + 1),
    })
}

/// `n` equiprobable independent bits, reproducible from `rng_seed`.
pub fn random_bits(n: usize, rng_seed: u64) -> Result<BitSequence, SeqError> {
    if n == 0 {
        return Err(SeqError::EmptyRequest);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let bits = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
    Ok(BitSequence {
        bits,
        provenance: Provenance::Random {
            algorithm: RANDOM_ALGORITHM,
            seed: rng_seed,
        },
        period: None,
    })
}

/// Cyclic repetition of `unit` truncated to `total` bits. The repeat period
/// is recorded so periodicity stays checkable downstream.
pub fn repeat_to_length(unit: &BitSequence, total: usize) -> Result<BitSequence, SeqError> {
    if unit.bits.is_empty() {
        return Err(SeqError::EmptyUnit);
    }
    if total < unit.bits.len() {
        return Err(SeqError::TotalShorterThanUnit {
            total,
            unit: unit.bits.len(),
        });
    }
    let bits = (0..total).map(|i| unit.bits[i % unit.bits.len()]).collect();
    let period = match unit.period {
        Some(p) if unit.bits.len().is_multiple_of(p) => Some(p),
        _ => Some(unit.bits.len()),
    };
    Ok(BitSequence {
        bits,
        provenance: unit.provenance.clone(),
        period,
    })
}

/// Bijection between PAM4 symbol indices and bit pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitMap {
    /// Symbol for bit pair (a, b), indexed by a*2 + b.
    to_symbol: [u8; 4],
}

impl BitMap {
    /// Gray mapping: 00 -> 0, 01 -> 1, 11 -> 2, 10 -> 3. Adjacent levels
    /// differ in exactly one bit.
    pub fn gray() -> Self {
        BitMap {
            to_symbol: [0, 1, 3, 2],
        }
    }

    pub fn new(to_symbol: [u8; 4]) -> Result<Self, SeqError> {
        let mut seen = [false; 4];
        for &s in &to_symbol {
            if s > 3 || seen[s as usize] {
                return Err(SeqError::BadBitMap);
            }
            seen[s as usize] = true;
        }
        Ok(BitMap { to_symbol })
    }

    pub fn symbol(&self, a: u8, b: u8) -> u8 {
        self.to_symbol[(a * 2 + b) as usize]
    }

    pub fn bits(&self, symbol: u8) -> (u8, u8) {
        let idx = self
            .to_symbol
            .iter()
            .position(|&s| s == symbol)
            .expect("symbol out of range");
        ((idx as u8) >> 1, (idx as u8) & 1)
    }

    /// Bit errors incurred by deciding `got` when `sent` was transmitted.
    pub fn bit_errors(&self, sent: u8, got: u8) -> u32 {
        let (s0, s1) = self.bits(sent);
        let (g0, g1) = self.bits(got);
        u32::from(s0 != g0) + u32::from(s1 != g1)
    }
}

/// A sequence of class indices in 0..m with the bit mapping that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub symbols: Vec<u8>,
    pub m: usize,
    pub bit_map: BitMap,
    pub provenance: Provenance,
    pub period: Option<usize>,
}

impl SymbolSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pattern_label(&self) -> String {
        match (&self.provenance, self.period) {
            (Provenance::Random { .. }, Some(_)) => "repeated-random".to_string(),
            (p, _) => p.kind_label(),
        }
    }

    pub fn pattern_len(&self) -> usize {
        self.period.unwrap_or(self.symbols.len())
    }

    pub fn is_repeated(&self) -> bool {
        match self.period {
            Some(p) => self.symbols.len() > p,
            None => false,
        }
    }

    /// Cyclic repetition of this sequence truncated to `total` symbols.
    pub fn repeat_to(&self, total: usize) -> Result<SymbolSequence, SeqError> {
        if self.symbols.is_empty() {
            return Err(SeqError::EmptyUnit);
        }
        if total < self.symbols.len() {
            return Err(SeqError::TotalShorterThanUnit {
                total,
                unit: self.symbols.len(),
            });
        }
        let symbols = (0..total)
            .map(|i| self.symbols[i % self.symbols.len()])
            .collect();
        let period = match self.period {
            Some(p) if self.symbols.len().is_multiple_of(p) => Some(p),
            _ => Some(self.symbols.len()),
        };
        Ok(SymbolSequence {
            symbols,
            m: self.m,
            bit_map: self.bit_map,
            provenance: self.provenance.clone(),
            period,
        })
    }
}

/// Build PAM4 symbols from two bit streams: `symbol[i] = map(a[i], b[(i+shift) mod len])`.
///
/// Rejects alignments where the two streams coincide element-for-element,
/// which would collapse the constellation to two levels.
pub fn pam4_from_bit_streams(
    a: &BitSequence,
    b: &BitSequence,
    shift: usize,
    map: BitMap,
) -> Result<SymbolSequence, SeqError> {
    if a.len() != b.len() {
        return Err(SeqError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len();
    if n == 0 {
        return Err(SeqError::EmptyUnit);
    }
    let aligned = |i: usize| b.bits[(i + shift) % n];
    if (0..n).all(|i| a.bits[i] == aligned(i)) {
        return Err(SeqError::DegenerateAlignment);
    }
    let symbols = (0..n).map(|i| map.symbol(a.bits[i], aligned(i))).collect();
    let period = match (a.period, b.period) {
        (Some(p), Some(q)) if p == q && n.is_multiple_of(p) => Some(p),
        _ => None,
    };
    Ok(SymbolSequence {
        symbols,
        m: 4,
        bit_map: map,
        provenance: a.provenance.clone(),
        period,
    })
}

/// Binary symbols straight from a bit sequence (class index = bit value).
pub fn binary_symbols(bits: &BitSequence) -> SymbolSequence {
    SymbolSequence {
        symbols: bits.bits.clone(),
        m: 2,
        bit_map: BitMap::gray(),
        provenance: bits.provenance.clone(),
        period: bits.period,
    }
}
