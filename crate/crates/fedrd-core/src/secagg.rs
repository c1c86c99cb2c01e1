//! Simulated secure multiparty summation via pairwise additive masks over an
//! integer ring.
//!
//! For parties `i < j` a shared mask `r_ij` is drawn; party `i` adds it and
//! party `j` subtracts it (mod `R`), so the masks cancel in the sum while
//! each individual masked message is marginally uniform on the ring. This
//! stands in for a real secure-aggregation protocol: masks come from the
//! simulator's seeded stream rather than from key agreement, which suffices
//! for the honest-but-curious, no-collusion model the simulator targets.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::mech::QuantizedVector;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecAggError {
    InsufficientParties { got: usize },
    LengthMismatch { expected: usize, got: usize },
    RingTooSmall { modulus: u64, required: u64 },
    InvalidModulus { modulus: u64 },
}

impl fmt::Display for SecAggError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecAggError::InsufficientParties { got } => {
                write!(f, "secure sum needs at least 2 inputs, got {got}")
            }
            SecAggError::LengthMismatch { expected, got } => {
                write!(f, "input length {got} does not match {expected}")
            }
            SecAggError::RingTooSmall { modulus, required } => {
                write!(f, "ring modulus {modulus} cannot hold sums up to {required}")
            }
            SecAggError::InvalidModulus { modulus } => {
                write!(f, "ring modulus must be at least 2, got {modulus}")
            }
        }
    }
}

impl core::error::Error for SecAggError {}

/// Integer ring `Z_R` the masked values live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingConfig {
    modulus: u64,
}

impl RingConfig {
    pub fn new(modulus: u64) -> Result<Self, SecAggError> {
        if modulus < 2 {
            return Err(SecAggError::InvalidModulus { modulus });
        }
        Ok(Self { modulus })
    }

    /// Smallest power-of-two ring strictly larger than `parties * bins`, so
    /// true sums never wrap and bit accounting stays simple.
    pub fn for_sum(parties: u32, bins: u32) -> Self {
        let max_sum = parties as u64 * bins as u64;
        Self {
            modulus: (max_sum + 1).next_power_of_two(),
        }
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// Bits to encode one ring element: `ceil(log2(R))`.
    pub fn bits_per_element(&self) -> u32 {
        u64::BITS - (self.modulus - 1).leading_zeros()
    }
}

/// One party's masked contribution; every entry lies in `[0, R)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedMessage {
    pub sender: usize,
    pub values: Vec<u64>,
}

/// Net pairwise masks per party; their componentwise ring-sum is zero.
fn pairwise_net_masks(
    parties: usize,
    len: usize,
    ring: &RingConfig,
    rng: &mut StreamRng,
) -> Vec<Vec<u64>> {
    let r = ring.modulus;
    let mut net = vec![vec![0u64; len]; parties];
    for i in 0..parties {
        for j in (i + 1)..parties {
            for c in 0..len {
                let mask = rng.next_below(r);
                net[i][c] = (net[i][c] + mask) % r;
                net[j][c] = (net[j][c] + r - mask) % r;
            }
        }
    }
    net
}

/// Sums quantized inputs while revealing only masked per-party messages.
///
/// The returned sum is the exact componentwise integer sum (the ring is
/// checked against the inputs' bin bounds so true sums cannot wrap). The
/// trace holds one masked message per party, in ascending party order, for
/// cost accounting and leak auditing.
pub fn secure_sum(
    inputs: &[QuantizedVector],
    ring: &RingConfig,
    rng: &mut StreamRng,
) -> Result<(Vec<u64>, Vec<MaskedMessage>), SecAggError> {
    if inputs.len() < 2 {
        return Err(SecAggError::InsufficientParties { got: inputs.len() });
    }
    let len = inputs[0].len();
    for input in inputs {
        if input.len() != len {
            return Err(SecAggError::LengthMismatch {
                expected: len,
                got: input.len(),
            });
        }
    }
    let max_sum: u64 = inputs.iter().map(|i| i.bins() as u64).sum();
    if ring.modulus <= max_sum {
        return Err(SecAggError::RingTooSmall {
            modulus: ring.modulus,
            required: max_sum,
        });
    }

    let r = ring.modulus;
    let net = pairwise_net_masks(inputs.len(), len, ring, rng);
    let mut trace = Vec::with_capacity(inputs.len());
    let mut sum = vec![0u64; len];
    for (party, input) in inputs.iter().enumerate() {
        let values: Vec<u64> = input
            .values()
            .iter()
            .zip(&net[party])
            .map(|(&q, &m)| (q as u64 + m) % r)
            .collect();
        for (acc, &v) in sum.iter_mut().zip(&values) {
            *acc = (*acc + v) % r;
        }
        trace.push(MaskedMessage {
            sender: party,
            values,
        });
    }
    Ok((sum, trace))
}

/// Transmission cost of one masked message: length times `ceil(log2(R))`.
pub fn message_bits(msg: &MaskedMessage, ring: &RingConfig) -> u64 {
    msg.values.len() as u64 * ring.bits_per_element() as u64
}
