//! Scalar feature encodings: random Fourier features, NeRF-style positional
//! encoding, a multi-scale normalizer and the identity.

use serde::{Deserialize, Serialize};

use crate::rng::GaussianStream;

use std::f64::consts::PI;

/// Scales used by the multi-scale normalizer.
pub const MSN_SCALES: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Rff,
    Npe,
    Msn,
    Identity,
}

/// How one scalar item is turned into features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub kind: EncodingKind,
    /// Frequencies (RFF), octaves (NPE) or scale count (MSN).
    pub d: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl EncodingSpec {
    pub fn rff(d: usize, sigma: f64, seed: u64) -> Self {
        Self {
            kind: EncodingKind::Rff,
            d,
            sigma,
            seed,
        }
    }

    pub fn npe(d: usize) -> Self {
        Self {
            kind: EncodingKind::Npe,
            d,
            sigma: 1.0,
            seed: 0,
        }
    }

    pub fn msn() -> Self {
        Self {
            kind: EncodingKind::Msn,
            d: MSN_SCALES.len(),
            sigma: 1.0,
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: EncodingKind::Identity,
            d: 1,
            sigma: 1.0,
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        match self.kind {
            EncodingKind::Rff | EncodingKind::Npe => 2 * self.d,
            EncodingKind::Msn => self.d,
            EncodingKind::Identity => 1,
        }
    }
}

/// Gaussian frequencies `b ~ N(0, sigma^2)` for one RFF item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBank {
    pub seed: u64,
    pub sigma: f64,
    pub b: Vec<f64>,
}

impl FrequencyBank {
    /// Draws `d` frequencies from the portable SplitMix64/Box-Muller stream.
    pub fn sample(seed: u64, sigma: f64, d: usize) -> Self {
        let mut stream = GaussianStream::new(seed);
        let b = (0..d).map(|_| sigma * stream.next_standard()).collect();
        Self { seed, sigma, b }
    }

    pub fn d(&self) -> usize {
        self.b.len()
    }
}

/// `[cos(2 pi b_1 v) .. cos(2 pi b_d v), sin(2 pi b_1 v) .. sin(2 pi b_d v)]`
pub fn rff_encode(v: f64, bank: &FrequencyBank) -> Vec<f64> {
    let d = bank.b.len();
    let mut out = vec![0.0; 2 * d];
    for (i, &b) in bank.b.iter().enumerate() {
        let phase = 2.0 * PI * b * v;
        out[i] = phase.cos();
        out[d + i] = phase.sin();
    }
    out
}

/// `[sin(2^0 pi v), cos(2^0 pi v), .., sin(2^(d-1) pi v), cos(2^(d-1) pi v)]`.
///
/// The phase is reduced modulo 2 before scaling by pi, so the encoding has
/// period 2 in `v` exactly whenever `v + 2` is representable.
pub fn npe_encode(v: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * d);
    let mut octave = 1.0;
    for _ in 0..d {
        let phase = (octave * v).rem_euclid(2.0) * PI;
        out.push(phase.sin());
        out.push(phase.cos());
        octave *= 2.0;
    }
    out
}

/// `[v / s for s in scales]`, unclipped.
pub fn msn_encode(v: f64, scales: &[f64]) -> Vec<f64> {
    scales.iter().map(|s| v / s).collect()
}
