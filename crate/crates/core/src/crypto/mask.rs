use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary selection of the parameters that travel encrypted. `eta` is the
/// fraction of set bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptionMask {
    bits: Vec<bool>,
    eta: f64,
}

impl EncryptionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let eta = if bits.is_empty() { 0.0 } else { bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64 };
        Self { bits, eta }
    }

    pub fn none(len: usize) -> Self {
        Self::from_bits(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self::from_bits(vec![true; len])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn encrypted_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn plain_count(&self) -> usize {
        self.len() - self.encrypted_count()
    }

    /// Alternating run lengths starting with a (possibly empty) run of zeros.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        if len > 0 || runs.is_empty() {
            runs.push(len);
        }
        runs
    }

    pub fn from_runs(runs: &[u32]) -> Self {
        let mut bits = Vec::with_capacity(runs.iter().map(|&r| r as usize).sum());
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Self::from_bits(bits)
    }
}

/// Selects exactly `round(eta * param_count)` parameters.
///
/// With a sensitivity vector the selection is the largest magnitudes (lower
/// index wins ties); without one it is a seeded uniform sample.
pub fn build_mask(eta: f64, param_count: usize, sensitivity: Option<&[f64]>, seed: u64) -> Result<EncryptionMask> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("encryption ratio {eta} outside [0, 1]")));
    }
    let k = (eta * param_count as f64).round() as usize;
    let mut bits = vec![false; param_count];
    match sensitivity {
        Some(s) => {
            if s.len() != param_count {
                return Err(Error::LengthMismatch { expected: param_count, actual: s.len() });
            }
            let mut order: Vec<usize> = (0..param_count).collect();
            order.sort_by(|&a, &b| {
                s[b].abs().partial_cmp(&s[a].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for &i in &order[..k] {
                bits[i] = true;
            }
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for i in rand::seq::index::sample(&mut rng, param_count, k) {
                bits[i] = true;
            }
        }
    }
    Ok(EncryptionMask::from_bits(bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(build_mask(0.2, 10, None, 1).unwrap().encrypted_count(), 2);
        assert_eq!(build_mask(1.0, 7, None, 1).unwrap().bits(), &[true; 7]);
        assert_eq!(build_mask(0.0, 7, None, 1).unwrap().encrypted_count(), 0);
        let m = build_mask(0.5, 4, Some(&[0.1, 5.0, 3.0, 0.2]), 0).unwrap();
        assert_eq!(m.bits(), &[false, true, true, false]);
        assert!(build_mask(1.5, 4, None, 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = build_mask(0.5, 4, Some(&[1.0, -1.0, 1.0, 1.0]), 0).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn seeded_selection_is_reproducible() {
        assert_eq!(build_mask(0.3, 100, None, 5).unwrap(), build_mask(0.3, 100, None, 5).unwrap());
        assert_ne!(build_mask(0.3, 100, None, 5).unwrap(), build_mask(0.3, 100, None, 6).unwrap());
    }

    proptest! {
        #[test]
        fn eta_matches_popcount(eta in 0.0f64..=1.0, n in 1usize..500, seed in any::<u64>()) {
            let m = build_mask(eta, n, None, seed).unwrap();
            prop_assert_eq!(m.encrypted_count(), (eta * n as f64).round() as usize);
            prop_assert_eq!(m.eta(), m.encrypted_count() as f64 / n as f64);
        }

        #[test]
        fn runs_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = EncryptionMask::from_bits(bits);
            prop_assert_eq!(EncryptionMask::from_runs(&m.runs()), m);
        }
    }
}
