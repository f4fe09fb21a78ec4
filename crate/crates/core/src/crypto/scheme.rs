//! Additively homomorphic RLWE encryption over `Z_q[X]/(X^n + 1)` with a
//! power-of-two modulus `q = 2^modulus_bits` and plaintext space `Z_{2^64}`.
//!
//! Secrets and encryption randomness are ternary, errors follow a centred
//! binomial distribution. A ciphertext `(c0, c1)` of the message polynomial
//! `m` satisfies `c0 + c1*s = delta*m + noise` with `delta = q / 2^64`.
//! Ciphertexts support addition and multiplication by an integer scalar,
//! which is all weighted averaging needs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const PLAIN_BITS: u32 = 64;
/// Centred binomial parameter; error variance is `CBD_K / 2`.
const CBD_K: u32 = 8;
/// Bits reserved above the weighted message for summing many ciphertexts.
pub const HEADROOM_BITS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoParams {
    /// Ring degree `n`, i.e. slots per ciphertext. Power of two.
    pub ring_degree: usize,
    /// `log2 q`, in `104..=128`.
    pub modulus_bits: u32,
    /// Fixed-point fraction bits used when encoding values.
    pub scale_bits: u32,
    /// Fixed-point fraction bits used when encoding aggregation weights.
    pub weight_bits: u32,
}

impl Default for CryptoParams {
    fn default() -> Self {
        Self { ring_degree: 1024, modulus_bits: 128, scale_bits: 24, weight_bits: 24 }
    }
}

impl CryptoParams {
    pub fn validate(&self) -> Result<()> {
        if !(104..=128).contains(&self.modulus_bits) {
            return Err(Error::CryptoParams(format!("modulus of {} bits outside 104..=128", self.modulus_bits)));
        }
        if !self.ring_degree.is_power_of_two() || !(16..=8192).contains(&self.ring_degree) {
            return Err(Error::CryptoParams(format!("ring degree {} is not a power of two in 16..=8192", self.ring_degree)));
        }
        if self.scale_bits == 0 || self.weight_bits == 0 || self.scale_bits + self.weight_bits + HEADROOM_BITS >= 62 {
            return Err(Error::CryptoParams(format!(
                "scale bits {} and weight bits {} leave no integer headroom",
                self.scale_bits, self.weight_bits
            )));
        }
        Ok(())
    }

    pub fn delta_bits(&self) -> u32 {
        self.modulus_bits - PLAIN_BITS
    }

    /// Serialized bytes per ring coefficient.
    pub fn coef_bytes(&self) -> usize {
        self.modulus_bits.div_ceil(8) as usize
    }

    /// Ciphertext bytes per slot divided by the 8 bytes of a plaintext `f64`.
    pub fn expansion_factor(&self) -> f64 {
        (2 * self.coef_bytes()) as f64 / 8.0
    }

    /// Largest magnitude a value may have when encrypted at `scale_bits`.
    pub fn value_limit(&self) -> f64 {
        2f64.powi((63 - self.scale_bits - self.weight_bits - HEADROOM_BITS) as i32)
    }

    fn mask(&self) -> u128 {
        if self.modulus_bits == 128 {
            u128::MAX
        } else {
            (1u128 << self.modulus_bits) - 1
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    s: Vec<i8>,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    p0: Vec<u128>,
    p1: Vec<u128>,
    key_id: u64,
    params: CryptoParams,
}

impl PublicKey {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn params(&self) -> &CryptoParams {
        &self.params
    }
}

#[derive(Debug, Clone)]
pub struct Keypair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl Keypair {
    pub fn params(&self) -> &CryptoParams {
        &self.public.params
    }

    pub fn key_id(&self) -> u64 {
        self.public.key_id
    }
}

/// One RLWE ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub(crate) c0: Vec<u128>,
    pub(crate) c1: Vec<u128>,
}

fn ternary(rng: &mut impl RngCore, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(-1i8..=1)).collect()
}

fn cbd(rng: &mut impl RngCore, n: usize) -> Vec<i64> {
    (0..n)
        .map(|_| {
            let bits = rng.next_u32();
            let a = (bits & ((1 << CBD_K) - 1)).count_ones() as i64;
            let b = ((bits >> CBD_K) & ((1 << CBD_K) - 1)).count_ones() as i64;
            a - b
        })
        .collect()
}

#[inline]
fn from_signed(v: i64) -> u128 {
    v as i128 as u128
}

/// Negacyclic product `a * t mod (X^n + 1)` for a ternary `t`.
fn mul_ternary(a: &[u128], t: &[i8]) -> Vec<u128> {
    let n = a.len();
    let mut out = vec![0u128; n];
    for (j, &tj) in t.iter().enumerate() {
        if tj == 0 {
            continue;
        }
        let positive = tj > 0;
        // Coefficients that stay below X^n.
        for (o, &ai) in out[j..].iter_mut().zip(&a[..n - j]) {
            *o = if positive { o.wrapping_add(ai) } else { o.wrapping_sub(ai) };
        }
        // Coefficients that wrap around pick up a sign flip.
        for (o, &ai) in out[..j].iter_mut().zip(&a[n - j..]) {
            *o = if positive { o.wrapping_sub(ai) } else { o.wrapping_add(ai) };
        }
    }
    out
}

fn key_fingerprint(p0: &[u128], p1: &[u128]) -> u64 {
    let mut h = Sha256::new();
    for c in p0.iter().chain(p1) {
        h.update(c.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Deterministic key generation from `seed`.
pub fn keygen(seed: u64, params: CryptoParams) -> Result<Keypair> {
    params.validate()?;
    let n = params.ring_degree;
    let mask = params.mask();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = ternary(&mut rng, n);
    let a: Vec<u128> = (0..n).map(|_| ((rng.next_u64() as u128) << 64 | rng.next_u64() as u128) & mask).collect();
    let e = cbd(&mut rng, n);
    let as_ = mul_ternary(&a, &s);
    let p0: Vec<u128> = as_
        .iter()
        .zip(&e)
        .map(|(&x, &ei)| 0u128.wrapping_sub(x.wrapping_add(from_signed(ei))) & mask)
        .collect();
    let key_id = key_fingerprint(&p0, &a);
    Ok(Keypair { public: PublicKey { p0, p1: a, key_id, params }, secret: SecretKey { s } })
}

/// Encrypts up to `n` signed plaintext coefficients (missing ones are zero).
pub(crate) fn encrypt_poly(pk: &PublicKey, message: &[i64], rng: &mut impl RngCore) -> Ciphertext {
    let params = &pk.params;
    let n = params.ring_degree;
    debug_assert!(message.len() <= n);
    let mask = params.mask();
    let delta_bits = params.delta_bits();
    let u = ternary(rng, n);
    let e1 = cbd(rng, n);
    let e2 = cbd(rng, n);
    let mut c0 = mul_ternary(&pk.p0, &u);
    let mut c1 = mul_ternary(&pk.p1, &u);
    for i in 0..n {
        let m = message.get(i).copied().unwrap_or(0);
        let scaled = from_signed(m).wrapping_shl(delta_bits);
        c0[i] = c0[i].wrapping_add(from_signed(e1[i])).wrapping_add(scaled) & mask;
        c1[i] = c1[i].wrapping_add(from_signed(e2[i])) & mask;
    }
    Ciphertext { c0, c1 }
}

/// Decrypts all `n` coefficients. Fails when any coefficient carries noise
/// beyond a quarter of `delta`, which is what a foreign key produces.
pub(crate) fn decrypt_poly(params: &CryptoParams, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<i64>> {
    let mask = params.mask();
    let delta_bits = params.delta_bits();
    let half = 1u128 << (delta_bits - 1);
    let quarter = 1u128 << (delta_bits - 2);
    let c1s = mul_ternary(&ct.c1, &sk.s);
    let mut out = Vec::with_capacity(ct.c0.len());
    for (&a, &b) in ct.c0.iter().zip(&c1s) {
        let v = a.wrapping_add(b) & mask;
        let rounded = (v.wrapping_add(half) & mask) >> delta_bits;
        // Centred distance between v and the nearest multiple of delta.
        let low = v & ((1u128 << delta_bits) - 1);
        let dist = if low >= half { (1u128 << delta_bits) - low } else { low };
        if dist >= quarter {
            return Err(Error::DecryptionFailed);
        }
        out.push(rounded as u64 as i64);
    }
    Ok(out)
}

impl Ciphertext {
    /// Trivial (noise-free) encryption of zero.
    pub(crate) fn zero(n: usize) -> Self {
        Self { c0: vec![0; n], c1: vec![0; n] }
    }

    pub(crate) fn add_assign(&mut self, other: &Ciphertext, mask: u128) {
        for (a, b) in self.c0.iter_mut().zip(&other.c0) {
            *a = a.wrapping_add(*b) & mask;
        }
        for (a, b) in self.c1.iter_mut().zip(&other.c1) {
            *a = a.wrapping_add(*b) & mask;
        }
    }

    pub(crate) fn mul_scalar(&self, k: i64, mask: u128) -> Self {
        let k = from_signed(k);
        Self {
            c0: self.c0.iter().map(|c| c.wrapping_mul(k) & mask).collect(),
            c1: self.c1.iter().map(|c| c.wrapping_mul(k) & mask).collect(),
        }
    }
}

pub(crate) fn modulus_mask(params: &CryptoParams) -> u128 {
    params.mask()
}
