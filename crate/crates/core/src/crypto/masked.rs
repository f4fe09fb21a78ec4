use rand::RngCore;

use super::mask::EncryptionMask;
use super::scheme::{decrypt_poly, encrypt_poly, modulus_mask, Ciphertext, CryptoParams, Keypair, PublicKey, HEADROOM_BITS};
use crate::error::{Error, Result};
use crate::nn::ModelParams;

/// Packed ciphertexts covering the masked entries of a model, in ascending
/// parameter order. `slot_count` is the packed capacity (`ciphertexts * n`).
#[derive(Debug, Clone, PartialEq)]
pub struct CipherBlock {
    pub(crate) key_id: u64,
    pub(crate) params: CryptoParams,
    /// Fixed-point fraction bits of the encoded values.
    pub(crate) scale_bits: u32,
    pub(crate) value_count: usize,
    pub(crate) cts: Vec<Ciphertext>,
}

impl CipherBlock {
    pub fn slot_count(&self) -> usize {
        self.cts.len() * self.params.ring_degree
    }

    pub fn value_count(&self) -> usize {
        self.value_count
    }

    pub fn ciphertext_count(&self) -> usize {
        self.cts.len()
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn params(&self) -> &CryptoParams {
        &self.params
    }

    /// Serialized ciphertext payload length.
    pub fn byte_size(&self) -> usize {
        self.slot_count() * 2 * self.params.coef_bytes()
    }

    fn max_scale(&self) -> u32 {
        self.params.scale_bits + self.params.weight_bits
    }

    fn rescaled(&self, to_bits: u32) -> Result<CipherBlock> {
        if to_bits < self.scale_bits || to_bits > self.max_scale() {
            return Err(Error::ScaleOverflow(format!("cannot move from scale 2^{} to 2^{to_bits}", self.scale_bits)));
        }
        let shift = to_bits - self.scale_bits;
        if shift == 0 {
            return Ok(self.clone());
        }
        let mask = modulus_mask(&self.params);
        Ok(CipherBlock {
            cts: self.cts.iter().map(|c| c.mul_scalar(1i64 << shift, mask)).collect(),
            scale_bits: to_bits,
            ..self.clone()
        })
    }
}

/// A model message: ciphertext for masked entries, plaintext for the rest.
/// Plaintext messages carry every entry in `plain` and no ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedModel {
    pub mask: EncryptionMask,
    pub cipher: Option<CipherBlock>,
    pub plain: Vec<f64>,
    pub is_encrypted: bool,
}

impl MaskedModel {
    pub fn plaintext(values: Vec<f64>) -> Self {
        let mask = EncryptionMask::none(values.len());
        Self { mask, cipher: None, plain: values, is_encrypted: false }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn ciphertext_bytes(&self) -> usize {
        self.cipher.as_ref().map_or(0, CipherBlock::byte_size)
    }

    /// The trivial encryption of the all-zero model: zero ciphertexts at
    /// `scale_bits` and a zero plaintext part.
    pub fn zeros_like(template: &MaskedModel, scale_bits: u32) -> Self {
        let cipher = template.cipher.as_ref().map(|c| CipherBlock {
            cts: vec![Ciphertext::zero(c.params.ring_degree); c.cts.len()],
            scale_bits,
            ..c.clone()
        });
        Self {
            mask: template.mask.clone(),
            cipher,
            plain: vec![0.0; template.plain.len()],
            is_encrypted: template.is_encrypted,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let cipher_values = self.cipher.as_ref().map_or(0, CipherBlock::value_count);
        if !self.is_encrypted && self.cipher.is_some() {
            return Err(Error::Malformed("plaintext message carries ciphertext".into()));
        }
        if self.is_encrypted && cipher_values != self.mask.encrypted_count() {
            return Err(Error::Malformed("ciphertext does not cover the mask".into()));
        }
        if cipher_values + self.plain.len() != self.mask.len() {
            return Err(Error::Malformed(format!(
                "{} cipher values + {} plain values != {} mask bits",
                cipher_values,
                self.plain.len(),
                self.mask.len()
            )));
        }
        Ok(())
    }
}

fn encode(value: f64, scale_bits: u32, limit: f64) -> Result<i64> {
    if !value.is_finite() || value.abs() >= limit {
        return Err(Error::Overflow { value, limit });
    }
    Ok((value * 2f64.powi(scale_bits as i32)).round() as i64)
}

fn decode(v: i64, scale_bits: u32) -> f64 {
    v as f64 / 2f64.powi(scale_bits as i32)
}

/// Encrypts the masked entries of `values` (fixed-point encoded, packed
/// `n` per ciphertext) and copies the rest in plaintext.
pub fn encrypt_values(values: &[f64], mask: &EncryptionMask, key: &PublicKey, rng: &mut impl RngCore) -> Result<MaskedModel> {
    if values.len() != mask.len() {
        return Err(Error::LengthMismatch { expected: mask.len(), actual: values.len() });
    }
    let params = *key.params();
    let limit = params.value_limit();
    let mut secret = Vec::with_capacity(mask.encrypted_count());
    let mut plain = Vec::with_capacity(mask.plain_count());
    for (&v, &bit) in values.iter().zip(mask.bits()) {
        if bit {
            secret.push(encode(v, params.scale_bits, limit)?);
        } else {
            plain.push(v);
        }
    }
    let cts = secret.chunks(params.ring_degree).map(|chunk| encrypt_poly(key, chunk, rng)).collect();
    let cipher = CipherBlock {
        key_id: key.key_id(),
        params,
        scale_bits: params.scale_bits,
        value_count: secret.len(),
        cts,
    };
    Ok(MaskedModel { mask: mask.clone(), cipher: Some(cipher), plain, is_encrypted: true })
}

pub fn encrypt_masked(params: &ModelParams, mask: &EncryptionMask, key: &PublicKey, rng: &mut impl RngCore) -> Result<MaskedModel> {
    encrypt_values(&params.flat, mask, key, rng)
}

/// Reassembles the flat vector of an encrypted message.
pub fn decrypt_values(m: &MaskedModel, mask: &EncryptionMask, key: &Keypair) -> Result<Vec<f64>> {
    if !m.is_encrypted {
        return Err(Error::InvalidArgument("message is not encrypted".into()));
    }
    if &m.mask != mask {
        return Err(Error::MaskMismatch);
    }
    m.check_invariants()?;
    let cipher = m.cipher.as_ref().ok_or_else(|| Error::Malformed("encrypted message without ciphertext".into()))?;
    if cipher.key_id != key.key_id() || cipher.params != *key.params() {
        return Err(Error::WrongKey);
    }
    let mut secret = Vec::with_capacity(cipher.cts.len() * cipher.params.ring_degree);
    for ct in &cipher.cts {
        secret.extend(decrypt_poly(&cipher.params, &key.secret, ct)?);
    }
    let mut secret = secret.into_iter().take(cipher.value_count).map(|v| decode(v, cipher.scale_bits));
    let mut plain = m.plain.iter().copied();
    mask.bits()
        .iter()
        .map(|&bit| if bit { secret.next() } else { plain.next() })
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Malformed("message shorter than its mask".into()))
}

pub fn decrypt_masked(m: &MaskedModel, mask: &EncryptionMask, key: &Keypair, template: &ModelParams) -> Result<ModelParams> {
    let flat = decrypt_values(m, mask, key)?;
    if flat.len() != template.flat.len() {
        return Err(Error::LengthMismatch { expected: template.flat.len(), actual: flat.len() });
    }
    Ok(ModelParams { flat, layout: template.layout.clone() })
}

/// `acc + weight * x`. Encrypted parts are combined homomorphically: the
/// weight is fixed-point encoded with `weight_bits` fraction bits and both
/// operands are brought to a common scale by exact power-of-two multiplies.
pub fn add_weighted(acc: &MaskedModel, x: &MaskedModel, weight: f64) -> Result<MaskedModel> {
    if acc.mask != x.mask {
        return Err(Error::MaskMismatch);
    }
    if acc.is_encrypted != x.is_encrypted {
        return Err(Error::MixedEncryption);
    }
    if acc.plain.len() != x.plain.len() {
        return Err(Error::LengthMismatch { expected: acc.plain.len(), actual: x.plain.len() });
    }
    let plain = acc.plain.iter().zip(&x.plain).map(|(a, b)| a + weight * b).collect();
    let cipher = match (&acc.cipher, &x.cipher) {
        (None, None) => None,
        (Some(a), Some(b)) => {
            if a.key_id != b.key_id || a.params != b.params {
                return Err(Error::WrongKey);
            }
            let p = a.params;
            let w_limit = 2f64.powi(HEADROOM_BITS as i32);
            if !weight.is_finite() || weight.abs() > w_limit {
                return Err(Error::ScaleOverflow(format!("weight {weight} exceeds +/-{w_limit}")));
            }
            let w_int = (weight * 2f64.powi(p.weight_bits as i32)).round() as i64;
            let x_scale = b.scale_bits + p.weight_bits;
            if x_scale > p.scale_bits + p.weight_bits {
                return Err(Error::ScaleOverflow(format!("operand already at scale 2^{}", b.scale_bits)));
            }
            let mask = modulus_mask(&p);
            let target = a.scale_bits.max(x_scale);
            let mut out = a.rescaled(target)?;
            let shift = target - x_scale;
            let factor = w_int
                .checked_mul(1i64 << shift)
                .ok_or_else(|| Error::ScaleOverflow("weight factor exceeds 64 bits".into()))?;
            for (o, c) in out.cts.iter_mut().zip(&b.cts) {
                o.add_assign(&c.mul_scalar(factor, mask), mask);
            }
            Some(out)
        }
        _ => return Err(Error::Malformed("ciphertext presence differs between operands".into())),
    };
    Ok(MaskedModel { mask: acc.mask.clone(), cipher, plain, is_encrypted: acc.is_encrypted })
}
