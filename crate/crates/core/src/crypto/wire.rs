//! Byte layout of a serialized [`MaskedModel`]. All integers little endian.
//!
//! ```text
//! off  len       field
//! 0    4         magic "IFLM"
//! 4    2         version (1)
//! 6    1         flags, bit 0 = is_encrypted
//! 7    1         reserved (0)
//! 8    8         parameter count
//! 16   4         R = number of mask runs
//! 20   4*R       run lengths, alternating, first run is of 0-bits
//! ..   8         key id (0 for plaintext)
//! ..   4         ring degree n (0 for plaintext)
//! ..   4         modulus bits (0 for plaintext)
//! ..   4         base fixed-point scale bits of the key parameters
//! ..   4         weight bits
//! ..   4         current scale bits of the block
//! ..   8         slot count S (packed capacity, multiple of n)
//! ..   8         encrypted value count
//! ..   8         plaintext value count P
//! payload:
//!      8*P       plaintext values (f64)
//!      S*2*B     ciphertexts, each as n coefficients of c0 then n of c1,
//!                B = ceil(modulus bits / 8) bytes per coefficient
//! ```

use super::mask::EncryptionMask;
use super::masked::{CipherBlock, MaskedModel};
use super::scheme::{Ciphertext, CryptoParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IFLM";
pub const VERSION: u16 = 1;

/// Byte counts of one serialized message.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WireSize {
    pub header: usize,
    pub plaintext: usize,
    pub ciphertext: usize,
}

impl WireSize {
    pub fn total(&self) -> usize {
        self.header + self.plaintext + self.ciphertext
    }
}

impl MaskedModel {
    pub fn wire_size(&self) -> WireSize {
        WireSize {
            header: 20 + 4 * self.mask.runs().len() + 52,
            plaintext: 8 * self.plain.len(),
            ciphertext: self.ciphertext_bytes(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let size = self.wire_size();
        let mut out = Vec::with_capacity(size.total());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(u8::from(self.is_encrypted));
        out.push(0);
        out.extend_from_slice(&(self.mask.len() as u64).to_le_bytes());
        let runs = self.mask.runs();
        out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for r in runs {
            out.extend_from_slice(&r.to_le_bytes());
        }
        let (key_id, n, mbits, base, wbits, sbits, slots, values) = match &self.cipher {
            Some(c) => (
                c.key_id,
                c.params.ring_degree as u32,
                c.params.modulus_bits,
                c.params.scale_bits,
                c.params.weight_bits,
                c.scale_bits,
                c.slot_count() as u64,
                c.value_count as u64,
            ),
            None => (0, 0, 0, 0, 0, 0, 0, 0),
        };
        out.extend_from_slice(&key_id.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&mbits.to_le_bytes());
        out.extend_from_slice(&base.to_le_bytes());
        out.extend_from_slice(&wbits.to_le_bytes());
        out.extend_from_slice(&sbits.to_le_bytes());
        out.extend_from_slice(&slots.to_le_bytes());
        out.extend_from_slice(&values.to_le_bytes());
        out.extend_from_slice(&(self.plain.len() as u64).to_le_bytes());
        for v in &self.plain {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &self.cipher {
            let b = c.params.coef_bytes();
            for ct in &c.cts {
                for coef in ct.c0.iter().chain(&ct.c1) {
                    out.extend_from_slice(&coef.to_le_bytes()[..b]);
                }
            }
        }
        debug_assert_eq!(out.len(), size.total());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported version {version}")));
        }
        let flags = r.take(2)?[0];
        let is_encrypted = flags & 1 == 1;
        let param_count = r.u64()? as usize;
        let run_count = r.u32()? as usize;
        let runs = (0..run_count).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
        let mask = EncryptionMask::from_runs(&runs);
        if mask.len() != param_count {
            return Err(Error::Malformed("mask runs do not cover the parameter count".into()));
        }
        let key_id = r.u64()?;
        let ring_degree = r.u32()? as usize;
        let modulus_bits = r.u32()?;
        let base_scale_bits = r.u32()?;
        let weight_bits = r.u32()?;
        let scale_bits = r.u32()?;
        let slots = r.u64()? as usize;
        let value_count = r.u64()? as usize;
        let plain_count = r.u64()? as usize;
        let plain = (0..plain_count).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<f64>>>()?;
        let cipher = if ring_degree == 0 {
            None
        } else {
            let params = CryptoParams { ring_degree, modulus_bits, scale_bits: base_scale_bits, weight_bits };
            params.validate()?;
            if slots % ring_degree != 0 {
                return Err(Error::Malformed("slot count is not a multiple of the ring degree".into()));
            }
            let b = params.coef_bytes();
            let mut cts = Vec::with_capacity(slots / ring_degree);
            for _ in 0..slots / ring_degree {
                let mut read_poly = || -> Result<Vec<u128>> {
                    (0..ring_degree)
                        .map(|_| {
                            let mut buf = [0u8; 16];
                            buf[..b].copy_from_slice(r.take(b)?);
                            Ok(u128::from_le_bytes(buf))
                        })
                        .collect()
                };
                let c0 = read_poly()?;
                let c1 = read_poly()?;
                cts.push(Ciphertext { c0, c1 });
            }
            Some(CipherBlock { key_id, params, scale_bits, value_count, cts })
        };
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = MaskedModel { mask, cipher, plain, is_encrypted };
        model.check_invariants()?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed("truncated message".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
