//! Selective additively homomorphic encryption of model parameters.

mod mask;
mod masked;
mod scheme;
mod wire;

pub use mask::{build_mask, EncryptionMask};
pub use masked::{add_weighted, decrypt_masked, decrypt_values, encrypt_masked, encrypt_values, CipherBlock, MaskedModel};
pub use scheme::{keygen, CryptoParams, Keypair, PublicKey, SecretKey, HEADROOM_BITS};
pub use wire::{WireSize, MAGIC, VERSION};
