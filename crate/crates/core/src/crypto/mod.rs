//! Cryptographic primitives shared by the boot, update and reconfiguration
//! paths.
//!
//! Two interchangeable profiles exist. [`CryptoProfile::REFERENCE`] uses
//! RSA-4096 (PKCS#1 v1.5 signatures over SHA3-384, OAEP key encapsulation).
//! [`CryptoProfile::TEST`] keeps every interface and length contract but
//! replaces the asymmetric operations with keyed SHA3-384 constructions so
//! that large property sweeps run quickly. The test profile's "public" key
//! equals its private key and provides no security whatsoever.
//!
//! Digests (SHA3-384) and authenticated encryption (AES-256-GCM) are the same
//! under both profiles.

mod crc;

pub use crc::{crc32, Crc32};

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey};
use rsa::{Oaep, Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha3::{Digest as _, Sha3_384};
use thiserror::Error;

pub const DIGEST_LEN: usize = 48;
pub const KEY_ID_LEN: usize = 8;
pub const SYMMETRIC_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

const RSA_BITS: usize = 4096;
const TEST_SECRET_LEN: usize = 32;

const TEST_SIG_DOMAIN: &[u8] = b"aegis-test-sig/v1";
const TEST_KEM_PAD_DOMAIN: &[u8] = b"aegis-test-kem/v1";
const TEST_KEM_TAG_DOMAIN: &[u8] = b"aegis-test-kem-tag/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("wrong key kind: expected {expected:?}, got {found:?}")]
    WrongKeyKind { expected: KeyKind, found: KeyKind },
    #[error("authentication tag mismatch")]
    AuthFailure,
    #[error("key decapsulation failed")]
    DecapsulationFailure,
    #[error("malformed key material: {0}")]
    InvalidKey(String),
    #[error("symmetric keys must be {SYMMETRIC_KEY_LEN} bytes, got {0}")]
    BadSymmetricKeyLength(usize),
    #[error("RSA operation failed: {0}")]
    Rsa(String),
}

pub type Result<T, E = CryptoError> = std::result::Result<T, E>;

/// SHA3-384 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

/// First eight bytes of the digest of a public (or symmetric) key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KeyId(pub [u8; KEY_ID_LEN]);

impl KeyId {
    pub fn of(key_bytes: &[u8]) -> Self {
        let d = sha3_384(key_bytes);
        let mut id = [0u8; KEY_ID_LEN];
        id.copy_from_slice(&d.0[..KEY_ID_LEN]);
        KeyId(id)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileId {
    Reference,
    Test,
}

impl std::str::FromStr for ProfileId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(ProfileId::Reference),
            "test" => Ok(ProfileId::Test),
            other => Err(format!("unknown crypto profile `{other}`")),
        }
    }
}

/// Names the algorithms behind one crypto profile and dispatches to them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CryptoProfile {
    pub id: ProfileId,
    pub sig_scheme_name: &'static str,
    pub digest_name: &'static str,
    pub aead_name: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyKind {
    AsymPublic,
    AsymPrivate,
    Symmetric,
}

/// Raw key bytes tagged with their kind and identifier.
///
/// For asymmetric keys `key_id` always identifies the *public* half, so a
/// signature's signer id can be matched against a public-key store.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub kind: KeyKind,
    pub bytes: Vec<u8>,
    pub key_id: KeyId,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("KeyMaterial");
        s.field("kind", &self.kind).field("key_id", &self.key_id);
        if self.kind == KeyKind::AsymPublic {
            s.field("len", &self.bytes.len());
        } else {
            s.field("bytes", &"<redacted>");
        }
        s.finish()
    }
}

impl KeyMaterial {
    pub fn symmetric(bytes: [u8; SYMMETRIC_KEY_LEN]) -> Self {
        KeyMaterial {
            kind: KeyKind::Symmetric,
            key_id: KeyId::of(&bytes),
            bytes: bytes.to_vec(),
        }
    }

    pub fn symmetric_from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; SYMMETRIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::BadSymmetricKeyLength(bytes.len()))?;
        Ok(Self::symmetric(arr))
    }

    pub fn random_symmetric<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; SYMMETRIC_KEY_LEN];
        rng.fill_bytes(&mut k);
        Self::symmetric(k)
    }

    fn expect_kind(&self, expected: KeyKind) -> Result<()> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(CryptoError::WrongKeyKind {
                expected,
                found: self.kind,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub signer_key_id: KeyId,
    pub sig_bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: KeyMaterial,
    pub private: KeyMaterial,
}

/// SHA3-384 of `data`.
pub fn sha3_384(data: &[u8]) -> Digest {
    let out = Sha3_384::digest(data);
    let mut d = [0u8; DIGEST_LEN];
    d.copy_from_slice(&out);
    Digest(d)
}

fn sha3_384_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha3_384::new();
    for p in parts {
        h.update(p);
    }
    let mut d = [0u8; DIGEST_LEN];
    d.copy_from_slice(&h.finalize());
    Digest(d)
}

fn cipher_for(key: &KeyMaterial) -> Result<Aes256Gcm> {
    key.expect_kind(KeyKind::Symmetric)?;
    Aes256Gcm::new_from_slice(&key.bytes).map_err(|_| CryptoError::BadSymmetricKeyLength(key.bytes.len()))
}

/// AES-256-GCM encryption. Output is `plaintext.len() + 16` bytes.
pub fn aead_encrypt(
    key: &KeyMaterial,
    nonce: &[u8; NONCE_LEN],
    plaintext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>> {
    let cipher = cipher_for(key)?;
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .map_err(|_| CryptoError::AuthFailure)
}

/// AES-256-GCM decryption; any tag mismatch (including short input) is
/// reported as [`CryptoError::AuthFailure`].
pub fn aead_decrypt(
    key: &KeyMaterial,
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>> {
    let cipher = cipher_for(key)?;
    if ciphertext.len() < TAG_LEN {
        return Err(CryptoError::AuthFailure);
    }
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
        .map_err(|_| CryptoError::AuthFailure)
}

impl CryptoProfile {
    pub const REFERENCE: CryptoProfile = CryptoProfile {
        id: ProfileId::Reference,
        sig_scheme_name: "RSA-4096/PKCS1v15/SHA3-384",
        digest_name: "SHA3-384",
        aead_name: "AES-256-GCM",
    };

    pub const TEST: CryptoProfile = CryptoProfile {
        id: ProfileId::Test,
        sig_scheme_name: "TEST-KEYED-SHA3-384 (insecure)",
        digest_name: "SHA3-384",
        aead_name: "AES-256-GCM",
    };

    pub fn from_id(id: ProfileId) -> Self {
        match id {
            ProfileId::Reference => Self::REFERENCE,
            ProfileId::Test => Self::TEST,
        }
    }

    pub fn digest(&self, data: &[u8]) -> Digest {
        sha3_384(data)
    }

    /// Fixed signature length in bytes.
    pub fn signature_len(&self) -> usize {
        match self.id {
            ProfileId::Reference => RSA_BITS / 8,
            ProfileId::Test => DIGEST_LEN,
        }
    }

    pub fn generate_keypair<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<KeyPair> {
        match self.id {
            ProfileId::Reference => {
                let sk = RsaPrivateKey::new(rng, RSA_BITS).map_err(|e| CryptoError::Rsa(e.to_string()))?;
                let pk = RsaPublicKey::from(&sk);
                let pub_der = pk
                    .to_pkcs1_der()
                    .map_err(|e| CryptoError::InvalidKey(e.to_string()))?
                    .as_bytes()
                    .to_vec();
                let priv_der = sk
                    .to_pkcs1_der()
                    .map_err(|e| CryptoError::InvalidKey(e.to_string()))?
                    .as_bytes()
                    .to_vec();
                let key_id = KeyId::of(&pub_der);
                Ok(KeyPair {
                    public: KeyMaterial {
                        kind: KeyKind::AsymPublic,
                        bytes: pub_der,
                        key_id,
                    },
                    private: KeyMaterial {
                        kind: KeyKind::AsymPrivate,
                        bytes: priv_der,
                        key_id,
                    },
                })
            }
            ProfileId::Test => {
                let mut secret = [0u8; TEST_SECRET_LEN];
                rng.fill_bytes(&mut secret);
                Ok(Self::test_keypair_from_secret(secret))
            }
        }
    }

    /// Test-profile key pair with a caller-chosen secret.
    pub fn test_keypair_from_secret(secret: [u8; TEST_SECRET_LEN]) -> KeyPair {
        let key_id = KeyId::of(&secret);
        KeyPair {
            public: KeyMaterial {
                kind: KeyKind::AsymPublic,
                bytes: secret.to_vec(),
                key_id,
            },
            private: KeyMaterial {
                kind: KeyKind::AsymPrivate,
                bytes: secret.to_vec(),
                key_id,
            },
        }
    }

    pub fn sign(&self, data: &[u8], key: &KeyMaterial) -> Result<Signature> {
        key.expect_kind(KeyKind::AsymPrivate)?;
        let sig_bytes = match self.id {
            ProfileId::Reference => {
                let sk = RsaPrivateKey::from_pkcs1_der(&key.bytes)
                    .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
                let hashed = sha3_384(data);
                sk.sign(Pkcs1v15Sign::new::<Sha3_384>(), &hashed.0)
                    .map_err(|e| CryptoError::Rsa(e.to_string()))?
            }
            ProfileId::Test => sha3_384_parts(&[TEST_SIG_DOMAIN, &key.bytes, data]).0.to_vec(),
        };
        Ok(Signature {
            signer_key_id: key.key_id,
            sig_bytes,
        })
    }

    /// `Ok(false)` for any mismatch, including a signature of the wrong
    /// length or from a different signer id.
    pub fn verify(&self, data: &[u8], sig: &Signature, key: &KeyMaterial) -> Result<bool> {
        key.expect_kind(KeyKind::AsymPublic)?;
        if sig.sig_bytes.len() != self.signature_len() || sig.signer_key_id != key.key_id {
            return Ok(false);
        }
        match self.id {
            ProfileId::Reference => {
                let pk = match RsaPublicKey::from_pkcs1_der(&key.bytes) {
                    Ok(pk) => pk,
                    Err(_) => return Ok(false),
                };
                let hashed = sha3_384(data);
                Ok(pk
                    .verify(Pkcs1v15Sign::new::<Sha3_384>(), &hashed.0, &sig.sig_bytes)
                    .is_ok())
            }
            ProfileId::Test => {
                let expected = sha3_384_parts(&[TEST_SIG_DOMAIN, &key.bytes, data]);
                Ok(constant_time_eq(&expected.0, &sig.sig_bytes))
            }
        }
    }

    /// Wraps a 32-byte session key for `recipient_pub`. The blob starts with
    /// the recipient's key id. Reference-profile output is randomized.
    pub fn encapsulate_key<R: RngCore + CryptoRng>(
        &self,
        session_key: &KeyMaterial,
        recipient_pub: &KeyMaterial,
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        session_key.expect_kind(KeyKind::Symmetric)?;
        recipient_pub.expect_kind(KeyKind::AsymPublic)?;
        if session_key.bytes.len() != SYMMETRIC_KEY_LEN {
            return Err(CryptoError::BadSymmetricKeyLength(session_key.bytes.len()));
        }
        let mut blob = recipient_pub.key_id.0.to_vec();
        match self.id {
            ProfileId::Reference => {
                let pk = RsaPublicKey::from_pkcs1_der(&recipient_pub.bytes)
                    .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
                let ct = pk
                    .encrypt(rng, Oaep::new::<Sha3_384>(), &session_key.bytes)
                    .map_err(|e| CryptoError::Rsa(e.to_string()))?;
                blob.extend_from_slice(&ct);
            }
            ProfileId::Test => {
                let pad = sha3_384_parts(&[TEST_KEM_PAD_DOMAIN, &recipient_pub.bytes]);
                blob.extend(session_key.bytes.iter().zip(pad.0.iter()).map(|(k, p)| k ^ p));
                let tag = sha3_384_parts(&[TEST_KEM_TAG_DOMAIN, &recipient_pub.bytes, &session_key.bytes]);
                blob.extend_from_slice(&tag.0[..TAG_LEN]);
            }
        }
        Ok(blob)
    }

    pub fn decapsulate_key(&self, blob: &[u8], recipient_priv: &KeyMaterial) -> Result<KeyMaterial> {
        recipient_priv.expect_kind(KeyKind::AsymPrivate)?;
        if blob.len() < KEY_ID_LEN || blob[..KEY_ID_LEN] != recipient_priv.key_id.0 {
            return Err(CryptoError::DecapsulationFailure);
        }
        let body = &blob[KEY_ID_LEN..];
        match self.id {
            ProfileId::Reference => {
                let sk = RsaPrivateKey::from_pkcs1_der(&recipient_priv.bytes)
                    .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
                let pt = sk
                    .decrypt(Oaep::new::<Sha3_384>(), body)
                    .map_err(|_| CryptoError::DecapsulationFailure)?;
                KeyMaterial::symmetric_from_slice(&pt).map_err(|_| CryptoError::DecapsulationFailure)
            }
            ProfileId::Test => {
                if body.len() != SYMMETRIC_KEY_LEN + TAG_LEN {
                    return Err(CryptoError::DecapsulationFailure);
                }
                let pad = sha3_384_parts(&[TEST_KEM_PAD_DOMAIN, &recipient_priv.bytes]);
                let mut key = [0u8; SYMMETRIC_KEY_LEN];
                for (i, k) in key.iter_mut().enumerate() {
                    *k = body[i] ^ pad.0[i];
                }
                let tag = sha3_384_parts(&[TEST_KEM_TAG_DOMAIN, &recipient_priv.bytes, &key]);
                if !constant_time_eq(&tag.0[..TAG_LEN], &body[SYMMETRIC_KEY_LEN..]) {
                    return Err(CryptoError::DecapsulationFailure);
                }
                Ok(KeyMaterial::symmetric(key))
            }
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    const EMPTY_SHA3_384: &str = "0c63a75b845e4f7d01107d852e4c2485c51a50aaaa94fc61995e71bbee983a2ac3713831264adb47fb6bd1e058d5f004";

    // Frozen from Python hashlib: sha3_384(b"aegis-test-sig/v1" + bytes(range(32)) + b"fixed test vector").
    const TEST_SIG_GOLDEN: &str = "f70758f294bc68395373a54cfecd758bd0a845f2cc1491dd5ef550bcf19aa8ee0da043ddef7f45d29a64c6f7ba7aad95";
    // sha3_384(bytes(range(32)))[:8]
    const TEST_KEY_ID_GOLDEN: &str = "e086a2b6a69bb6fa";

    fn rsa_pair() -> &'static KeyPair {
        static PAIR: OnceLock<KeyPair> = OnceLock::new();
        PAIR.get_or_init(|| {
            CryptoProfile::REFERENCE
                .generate_keypair(&mut ChaCha8Rng::seed_from_u64(4096))
                .unwrap()
        })
    }

    fn rsa_other() -> &'static KeyPair {
        static PAIR: OnceLock<KeyPair> = OnceLock::new();
        PAIR.get_or_init(|| {
            CryptoProfile::REFERENCE
                .generate_keypair(&mut ChaCha8Rng::seed_from_u64(4097))
                .unwrap()
        })
    }

    fn sym(seed: u8) -> KeyMaterial {
        KeyMaterial::symmetric([seed; 32])
    }

    #[test]
    fn empty_digest_matches_sha3_384() {
        assert_eq!(CryptoProfile::REFERENCE.digest(b"").to_hex(), EMPTY_SHA3_384);
        assert_eq!(CryptoProfile::TEST.digest(b"").to_hex(), EMPTY_SHA3_384);
    }

    #[test]
    fn digest_detects_single_bit_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let len = rng.gen_range(1..128);
            let mut x: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let d = sha3_384(&x);
            assert_eq!(d, sha3_384(&x));
            let bit = rng.gen_range(0..len * 8);
            x[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(d, sha3_384(&x));
        }
    }

    #[test]
    fn test_profile_golden_signature() {
        let secret: [u8; 32] = std::array::from_fn(|i| i as u8);
        let pair = CryptoProfile::test_keypair_from_secret(secret);
        assert_eq!(pair.public.key_id.to_string(), TEST_KEY_ID_GOLDEN);
        let sig = CryptoProfile::TEST.sign(b"fixed test vector", &pair.private).unwrap();
        assert_eq!(hex::encode(&sig.sig_bytes), TEST_SIG_GOLDEN);
        assert_eq!(sig.signer_key_id, pair.public.key_id);
    }

    #[test]
    fn test_profile_is_deterministic() {
        let a = CryptoProfile::TEST.generate_keypair(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = CryptoProfile::TEST.generate_keypair(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.public, b.public);
        let s1 = CryptoProfile::TEST.sign(b"x", &a.private).unwrap();
        let s2 = CryptoProfile::TEST.sign(b"x", &b.private).unwrap();
        assert_eq!(s1, s2);
        let k = sym(3);
        let e1 = CryptoProfile::TEST
            .encapsulate_key(&k, &a.public, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let e2 = CryptoProfile::TEST
            .encapsulate_key(&k, &a.public, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn rsa_sign_verify() {
        let p = CryptoProfile::REFERENCE;
        let pair = rsa_pair();
        let sig = p.sign(b"first-stage bootloader", &pair.private).unwrap();
        assert_eq!(sig.sig_bytes.len(), 512);
        assert!(p.verify(b"first-stage bootloader", &sig, &pair.public).unwrap());
        assert!(!p.verify(b"first-stage bootloadeR", &sig, &pair.public).unwrap());
        assert!(!p.verify(b"first-stage bootloader", &sig, &rsa_other().public).unwrap());
        let mut bad = sig.clone();
        bad.sig_bytes[100] ^= 0x01;
        assert!(!p.verify(b"first-stage bootloader", &bad, &pair.public).unwrap());
    }

    #[test]
    fn rsa_signature_is_deterministic() {
        let p = CryptoProfile::REFERENCE;
        let a = p.sign(b"m", &rsa_pair().private).unwrap();
        let b = p.sign(b"m", &rsa_pair().private).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rsa_encapsulation_roundtrip_and_randomized() {
        let p = CryptoProfile::REFERENCE;
        let k = sym(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b1 = p.encapsulate_key(&k, &rsa_pair().public, &mut rng).unwrap();
        let b2 = p.encapsulate_key(&k, &rsa_pair().public, &mut rng).unwrap();
        assert_ne!(b1, b2);
        assert_eq!(p.decapsulate_key(&b1, &rsa_pair().private).unwrap(), k);
        assert_eq!(p.decapsulate_key(&b2, &rsa_pair().private).unwrap(), k);
        assert_eq!(
            p.decapsulate_key(&b1, &rsa_other().private),
            Err(CryptoError::DecapsulationFailure)
        );
    }

    #[test]
    fn wrong_key_kinds_are_rejected() {
        let pair = CryptoProfile::TEST.generate_keypair(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            CryptoProfile::TEST.sign(b"x", &pair.public),
            Err(CryptoError::WrongKeyKind { .. })
        ));
        let sig = CryptoProfile::TEST.sign(b"x", &pair.private).unwrap();
        assert!(matches!(
            CryptoProfile::TEST.verify(b"x", &sig, &pair.private),
            Err(CryptoError::WrongKeyKind { .. })
        ));
        assert!(matches!(
            aead_encrypt(&pair.private, &[0; 12], b"x", b""),
            Err(CryptoError::WrongKeyKind { .. })
        ));
        assert!(matches!(
            CryptoProfile::TEST.encapsulate_key(&sym(1), &pair.private, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(CryptoError::WrongKeyKind { .. })
        ));
    }

    #[test]
    fn test_profile_decapsulation_with_wrong_key_fails() {
        let p = CryptoProfile::TEST;
        let a = p.generate_keypair(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = p.generate_keypair(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let k = sym(0xAB);
        let blob = p.encapsulate_key(&k, &a.public, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.decapsulate_key(&blob, &a.private).unwrap(), k);
        assert_eq!(p.decapsulate_key(&blob, &b.private), Err(CryptoError::DecapsulationFailure));
        let mut forged = blob.clone();
        *forged.last_mut().unwrap() ^= 1;
        assert_eq!(p.decapsulate_key(&forged, &a.private), Err(CryptoError::DecapsulationFailure));
    }

    #[test]
    fn aead_roundtrip_and_tamper() {
        let k = sym(1);
        let nonce = [7u8; 12];
        let ct = aead_encrypt(&k, &nonce, b"partial bitstream", b"region=1").unwrap();
        assert_eq!(ct.len(), 17 + 16);
        assert_eq!(aead_decrypt(&k, &nonce, &ct, b"region=1").unwrap(), b"partial bitstream");
        let mut bad = ct.clone();
        bad[0] ^= 0x80;
        assert_eq!(aead_decrypt(&k, &nonce, &bad, b"region=1"), Err(CryptoError::AuthFailure));
        assert_eq!(aead_decrypt(&k, &nonce, &ct, b"region=2"), Err(CryptoError::AuthFailure));
        assert_eq!(aead_decrypt(&sym(2), &nonce, &ct, b"region=1"), Err(CryptoError::AuthFailure));
        assert_eq!(aead_decrypt(&k, &nonce, &ct[..10], b""), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn key_id_is_digest_prefix() {
        let k = sym(9);
        assert_eq!(k.key_id.0[..], sha3_384(&k.bytes).0[..8]);
    }

    #[test]
    fn debug_redacts_secrets() {
        let dbg = format!("{:?}", sym(0x42));
        assert!(dbg.contains("redacted"));
        assert!(!dbg.contains("66, 66"));
    }
}
