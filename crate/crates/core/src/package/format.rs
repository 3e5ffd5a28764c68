//! Bit-exact update-package container.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "AEGISPKG"
//!      8     2  format_version (=1)
//!     10     4  package_version
//!     14     1  payload_kind
//!     15     1  target_region_id (0xFF = none)
//!     16     8  sequence_number
//!     24     8  timestamp_ms
//!     32     4  payload_len
//!     36    12  nonce
//!     48    48  plaintext_digest (SHA3-384)
//!     96     4  plaintext_crc (CRC-32)
//!    100     .  ciphertext (payload_len + 16)
//!      .     8  signer_key_id
//!      .     2  sig_len
//!      .     .  sig_bytes
//! ```
//!
//! All integers are little-endian. The header bytes are the AEAD associated
//! data, and the signature covers `header ‖ ciphertext`.

use serde::{Deserialize, Serialize};

use super::PackageError;
use crate::crypto::{
    aead_encrypt, crc32, CryptoProfile, Digest, KeyId, KeyMaterial, Signature, DIGEST_LEN, KEY_ID_LEN, NONCE_LEN,
    TAG_LEN,
};

pub const MAGIC: [u8; 8] = *b"AEGISPKG";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 100;
pub const MAX_PAYLOAD_LEN: usize = 16 * 1024 * 1024;
/// `target_region_id` for payloads that are not bound to a vFPGA region.
pub const NO_REGION: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PayloadKind {
    PartialBitstream = 0,
    AiModel = 1,
    FirmwareStage = 2,
}

impl PayloadKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::PartialBitstream),
            1 => Some(Self::AiModel),
            2 => Some(Self::FirmwareStage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageHeader {
    pub magic: [u8; 8],
    pub format_version: u16,
    pub package_version: u32,
    pub payload_kind: PayloadKind,
    pub target_region_id: u8,
    pub sequence_number: u64,
    pub timestamp_ms: u64,
    pub payload_len: u32,
    pub nonce: [u8; NONCE_LEN],
    pub plaintext_digest: Digest,
    pub plaintext_crc: u32,
}

/// Caller-supplied header fields; the rest are derived from the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageMeta {
    pub package_version: u32,
    pub payload_kind: PayloadKind,
    pub target_region_id: u8,
    pub sequence_number: u64,
    pub timestamp_ms: u64,
    /// Derived from the header fields and payload digest when absent.
    pub nonce: Option<[u8; NONCE_LEN]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatePackage {
    pub header: PackageHeader,
    pub ciphertext: Vec<u8>,
    pub signature: Signature,
}

impl PackageHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..8].copy_from_slice(&self.magic);
        b[8..10].copy_from_slice(&self.format_version.to_le_bytes());
        b[10..14].copy_from_slice(&self.package_version.to_le_bytes());
        b[14] = self.payload_kind as u8;
        b[15] = self.target_region_id;
        b[16..24].copy_from_slice(&self.sequence_number.to_le_bytes());
        b[24..32].copy_from_slice(&self.timestamp_ms.to_le_bytes());
        b[32..36].copy_from_slice(&self.payload_len.to_le_bytes());
        b[36..48].copy_from_slice(&self.nonce);
        b[48..96].copy_from_slice(&self.plaintext_digest.0);
        b[96..100].copy_from_slice(&self.plaintext_crc.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self, PackageError> {
        if b.len() < HEADER_LEN {
            return Err(PackageError::Malformed("truncated header"));
        }
        let magic: [u8; 8] = b[0..8].try_into().unwrap();
        if magic != MAGIC {
            return Err(PackageError::Malformed("bad magic"));
        }
        let payload_kind = PayloadKind::from_u8(b[14]).ok_or(PackageError::Malformed("unknown payload kind"))?;
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(&b[48..96]);
        Ok(PackageHeader {
            magic,
            format_version: u16::from_le_bytes([b[8], b[9]]),
            package_version: u32::from_le_bytes(b[10..14].try_into().unwrap()),
            payload_kind,
            target_region_id: b[15],
            sequence_number: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            timestamp_ms: u64::from_le_bytes(b[24..32].try_into().unwrap()),
            payload_len: u32::from_le_bytes(b[32..36].try_into().unwrap()),
            nonce: b[36..48].try_into().unwrap(),
            plaintext_digest: Digest(digest),
            plaintext_crc: u32::from_le_bytes(b[96..100].try_into().unwrap()),
        })
    }

    /// Header for `payload` with all derived fields filled in.
    pub fn for_payload(profile: &CryptoProfile, payload: &[u8], meta: &PackageMeta) -> Result<Self, PackageError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(PackageError::PayloadTooLarge(payload.len()));
        }
        let plaintext_digest = profile.digest(payload);
        let nonce = meta.nonce.unwrap_or_else(|| derive_nonce(profile, meta, &plaintext_digest));
        Ok(PackageHeader {
            magic: MAGIC,
            format_version: FORMAT_VERSION,
            package_version: meta.package_version,
            payload_kind: meta.payload_kind,
            target_region_id: meta.target_region_id,
            sequence_number: meta.sequence_number,
            timestamp_ms: meta.timestamp_ms,
            payload_len: payload.len() as u32,
            nonce,
            plaintext_digest,
            plaintext_crc: crc32(payload),
        })
    }
}

/// Synthetic nonce: distinct (meta, payload) pairs get distinct nonces and
/// identical inputs reproduce identical packages.
fn derive_nonce(profile: &CryptoProfile, meta: &PackageMeta, digest: &Digest) -> [u8; NONCE_LEN] {
    let mut buf = Vec::with_capacity(32 + DIGEST_LEN);
    buf.extend_from_slice(b"aegis-nonce/v1");
    buf.extend_from_slice(&meta.package_version.to_le_bytes());
    buf.push(meta.payload_kind as u8);
    buf.push(meta.target_region_id);
    buf.extend_from_slice(&meta.sequence_number.to_le_bytes());
    buf.extend_from_slice(&meta.timestamp_ms.to_le_bytes());
    buf.extend_from_slice(&digest.0);
    let d = profile.digest(&buf);
    d.0[..NONCE_LEN].try_into().unwrap()
}

impl UpdatePackage {
    /// Encrypts `payload` under `key` with the header as associated data and
    /// signs `header ‖ ciphertext`. The header is used as given, which lets
    /// tests and fault scenarios produce validly signed but inconsistent
    /// packages.
    pub fn seal(
        profile: &CryptoProfile,
        header: PackageHeader,
        payload: &[u8],
        key: &KeyMaterial,
        signer: &KeyMaterial,
    ) -> Result<Self, PackageError> {
        let aad = header.to_bytes();
        let ciphertext = aead_encrypt(key, &header.nonce, payload, &aad)?;
        let signature = profile.sign(&signed_bytes(&aad, &ciphertext), signer)?;
        Ok(UpdatePackage {
            header,
            ciphertext,
            signature,
        })
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.ciphertext.len() + KEY_ID_LEN + 2 + self.signature.sig_bytes.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.signature.signer_key_id.0);
        out.extend_from_slice(&(self.signature.sig_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.signature.sig_bytes);
        out
    }

    /// Structural parse only; no cryptographic checks.
    pub fn parse(bytes: &[u8]) -> Result<Self, PackageError> {
        let header = PackageHeader::from_bytes(bytes)?;
        let payload_len = header.payload_len as usize;
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(PackageError::Malformed("payload length exceeds cap"));
        }
        let ct_end = HEADER_LEN + payload_len + TAG_LEN;
        let trailer_end = ct_end + KEY_ID_LEN + 2;
        if bytes.len() < trailer_end {
            return Err(PackageError::Malformed("truncated ciphertext or trailer"));
        }
        let ciphertext = bytes[HEADER_LEN..ct_end].to_vec();
        let signer_key_id = KeyId(bytes[ct_end..ct_end + KEY_ID_LEN].try_into().unwrap());
        let sig_len = u16::from_le_bytes([bytes[trailer_end - 2], bytes[trailer_end - 1]]) as usize;
        if bytes.len() != trailer_end + sig_len {
            return Err(PackageError::Malformed("signature length inconsistent with input"));
        }
        Ok(UpdatePackage {
            header,
            ciphertext,
            signature: Signature {
                signer_key_id,
                sig_bytes: bytes[trailer_end..].to_vec(),
            },
        })
    }

    /// The byte string covered by the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_bytes(&self.header.to_bytes(), &self.ciphertext)
    }
}

fn signed_bytes(header: &[u8], ciphertext: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(header.len() + ciphertext.len());
    v.extend_from_slice(header);
    v.extend_from_slice(ciphertext);
    v
}

/// Builds, encrypts and signs an update package.
pub fn build_package(
    profile: &CryptoProfile,
    payload: &[u8],
    meta: &PackageMeta,
    key: &KeyMaterial,
    signer: &KeyMaterial,
) -> Result<UpdatePackage, PackageError> {
    let header = PackageHeader::for_payload(profile, payload, meta)?;
    UpdatePackage::seal(profile, header, payload, key, signer)
}
