use serde::{Deserialize, Serialize};

use super::{FrameReject, LinkError};
use crate::crypto::{aead_decrypt, aead_encrypt, KeyMaterial, NONCE_LEN};

const LINK_AAD: &[u8] = b"aegis-link/v1";
const FRAME_HEADER_LEN: usize = 8 + 8 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MessageKind {
    Command = 0,
    PackageTransfer = 1,
    Ack = 2,
    Nack = 3,
    Probe = 4,
}

impl MessageKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MessageKind::Command,
            1 => MessageKind::PackageTransfer,
            2 => MessageKind::Ack,
            3 => MessageKind::Nack,
            4 => MessageKind::Probe,
            _ => return None,
        })
    }
}

/// Wire layout: `msg_seq u64 ‖ sent_ms u64 ‖ kind u8 ‖ body_len u32 ‖ body`,
/// little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub msg_seq: u64,
    pub sent_ms: u64,
    pub kind: MessageKind,
    pub body: Vec<u8>,
}

impl ProtocolMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.msg_seq.to_le_bytes());
        out.extend_from_slice(&self.sent_ms.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, LinkError> {
        if b.len() < FRAME_HEADER_LEN {
            return Err(LinkError::Malformed("short frame"));
        }
        let kind = MessageKind::from_u8(b[16]).ok_or(LinkError::Malformed("unknown message kind"))?;
        let len = u32::from_le_bytes(b[17..21].try_into().unwrap()) as usize;
        if b.len() != FRAME_HEADER_LEN + len {
            return Err(LinkError::Malformed("body length mismatch"));
        }
        Ok(ProtocolMessage {
            msg_seq: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            sent_ms: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            kind,
            body: b[FRAME_HEADER_LEN..].to_vec(),
        })
    }

    /// For `Ack`/`Nack`: the acknowledged `msg_seq` in the first 8 body bytes.
    pub fn acked_seq(&self) -> Option<u64> {
        match self.kind {
            MessageKind::Ack | MessageKind::Nack if self.body.len() >= 8 => {
                Some(u64::from_le_bytes(self.body[..8].try_into().unwrap()))
            }
            _ => None,
        }
    }
}

/// First 8 bytes of any wire frame (sealed or not) are the sender's
/// `msg_seq`.
pub(crate) fn peek_seq(wire: &[u8]) -> Option<u64> {
    wire.get(..8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// Pre-established channel-layer encryption. Each direction uses its own
/// nonce space so the shared key is never used twice with one nonce.
#[derive(Debug, Clone)]
pub struct SecurePipe {
    key: KeyMaterial,
}

impl SecurePipe {
    pub fn new(key: KeyMaterial) -> Self {
        SecurePipe { key }
    }

    fn nonce(direction: u8, seq: u64) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[0] = direction;
        n[4..].copy_from_slice(&seq.to_le_bytes());
        n
    }

    fn seal(&self, direction: u8, frame: &[u8], seq: u64) -> Vec<u8> {
        let ct = aead_encrypt(&self.key, &Self::nonce(direction, seq), frame, LINK_AAD)
            .expect("pipe key is symmetric by construction");
        let mut out = seq.to_le_bytes().to_vec();
        out.extend_from_slice(&ct);
        out
    }

    fn open(&self, direction: u8, wire: &[u8]) -> Option<Vec<u8>> {
        let seq = peek_seq(wire)?;
        aead_decrypt(&self.key, &Self::nonce(direction, seq), &wire[8..], LINK_AAD).ok()
    }
}

/// One side of a link: numbers outgoing messages and checks incoming ones.
#[derive(Debug, Clone)]
pub struct Endpoint {
    next_seq: u64,
    last_rx_seq: Option<u64>,
    pipe: Option<SecurePipe>,
    tx_direction: u8,
}

impl Endpoint {
    /// `tx_direction` must differ between the two ends of a link.
    pub fn new(tx_direction: u8, pipe: Option<SecurePipe>) -> Self {
        Endpoint {
            next_seq: 1,
            last_rx_seq: None,
            pipe,
            tx_direction,
        }
    }

    pub fn ground(pipe: Option<SecurePipe>) -> Self {
        Self::new(0, pipe)
    }

    pub fn satellite(pipe: Option<SecurePipe>) -> Self {
        Self::new(1, pipe)
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn last_rx_seq(&self) -> Option<u64> {
        self.last_rx_seq
    }

    pub fn seal(&mut self, kind: MessageKind, body: &[u8], now_ms: u64) -> (ProtocolMessage, Vec<u8>) {
        let msg = ProtocolMessage {
            msg_seq: self.next_seq,
            sent_ms: now_ms,
            kind,
            body: body.to_vec(),
        };
        self.next_seq += 1;
        let frame = msg.encode();
        let wire = match &self.pipe {
            Some(p) => p.seal(self.tx_direction, &frame, msg.msg_seq),
            None => frame,
        };
        (msg, wire)
    }

    /// Decrypts (if piped), decodes and applies the strictly-increasing
    /// sequence rule. A rejected frame does not advance the receive counter.
    pub fn open(&mut self, wire: &[u8]) -> Result<ProtocolMessage, FrameReject> {
        let frame = match &self.pipe {
            Some(p) => p.open(self.tx_direction ^ 1, wire).ok_or(FrameReject::AuthFailure)?,
            None => wire.to_vec(),
        };
        let msg = ProtocolMessage::decode(&frame).map_err(|_| FrameReject::Malformed)?;
        if self.pipe.is_some() && peek_seq(wire) != Some(msg.msg_seq) {
            return Err(FrameReject::Malformed);
        }
        if self.last_rx_seq.is_some_and(|last| msg.msg_seq <= last) {
            return Err(FrameReject::ReplayedSequence);
        }
        self.last_rx_seq = Some(msg.msg_seq);
        Ok(msg)
    }
}
