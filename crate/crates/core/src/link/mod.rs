//! Simulated ground link and inter-world message path.
//!
//! A [`Channel`] carries opaque wire frames and applies a seeded adversary to
//! each one. [`Endpoint`] turns [`ProtocolMessage`]s into wire frames, through
//! an optional pre-shared [`SecurePipe`], and enforces the per-sender
//! sequence rule on receipt. [`UplinkReceiver`] is the satellite side of the
//! ground link.

mod channel;
mod frame;
mod receiver;

pub use channel::{AdversaryConfig, Channel, DeliveryTrace, FrameAction, TraceRecord};
pub use frame::{Endpoint, MessageKind, ProtocolMessage, SecurePipe};
pub(crate) use frame::peek_seq;
pub use receiver::{ReceiveOutcome, UplinkReceiver};

use thiserror::Error;

use crate::platform::{Platform, PlatformError, RegionState};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("channel is closed")]
    ChannelClosed,
    #[error("invalid adversary configuration: {0}")]
    InvalidAdversary(String),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

/// Why a frame was refused before reaching package validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameReject {
    AuthFailure,
    Malformed,
    ReplayedSequence,
}

impl std::fmt::Display for FrameReject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameReject::AuthFailure => "AuthFailure",
            FrameReject::Malformed => "MalformedFrame",
            FrameReject::ReplayedSequence => "ReplayedSequence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub ack_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            ack_timeout_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReliableOutcome {
    Acked { attempts: u32 },
    Nacked { attempts: u32 },
    GaveUp { attempts: u32 },
}

impl ReliableOutcome {
    pub fn attempts(&self) -> u32 {
        match *self {
            ReliableOutcome::Acked { attempts }
            | ReliableOutcome::Nacked { attempts }
            | ReliableOutcome::GaveUp { attempts } => attempts,
        }
    }
}

/// Sends `kind`/`body` from `sender` until an acknowledgment comes back on
/// `downlink` or the retries are exhausted. Each attempt carries a fresh
/// `msg_seq`. `responder` is the far side: it consumes an uplink frame at the
/// given time and may return a reply frame for the downlink. `clock` is
/// advanced to the time the exchange ends.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn transmit_reliable(
    uplink: &mut Channel,
    downlink: &mut Channel,
    sender: &mut Endpoint,
    kind: MessageKind,
    body: &[u8],
    policy: RetryPolicy,
    clock: &mut u64,
    responder: &mut dyn FnMut(&[u8], u64) -> Option<Vec<u8>>,
) -> Result<ReliableOutcome, LinkError> {
    let mut ours = Vec::new();
    for attempt in 1..=policy.max_retries + 1 {
        let (msg, wire) = sender.seal(kind, body, *clock);
        ours.push(msg.msg_seq);
        uplink.transmit_frame(msg.msg_seq, wire, *clock)?;
        let deadline = *clock + policy.ack_timeout_ms;
        loop {
            let next = match (uplink.next_due(), downlink.next_due()) {
                (Some(a), Some(b)) => a.min(b),
                (a, b) => match a.or(b) {
                    Some(t) => t,
                    None => break,
                },
            };
            if next > deadline {
                break;
            }
            *clock = (*clock).max(next);
            for frame in uplink.poll(*clock) {
                if let Some(reply) = responder(&frame, *clock) {
                    let seq = frame::peek_seq(&reply).unwrap_or(0);
                    downlink.transmit_frame(seq, reply, *clock)?;
                }
            }
            for frame in downlink.poll(*clock) {
                let Ok(reply) = sender.open(&frame) else { continue };
                let Some(acked) = reply.acked_seq() else { continue };
                if !ours.contains(&acked) {
                    continue;
                }
                match reply.kind {
                    MessageKind::Ack => return Ok(ReliableOutcome::Acked { attempts: attempt }),
                    MessageKind::Nack => return Ok(ReliableOutcome::Nacked { attempts: attempt }),
                    _ => {}
                }
            }
        }
        *clock = deadline;
    }
    Ok(ReliableOutcome::GaveUp {
        attempts: policy.max_retries + 1,
    })
}

/// Flips one bit of an active region's configuration image.
pub fn inject_seu(platform: &mut Platform, region_id: u8, bit_index: u64) -> Result<(), PlatformError> {
    let region = platform.region_mut(region_id)?;
    if region.state() != RegionState::Active {
        return Err(PlatformError::RegionNotActive(region_id));
    }
    let len = region.config_image.len();
    let byte = (bit_index / 8) as usize;
    if byte >= len {
        return Err(PlatformError::BitOutOfRange { bit: bit_index, len });
    }
    region.config_image[byte] ^= 1 << (bit_index % 8);
    platform.append_event("environment", "seu_inject", "ok", format!("region={region_id} bit={bit_index}"));
    Ok(())
}
