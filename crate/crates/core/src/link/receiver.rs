use std::collections::BTreeMap;

use super::frame::{Endpoint, MessageKind, ProtocolMessage};
use super::FrameReject;
use crate::crypto::Digest;
use crate::package::{validate_package, PayloadKind, UpdatePackage, ValidationContext, ValidationReport};
use crate::platform::{Platform, WorldContext};

const ACTOR: &str = "uplink";

#[derive(Debug, Clone)]
pub enum ReceiveOutcome {
    /// Refused at the link layer; no reply is sent.
    FrameRejected(FrameReject),
    Command(ProtocolMessage),
    Accepted {
        package: UpdatePackage,
        plaintext: Vec<u8>,
        report: ValidationReport,
    },
    Rejected(ValidationReport),
    /// The package could not be parsed.
    Malformed,
    /// A retransmission of a package that was already accepted.
    Reacknowledged { sequence_number: u64 },
    /// Acks, probes and other traffic that needs no action.
    Ignored(MessageKind),
}

impl ReceiveOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, ReceiveOutcome::Accepted { .. } | ReceiveOutcome::Command(_))
    }
}

/// Satellite side of the ground link.
#[derive(Debug, Clone)]
pub struct UplinkReceiver {
    endpoint: Endpoint,
    accepted: BTreeMap<u64, Digest>,
}

impl UplinkReceiver {
    pub fn new(endpoint: Endpoint) -> Self {
        UplinkReceiver {
            endpoint,
            accepted: BTreeMap::new(),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Processes one wire frame against the platform and returns the outcome
    /// together with the reply frame, if any. Every refusal is logged once.
    pub fn receive(&mut self, platform: &mut Platform, wire: &[u8]) -> (ReceiveOutcome, Option<Vec<u8>>) {
        let msg = match self.endpoint.open(wire) {
            Ok(m) => m,
            Err(reason) => {
                let seq = super::frame::peek_seq(wire).unwrap_or(0);
                platform.append_event(ACTOR, "frame_receive", "reject", format!("msg_seq={seq} reason={reason}"));
                return (ReceiveOutcome::FrameRejected(reason), None);
            }
        };
        let now = platform.now_ms();
        match msg.kind {
            MessageKind::Command => {
                platform.append_event(
                    ACTOR,
                    "command",
                    "accept",
                    format!("msg_seq={} body_len={}", msg.msg_seq, msg.body.len()),
                );
                let reply = self.reply(MessageKind::Ack, msg.msg_seq, now);
                (ReceiveOutcome::Command(msg), Some(reply))
            }
            MessageKind::PackageTransfer => {
                let outcome = self.receive_package(platform, &msg);
                let kind = match outcome {
                    ReceiveOutcome::Accepted { .. } | ReceiveOutcome::Reacknowledged { .. } => MessageKind::Ack,
                    _ => MessageKind::Nack,
                };
                let reply = self.reply(kind, msg.msg_seq, now);
                (outcome, Some(reply))
            }
            other => (ReceiveOutcome::Ignored(other), None),
        }
    }

    fn reply(&mut self, kind: MessageKind, acked: u64, now: u64) -> Vec<u8> {
        self.endpoint.seal(kind, &acked.to_le_bytes(), now).1
    }

    fn receive_package(&mut self, platform: &mut Platform, msg: &ProtocolMessage) -> ReceiveOutcome {
        let pkg = match UpdatePackage::parse(&msg.body) {
            Ok(p) => p,
            Err(e) => {
                platform.append_event(
                    ACTOR,
                    "package_validate",
                    "reject",
                    format!("msg_seq={} failures=Malformed ({e})", msg.msg_seq),
                );
                return ReceiveOutcome::Malformed;
            }
        };
        let h = &pkg.header;
        if self.accepted.get(&h.sequence_number) == Some(&h.plaintext_digest) {
            platform.append_event(
                ACTOR,
                "package_reack",
                "ok",
                format!("msg_seq={} pkg_seq={}", msg.msg_seq, h.sequence_number),
            );
            return ReceiveOutcome::Reacknowledged {
                sequence_number: h.sequence_number,
            };
        }

        let validation = {
            let secure = WorldContext::secure(ACTOR);
            let device_key = platform.keystore().device_key(&secure).ok().cloned();
            let stored = match h.payload_kind {
                PayloadKind::FirmwareStage => platform.firmware_floor(),
                kind => platform.version_floor(kind, h.target_region_id),
            };
            let ctx = ValidationContext::new(platform.profile(), platform, device_key.as_ref(), platform, platform.now_ms())
                .stored_version(Some(stored))
                .last_sequence(platform.last_update_sequence())
                .freshness_window(Some(platform.freshness_window_ms()));
            validate_package(&pkg, &ctx)
        };
        let report = validation.report;
        let detail = format!(
            "msg_seq={} pkg_seq={} kind={:?} version={} region={}",
            msg.msg_seq, h.sequence_number, h.payload_kind, h.package_version, h.target_region_id
        );
        match validation.plaintext {
            Some(plaintext) if report.is_accepted() => {
                platform.commit_sequence(h.sequence_number);
                if h.payload_kind != PayloadKind::FirmwareStage {
                    platform.commit_version(h.payload_kind, h.target_region_id, h.package_version);
                }
                self.accepted.insert(h.sequence_number, h.plaintext_digest);
                platform.append_event(ACTOR, "package_validate", "accept", detail);
                ReceiveOutcome::Accepted {
                    package: pkg,
                    plaintext,
                    report,
                }
            }
            _ => {
                platform.append_event(
                    ACTOR,
                    "package_validate",
                    "reject",
                    format!("{detail} failures={}", report.failure_list()),
                );
                ReceiveOutcome::Rejected(report)
            }
        }
    }
}
