use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::ProtocolMessage;
use super::LinkError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    pub tamper_prob: f64,
    pub delay_range_ms: (u64, u64),
    pub seu_bitflip_prob_per_frame: f64,
    pub rng_seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            tamper_prob: 0.0,
            delay_range_ms: (0, 0),
            seu_bitflip_prob_per_frame: 0.0,
            rng_seed: 0,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        for (name, p) in [
            ("drop_prob", self.drop_prob),
            ("duplicate_prob", self.duplicate_prob),
            ("tamper_prob", self.tamper_prob),
            ("seu_bitflip_prob_per_frame", self.seu_bitflip_prob_per_frame),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(LinkError::InvalidAdversary(format!("{name}={p} outside [0,1]")));
            }
        }
        if self.delay_range_ms.0 > self.delay_range_ms.1 {
            return Err(LinkError::InvalidAdversary("delay_range_ms min > max".into()));
        }
        Ok(())
    }

    /// The adversary that changes nothing.
    pub fn is_null(&self) -> bool {
        self.drop_prob == 0.0
            && self.duplicate_prob == 0.0
            && self.tamper_prob == 0.0
            && self.delay_range_ms.1 == 0
            && self.seu_bitflip_prob_per_frame == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "value")]
pub enum FrameAction {
    Delivered,
    Dropped,
    Duplicated,
    Tampered(usize),
    Delayed(u64),
    Bitflipped(u64),
}

impl FrameAction {
    fn name(&self) -> &'static str {
        match self {
            FrameAction::Delivered => "delivered",
            FrameAction::Dropped => "dropped",
            FrameAction::Duplicated => "duplicated",
            FrameAction::Tampered(_) => "tampered",
            FrameAction::Delayed(_) => "delayed",
            FrameAction::Bitflipped(_) => "bitflipped",
        }
    }

    fn detail(&self) -> String {
        match self {
            FrameAction::Tampered(i) => format!("byte={i}"),
            FrameAction::Delayed(ms) => format!("ms={ms}"),
            FrameAction::Bitflipped(b) => format!("bit={b}"),
            _ => String::new(),
        }
    }
}

/// Exported as `{"seq","time_ms","channel","original_seq","action","detail"}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ms: u64,
    pub original_seq: u64,
    pub action: FrameAction,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    seq: u64,
    time_ms: u64,
    channel: &'a str,
    original_seq: u64,
    action: &'a str,
    detail: String,
}

/// Per-frame adversary decisions. Every transmitted frame gets exactly one
/// fate record (`Delivered`, `Dropped` or `Duplicated`), preceded by any
/// modification records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeliveryTrace {
    pub records: Vec<TraceRecord>,
}

impl DeliveryTrace {
    pub fn count(&self, pred: impl Fn(&FrameAction) -> bool) -> usize {
        self.records.iter().filter(|r| pred(&r.action)).count()
    }

    pub fn delivered(&self) -> usize {
        self.count(|a| *a == FrameAction::Delivered)
    }

    pub fn dropped(&self) -> usize {
        self.count(|a| *a == FrameAction::Dropped)
    }

    pub fn duplicated(&self) -> usize {
        self.count(|a| *a == FrameAction::Duplicated)
    }

    pub fn tampered(&self) -> usize {
        self.count(|a| matches!(a, FrameAction::Tampered(_)))
    }

    pub fn write_jsonl<W: Write>(&self, channel: &str, first_seq: u64, mut w: W) -> io::Result<u64> {
        let mut seq = first_seq;
        for r in &self.records {
            let line = TraceLine {
                seq,
                time_ms: r.time_ms,
                channel,
                original_seq: r.original_seq,
                action: r.action.name(),
                detail: r.action.detail(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
            seq += 1;
        }
        Ok(seq)
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    due_ms: u64,
    order: u64,
    wire: Vec<u8>,
}

/// A one-way lossy channel with a seeded adversary and a delivery queue.
#[derive(Debug, Clone)]
pub struct Channel {
    name: String,
    adversary: AdversaryConfig,
    rng: ChaCha8Rng,
    open: bool,
    queue: Vec<InFlight>,
    next_order: u64,
    trace: DeliveryTrace,
    captured: Vec<Vec<u8>>,
    sent: u64,
}

impl Channel {
    pub fn new(name: impl Into<String>, adversary: AdversaryConfig) -> Result<Self, LinkError> {
        adversary.validate()?;
        Ok(Channel {
            name: name.into(),
            rng: ChaCha8Rng::seed_from_u64(adversary.rng_seed),
            adversary,
            open: true,
            queue: Vec::new(),
            next_order: 0,
            trace: DeliveryTrace::default(),
            captured: Vec::new(),
            sent: 0,
        })
    }

    pub fn null(name: impl Into<String>) -> Self {
        Self::new(name, AdversaryConfig::default()).expect("null adversary is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Replaces the adversary (and its random stream) for subsequent frames.
    pub fn configure_adversary(&mut self, cfg: AdversaryConfig) -> Result<(), LinkError> {
        cfg.validate()?;
        self.rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        self.adversary = cfg;
        Ok(())
    }

    pub fn adversary(&self) -> &AdversaryConfig {
        &self.adversary
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn trace(&self) -> &DeliveryTrace {
        &self.trace
    }

    /// Every frame as it entered the channel, before adversary action.
    pub fn captured(&self) -> &[Vec<u8>] {
        &self.captured
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn transmit(&mut self, msg: &ProtocolMessage, now_ms: u64) -> Result<(), LinkError> {
        self.transmit_frame(msg.msg_seq, msg.encode(), now_ms)
    }

    pub fn transmit_frame(&mut self, original_seq: u64, mut wire: Vec<u8>, now_ms: u64) -> Result<(), LinkError> {
        if !self.open {
            return Err(LinkError::ChannelClosed);
        }
        self.sent += 1;
        self.captured.push(wire.clone());
        let adv = self.adversary.clone();
        let rec = |action| TraceRecord {
            time_ms: now_ms,
            original_seq,
            action,
        };

        if adv.drop_prob > 0.0 && self.rng.gen_bool(adv.drop_prob) {
            self.trace.records.push(rec(FrameAction::Dropped));
            return Ok(());
        }
        if !wire.is_empty() && adv.tamper_prob > 0.0 && self.rng.gen_bool(adv.tamper_prob) {
            let i = self.rng.gen_range(0..wire.len());
            wire[i] ^= self.rng.gen_range(1..=255u8);
            self.trace.records.push(rec(FrameAction::Tampered(i)));
        }
        if !wire.is_empty() && adv.seu_bitflip_prob_per_frame > 0.0 && self.rng.gen_bool(adv.seu_bitflip_prob_per_frame) {
            let bit = self.rng.gen_range(0..wire.len() as u64 * 8);
            wire[(bit / 8) as usize] ^= 1 << (bit % 8);
            self.trace.records.push(rec(FrameAction::Bitflipped(bit)));
        }
        let (lo, hi) = adv.delay_range_ms;
        let delay = if hi > 0 { self.rng.gen_range(lo..=hi) } else { 0 };
        if delay > 0 {
            self.trace.records.push(rec(FrameAction::Delayed(delay)));
        }
        let copies = if adv.duplicate_prob > 0.0 && self.rng.gen_bool(adv.duplicate_prob) {
            self.trace.records.push(rec(FrameAction::Duplicated));
            2
        } else {
            self.trace.records.push(rec(FrameAction::Delivered));
            1
        };
        for _ in 0..copies {
            self.queue.push(InFlight {
                due_ms: now_ms + delay,
                order: self.next_order,
                wire: wire.clone(),
            });
            self.next_order += 1;
        }
        Ok(())
    }

    pub fn next_due(&self) -> Option<u64> {
        self.queue.iter().map(|f| f.due_ms).min()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Frames due at or before `now_ms`, in (due time, send order).
    pub fn poll(&mut self, now_ms: u64) -> Vec<Vec<u8>> {
        let (mut ready, rest): (Vec<_>, Vec<_>) = self.queue.drain(..).partition(|f| f.due_ms <= now_ms);
        self.queue = rest;
        ready.sort_by_key(|f| (f.due_ms, f.order));
        ready.into_iter().map(|f| f.wire).collect()
    }

    /// Everything still queued, regardless of due time.
    pub fn drain_all(&mut self) -> Vec<Vec<u8>> {
        self.poll(u64::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::MessageKind;

    fn msg(seq: u64) -> ProtocolMessage {
        ProtocolMessage {
            msg_seq: seq,
            sent_ms: 0,
            kind: MessageKind::Probe,
            body: vec![0xAB; 32],
        }
    }

    fn run(cfg: AdversaryConfig, n: u64) -> Channel {
        let mut ch = Channel::new("t", cfg).unwrap();
        for s in 1..=n {
            ch.transmit(&msg(s), s).unwrap();
        }
        ch
    }

    #[test]
    fn null_adversary_delivers_unmodified() {
        let mut ch = run(AdversaryConfig::default(), 50);
        let out = ch.drain_all();
        assert_eq!(out.len(), 50);
        for (i, w) in out.iter().enumerate() {
            assert_eq!(w, &msg(i as u64 + 1).encode());
        }
        assert_eq!(ch.trace().delivered(), 50);
    }

    #[test]
    fn duplicate_everything() {
        let cfg = AdversaryConfig {
            duplicate_prob: 1.0,
            ..Default::default()
        };
        let mut ch = run(cfg, 10);
        assert_eq!(ch.drain_all().len(), 20);
        assert_eq!(ch.trace().duplicated(), 10);
    }

    #[test]
    fn conservation_and_determinism() {
        let cfg = AdversaryConfig {
            drop_prob: 0.3,
            duplicate_prob: 0.2,
            tamper_prob: 0.1,
            delay_range_ms: (0, 40),
            seu_bitflip_prob_per_frame: 0.05,
            rng_seed: 77,
        };
        let a = run(cfg.clone(), 500);
        let b = run(cfg.clone(), 500);
        assert_eq!(a.trace(), b.trace());
        let t = a.trace();
        assert_eq!(t.delivered() + t.dropped() + t.duplicated(), 500);
        assert_eq!(a.pending(), t.delivered() + 2 * t.duplicated());

        let c = run(AdversaryConfig { rng_seed: 78, ..cfg }, 500);
        assert_ne!(a.trace(), c.trace());
    }

    #[test]
    fn delayed_frames_arrive_in_due_order() {
        let cfg = AdversaryConfig {
            delay_range_ms: (1, 100),
            rng_seed: 3,
            ..Default::default()
        };
        let mut ch = run(cfg, 20);
        let mut last = 0;
        let mut got = 0;
        for t in 0..=200 {
            let frames = ch.poll(t);
            if !frames.is_empty() {
                assert!(t >= last);
                last = t;
            }
            got += frames.len();
        }
        assert_eq!(got, 20);
    }

    #[test]
    fn invalid_config_rejected_and_closed_channel_errors() {
        let bad = AdversaryConfig {
            drop_prob: 1.5,
            ..Default::default()
        };
        assert!(Channel::new("x", bad).is_err());
        let mut ch = Channel::null("x");
        ch.close();
        assert_eq!(ch.transmit(&msg(1), 0), Err(LinkError::ChannelClosed));
    }

    #[test]
    fn configure_then_read_back() {
        let mut ch = Channel::null("x");
        let cfg = AdversaryConfig {
            tamper_prob: 0.5,
            rng_seed: 11,
            ..Default::default()
        };
        ch.configure_adversary(cfg.clone()).unwrap();
        assert_eq!(ch.adversary(), &cfg);
        assert!(AdversaryConfig::default().is_null());
    }
}
