use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Ratio;

use super::wire::{MsgType, WireMessage, HEADER_LEN};
use super::ProtocolError;
use crate::commodel::comm_parastep;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counter {
    pub messages: u64,
    pub payload_bytes: u64,
    pub total_bytes: u64,
}

impl Counter {
    fn add(&mut self, other: &Counter) {
        self.messages += other.messages;
        self.payload_bytes += other.payload_bytes;
        self.total_bytes += other.total_bytes;
    }
}

/// Sent-message accounting, keyed by `(step, msg_type)`.
///
/// Each worker ledgers only what it sends; a broadcast is `p - 1`
/// point-to-point sends. Header bytes appear only in `total_bytes`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: BTreeMap<(u32, MsgType), Counter>,
    running: Counter,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, m: &WireMessage) {
        let payload = 8 * m.payload.len() as u64;
        let c = Counter {
            messages: 1,
            payload_bytes: payload,
            total_bytes: payload + HEADER_LEN as u64,
        };
        self.entries.entry((m.step, m.msg_type)).or_default().add(&c);
        self.running.add(&c);
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (k, c) in &other.entries {
            self.entries.entry(*k).or_default().add(c);
        }
        self.running.add(&other.running);
    }

    pub fn merged<'a>(ledgers: impl IntoIterator<Item = &'a CommLedger>) -> CommLedger {
        let mut out = CommLedger::new();
        for l in ledgers {
            out.merge(l);
        }
        out
    }

    pub fn totals(&self) -> Counter {
        self.running
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_type(&self, t: MsgType) -> Counter {
        let mut c = Counter::default();
        for (_, e) in self.entries.iter().filter(|((_, ty), _)| *ty == t) {
            c.add(e);
        }
        c
    }

    pub fn at(&self, step: u32, t: MsgType) -> Counter {
        self.entries.get(&(step, t)).copied().unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, MsgType, Counter)> + '_ {
        self.entries.iter().map(|(&(s, t), &c)| (s, t, c))
    }

    /// Payload-bearing traffic summed per cycle of `layout`; entry `c` covers
    /// cycle `c`, including a truncated final cycle.
    pub fn per_cycle(&self, layout: &CycleLayout) -> Vec<Counter> {
        let mut out = vec![Counter::default(); layout.cycle_count()];
        for (step, ty, c) in self.entries() {
            if matches!(ty, MsgType::Noise | MsgType::SampleBcast) {
                if let Some(cycle) = layout.cycle_of(step as usize) {
                    out[cycle].add(&c);
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,msg_type,count,payload_bytes,total_bytes\n");
        for (s, t, c) in self.entries() {
            let _ = writeln!(out, "{s},{t},{},{},{}", c.messages, c.payload_bytes, c.total_bytes);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<CommLedger, ProtocolError> {
        let bad = |n: usize, why: &str| ProtocolError::Config(format!("ledger CSV line {n}: {why}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "step,msg_type,count,payload_bytes,total_bytes" => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut ledger = CommLedger::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(i + 1, "bad integer"));
            let ty = MsgType::from_name(f[1].trim()).ok_or_else(|| bad(i + 1, "unknown msg_type"))?;
            let step = u32::try_from(num(f[0])?).map_err(|_| bad(i + 1, "step out of range"))?;
            let c = Counter {
                messages: num(f[2])?,
                payload_bytes: num(f[3])?,
                total_bytes: num(f[4])?,
            };
            ledger.entries.entry((step, ty)).or_default().add(&c);
            ledger.running.add(&c);
        }
        Ok(ledger)
    }
}

/// Shape of a run's post-warm-up round schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleLayout {
    pub steps: usize,
    pub warmup: usize,
    pub degree: usize,
    pub data_dim: usize,
}

impl CycleLayout {
    pub fn full_cycles(&self) -> usize {
        (self.steps - self.warmup) / self.degree
    }

    pub fn remainder(&self) -> usize {
        (self.steps - self.warmup) % self.degree
    }

    pub fn cycle_count(&self) -> usize {
        self.full_cycles() + usize::from(self.remainder() > 0)
    }

    /// Message size `M` in bytes.
    pub fn message_bytes(&self) -> u64 {
        8 * self.data_dim as u64
    }

    /// Position `i` in denoising order of step `t` (`t = T - i`).
    fn index_of(&self, t: usize) -> Option<usize> {
        (1..=self.steps).contains(&t).then(|| self.steps - t)
    }

    pub fn cycle_of(&self, t: usize) -> Option<usize> {
        let i = self.index_of(t)?;
        (i >= self.warmup).then(|| (i - self.warmup) / self.degree)
    }

    fn round_of(&self, t: usize) -> Option<usize> {
        let i = self.index_of(t)?;
        (i >= self.warmup).then(|| (i - self.warmup) % self.degree)
    }

    /// `(NOISE, SAMPLE_BCAST)` sends expected at step `t`.
    pub fn expected_at(&self, t: usize) -> (u64, u64) {
        let Some(round) = self.round_of(t) else {
            return (0, 0);
        };
        let full = self.cycle_of(t).is_some_and(|c| c < self.full_cycles());
        let noise = u64::from(round != 0);
        let bcast = if full && round == self.degree - 1 {
            (self.degree - 1) as u64
        } else {
            0
        };
        (noise, bcast)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerReport {
    pub expected_payload: u64,
    pub measured_payload: u64,
    pub full_cycles: usize,
    /// Payload of each full cycle.
    pub full_cycle_payload: Vec<u64>,
    /// Measured full-cycle payload per step, `None` without full cycles.
    pub per_step_average: Option<Ratio<u64>>,
    /// `C_ParaStep` for `M = 8 · data_dim`.
    pub model_per_step: Ratio<u64>,
    pub noise_frames: u64,
    pub bcast_frames: u64,
}

/// Checks every step's NOISE and SAMPLE_BCAST census and byte counts against
/// the round schedule, then the totals against `2 (p - 1) M` per full cycle.
pub fn verify_ledger(ledger: &CommLedger, layout: &CycleLayout) -> Result<LedgerReport, ProtocolError> {
    if layout.degree == 0 || layout.warmup > layout.steps {
        return Err(ProtocolError::Config(format!("invalid layout {layout:?}")));
    }
    let m = layout.message_bytes();
    let violation = |step: usize, detail: String| ProtocolError::LedgerViolation {
        step: Some(step),
        detail,
    };
    for (step, ty, _) in ledger.entries() {
        if matches!(ty, MsgType::Noise | MsgType::SampleBcast) && layout.index_of(step as usize).is_none() {
            return Err(violation(step as usize, format!("{ty} sent at nonexistent step")));
        }
    }
    let mut expected_payload = 0;
    for t in 1..=layout.steps {
        let (noise, bcast) = layout.expected_at(t);
        for (ty, n) in [(MsgType::Noise, noise), (MsgType::SampleBcast, bcast)] {
            let got = ledger.at(t as u32, ty);
            if got.messages != n || got.payload_bytes != n * m {
                return Err(violation(
                    t,
                    format!(
                        "{ty}: expected {n} frames / {} payload bytes, measured {} / {}",
                        n * m,
                        got.messages,
                        got.payload_bytes
                    ),
                ));
            }
            expected_payload += n * m;
        }
    }
    let noise = ledger.by_type(MsgType::Noise);
    let bcast = ledger.by_type(MsgType::SampleBcast);
    let measured_payload = noise.payload_bytes + bcast.payload_bytes;
    let non_payload = ledger.by_type(MsgType::Hello).payload_bytes + ledger.by_type(MsgType::Shutdown).payload_bytes;
    if non_payload != 0 {
        return Err(ProtocolError::LedgerViolation {
            step: None,
            detail: format!("{non_payload} payload bytes on control frames"),
        });
    }

    let per_cycle = ledger.per_cycle(layout);
    let full = layout.full_cycles();
    let p = layout.degree as u64;
    let full_cycle_payload: Vec<u64> = per_cycle[..full].iter().map(|c| c.payload_bytes).collect();
    for (c, &bytes) in full_cycle_payload.iter().enumerate() {
        if bytes != 2 * (p - 1) * m {
            return Err(ProtocolError::LedgerViolation {
                step: None,
                detail: format!("cycle {c}: {bytes} payload bytes, expected {}", 2 * (p - 1) * m),
            });
        }
    }
    let per_step_average = (full > 0).then(|| Ratio::new(full_cycle_payload.iter().sum::<u64>(), p * full as u64));
    Ok(LedgerReport {
        expected_payload,
        measured_payload,
        full_cycles: full,
        full_cycle_payload,
        per_step_average,
        model_per_step: comm_parastep(m, p),
        noise_frames: noise.messages,
        bcast_frames: bcast.messages,
    })
}
