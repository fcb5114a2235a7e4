use std::time::{Duration, Instant};

use crate::engines::{NoiseSource, StepRecord, Trajectory};
use crate::numerics::Vector;
use crate::predictor::NoisePredictor;
use crate::schedule::{Sampler, StepIndex};

use super::ledger::CommLedger;
use super::transport::{Transport, TransportError};
use super::wire::{MsgType, WireMessage};
use super::ProtocolError;

pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerConfig {
    pub degree: usize,
    pub warmup: usize,
    pub seed: u64,
    pub recv_timeout: Duration,
}

impl WorkerConfig {
    pub fn new(degree: usize, warmup: usize, seed: u64) -> Self {
        Self {
            degree,
            warmup,
            seed,
            recv_timeout: DEFAULT_RECV_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timing {
    pub compute: Duration,
    pub comm: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub rank: usize,
    /// Rank 0: the canonical trajectory. Other ranks: their own history.
    pub trajectory: Trajectory,
    pub ledger: CommLedger,
    pub timing: Timing,
}

struct Session<'t> {
    rank: usize,
    transport: &'t mut dyn Transport,
    ledger: CommLedger,
    timeout: Duration,
    comm: Duration,
    dim: usize,
}

impl Session<'_> {
    fn fail(&self, step: usize, e: TransportError) -> ProtocolError {
        match e {
            TransportError::Timeout { peer, waited } => ProtocolError::DeadlockSuspect {
                rank: self.rank,
                step,
                peer,
                waited,
            },
            other => ProtocolError::Abort {
                rank: self.rank,
                step,
                reason: other.to_string(),
            },
        }
    }

    fn send(&mut self, to: usize, msg_type: MsgType, step: usize, payload: Vec<f64>) -> Result<(), ProtocolError> {
        let m = WireMessage {
            msg_type,
            sender: self.rank as u16,
            step: step as u32,
            payload,
        };
        let start = Instant::now();
        let sent = self.transport.send(to, &m).map_err(|e| self.fail(step, e))?;
        self.comm += start.elapsed();
        for f in &sent {
            self.ledger.record(f);
        }
        Ok(())
    }

    /// Receives the one frame the schedule says comes next from `from`.
    fn expect(&mut self, from: usize, msg_type: MsgType, step: usize) -> Result<Vec<f64>, ProtocolError> {
        let start = Instant::now();
        let m = self
            .transport
            .recv(from, self.timeout)
            .map_err(|e| self.fail(step, e))?;
        self.comm += start.elapsed();
        let want_len = match msg_type {
            MsgType::Noise | MsgType::SampleBcast => self.dim,
            MsgType::Hello | MsgType::Shutdown => 0,
        };
        if m.msg_type != msg_type || m.sender as usize != from || m.step as usize != step || m.payload.len() != want_len
        {
            return Err(ProtocolError::Abort {
                rank: self.rank,
                step,
                reason: format!(
                    "expected {msg_type} from {from} for step {step} with {want_len} values, got {} from {} for step {} with {}",
                    m.msg_type,
                    m.sender,
                    m.step,
                    m.payload.len()
                ),
            });
        }
        Ok(m.payload)
    }
}

/// One rank of the round-based protocol.
///
/// Every rank derives `x_T` and the per-step sampling noise from the shared
/// seed, runs the warm-up steps itself, then follows the round counter:
/// the master predicts and sends its noise to rank 0, rank 0 applies the
/// received noise, other ranks apply their cached noise, and after the
/// last round of a cycle rank 0 broadcasts its state. A truncated final
/// cycle has no broadcast; rank 0 ends the run with SHUTDOWN to every rank.
///
/// NOISE and SAMPLE_BCAST frames carry the step `t` whose update they belong
/// to, so a broadcast labelled `t` holds `x_{t-1}`.
pub fn run_worker(
    cfg: &WorkerConfig,
    transport: &mut dyn Transport,
    model: &dyn NoisePredictor,
    sampler: &Sampler,
) -> Result<WorkerReport, ProtocolError> {
    let started = Instant::now();
    let rank = transport.rank();
    let p = cfg.degree;
    let total = sampler.steps();
    if transport.world() != p || rank >= p {
        return Err(ProtocolError::Config(format!(
            "rank {rank} in a world of {} does not match degree {p}",
            transport.world()
        )));
    }
    if cfg.warmup > total {
        return Err(ProtocolError::Config(format!(
            "warm-up {} exceeds {total} steps",
            cfg.warmup
        )));
    }
    if p > 1 && cfg.warmup == 0 && total > 0 {
        return Err(ProtocolError::Config(format!(
            "degree {p} needs at least one warm-up step to populate the noise cache"
        )));
    }
    let dim = model.data_dim();
    let mut s = Session {
        rank,
        transport,
        ledger: CommLedger::new(),
        timeout: cfg.recv_timeout,
        comm: Duration::ZERO,
        dim,
    };
    let mut compute = Duration::ZERO;
    let mut predict = |x: &Vector, t: StepIndex| -> Result<Vector, ProtocolError> {
        let start = Instant::now();
        let eps = model.predict(x, t)?;
        compute += start.elapsed();
        Ok(eps)
    };

    let mut x = sampler.initial_sample(cfg.seed, dim);
    let mut cache: Option<Vector> = None;
    let mut round = 0;
    let mut calls = 0;
    let mut records = Vec::with_capacity(total);

    for (i, t) in StepIndex::descending(total).enumerate() {
        let step = t.t();
        let (eps, source) = if i < cfg.warmup {
            let eps = predict(&x, t)?;
            calls += 1;
            cache = Some(eps.clone());
            (eps, NoiseSource::Fresh)
        } else if rank == round {
            let eps = predict(&x, t)?;
            calls += 1;
            cache = Some(eps.clone());
            if rank != 0 {
                s.send(0, MsgType::Noise, step, eps.as_slice().to_vec())?;
            }
            (eps, NoiseSource::Fresh)
        } else if rank == 0 {
            let payload = s.expect(round, MsgType::Noise, step)?;
            (Vector::new(payload)?, NoiseSource::Remote)
        } else {
            let eps = cache.clone().ok_or_else(|| ProtocolError::Abort {
                rank,
                step,
                reason: "noise cache empty".into(),
            })?;
            (eps, NoiseSource::Cached)
        };
        let next = sampler.update(&x, t, &eps, cfg.seed)?;
        records.push(StepRecord {
            t: step,
            x: std::mem::replace(&mut x, next),
            eps,
            source,
        });
        if i >= cfg.warmup {
            if round == p - 1 && p > 1 {
                if rank == 0 {
                    for r in 1..p {
                        s.send(r, MsgType::SampleBcast, step, x.as_slice().to_vec())?;
                    }
                } else {
                    x = Vector::new(s.expect(0, MsgType::SampleBcast, step)?)?;
                }
            }
            round = (round + 1) % p;
        }
    }

    if rank == 0 {
        for r in 1..p {
            s.send(r, MsgType::Shutdown, 0, Vec::new())?;
        }
    } else {
        s.expect(0, MsgType::Shutdown, 0)?;
    }

    Ok(WorkerReport {
        rank,
        trajectory: Trajectory {
            records,
            final_sample: x,
            calls,
        },
        ledger: s.ledger,
        timing: Timing {
            compute,
            comm: s.comm,
            total: started.elapsed(),
        },
    })
}
