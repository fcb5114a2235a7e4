use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use crate::predictor::NoisePredictor;
use crate::schedule::Sampler;

use super::ledger::CommLedger;
use super::transport::{loopback_mesh, TcpEndpoint, Transport};
use super::worker::{run_worker, WorkerConfig, WorkerReport};
use super::ProtocolError;

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    /// Indexed by rank.
    pub reports: Vec<WorkerReport>,
    /// All ranks' sends combined.
    pub ledger: CommLedger,
}

impl ProtocolOutcome {
    pub fn root(&self) -> &WorkerReport {
        &self.reports[0]
    }
}

/// Runs one worker per thread and gathers the reports.
///
/// When several workers fail, the reported error is the first one that is
/// not a consequence of a peer going away.
pub fn run_workers<T: Transport>(
    cfg: &WorkerConfig,
    endpoints: Vec<T>,
    model: &dyn NoisePredictor,
    sampler: &Sampler,
) -> Result<ProtocolOutcome, ProtocolError> {
    let results: Vec<Result<WorkerReport, ProtocolError>> = thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|mut ep| scope.spawn(move || run_worker(cfg, &mut ep, model, sampler)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(ProtocolError::Config("worker thread panicked".into())))
            })
            .collect()
    });
    let mut reports = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        let idx = errors.iter().position(|e| !e.is_peer_loss()).unwrap_or(0);
        return Err(errors.swap_remove(idx));
    }
    let ledger = CommLedger::merged(reports.iter().map(|r| &r.ledger));
    Ok(ProtocolOutcome { reports, ledger })
}

pub fn run_loopback(
    cfg: &WorkerConfig,
    model: &dyn NoisePredictor,
    sampler: &Sampler,
) -> Result<ProtocolOutcome, ProtocolError> {
    run_workers(cfg, loopback_mesh(cfg.degree), model, sampler)
}

/// TCP on localhost with one thread per rank; listeners are bound on
/// ephemeral ports before any worker starts.
pub fn run_tcp_threads(
    cfg: &WorkerConfig,
    model: &dyn NoisePredictor,
    sampler: &Sampler,
) -> Result<ProtocolOutcome, ProtocolError> {
    let listeners = (0..cfg.degree)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()?;
    let peers = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<Result<Vec<_>, _>>()?;
    let connect_timeout = cfg.recv_timeout.min(Duration::from_secs(30));
    let endpoints = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| TcpEndpoint::from_listener(rank, peers.clone(), l, connect_timeout))
        .collect();
    run_workers(cfg, endpoints, model, sampler)
}
