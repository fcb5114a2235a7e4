use std::thread;
use std::time::Duration;

use num_rational::Ratio;
use parastep::commodel::comm_parastep;
use parastep::engines::Denoiser;
use parastep::predictor::{Activation, PredictorWeights};
use parastep::protocol::{
    loopback_mesh, run_loopback, run_tcp_threads, run_worker, verify_ledger, CycleLayout, MsgType, ProtocolError,
    WorkerConfig,
};
use parastep::schedule::{NoiseSchedule, Sampler, SigmaMode};

fn net() -> PredictorWeights {
    PredictorWeights::init(2, 8, &[16, 16], Activation::Tanh, 21).unwrap()
}

fn ddpm(steps: usize) -> Sampler {
    Sampler::Ddpm(NoiseSchedule::ddpm_default(steps, SigmaMode::Posterior).unwrap())
}

#[test]
fn three_ranks_thirteen_steps_census() {
    let (w, s) = (net(), ddpm(13));
    let cfg = WorkerConfig::new(3, 4, 5);
    let out = run_loopback(&cfg, &w, &s).unwrap();
    assert_eq!(out.ledger.by_type(MsgType::Noise).messages, 6);
    assert_eq!(out.ledger.by_type(MsgType::SampleBcast).messages, 6);
    let payload =
        out.ledger.by_type(MsgType::Noise).payload_bytes + out.ledger.by_type(MsgType::SampleBcast).payload_bytes;
    assert_eq!(payload, 12 * 8 * 2);
    assert_eq!(out.ledger.by_type(MsgType::Hello).messages, 4);
    assert_eq!(out.ledger.by_type(MsgType::Shutdown).messages, 2);
    let layout = CycleLayout {
        steps: 13,
        warmup: 4,
        degree: 3,
        data_dim: 2,
    };
    let report = verify_ledger(&out.ledger, &layout).unwrap();
    assert_eq!(report.per_step_average, Some(comm_parastep(16, 3)));
    assert_eq!(report.per_step_average, Some(Ratio::new(64, 3)));
}

#[test]
fn single_rank_is_silent_and_sequential() {
    let (w, s) = (net(), ddpm(17));
    let out = run_loopback(&WorkerConfig::new(1, 0, 9), &w, &s).unwrap();
    assert!(out.ledger.is_empty());
    let seq = Denoiser::new(&w, &s).sequential(9).unwrap();
    assert!(out.root().trajectory.bits_eq(&seq));
}

#[test]
fn every_rank_matches_its_emulated_history() {
    let (w, s) = (net(), ddpm(23));
    for p in [2, 3, 4] {
        let emu = Denoiser::new(&w, &s).parastep(4, 2, p).unwrap();
        let out = run_loopback(&WorkerConfig::new(p, 2, 4), &w, &s).unwrap();
        for (rank, rep) in out.reports.iter().enumerate() {
            assert!(rep.trajectory.bits_eq(&emu.ranks[rank]), "p={p} rank={rank}");
        }
    }
}

#[test]
fn tcp_equals_loopback_with_truncated_cycle() {
    let (w, s) = (net(), ddpm(20));
    for p in [2, 4] {
        let cfg = WorkerConfig::new(p, 3, 8);
        let lo = run_loopback(&cfg, &w, &s).unwrap();
        let tcp = run_tcp_threads(&cfg, &w, &s).unwrap();
        assert!(tcp.root().trajectory.bits_eq(&lo.root().trajectory));
        assert_eq!(tcp.ledger, lo.ledger);
        let layout = CycleLayout {
            steps: 20,
            warmup: 3,
            degree: p,
            data_dim: 2,
        };
        let r = verify_ledger(&tcp.ledger, &layout).unwrap();
        assert_eq!(r.full_cycles, 17 / p);
        assert_eq!(r.noise_frames as usize, (17 / p) * (p - 1) + (17 % p).saturating_sub(1));
    }
}

#[test]
fn zero_warmup_rejected_for_multiple_ranks() {
    let (w, s) = (net(), ddpm(10));
    assert!(matches!(
        run_loopback(&WorkerConfig::new(3, 0, 1), &w, &s),
        Err(ProtocolError::Config(_))
    ));
}

#[test]
fn peer_loss_aborts_with_rank_and_step() {
    let (w, s) = (net(), ddpm(12));
    let mut mesh = loopback_mesh(2);
    drop(mesh.pop());
    let mut root = mesh.pop().unwrap();
    let cfg = WorkerConfig::new(2, 3, 0);
    match run_worker(&cfg, &mut root, &w, &s) {
        // Rank 1 would be master for the second post-warm-up step, t = 8.
        Err(ProtocolError::Abort {
            rank: 0,
            step: 8,
            reason,
        }) => assert!(reason.contains("disconnected")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn silent_peer_is_a_deadlock_suspect() {
    let (w, s) = (net(), ddpm(12));
    let mut mesh = loopback_mesh(2);
    let idle = mesh.pop().unwrap();
    let mut root = mesh.pop().unwrap();
    let cfg = WorkerConfig {
        recv_timeout: Duration::from_millis(50),
        ..WorkerConfig::new(2, 3, 0)
    };
    let r = run_worker(&cfg, &mut root, &w, &s);
    drop(idle);
    assert!(
        matches!(
            r,
            Err(ProtocolError::DeadlockSuspect {
                rank: 0,
                peer: 1,
                step: 8,
                ..
            })
        ),
        "{r:?}"
    );
}

#[test]
fn malformed_noise_aborts_root_and_releases_peer() {
    let (w, s) = (net(), ddpm(12));
    let small = PredictorWeights::init(3, 8, &[4], Activation::Tanh, 0).unwrap();
    let mut mesh = loopback_mesh(2);
    let mut r1 = mesh.pop().unwrap();
    let mut r0 = mesh.pop().unwrap();
    let cfg = WorkerConfig::new(2, 3, 0);
    let (cfg, w, s, small) = (&cfg, &w, &s, &small);
    // Endpoints move into the threads so each closes when its worker returns.
    let (a, b) = thread::scope(|sc| {
        let h0 = sc.spawn(move || run_worker(cfg, &mut r0, w, s));
        // Rank 1 uses a model of the wrong dimension: its noise frames are rejected.
        let h1 = sc.spawn(move || run_worker(cfg, &mut r1, small, s));
        (h0.join().unwrap(), h1.join().unwrap())
    });
    match a {
        Err(ProtocolError::Abort {
            rank: 0,
            step: 8,
            reason,
        }) => assert!(reason.contains("expected NOISE"), "{reason}"),
        other => panic!("{other:?}"),
    }
    assert!(b.unwrap_err().is_peer_loss());
}
