use std::fmt::Write as _;

use crate::numerics::{mse, rel_mae, NumericsError};

use super::{EngineError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffRow {
    pub t: usize,
    pub rel_mae_x: f64,
    pub rel_mae_eps: f64,
    pub mse_x: f64,
    pub mse_eps: f64,
}

/// Per-step error of a trajectory against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    pub rows: Vec<DiffRow>,
    pub final_rel_mae: f64,
    pub final_mse: f64,
}

impl DiffReport {
    pub fn max_rel_mae_x(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_mae_x).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,rel_mae_x,rel_mae_eps,mse_x,mse_eps\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.t, r.rel_mae_x, r.rel_mae_eps, r.mse_x, r.mse_eps
            );
        }
        out
    }
}

fn check_aligned(a: &Trajectory, b: &Trajectory) -> Result<(), EngineError> {
    if a.steps() != b.steps() {
        return Err(EngineError::Config(format!(
            "trajectories have {} and {} steps",
            a.steps(),
            b.steps()
        )));
    }
    if let Some(i) = a.records.iter().zip(&b.records).position(|(p, q)| p.t != q.t) {
        return Err(EngineError::Config(format!("step mismatch at record {i}")));
    }
    Ok(())
}

/// Compares `candidate` to `reference` step by step; `reference` supplies
/// the relative-error denominator.
pub fn compare_trajectories(reference: &Trajectory, candidate: &Trajectory) -> Result<DiffReport, EngineError> {
    check_aligned(reference, candidate)?;
    let rows = reference
        .records
        .iter()
        .zip(&candidate.records)
        .map(|(r, c)| {
            Ok(DiffRow {
                t: r.t,
                rel_mae_x: rel_mae(&r.x, &c.x)?,
                rel_mae_eps: rel_mae(&r.eps, &c.eps)?,
                mse_x: mse(&r.x, &c.x)?,
                mse_eps: mse(&r.eps, &c.eps)?,
            })
        })
        .collect::<Result<Vec<_>, NumericsError>>()?;
    Ok(DiffReport {
        rows,
        final_rel_mae: rel_mae(&reference.final_sample, &candidate.final_sample)?,
        final_mse: mse(&reference.final_sample, &candidate.final_sample)?,
    })
}

/// Relative change between consecutive steps of one trajectory, for the
/// states and for the noise: entry `j` is `rel_mae(v_t, v_{t+1})` with
/// `v_t` from record `j + 1` as the reference.
pub fn adjacent_similarity(traj: &Trajectory) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
    let mut xs = Vec::with_capacity(traj.steps().saturating_sub(1));
    let mut es = Vec::with_capacity(xs.capacity());
    for w in traj.records.windows(2) {
        xs.push(rel_mae(&w[1].x, &w[0].x)?);
        es.push(rel_mae(&w[1].eps, &w[0].eps)?);
    }
    Ok((xs, es))
}

/// Greedy cycle schedule from a sequential reference run.
///
/// After the first `warmup` steps, a cycle keeps growing while the
/// adjacent-step noise change `rel_mae(ε_t, ε_{t+1})` at its end stays below
/// `tau`, up to `max_len` steps. Lengths sum to `T - warmup`.
pub fn generate_threshold_schedule(
    reference: &Trajectory,
    warmup: usize,
    tau: f64,
    max_len: usize,
) -> Result<Vec<usize>, EngineError> {
    if max_len == 0 || tau.is_nan() || tau < 0.0 {
        return Err(EngineError::Config(format!(
            "threshold schedule needs max_len >= 1 and tau >= 0, got {max_len} and {tau}"
        )));
    }
    if warmup > reference.steps() {
        return Err(EngineError::Config(format!(
            "warm-up {warmup} exceeds {} steps",
            reference.steps()
        )));
    }
    let recs = &reference.records;
    let mut cycles = Vec::new();
    let mut start = warmup;
    while start < recs.len() {
        let mut len = 1;
        while len < max_len && start + len < recs.len() {
            match rel_mae(&recs[start + len].eps, &recs[start + len - 1].eps) {
                Ok(d) if d < tau => len += 1,
                Ok(_) | Err(NumericsError::DegenerateReference) => break,
                Err(e) => return Err(e.into()),
            }
        }
        cycles.push(len);
        start += len;
    }
    Ok(cycles)
}
