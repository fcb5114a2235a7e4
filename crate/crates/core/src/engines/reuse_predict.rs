use crate::numerics::Vector;
use crate::schedule::StepIndex;

use super::{config_err, Denoiser, EngineError, NoiseSource, StepRecord, Trajectory};

/// One cycle of the round schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cycle {
    /// Rounds in the cycle; rank `r < len` is master at round `r`.
    pub len: usize,
    /// Whether rank 0 broadcasts its state after the last round.
    pub resync: bool,
}

impl Cycle {
    /// Full cycles of `degree` rounds, each ending in a broadcast, followed by
    /// a truncated cycle of `remaining mod degree` rounds with no broadcast.
    pub fn fixed_plan(remaining: usize, degree: usize) -> Result<Vec<Cycle>, EngineError> {
        if degree == 0 {
            return config_err("degree of parallelism must be >= 1");
        }
        let mut plan = vec![
            Cycle {
                len: degree,
                resync: true,
            };
            remaining / degree
        ];
        if remaining % degree != 0 {
            plan.push(Cycle {
                len: remaining % degree,
                resync: false,
            });
        }
        Ok(plan)
    }
}

/// State one virtual rank carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualWorkerState {
    pub rank: usize,
    pub x: Vector,
    pub eps_cache: Option<Vector>,
    /// Step at which the cache was last written.
    pub cache_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ParaStepRun {
    /// Rank 0's view: the canonical output.
    pub trajectory: Trajectory,
    /// Every rank's own history; `ranks[0]` equals `trajectory`.
    pub ranks: Vec<Trajectory>,
    /// Master rank of each post-warm-up step.
    pub rounds: Vec<usize>,
    pub final_states: Vec<VirtualWorkerState>,
    /// Index into `records` of every step that ended with a broadcast.
    pub resync_steps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchStepRun {
    /// Same records and flags as the rank-0 view of the emulated protocol.
    pub trajectory: Trajectory,
    /// Number of batched predictor invocations after warm-up.
    pub batch_calls: usize,
}

impl<'a> Denoiser<'a> {
    pub(super) fn reuse_then_predict(
        &self,
        seed: u64,
        warmup: usize,
        plan: &[Cycle],
        width: usize,
    ) -> Result<ParaStepRun, EngineError> {
        let total = self.steps();
        let remaining: usize = plan.iter().map(|c| c.len).sum();
        if warmup + remaining != total {
            return config_err(format!(
                "{warmup} warm-up steps plus {remaining} cycle steps != {total}"
            ));
        }
        if plan.iter().any(|c| c.len == 0 || c.len > width) {
            return config_err(format!("cycle lengths must lie in [1, {width}]"));
        }
        if width > 1 && warmup == 0 && remaining > 0 {
            return config_err(format!(
                "{width} ranks need at least one warm-up step to populate the noise cache"
            ));
        }

        let x_t = self.initial(seed);
        let mut states: Vec<VirtualWorkerState> = (0..width)
            .map(|rank| VirtualWorkerState {
                rank,
                x: x_t.clone(),
                eps_cache: None,
                cache_step: None,
            })
            .collect();
        let mut histories: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(total); width];
        let mut calls = vec![0usize; width];
        let mut steps = StepIndex::descending(total);

        // Warm-up: every rank runs the original process. The computation is
        // identical on all ranks, so it is done once and copied.
        for t in steps.by_ref().take(warmup) {
            let eps = self.model.predict(&states[0].x, t)?;
            let next = self.update(&states[0].x, t, &eps, seed)?;
            for (st, hist) in states.iter_mut().zip(&mut histories) {
                hist.push(StepRecord {
                    t: t.t(),
                    x: std::mem::replace(&mut st.x, next.clone()),
                    eps: eps.clone(),
                    source: NoiseSource::Fresh,
                });
                st.eps_cache = Some(eps.clone());
                st.cache_step = Some(t.t());
            }
            for c in &mut calls {
                *c += 1;
            }
        }

        let mut rounds = Vec::with_capacity(remaining);
        let mut resync_steps = Vec::new();
        for cycle in plan {
            for round in 0..cycle.len {
                let t = steps.next().expect("plan covers the remaining steps");
                let fresh = self.model.predict(&states[round].x, t)?;
                calls[round] += 1;
                for (rank, (st, hist)) in states.iter_mut().zip(&mut histories).enumerate() {
                    let (eps, source) = if rank == round {
                        st.eps_cache = Some(fresh.clone());
                        st.cache_step = Some(t.t());
                        (fresh.clone(), NoiseSource::Fresh)
                    } else if rank == 0 {
                        (fresh.clone(), NoiseSource::Remote)
                    } else {
                        let cached = st.eps_cache.clone().ok_or_else(|| {
                            EngineError::Config(format!("rank {rank} has no cached noise at step {}", t.t()))
                        })?;
                        (cached, NoiseSource::Cached)
                    };
                    let next = self.update(&st.x, t, &eps, seed)?;
                    hist.push(StepRecord {
                        t: t.t(),
                        x: std::mem::replace(&mut st.x, next),
                        eps,
                        source,
                    });
                }
                rounds.push(round);
            }
            if cycle.resync {
                let root = states[0].x.clone();
                for st in &mut states[1..] {
                    st.x = root.clone();
                }
                resync_steps.push(histories[0].len() - 1);
            }
        }

        let ranks: Vec<Trajectory> = histories
            .into_iter()
            .zip(&states)
            .zip(&calls)
            .map(|((records, st), &calls)| Trajectory {
                records,
                final_sample: st.x.clone(),
                calls,
            })
            .collect();
        Ok(ParaStepRun {
            trajectory: ranks[0].clone(),
            ranks,
            rounds,
            final_states: states,
            resync_steps,
        })
    }

    /// Reuse-then-predict with cycle length `s` on one device: each cycle's
    /// `s` predictions are evaluated in one batched call.
    ///
    /// Lane `r`'s input is the cycle-start state rolled forward `r` steps
    /// with lane `r`'s own cached noise, exactly as rank `r` computes it in
    /// the distributed protocol.
    pub fn batchstep(&self, seed: u64, warmup: usize, s: usize) -> Result<BatchStepRun, EngineError> {
        self.check_warmup(warmup)?;
        let total = self.steps();
        let plan = Cycle::fixed_plan(total - warmup, s)?;
        if s > 1 && warmup == 0 && total > 0 {
            return config_err(format!(
                "cycle length {s} needs at least one warm-up step to populate the noise cache"
            ));
        }
        let all: Vec<StepIndex> = StepIndex::descending(total).collect();
        let mut x = self.initial(seed);
        let mut records = Vec::with_capacity(total);
        let mut caches: Vec<Option<Vector>> = vec![None; s];
        let mut calls = 0;

        for &t in &all[..warmup] {
            let eps = self.model.predict(&x, t)?;
            let next = self.update(&x, t, &eps, seed)?;
            caches.iter_mut().for_each(|c| *c = Some(eps.clone()));
            records.push(StepRecord {
                t: t.t(),
                x: std::mem::replace(&mut x, next),
                eps,
                source: NoiseSource::Fresh,
            });
            calls += 1;
        }

        let mut pos = warmup;
        let mut batch_calls = 0;
        for cycle in &plan {
            let ts = &all[pos..pos + cycle.len];
            let mut inputs = Vec::with_capacity(cycle.len);
            inputs.push(x.clone());
            for lane in 1..cycle.len {
                let cache = caches[lane]
                    .as_ref()
                    .ok_or_else(|| EngineError::Config(format!("lane {lane} has no cached noise")))?;
                let mut xr = x.clone();
                for &t in &ts[..lane] {
                    xr = self.update(&xr, t, cache, seed)?;
                }
                inputs.push(xr);
            }
            let outs = self.model.predict_batch(&inputs, ts)?;
            batch_calls += 1;
            calls += 1;
            for (k, (&t, eps)) in ts.iter().zip(outs).enumerate() {
                let next = self.update(&x, t, &eps, seed)?;
                caches[k] = Some(eps.clone());
                records.push(StepRecord {
                    t: t.t(),
                    x: std::mem::replace(&mut x, next),
                    eps,
                    source: if k == 0 {
                        NoiseSource::Fresh
                    } else {
                        NoiseSource::Remote
                    },
                });
            }
            pos += cycle.len;
        }

        Ok(BatchStepRun {
            trajectory: Trajectory {
                records,
                final_sample: x,
                calls,
            },
            batch_calls,
        })
    }
}
