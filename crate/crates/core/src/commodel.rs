//! Closed-form communication volumes and speedup bounds.
//!
//! Volumes are totals across all devices per denoising step, in units of
//! the per-layer feature size `M`.

use std::fmt::Write as _;

use num_rational::Ratio;

/// Ring attention: every layer gathers keys and values from `p - 1` peers.
pub fn comm_ring(layers: u64, m: u64, p: u64) -> u64 {
    2 * layers * p.saturating_sub(1) * m
}

/// Pipeline stages exchanging activations all-to-all: `p (p - 1) M`.
pub fn comm_asyncdiff(m: u64, p: u64) -> u64 {
    p * p.saturating_sub(1) * m
}

/// Reuse-then-predict: `(p - 1)` noise sends plus a `(p - 1)`-way sample
/// broadcast per `p`-step cycle, `2 (p - 1) M / p` per step.
pub fn comm_parastep(m: u64, p: u64) -> Ratio<u64> {
    if p == 0 {
        return Ratio::from_integer(0);
    }
    Ratio::new(2 * (p - 1) * m, p)
}

/// Speedup ceiling `1 / (m + (1 - m) / p)` for serial fraction `m`.
///
/// Panics unless `0 <= m <= 1` and `p >= 1`.
pub fn amdahl_speedup(m: f64, p: usize) -> f64 {
    assert!((0.0..=1.0).contains(&m), "serial fraction {m} outside [0, 1]");
    assert!(p >= 1, "degree must be >= 1");
    1.0 / (m + (1.0 - m) / p as f64)
}

/// Predictor calls on the busiest device: all warm-up steps plus one call
/// per cycle after that.
pub fn call_count_per_device(steps: usize, warmup: usize, p: usize) -> usize {
    assert!(p >= 1 && warmup <= steps, "need p >= 1 and warmup <= steps");
    warmup + (steps - warmup).div_ceil(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommModelParams {
    pub layers: u64,
    pub message: u64,
    pub degree: u64,
}

impl CommModelParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.message == 0 || self.degree == 0 {
            return Err(format!("L, M and p must all be >= 1, got {self:?}"));
        }
        Ok(())
    }
}

/// Cartesian product in `L`, `M`, `p` order.
pub fn sweep(layers: &[u64], messages: &[u64], degrees: &[u64]) -> Vec<CommModelParams> {
    let mut out = Vec::with_capacity(layers.len() * messages.len() * degrees.len());
    for &l in layers {
        for &m in messages {
            for &p in degrees {
                out.push(CommModelParams {
                    layers: l,
                    message: m,
                    degree: p,
                });
            }
        }
    }
    out
}

pub const DEFAULT_DEGREES: [u64; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct CommRow {
    pub params: CommModelParams,
    pub ring: u64,
    pub asyncdiff: u64,
    pub parastep: Ratio<u64>,
    /// `C_Ring / C_ParaStep`; `None` when `p = 1`.
    pub ring_ratio: Option<Ratio<u64>>,
    /// `C_AsyncDiff / C_ParaStep`; `None` when `p = 1`.
    pub asyncdiff_ratio: Option<Ratio<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommTable {
    pub rows: Vec<CommRow>,
}

const COLUMNS: [&str; 9] = [
    "L",
    "M",
    "p",
    "c_ring",
    "c_asyncdiff",
    "c_parastep",
    "c_parastep_exact",
    "ring_over_parastep",
    "asyncdiff_over_parastep",
];

fn ratio_float(r: Ratio<u64>) -> String {
    format!("{}", *r.numer() as f64 / *r.denom() as f64)
}

fn ratio_exact(r: Ratio<u64>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn comm_table(params: &[CommModelParams]) -> Result<CommTable, String> {
    let rows = params
        .iter()
        .map(|&pr| {
            pr.validate()?;
            let ring = comm_ring(pr.layers, pr.message, pr.degree);
            let asyncdiff = comm_asyncdiff(pr.message, pr.degree);
            let parastep = comm_parastep(pr.message, pr.degree);
            let nonzero = *parastep.numer() != 0;
            Ok(CommRow {
                params: pr,
                ring,
                asyncdiff,
                parastep,
                ring_ratio: nonzero.then(|| Ratio::from_integer(ring) / parastep),
                asyncdiff_ratio: nonzero.then(|| Ratio::from_integer(asyncdiff) / parastep),
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(CommTable { rows })
}

impl CommTable {
    fn cells(row: &CommRow) -> [String; 9] {
        let opt = |r: Option<Ratio<u64>>| r.map_or_else(|| "n/a".to_string(), ratio_float);
        [
            row.params.layers.to_string(),
            row.params.message.to_string(),
            row.params.degree.to_string(),
            row.ring.to_string(),
            row.asyncdiff.to_string(),
            ratio_float(row.parastep),
            ratio_exact(row.parastep),
            opt(row.ring_ratio),
            opt(row.asyncdiff_ratio),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join(","));
            out.push('\n');
        }
        out
    }

    /// Right-aligned columns separated by two spaces.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 9]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = COLUMNS.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        line(&COLUMNS);
        for row in &body {
            line(&row.each_ref().map(String::as_str));
        }
        out
    }
}
