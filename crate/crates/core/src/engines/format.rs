//! Trajectory files.
//!
//! Text form, one line per step, floats as 16 hex digits of their bit
//! pattern so files compare exactly:
//!
//! ```text
//! PSTRAJ 1 <T> <dim> <calls>
//! <t> <fresh|cached|remote> <x0,x1,...> <e0,e1,...>
//! final <x0,x1,...>
//! ```
//!
//! Binary form: `"PSTJ" | version u8 | T u32 | dim u32 | calls u32`, then per
//! step `t u32 | source u8 | dim f64 | dim f64`, then `dim f64`. Little-endian.

use std::fmt::Write as _;

use crate::numerics::Vector;

use super::{EngineError, NoiseSource, StepRecord, Trajectory};

const TEXT_MAGIC: &str = "PSTRAJ";
const BIN_MAGIC: [u8; 4] = *b"PSTJ";
const VERSION: u8 = 1;

fn hex_list(v: &Vector) -> String {
    let mut s = String::with_capacity(17 * v.len());
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{:016x}", x.to_bits());
    }
    s
}

pub fn trajectory_to_text(traj: &Trajectory) -> String {
    let mut out = format!(
        "{TEXT_MAGIC} {VERSION} {} {} {}\n",
        traj.steps(),
        traj.data_dim(),
        traj.calls
    );
    for r in &traj.records {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            r.t,
            r.source.as_str(),
            hex_list(&r.x),
            hex_list(&r.eps)
        );
    }
    let _ = writeln!(out, "final {}", hex_list(&traj.final_sample));
    out
}

fn text_err(line: usize, reason: impl Into<String>) -> EngineError {
    EngineError::Format {
        location: format!("line {line}"),
        reason: reason.into(),
    }
}

fn parse_hex_list(s: &str, dim: usize, line: usize) -> Result<Vector, EngineError> {
    let vals = s
        .split(',')
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|_| text_err(line, format!("bad hex float `{h}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != dim {
        return Err(text_err(line, format!("expected {dim} values, found {}", vals.len())));
    }
    Vector::new(vals).map_err(|e| text_err(line, e.to_string()))
}

fn parse_usize(s: Option<&str>, what: &str, line: usize) -> Result<usize, EngineError> {
    s.ok_or_else(|| text_err(line, format!("missing {what}")))?
        .parse()
        .map_err(|_| text_err(line, format!("bad {what}")))
}

pub fn trajectory_from_text(text: &str) -> Result<Trajectory, EngineError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| text_err(1, "empty file"))?;
    let mut h = header.split_whitespace();
    if h.next() != Some(TEXT_MAGIC) {
        return Err(text_err(1, "missing PSTRAJ header"));
    }
    if parse_usize(h.next(), "version", 1)? != VERSION as usize {
        return Err(text_err(1, "unsupported version"));
    }
    let steps = parse_usize(h.next(), "step count", 1)?;
    let dim = parse_usize(h.next(), "dimension", 1)?;
    let calls = parse_usize(h.next(), "call count", 1)?;

    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (n, line) = lines
            .next()
            .ok_or_else(|| text_err(records.len() + 2, "missing step record"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(text_err(n, format!("expected 4 fields, found {}", f.len())));
        }
        records.push(StepRecord {
            t: parse_usize(Some(f[0]), "step", n)?,
            source: f[1]
                .parse()
                .map_err(|_| text_err(n, format!("bad source `{}`", f[1])))?,
            x: parse_hex_list(f[2], dim, n)?,
            eps: parse_hex_list(f[3], dim, n)?,
        });
    }
    let (n, last) = lines.next().ok_or_else(|| text_err(steps + 2, "missing final line"))?;
    let final_sample = match last.split_once(' ') {
        Some(("final", rest)) => parse_hex_list(rest.trim(), dim, n)?,
        _ => return Err(text_err(n, "expected `final` line")),
    };
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(text_err(n, format!("unexpected trailing content `{l}`")));
    }
    Ok(Trajectory {
        records,
        final_sample,
        calls,
    })
}

pub fn trajectory_to_binary(traj: &Trajectory) -> Vec<u8> {
    let dim = traj.data_dim();
    let mut out = Vec::with_capacity(17 + traj.steps() * (5 + 16 * dim) + 8 * dim);
    out.extend_from_slice(&BIN_MAGIC);
    out.push(VERSION);
    for n in [traj.steps(), dim, traj.calls] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    let push = |out: &mut Vec<u8>, v: &Vector| {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for r in &traj.records {
        out.extend_from_slice(&(r.t as u32).to_le_bytes());
        out.push(r.source.code());
        push(&mut out, &r.x);
        push(&mut out, &r.eps);
    }
    push(&mut out, &traj.final_sample);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> EngineError {
        EngineError::Format {
            location: format!("byte {}", self.pos),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn vector(&mut self, dim: usize) -> Result<Vector, EngineError> {
        let vals = self
            .take(8 * dim)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Vector::new(vals).map_err(|e| self.err(e.to_string()))
    }
}

pub fn trajectory_from_binary(buf: &[u8]) -> Result<Trajectory, EngineError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != BIN_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected PSTJ"));
    }
    if r.take(1)?[0] != VERSION {
        r.pos -= 1;
        return Err(r.err("unsupported version"));
    }
    let steps = r.u32()?;
    let dim = r.u32()?;
    let calls = r.u32()?;
    if steps.saturating_mul(5 + 16 * dim) > buf.len() {
        return Err(r.err(format!("header claims {steps} steps of dimension {dim}")));
    }
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = r.u32()?;
        let code = r.take(1)?[0];
        let source = NoiseSource::from_code(code).ok_or_else(|| {
            r.pos -= 1;
            r.err(format!("unknown source code {code}"))
        })?;
        records.push(StepRecord {
            t,
            source,
            x: r.vector(dim)?,
            eps: r.vector(dim)?,
        });
    }
    let final_sample = r.vector(dim)?;
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Trajectory {
        records,
        final_sample,
        calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let v = |a: f64, b: f64| Vector::new(vec![a, b]).unwrap();
        Trajectory {
            records: vec![
                StepRecord {
                    t: 2,
                    x: v(1.5, -0.0),
                    eps: v(f64::MIN_POSITIVE, 3.0),
                    source: NoiseSource::Fresh,
                },
                StepRecord {
                    t: 1,
                    x: v(0.1, 0.2),
                    eps: v(-1e300, 7.25),
                    source: NoiseSource::Remote,
                },
            ],
            final_sample: v(0.3, 1.0 / 3.0),
            calls: 1,
        }
    }

    #[test]
    fn text_round_trip() {
        let t = sample();
        let s = trajectory_to_text(&t);
        assert!(s.starts_with("PSTRAJ 1 2 2 1\n2 fresh 3ff8000000000000,8000000000000000 "));
        assert!(trajectory_from_text(&s).unwrap().bits_eq(&t));
    }

    #[test]
    fn binary_round_trip() {
        let t = sample();
        let b = trajectory_to_binary(&t);
        assert_eq!(b.len(), 17 + 2 * (5 + 32) + 16);
        assert!(trajectory_from_binary(&b).unwrap().bits_eq(&t));
    }

    #[test]
    fn malformed_inputs() {
        let s = trajectory_to_text(&sample());
        let bad = s.replace("remote", "borrowed");
        match trajectory_from_text(&bad) {
            Err(EngineError::Format { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("{other:?}"),
        }
        let cut: String = s.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(trajectory_from_text(&cut).is_err());

        let b = trajectory_to_binary(&sample());
        assert!(trajectory_from_binary(&b[..b.len() - 1]).is_err());
        let mut wrong = b.clone();
        wrong[17 + 4] = 9;
        match trajectory_from_binary(&wrong) {
            Err(EngineError::Format { location, .. }) => assert_eq!(location, "byte 21"),
            other => panic!("{other:?}"),
        }
    }
}
