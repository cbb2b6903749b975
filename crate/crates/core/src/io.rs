//! Plain-text persistence of sample datasets and training logs.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every value bit for bit and equal inputs always
//! produce identical bytes.

use std::io::{BufRead, Read, Write};

use crate::corridor::csv_err;
use crate::error::{Error, Result};
use crate::sysdyn::{ControlSequence, State};
use crate::training::{IterationLog, Sample};

/// Writes one row per sample: the state columns named by `names`, then
/// `cost,K,u1,tau1,...,uK,tauK`. Rows have different lengths when the
/// controls do.
pub fn write_samples<W: Write>(names: &[String], samples: &[Sample], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let longest = samples.iter().map(|s| s.control.len()).max().unwrap_or(0);
    let mut header: Vec<String> = names.to_vec();
    header.push("cost".into());
    header.push("K".into());
    for k in 1..=longest {
        header.push(format!("u{k}"));
        header.push(format!("tau{k}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let mut rec: Vec<String> = s.state.as_slice().iter().map(f64::to_string).collect();
        rec.push(s.cost.to_string());
        rec.push(s.control.len().to_string());
        for (u, tau) in s.control.segments() {
            rec.push(u.to_string());
            rec.push(tau.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_samples`] for a `dim`-dimensional state.
pub fn read_samples<R: Read>(dim: usize, input: R) -> Result<Vec<Sample>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = line + 1;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing column {}", i + 1)))?
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {row}: column {} is not a number", i + 1)))
        };
        let state = (0..dim).map(num).collect::<Result<Vec<f64>>>()?;
        let cost = num(dim)?;
        let k = rec
            .get(dim + 1)
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("row {row}: bad segment count")))?;
        if rec.len() < dim + 2 + 2 * k {
            return Err(Error::Parse(format!("row {row}: expected {k} segments")));
        }
        let mut u = Vec::with_capacity(k);
        let mut tau = Vec::with_capacity(k);
        for j in 0..k {
            u.push(num(dim + 2 + 2 * j)?);
            tau.push(num(dim + 3 + 2 * j)?);
        }
        out.push(Sample {
            state: State::from(state),
            control: ControlSequence::new(u, tau)?,
            cost,
        });
    }
    Ok(out)
}

/// Appends one JSON object per line.
pub fn write_log_line<W: Write>(log: &IterationLog, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, log)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<IterationLog>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_round_trip() {
        let a = Sample {
            state: State::from([0.1, -2.5, 3.0]),
            control: ControlSequence::new(vec![1.0, 0.0], vec![0.3, 1.0 / 3.0]).unwrap(),
            cost: 0.3 + 1.0 / 3.0,
        };
        let b = Sample {
            state: State::from([1e-17, 4.0, -0.0]),
            control: ControlSequence::empty(),
            cost: 0.0,
        };
        let names: Vec<String> = ["px", "py", "theta"].map(String::from).to_vec();
        let mut buf = Vec::new();
        write_samples(&names, &[a.clone(), b.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("px,py,theta,cost,K,u1,tau1,u2,tau2\n"));
        let back = read_samples(3, buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn short_rows_are_rejected() {
        let text = "px,py,theta,cost,K,u1,tau1\n0,0,0,1,2,1,1\n";
        assert!(read_samples(3, text.as_bytes()).is_err());
    }
}
