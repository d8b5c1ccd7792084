//! Reference responders for the external-model protocol.
//!
//! These back the `stub-model` CLI command and the protocol tests; they are
//! also a minimal template for wrapping a real model.

use std::io::{BufRead, Write};
use std::str::FromStr;

use super::wire::{Handshake, Request, Response};
use super::{ModalityKind, ModalityValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubBehavior {
    /// `logit_c = (c + 1)·Σx1 + (1 − c)·Σx2`: no cross-modal interaction.
    Additive,
    /// `logit_c = (c + 1)·Σ_i x1_i·x2_i`: pure interaction.
    Product,
    /// Additive logits with one entry missing.
    WrongLength,
    /// Answers this many requests, then exits without replying.
    CrashAfter(usize),
}

impl FromStr for StubBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additive" => Ok(Self::Additive),
            "product" => Ok(Self::Product),
            "wrong-length" => Ok(Self::WrongLength),
            other => match other.strip_prefix("crash-after=") {
                Some(n) => n
                    .parse()
                    .map(Self::CrashAfter)
                    .map_err(|e| format!("bad crash-after count: {e}")),
                None => Err(format!(
                    "unknown stub behavior {other:?} (additive, product, wrong-length, crash-after=N)"
                )),
            },
        }
    }
}

/// Numeric reading of a modality value: dense entries, token lengths or raster cells.
fn numeric(v: &ModalityValue) -> Vec<f64> {
    match v {
        ModalityValue::Dense(x) => x.clone(),
        ModalityValue::Tokens(t) => t.iter().map(|w| w.chars().count() as f64).collect(),
        ModalityValue::Grid(r) => r.cells.clone(),
    }
}

pub fn stub_logits(behavior: StubBehavior, classes: usize, x1: &ModalityValue, x2: &ModalityValue) -> Vec<f64> {
    let (a, b) = (numeric(x1), numeric(x2));
    let s1: f64 = a.iter().sum();
    let s2: f64 = b.iter().sum();
    let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    let mut out: Vec<f64> = (0..classes)
        .map(|c| {
            let c = c as f64;
            match behavior {
                StubBehavior::Product => (c + 1.0) * dot,
                _ => (c + 1.0) * s1 + (1.0 - c) * s2,
            }
        })
        .collect();
    if behavior == StubBehavior::WrongLength {
        out.pop();
    }
    out
}

/// Serves requests from `input` until it closes (or the crash point is hit).
pub fn run_stub<R: BufRead, W: Write>(
    behavior: StubBehavior,
    classes: usize,
    kinds: [ModalityKind; 2],
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    serde_json::to_writer(&mut output, &Handshake::new(classes, kinds))?;
    output.write_all(b"\n")?;
    output.flush()?;
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let StubBehavior::CrashAfter(n) = behavior {
            if served >= n {
                return Ok(());
            }
        }
        let request: Request = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let logits = request
            .pairs
            .iter()
            .map(|(a, b)| stub_logits(behavior, classes, a, b))
            .collect();
        serde_json::to_writer(&mut output, &Response { id: request.id, logits })?;
        output.write_all(b"\n")?;
        output.flush()?;
        served += 1;
    }
    Ok(())
}
