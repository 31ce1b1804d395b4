//! Bandwidth and latency overhead of an obfuscated trace against the original.

use std::fmt;

use thiserror::Error;

use super::trace::FlowTrace;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverheadError {
    #[error("original trace carries no bytes")]
    EmptyOriginal,
    #[error("original trace has zero duration")]
    ZeroDuration,
    #[error("obfuscated trace has no payload events")]
    NoPayload,
}

/// `(|P'| − |P|) / |P|` over byte totals.
pub fn bandwidth_ratio(original_bytes: u64, obfuscated_bytes: u64) -> Result<f64, OverheadError> {
    if original_bytes == 0 {
        return Err(OverheadError::EmptyOriginal);
    }
    Ok((obfuscated_bytes as f64 - original_bytes as f64) / original_bytes as f64)
}

pub fn bandwidth_overhead(
    original: &FlowTrace,
    obfuscated: &FlowTrace,
) -> Result<f64, OverheadError> {
    bandwidth_ratio(original.total_bytes(), obfuscated.total_bytes())
}

/// `(t_k − t_n) / t_n`, with each trace's time measured from its first
/// payload event and `t_k`, `t_n` the last payload timestamps. Control
/// frames on the obfuscated side are ignored.
pub fn latency_overhead(
    original: &FlowTrace,
    obfuscated: &FlowTrace,
) -> Result<f64, OverheadError> {
    let t_n = payload_span(original).ok_or(OverheadError::ZeroDuration)?;
    if t_n == 0 {
        return Err(OverheadError::ZeroDuration);
    }
    let t_k = payload_span(obfuscated).ok_or(OverheadError::NoPayload)?;
    Ok((t_k as f64 - t_n as f64) / t_n as f64)
}

fn payload_span(trace: &FlowTrace) -> Option<u64> {
    let mut payload = trace.payload_events();
    let first = payload.next()?.t_micros;
    let last = payload.last().map_or(first, |e| e.t_micros);
    Some(last - first)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadReport {
    pub bandwidth: f64,
    pub latency: f64,
}

impl fmt::Display for OverheadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bandwidth_overhead={:.6}", self.bandwidth)?;
        writeln!(f, "latency_overhead={:.6}", self.latency)
    }
}
