//! Statistical flow-correlation attacker over cumulative byte progress.

use std::time::Duration;

use thiserror::Error;

use super::features::{window_count, FeatureSeries};
use super::stats::spearman;
use super::trace::{FlowTrace, PacketDir};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("flow {0} has no events")]
    EmptyFlow(u32),
    #[error("flows {0} and {1} do not overlap in time")]
    Disjoint(u32, u32),
}

/// Score assigned to a pair whose time ranges never overlap.
pub const DISJOINT_SCORE: f64 = -1.0;

/// Mean Spearman correlation of the per-window cumulative byte series of the
/// two flows, one series per packet direction, on a shared window grid over
/// the union of both time ranges. A direction where both series are constant
/// carries no information and is left out; if no direction remains the score
/// is 0.
pub fn raptor_score(fi: &FlowTrace, fe: &FlowTrace, window: Duration) -> Result<f64, ScoreError> {
    let (Some(si), Some(ei)) = (fi.start(), fi.end()) else {
        return Err(ScoreError::EmptyFlow(fi.flow_id()));
    };
    let (Some(se), Some(ee)) = (fe.start(), fe.end()) else {
        return Err(ScoreError::EmptyFlow(fe.flow_id()));
    };
    if ei < se || ee < si {
        return Err(ScoreError::Disjoint(fi.flow_id(), fe.flow_id()));
    }
    let start = si.min(se);
    let end = ei.max(ee);
    let n = window_count(start, end, window, 2);
    let a = FeatureSeries::compute(fi, start, window, n);
    let b = FeatureSeries::compute(fe, start, window, n);
    let mut total = 0.0;
    let mut used = 0;
    for dir in PacketDir::BOTH {
        let x: Vec<f64> = a.cumulative(dir).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.cumulative(dir).iter().map(|&v| v as f64).collect();
        if is_constant(&x) && is_constant(&y) {
            continue;
        }
        total += spearman(&x, &y).expect("grid has at least two windows");
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Scores every (ingress, egress) pair; disjoint pairs get `DISJOINT_SCORE`.
pub fn score_matrix(
    ingress: &[FlowTrace],
    egress: &[FlowTrace],
    window: Duration,
) -> Vec<Vec<f64>> {
    ingress
        .iter()
        .map(|fi| {
            egress
                .iter()
                .map(|fe| raptor_score(fi, fe, window).unwrap_or(DISJOINT_SCORE))
                .collect()
        })
        .collect()
}
