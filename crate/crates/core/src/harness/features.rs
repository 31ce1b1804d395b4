//! Per-window flow features.

use std::time::Duration;

use super::trace::{FlowTrace, PacketDir};

pub const DEFAULT_FEATURE_WINDOW: Duration = Duration::from_millis(500);

/// Windowed view of one trace over `[start, start + windows * window)`.
///
/// Cumulative bytes are tracked per packet direction; mean packet size
/// (bytes) and mean inter-packet delay (milliseconds) cover both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub window: Duration,
    pub start_micros: u64,
    pub cumulative_to_service: Vec<u64>,
    pub cumulative_to_client: Vec<u64>,
    pub mean_size: Vec<f64>,
    pub mean_ipd_ms: Vec<f64>,
}

/// `⌈(end − start) / window⌉`, at least `min`.
pub fn window_count(start_micros: u64, end_micros: u64, window: Duration, min: usize) -> usize {
    let w = window.as_micros().max(1) as u64;
    let span = end_micros.saturating_sub(start_micros);
    (span.div_ceil(w) as usize).max(min)
}

impl FeatureSeries {
    /// Bins the events of `trace` that fall in `[start, end]` into
    /// `windows` windows. An event exactly at the far edge lands in the last
    /// window; events outside the range are ignored.
    pub fn compute(trace: &FlowTrace, start_micros: u64, window: Duration, windows: usize) -> Self {
        let w = window.as_micros().max(1) as u64;
        let mut up = vec![0u64; windows];
        let mut down = vec![0u64; windows];
        let mut size_sum = vec![0u64; windows];
        let mut count = vec![0u64; windows];
        let mut ipd_sum = vec![0u64; windows];
        let mut ipd_count = vec![0u64; windows];
        let mut prev: Option<(usize, u64)> = None;
        let limit = start_micros + w * windows as u64;
        for e in trace.events() {
            if e.t_micros < start_micros || e.t_micros > limit || windows == 0 {
                continue;
            }
            let idx = (((e.t_micros - start_micros) / w) as usize).min(windows - 1);
            match e.dir {
                PacketDir::ToService => up[idx] += e.bytes as u64,
                PacketDir::ToClient => down[idx] += e.bytes as u64,
            }
            size_sum[idx] += e.bytes as u64;
            count[idx] += 1;
            if let Some((pidx, pt)) = prev {
                if pidx == idx {
                    ipd_sum[idx] += e.t_micros - pt;
                    ipd_count[idx] += 1;
                }
            }
            prev = Some((idx, e.t_micros));
        }
        let cumulate = |v: Vec<u64>| {
            v.into_iter()
                .scan(0u64, |acc, b| {
                    *acc += b;
                    Some(*acc)
                })
                .collect()
        };
        let ratio = |num: &[u64], den: &[u64], scale: f64| -> Vec<f64> {
            num.iter()
                .zip(den)
                .map(|(&n, &d)| {
                    if d == 0 {
                        0.0
                    } else {
                        n as f64 / d as f64 / scale
                    }
                })
                .collect()
        };
        FeatureSeries {
            window,
            start_micros,
            mean_size: ratio(&size_sum, &count, 1.0),
            mean_ipd_ms: ratio(&ipd_sum, &ipd_count, 1000.0),
            cumulative_to_service: cumulate(up),
            cumulative_to_client: cumulate(down),
        }
    }

    /// Series spanning the trace's own time range.
    pub fn of_trace(trace: &FlowTrace, window: Duration) -> Self {
        let start = trace.start().unwrap_or(0);
        let end = trace.end().unwrap_or(0);
        FeatureSeries::compute(trace, start, window, window_count(start, end, window, 1))
    }

    pub fn len(&self) -> usize {
        self.mean_size.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_size.is_empty()
    }

    pub fn cumulative(&self, dir: PacketDir) -> &[u64] {
        match dir {
            PacketDir::ToService => &self.cumulative_to_service,
            PacketDir::ToClient => &self.cumulative_to_client,
        }
    }
}
