//! Seeded synthetic workloads.
//!
//! Each generated trace is the client-side schedule of one real connection:
//! `to_service` events are bytes the client writes, `to_client` events are
//! bytes the service writes back, both at their intended send times.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::trace::{Direction, FlowEvent, FlowTrace, PacketDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Page loads of a few objects separated by think time.
    Browsing,
    /// One request followed by a sustained full-segment stream.
    Download,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Browsing => "browsing",
            Profile::Download => "download",
        })
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "browsing" => Ok(Profile::Browsing),
            "download" => Ok(Profile::Download),
            other => Err(format!(
                "unknown profile {other:?} (expected browsing or download)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// Largest single write; responses are cut into segments of this size.
    pub segment: u32,
    /// Download throughput in bytes per second.
    pub download_rate: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            segment: 1448,
            download_rate: 2_500_000.0,
        }
    }
}

// Gap between back-to-back segments of one response.
const SEGMENT_GAP_MICROS: u64 = 120;

pub fn generate_flows(
    profile: Profile,
    n_flows: usize,
    duration: Duration,
    seed: u64,
) -> Vec<FlowTrace> {
    generate_flows_with(
        profile,
        &GeneratorParams::default(),
        n_flows,
        duration,
        seed,
    )
}

/// Flow `k` draws from its own ChaCha stream, so adding flows never changes
/// the earlier ones.
pub fn generate_flows_with(
    profile: Profile,
    params: &GeneratorParams,
    n_flows: usize,
    duration: Duration,
    seed: u64,
) -> Vec<FlowTrace> {
    let d = duration.as_micros() as u64;
    (0..n_flows)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut events = match profile {
                Profile::Browsing => browsing(&mut rng, params, d),
                Profile::Download => download(&mut rng, params, d),
            };
            events.sort_by_key(|e| e.t_micros);
            FlowTrace::from_events(k as u32, Direction::Ingress, events)
                .expect("generator emits sorted non-empty events")
        })
        .collect()
}

fn lognormal(rng: &mut ChaCha8Rng, median: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let dist = LogNormal::new(median.ln(), sigma).expect("valid lognormal");
    dist.sample(rng).clamp(lo, hi)
}

fn segments(events: &mut Vec<FlowEvent>, start: u64, total: u64, segment: u32, end: u64) -> u64 {
    let mut t = start;
    let mut left = total;
    while left > 0 && t <= end {
        let n = left.min(segment as u64);
        events.push(FlowEvent {
            t_micros: t,
            bytes: n as u32,
            dir: PacketDir::ToClient,
        });
        left -= n;
        t += SEGMENT_GAP_MICROS;
    }
    t
}

fn browsing(rng: &mut ChaCha8Rng, params: &GeneratorParams, d: u64) -> Vec<FlowEvent> {
    let start = rng.random_range(0..=d * 3 / 10);
    let end = rng.random_range(start + d * 3 / 10..=d);
    let mut events = Vec::new();
    let mut page = start;
    while page <= end {
        let objects = rng.random_range(1..=5);
        let mut page_done = page;
        for _ in 0..objects {
            let request_at = page + rng.random_range(0..20_000);
            if request_at > end {
                break;
            }
            let request = lognormal(rng, 450.0, 0.4, 100.0, 2000.0) as u32;
            events.push(FlowEvent {
                t_micros: request_at,
                bytes: request,
                dir: PacketDir::ToService,
            });
            let response_at = request_at + rng.random_range(5_000..40_000);
            let response = lognormal(rng, 15_000.0, 1.0, 300.0, 1_000_000.0) as u64;
            page_done = page_done.max(segments(
                &mut events,
                response_at,
                response,
                params.segment,
                end,
            ));
        }
        let think = lognormal(rng, 1_000_000.0, 0.8, 50_000.0, 8_000_000.0) as u64;
        page = page_done + think;
    }
    events
}

fn download(rng: &mut ChaCha8Rng, params: &GeneratorParams, d: u64) -> Vec<FlowEvent> {
    let start = rng.random_range(0..=d / 10);
    let end = rng.random_range(d * 6 / 10..=d);
    let gap = ((params.segment as f64 / params.download_rate) * 1e6).max(1.0) as u64;
    let mut events = vec![FlowEvent {
        t_micros: start,
        bytes: 300,
        dir: PacketDir::ToService,
    }];
    let mut t = start + 10_000;
    while t <= end {
        events.push(FlowEvent {
            t_micros: t,
            bytes: params.segment,
            dir: PacketDir::ToClient,
        });
        t += gap;
    }
    events
}
