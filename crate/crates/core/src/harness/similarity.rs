//! Ground-truth pairing by averaged flow similarity.

use std::collections::BTreeMap;
use std::time::Duration;

use super::features::{window_count, FeatureSeries};
use super::trace::{FlowId, FlowTrace};

/// Mean per-window Euclidean distance between the (mean packet size, mean
/// inter-packet delay) vectors of `a` and `b`, on windows anchored to `a`'s
/// own time range.
pub fn flow_distance(a: &FlowTrace, b: &FlowTrace, window: Duration) -> f64 {
    let start = a.start().unwrap_or(0);
    let end = a.end().unwrap_or(0);
    let n = window_count(start, end, window, 1);
    let fa = FeatureSeries::compute(a, start, window, n);
    let fb = FeatureSeries::compute(b, start, window, n);
    let sum: f64 = (0..n)
        .map(|i| {
            let ds = fa.mean_size[i] - fb.mean_size[i];
            let dt = fa.mean_ipd_ms[i] - fb.mean_ipd_ms[i];
            (ds * ds + dt * dt).sqrt()
        })
        .sum();
    sum / n as f64
}

/// Matches each ingress flow to the egress flow at minimum distance; ties go
/// to the lowest egress flow id. Empty on empty input.
pub fn ground_truth_pairs(
    ingress: &[FlowTrace],
    egress: &[FlowTrace],
    window: Duration,
) -> BTreeMap<FlowId, FlowId> {
    let mut candidates: Vec<&FlowTrace> = egress.iter().collect();
    candidates.sort_by_key(|t| t.flow_id());
    let mut pairs = BTreeMap::new();
    for fi in ingress {
        let mut best: Option<(f64, FlowId)> = None;
        for fe in &candidates {
            let d = flow_distance(fi, fe, window);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, fe.flow_id()));
            }
        }
        if let Some((_, id)) = best {
            pairs.insert(fi.flow_id(), id);
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::trace::{Direction, FlowEvent, PacketDir};
    use proptest::prelude::*;

    const W: Duration = Duration::from_millis(500);

    fn periodic(
        id: u32,
        direction: Direction,
        start: u64,
        gap: u64,
        size: u32,
        n: u64,
    ) -> FlowTrace {
        let events = (0..n)
            .map(|i| FlowEvent {
                t_micros: start + i * gap,
                bytes: size,
                dir: PacketDir::ToClient,
            })
            .collect();
        FlowTrace::from_events(id, direction, events).unwrap()
    }

    #[test]
    fn single_pair() {
        let i = periodic(4, Direction::Ingress, 0, 10_000, 100, 50);
        let e = periodic(9, Direction::Egress, 0, 30_000, 900, 5);
        assert_eq!(ground_truth_pairs(&[i], &[e], W), BTreeMap::from([(4, 9)]));
    }

    #[test]
    fn duplicate_egress_picks_lowest_id() {
        let i = periodic(0, Direction::Ingress, 0, 10_000, 100, 50);
        let e5 = periodic(5, Direction::Egress, 0, 10_000, 108, 50);
        let e2 = periodic(2, Direction::Egress, 0, 10_000, 108, 50);
        assert_eq!(ground_truth_pairs(&[i], &[e5, e2], W)[&0], 2);
    }

    #[test]
    fn matches_relayed_copies() {
        let ingress: Vec<FlowTrace> = (0..6)
            .map(|k| {
                periodic(
                    k,
                    Direction::Ingress,
                    k as u64 * 70_000,
                    5_000 + k as u64 * 3_000,
                    200 + k * 150,
                    200,
                )
            })
            .collect();
        // Egress copies: +8 bytes per packet, 2 ms later, ids reversed.
        let egress: Vec<FlowTrace> = (0..6)
            .map(|k| {
                periodic(
                    10 - k,
                    Direction::Egress,
                    k as u64 * 70_000 + 2_000,
                    5_000 + k as u64 * 3_000,
                    208 + k * 150,
                    200,
                )
            })
            .collect();
        let pairs = ground_truth_pairs(&ingress, &egress, W);
        for k in 0..6 {
            assert_eq!(pairs[&k], 10 - k);
        }
    }

    proptest! {
        #[test]
        fn egress_order_does_not_matter(
            specs in proptest::collection::vec((0u64..500_000, 1_000u64..50_000, 40u32..1500, 2u64..60), 2..8),
            rot in 0usize..8,
        ) {
            let ingress: Vec<FlowTrace> = specs
                .iter()
                .enumerate()
                .map(|(k, &(s, g, b, n))| periodic(k as u32, Direction::Ingress, s, g, b, n))
                .collect();
            let egress: Vec<FlowTrace> = specs
                .iter()
                .enumerate()
                .map(|(k, &(s, g, b, n))| periodic(100 + k as u32, Direction::Egress, s + 1_000, g, b + 8, n))
                .collect();
            let mut permuted = egress.clone();
            permuted.rotate_left(rot % egress.len());
            permuted.reverse();
            prop_assert_eq!(
                ground_truth_pairs(&ingress, &egress, W),
                ground_truth_pairs(&ingress, &permuted, W)
            );
        }
    }
}
