//! Stream and graph statistics used by the controller.

use std::collections::{HashSet, VecDeque};

use thiserror::Error;

use crate::edge_table::EdgeTable;

/// Default number of trailing buckets for the diversity ratio.
pub const DEFAULT_DIVERSITY_WINDOW: usize = 5;
/// Default trailing window for slope estimates.
pub const DEFAULT_SLOPE_WINDOW: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("negative delay for bucket {bucket}: delta={delta}, alpha={alpha}")]
    NegativeDelay { bucket: u64, delta: f64, alpha: f64 },
}

/// Graph density `2|E| / (|V|(|V|-1))`, with `|E|` the distinct rows.
///
/// Buckets with fewer than two nodes have density 0. Directed tables can in
/// principle exceed 1, so the value is clamped.
pub fn density(t: &EdgeTable) -> f64 {
    density_of(t.n_nodes(), t.n_edges())
}

pub fn density_of(n_nodes: usize, n_edges: usize) -> f64 {
    if n_nodes < 2 {
        return 0.0;
    }
    let v = n_nodes as f64;
    (2.0 * n_edges as f64 / (v * (v - 1.0))).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketMeta {
    pub bucket_index: u64,
    pub n_raw_records: u64,
    pub n_nodes: u64,
    pub n_edges: u64,
    /// Nodes absent from the previous k buckets.
    pub n_new_nodes: u64,
    pub first_ts: Option<u64>,
    pub last_ts: Option<u64>,
}

/// Remembers the node-key sets of the last k buckets.
#[derive(Debug, Clone)]
pub struct DiversityTracker {
    k: usize,
    recent: VecDeque<HashSet<(String, String)>>,
    history: Vec<BucketMeta>,
    next_index: u64,
}

impl DiversityTracker {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(1), recent: VecDeque::new(), history: Vec::new(), next_index: 0 }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Counts how many of the table's nodes are new, without recording it.
    pub fn peek_new(&self, t: &EdgeTable) -> u64 {
        t.index()
            .iter()
            .filter(|n| {
                let key = (n.label.clone(), n.key.clone());
                !self.recent.iter().any(|s| s.contains(&key))
            })
            .count() as u64
    }

    /// ρ for the given table as if it were the next bucket.
    pub fn peek_ratio(&self, t: &EdgeTable) -> f64 {
        let mut hist: Vec<BucketMeta> = self.history.clone();
        hist.push(self.meta_for(t, self.peek_new(t)));
        diversity_ratio(&hist, self.k)
    }

    fn meta_for(&self, t: &EdgeTable, n_new: u64) -> BucketMeta {
        BucketMeta {
            bucket_index: self.next_index,
            n_raw_records: t.meta.n_raw_records,
            n_nodes: t.n_nodes() as u64,
            n_edges: t.n_edges() as u64,
            n_new_nodes: n_new,
            first_ts: t.meta.first_ts,
            last_ts: t.meta.last_ts,
        }
    }

    /// Records the table as the next bucket and returns its metadata.
    pub fn observe(&mut self, t: &EdgeTable) -> BucketMeta {
        let meta = self.meta_for(t, self.peek_new(t));
        self.next_index += 1;
        let keys = t.index().iter().map(|n| (n.label.clone(), n.key.clone())).collect();
        self.recent.push_back(keys);
        while self.recent.len() > self.k {
            self.recent.pop_front();
        }
        self.history.push(meta.clone());
        if self.history.len() > 4 * self.k {
            self.history.drain(..self.history.len() - self.k);
        }
        meta
    }

    pub fn history(&self) -> &[BucketMeta] {
        &self.history
    }

    pub fn ratio(&self) -> f64 {
        diversity_ratio(&self.history, self.k)
    }
}

/// Mean share of new nodes over the last `min(k, len)` buckets.
///
/// Empty buckets are left out. With nothing left, ρ is 1.
pub fn diversity_ratio(history: &[BucketMeta], k: usize) -> f64 {
    let k = k.max(1);
    let tail = &history[history.len().saturating_sub(k)..];
    let ratios: Vec<f64> =
        tail.iter().filter(|b| b.n_nodes > 0).map(|b| b.n_new_nodes as f64 / b.n_nodes as f64).collect();
    if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Trend {
    /// Backward difference of the last two samples.
    pub velocity: Option<f64>,
    /// OLS slope over the trailing window.
    pub slope: Option<f64>,
}

/// First derivative and regression slope of a unit-spaced series.
pub fn velocity_and_slope(samples: &[f64], window: usize) -> Trend {
    let velocity = match samples {
        [.., a, b] => Some(b - a),
        _ => None,
    };
    let tail = &samples[samples.len().saturating_sub(window.max(3))..];
    Trend { velocity, slope: ols_slope(tail) }
}

fn ols_slope(ys: &[f64]) -> Option<f64> {
    if ys.len() < 3 {
        return None;
    }
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    Some(sxy / sxx)
}

/// A sample from the database host.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfSample {
    pub ts: u64,
    /// User CPU percent in [0, 100].
    pub cpu_user: f64,
    pub mem_available: u64,
    pub context_switches_per_s: f64,
    pub interrupts_per_s: f64,
}

impl PerfSample {
    pub fn idle(ts: u64) -> Self {
        Self { ts, cpu_user: 0.0, mem_available: 8 << 30, context_switches_per_s: 0.0, interrupts_per_s: 0.0 }
    }
}

/// Per-bucket buffer latency δ and system delay α, in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DelayLedger {
    entries: Vec<(u64, f64, f64)>,
}

impl DelayLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_delay(&mut self, bucket: u64, delta: f64, alpha: f64) -> Result<(), MetricsError> {
        if !(delta >= 0.0 && alpha >= 0.0) {
            return Err(MetricsError::NegativeDelay { bucket, delta, alpha });
        }
        self.entries.push((bucket, delta, alpha));
        Ok(())
    }

    /// `D = Σ (δ_i + α_i)`.
    pub fn total_delay(&self) -> f64 {
        self.entries.iter().map(|(_, d, a)| d + a).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, f64, f64)] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{NodeRef, Props};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn table(edges: &[(&str, &str)]) -> EdgeTable {
        let mut t = EdgeTable::new();
        for (a, b) in edges {
            t.insert_edge(&NodeRef::new("v", *a), &NodeRef::new("v", *b), "L", &Props::new());
        }
        t
    }

    fn bucket(new: u64, total: u64) -> BucketMeta {
        BucketMeta {
            bucket_index: 0,
            n_raw_records: total,
            n_nodes: total,
            n_edges: 0,
            n_new_nodes: new,
            first_ts: None,
            last_ts: None,
        }
    }

    #[test]
    fn density_examples() {
        assert_eq!(density(&table(&[("a", "b")])), 1.0);
        assert_eq!(density(&table(&[("a", "b"), ("b", "c"), ("c", "d")])), 0.5);
        assert_eq!(density(&EdgeTable::new()), 0.0);
        let mut single = EdgeTable::new();
        single.insert_node(&NodeRef::new("v", "a"));
        assert_eq!(density(&single), 0.0);
    }

    #[test]
    fn density_ignores_counts() {
        let once = table(&[("a", "b"), ("b", "c")]);
        let many = table(&[("a", "b"), ("b", "c"), ("a", "b"), ("a", "b")]);
        assert_eq!(density(&once), density(&many));
    }

    #[test]
    fn density_matches_recount_on_random_tables() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n: usize = rng.random_range(2..30);
            let m: usize = rng.random_range(0..80);
            let edges: Vec<(String, String)> =
                (0..m).map(|_| (rng.random_range(0..n).to_string(), rng.random_range(0..n).to_string())).collect();
            let refs: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let t = table(&refs);
            let nodes: std::collections::HashSet<_> = edges.iter().flat_map(|(a, b)| [a, b]).collect();
            let distinct: std::collections::HashSet<_> = edges.iter().collect();
            let v = nodes.len() as f64;
            let expect = if nodes.len() < 2 { 0.0 } else { (2.0 * distinct.len() as f64 / (v * (v - 1.0))).min(1.0) };
            assert!((density(&t) - expect).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&density(&t)));
        }
    }

    #[test]
    fn cold_start_is_fully_diverse() {
        let mut tr = DiversityTracker::new(5);
        tr.observe(&table(&[("a", "b")]));
        assert_eq!(tr.ratio(), 1.0);
    }

    #[test]
    fn identical_buckets_have_zero_diversity() {
        let mut tr = DiversityTracker::new(1);
        let t = table(&[("a", "b"), ("c", "d")]);
        tr.observe(&t);
        tr.observe(&t);
        assert_eq!(tr.ratio(), 0.0);
    }

    #[test]
    fn empty_history_defaults_to_one() {
        assert_eq!(diversity_ratio(&[bucket(0, 0), bucket(0, 0)], 3), 1.0);
        assert_eq!(diversity_ratio(&[bucket(2, 4), bucket(0, 0)], 3), 0.5);
    }

    #[test]
    fn half_reused_hashtags_give_one_half() {
        // Bucket i holds hashtags {10i .. 10i+9}; every bucket after the first
        // shares half of them with its predecessor.
        let k = 4;
        let mut tr = DiversityTracker::new(k);
        let mut sets: Vec<std::collections::BTreeSet<u32>> = Vec::new();
        for i in 0..12u32 {
            let lo = 5 * i;
            let keys: Vec<String> = (lo..lo + 10).map(|h| h.to_string()).collect();
            let mut t = EdgeTable::new();
            for key in &keys {
                t.insert_node(&NodeRef::new("hashtag", key.as_str()));
            }
            tr.observe(&t);
            sets.push((lo..lo + 10).collect());
        }
        // Set-difference oracle.
        let mut ratios = Vec::new();
        for i in sets.len() - k..sets.len() {
            let seen: std::collections::BTreeSet<u32> =
                sets[i.saturating_sub(k)..i].iter().flatten().copied().collect();
            let new = sets[i].iter().filter(|h| !seen.contains(h)).count();
            ratios.push(new as f64 / sets[i].len() as f64);
        }
        let oracle = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((oracle - 0.5).abs() < 1e-12);
        assert!((tr.ratio() - oracle).abs() < 1e-12);
    }

    #[test]
    fn diversity_ignores_duplication() {
        let mut a = DiversityTracker::new(3);
        let mut b = DiversityTracker::new(3);
        for i in 0..6 {
            let edges: Vec<(String, String)> = (0..5).map(|j| (format!("{}", i + j), format!("x{j}"))).collect();
            let refs: Vec<(&str, &str)> = edges.iter().map(|(x, y)| (x.as_str(), y.as_str())).collect();
            let doubled: Vec<(&str, &str)> = refs.iter().chain(refs.iter()).copied().collect();
            a.observe(&table(&refs));
            b.observe(&table(&doubled));
        }
        assert_eq!(a.ratio(), b.ratio());
    }

    #[test]
    fn trend_constant_and_linear() {
        assert_eq!(velocity_and_slope(&[10.0, 10.0, 10.0], 10), Trend { velocity: Some(0.0), slope: Some(0.0) });
        let t = velocity_and_slope(&[0.0, 1.0, 2.0, 3.0], 10);
        assert_eq!(t.velocity, Some(1.0));
        assert!((t.slope.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(velocity_and_slope(&[1.0], 10), Trend::default());
        assert_eq!(velocity_and_slope(&[1.0, 2.0], 10).slope, None);
    }

    #[test]
    fn planted_slope_is_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let ys: Vec<f64> = (0..50).map(|i| 2.5 * i as f64 + noise.sample(&mut rng)).collect();
        let slope = velocity_and_slope(&ys, 50).slope.unwrap();
        assert!((2.4..=2.6).contains(&slope), "slope {slope}");
        let short = velocity_and_slope(&ys, DEFAULT_SLOPE_WINDOW).slope.unwrap();
        assert!((2.4..=2.6).contains(&short), "slope {short}");
    }

    #[test]
    fn delay_ledger_sums() {
        let mut l = DelayLedger::new();
        assert_eq!(l.total_delay(), 0.0);
        l.record_delay(0, 1.0, 0.5).unwrap();
        l.record_delay(1, 2.0, 0.0).unwrap();
        assert_eq!(l.total_delay(), 3.5);
        assert!(l.record_delay(2, -1.0, 0.0).is_err());
        assert!(l.record_delay(2, 0.0, f64::NAN).is_err());
    }
}
