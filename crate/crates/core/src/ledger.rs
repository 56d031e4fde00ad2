//! Space-time-product cost accounting.
//!
//! Every tick, each placed program charges its memory footprint to exactly
//! one component; free, uncommitted pool capacity charges to `Unused` while
//! any program waits in the global queue. The continuous STP integral is
//! discretized to exact integer token·tick sums so that additivity can be
//! asserted exactly rather than within a tolerance.
//!
//! Component semantics:
//! - `Decode`: footprint of a program while it emits tokens.
//! - `Prefill`: footprint while computing genuinely new tokens (prompt or
//!   tool-result increments).
//! - `Recompute`: footprint while re-computing previously materialized KV
//!   that was evicted — the thrashing cost.
//! - `Unused`: pool capacity committed to nobody while programs wait.
//! - `Caching`: resident KV held idle (tool running, or waiting for a
//!   prefill slot).

use crate::types::{BackendId, ProgramId, TokenTicks, Tokens};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum CostComponent {
    Decode,
    Prefill,
    Recompute,
    Unused,
    Caching,
}

impl CostComponent {
    pub const ALL: [CostComponent; 5] = [
        CostComponent::Decode,
        CostComponent::Prefill,
        CostComponent::Recompute,
        CostComponent::Unused,
        CostComponent::Caching,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CostComponent::Decode => "decode",
            CostComponent::Prefill => "prefill",
            CostComponent::Recompute => "recompute",
            CostComponent::Unused => "unused",
            CostComponent::Caching => "caching",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("chunk size must be at least 1")]
    InvalidChunk,
    #[error("no prefill activity recorded")]
    NoPrefillActivity,
    #[error("imbalance needs at least two backends")]
    FewerThanTwoBackends,
}

/// One rectangle of the discretized STP integral: `tokens` held for
/// `duration` ticks, attributed to one component on one backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StpSample {
    pub program: Option<ProgramId>,
    pub backend: BackendId,
    pub component: CostComponent,
    pub tokens: Tokens,
    pub duration: u64,
}

impl StpSample {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.duration == 0 {
            return Err(LedgerError::InvalidSample("duration must be > 0".into()));
        }
        if self.component == CostComponent::Unused && self.program.is_some() {
            return Err(LedgerError::InvalidSample(
                "unused samples carry no program".into(),
            ));
        }
        Ok(())
    }

    pub fn cost(&self) -> TokenTicks {
        self.tokens * self.duration
    }
}

/// Append-only STP ledger with per-component and per-backend accumulators.
///
/// Accumulators are updated on every `record`, so `decompose` never walks the
/// sample log. Sample retention is optional (tests turn it on to assert that
/// the accumulators equal the fold of the samples).
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    totals: BTreeMap<CostComponent, TokenTicks>,
    per_backend: BTreeMap<(BackendId, CostComponent), TokenTicks>,
    retained: Option<Vec<StpSample>>,
    hit_tokens: Tokens,
    missed_tokens: Tokens,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps every sample in memory; only worth it for small runs and
    /// fold-equality tests.
    pub fn with_retained_samples() -> Self {
        CostLedger {
            retained: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn record(&mut self, sample: StpSample) -> Result<(), LedgerError> {
        sample.validate()?;
        *self.totals.entry(sample.component).or_insert(0) += sample.cost();
        *self
            .per_backend
            .entry((sample.backend, sample.component))
            .or_insert(0) += sample.cost();
        if let Some(log) = self.retained.as_mut() {
            log.push(sample);
        }
        Ok(())
    }

    /// Resume accounting feeding the hit-rate metric. Only resume-time
    /// historical tokens count: incremental prefill of genuinely new
    /// tool-result tokens is unavoidable work under every policy and would
    /// dilute the signal.
    pub fn record_resume_hit(&mut self, cached_tokens: Tokens) {
        self.hit_tokens += cached_tokens;
    }

    pub fn record_resume_miss(&mut self, historical_tokens: Tokens) {
        self.missed_tokens += historical_tokens;
    }

    pub fn decompose(&self) -> BTreeMap<CostComponent, TokenTicks> {
        let mut out = BTreeMap::new();
        for c in CostComponent::ALL {
            out.insert(c, self.totals.get(&c).copied().unwrap_or(0));
        }
        out
    }

    pub fn total(&self) -> TokenTicks {
        self.totals.values().sum()
    }

    pub fn component(&self, c: CostComponent) -> TokenTicks {
        self.totals.get(&c).copied().unwrap_or(0)
    }

    pub fn backend_component(&self, b: BackendId, c: CostComponent) -> TokenTicks {
        self.per_backend.get(&(b, c)).copied().unwrap_or(0)
    }

    pub fn kv_hit_rate(&self) -> Result<f64, LedgerError> {
        let denom = self.hit_tokens + self.missed_tokens;
        if denom == 0 {
            return Err(LedgerError::NoPrefillActivity);
        }
        Ok(self.hit_tokens as f64 / denom as f64)
    }

    pub fn hit_miss_tokens(&self) -> (Tokens, Tokens) {
        (self.hit_tokens, self.missed_tokens)
    }

    pub fn retained_samples(&self) -> Option<&[StpSample]> {
        self.retained.as_deref()
    }
}

/// STP cost of fully re-prefilling a context of `c` tokens with chunked
/// prefill: the KV footprint grows by `chunk` per tick, so the cost is the
/// staircase sum `Σ_{k=1..⌈c/chunk⌉} min(k·chunk, c)` — asymptotically
/// quadratic in `c` at fixed chunk size.
pub fn recompute_cost_of(context_tokens: Tokens, chunk: Tokens) -> Result<TokenTicks, LedgerError> {
    if chunk == 0 {
        return Err(LedgerError::InvalidChunk);
    }
    let mut total: TokenTicks = 0;
    let mut materialized: Tokens = 0;
    while materialized < context_tokens {
        materialized = (materialized + chunk).min(context_tokens);
        total += materialized;
    }
    Ok(total)
}

/// Max-over-time memory imbalance across backends: `(max − min) / capacity`
/// per snapshot, maximum over the sequence.
pub fn max_imbalance(
    snapshots: &[Vec<Tokens>],
    capacity_tokens: Tokens,
) -> Result<f64, LedgerError> {
    Ok(imbalance_series(snapshots, capacity_tokens)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Per-snapshot imbalance fractions; used for interval-wise policy
/// comparisons.
pub fn imbalance_series(
    snapshots: &[Vec<Tokens>],
    capacity_tokens: Tokens,
) -> Result<Vec<f64>, LedgerError> {
    if snapshots.iter().any(|s| s.len() < 2) {
        return Err(LedgerError::FewerThanTwoBackends);
    }
    Ok(snapshots
        .iter()
        .map(|s| {
            let max = *s.iter().max().expect("nonempty");
            let min = *s.iter().min().expect("nonempty");
            (max - min) as f64 / capacity_tokens as f64
        })
        .collect())
}

/// Distribution summary for per-step end-to-end latency, in ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub samples: u64,
}

impl LatencySummary {
    pub fn from_samples(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let pick = |q: f64| -> u64 {
            let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
            samples[rank - 1]
        };
        LatencySummary {
            mean: samples.iter().sum::<u64>() as f64 / n as f64,
            p50: pick(0.50),
            p95: pick(0.95),
            p99: pick(0.99),
            samples: n as u64,
        }
    }
}

/// The derived metrics of one run, serialized into the structured summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub throughput_steps_per_min: f64,
    /// `None` when no resume activity happened (nothing to rate).
    pub kv_hit_rate: Option<f64>,
    pub max_imbalance: f64,
    pub per_step_latency: LatencySummary,
    pub cost_breakdown: BTreeMap<CostComponent, TokenTicks>,
    pub disk_peak: u64,
    pub prep_overlap_savings: u64,
    pub total_steps: u64,
    pub duration_ticks: u64,
    pub completed_programs: u64,
    pub pauses: u64,
    pub restores: u64,
    pub resume_hits: u64,
    pub resume_misses: u64,
    pub decode_stall_ticks: u64,
    pub forced_reasoning_evictions: u64,
    pub reasoning_eviction_recompute_tokens: Tokens,
}

impl MetricsReport {
    pub fn cost_total(&self) -> TokenTicks {
        self.cost_breakdown.values().sum()
    }
}

/// One per-interval, per-backend row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub tick: u64,
    pub backend: BackendId,
    pub resident_tokens: Tokens,
    pub decode: TokenTicks,
    pub prefill: TokenTicks,
    pub recompute: TokenTicks,
    pub unused: TokenTicks,
    pub caching: TokenTicks,
    /// Cumulative hit rate up to this interval; empty cell when undefined.
    pub hit_rate: Option<f64>,
    pub imbalance: f64,
}

pub const INTERVAL_CSV_HEADER: &str =
    "tick,backend,resident_tokens,decode,prefill,recompute,unused,caching,hit_rate,imbalance";

pub fn interval_rows_to_csv(rows: &[IntervalRow]) -> String {
    let mut out = String::from(INTERVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let hit = r
            .hit_rate
            .map(|h| format!("{h:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6}\n",
            r.tick,
            r.backend,
            r.resident_tokens,
            r.decode,
            r.prefill,
            r.recompute,
            r.unused,
            r.caching,
            hit,
            r.imbalance
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample(c: CostComponent, tokens: Tokens, duration: u64) -> StpSample {
        StpSample {
            program: if c == CostComponent::Unused {
                None
            } else {
                Some(ProgramId::new("p"))
            },
            backend: BackendId(0),
            component: c,
            tokens,
            duration,
        }
    }

    #[test]
    fn record_is_rectangle_integral() {
        let mut ledger = CostLedger::new();
        ledger
            .record(sample(CostComponent::Caching, 10, 5))
            .unwrap();
        assert_eq!(ledger.component(CostComponent::Caching), 50);
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let mut ledger = CostLedger::new();
        ledger
            .record(sample(CostComponent::Decode, 0, 100))
            .unwrap();
        assert_eq!(ledger.total(), 0);
    }

    #[test]
    fn chunked_recompute_staircase_matches_closed_form() {
        // c=8 at chunk=2 logged as four samples (2,1),(4,1),(6,1),(8,1).
        let mut ledger = CostLedger::new();
        for tokens in [2, 4, 6, 8] {
            ledger
                .record(sample(CostComponent::Recompute, tokens, 1))
                .unwrap();
        }
        assert_eq!(ledger.component(CostComponent::Recompute), 20);
        assert_eq!(recompute_cost_of(8, 2).unwrap(), 20);
    }

    #[test]
    fn recompute_cost_oracle() {
        // Independent brute-force staircase.
        fn brute(c: u64, chunk: u64) -> u64 {
            let mut total = 0;
            let mut k = 1;
            while (k - 1) * chunk < c {
                total += (k * chunk).min(c);
                k += 1;
            }
            total
        }
        for (c, chunk) in [(8, 2), (0, 4), (1, 1), (7, 3), (100, 7), (16384, 64)] {
            assert_eq!(recompute_cost_of(c, chunk).unwrap(), brute(c, chunk));
        }
        assert_eq!(recompute_cost_of(0, 4).unwrap(), 0);
        assert_eq!(recompute_cost_of(5, 0).unwrap_err(), LedgerError::InvalidChunk);
    }

    #[test]
    fn recompute_cost_monotone_and_superadditive() {
        let chunk = 16;
        let mut prev = 0;
        for c in (chunk..4096).step_by(chunk as usize) {
            let cost = recompute_cost_of(c, chunk).unwrap();
            assert!(cost > prev);
            prev = cost;
        }
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..500 {
            let a = rng.gen_range(chunk..2000);
            let b = rng.gen_range(chunk..2000);
            let joint = recompute_cost_of(a + b, chunk).unwrap();
            let split =
                recompute_cost_of(a, chunk).unwrap() + recompute_cost_of(b, chunk).unwrap();
            assert!(joint > split, "superadditivity failed at a={a} b={b}");
        }
    }

    #[test]
    fn decompose_is_additive_and_matches_fold() {
        let mut ledger = CostLedger::with_retained_samples();
        assert!(ledger.decompose().values().all(|&v| v == 0));

        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..2000 {
            let c = CostComponent::ALL[rng.gen_range(0..5)];
            ledger
                .record(sample(c, rng.gen_range(0..500), rng.gen_range(1..8)))
                .unwrap();
        }
        let decomposed = ledger.decompose();
        assert_eq!(decomposed.values().sum::<u64>(), ledger.total());

        // Accumulators must equal the fold of the retained samples exactly.
        let mut fold: BTreeMap<CostComponent, u64> = BTreeMap::new();
        for s in ledger.retained_samples().unwrap() {
            *fold.entry(s.component).or_insert(0) += s.cost();
        }
        for c in CostComponent::ALL {
            assert_eq!(
                decomposed[&c],
                fold.get(&c).copied().unwrap_or(0),
                "drift in {c:?}"
            );
        }
    }

    #[test]
    fn two_component_example() {
        let mut ledger = CostLedger::new();
        ledger
            .record(sample(CostComponent::Decode, 100, 3))
            .unwrap();
        ledger
            .record(sample(CostComponent::Unused, 50, 2))
            .unwrap();
        let d = ledger.decompose();
        assert_eq!(d[&CostComponent::Decode], 300);
        assert_eq!(d[&CostComponent::Unused], 100);
        assert_eq!(d[&CostComponent::Prefill], 0);
        assert_eq!(d[&CostComponent::Recompute], 0);
        assert_eq!(d[&CostComponent::Caching], 0);
    }

    #[test]
    fn unused_samples_reject_program_attribution() {
        let mut ledger = CostLedger::new();
        let bad = StpSample {
            program: Some(ProgramId::new("p")),
            backend: BackendId(0),
            component: CostComponent::Unused,
            tokens: 5,
            duration: 1,
        };
        assert!(ledger.record(bad).is_err());
    }

    #[test]
    fn hit_rate_definition() {
        let mut ledger = CostLedger::new();
        assert_eq!(ledger.kv_hit_rate(), Err(LedgerError::NoPrefillActivity));
        // Three resumes of c=100 with one full miss.
        ledger.record_resume_hit(100);
        ledger.record_resume_hit(100);
        ledger.record_resume_miss(100);
        let rate = ledger.kv_hit_rate().unwrap();
        assert!((rate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hit_rate_extremes() {
        let mut all_hit = CostLedger::new();
        all_hit.record_resume_hit(500);
        assert_eq!(all_hit.kv_hit_rate().unwrap(), 1.0);
        let mut all_miss = CostLedger::new();
        all_miss.record_resume_miss(500);
        assert_eq!(all_miss.kv_hit_rate().unwrap(), 0.0);
    }

    #[test]
    fn hit_rate_ignores_non_prefill_sample_order() {
        let mut a = CostLedger::new();
        let mut b = CostLedger::new();
        a.record(sample(CostComponent::Decode, 10, 1)).unwrap();
        a.record_resume_hit(70);
        a.record(sample(CostComponent::Caching, 10, 1)).unwrap();
        a.record_resume_miss(30);
        b.record_resume_miss(30);
        b.record_resume_hit(70);
        b.record(sample(CostComponent::Caching, 10, 1)).unwrap();
        b.record(sample(CostComponent::Decode, 10, 1)).unwrap();
        assert_eq!(a.kv_hit_rate().unwrap(), b.kv_hit_rate().unwrap());
    }

    #[test]
    fn imbalance_formula() {
        // Identical footprints are perfectly balanced.
        assert_eq!(
            max_imbalance(&[vec![400, 400], vec![10, 10]], 1000).unwrap(),
            0.0
        );
        // Peak of (900 − 390) / 1000.
        let peak = max_imbalance(&[vec![500, 500], vec![900, 390]], 1000).unwrap();
        assert!((peak - 0.51).abs() < 1e-12);
        // A single snapshot of (0, C) is the extreme case.
        assert_eq!(max_imbalance(&[vec![0, 1000]], 1000).unwrap(), 1.0);
        assert_eq!(
            max_imbalance(&[vec![5]], 1000).unwrap_err(),
            LedgerError::FewerThanTwoBackends
        );
    }

    #[test]
    fn latency_summary_percentiles() {
        let s = LatencySummary::from_samples((1..=100).collect());
        assert_eq!(s.p50, 50);
        assert_eq!(s.p95, 95);
        assert_eq!(s.p99, 99);
        assert!((s.mean - 50.5).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_have_fixed_columns() {
        let rows = vec![IntervalRow {
            tick: 5,
            backend: BackendId(1),
            resident_tokens: 123,
            decode: 10,
            prefill: 2,
            recompute: 0,
            unused: 7,
            caching: 4,
            hit_rate: None,
            imbalance: 0.25,
        }];
        let csv = interval_rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), INTERVAL_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "5,1,123,10,2,0,7,4,,0.250000");
    }
}
