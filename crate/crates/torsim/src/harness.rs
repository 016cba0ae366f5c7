//! Experiment orchestration: gamma sweeps, saturation verdicts, gamma*
//! extraction and CSV output.

use crate::config::{ConfigError, SimConfig};
use crate::engine::{run, RunStats};
use rayon::prelude::*;
use std::fmt;
use std::io::{self, Write};

#[derive(Clone, Copy, Debug)]
pub struct SaturationThresholds {
    /// Below this many measured packets the verdict is Inconclusive.
    pub min_consumed: u64,
    /// Last/first window mean lifetime ratio that counts as growth.
    pub growth_ratio: f64,
    /// Absolute floor (packets) on the generated-minus-consumed deficit that
    /// counts as rate imbalance.
    pub backlog_margin: u64,
    /// Relative floor: deficit as a fraction of packets generated in the
    /// measurement interval.
    pub backlog_frac: f64,
    /// Fraction of arriving packets the bounded source queues may reject
    /// before the run counts as saturated.
    pub drop_frac: f64,
}

impl Default for SaturationThresholds {
    fn default() -> Self {
        SaturationThresholds {
            min_consumed: 100,
            growth_ratio: 1.5,
            backlog_margin: 96,
            backlog_frac: 0.04,
            drop_frac: 0.02,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Verdict {
    Stable,
    Saturated,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "stable",
            Verdict::Saturated => "saturated",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Saturated when any of three overload signals fires:
/// - sub-window mean lifetimes grow strictly and substantially,
/// - rate imbalance: packets generated inside the measurement interval
///   outnumber those consumed in it by more than a margin,
/// - source-queue drops: the bounded per-node queues rejected more than a
///   small fraction of arriving traffic.
/// All three are finite-window stand-ins for "lifetime grows without bound".
/// The deficit and drop tests use exact event counters rather than sampled
/// backlog, so periodic burst phases cannot alias them into a miss.
pub fn detect_saturation(stats: &RunStats, th: &SaturationThresholds) -> Verdict {
    if stats.consumed_measure < th.min_consumed {
        return Verdict::Inconclusive;
    }
    let wm = &stats.window_mean_lifetime;
    let lifetime_growth = wm.len() >= 2
        && wm[0] > 0.0
        && wm.windows(2).all(|w| w[1] > w[0])
        && wm[wm.len() - 1] / wm[0] > th.growth_ratio;
    let deficit = stats.generated_measure.saturating_sub(stats.consumed_measure) as f64;
    let margin = (th.backlog_margin as f64).max(th.backlog_frac * stats.generated_measure as f64);
    let rate_imbalance = stats.generated_measure > 0 && deficit >= margin;
    let arrived = stats.generated_measure + stats.dropped_measure;
    let dropping = arrived > 0 && stats.dropped_measure as f64 > th.drop_frac * arrived as f64;
    if lifetime_growth || rate_imbalance || dropping {
        Verdict::Saturated
    } else {
        Verdict::Stable
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Template config; gamma and seed are overridden per run.
    pub base: SimConfig,
    /// Strictly increasing offered loads, in gamma_0 units.
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub thresholds: SaturationThresholds,
    /// Stop a seed's sweep after this many consecutive saturated points.
    pub early_stop: usize,
}

impl SweepSpec {
    pub fn new(base: SimConfig) -> Self {
        SweepSpec {
            base,
            gammas: default_gammas(),
            seeds: vec![1, 2, 3],
            thresholds: SaturationThresholds::default(),
            early_stop: 2,
        }
    }
}

/// 0.05 to 1.00 in steps of 0.05.
pub fn default_gammas() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// One completed run within a sweep.
#[derive(Clone, Debug)]
pub struct RunRow {
    pub gamma: f64,
    pub seed: u64,
    pub verdict: Verdict,
    /// The run was re-done with a longer measurement after an inconclusive
    /// first verdict.
    pub extended: bool,
    pub stats: RunStats,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// All rows, ordered by (gamma, seed).
    pub rows: Vec<RunRow>,
    /// Median of the per-seed gamma* values (lower median, conservative).
    pub gamma_star: f64,
    pub per_seed_gamma_star: Vec<(u64, f64)>,
    /// Every swept gamma stayed stable, so gamma* is only a lower bound.
    pub sweep_limited: bool,
    /// A stable verdict appeared above a saturated one in some seed.
    pub non_monotone: bool,
}

fn run_one(base: &SimConfig, gamma: f64, seed: u64, th: &SaturationThresholds) -> Result<RunRow, ConfigError> {
    let mut cfg = base.clone();
    cfg.gamma = gamma;
    cfg.seed = seed;
    let stats = run(&cfg)?;
    let mut verdict = detect_saturation(&stats, th);
    let mut extended = false;
    if verdict == Verdict::Inconclusive {
        let mut longer = cfg.clone();
        longer.measure_ns = cfg.measure_ns * 4;
        let stats2 = run(&longer)?;
        verdict = detect_saturation(&stats2, th);
        extended = true;
        if verdict == Verdict::Inconclusive {
            // still too little traffic to say anything: call it stable
            verdict = Verdict::Stable;
        }
        return Ok(RunRow { gamma, seed, verdict, extended, stats: stats2 });
    }
    Ok(RunRow { gamma, seed, verdict, extended, stats })
}

/// Ascending sweep per seed with early stop; gamma* per seed is the largest
/// stable prefix of the sweep, and the cell's gamma* the seed median.
pub fn find_gamma_star(spec: &SweepSpec) -> Result<SweepOutcome, ConfigError> {
    assert!(
        spec.gammas.windows(2).all(|w| w[1] > w[0]),
        "gamma sweep must be strictly increasing"
    );
    let per_seed: Vec<Result<(u64, Vec<RunRow>), ConfigError>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rows = Vec::new();
            let mut consecutive = 0usize;
            for &gamma in &spec.gammas {
                let row = run_one(&spec.base, gamma, seed, &spec.thresholds)?;
                let sat = row.verdict == Verdict::Saturated;
                rows.push(row);
                consecutive = if sat { consecutive + 1 } else { 0 };
                if consecutive >= spec.early_stop {
                    break;
                }
            }
            Ok((seed, rows))
        })
        .collect();

    let mut rows = Vec::new();
    let mut stars = Vec::new();
    let mut sweep_limited = false;
    let mut non_monotone = false;
    for r in per_seed {
        let (seed, seed_rows) = r?;
        let first_sat = seed_rows.iter().position(|r| r.verdict == Verdict::Saturated);
        let star = match first_sat {
            None => {
                sweep_limited = true;
                *spec.gammas.last().unwrap()
            }
            Some(0) => 0.0,
            Some(i) => {
                if seed_rows[i..].iter().any(|r| r.verdict == Verdict::Stable) {
                    non_monotone = true;
                }
                seed_rows[i - 1].gamma
            }
        };
        stars.push((seed, star));
        rows.extend(seed_rows);
    }
    rows.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.seed.cmp(&b.seed)));
    stars.sort_by(|a, b| a.0.cmp(&b.0));
    let mut vals: Vec<f64> = stars.iter().map(|s| s.1).collect();
    vals.sort_by(f64::total_cmp);
    let gamma_star = vals[(vals.len() - 1) / 2];
    Ok(SweepOutcome {
        rows,
        gamma_star,
        per_seed_gamma_star: stars,
        sweep_limited,
        non_monotone,
    })
}

/// Percentile over raw lifetimes (nearest-rank on the sorted data).
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// RFC-4180 quoting: only fields containing delimiters or quotes get quoted.
pub fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "kind,policy,pattern,dims,gamma,seed,generated,dropped,offered,consumed,\
consumed_measure,mean_lifetime_ns,p50_lifetime_ns,p99_lifetime_ns,mean_hops,frac_derouted,\
frac_widn,frac_oidn,stalls,hop_violations,phase_violations,verdict,extended,gamma_star,\
sweep_limited,non_monotone,trace_hash";

fn dims_str(cfg: &SimConfig) -> String {
    cfg.shape
        .dims()
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// One CSV file holds both per-run rows and the per-cell summary row,
/// distinguished by the `kind` column; ordering and float formatting are
/// deterministic for a given spec and seeds.
pub fn write_csv(
    w: &mut dyn Write,
    cfg: &SimConfig,
    outcome: &SweepOutcome,
    thresholds: &SaturationThresholds,
) -> io::Result<()> {
    writeln!(
        w,
        "# saturation thresholds: min_consumed={} growth_ratio={} backlog_margin={} backlog_frac={} drop_frac={}",
        thresholds.min_consumed,
        thresholds.growth_ratio,
        thresholds.backlog_margin,
        thresholds.backlog_frac,
        thresholds.drop_frac
    )?;
    writeln!(w, "{CSV_HEADER}")?;
    let dims = dims_str(cfg);
    for row in &outcome.rows {
        let st = &row.stats;
        let (p50, p99) = match &st.lifetimes {
            Some(ls) => {
                let mut s = ls.clone();
                s.sort_unstable();
                (percentile(&s, 50.0), percentile(&s, 99.0))
            }
            None => (0, 0),
        };
        let denom = st.consumed_measure.max(1) as f64;
        writeln!(
            w,
            "run,{},{},{},{:.2},{},{},{},{},{},{},{:.3},{},{},{:.4},{:.6},{:.6},{:.6},{},{},{},{},{},,,,{:016x}",
            cfg.policy,
            cfg.pattern,
            dims,
            row.gamma,
            row.seed,
            st.generated,
            st.dropped,
            st.offered,
            st.consumed,
            st.consumed_measure,
            st.mean_lifetime_ns,
            p50,
            p99,
            st.mean_hops,
            st.deroute_fraction(),
            st.derouted_widn as f64 / denom,
            st.derouted_oidn as f64 / denom,
            st.stalls,
            st.hop_violations,
            st.phase_violations,
            row.verdict,
            row.extended,
            st.trace_hash,
        )?;
    }
    writeln!(
        w,
        "summary,{},{},{},,,,,,,,,,,,,,,,,,,{:.2},{},{},",
        cfg.policy, cfg.pattern, dims, outcome.gamma_star, outcome.sweep_limited, outcome.non_monotone,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with(windows: Vec<f64>, backlog: Vec<u64>, consumed: u64) -> RunStats {
        RunStats {
            generated: consumed,
            generated_measure: consumed,
            dropped: 0,
            dropped_measure: 0,
            offered: consumed,
            consumed,
            consumed_measure: consumed,
            mean_lifetime_ns: windows.iter().sum::<f64>() / windows.len().max(1) as f64,
            mean_hops: 3.0,
            derouted_widn: 0,
            derouted_oidn: 0,
            window_mean_lifetime: windows,
            window_consumed: vec![],
            backlog_samples: backlog,
            stalls: 0,
            hop_violations: 0,
            phase_violations: 0,
            conservation_ok: true,
            trace_hash: 0,
            lifetimes: None,
        }
    }

    #[test]
    fn constant_lifetimes_are_stable() {
        let th = SaturationThresholds::default();
        let s = stats_with(vec![1000.0; 4], vec![0; 5], 10_000);
        assert_eq!(detect_saturation(&s, &th), Verdict::Stable);
    }

    #[test]
    fn doubling_lifetimes_saturate() {
        let th = SaturationThresholds::default();
        let s = stats_with(vec![1000.0, 2000.0, 4000.0, 8000.0], vec![0; 5], 10_000);
        assert_eq!(detect_saturation(&s, &th), Verdict::Saturated);
    }

    #[test]
    fn rate_deficit_saturates_even_with_flat_lifetimes() {
        let th = SaturationThresholds::default();
        let mut s = stats_with(vec![1000.0; 4], vec![0; 5], 10_000);
        s.generated_measure = s.consumed_measure + 600;
        assert_eq!(detect_saturation(&s, &th), Verdict::Saturated);
    }

    #[test]
    fn deficit_below_relative_margin_is_stable() {
        // 2% of generated: under the 4% relative floor even though it tops
        // the absolute one
        let th = SaturationThresholds::default();
        let mut s = stats_with(vec![1000.0; 4], vec![0; 5], 10_000);
        s.generated_measure = 10_200;
        assert_eq!(detect_saturation(&s, &th), Verdict::Stable);
    }

    #[test]
    fn source_drops_saturate() {
        let th = SaturationThresholds::default();
        let mut s = stats_with(vec![1000.0; 4], vec![0; 5], 10_000);
        // 3% of arrivals dropped: over the 2% threshold
        s.dropped_measure = 310;
        assert_eq!(detect_saturation(&s, &th), Verdict::Saturated);
        s.dropped_measure = 96;
        assert_eq!(detect_saturation(&s, &th), Verdict::Stable);
    }

    #[test]
    fn slow_growth_below_ratio_is_stable() {
        let th = SaturationThresholds::default();
        let s = stats_with(vec![1000.0, 1050.0, 1100.0, 1200.0], vec![0; 5], 10_000);
        assert_eq!(detect_saturation(&s, &th), Verdict::Stable);
    }

    #[test]
    fn few_packets_are_inconclusive() {
        let th = SaturationThresholds::default();
        let s = stats_with(vec![1000.0; 4], vec![0; 5], 10);
        assert_eq!(detect_saturation(&s, &th), Verdict::Inconclusive);
    }

    #[test]
    fn percentile_nearest_rank() {
        let data: Vec<u64> = (1..=100).collect();
        // nearest rank: round(0.5 * 99) = 50, zero-based
        assert_eq!(percentile(&data, 50.0), 51);
        assert_eq!(percentile(&data, 99.0), 99);
        assert_eq!(percentile(&data, 100.0), 100);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn default_gamma_grid() {
        let g = default_gammas();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.05).abs() < 1e-12);
        assert!((g[19] - 1.0).abs() < 1e-12);
    }
}
