//! Randomized GP checks shared by the test suite and `gpgl gp-selftest`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::KernelConfig;
use super::oracle::{dense_posterior, gram_condition};
use super::posterior::GpSnapshot;
use crate::diffcore::Tensor;
use crate::error::Result;

pub const ORACLE_TOLERANCE: f64 = 1e-8;
pub const INTERPOLATION_TOLERANCE: f64 = 1e-8;
pub const NOISE_LEVELS: [f64; 3] = [0.0, 0.01, 0.1];
/// Oracle instances whose `K + σ²I` is worse conditioned than this are
/// redrawn: beyond it no double-precision solve is accurate to
/// [`ORACLE_TOLERANCE`], so the two paths cannot be expected to agree.
pub const ORACLE_MAX_CONDITION: f64 = ORACLE_TOLERANCE / f64::EPSILON;
const MAX_REDRAWS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub suite: &'static str,
    pub seed: u64,
    pub max_error: f64,
    pub passed: bool,
    /// Ill-conditioned draws discarded before this instance.
    pub redraws: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub cases: Vec<CaseOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn redraws(&self) -> usize {
        self.cases.iter().map(|c| c.redraws).sum()
    }

    pub fn max_error(&self, suite: &str) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.suite == suite)
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for suite in ["oracle", "interpolation"] {
            let n = self.cases.iter().filter(|c| c.suite == suite).count();
            let failed: Vec<u64> = self.failures().filter(|c| c.suite == suite).map(|c| c.seed).collect();
            writeln!(
                f,
                "{suite:<14} cases={n:<4} max_error={:.3e} redrawn={} failed={}",
                self.max_error(suite),
                self.cases.iter().filter(|c| c.suite == suite).map(|c| c.redraws).sum::<usize>(),
                if failed.is_empty() {
                    "none".to_string()
                } else {
                    format!("{failed:?}")
                }
            )?;
        }
        Ok(())
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).expect("rectangular")
}

/// Cholesky posterior vs dense inversion on one random instance
/// (|A| ≤ 20, d ≤ 8, C ≤ 5, σ² drawn from [`NOISE_LEVELS`]).
pub fn oracle_case(seed: u64) -> Result<CaseOutcome> {
    oracle_case_with_noise(seed, None)
}

/// [`oracle_case`] with σ² forced to `noise` when given.
pub fn oracle_case_with_noise(seed: u64, noise: Option<f64>) -> Result<CaseOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut redraws = 0;
    let (d, classes, config, anchors) = loop {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let drawn = NOISE_LEVELS[rng.random_range(0..NOISE_LEVELS.len())];
        let config = KernelConfig::default()
            .with_length_scale(rng.random_range(0.3..1.0))
            .with_noise(noise.unwrap_or(drawn));
        let anchors = random_points(&mut rng, n, d, 2.0);
        if gram_condition(&anchors, &config) <= ORACLE_MAX_CONDITION || redraws == MAX_REDRAWS {
            break (d, classes, config, anchors);
        }
        redraws += 1;
    };
    let n = anchors.len();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let snapshot = GpSnapshot::fit(to_tensor(&anchors), labels.clone(), classes, config)?;

    let mut max_error = 0.0f64;
    let mut queries = random_points(&mut rng, 4, d, 2.5);
    queries.push(anchors[0].clone());
    for q in &queries {
        let post = snapshot.posterior(q)?;
        let Some(dense) = dense_posterior(&anchors, &labels, classes, &config, snapshot.jitter(), q) else {
            return Ok(CaseOutcome {
                suite: "oracle",
                seed,
                max_error: f64::INFINITY,
                passed: false,
                redraws,
            });
        };
        for (a, b) in post.mean.iter().zip(&dense.mean) {
            max_error = max_error.max((a - b).abs());
        }
        max_error = max_error.max((post.variance - dense.variance.max(0.0)).abs());
    }
    Ok(CaseOutcome {
        suite: "oracle",
        seed,
        max_error,
        passed: max_error <= ORACLE_TOLERANCE,
        redraws,
    })
}

/// At σ² = 0, querying each of 10 distinct anchors must return its one-hot
/// label and (near) zero variance.
pub fn interpolation_case(seed: u64) -> Result<CaseOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let classes = rng.random_range(2..=5);
    let config = KernelConfig::default().with_length_scale(0.5).with_noise(0.0);
    let anchors = random_points(&mut rng, 10, d, 2.0);
    let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..classes)).collect();
    let snapshot = GpSnapshot::fit(to_tensor(&anchors), labels.clone(), classes, config)?;
    let mut max_error = 0.0f64;
    for (a, &label) in anchors.iter().zip(&labels) {
        let post = snapshot.posterior(a)?;
        for (c, &m) in post.mean.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            max_error = max_error.max((m - target).abs());
        }
        max_error = max_error.max(post.variance);
    }
    Ok(CaseOutcome {
        suite: "interpolation",
        seed,
        max_error,
        passed: max_error <= INTERPOLATION_TOLERANCE,
        redraws: 0,
    })
}

/// Runs `oracle_cases` oracle instances and `interpolation_cases`
/// interpolation instances with seeds derived from `root_seed`.
pub fn run_gp_selftest(root_seed: u64, oracle_cases: usize, interpolation_cases: usize) -> Result<SelftestReport> {
    run_gp_selftest_with_noise(root_seed, oracle_cases, interpolation_cases, None)
}

/// [`run_gp_selftest`] with every oracle instance at σ² = `noise` when given.
pub fn run_gp_selftest_with_noise(
    root_seed: u64,
    oracle_cases: usize,
    interpolation_cases: usize,
    noise: Option<f64>,
) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();
    for i in 0..oracle_cases as u64 {
        let seed = root_seed.wrapping_mul(1_000_003).wrapping_add(i);
        report.cases.push(oracle_case_with_noise(seed, noise)?);
    }
    for i in 0..interpolation_cases as u64 {
        report
            .cases
            .push(interpolation_case(root_seed.wrapping_mul(999_983).wrapping_add(i))?);
    }
    Ok(report)
}

/// Random snapshot for the dump round trip: 10 anchors, d = 4, C = 3.
pub fn dump_case(seed: u64) -> Result<GpSnapshot<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = random_points(&mut rng, 10, 4, 2.0);
    let labels = (0..10).map(|i| i % 3).collect();
    let config = KernelConfig::default().with_length_scale(1.5);
    GpSnapshot::fit(to_tensor(&anchors), labels, 3, config)
}

/// True iff `restored` answers random queries bit-identically to `original`.
pub fn dump_round_trip_matches(original: &GpSnapshot<f64>, restored: &GpSnapshot<f64>, seed: u64) -> Result<bool> {
    if original != restored {
        return Ok(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for q in random_points(&mut rng, 8, original.dim(), 2.5) {
        if original.posterior(&q)? != restored.posterior(&q)? {
            return Ok(false);
        }
    }
    Ok(true)
}
