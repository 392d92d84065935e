//! Per-function throughput microbenchmark.
//!
//! Each function is applied to every element of an `n`-element input
//! array in a plain scalar loop on one thread. One untimed warm-up pass
//! precedes the timed repeats.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{Elementwise, GridBasis, RbfGrid, SplineGrid, SplineSpec};
use crate::error::{Error, Result};
use crate::models::default_fast_rbf;

pub const DEFAULT_N: usize = 1_000_000;
pub const DEFAULT_REPEATS: usize = 10;
pub const MIN_REPEATS: usize = 3;
/// Inputs to `tan` are clamped to this magnitude to stay clear of the pole.
pub const TAN_CLAMP: f32 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchFunction {
    BSpline,
    Rbf,
    Dog,
    Relu,
    Sin,
    Cos,
    Tan,
    Arctan,
}

impl BenchFunction {
    pub const ALL: [BenchFunction; 8] = [
        BenchFunction::BSpline,
        BenchFunction::Rbf,
        BenchFunction::Dog,
        BenchFunction::Relu,
        BenchFunction::Sin,
        BenchFunction::Cos,
        BenchFunction::Tan,
        BenchFunction::Arctan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchFunction::BSpline => "bspline",
            BenchFunction::Rbf => "rbf",
            BenchFunction::Dog => "dog",
            BenchFunction::Relu => "relu",
            BenchFunction::Sin => "sin",
            BenchFunction::Cos => "cos",
            BenchFunction::Tan => "tan",
            BenchFunction::Arctan => "arctan",
        }
    }

    fn kernel(self) -> Result<Kernel> {
        Ok(match self {
            BenchFunction::BSpline => Kernel::Grid(GridBasis::BSpline(SplineGrid::new(
                &SplineSpec::default(),
            )?)),
            BenchFunction::Rbf => Kernel::Grid(GridBasis::Rbf(RbfGrid::new(&default_fast_rbf())?)),
            BenchFunction::Dog => Kernel::Scalar(Elementwise::Dog),
            BenchFunction::Relu => Kernel::Scalar(Elementwise::Relu),
            BenchFunction::Sin => Kernel::Scalar(Elementwise::Sin),
            BenchFunction::Cos => Kernel::Scalar(Elementwise::Cos),
            BenchFunction::Tan => Kernel::Scalar(Elementwise::Tan),
            BenchFunction::Arctan => Kernel::Scalar(Elementwise::Arctan),
        })
    }
}

impl fmt::Display for BenchFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        BenchFunction::ALL
            .into_iter()
            .find(|f| f.name() == lower || (lower == "b-spline" && *f == BenchFunction::BSpline))
            .ok_or_else(|| Error::UnsupportedKind(s.to_string()))
    }
}

enum Kernel {
    Scalar(Elementwise),
    /// Produces the full basis vector per input.
    Grid(GridBasis),
}

impl Kernel {
    fn width(&self) -> usize {
        match self {
            Kernel::Scalar(_) => 1,
            Kernel::Grid(g) => g.len(),
        }
    }

    fn pass(&self, xs: &[f32], out: &mut [f32]) {
        match self {
            Kernel::Scalar(f) => {
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = f.eval(x);
                }
            }
            Kernel::Grid(g) => {
                let w = g.len();
                for (o, &x) in out.chunks_exact_mut(w).zip(xs) {
                    g.eval_into(x, o);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub function: String,
    /// Mean wall time of one full `n`-element pass, microseconds.
    pub mean_us: f64,
    pub std_us: f64,
    pub repeats: usize,
    pub n: usize,
    /// Sum of all outputs of one pass; independent of timing.
    pub checksum: f64,
    pub threads: usize,
}

/// Uniform inputs in `[-1, 1)`, fixed by `seed`.
pub fn bench_inputs(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn check_args(n: usize, repeats: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::Contract("benchmark needs n >= 1".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Contract(format!(
            "benchmark needs at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    Ok(())
}

fn run(function: BenchFunction, xs: &[f32], repeats: usize) -> Result<BenchResult> {
    let kernel = function.kernel()?;
    let clamped;
    let xs = if function == BenchFunction::Tan {
        clamped = xs.iter().map(|x| x.clamp(-TAN_CLAMP, TAN_CLAMP)).collect::<Vec<_>>();
        &clamped[..]
    } else {
        xs
    };
    let mut out = vec![0.0f32; xs.len() * kernel.width()];
    kernel.pass(black_box(xs), &mut out);
    let checksum = out.iter().map(|&v| v as f64).sum();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        kernel.pass(black_box(xs), black_box(&mut out));
        times.push(start.elapsed().as_secs_f64() * 1e6);
    }
    black_box(&out);
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BenchResult {
        function: function.name().to_string(),
        mean_us: mean,
        std_us: var.sqrt(),
        repeats,
        n: xs.len(),
        checksum,
        threads: 1,
    })
}

pub fn bench_function(function: BenchFunction, n: usize, repeats: usize, seed: u64) -> Result<BenchResult> {
    check_args(n, repeats)?;
    run(function, &bench_inputs(n, seed), repeats)
}

/// All eight functions on the same inputs, slowest first.
pub fn bench_suite(n: usize, repeats: usize, seed: u64) -> Result<Vec<BenchResult>> {
    check_args(n, repeats)?;
    let xs = bench_inputs(n, seed);
    let mut results = BenchFunction::ALL
        .into_iter()
        .map(|f| run(f, &xs, repeats))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| b.mean_us.total_cmp(&a.mean_us));
    Ok(results)
}

pub const CSV_HEADER: &str = "function,mean_us,std_us,repeats,n,checksum";

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{:.3},{:.3},{},{},{:.6}\n",
            r.function, r.mean_us, r.std_us, r.repeats, r.n, r.checksum
        ));
    }
    s
}

/// Where the numbers came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub debug_build: bool,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            debug_build: cfg!(debug_assertions),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure_of_a_result() {
        let r = bench_function(BenchFunction::Sin, 1000, 5, 0).unwrap();
        assert_eq!((r.repeats, r.n, r.threads), (5, 1000, 1));
        assert!(r.mean_us > 0.0 && r.std_us >= 0.0);
        assert!(bench_function(BenchFunction::Sin, 0, 5, 0).is_err());
        assert!(bench_function(BenchFunction::Sin, 10, 2, 0).is_err());
    }

    #[test]
    fn checksums_are_deterministic() {
        for f in BenchFunction::ALL {
            let a = bench_function(f, 2000, 3, 9).unwrap();
            let b = bench_function(f, 2000, 3, 9).unwrap();
            assert_eq!(a.checksum, b.checksum, "{f}");
            assert!(a.checksum.is_finite());
        }
    }

    #[test]
    fn bspline_checksum_is_partition_of_unity() {
        let r = bench_function(BenchFunction::BSpline, 500, 3, 1).unwrap();
        assert!((r.checksum - 500.0).abs() < 1e-3, "{}", r.checksum);
    }

    #[test]
    fn suite_is_sorted_and_complete() {
        let results = bench_suite(500, 3, 0).unwrap();
        assert_eq!(results.len(), 8);
        assert!(results.windows(2).all(|w| w[0].mean_us >= w[1].mean_us));
        let csv = to_csv(&results);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with(CSV_HEADER));
    }

    #[test]
    fn names_parse() {
        for f in BenchFunction::ALL {
            assert_eq!(f.name().parse::<BenchFunction>().unwrap(), f);
        }
        assert_eq!("B-Spline".parse::<BenchFunction>().unwrap(), BenchFunction::BSpline);
        assert!("gelu".parse::<BenchFunction>().is_err());
    }
}
