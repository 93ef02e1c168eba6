//! Timings of dense versus Kronecker-factored recurrent products.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use kru_core::cells::Recurrent;
use kru_core::kron::{auto_2x2_shapes, random_unitary_factors};
use kru_core::linalg::{Field, Matrix};
use kru_core::rng::{complex_gaussian, gaussian, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Dense,
    Kron,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Dense => "dense",
            BenchMode::Kron => "kron",
        })
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(BenchMode::Dense),
            "kron" => Ok(BenchMode::Kron),
            other => Err(format!("unknown bench mode {other:?} (expected dense or kron)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub modes: Vec<BenchMode>,
    /// Rows of the input block (sequences per step).
    pub batch: usize,
    pub reps: usize,
    pub field: Field,
    pub seed: u64,
    /// Each timed repetition loops until it has run at least this long.
    pub min_rep_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 512, 1024, 2048],
            modes: vec![BenchMode::Dense, BenchMode::Kron],
            batch: 32,
            reps: 20,
            field: Field::Complex,
            seed: 0,
            min_rep_s: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub mode: BenchMode,
    pub batch: usize,
    pub reps: usize,
    /// Seconds per product, median over repetitions.
    pub median_s: f64,
    /// Median absolute deviation of the per-repetition times.
    pub mad_s: f64,
}

pub const BENCH_HEADER: &str = "n,mode,batch,reps,median_s,mad_s";

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn operator(n: usize, mode: BenchMode, field: Field, seed: u64) -> Result<Recurrent, String> {
    let mut rng = rng_from_seed(seed);
    Ok(match mode {
        BenchMode::Dense => Recurrent::Dense(Matrix::from_fn(n, n, field, |_, _| complex_gaussian(&mut rng)).with_field(field)),
        BenchMode::Kron => {
            let shapes = auto_2x2_shapes(n).ok_or_else(|| format!("size {n} is not a power of two"))?;
            Recurrent::Kron(random_unitary_factors(&shapes, field, &mut rng).map_err(|e| e.to_string())?)
        }
    })
}

/// A warmed operator with an inner loop count that makes one repetition measurable.
struct Case {
    n: usize,
    mode: BenchMode,
    w: Recurrent,
    x: Matrix,
    inner: usize,
    times: Vec<f64>,
}

impl Case {
    fn new(n: usize, mode: BenchMode, w: Recurrent, x: Matrix, cfg: &BenchConfig) -> Result<Self, String> {
        let mut case = Case { n, mode, w, x, inner: 1, times: Vec::with_capacity(cfg.reps) };
        let t0 = Instant::now();
        for _ in 0..3 {
            case.apply()?;
        }
        let single = (t0.elapsed().as_secs_f64() / 3.0).max(1e-9);
        case.inner = ((cfg.min_rep_s / single).ceil() as usize).max(1);
        Ok(case)
    }

    fn apply(&self) -> Result<(), String> {
        self.w.apply(black_box(&self.x)).map(|y| drop(black_box(y))).map_err(|e| e.to_string())
    }

    fn rep(&mut self) -> Result<(), String> {
        let t = Instant::now();
        for _ in 0..self.inner {
            self.apply()?;
        }
        self.times.push(t.elapsed().as_secs_f64() / self.inner as f64);
        Ok(())
    }

    fn row(mut self) -> BenchRow {
        let reps = self.times.len();
        let med = median(&mut self.times);
        let mut dev: Vec<f64> = self.times.iter().map(|t| (t - med).abs()).collect();
        BenchRow {
            n: self.n,
            mode: self.mode,
            batch: self.x.rows(),
            reps,
            median_s: med,
            mad_s: median(&mut dev),
        }
    }
}

/// One row per (size, mode) pair, in the order given. Repetitions are taken
/// round-robin over all pairs so slow drift in machine speed hits each alike.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, String> {
    if cfg.reps == 0 || cfg.batch == 0 {
        return Err("reps and batch must be positive".into());
    }
    let mut cases = Vec::new();
    for &n in &cfg.sizes {
        let mut rng = rng_from_seed(cfg.seed ^ n as u64);
        let x = match cfg.field {
            Field::Complex => Matrix::from_fn(cfg.batch, n, Field::Complex, |_, _| complex_gaussian(&mut rng)),
            Field::Real => Matrix::from_fn(cfg.batch, n, Field::Real, |_, _| gaussian(&mut rng).into()),
        };
        for &mode in &cfg.modes {
            let w = operator(n, mode, cfg.field, cfg.seed)?;
            cases.push(Case::new(n, mode, w, x.clone(), cfg)?);
        }
    }
    for _ in 0..cfg.reps {
        for case in &mut cases {
            case.rep()?;
        }
    }
    let rows: Vec<BenchRow> = cases.into_iter().map(Case::row).collect();
    for r in &rows {
        log::info!("n={} {}: median {:.3e}s mad {:.1e}s", r.n, r.mode, r.median_s, r.mad_s);
    }
    Ok(rows)
}

/// `median(2N) / median(N)` for each consecutive doubling of one mode.
pub fn doubling_ratios(rows: &[BenchRow], mode: BenchMode) -> Vec<(usize, f64)> {
    let mut by_n: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
    by_n.sort_by_key(|r| r.n);
    by_n.windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .map(|w| (w[0].n, w[1].median_s / w[0].median_s))
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:e},{:e}\n", r.n, r.mode, r.batch, r.reps, r.median_s, r.mad_s));
    }
    out
}
