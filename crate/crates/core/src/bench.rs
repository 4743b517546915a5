//! Peak-memory and operation-count measurements over growing context sizes.
//!
//! Every workload builds its model from a seed, generates its own input
//! inside the metered region, and reports transient bytes with the
//! persistent state subtracted. Parameters are allocated before metering
//! starts and never show up in the peak.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::cmab::CmabParams;
use crate::cmanp::{CmanpModel, X_RANGE};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::instrument::{flops, FlopCounts, MemoryMeter};
use crate::io::{write_table, CsvTable};
use crate::numerics::{init_matrix, InitScheme, Matrix, Real, RngState};

pub const CSV_HEADER: [&str; 8] = [
    "mode",
    "n",
    "u",
    "peak_bytes",
    "flops",
    "wall_ns",
    "config",
    "seed",
];

/// Targets per query workload.
pub const QUERY_TARGETS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Memory,
    Update,
    Condition,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Memory => "memory",
            Mode::Update => "update",
            Mode::Condition => "condition",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memory" => Ok(Mode::Memory),
            "update" => Ok(Mode::Update),
            "condition" => Ok(Mode::Condition),
            _ => Err(Error::Unsupported(format!(
                "bench mode {s:?}; expected memory, update or condition"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What gets run at context size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// One CMAB block over all `n` inputs at once.
    NaiveForward,
    /// One CMAB block over `n` inputs fed in chunks.
    ChunkedForward,
    /// One CMAB block absorbing `u` inputs after `n`.
    CmabUpdate { u: usize },
    /// The CMANP absorbing `u` context pairs after `n`.
    ContextUpdate { u: usize },
    /// Chunked CMANP conditioning on `n` pairs.
    Condition,
    /// CMANP predictions for [`QUERY_TARGETS`] targets after conditioning on `n`.
    Query,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::NaiveForward => "naive_forward",
            Workload::ChunkedForward => "chunked_forward",
            Workload::CmabUpdate { .. } => "cmab_update",
            Workload::ContextUpdate { .. } => "update_context",
            Workload::Condition => "condition",
            Workload::Query => "query",
        }
    }

    fn update_size(self) -> usize {
        match self {
            Workload::CmabUpdate { u } | Workload::ContextUpdate { u } => u,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    /// Reads `CMAB_PRECISION`, defaulting to `f64`.
    pub fn from_env() -> Result<Self> {
        match std::env::var("CMAB_PRECISION") {
            Err(_) => Ok(Precision::F64),
            Ok(v) => v.parse(),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => Err(Error::Unsupported(format!(
                "precision {s:?}; expected f64 or f32"
            ))),
        }
    }
}

/// A workload to run at one context size.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub workload: Workload,
    pub n: usize,
    pub config_name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: Mode,
    pub workload: Workload,
    pub n: usize,
    pub u: usize,
    /// Peak heap bytes above the entry level, persistent state excluded.
    pub peak_bytes: u64,
    pub flops: u64,
    pub stage_flops: FlopCounts,
    pub wall_ns: u64,
    pub config: String,
    pub seed: u64,
    pub param_bytes: usize,
    pub state_bytes: usize,
}

impl BenchRecord {
    /// Wall time is written as 0 when `deterministic`.
    pub fn csv_row(&self, deterministic: bool) -> Vec<String> {
        let wall = if deterministic { 0 } else { self.wall_ns };
        vec![
            self.mode.name().into(),
            self.n.to_string(),
            self.u.to_string(),
            self.peak_bytes.to_string(),
            self.flops.to_string(),
            wall.to_string(),
            self.config.clone(),
            self.seed.to_string(),
        ]
    }
}

pub fn records_to_csv(records: &[BenchRecord], deterministic: bool) -> Result<String> {
    write_table(&CsvTable {
        header: CSV_HEADER.iter().map(|s| s.to_string()).collect(),
        rows: records.iter().map(|r| r.csv_row(deterministic)).collect(),
    })
}

/// Default workload for each mode.
pub fn workload_for(mode: Mode, u: usize) -> Workload {
    match mode {
        Mode::Memory => Workload::ChunkedForward,
        Mode::Update => Workload::ContextUpdate { u },
        Mode::Condition => Workload::Condition,
    }
}

struct Measured {
    peak_bytes: u64,
    flops: FlopCounts,
    wall_ns: u64,
    param_bytes: usize,
    state_bytes: usize,
}

fn gaussian_rows<T: Real>(rng: &mut RngState, rows: usize, cols: usize) -> Matrix<T> {
    init_matrix(rng, rows, cols, InitScheme::Normal { std: 1.0 })
}

fn pair_rows<T: Real>(rng: &mut RngState, rows: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, 2);
    for r in 0..rows {
        let x = rng.uniform(-X_RANGE, X_RANGE);
        m.set(r, 0, T::of(x));
        m.set(r, 1, T::of(x.sin()));
    }
    m
}

/// Chunks of at most `size` rows, generated lazily.
fn lazy_chunks<'a, T: Real>(
    rng: &'a mut RngState,
    n: usize,
    size: usize,
    mut gen: impl FnMut(&mut RngState, usize) -> Matrix<T> + 'a,
) -> impl Iterator<Item = Matrix<T>> + 'a {
    (0..n.div_ceil(size)).map(move |c| {
        let rows = size.min(n - c * size);
        gen(rng, rows)
    })
}

/// Runs `f` under the allocation meter and the operation counter.
fn metered<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, u64, FlopCounts, u64)> {
    let start = Instant::now();
    let ((out, counts), report) = MemoryMeter::measure(|| flops::count(f))?;
    let wall = start.elapsed().as_nanos() as u64;
    Ok((out?, report.peak_bytes, counts, wall))
}

fn run_typed<T: Real>(
    workload: Workload,
    n: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Measured> {
    let root = RngState::new(seed);
    let mut init_rng = root.split(0);
    let mut data_rng = root.split(1);
    let chunk = cfg.chunk_size;
    let d = cfg.d;
    match workload {
        Workload::NaiveForward | Workload::ChunkedForward | Workload::CmabUpdate { .. } => {
            let block = CmabParams::<f64>::init(&mut init_rng, cfg)?.cast::<T>();
            let iemb: Matrix<T> = init_matrix(&mut init_rng, cfg.l_i, d, InitScheme::LATENT);
            let param_bytes = block.heap_bytes() + iemb.heap_bytes();
            let (state, peak, flops, wall) = match workload {
                Workload::NaiveForward => metered(|| {
                    let input = gaussian_rows::<T>(&mut data_rng, n, d);
                    block.forward_full(&iemb, &input).map(|(_, s)| s)
                })?,
                Workload::ChunkedForward => metered(|| {
                    let chunks = lazy_chunks(&mut data_rng, n, chunk, |r, rows| {
                        gaussian_rows::<T>(r, rows, d)
                    });
                    block.forward_chunked(&iemb, chunks, chunk).map(|(_, s)| s)
                })?,
                _ => {
                    let u = workload.update_size();
                    let chunks = lazy_chunks(&mut data_rng, n, chunk, |r, rows| {
                        gaussian_rows::<T>(r, rows, d)
                    });
                    let (_, mut state) = block.forward_chunked(&iemb, chunks, chunk)?;
                    let (_, peak, flops, wall) = metered(|| {
                        let batch = gaussian_rows::<T>(&mut data_rng, u, d);
                        block.update(&mut state, &iemb, &batch)
                    })?;
                    (state, peak, flops, wall)
                }
            };
            let state_bytes = state.stream.heap_bytes();
            let transient = match workload {
                Workload::CmabUpdate { .. } => peak,
                _ => peak.saturating_sub(state_bytes as u64),
            };
            Ok(Measured {
                peak_bytes: transient,
                flops,
                wall_ns: wall,
                param_bytes,
                state_bytes,
            })
        }
        Workload::ContextUpdate { .. } | Workload::Condition | Workload::Query => {
            let model = CmanpModel::<f64>::init(&mut init_rng, *cfg)?.cast::<T>();
            let param_bytes = model.heap_bytes();
            if workload == Workload::Condition {
                let (state, peak, flops, wall) = metered(|| {
                    let chunks = lazy_chunks(&mut data_rng, n, chunk, pair_rows::<T>);
                    model.condition_chunked(chunks, chunk)
                })?;
                let state_bytes = state.heap_bytes();
                return Ok(Measured {
                    peak_bytes: peak.saturating_sub(state_bytes as u64),
                    flops,
                    wall_ns: wall,
                    param_bytes,
                    state_bytes,
                });
            }
            let chunks = lazy_chunks(&mut data_rng, n, chunk, pair_rows::<T>);
            let mut state = model.condition_chunked(chunks, chunk)?;
            let (_, peak, flops, wall) = if let Workload::ContextUpdate { u } = workload {
                metered(|| {
                    let pairs = pair_rows::<T>(&mut data_rng, u);
                    model.update_context(&mut state, &pairs)
                })?
            } else {
                metered(|| {
                    let xs = pair_rows::<T>(&mut data_rng, QUERY_TARGETS).slice_cols(0, 1)?;
                    model.query(&state, &xs).map(|_| ())
                })?
            };
            Ok(Measured {
                peak_bytes: peak,
                flops,
                wall_ns: wall,
                param_bytes,
                state_bytes: state.heap_bytes(),
            })
        }
    }
}

fn record(cell: &Cell, m: Measured) -> BenchRecord {
    BenchRecord {
        mode: cell.mode,
        workload: cell.workload,
        n: cell.n,
        u: cell.workload.update_size(),
        peak_bytes: m.peak_bytes,
        flops: m.flops.total(),
        stage_flops: m.flops,
        wall_ns: m.wall_ns,
        config: cell.config_name.clone(),
        seed: cell.seed,
        param_bytes: m.param_bytes,
        state_bytes: m.state_bytes,
    }
}

/// Measures one cell on the current thread. Fails with
/// [`Error::Unsupported`] unless the counting allocator is installed.
pub fn measure_peak(cell: &Cell, precision: Precision) -> Result<BenchRecord> {
    let cfg = ModelConfig::named(&cell.config_name)?;
    let m = match precision {
        Precision::F64 => run_typed::<f64>(cell.workload, cell.n, &cfg, cell.seed)?,
        Precision::F32 => run_typed::<f32>(cell.workload, cell.n, &cfg, cell.seed)?,
    };
    Ok(record(cell, m))
}

/// Exact multiply-add counts for a cell; needs no allocator support.
pub fn count_flops(cell: &Cell) -> Result<FlopCounts> {
    let cfg = ModelConfig::named(&cell.config_name)?;
    let root = RngState::new(cell.seed);
    let mut init_rng = root.split(0);
    let mut data_rng = root.split(1);
    let (chunk, d, n) = (cfg.chunk_size, cfg.d, cell.n);
    match cell.workload {
        Workload::NaiveForward | Workload::ChunkedForward | Workload::CmabUpdate { .. } => {
            let block = CmabParams::<f64>::init(&mut init_rng, &cfg)?;
            let iemb: Matrix = init_matrix(&mut init_rng, cfg.l_i, d, InitScheme::LATENT);
            match cell.workload {
                Workload::NaiveForward => {
                    let input = gaussian_rows(&mut data_rng, n, d);
                    let (r, c) = flops::count(|| block.forward_full(&iemb, &input));
                    r.map(|_| c)
                }
                Workload::ChunkedForward => {
                    let chunks =
                        lazy_chunks(&mut data_rng, n, chunk, |r, rows| gaussian_rows(r, rows, d));
                    let (r, c) = flops::count(|| block.forward_chunked(&iemb, chunks, chunk));
                    r.map(|_| c)
                }
                _ => {
                    let chunks =
                        lazy_chunks(&mut data_rng, n, chunk, |r, rows| gaussian_rows(r, rows, d));
                    let (_, mut state) = block.forward_chunked(&iemb, chunks, chunk)?;
                    let batch = gaussian_rows(&mut data_rng, cell.workload.update_size(), d);
                    let (r, c) = flops::count(|| block.update(&mut state, &iemb, &batch));
                    r.map(|_| c)
                }
            }
        }
        Workload::Condition => {
            let model = CmanpModel::<f64>::init(&mut init_rng, cfg)?;
            let chunks = lazy_chunks(&mut data_rng, n, chunk, pair_rows);
            let (r, c) = flops::count(|| model.condition_chunked(chunks, chunk));
            r.map(|_| c)
        }
        Workload::ContextUpdate { u } => {
            let model = CmanpModel::<f64>::init(&mut init_rng, cfg)?;
            let chunks = lazy_chunks(&mut data_rng, n, chunk, pair_rows);
            let mut state = model.condition_chunked(chunks, chunk)?;
            let pairs = pair_rows(&mut data_rng, u);
            let (r, c) = flops::count(|| model.update_context(&mut state, &pairs));
            r.map(|_| c)
        }
        Workload::Query => {
            let model = CmanpModel::<f64>::init(&mut init_rng, cfg)?;
            let chunks = lazy_chunks(&mut data_rng, n, chunk, pair_rows);
            let state = model.condition_chunked(chunks, chunk)?;
            let xs = pair_rows::<f64>(&mut data_rng, QUERY_TARGETS).slice_cols(0, 1)?;
            let (r, c) = flops::count(|| model.query(&state, &xs));
            r.map(|_| c)
        }
    }
}

/// Parses `512,1024,2048`.
pub fn parse_n_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::Contract(format!("context size {t:?} is not a positive integer"))
                })
        })
        .collect()
}
