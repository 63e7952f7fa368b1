//! Discretized càdlàg paths and stopped paths.
//!
//! Paths live on a uniform grid `t_k = k·dt`. Jumps happen only at grid
//! points; a per-index flag records whether the value at `k` was reached by
//! a jump, in which case the left limit at `k` is the value at `k - 1`.
//!
//! A [`StoppedPath`] is the canonical representative of `(t, ω^t)`: every
//! value after the stop index equals the value at the stop index. Vertical
//! bumps are kept as a pending offset so that composing bumps is exact in
//! floating point.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", "must be finite and positive"));
        }
        if n_steps == 0 {
            return Err(Error::param("n_steps", "must be at least 1"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of grid index `k`; the last index maps to the horizon exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Grid index of `t`, if `t` lies on the grid (relative tolerance 1e-9 of a step).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-9 {
            None
        } else {
            Some(k as usize)
        }
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k > self.n_steps {
            Err(Error::IndexOutOfRange {
                index: k,
                max: self.n_steps,
            })
        } else {
            Ok(())
        }
    }
}

/// A `d`-dimensional path sampled at every grid index, with jump bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    grid: TimeGrid,
    dim: usize,
    /// Row-major `(n_steps + 1) × dim`.
    values: Vec<f64>,
    jumps: Vec<bool>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>, jumps: Vec<bool>) -> Result<Self> {
        let len = grid.n_steps + 1;
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if values.len() != len * dim {
            return Err(Error::DimensionMismatch {
                expected: len * dim,
                got: values.len(),
            });
        }
        if jumps.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: jumps.len(),
            });
        }
        if jumps[0] {
            return Err(Error::NoLeftLimit);
        }
        Ok(Self {
            grid,
            dim,
            values,
            jumps,
        })
    }

    /// One-dimensional path without jumps.
    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let jumps = vec![false; grid.n_steps + 1];
        Self::new(grid, 1, values, jumps)
    }

    pub fn constant(grid: TimeGrid, x: &[f64]) -> Self {
        let len = grid.n_steps + 1;
        let values = x.iter().copied().cycle().take(len * x.len()).collect();
        Self {
            grid,
            dim: x.len(),
            values,
            jumps: vec![false; len],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn jump_flags(&self) -> &[bool] {
        &self.jumps
    }

    pub fn is_jump(&self, k: usize) -> bool {
        self.jumps[k]
    }

    pub fn left_limit(&self, k: usize) -> &[f64] {
        if self.jumps[k] {
            self.value(k - 1)
        } else {
            self.value(k)
        }
    }

    /// `ΔX` at index `k`; zero where no jump is flagged.
    pub fn jump(&self, k: usize) -> Vec<f64> {
        self.value(k)
            .iter()
            .zip(self.left_limit(k))
            .map(|(v, l)| v - l)
            .collect()
    }

    pub fn jump_count(&self) -> usize {
        self.jumps.iter().filter(|&&j| j).count()
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.push("jump".to_string());
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..self.len() {
            let mut row = Vec::with_capacity(self.dim + 2);
            row.push(format!("{:.16e}", self.grid.time(k)));
            row.extend(self.value(k).iter().map(|v| format!("{v:.16e}")));
            row.push(if self.jumps[k] { "1" } else { "0" }.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    /// Reads the CSV layout written by [`GridPath::to_csv`]. The grid is
    /// rebuilt from the last time stamp and the row count.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "t" || &header[header.len() - 1] != "jump" {
            return Err(Error::Csv("expected header `t,x_1..x_d,jump`".into()));
        }
        let dim = header.len() - 2;
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut jumps = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            times.push(parse_f64(&rec[0])?);
            for i in 0..dim {
                values.push(parse_f64(&rec[i + 1])?);
            }
            jumps.push(match &rec[dim + 1] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Csv(format!("bad jump flag `{other}`"))),
            });
        }
        if times.len() < 2 {
            return Err(Error::Csv("need at least two rows".into()));
        }
        let grid = TimeGrid::new(*times.last().unwrap(), times.len() - 1)?;
        Self::new(grid, dim, values, jumps)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Csv(format!("not a number: `{s}`")))
}

/// Canonical representative of a stopped path `(t_k, ω^{t_k})`.
#[derive(Debug, Clone)]
pub struct StoppedPath {
    grid: TimeGrid,
    dim: usize,
    stop: usize,
    pre: bool,
    /// Frozen values before any pending bump.
    values: Vec<f64>,
    /// Left limits before any pending bump; meaningful up to `stop`.
    left: Vec<f64>,
    /// Pending vertical offset applied to values at indices `>= shift_from`.
    shift: Vec<f64>,
    shift_from: usize,
}

impl StoppedPath {
    fn freeze(path: &GridPath, k: usize, frozen: &[f64], left_at_stop: &[f64]) -> Self {
        let d = path.dim;
        let len = path.len();
        let mut values = Vec::with_capacity(len * d);
        let mut left = Vec::with_capacity(len * d);
        for i in 0..k {
            values.extend_from_slice(path.value(i));
            left.extend_from_slice(path.left_limit(i));
        }
        values.extend_from_slice(frozen);
        left.extend_from_slice(left_at_stop);
        for _ in k + 1..len {
            values.extend_from_slice(frozen);
            left.extend_from_slice(frozen);
        }
        Self {
            grid: path.grid,
            dim: d,
            stop: k,
            pre: false,
            values,
            left,
            shift: vec![0.0; d],
            shift_from: k,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stop_index(&self) -> usize {
        self.stop
    }

    pub fn time(&self) -> f64 {
        self.grid.time(self.stop)
    }

    /// Whether this representative was frozen at a left limit.
    pub fn is_pre(&self) -> bool {
        self.pre
    }

    /// Effective value of coordinate `c` at index `i`.
    #[inline]
    pub fn coord(&self, i: usize, c: usize) -> f64 {
        let v = self.values[i * self.dim + c];
        if i >= self.shift_from {
            v + self.shift[c]
        } else {
            v
        }
    }

    /// Effective left limit of coordinate `c` at index `i`.
    #[inline]
    pub fn left_coord(&self, i: usize, c: usize) -> f64 {
        let v = self.left[i * self.dim + c];
        if i > self.shift_from {
            v + self.shift[c]
        } else {
            v
        }
    }

    pub fn value(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|c| self.coord(i, c)).collect()
    }

    pub fn left_limit(&self, i: usize) -> Vec<f64> {
        if i > self.stop {
            return self.frozen();
        }
        (0..self.dim).map(|c| self.left_coord(i, c)).collect()
    }

    /// The value the path is frozen at.
    pub fn frozen(&self) -> Vec<f64> {
        self.value(self.stop)
    }

    pub fn is_jump(&self, i: usize) -> bool {
        i <= self.stop && (0..self.dim).any(|c| self.coord(i, c) != self.left_coord(i, c))
    }

    /// Supremum norm of the frozen path (Euclidean norm per time point).
    pub fn sup_norm(&self) -> f64 {
        (0..=self.stop)
            .map(|i| {
                (0..self.dim)
                    .map(|c| self.coord(i, c).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Stopping again at `k >= stop` is the identity; earlier indices re-stop.
    pub fn stop_at(&self, k: usize) -> Result<StoppedPath> {
        self.grid.check_index(k)?;
        if k >= self.stop {
            return Ok(self.clone());
        }
        Ok(stop(&self.to_grid_path(), k).expect("index checked"))
    }

    /// Materializes the representative as a grid path. Left limits that are
    /// neither the value nor the previous value (a bump at a non-jump index)
    /// are recorded as a jump from the previous value.
    pub fn to_grid_path(&self) -> GridPath {
        let len = self.grid.n_steps + 1;
        let mut values = Vec::with_capacity(len * self.dim);
        for i in 0..len {
            for c in 0..self.dim {
                values.push(self.coord(i, c));
            }
        }
        let jumps = (0..len).map(|i| i > 0 && self.is_jump(i)).collect();
        GridPath {
            grid: self.grid,
            dim: self.dim,
            values,
            jumps,
        }
    }
}

impl PartialEq for StoppedPath {
    fn eq(&self, other: &Self) -> bool {
        if self.grid != other.grid || self.dim != other.dim || self.stop != other.stop {
            return false;
        }
        let len = self.grid.n_steps + 1;
        (0..len).all(|i| (0..self.dim).all(|c| self.coord(i, c) == other.coord(i, c)))
            && (0..=self.stop)
                .all(|i| (0..self.dim).all(|c| self.left_coord(i, c) == other.left_coord(i, c)))
    }
}

/// `ω^{t_k}`: the path frozen at its value at index `k`.
pub fn stop(path: &GridPath, k: usize) -> Result<StoppedPath> {
    path.grid.check_index(k)?;
    Ok(StoppedPath::freeze(
        path,
        k,
        path.value(k),
        path.left_limit(k),
    ))
}

/// `ω^{t_k-}`: the path frozen at its left limit at index `k`.
pub fn stop_pre(path: &GridPath, k: usize) -> Result<StoppedPath> {
    if k == 0 {
        return Err(Error::NoLeftLimit);
    }
    path.grid.check_index(k)?;
    let ll = path.left_limit(k);
    let mut sp = StoppedPath::freeze(path, k, ll, ll);
    sp.pre = true;
    Ok(sp)
}

/// `ω^t + x 𝟙_{[t,T]}`.
pub fn vertical_bump(sp: &StoppedPath, x: &[f64]) -> Result<StoppedPath> {
    if x.len() != sp.dim {
        return Err(Error::DimensionMismatch {
            expected: sp.dim,
            got: x.len(),
        });
    }
    let mut out = sp.clone();
    if out.shift_from != out.stop {
        // An earlier bump now sits strictly inside the past; bake it in.
        let d = out.dim;
        let from = out.shift_from;
        for i in from..out.values.len() / d {
            for c in 0..d {
                out.values[i * d + c] += out.shift[c];
                if i > from {
                    out.left[i * d + c] += out.shift[c];
                }
            }
        }
        out.shift.iter_mut().for_each(|s| *s = 0.0);
        out.shift_from = out.stop;
    }
    for (s, xi) in out.shift.iter_mut().zip(x) {
        *s += xi;
    }
    Ok(out)
}

/// `(t_k + m·dt, ω^{t_k})`: advance the stop index keeping the frozen value.
pub fn horizontal_extend(sp: &StoppedPath, m: usize) -> Result<StoppedPath> {
    if sp.stop + m > sp.grid.n_steps {
        return Err(Error::PastHorizon {
            from: sp.stop,
            steps: m,
            n_steps: sp.grid.n_steps,
        });
    }
    let mut out = sp.clone();
    if m > 0 {
        out.stop += m;
        out.pre = false;
    }
    Ok(out)
}

/// `ω ⊕_t ω'`: the stopped path up to its stop index, then the frozen value
/// plus the continuation's increments after its own value at the stop time.
pub fn concat(sp: &StoppedPath, continuation: &GridPath) -> Result<GridPath> {
    if sp.grid != continuation.grid {
        return Err(Error::GridMismatch);
    }
    if sp.dim != continuation.dim {
        return Err(Error::DimensionMismatch {
            expected: sp.dim,
            got: continuation.dim,
        });
    }
    let d = sp.dim;
    let len = continuation.len();
    let k = sp.stop;
    let offset: Vec<f64> = (0..d)
        .map(|c| sp.coord(k, c) - continuation.value(k)[c])
        .collect();
    let mut values = Vec::with_capacity(len * d);
    let mut jumps = Vec::with_capacity(len);
    for i in 0..len {
        if i < k {
            values.extend((0..d).map(|c| sp.coord(i, c)));
            jumps.push(i > 0 && sp.is_jump(i));
        } else {
            let cv = continuation.value(i);
            values.extend((0..d).map(|c| {
                if offset[c] == 0.0 {
                    cv[c]
                } else {
                    cv[c] + offset[c]
                }
            }));
            jumps.push(if i == k {
                i > 0 && sp.is_jump(i)
            } else {
                continuation.jumps[i]
            });
        }
    }
    GridPath::new(sp.grid, d, values, jumps)
}

/// `d∞((t, ω^t), (s, ω̃^s)) = ‖ω^t − ω̃^s‖∞ + |t − s|`.
pub fn d_infty(a: &StoppedPath, b: &StoppedPath) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let len = a.grid.n_steps + 1;
    let sup = (0..len)
        .map(|i| {
            (0..a.dim)
                .map(|c| (a.coord(i, c) - b.coord(i, c)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    Ok(sup + (a.time() - b.time()).abs())
}
