//! Closed-contour dynamic programming on a warped map.
//!
//! Line `n` couples to its cyclic successor through
//! `E(n, i, j) = [g(n,i) − g(n,i−1)] + [g(n⊕1,j) − g(n⊕1,j−1)]` when
//! `|i − j| ≤ δ` and `+∞` otherwise, with `g(n,0) := g(n,1)`. The solver
//! minimizes `Σ_n E(n, v_n, v_{n⊕1})` over one index per line by building a
//! value table `U` and an index table `I` over `N − 1` stages, then
//! backtracking from the best closing index. Indices are 1-based at the API
//! boundary and every argmin breaks ties toward the smallest index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::ContourIndices;

/// Which sign of the directional derivative the solver rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgePolarity {
    /// Minimize the summed outward derivatives of `g` (bright-to-dark edges).
    AsPrinted,
    /// Minimize the summed outward derivatives of `−g` (dark-to-bright edges).
    #[default]
    Negated,
}

impl EdgePolarity {
    /// The map the solver actually sees.
    pub fn apply(self, g: &[f64]) -> Vec<f64> {
        match self {
            EdgePolarity::AsPrinted => g.to_vec(),
            EdgePolarity::Negated => g.iter().map(|v| -v).collect(),
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            EdgePolarity::AsPrinted => 1.0,
            EdgePolarity::Negated => -1.0,
        }
    }
}

impl std::str::FromStr for EdgePolarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(Self::AsPrinted),
            "negated" => Ok(Self::Negated),
            _ => Err(Error::InvalidArgument(format!(
                "edge polarity must be `as-printed` or `negated`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for EdgePolarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AsPrinted => "as-printed",
            Self::Negated => "negated",
        })
    }
}

/// A warped map viewed as `num_lines × points_per_line`, line-major.
#[derive(Clone, Copy, Debug)]
pub struct LineGrid<'a> {
    values: &'a [f64],
    num_lines: usize,
    points_per_line: usize,
}

impl<'a> LineGrid<'a> {
    pub fn new(values: &'a [f64], num_lines: usize, points_per_line: usize) -> Result<Self> {
        if values.len() != num_lines * points_per_line {
            return Err(Error::Shape(format!(
                "{} values for {num_lines} lines of {points_per_line} points",
                values.len()
            )));
        }
        Ok(Self { values, num_lines, points_per_line })
    }

    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn points_per_line(&self) -> usize {
        self.points_per_line
    }

    /// Line `n` (0-based), sample `m` (1-based).
    #[inline]
    fn at(&self, n: usize, m: usize) -> f64 {
        self.values[n * self.points_per_line + m - 1]
    }

    /// Outward difference `g(n,m) − g(n,m−1)` with `g(n,0) := g(n,1)`.
    #[inline]
    fn derivative(&self, n: usize, m: usize) -> f64 {
        self.at(n, m) - self.at(n, m.max(2) - 1)
    }

    /// `E(n, i, j)` for 0-based line `n` and 1-based samples.
    #[inline]
    fn energy(&self, n: usize, i: usize, j: usize, delta: usize) -> f64 {
        if i.abs_diff(j) > delta {
            f64::INFINITY
        } else {
            self.derivative(n, i) + self.derivative((n + 1) % self.num_lines, j)
        }
    }
}

fn check_problem(grid: &LineGrid<'_>, delta: usize) -> Result<()> {
    let (n, m) = (grid.num_lines, grid.points_per_line);
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 lines, got {n}")));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 points per line, got {m}")));
    }
    if delta < 1 || delta >= m {
        return Err(Error::InvalidArgument(format!("delta must lie in 1..{m}, got {delta}")));
    }
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("warped map".into()));
    }
    Ok(())
}

/// Dense `N × M × M` energy table.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTable {
    num_lines: usize,
    points_per_line: usize,
    delta: usize,
    e: Vec<f64>,
}

impl EnergyTable {
    pub fn delta(&self) -> usize {
        self.delta
    }

    /// `E(n, i, j)` with 1-based line and samples.
    pub fn get(&self, n: usize, i: usize, j: usize) -> f64 {
        let m = self.points_per_line;
        self.e[((n - 1) * m + (i - 1)) * m + (j - 1)]
    }

    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn points_per_line(&self) -> usize {
        self.points_per_line
    }
}

pub fn build_energy(grid: LineGrid<'_>, delta: usize) -> Result<EnergyTable> {
    check_problem(&grid, delta)?;
    let (n_lines, m) = (grid.num_lines, grid.points_per_line);
    let mut e = Vec::with_capacity(n_lines * m * m);
    for n in 0..n_lines {
        for i in 1..=m {
            for j in 1..=m {
                e.push(grid.energy(n, i, j, delta));
            }
        }
    }
    Ok(EnergyTable { num_lines: n_lines, points_per_line: m, delta, e })
}

/// Value and index tables of every stage.
#[derive(Clone, Debug)]
pub struct DpTables {
    points_per_line: usize,
    /// `(N−1) × M × M`
    u: Vec<f64>,
    /// `(N−1) × M × M`, 1-based indices.
    i: Vec<u32>,
}

impl DpTables {
    pub fn stages(&self) -> usize {
        self.u.len() / (self.points_per_line * self.points_per_line)
    }

    /// `U(n, i, k)`, all 1-based.
    pub fn value(&self, n: usize, i: usize, k: usize) -> f64 {
        let m = self.points_per_line;
        self.u[((n - 1) * m + i - 1) * m + k - 1]
    }

    /// `I(n, i, k)`, all 1-based.
    pub fn index(&self, n: usize, i: usize, k: usize) -> usize {
        let m = self.points_per_line;
        self.i[((n - 1) * m + i - 1) * m + k - 1] as usize
    }
}

/// Optimal contour and its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSolution {
    pub indices: ContourIndices,
    pub cost: f64,
}

/// Runs the stage recursion. Only the current and previous value slabs are
/// kept unless `keep_values` is set; the index tables are always kept for
/// backtracking.
fn run_stages(grid: &LineGrid<'_>, delta: usize, keep_values: bool) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let (n_lines, m) = (grid.num_lines, grid.points_per_line);
    let slab = m * m;
    let mut index = vec![0u32; (n_lines - 1) * slab];
    let mut all_values = if keep_values { Vec::with_capacity((n_lines - 1) * slab) } else { Vec::new() };
    let mut prev = vec![f64::INFINITY; slab];
    let mut cur = vec![f64::INFINITY; slab];

    for stage in 1..n_lines {
        let idx = &mut index[(stage - 1) * slab..stage * slab];
        for i in 1..=m {
            for k in 1..=m {
                // E(stage+1, j, k) is finite only for |j − k| ≤ δ
                let lo = k.saturating_sub(delta).max(1);
                let hi = (k + delta).min(m);
                let mut best = f64::INFINITY;
                let mut arg = 1u32;
                for j in lo..=hi {
                    let head = if stage == 1 {
                        grid.energy(0, i, j, delta)
                    } else {
                        prev[(i - 1) * m + j - 1]
                    };
                    let cand = head + grid.energy(stage, j, k, delta);
                    if cand < best {
                        best = cand;
                        arg = j as u32;
                    }
                }
                cur[(i - 1) * m + k - 1] = best;
                idx[(i - 1) * m + k - 1] = arg;
            }
        }
        if keep_values {
            all_values.extend_from_slice(&cur);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (prev, all_values, index)
}

/// Builds the full value and index tables (all stages retained).
pub fn dp_tables(grid: LineGrid<'_>, delta: usize) -> Result<DpTables> {
    check_problem(&grid, delta)?;
    let (_, u, i) = run_stages(&grid, delta, true);
    Ok(DpTables { points_per_line: grid.points_per_line, u, i })
}

/// Minimizes the closed-contour cost exactly.
pub fn dp_solve(grid: LineGrid<'_>, delta: usize) -> Result<DpSolution> {
    check_problem(&grid, delta)?;
    let (n_lines, m) = (grid.num_lines, grid.points_per_line);
    let (last, _, index) = run_stages(&grid, delta, false);

    let mut first = 1;
    let mut cost = f64::INFINITY;
    for j in 1..=m {
        let u = last[(j - 1) * m + j - 1];
        if u < cost {
            cost = u;
            first = j;
        }
    }
    if !cost.is_finite() {
        return Err(Error::Infeasible);
    }
    let table = |stage: usize, i: usize, k: usize| index[((stage - 1) * m + i - 1) * m + k - 1] as usize;
    let mut v = vec![0usize; n_lines];
    v[0] = first;
    v[n_lines - 1] = table(n_lines - 1, first, first);
    for n in (2..n_lines).rev() {
        v[n - 1] = table(n - 1, first, v[n]);
    }
    Ok(DpSolution { indices: ContourIndices::from_raw(v), cost })
}

/// Solves a batch of independent problems sharing one shape.
pub fn dp_solve_batch(
    exec: Exec,
    maps: &[Vec<f64>],
    num_lines: usize,
    points_per_line: usize,
    delta: usize,
) -> Result<Vec<DpSolution>> {
    exec.map(maps.len(), |b| dp_solve(LineGrid::new(&maps[b], num_lines, points_per_line)?, delta))
        .into_iter()
        .collect()
}

/// Evaluates the closed-contour cost of `v`, summing lines in order
/// `E(1,v1,v2) + … + E(N,vN,v1)`; `+∞` when any consecutive gap exceeds δ.
pub fn contour_cost(grid: LineGrid<'_>, v: &ContourIndices, delta: usize) -> f64 {
    let n = grid.num_lines;
    let v = v.as_slice();
    debug_assert_eq!(v.len(), n);
    let mut total = 0.0;
    for line in 0..n {
        total += grid.energy(line, v[line], v[(line + 1) % n], delta);
    }
    total
}

/// Exhaustive minimization over all `M^N` assignments, lexicographically
/// smallest winner on ties. Test oracle for [`dp_solve`].
pub fn brute_force_solve(grid: LineGrid<'_>, delta: usize) -> Result<DpSolution> {
    check_problem(&grid, delta)?;
    let (n, m) = (grid.num_lines, grid.points_per_line);
    let count = (m as f64).powi(n as i32);
    if count > 1e7 {
        return Err(Error::TooLarge(count));
    }
    let mut v = vec![1usize; n];
    let mut best = f64::INFINITY;
    let mut best_v = v.clone();
    'outer: loop {
        // same summation order as the stage recursion
        let mut total = grid.energy(0, v[0], v[1], delta);
        for line in 1..n {
            total += grid.energy(line, v[line], v[(line + 1) % n], delta);
        }
        if total < best {
            best = total;
            best_v.copy_from_slice(&v);
        }
        for pos in (0..n).rev() {
            if v[pos] < m {
                v[pos] += 1;
                v[pos + 1..].iter_mut().for_each(|x| *x = 1);
                continue 'outer;
            }
        }
        break;
    }
    if !best.is_finite() {
        return Err(Error::Infeasible);
    }
    Ok(DpSolution { indices: ContourIndices::from_raw(best_v), cost: best })
}

/// Circular moving average of the indices, rounded half up and clamped to
/// `1..=points_per_line`.
pub fn smooth_indices(v: &ContourIndices, window: usize, points_per_line: usize) -> Result<ContourIndices> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("smoothing window must be odd, got {window}")));
    }
    let v = v.as_slice();
    let n = v.len();
    if n == 0 {
        return Ok(ContourIndices::from_raw(Vec::new()));
    }
    let half = window / 2;
    let out = (0..n)
        .map(|i| {
            let sum: usize = (0..window).map(|k| v[(i + n * window - half + k) % n]).sum();
            // floor(sum / window + 1/2) in integer arithmetic
            let r = (2 * sum + window) / (2 * window);
            r.clamp(1, points_per_line)
        })
        .collect();
    Ok(ContourIndices::from_raw(out))
}
