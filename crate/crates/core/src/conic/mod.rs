//! Linear programs over products of zero, nonnegative and second-order cones:
//!
//! ```text
//! minimize cᵀx  subject to  A x + s = b,  s ∈ K
//! ```
//!
//! `K` is the Cartesian product of `cones` in row order. A second-order cone
//! of dimension `d` is `{(t, v) : ‖v‖₂ ≤ t}` with `t` in its first row.

mod clarabel_backend;
mod dense_ipm;
mod dump;

pub use clarabel_backend::ClarabelSolver;
pub use dense_ipm::DenseIpm;
pub use dump::{read_program, write_program};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
}

impl Cone {
    pub fn dim(self) -> usize {
        match self {
            Cone::Zero(d) | Cone::Nonneg(d) | Cone::Soc(d) => d,
        }
    }
}

/// Sparse matrix in coordinate form; duplicate entries are summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    /// Zero values are dropped.
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Compressed-column form `(colptr, rowval, nzval)` with duplicates summed.
    pub fn to_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut sorted = self.entries.clone();
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0usize; self.ncols + 1];
        let mut rowval = Vec::with_capacity(sorted.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *nzval.last_mut().unwrap() += v;
                continue;
            }
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..self.ncols {
            colptr[c + 1] += colptr[c];
        }
        (colptr, rowval, nzval)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn tr_mul_vec(&self, z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(r, c, v) in &self.entries {
            y[c] += v * z[r];
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConicProgram {
    pub c: Vec<f64>,
    pub a: Triplets,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProgram {
    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let rows: usize = self.cones.iter().map(|c| c.dim()).sum();
        if self.a.ncols != self.c.len() || self.a.nrows != self.b.len() || rows != self.b.len() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, c has {}, b has {}, cones cover {rows} rows",
                self.a.nrows,
                self.a.ncols,
                self.c.len(),
                self.b.len()
            )));
        }
        if self.cones.iter().any(|c| matches!(c, Cone::Soc(d) if *d < 2)) {
            return Err(Error::DimensionMismatch("second-order cones need dimension >= 2".into()));
        }
        if self.a.entries.iter().any(|&(r, c, _)| r >= self.a.nrows || c >= self.a.ncols) {
            return Err(Error::DimensionMismatch("matrix entry out of range".into()));
        }
        if !self.c.iter().chain(&self.b).chain(self.a.entries.iter().map(|e| &e.2)).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite program data".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Largest violation of `s = b − A x ∈ K`, measured per cone.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let ax = self.a.mul_vec(x);
        let s: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut off = 0;
        let mut worst: f64 = 0.0;
        for cone in &self.cones {
            let d = cone.dim();
            let blk = &s[off..off + d];
            let v = match cone {
                Cone::Zero(_) => blk.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Cone::Nonneg(_) => blk.iter().fold(0.0f64, |m, v| m.max(-v)),
                Cone::Soc(_) => {
                    let tail = blk[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    (tail - blk[0]).max(0.0)
                }
            };
            worst = worst.max(v);
            off += d;
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub max_iter: u32,
    pub tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

pub trait ConicSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Clarabel,
    DenseIpm,
}

pub fn make_solver(kind: SolverKind, settings: SolverSettings) -> Box<dyn ConicSolver> {
    match kind {
        SolverKind::Clarabel => Box::new(ClarabelSolver::new(settings)),
        SolverKind::DenseIpm => Box::new(DenseIpm::new(settings)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// minimize |x − 2| subject to |x| ≤ 1, as an epigraph SOCP in (x, t).
    pub(crate) fn abs_program() -> ConicProgram {
        let mut a = Triplets::new(4, 2);
        // (t, x − 2) ∈ Q²:  s = (t, x − 2) = b − A(x, t)
        a.push(0, 1, -1.0);
        a.push(1, 0, -1.0);
        // (1, x) ∈ Q²
        a.push(3, 0, -1.0);
        ConicProgram {
            c: vec![0.0, 1.0],
            a,
            b: vec![0.0, -2.0, 1.0, 0.0],
            cones: vec![Cone::Soc(2), Cone::Soc(2)],
        }
    }

    /// Small LP/SOCP mix with a known optimum: maximize x + y over the unit
    /// disc intersected with x ≤ 0.5.
    pub(crate) fn disc_program() -> ConicProgram {
        let mut a = Triplets::new(5, 2);
        // 0.5 − x ≥ 0
        a.push(0, 0, 1.0);
        // (1, x, y) ∈ Q³
        a.push(2, 0, -1.0);
        a.push(3, 1, -1.0);
        // 1 + y ≥ 0, inactive at the optimum
        a.push(4, 1, -1.0);
        ConicProgram {
            c: vec![-1.0, -1.0],
            a,
            b: vec![0.5, 1.0, 0.0, 0.0, 1.0],
            cones: vec![Cone::Nonneg(1), Cone::Soc(3), Cone::Nonneg(1)],
        }
    }

    #[test]
    fn csc_sums_duplicates() {
        let mut t = Triplets::new(2, 2);
        t.push(1, 0, 1.0);
        t.push(0, 1, 2.0);
        t.push(1, 0, 3.0);
        let (cp, rv, nz) = t.to_csc();
        assert_eq!(cp, vec![0, 1, 2]);
        assert_eq!(rv, vec![1, 0]);
        assert_eq!(nz, vec![4.0, 2.0]);
    }

    #[test]
    fn both_solvers_solve_hand_instances() {
        for solver in [make_solver(SolverKind::Clarabel, SolverSettings::default()), make_solver(SolverKind::DenseIpm, SolverSettings::default())] {
            let sol = solver.solve(&abs_program()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "{}", solver.name());
            assert!((sol.x[0] - 1.0).abs() < 1e-7, "{}: {:?}", solver.name(), sol.x);
            assert!((sol.objective - 1.0).abs() < 1e-7);

            let sol = solver.solve(&disc_program()).unwrap();
            let expected = -(0.5 + 0.75f64.sqrt());
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!((sol.objective - expected).abs() < 1e-7, "{}: {}", solver.name(), sol.objective);
            assert!(disc_program().max_violation(&sol.x) < 1e-8);
        }
    }

    #[test]
    fn validation_catches_shape_errors() {
        let mut p = abs_program();
        p.cones = vec![Cone::Soc(2)];
        assert!(p.validate().is_err());
    }
}
