use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{Cone, ConicProgram, ConicSolution, ConicSolver, SolveStatus, SolverSettings};
use crate::error::{Error, Result};

/// Sparse interior-point backend.
#[derive(Clone, Debug)]
pub struct ClarabelSolver {
    settings: SolverSettings,
}

impl ClarabelSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }
}

impl ConicSolver for ClarabelSolver {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution> {
        program.validate()?;
        let n = program.n_vars();
        let m = program.n_rows();
        let p = CscMatrix::new(n, n, vec![0; n + 1], Vec::new(), Vec::new());
        let (colptr, rowval, nzval) = program.a.to_csc();
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let cones: Vec<SupportedConeT<f64>> = program
            .cones
            .iter()
            .map(|c| match *c {
                Cone::Zero(d) => SupportedConeT::ZeroConeT(d),
                Cone::Nonneg(d) => SupportedConeT::NonnegativeConeT(d),
                Cone::Soc(d) => SupportedConeT::SecondOrderConeT(d),
            })
            .collect();
        let tol = self.settings.tol;
        let settings = DefaultSettingsBuilder::default()
            .verbose(std::env::var_os("INFOPLAN_CLARABEL_VERBOSE").is_some())
            .max_iter(self.settings.max_iter)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .max_threads(1)
            .build()
            .map_err(|e| Error::Solver(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &program.c, &a, &program.b, &cones, settings)
            .map_err(|e| Error::Solver(e.to_string()))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => {
                log::warn!("clarabel returned a reduced-accuracy solution");
                SolveStatus::Optimal
            }
            SolverStatus::PrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::AlmostDualInfeasible => SolveStatus::Infeasible,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIter,
            _ => SolveStatus::NumericalFailure,
        };
        Ok(ConicSolution {
            objective: program.objective(&sol.x),
            x: sol.x.clone(),
            s: sol.s.clone(),
            z: sol.z.clone(),
            status,
            iterations: sol.iterations,
        })
    }
}
