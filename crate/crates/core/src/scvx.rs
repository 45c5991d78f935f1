//! Successive convexification outer loop.

use nalgebra::Vector6;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{make_solver, ConicSolver, SolveStatus, SolverKind, SolverSettings};
use crate::discretization::{defects, foh_discretize, TrajectoryIterate};
use crate::dynamics::{SpacecraftState, TimeGrid};
use crate::error::{Error, Result};
use crate::information::{assemble_blocks, mi_linearize, mutual_information};
use crate::scenario::{InfoWindow, Scenario};
use crate::subproblem::{
    build_subproblem, solve_subproblem, trapezoid_weights, CostWeights, MiTerm, SubproblemSolution,
};

/// `|J̄ − L*|` below this is a degenerate accuracy ratio.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScvxSettings {
    pub rho0: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub beta_sh: f64,
    pub beta_gr: f64,
    pub eta0: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub tol_defect: f64,
    pub tol_cost: f64,
    pub solver: SolverKind,
    pub solver_max_iter: u32,
    pub solver_tol: f64,
}

impl Default for ScvxSettings {
    fn default() -> Self {
        Self {
            rho0: 0.0,
            rho1: 0.25,
            rho2: 0.7,
            beta_sh: 2.0,
            beta_gr: 2.0,
            eta0: 0.1,
            eta_min: 1e-8,
            eta_max: 10.0,
            gamma: 1e3,
            max_iters: 100,
            tol_defect: 1e-8,
            tol_cost: 1e-7,
            solver: SolverKind::Clarabel,
            solver_max_iter: 200,
            solver_tol: 1e-8,
        }
    }
}

impl ScvxSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("scvx.{field}"), msg));
        if !(0.0 <= self.rho0 && self.rho0 < self.rho1 && self.rho1 < self.rho2 && self.rho2 <= 1.0) {
            return bad("rho0", "need 0 <= rho0 < rho1 < rho2 <= 1");
        }
        if !(self.beta_sh > 1.0 && self.beta_gr > 1.0) {
            return bad("beta_sh", "shrink and growth factors must exceed 1");
        }
        if !(0.0 < self.eta_min && self.eta_min <= self.eta0 && self.eta0 <= self.eta_max && self.eta_max.is_finite()) {
            return bad("eta0", "need 0 < eta_min <= eta0 <= eta_max < inf");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be positive");
        }
        if !(self.tol_defect > 0.0 && self.tol_cost > 0.0 && self.solver_tol > 0.0) {
            return bad("tol_defect", "tolerances must be positive");
        }
        if self.solver_max_iter == 0 {
            return bad("solver_max_iter", "must be positive");
        }
        Ok(())
    }

    pub fn make_solver(&self) -> Box<dyn ConicSolver> {
        make_solver(
            self.solver,
            SolverSettings {
                max_iter: self.solver_max_iter,
                tol: self.solver_tol,
            },
        )
    }
}

/// `ρ = (J̄ − J*) / (J̄ − L*)`; `None` on a degenerate denominator.
pub fn accuracy_ratio(j_ref: f64, j_star: f64, l_star: f64) -> Option<f64> {
    let den = j_ref - l_star;
    (den.abs() >= DEGENERATE_DENOMINATOR).then(|| (j_ref - j_star) / den)
}

/// Trust-region update: returns the new radius and whether the candidate is
/// accepted.
pub fn trust_region_step(rho: f64, eta: f64, s: &ScvxSettings) -> (f64, bool) {
    let (next, accept) = if rho < s.rho0 {
        (eta / s.beta_sh, false)
    } else if rho < s.rho1 {
        (eta / s.beta_sh, true)
    } else if rho < s.rho2 {
        (eta, true)
    } else {
        (eta * s.beta_gr, true)
    };
    (next.clamp(s.eta_min, s.eta_max), accept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Summed mutual information of all windows [nats].
    pub information: f64,
    /// Trapezoid impulse `Σ Δt_k/2 (‖u_k‖ + ‖u_{k+1}‖)`.
    pub impulse: f64,
    /// Trapezoid 1-norm defect integral.
    pub defect: f64,
    pub total: f64,
}

/// `J` from its ingredients; defect `k` belongs to interval `k`.
pub fn penalized_cost(
    grid: &TimeGrid,
    controls: &[nalgebra::Vector3<f64>],
    defects: &[Vector6<f64>],
    information: f64,
    weights: CostWeights,
) -> CostBreakdown {
    let trap = trapezoid_weights(grid);
    let impulse: f64 = trap.iter().zip(controls).map(|(w, u)| w * u.norm()).sum();
    let defect: f64 = trap.iter().zip(defects).map(|(w, d)| w * d.abs().sum()).sum();
    CostBreakdown {
        information,
        impulse,
        defect,
        total: -weights.alpha_h * information + (1.0 - weights.alpha_h) * impulse + weights.gamma * defect,
    }
}

/// Mutual information of one window with the observer at `sensor`.
pub fn window_information(scenario: &Scenario, w: &InfoWindow, sensor: &SpacecraftState) -> Result<f64> {
    let blocks = assemble_blocks(&w.window, sensor, &w.targets_at_start, &w.prior, &scenario.model, &scenario.crtbp)?;
    mutual_information(&blocks)
}

/// Summed mutual information of all windows along `iterate`.
pub fn total_information(scenario: &Scenario, iterate: &TrajectoryIterate) -> Result<f64> {
    scenario
        .windows
        .iter()
        .map(|w| window_information(scenario, w, &iterate.states[w.window.anchor_node]))
        .sum()
}

/// Nonlinear cost `J` of `iterate`, with defects from full propagation.
pub fn nonlinear_cost(scenario: &Scenario, iterate: &TrajectoryIterate, weights: CostWeights) -> Result<CostBreakdown> {
    let d = defects(iterate, &scenario.crtbp)?;
    let info = if weights.alpha_h > 0.0 {
        total_information(scenario, iterate)?
    } else {
        0.0
    };
    Ok(penalized_cost(&iterate.grid, &iterate.controls, &d, info, weights))
}

/// `L` recomputed from the subproblem variables.
pub fn linearized_cost(
    solution: &SubproblemSolution,
    mi_terms: &[MiTerm],
    weights: CostWeights,
    grid: &TimeGrid,
    e_k: &[nalgebra::Matrix6<f64>],
) -> f64 {
    let info: f64 = mi_terms
        .iter()
        .map(|t| t.approx(&solution.states[t.anchor_node].0))
        .sum();
    let virtual_defects: Vec<Vector6<f64>> = e_k.iter().zip(&solution.virtual_controls).map(|(e, v)| e * v).collect();
    penalized_cost(grid, &solution.controls, &virtual_defects, info, weights).total
}

fn mi_terms(scenario: &Scenario, reference: &TrajectoryIterate) -> Result<Vec<MiTerm>> {
    scenario
        .windows
        .par_iter()
        .map(|w| {
            let anchor = w.window.anchor_node;
            let sensor = &reference.states[anchor];
            let lin = mi_linearize(&w.window, sensor, &w.targets_at_start, &w.prior, &scenario.model, &scenario.crtbp)?;
            Ok(MiTerm {
                anchor_node: anchor,
                reference_state: sensor.0,
                lin,
            })
        })
        .collect()
}

fn max_abs(defects: &[Vector6<f64>]) -> f64 {
    defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Nonlinear cost of the reference the subproblem was built around.
    pub j_ref: f64,
    pub j_star: f64,
    pub l_star: f64,
    /// NaN when the ratio was not evaluated.
    pub rho: f64,
    /// Radius used for this subproblem.
    pub eta: f64,
    /// Max-norm defect of the candidate.
    pub max_defect: f64,
    pub accepted: bool,
    pub solver_iterations: u32,
}

impl IterationRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter={} J={:.12e} Jstar={:.12e} L={:.12e} rho={:.6e} eta={:.6e} max_defect={:.6e} accepted={}",
            self.iteration, self.j_ref, self.j_star, self.l_star, self.rho, self.eta, self.max_defect, self.accepted
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScvxReport {
    pub alpha_h: f64,
    pub iterate: TrajectoryIterate,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub cost: CostBreakdown,
    pub max_defect: f64,
}

/// Runs SCvx from the scenario's initial guess.
pub fn solve(scenario: &Scenario, alpha_h: f64, settings: &ScvxSettings) -> Result<ScvxReport> {
    settings.validate()?;
    let weights = CostWeights::new(alpha_h, settings.gamma)?;
    let solver = settings.make_solver();
    let crtbp = &scenario.crtbp;
    let use_info = alpha_h > 0.0 && !scenario.windows.is_empty();

    let mut reference = scenario.initial_guess()?;
    let mut ref_defects = defects(&reference, crtbp)?;
    let mut j_ref = nonlinear_cost(scenario, &reference, weights)?;
    let mut segments = foh_discretize(&reference, crtbp)?;
    let mut terms = if use_info { mi_terms(scenario, &reference)? } else { Vec::new() };
    let mut eta = settings.eta0;
    let mut history = Vec::new();
    let mut converged = false;
    let initial = scenario.observer_initial.0;
    let terminal = scenario.terminal_state.0;

    for iteration in 1..=settings.max_iters {
        let at = |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        let sub = build_subproblem(&segments, &reference, &terms, weights, eta, &initial, &terminal).map_err(at)?;
        let sol = solve_subproblem(&sub, solver.as_ref()).map_err(at)?;
        let mut record = IterationRecord {
            iteration,
            j_ref: j_ref.total,
            j_star: f64::NAN,
            l_star: sol.objective_value,
            rho: f64::NAN,
            eta,
            max_defect: f64::NAN,
            accepted: false,
            solver_iterations: sol.raw.iterations,
        };
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::MaxIter => {
                log::warn!("iter={iteration} subproblem hit the iteration limit; shrinking the trust region");
                eta = (eta / settings.beta_sh).max(settings.eta_min);
                log::info!("{}", record.log_line());
                history.push(record);
                continue;
            }
            status => {
                return Err(at(Error::Solver(format!("subproblem returned {status:?}"))));
            }
        }

        let predicted = j_ref.total - sol.objective_value;
        let ref_max_defect = max_abs(&ref_defects);
        if ref_max_defect <= settings.tol_defect && predicted <= settings.tol_cost {
            record.j_star = j_ref.total;
            record.max_defect = ref_max_defect;
            log::info!("{} stop=predicted_decrease", record.log_line());
            history.push(record);
            converged = true;
            break;
        }

        let candidate = TrajectoryIterate::new(reference.grid.clone(), sol.states, sol.controls, reference.u_max.clone())
            .map_err(at)?;
        let cand_defects = defects(&candidate, crtbp).map_err(at)?;
        let info = if use_info {
            total_information(scenario, &candidate).map_err(at)?
        } else {
            0.0
        };
        let j_star = penalized_cost(&candidate.grid, &candidate.controls, &cand_defects, info, weights);
        record.j_star = j_star.total;
        record.max_defect = max_abs(&cand_defects);

        let (next_eta, accept) = match accuracy_ratio(j_ref.total, j_star.total, sol.objective_value) {
            Some(rho) => {
                record.rho = rho;
                trust_region_step(rho, eta, settings)
            }
            None => ((eta / settings.beta_sh).max(settings.eta_min), false),
        };
        record.accepted = accept;
        log::info!("{}", record.log_line());
        history.push(record);
        eta = next_eta;

        if accept {
            let improvement = j_ref.total - j_star.total;
            reference = candidate;
            ref_defects = cand_defects;
            j_ref = j_star;
            if max_abs(&ref_defects) <= settings.tol_defect && improvement.abs() <= settings.tol_cost {
                converged = true;
                break;
            }
            segments = foh_discretize(&reference, crtbp).map_err(at)?;
            if use_info {
                terms = mi_terms(scenario, &reference).map_err(at)?;
            }
        }
    }

    let mut cost = j_ref;
    if !use_info && !scenario.windows.is_empty() {
        cost.information = total_information(scenario, &reference)?;
    }
    Ok(ScvxReport {
        alpha_h,
        iterations: history.len(),
        history,
        converged,
        cost,
        max_defect: max_abs(&ref_defects),
        iterate: reference,
    })
}
