//! Linear-covariance (CRLB) analysis of planned trajectories, impulse
//! accounting and Pareto sweeps over the homotopy weight.
//!
//! Covariances are propagated as `P̄ = Φ P̂ Φᵀ + Q(Δt)`, with the
//! state-noise-compensation block of each object added after the transition,
//! which is the same process-noise model the batch information blocks use.

use nalgebra::{DMatrix, Matrix6};
use rayon::prelude::*;
use serde::Serialize;

use crate::discretization::{foh_discretize, TrajectoryIterate};
use crate::dynamics::{process_noise_segment, Crtbp, SpacecraftState, StmOrder, SystemParameters};
use crate::error::{Error, Result};
use crate::information::AugmentedPrior;
use crate::measurements::MeasurementModel;
use crate::scenario::{InfoWindow, Scenario, NODE_TOL};
use crate::scvx::{solve, ScvxReport, ScvxSettings};
use crate::subproblem::trapezoid_weights;

/// One epoch of a linear covariance pass.
#[derive(Clone, Debug)]
pub struct LinearStep {
    pub epoch: f64,
    /// Transition from the previous epoch; ignored on the first step.
    pub transition: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    /// `(H, R)` when a measurement is processed at this epoch.
    pub measurement: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Pre- and post-update covariances of a filter pass.
#[derive(Clone, Debug)]
pub struct CovariancePass {
    pub epochs: Vec<f64>,
    pub pre_update: Vec<DMatrix<f64>>,
    pub post_update: Vec<DMatrix<f64>>,
    pub measured: Vec<bool>,
    /// `½ Σ (ln det S_k − ln det R_k)` over all updates [nats].
    pub information_gain: f64,
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

fn ln_det_pd(m: &DMatrix<f64>, what: &str) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.into()))?;
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((ln_det, chol))
}

/// Runs the covariance recursion from `p0` at `steps[0].epoch`, applying
/// measurement updates in Joseph form.
pub fn covariance_pass(p0: &DMatrix<f64>, steps: &[LinearStep]) -> Result<CovariancePass> {
    let n = p0.nrows();
    if p0.ncols() != n {
        return Err(Error::DimensionMismatch("initial covariance is not square".into()));
    }
    let mut pass = CovariancePass {
        epochs: Vec::with_capacity(steps.len()),
        pre_update: Vec::with_capacity(steps.len()),
        post_update: Vec::with_capacity(steps.len()),
        measured: Vec::with_capacity(steps.len()),
        information_gain: 0.0,
    };
    let mut p = symmetrize(p0);
    for (k, step) in steps.iter().enumerate() {
        if k > 0 {
            let phi = &step.transition;
            if phi.shape() != (n, n) || step.process_noise.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!("step {k} does not match state dimension {n}")));
            }
            p = symmetrize(&(phi * &p * phi.transpose() + &step.process_noise));
        }
        pass.epochs.push(step.epoch);
        pass.pre_update.push(p.clone());
        if let Some((h, r)) = &step.measurement {
            let m = h.nrows();
            if h.ncols() != n || r.shape() != (m, m) {
                return Err(Error::DimensionMismatch(format!("measurement at step {k} does not match")));
            }
            let s = symmetrize(&(h * &p * h.transpose() + r));
            let (ln_det_s, s_chol) = ln_det_pd(&s, &format!("innovation covariance at t = {}", step.epoch))?;
            let (ln_det_r, _) = ln_det_pd(r, &format!("measurement noise at t = {}", step.epoch))?;
            pass.information_gain += 0.5 * (ln_det_s - ln_det_r);
            // K = P̄ Hᵀ S⁻¹
            let k_gain = s_chol.solve(&(h * &p)).transpose();
            let i_kh = DMatrix::identity(n, n) - &k_gain * h;
            p = symmetrize(&(&i_kh * &p * i_kh.transpose() + &k_gain * r * k_gain.transpose()));
        }
        pass.measured.push(step.measurement.is_some());
        pass.post_update.push(p.clone());
    }
    Ok(pass)
}

/// Augmented covariance history with position RMS per object.
#[derive(Clone, Debug)]
pub struct CovarianceHistory {
    pub pass: CovariancePass,
    /// `[epoch][object]`, object 0 is the observer [km].
    pub rms_pre_km: Vec<Vec<f64>>,
    pub rms_post_km: Vec<Vec<f64>>,
}

impl CovarianceHistory {
    fn new(pass: CovariancePass, params: &SystemParameters) -> Self {
        let rms = |ps: &[DMatrix<f64>]| -> Vec<Vec<f64>> {
            ps.iter()
                .map(|p| {
                    (0..p.nrows() / 6)
                        .map(|o| {
                            let tr: f64 = (0..3).map(|i| p[(6 * o + i, 6 * o + i)]).sum();
                            params.du_to_km(tr.max(0.0).sqrt())
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            rms_pre_km: rms(&pass.pre_update),
            rms_post_km: rms(&pass.post_update),
            pass,
        }
    }

    pub fn epochs(&self) -> &[f64] {
        &self.pass.epochs
    }

    pub fn n_objects(&self) -> usize {
        self.pass.post_update.first().map_or(0, |p| p.nrows() / 6)
    }

    /// Post-update position RMS at the last measurement epoch, or at the final
    /// epoch when nothing was measured [km].
    pub fn terminal_rms(&self) -> Vec<f64> {
        let k = self
            .pass
            .measured
            .iter()
            .rposition(|&m| m)
            .unwrap_or(self.pass.epochs.len().saturating_sub(1));
        self.rms_post_km.get(k).cloned().unwrap_or_default()
    }
}

fn block_diag(blocks: &[Matrix6<f64>]) -> DMatrix<f64> {
    let n = 6 * blocks.len();
    let mut m = DMatrix::zeros(n, n);
    for (o, b) in blocks.iter().enumerate() {
        m.view_mut((6 * o, 6 * o), (6, 6)).copy_from(b);
    }
    m
}

fn augmented_noise(q_psd: &[f64], dt: f64) -> Result<DMatrix<f64>> {
    let blocks = q_psd
        .iter()
        .map(|&q| process_noise_segment(q, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(block_diag(&blocks))
}

/// `(H_A, R_A)` stacking one measurement of every target from the observer.
fn augmented_measurement(
    model: &MeasurementModel,
    sensor: &SpacecraftState,
    targets: &[SpacecraftState],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = model.dim();
    let n_t = targets.len();
    let mut h = DMatrix::zeros(m * n_t, 6 * (n_t + 1));
    let mut r = DMatrix::zeros(m * n_t, m * n_t);
    for (i, target) in targets.iter().enumerate() {
        let (hs, ht) = model.jacobians(target, sensor)?;
        h.view_mut((m * i, 0), (m, 6)).copy_from(&hs);
        h.view_mut((m * i, 6 * (i + 1)), (m, 6)).copy_from(&ht);
        r.view_mut((m * i, m * i), (m, m)).copy_from(model.noise_cov());
    }
    Ok((h, r))
}

/// Coasting states and gap transitions of `state` through `epochs`.
fn coast_transitions(
    crtbp: &Crtbp,
    state: &SpacecraftState,
    epochs: &[f64],
) -> Result<(Vec<SpacecraftState>, Vec<Matrix6<f64>>)> {
    let mut states = vec![*state];
    let mut phis = vec![Matrix6::identity()];
    for w in epochs.windows(2) {
        let (s, stm) = crtbp.propagate_with_stm(states.last().expect("non-empty"), w[0], w[1], StmOrder::First)?;
        states.push(s);
        phis.push(stm.first_order);
    }
    Ok((states, phis))
}

/// Assembles the augmented steps from per-object states and gap transitions.
fn build_steps(
    epochs: &[f64],
    objects: &[(Vec<SpacecraftState>, Vec<Matrix6<f64>>)],
    measure_at: &[bool],
    q_psd: &[f64],
    model: &MeasurementModel,
) -> Result<Vec<LinearStep>> {
    let n_a = 6 * objects.len();
    (0..epochs.len())
        .map(|j| {
            let transition = block_diag(&objects.iter().map(|(_, phis)| phis[j]).collect::<Vec<_>>());
            let process_noise = if j == 0 {
                DMatrix::zeros(n_a, n_a)
            } else {
                augmented_noise(q_psd, epochs[j] - epochs[j - 1])?
            };
            let measurement = if measure_at[j] {
                let targets: Vec<SpacecraftState> = objects[1..].iter().map(|(s, _)| s[j]).collect();
                Some(augmented_measurement(model, &objects[0].0[j], &targets)?)
            } else {
                None
            };
            Ok(LinearStep {
                epoch: epochs[j],
                transition,
                process_noise,
                measurement,
            })
        })
        .collect()
}

fn augmented_prior(prior: &AugmentedPrior) -> DMatrix<f64> {
    let blocks: Vec<Matrix6<f64>> = (0..prior.n_objects()).map(|o| *prior.covariance(o)).collect();
    block_diag(&blocks)
}

/// CRLB along a planned trajectory, linearized about the planned observer
/// nodes and the coasting target catalog states. Epochs are `t_0`, every
/// measurement epoch and `t_f`, all of which must be grid nodes.
pub fn crlb_run(trajectory: &TrajectoryIterate, scenario: &Scenario) -> Result<CovarianceHistory> {
    let grid = &trajectory.grid;
    if grid.len() != scenario.grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has {} nodes, scenario grid has {}",
            grid.len(),
            scenario.grid.len()
        )));
    }
    let measurement_epochs = scenario.measurement_epochs();
    let mut epochs = vec![grid.first()];
    epochs.extend(measurement_epochs.iter().copied());
    epochs.push(grid.last());
    epochs.dedup_by(|a, b| (*a - *b).abs() <= NODE_TOL);
    let nodes = epochs
        .iter()
        .map(|&t| {
            grid.find(t, NODE_TOL)
                .ok_or_else(|| Error::InvalidArgument(format!("epoch {t} is not a trajectory node")))
        })
        .collect::<Result<Vec<_>>>()?;
    let measure_at: Vec<bool> = epochs
        .iter()
        .map(|t| measurement_epochs.iter().any(|m| (m - t).abs() <= NODE_TOL))
        .collect();

    let segments = foh_discretize(trajectory, &scenario.crtbp)?;
    let observer_phis: Vec<Matrix6<f64>> = std::iter::once(Matrix6::identity())
        .chain(nodes.windows(2).map(|w| {
            segments[w[0]..w[1]]
                .iter()
                .fold(Matrix6::identity(), |acc, seg| seg.a_k * acc)
        }))
        .collect();
    let observer_states: Vec<SpacecraftState> = nodes.iter().map(|&k| trajectory.states[k]).collect();

    let targets = scenario
        .targets
        .par_iter()
        .map(|t| coast_transitions(&scenario.crtbp, t, &epochs))
        .collect::<Result<Vec<_>>>()?;
    let mut objects = vec![(observer_states, observer_phis)];
    objects.extend(targets);

    let steps = build_steps(&epochs, &objects, &measure_at, &scenario.prior.q_psd, &scenario.model)?;
    let pass = covariance_pass(&augmented_prior(&scenario.prior), &steps)?;
    Ok(CovarianceHistory::new(pass, &scenario.params))
}

/// Filter view of one observation window: every object coasts from the window
/// start under the window's planning prior, with the observer at `sensor`.
pub fn window_crlb(
    window: &InfoWindow,
    sensor: &SpacecraftState,
    model: &MeasurementModel,
    crtbp: &Crtbp,
) -> Result<CovarianceHistory> {
    let epochs = window.window.epochs(&crtbp.params);
    if epochs.is_empty() {
        return Err(Error::InvalidArgument("observation window holds no epochs".into()));
    }
    let objects = std::iter::once(sensor)
        .chain(&window.targets_at_start)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|s| coast_transitions(crtbp, s, &epochs))
        .collect::<Result<Vec<_>>>()?;
    let steps = build_steps(&epochs, &objects, &vec![true; epochs.len()], &window.prior.q_psd, model)?;
    let pass = covariance_pass(&augmented_prior(&window.prior), &steps)?;
    Ok(CovarianceHistory::new(pass, &crtbp.params))
}

/// Trapezoid integral of `‖u‖` over the grid [km/s].
pub fn total_impulse(trajectory: &TrajectoryIterate, params: &SystemParameters) -> f64 {
    let du_tu: f64 = trapezoid_weights(&trajectory.grid)
        .iter()
        .zip(&trajectory.controls)
        .map(|(w, u)| w * u.norm())
        .sum();
    params.du_tu_to_km_s(du_tu)
}

/// Total impulse divided by the trajectory duration in days [km/s/day].
pub fn average_impulse_per_day(trajectory: &TrajectoryIterate, params: &SystemParameters) -> f64 {
    let days = params.tu_to_days(trajectory.grid.last() - trajectory.grid.first());
    total_impulse(trajectory, params) / days
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub alpha_h: f64,
    /// [km/s]
    pub total_impulse: f64,
    /// [km/s/day]
    pub avg_impulse_per_day: f64,
    /// Observer first, then targets [km].
    pub terminal_rms: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Failure message when the point could not be computed.
    pub error: Option<String>,
}

impl ParetoPoint {
    fn failed(alpha_h: f64, n_objects: usize, e: &Error) -> Self {
        Self {
            alpha_h,
            total_impulse: f64::NAN,
            avg_impulse_per_day: f64::NAN,
            terminal_rms: vec![f64::NAN; n_objects],
            converged: false,
            iterations: 0,
            error: Some(e.to_string()),
        }
    }
}

/// A solved plan with its evaluation.
#[derive(Clone, Debug)]
pub struct EvaluatedPlan {
    pub report: ScvxReport,
    pub history: CovarianceHistory,
}

impl EvaluatedPlan {
    pub fn point(&self, params: &SystemParameters) -> ParetoPoint {
        ParetoPoint {
            alpha_h: self.report.alpha_h,
            total_impulse: total_impulse(&self.report.iterate, params),
            avg_impulse_per_day: average_impulse_per_day(&self.report.iterate, params),
            terminal_rms: self.history.terminal_rms(),
            converged: self.report.converged,
            iterations: self.report.iterations,
            error: None,
        }
    }
}

pub fn plan_and_evaluate(scenario: &Scenario, alpha_h: f64, settings: &ScvxSettings) -> Result<EvaluatedPlan> {
    let report = solve(scenario, alpha_h, settings)?;
    let history = crlb_run(&report.iterate, scenario)?;
    Ok(EvaluatedPlan { report, history })
}

/// One plan and CRLB per weight, in input order. Failures are recorded on
/// their point and do not abort the sweep.
pub fn pareto_sweep(scenario: &Scenario, alpha_grid: &[f64], settings: &ScvxSettings) -> Vec<ParetoPoint> {
    alpha_grid
        .par_iter()
        .map(|&alpha| match plan_and_evaluate(scenario, alpha, settings) {
            Ok(plan) => plan.point(&scenario.params),
            Err(e) => {
                log::warn!("alpha_h={alpha} failed: {e}");
                ParetoPoint::failed(alpha, scenario.n_targets() + 1, &e)
            }
        })
        .collect()
}
