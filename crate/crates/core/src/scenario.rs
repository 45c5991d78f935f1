//! Scenario configuration: the TOML document and its resolved, normalized
//! form. Every SI to normalized conversion happens in [`ScenarioConfig::resolve`].

use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::discretization::{thrust_bounds, TrajectoryIterate};
use crate::dynamics::{process_noise_segment, Crtbp, SpacecraftState, StmOrder, SystemParameters, TimeGrid};
use crate::error::{Error, Result};
use crate::information::{AugmentedPrior, ObservationWindow};
use crate::measurements::{MeasurementKind, MeasurementModel};
use crate::scvx::ScvxSettings;

/// Epochs within this distance of a node are taken to coincide with it [TU].
pub const NODE_TOL: f64 = 1e-9;
/// Grid nodes closer than this fraction of the local spacing snap onto epochs.
pub const SNAP_FRACTION: f64 = 0.25;
pub const DEFAULT_NODES_PER_PERIOD: f64 = 60.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemOverrides {
    pub mu: Option<f64>,
    pub du_km: Option<f64>,
    pub tu_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    /// Observer state at `t0` [DU, DU/TU].
    pub initial: [f64; 6],
    /// A state on the terminal orbit at `t0`; the boundary condition is its
    /// propagation to `t_f`.
    pub terminal: [f64; 6],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Per-axis 1σ.
    pub position_km: f64,
    pub velocity_km_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    pub observer: PriorConfig,
    /// Applies to every target without its own `prior`.
    pub target: PriorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub initial: [f64; 6],
    pub prior: Option<PriorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementConfig {
    RelativePosition { sigma_m: f64 },
    RangeRangeRate { range_sigma_m: f64, range_rate_sigma_m_s: f64 },
}

/// Exactly one of `tu` (absolute) or `periods` (multiples of the reference
/// orbit period).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub tu: Option<f64>,
    pub periods: Option<f64>,
}

impl TimeSpec {
    pub fn tu(t: f64) -> Self {
        Self { tu: Some(t), periods: None }
    }

    pub fn periods(p: f64) -> Self {
        Self { tu: None, periods: Some(p) }
    }

    fn resolve(&self, field: &str, p_ref: Option<f64>) -> Result<f64> {
        let t = match (self.tu, self.periods) {
            (Some(t), None) => t,
            (None, Some(p)) => p * p_ref.expect("period resolved whenever a spec uses it"),
            _ => return Err(Error::validation(field, "give exactly one of `tu` or `periods`")),
        };
        if !t.is_finite() {
            return Err(Error::validation(field, "time must be finite"));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub start: TimeSpec,
    pub end: TimeSpec,
    pub cadence_per_day: f64,
    #[serde(default)]
    pub zero_thrust: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Sundman nodes before epochs are merged; defaults to 60 per reference period.
    pub n_nodes: Option<usize>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_nodes: None,
            sigma: default_sigma(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub system: SystemOverrides,
    pub observer: ObserverConfig,
    #[serde(default)]
    pub targets: Vec<TargetConfig>,
    pub priors: PriorsConfig,
    pub a_max_km_s2: f64,
    pub q_psd_km2_s3: f64,
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub windows: Vec<WindowConfig>,
    pub duration: TimeSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub scvx: ScvxSettings,
    pub alpha_h: Option<f64>,
    pub alpha_grid: Option<Vec<f64>>,
}

/// An observation window with everything the planner holds fixed over it.
#[derive(Clone, Debug)]
pub struct InfoWindow {
    pub window: ObservationWindow,
    pub zero_thrust: bool,
    pub epochs: Vec<f64>,
    /// Target states at the window start.
    pub targets_at_start: Vec<SpacecraftState>,
    /// Planning prior at the window start, propagated along the coasts.
    pub prior: AugmentedPrior,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub params: SystemParameters,
    pub crtbp: Crtbp,
    pub p_ref: Option<f64>,
    pub tf: f64,
    pub observer_initial: SpacecraftState,
    pub terminal_orbit: SpacecraftState,
    /// Boundary state at `t_f`.
    pub terminal_state: SpacecraftState,
    pub targets: Vec<SpacecraftState>,
    /// Augmented prior at `t0 = 0`.
    pub prior: AugmentedPrior,
    /// [DU/TU²]
    pub a_max: f64,
    pub model: MeasurementModel,
    pub windows: Vec<InfoWindow>,
    pub grid: TimeGrid,
    pub u_max: Vec<f64>,
    pub scvx: ScvxSettings,
    pub alpha_h: Option<f64>,
    pub alpha_grid: Option<Vec<f64>>,
}

impl Scenario {
    pub fn t0(&self) -> f64 {
        0.0
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    /// Sorted, deduplicated measurement epochs of all windows.
    pub fn measurement_epochs(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.windows.iter().flat_map(|w| w.epochs.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup_by(|a, b| (*a - *b).abs() <= NODE_TOL);
        all
    }

    /// States of the initial and terminal orbits blended linearly in time,
    /// zero controls.
    pub fn initial_guess(&self) -> Result<TrajectoryIterate> {
        let nodes = self.grid.nodes();
        let first = coast_through(&self.crtbp, &self.observer_initial, nodes)?;
        let last = coast_through(&self.crtbp, &self.terminal_orbit, nodes)?;
        let span = self.tf - self.t0();
        let states = nodes
            .iter()
            .zip(first.iter().zip(&last))
            .map(|(t, (a, b))| {
                let s = (t - self.t0()) / span;
                SpacecraftState(a.0 * (1.0 - s) + b.0 * s)
            })
            .collect();
        TrajectoryIterate::new(
            self.grid.clone(),
            states,
            vec![nalgebra::Vector3::zeros(); nodes.len()],
            self.u_max.clone(),
        )
    }
}

/// Coasting states at each of `epochs`, starting from `state` at `epochs[0]`.
pub fn coast_through(crtbp: &Crtbp, state: &SpacecraftState, epochs: &[f64]) -> Result<Vec<SpacecraftState>> {
    let mut out = Vec::with_capacity(epochs.len());
    let mut s = *state;
    out.push(s);
    for w in epochs.windows(2) {
        s = crtbp.propagate(&s, w[0], w[1], None)?;
        out.push(s);
    }
    Ok(out)
}

fn prior_cov(p: &PriorConfig, params: &SystemParameters, field: &str) -> Result<Matrix6<f64>> {
    if !(p.position_km > 0.0 && p.velocity_km_s > 0.0) {
        return Err(Error::validation(field, "prior RMS values must be positive"));
    }
    let pos = params.km_to_du(p.position_km).powi(2);
    let vel = params.km_s_to_du_tu(p.velocity_km_s).powi(2);
    Ok(Matrix6::from_diagonal(&Vector6::new(pos, pos, pos, vel, vel, vel)))
}

fn state(v: &[f64; 6], field: &str) -> Result<SpacecraftState> {
    let s = SpacecraftState::from_array(*v);
    if !s.is_finite() {
        return Err(Error::validation(field, "state must be finite"));
    }
    Ok(s)
}

/// `Φ P Φᵀ + Q(Δt)` along the coast from `t0` to `t1`.
fn propagate_prior(
    crtbp: &Crtbp,
    state: &SpacecraftState,
    cov: &Matrix6<f64>,
    q_psd: f64,
    t0: f64,
    t1: f64,
) -> Result<(SpacecraftState, Matrix6<f64>)> {
    if t1 <= t0 {
        return Ok((*state, *cov));
    }
    let (end, stm) = crtbp.propagate_with_stm(state, t0, t1, StmOrder::First)?;
    let phi = stm.first_order;
    let p = phi * cov * phi.transpose() + process_noise_segment(q_psd, t1 - t0)?;
    Ok((end, (p + p.transpose()) * 0.5))
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn resolve(&self) -> Result<Scenario> {
        let d = SystemParameters::default();
        let o = &self.system;
        let params = SystemParameters {
            mu: o.mu.unwrap_or(d.mu),
            du_km: o.du_km.unwrap_or(d.du_km),
            tu_s: o.tu_s.unwrap_or(d.tu_s),
            ..d
        };
        params.validate().map_err(|e| Error::validation("system", e.to_string()))?;
        let crtbp = Crtbp::new(params);

        let observer_initial = state(&self.observer.initial, "observer.initial")?;
        let terminal_orbit = state(&self.observer.terminal, "observer.terminal")?;
        let targets = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| state(&t.initial, &format!("targets[{i}].initial")))
            .collect::<Result<Vec<_>>>()?;

        let needs_period = self.grid.n_nodes.is_none()
            || self.duration.periods.is_some()
            || self.windows.iter().any(|w| w.start.periods.is_some() || w.end.periods.is_some());
        let p_ref = if needs_period {
            Some(crtbp.reference_period(&observer_initial)?)
        } else {
            None
        };

        let tf = self.duration.resolve("duration", p_ref)?;
        if !(tf > 0.0) {
            return Err(Error::validation("duration", "must be positive"));
        }
        if !(self.a_max_km_s2 >= 0.0 && self.a_max_km_s2.is_finite()) {
            return Err(Error::validation("a_max_km_s2", "must be finite and >= 0"));
        }
        if !(self.q_psd_km2_s3 >= 0.0 && self.q_psd_km2_s3.is_finite()) {
            return Err(Error::validation("q_psd_km2_s3", "must be finite and >= 0"));
        }
        if !self.windows.is_empty() && targets.is_empty() {
            return Err(Error::validation("targets", "observation windows need at least one target"));
        }
        let a_max = params.km_s2_to_du_tu2(self.a_max_km_s2);
        let q = params.psd_to_normalized(self.q_psd_km2_s3);

        let model = match self.measurement {
            MeasurementConfig::RelativePosition { sigma_m } => {
                MeasurementModel::from_si_sigmas(MeasurementKind::RelativePosition, &[sigma_m; 3], &params)
            }
            MeasurementConfig::RangeRangeRate {
                range_sigma_m,
                range_rate_sigma_m_s,
            } => MeasurementModel::from_si_sigmas(
                MeasurementKind::RangeRangeRate,
                &[range_sigma_m, range_rate_sigma_m_s],
                &params,
            ),
        }
        .map_err(|e| Error::validation("measurement", e.to_string()))?;

        let mut windows_tu = Vec::new();
        for (i, w) in self.windows.iter().enumerate() {
            let field = format!("windows[{i}]");
            let start = w.start.resolve(&format!("{field}.start"), p_ref)?;
            let end = w.end.resolve(&format!("{field}.end"), p_ref)?;
            if !(end > start) {
                return Err(Error::validation(&field, format!("end {end} TU must follow start {start} TU")));
            }
            if start < 0.0 || end > tf + NODE_TOL {
                return Err(Error::validation(&field, format!("[{start}, {end}] TU lies outside [0, {tf}] TU")));
            }
            if !(w.cadence_per_day > 0.0 && w.cadence_per_day.is_finite()) {
                return Err(Error::validation(format!("{field}.cadence_per_day"), "must be positive"));
            }
            windows_tu.push((start, end.min(tf)));
        }

        let n_nodes = match self.grid.n_nodes {
            Some(n) if n < 2 => return Err(Error::validation("grid.n_nodes", "need at least 2 nodes")),
            Some(n) => n,
            None => (DEFAULT_NODES_PER_PERIOD * tf / p_ref.unwrap()).ceil() as usize + 1,
        };
        if !(self.grid.sigma >= 0.0) {
            return Err(Error::validation("grid.sigma", "must be >= 0"));
        }
        let base = crtbp.sundman_nodes(&observer_initial, 0.0, tf, self.grid.sigma, n_nodes)?;

        let mut epochs_all = Vec::new();
        let mut windows = Vec::new();
        for (i, (w, &(start, end))) in self.windows.iter().zip(&windows_tu).enumerate() {
            let win = ObservationWindow::new(start, end, w.cadence_per_day, 0)
                .map_err(|e| Error::validation(format!("windows[{i}]"), e.to_string()))?;
            let epochs = win.epochs(&params);
            epochs_all.extend(epochs.iter().copied());
            epochs_all.push(end);
            windows.push((win, w.zero_thrust, epochs));
        }
        let grid = base.merge_epochs(&epochs_all, SNAP_FRACTION)?;

        let mut u_max = thrust_bounds(&grid, a_max)?;
        for (win, zero, _) in &windows {
            if *zero {
                for (k, t) in grid.nodes().iter().enumerate() {
                    if *t >= win.t_start - NODE_TOL && *t <= win.t_end + NODE_TOL {
                        u_max[k] = 0.0;
                    }
                }
            }
        }

        let prior = AugmentedPrior {
            sensor_cov: prior_cov(&self.priors.observer, &params, "priors.observer")?,
            target_covs: self
                .targets
                .iter()
                .enumerate()
                .map(|(i, t)| match &t.prior {
                    Some(p) => prior_cov(p, &params, &format!("targets[{i}].prior")),
                    None => prior_cov(&self.priors.target, &params, "priors.target"),
                })
                .collect::<Result<_>>()?,
            q_psd: vec![q; targets.len() + 1],
        };

        let info_windows = windows
            .into_iter()
            .map(|(mut win, zero_thrust, epochs)| {
                win.anchor_node = grid
                    .find(win.t_start, NODE_TOL)
                    .expect("window start merged into the grid");
                let (_, sensor_cov) =
                    propagate_prior(&crtbp, &observer_initial, &prior.sensor_cov, q, 0.0, win.t_start)?;
                let mut targets_at_start = Vec::new();
                let mut target_covs = Vec::new();
                for (t, p) in targets.iter().zip(&prior.target_covs) {
                    let (s, c) = propagate_prior(&crtbp, t, p, q, 0.0, win.t_start)?;
                    targets_at_start.push(s);
                    target_covs.push(c);
                }
                Ok(InfoWindow {
                    window: win,
                    zero_thrust,
                    epochs,
                    targets_at_start,
                    prior: AugmentedPrior {
                        sensor_cov,
                        target_covs,
                        q_psd: prior.q_psd.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let terminal_state = crtbp.propagate(&terminal_orbit, 0.0, tf, None)?;
        self.scvx.validate()?;
        if let Some(a) = self.alpha_h {
            check_alpha(a, "alpha_h")?;
        }
        if let Some(g) = &self.alpha_grid {
            for (i, a) in g.iter().enumerate() {
                check_alpha(*a, &format!("alpha_grid[{i}]"))?;
            }
        }
        Ok(Scenario {
            params,
            crtbp,
            p_ref,
            tf,
            observer_initial,
            terminal_orbit,
            terminal_state,
            targets,
            prior,
            a_max,
            model,
            windows: info_windows,
            grid,
            u_max,
            scvx: self.scvx.clone(),
            alpha_h: self.alpha_h,
            alpha_grid: self.alpha_grid.clone(),
        })
    }
}

fn check_alpha(a: f64, field: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::validation(field, format!("{a} outside [0, 1]")));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScenarioConfig::from_toml_str(&text, &path.display().to_string())
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    load_config(path)?.resolve()
}
