//! Convex subproblem of one SCvx iteration in conic form.
//!
//! Decision variables are absolute node states and controls plus per-interval
//! virtual controls; the trust region bounds deviations from the reference.
//! Trapezoid weights: node `k` carries `c_k = (Δt_{k−1} + Δt_k)/2` with
//! `Δt_{−1} = Δt_{N−1} = 0`. The interval-`k` defect term is attributed to
//! node `k`, the terminal node carrying none.

use nalgebra::{Vector3, Vector6};
use serde::Serialize;

use crate::conic::{Cone, ConicProgram, ConicSolution, ConicSolver, SolveStatus, Triplets};
use crate::discretization::{CrtbpSegment, TrajectoryIterate};
use crate::dynamics::{SpacecraftState, TimeGrid};
use crate::error::{Error, Result};
use crate::information::MiLinearization;

/// One linearized information term `i0 + g · (x_{k*} − x̄_{k*})`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiTerm {
    pub anchor_node: usize,
    pub reference_state: Vector6<f64>,
    pub lin: MiLinearization,
}

impl MiTerm {
    pub fn approx(&self, state: &Vector6<f64>) -> f64 {
        self.lin.approx(&(state - self.reference_state))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub alpha_h: f64,
    pub gamma: f64,
}

impl CostWeights {
    pub fn new(alpha_h: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_h) {
            return Err(Error::InvalidArgument(format!("alpha_h = {alpha_h} outside [0, 1]")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma = {gamma} must be positive")));
        }
        Ok(Self { alpha_h, gamma })
    }
}

/// Trapezoid weight of every node.
pub fn trapezoid_weights(grid: &TimeGrid) -> Vec<f64> {
    let dts = grid.intervals();
    (0..grid.len())
        .map(|k| {
            let left = if k > 0 { dts[k - 1] } else { 0.0 };
            let right = dts.get(k).copied().unwrap_or(0.0);
            0.5 * (left + right)
        })
        .collect()
}

/// Column offsets of every variable group.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n_nodes: usize,
    /// `x_k` occupies `x + 6k .. x + 6k + 6`.
    pub x: usize,
    /// Start of `(u_k, σ_k)`; absent where the thrust bound is zero.
    pub u: Vec<Option<usize>>,
    /// `ε_k` and its 1-norm epigraph `w_k`, per interval.
    pub eps: usize,
    pub w: usize,
    /// Trust-region epigraphs of `‖δx_k‖` and `‖δu_k‖`.
    pub tr_x: usize,
    pub tr_u: Vec<Option<usize>>,
    pub n_vars: usize,
}

impl Layout {
    fn new(u_max: &[f64]) -> Self {
        let n = u_max.len();
        let mut next = 6 * n;
        let u = u_max
            .iter()
            .map(|&m| {
                (m > 0.0).then(|| {
                    next += 4;
                    next - 4
                })
            })
            .collect();
        let eps = next;
        let w = eps + 6 * (n - 1);
        let tr_x = w + 6 * (n - 1);
        next = tr_x + n;
        let tr_u = u_max
            .iter()
            .map(|&m| {
                (m > 0.0).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self {
            n_nodes: n,
            x: 0,
            u,
            eps,
            w,
            tr_x,
            tr_u,
            n_vars: next,
        }
    }

    pub fn x(&self, k: usize) -> usize {
        self.x + 6 * k
    }

    pub fn eps(&self, k: usize) -> usize {
        self.eps + 6 * k
    }

    pub fn w(&self, k: usize) -> usize {
        self.w + 6 * k
    }
}

/// Constraint counts tallied while the program is assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintAudit {
    pub dynamics_equalities: usize,
    pub boundary_equalities: usize,
    pub thrust_cones: usize,
    pub trust_regions: usize,
    pub one_norm_rows: usize,
}

#[derive(Clone, Debug)]
pub struct Subproblem {
    pub program: ConicProgram,
    pub layout: Layout,
    /// Objective constant dropped from the conic form.
    pub constant: f64,
    pub audit: ConstraintAudit,
    /// Objective coefficients of `‖u_k‖` and `‖E_k ε_k‖₁`.
    impulse_weights: Vec<f64>,
    defect_weights: Vec<f64>,
    e_k: Vec<nalgebra::Matrix6<f64>>,
}

/// Row-wise assembler for `A x + s = b`, `s ∈ K`.
struct Rows {
    entries: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<Cone>,
}

impl Rows {
    fn open(&mut self, cone: Cone) -> usize {
        let start = self.b.len();
        self.b.resize(start + cone.dim(), 0.0);
        self.cones.push(cone);
        start
    }

    fn set(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// SOC block `(t, v − v̄)` with `t` at column `t_col` and `v` starting at
    /// `v_col`.
    fn soc_shifted(&mut self, t_col: usize, v_col: usize, center: &[f64]) {
        let r = self.open(Cone::Soc(center.len() + 1));
        self.set(r, t_col, -1.0);
        for (i, c) in center.iter().enumerate() {
            self.set(r + 1 + i, v_col + i, -1.0);
            self.b[r + 1 + i] = -c;
        }
    }
}

/// Assembles the convex subproblem around `reference`.
///
/// Thrust bounds come from `reference.u_max`; nodes whose bound is zero carry
/// no control variables. The boundary states pin the first and last nodes.
pub fn build_subproblem(
    segments: &[CrtbpSegment],
    reference: &TrajectoryIterate,
    mi_terms: &[MiTerm],
    weights: CostWeights,
    eta: f64,
    initial: &Vector6<f64>,
    terminal: &Vector6<f64>,
) -> Result<Subproblem> {
    let n = reference.len();
    if segments.len() + 1 != n {
        return Err(Error::DimensionMismatch(format!(
            "{} segments for {n} nodes",
            segments.len()
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("trust radius {eta} must be positive")));
    }
    if let Some(t) = mi_terms.iter().find(|t| t.anchor_node >= n) {
        return Err(Error::DimensionMismatch(format!("MI anchor node {} of {n}", t.anchor_node)));
    }
    let CostWeights { alpha_h, gamma } = weights;
    let layout = Layout::new(&reference.u_max);
    let trap = trapezoid_weights(&reference.grid);
    let mut audit = ConstraintAudit::default();

    let mut c = vec![0.0; layout.n_vars];
    let mut constant = 0.0;
    for term in mi_terms {
        constant -= alpha_h * (term.lin.value - term.lin.gradient.dot(&term.reference_state));
        for i in 0..6 {
            c[layout.x(term.anchor_node) + i] -= alpha_h * term.lin.gradient[i];
        }
    }
    for k in 0..n {
        if let Some(u) = layout.u[k] {
            c[u + 3] += (1.0 - alpha_h) * trap[k];
        }
    }
    for k in 0..n - 1 {
        for i in 0..6 {
            c[layout.w(k) + i] += gamma * trap[k];
        }
    }

    let mut rows = Rows {
        entries: Vec::new(),
        b: Vec::new(),
        cones: Vec::new(),
    };

    // x_{k+1} − A x_k − B⁻ u_k − B⁺ u_{k+1} − E ε_k = r_k
    let r0 = rows.open(Cone::Zero(6 * (n - 1)));
    for (k, seg) in segments.iter().enumerate() {
        for i in 0..6 {
            let r = r0 + 6 * k + i;
            rows.set(r, layout.x(k + 1) + i, 1.0);
            rows.b[r] = seg.r_k[i];
            for j in 0..6 {
                rows.set(r, layout.x(k) + j, -seg.a_k[(i, j)]);
                rows.set(r, layout.eps(k) + j, -seg.e_k[(i, j)]);
            }
            for (node, b) in [(k, &seg.b_minus), (k + 1, &seg.b_plus)] {
                if let Some(u) = layout.u[node] {
                    for j in 0..3 {
                        rows.set(r, u + j, -b[(i, j)]);
                    }
                }
            }
        }
    }
    audit.dynamics_equalities = 6 * (n - 1);

    let r0 = rows.open(Cone::Zero(12));
    for i in 0..6 {
        rows.set(r0 + i, layout.x(0) + i, 1.0);
        rows.b[r0 + i] = initial[i];
        rows.set(r0 + 6 + i, layout.x(n - 1) + i, 1.0);
        rows.b[r0 + 6 + i] = terminal[i];
    }
    audit.boundary_equalities = 12;

    // w_k ∓ E_k ε_k ≥ 0
    let r0 = rows.open(Cone::Nonneg(12 * (n - 1)));
    for (k, seg) in segments.iter().enumerate() {
        for i in 0..6 {
            for (half, sign) in [(0, 1.0), (6, -1.0)] {
                let r = r0 + 12 * k + half + i;
                rows.set(r, layout.w(k) + i, -1.0);
                for j in 0..6 {
                    rows.set(r, layout.eps(k) + j, sign * seg.e_k[(i, j)]);
                }
            }
        }
    }
    audit.one_norm_rows = 12 * (n - 1);

    // σ_k ≤ u_max,k and the trust-region sum a_k + b_k ≤ η.
    let thrust_nodes: Vec<usize> = (0..n).filter(|&k| layout.u[k].is_some()).collect();
    let r0 = rows.open(Cone::Nonneg(thrust_nodes.len() + n));
    for (i, &k) in thrust_nodes.iter().enumerate() {
        rows.set(r0 + i, layout.u[k].unwrap() + 3, 1.0);
        rows.b[r0 + i] = reference.u_max[k];
    }
    let r1 = r0 + thrust_nodes.len();
    for k in 0..n {
        rows.set(r1 + k, layout.tr_x + k, 1.0);
        if let Some(b) = layout.tr_u[k] {
            rows.set(r1 + k, b, 1.0);
        }
        rows.b[r1 + k] = eta;
    }
    audit.trust_regions = n;

    for &k in &thrust_nodes {
        let u = layout.u[k].unwrap();
        rows.soc_shifted(u + 3, u, &[0.0; 3]);
        rows.soc_shifted(layout.tr_u[k].unwrap(), u, reference.controls[k].as_slice());
    }
    audit.thrust_cones = thrust_nodes.len();
    for k in 0..n {
        rows.soc_shifted(layout.tr_x + k, layout.x(k), reference.states[k].0.as_slice());
    }

    let mut a = Triplets::new(rows.b.len(), layout.n_vars);
    a.entries = rows.entries;
    let program = ConicProgram {
        c,
        a,
        b: rows.b,
        cones: rows.cones,
    };
    program.validate()?;
    Ok(Subproblem {
        program,
        layout,
        constant,
        audit,
        impulse_weights: trap.iter().map(|w| (1.0 - alpha_h) * w).collect(),
        defect_weights: trap[..n - 1].iter().map(|w| gamma * w).collect(),
        e_k: segments.iter().map(|s| s.e_k).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub states: Vec<SpacecraftState>,
    pub controls: Vec<Vector3<f64>>,
    pub virtual_controls: Vec<Vector6<f64>>,
    /// `L` at the solution with every epigraph variable set to the norm it
    /// bounds; exceeds the conic objective by at most the solver's slack.
    pub objective_value: f64,
    pub status: SolveStatus,
    pub raw: ConicSolution,
}

pub fn solve_subproblem(sub: &Subproblem, solver: &dyn ConicSolver) -> Result<SubproblemSolution> {
    let raw = solver.solve(&sub.program)?;
    let lay = &sub.layout;
    let x = &raw.x;
    let states = (0..lay.n_nodes)
        .map(|k| SpacecraftState(Vector6::from_column_slice(&x[lay.x(k)..lay.x(k) + 6])))
        .collect();
    let controls: Vec<Vector3<f64>> = lay
        .u
        .iter()
        .map(|u| u.map_or_else(Vector3::zeros, |u| Vector3::from_column_slice(&x[u..u + 3])))
        .collect();
    let virtual_controls: Vec<Vector6<f64>> = (0..lay.n_nodes - 1)
        .map(|k| Vector6::from_column_slice(&x[lay.eps(k)..lay.eps(k) + 6]))
        .collect();
    let mut objective = sub.constant;
    for (k, c) in sub.program.c[..6 * lay.n_nodes].iter().enumerate() {
        objective += c * x[k];
    }
    for (u, w) in controls.iter().zip(&sub.impulse_weights) {
        objective += w * u.norm();
    }
    for ((eps, e), w) in virtual_controls.iter().zip(&sub.e_k).zip(&sub.defect_weights) {
        objective += w * (e * eps).abs().sum();
    }
    Ok(SubproblemSolution {
        states,
        controls,
        virtual_controls,
        objective_value: objective,
        status: raw.status,
        raw,
    })
}
