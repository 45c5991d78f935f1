//! First-order-hold discretization of the controlled dynamics about a
//! reference trajectory.
//!
//! On `[t_k, t_{k+1}]` the control is `u(t) = λ⁻(t) u_k + λ⁺(t) u_{k+1}` and
//! the affine model
//! `x_{k+1} = A_k x_k + B⁻_k u_k + B⁺_k u_{k+1} + r_k + E_k ε_k`
//! reproduces the nonlinear propagation of the reference exactly.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Crtbp, FohProfile, SpacecraftState, TimeGrid};
use crate::error::{Error, Result};
use crate::integrator::{integrate, Tolerances};

/// Controlled vector field `ẋ = f(x, u)` with its partials.
pub trait ControlledSystem<const NX: usize, const NU: usize>: Sync {
    fn field(&self, x: &SVector<f64, NX>, u: &SVector<f64, NU>) -> Result<SVector<f64, NX>>;
    fn state_jacobian(&self, x: &SVector<f64, NX>, u: &SVector<f64, NU>) -> Result<SMatrix<f64, NX, NX>>;
    fn control_jacobian(&self, x: &SVector<f64, NX>, u: &SVector<f64, NU>) -> Result<SMatrix<f64, NX, NU>>;
}

impl ControlledSystem<6, 3> for Crtbp {
    fn field(&self, x: &Vector6<f64>, u: &Vector3<f64>) -> Result<Vector6<f64>> {
        let mut f = self.vector_field(&SpacecraftState(*x))?;
        f.fixed_rows_mut::<3>(3).add_assign(u);
        Ok(f)
    }

    fn state_jacobian(&self, x: &Vector6<f64>, _u: &Vector3<f64>) -> Result<SMatrix<f64, 6, 6>> {
        self.jacobian(&SpacecraftState(*x))
    }

    fn control_jacobian(&self, _x: &Vector6<f64>, _u: &Vector3<f64>) -> Result<SMatrix<f64, 6, 3>> {
        let mut b = SMatrix::<f64, 6, 3>::zeros();
        b.fixed_view_mut::<3, 3>(3, 0).fill_with_identity();
        Ok(b)
    }
}

use std::ops::AddAssign;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSegment<const NX: usize, const NU: usize> {
    pub a_k: SMatrix<f64, NX, NX>,
    pub b_minus: SMatrix<f64, NX, NU>,
    pub b_plus: SMatrix<f64, NX, NU>,
    pub r_k: SVector<f64, NX>,
    pub e_k: SMatrix<f64, NX, NX>,
    /// Nonlinear propagation of the reference node to the interval end.
    pub propagated: SVector<f64, NX>,
}

impl<const NX: usize, const NU: usize> DiscreteSegment<NX, NU> {
    /// Right-hand side of the affine model without virtual control.
    pub fn predict(
        &self,
        x_k: &SVector<f64, NX>,
        u_k: &SVector<f64, NU>,
        u_next: &SVector<f64, NU>,
    ) -> SVector<f64, NX> {
        self.a_k * x_k + self.b_minus * u_k + self.b_plus * u_next + self.r_k
    }
}

pub type CrtbpSegment = DiscreteSegment<6, 3>;

/// Discretizes one interval. The packed ODE state is
/// `[x, Φ, Φ⁻¹Bλ⁻, Φ⁻¹Bλ⁺, Φ⁻¹r, Φ⁻¹]`, all accumulators starting at zero
/// except `Φ(t_k) = I`; `r = f(x, u) − A x − B u` along the reference.
pub fn foh_segment<S, const NX: usize, const NU: usize>(
    system: &S,
    t0: f64,
    t1: f64,
    x0: &SVector<f64, NX>,
    u0: &SVector<f64, NU>,
    u1: &SVector<f64, NU>,
    tol: &Tolerances,
) -> Result<DiscreteSegment<NX, NU>>
where
    S: ControlledSystem<NX, NU> + ?Sized,
{
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "FOH interval [{t0}, {t1}] is empty"
        )));
    }
    let nxx = NX * NX;
    let nxu = NX * NU;
    let (o_phi, o_bm, o_bp, o_r, o_e) = (NX, NX + nxx, NX + nxx + nxu, NX + nxx + 2 * nxu, 2 * NX + nxx + 2 * nxu);
    let dim = o_e + nxx;
    let mut y = vec![0.0; dim];
    y[..NX].copy_from_slice(x0.as_slice());
    for i in 0..NX {
        y[o_phi + i * (NX + 1)] = 1.0;
    }
    let span = t1 - t0;

    integrate(
        |t, y, dy| {
            let x = SVector::<f64, NX>::from_column_slice(&y[..NX]);
            let lam_plus = (t - t0) / span;
            let lam_minus = 1.0 - lam_plus;
            let u = u0 * lam_minus + u1 * lam_plus;
            let f = system.field(&x, &u)?;
            let a = system.state_jacobian(&x, &u)?;
            let b = system.control_jacobian(&x, &u)?;
            let phi = SMatrix::<f64, NX, NX>::from_column_slice(&y[o_phi..o_bm]);
            let lu = DMatrix::from_column_slice(NX, NX, &y[o_phi..o_bm]).lu();
            let solve = |rhs: &[f64], out: &mut [f64]| -> Result<()> {
                let v = DMatrix::from_column_slice(NX, rhs.len() / NX, rhs);
                let s = lu.solve(&v).ok_or(Error::SingularTransition { t0, t1: t })?;
                out.copy_from_slice(s.as_slice());
                Ok(())
            };
            dy[..NX].copy_from_slice(f.as_slice());
            dy[o_phi..o_bm].copy_from_slice((a * phi).as_slice());
            solve((b * lam_minus).as_slice(), &mut dy[o_bm..o_bp])?;
            solve((b * lam_plus).as_slice(), &mut dy[o_bp..o_r])?;
            let r = f - a * x - b * u;
            solve(r.as_slice(), &mut dy[o_r..o_e])?;
            solve(SMatrix::<f64, NX, NX>::identity().as_slice(), &mut dy[o_e..])?;
            Ok(())
        },
        t0,
        t1,
        &mut y,
        tol,
    )?;

    let a_k = SMatrix::<f64, NX, NX>::from_column_slice(&y[o_phi..o_bm]);
    if !a_k.iter().all(|v| v.is_finite())
        || DMatrix::from_column_slice(NX, NX, a_k.as_slice()).lu().determinant() == 0.0
    {
        return Err(Error::SingularTransition { t0, t1 });
    }
    Ok(DiscreteSegment {
        a_k,
        b_minus: a_k * SMatrix::<f64, NX, NU>::from_column_slice(&y[o_bm..o_bp]),
        b_plus: a_k * SMatrix::<f64, NX, NU>::from_column_slice(&y[o_bp..o_r]),
        r_k: a_k * SVector::<f64, NX>::from_column_slice(&y[o_r..o_e]),
        e_k: a_k * SMatrix::<f64, NX, NX>::from_column_slice(&y[o_e..]),
        propagated: SVector::<f64, NX>::from_column_slice(&y[..NX]),
    })
}

/// Node-wise decision object of the SCvx loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryIterate {
    pub grid: TimeGrid,
    pub states: Vec<SpacecraftState>,
    /// Thrust acceleration at each node [DU/TU²].
    pub controls: Vec<Vector3<f64>>,
    pub u_max: Vec<f64>,
}

impl TrajectoryIterate {
    pub fn new(
        grid: TimeGrid,
        states: Vec<SpacecraftState>,
        controls: Vec<Vector3<f64>>,
        u_max: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.len();
        if states.len() != n || controls.len() != n || u_max.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "iterate with {n} nodes has {} states, {} controls, {} bounds",
                states.len(),
                controls.len(),
                u_max.len()
            )));
        }
        Ok(Self {
            grid,
            states,
            controls,
            u_max,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Whole-horizon FOH control profile.
    pub fn control_profile(&self) -> FohProfile {
        FohProfile::new(self.grid.nodes().to_vec(), self.controls.clone())
            .expect("grid and controls validated at construction")
    }
}

pub fn foh_discretize(reference: &TrajectoryIterate, crtbp: &Crtbp) -> Result<Vec<CrtbpSegment>> {
    let nodes = reference.grid.nodes();
    (0..nodes.len() - 1)
        .into_par_iter()
        .map(|k| {
            foh_segment(
                crtbp,
                nodes[k],
                nodes[k + 1],
                &reference.states[k].0,
                &reference.controls[k],
                &reference.controls[k + 1],
                &crtbp.tol,
            )
        })
        .collect()
}

/// `δ_k = x_{k+1} − f_k(x_k, u_k, u_{k+1})` under nonlinear FOH propagation.
pub fn defects(candidate: &TrajectoryIterate, crtbp: &Crtbp) -> Result<Vec<Vector6<f64>>> {
    let nodes = candidate.grid.nodes();
    (0..nodes.len() - 1)
        .into_par_iter()
        .map(|k| {
            let profile = FohProfile::segment(
                nodes[k],
                nodes[k + 1],
                candidate.controls[k],
                candidate.controls[k + 1],
            );
            let end = crtbp.propagate(&candidate.states[k], nodes[k], nodes[k + 1], Some(&profile))?;
            Ok(candidate.states[k + 1].0 - end.0)
        })
        .collect()
}

/// Per-node bounds from the minimum-norm solution of
/// `(u_k + u_{k+1}) / (2 Δt_k) = a_max`, computed through a QR factorization
/// of the transposed system. A negative component switches every node to
/// `a_max · min(adjacent Δt)`.
pub fn thrust_bounds(grid: &TimeGrid, a_max: f64) -> Result<Vec<f64>> {
    if !(a_max >= 0.0 && a_max.is_finite()) {
        return Err(Error::InvalidArgument("a_max must be finite and >= 0".into()));
    }
    let n = grid.len();
    let dts = grid.intervals();
    if a_max == 0.0 {
        return Ok(vec![0.0; n]);
    }
    // Aᵀ = QR  ⇒  minimum-norm u = Q R⁻ᵀ b.
    let mut at = DMatrix::zeros(n, n - 1);
    for (k, dt) in dts.iter().enumerate() {
        at[(k, k)] = 1.0 / (2.0 * dt);
        at[(k + 1, k)] = 1.0 / (2.0 * dt);
    }
    let b = DVector::from_element(n - 1, a_max);
    let qr = at.qr();
    let z = qr
        .r()
        .transpose()
        .solve_lower_triangular(&b)
        .ok_or_else(|| Error::InvalidArgument("degenerate thrust-bound system".into()))?;
    let u = qr.q() * z;
    if u.iter().all(|v| *v >= 0.0) {
        return Ok(u.iter().copied().collect());
    }
    Ok((0..n)
        .map(|k| {
            let left = if k > 0 { dts[k - 1] } else { f64::INFINITY };
            let right = if k + 1 < n { dts[k] } else { f64::INFINITY };
            a_max * left.min(right)
        })
        .collect())
}
