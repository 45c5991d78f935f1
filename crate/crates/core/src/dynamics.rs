//! Circular restricted three-body dynamics in the rotating barycentric frame.
//!
//! States are normalized: distances in DU (Earth-Moon distance), time in TU
//! (synodic period / 2π). The Earth sits at `(-mu, 0, 0)` and the Moon at
//! `(1 - mu, 0, 0)`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, Tolerances};

pub const EARTH_MOON_MU: f64 = 1.215058560962404e-2;
pub const EARTH_MOON_DU_KM: f64 = 384_400.0;
pub const EARTH_MOON_TU_S: f64 = 375_190.26;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Second derivatives of a 6-dimensional map: `h[i][(j, k)] = ∂²f_i/∂x_j∂x_k`.
pub type StateHessian = [Matrix6<f64>; 6];

pub fn zero_hessian() -> StateHessian {
    [Matrix6::zeros(); 6]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParameters {
    pub mu: f64,
    pub du_km: f64,
    pub tu_s: f64,
    /// Minimum admissible distance to either primary [DU].
    #[serde(default = "default_singularity_floor")]
    pub singularity_floor: f64,
}

fn default_singularity_floor() -> f64 {
    1e-12
}

impl Default for SystemParameters {
    fn default() -> Self {
        Self {
            mu: EARTH_MOON_MU,
            du_km: EARTH_MOON_DU_KM,
            tu_s: EARTH_MOON_TU_S,
            singularity_floor: default_singularity_floor(),
        }
    }
}

impl SystemParameters {
    pub fn new(mu: f64, du_km: f64, tu_s: f64) -> Result<Self> {
        let params = Self {
            mu,
            du_km,
            tu_s,
            singularity_floor: default_singularity_floor(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::validation("system.mu", "must lie in (0, 0.5)"));
        }
        if !(self.du_km > 0.0 && self.du_km.is_finite()) {
            return Err(Error::validation("system.du_km", "must be positive"));
        }
        if !(self.tu_s > 0.0 && self.tu_s.is_finite()) {
            return Err(Error::validation("system.tu_s", "must be positive"));
        }
        if !(self.singularity_floor >= 0.0) {
            return Err(Error::validation(
                "system.singularity_floor",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn km_to_du(&self, km: f64) -> f64 {
        km / self.du_km
    }

    pub fn du_to_km(&self, du: f64) -> f64 {
        du * self.du_km
    }

    pub fn km_s_to_du_tu(&self, v: f64) -> f64 {
        v * self.tu_s / self.du_km
    }

    pub fn du_tu_to_km_s(&self, v: f64) -> f64 {
        v * self.du_km / self.tu_s
    }

    pub fn km_s2_to_du_tu2(&self, a: f64) -> f64 {
        a * self.tu_s * self.tu_s / self.du_km
    }

    pub fn du_tu2_to_km_s2(&self, a: f64) -> f64 {
        a * self.du_km / (self.tu_s * self.tu_s)
    }

    /// Acceleration power spectral density km²/s³ → DU²/TU³.
    pub fn psd_to_normalized(&self, q: f64) -> f64 {
        q * self.tu_s.powi(3) / (self.du_km * self.du_km)
    }

    pub fn psd_to_si(&self, q: f64) -> f64 {
        q * self.du_km * self.du_km / self.tu_s.powi(3)
    }

    pub fn days_to_tu(&self, days: f64) -> f64 {
        days * SECONDS_PER_DAY / self.tu_s
    }

    pub fn tu_to_days(&self, tu: f64) -> f64 {
        tu * self.tu_s / SECONDS_PER_DAY
    }
}

/// Position [DU] and velocity [DU/TU] in the rotating frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpacecraftState(pub Vector6<f64>);

impl SpacecraftState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        Self(Vector6::new(
            position.x, position.y, position.z, velocity.x, velocity.y, velocity.z,
        ))
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self(Vector6::from_column_slice(&v))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        out.copy_from_slice(self.0.as_slice());
        out
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vector6<f64>> for SpacecraftState {
    fn from(v: Vector6<f64>) -> Self {
        Self(v)
    }
}

/// First- and (optionally) second-order state transition derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Stm {
    pub first_order: Matrix6<f64>,
    pub second_order: Option<StateHessian>,
}

impl Stm {
    pub fn identity(order: StmOrder) -> Self {
        Self {
            first_order: Matrix6::identity(),
            second_order: match order {
                StmOrder::First => None,
                StmOrder::Second => Some(zero_hessian()),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StmOrder {
    First,
    Second,
}

/// Ordered epochs `t_k` [TU].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument(
                "a time grid needs at least two nodes".into(),
            ));
        }
        if nodes.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite grid epoch".into()));
        }
        if let Some(k) = nodes.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "grid not strictly increasing at node {}",
                k + 1
            )));
        }
        Ok(Self { nodes })
    }

    pub fn uniform(t0: f64, tf: f64, n_nodes: usize) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::InvalidArgument("n_nodes must be >= 2".into()));
        }
        let step = (tf - t0) / (n_nodes - 1) as f64;
        let mut nodes: Vec<f64> = (0..n_nodes).map(|k| t0 + k as f64 * step).collect();
        nodes[n_nodes - 1] = tf;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.nodes[0]
    }

    pub fn last(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn intervals(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the node within `tol` of `t`, if any.
    pub fn find(&self, t: f64, tol: f64) -> Option<usize> {
        let idx = self.nodes.partition_point(|&x| x < t);
        [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&k| k < self.nodes.len())
            .find(|&k| (self.nodes[k] - t).abs() <= tol)
    }

    /// Merges `epochs` into the grid. An existing free node lying closer than
    /// `snap_fraction` of its local spacing is moved onto the epoch; otherwise
    /// the epoch is inserted. Endpoints and previously merged epochs never move.
    pub fn merge_epochs(&self, epochs: &[f64], snap_fraction: f64) -> Result<Self> {
        let t0 = self.first();
        let tf = self.last();
        let mut nodes = self.nodes.clone();
        let mut pinned = vec![false; nodes.len()];
        pinned[0] = true;
        *pinned.last_mut().unwrap() = true;

        let mut sorted: Vec<f64> = epochs.to_vec();
        sorted.sort_by(f64::total_cmp);
        for &e in &sorted {
            if e < t0 - 1e-9 || e > tf + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "epoch {e} outside grid span [{t0}, {tf}]"
                )));
            }
            let idx = nodes.partition_point(|&x| x < e);
            let nearest = [idx.checked_sub(1), Some(idx)]
                .into_iter()
                .flatten()
                .filter(|&k| k < nodes.len())
                .min_by(|&a, &b| (nodes[a] - e).abs().total_cmp(&(nodes[b] - e).abs()))
                .expect("grid is non-empty");
            let gap = (nodes[nearest] - e).abs();
            if gap <= 1e-9 {
                if !pinned[nearest] {
                    nodes[nearest] = e;
                }
                pinned[nearest] = true;
                continue;
            }
            let local = local_spacing(&nodes, nearest);
            let neighbours_ok = (nearest == 0 || nodes[nearest - 1] < e)
                && (nearest + 1 == nodes.len() || nodes[nearest + 1] > e);
            if !pinned[nearest] && gap < snap_fraction * local && neighbours_ok {
                nodes[nearest] = e;
                pinned[nearest] = true;
            } else {
                nodes.insert(idx, e);
                pinned.insert(idx, true);
            }
        }
        Self::new(nodes)
    }
}

fn local_spacing(nodes: &[f64], k: usize) -> f64 {
    let left = if k > 0 { nodes[k] - nodes[k - 1] } else { f64::INFINITY };
    let right = if k + 1 < nodes.len() {
        nodes[k + 1] - nodes[k]
    } else {
        f64::INFINITY
    };
    left.min(right)
}

/// Piecewise-linear (first-order hold) control profile [DU/TU²].
#[derive(Clone, Debug, PartialEq)]
pub struct FohProfile {
    times: Vec<f64>,
    values: Vec<Vector3<f64>>,
}

impl FohProfile {
    pub fn new(times: Vec<f64>, values: Vec<Vector3<f64>>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "FOH profile needs matching knots and values (got {} and {})",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "FOH knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, values })
    }

    pub fn segment(t0: f64, t1: f64, u0: Vector3<f64>, u1: Vector3<f64>) -> Self {
        Self {
            times: vec![t0, t1],
            values: vec![u0, u1],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.times
    }

    /// Control at `t`; held constant outside the knot span.
    pub fn eval(&self, t: f64) -> Vector3<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let k = self.times.partition_point(|&x| x <= t) - 1;
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let lam_plus = (t - ta) / (tb - ta);
        self.values[k] * (1.0 - lam_plus) + self.values[k + 1] * lam_plus
    }
}

/// The CRTBP vector field plus integrator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crtbp {
    pub params: SystemParameters,
    pub tol: Tolerances,
}

impl Crtbp {
    pub fn new(params: SystemParameters) -> Self {
        Self {
            params,
            tol: Tolerances::default(),
        }
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn mu(&self) -> f64 {
        self.params.mu
    }

    fn radii(&self, p: &[f64]) -> Result<(f64, f64)> {
        let mu = self.params.mu;
        let r1 = ((p[0] + mu).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
        let r2 = ((p[0] + mu - 1.0).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
        let floor = self.params.singularity_floor;
        if !(r1 > floor && r2 > floor) {
            return Err(Error::SingularPosition { r1, r2, floor });
        }
        Ok((r1, r2))
    }

    /// Distance to the Moon [DU].
    pub fn moon_distance(&self, state: &SpacecraftState) -> f64 {
        let p = state.position();
        ((p.x + self.params.mu - 1.0).powi(2) + p.y * p.y + p.z * p.z).sqrt()
    }

    /// Acceleration on a raw 6-slice; shared by the ODE right-hand sides.
    fn accel_slice(&self, x: &[f64]) -> Result<[f64; 3]> {
        let mu = self.params.mu;
        let (r1, r2) = self.radii(x)?;
        let c1 = (1.0 - mu) / (r1 * r1 * r1);
        let c2 = mu / (r2 * r2 * r2);
        Ok([
            2.0 * x[4] + x[0] - c1 * (x[0] + mu) - c2 * (x[0] + mu - 1.0),
            -2.0 * x[3] + x[1] - c1 * x[1] - c2 * x[1],
            -c1 * x[2] - c2 * x[2],
        ])
    }

    /// Position-partials of the acceleration (symmetric Hessian of the
    /// pseudo-potential).
    fn gravity_gradient(&self, x: &[f64]) -> Result<Matrix3<f64>> {
        let mu = self.params.mu;
        let (r1, r2) = self.radii(x)?;
        let d1 = Vector3::new(x[0] + mu, x[1], x[2]);
        let d2 = Vector3::new(x[0] + mu - 1.0, x[1], x[2]);
        let mut g = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        for (m, d, r) in [(1.0 - mu, d1, r1), (mu, d2, r2)] {
            let r3 = r * r * r;
            let r5 = r3 * r * r;
            g -= Matrix3::identity() * (m / r3) - d * d.transpose() * (3.0 * m / r5);
        }
        Ok(g)
    }

    pub fn accel(&self, state: &SpacecraftState) -> Result<Vector3<f64>> {
        let a = self.accel_slice(state.0.as_slice())?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }

    /// Uncontrolled vector field `f(x) = [v; a(x)]`.
    pub fn vector_field(&self, state: &SpacecraftState) -> Result<Vector6<f64>> {
        let a = self.accel_slice(state.0.as_slice())?;
        let v = state.0;
        Ok(Vector6::new(v[3], v[4], v[5], a[0], a[1], a[2]))
    }

    pub fn jacobian(&self, state: &SpacecraftState) -> Result<Matrix6<f64>> {
        self.jacobian_slice(state.0.as_slice())
    }

    fn jacobian_slice(&self, x: &[f64]) -> Result<Matrix6<f64>> {
        let g = self.gravity_gradient(x)?;
        let mut a = Matrix6::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&g);
        a[(3, 4)] = 2.0;
        a[(4, 3)] = -2.0;
        Ok(a)
    }

    /// `∂²f/∂x∂x`; only the acceleration rows with position indices are nonzero.
    pub fn hessian(&self, state: &SpacecraftState) -> Result<StateHessian> {
        self.hessian_slice(state.0.as_slice())
    }

    fn hessian_slice(&self, x: &[f64]) -> Result<StateHessian> {
        let mu = self.params.mu;
        let (r1, r2) = self.radii(x)?;
        let d1 = [x[0] + mu, x[1], x[2]];
        let d2 = [x[0] + mu - 1.0, x[1], x[2]];
        let mut h = zero_hessian();
        for (m, d, r) in [(1.0 - mu, d1, r1), (mu, d2, r2)] {
            let r5 = r.powi(5);
            let r7 = r5 * r * r;
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
                        let sym = delta(a, b) * d[c] + delta(a, c) * d[b] + delta(b, c) * d[a];
                        h[3 + a][(b, c)] += m * (3.0 * sym / r5 - 15.0 * d[a] * d[b] * d[c] / r7);
                    }
                }
            }
        }
        Ok(h)
    }

    /// Jacobi constant `C = 2U - v²`.
    pub fn jacobi_constant(&self, state: &SpacecraftState) -> Result<f64> {
        let x = state.0.as_slice();
        let mu = self.params.mu;
        let (r1, r2) = self.radii(x)?;
        let u = 0.5 * (x[0] * x[0] + x[1] * x[1]) + (1.0 - mu) / r1 + mu / r2;
        Ok(2.0 * u - (x[3] * x[3] + x[4] * x[4] + x[5] * x[5]))
    }

    /// Integrates `ẋ = f(x) + [0; u(t)]`. Integration restarts at every FOH knot
    /// inside the span so the integrator never steps across a control kink.
    pub fn propagate(
        &self,
        state: &SpacecraftState,
        t0: f64,
        t1: f64,
        control: Option<&FohProfile>,
    ) -> Result<SpacecraftState> {
        let mut y = state.to_array();
        for (a, b) in split_at_knots(t0, t1, control) {
            integrate(
                |t, x, dx| {
                    let acc = self.accel_slice(x)?;
                    let u = control.map(|c| c.eval(t)).unwrap_or_else(Vector3::zeros);
                    dx[..3].copy_from_slice(&x[3..6]);
                    dx[3] = acc[0] + u.x;
                    dx[4] = acc[1] + u.y;
                    dx[5] = acc[2] + u.z;
                    Ok(())
                },
                a,
                b,
                &mut y,
                &self.tol,
            )?;
        }
        Ok(SpacecraftState::from_array(y))
    }

    /// Uncontrolled propagation with the first- or second-order variational
    /// equations.
    pub fn propagate_with_stm(
        &self,
        state: &SpacecraftState,
        t0: f64,
        t1: f64,
        order: StmOrder,
    ) -> Result<(SpacecraftState, Stm)> {
        let mut out = self.propagate_with_stm_through(state, t0, &[t1], order, None)?;
        Ok(out.pop().expect("one epoch requested"))
    }

    /// Propagates from `t0` through each of `epochs` (monotone, same direction)
    /// and returns the state and the transition derivatives relative to `t0` at
    /// every epoch. An optional FOH control acts as a known forcing term.
    pub fn propagate_with_stm_through(
        &self,
        state: &SpacecraftState,
        t0: f64,
        epochs: &[f64],
        order: StmOrder,
        control: Option<&FohProfile>,
    ) -> Result<Vec<(SpacecraftState, Stm)>> {
        let dim = match order {
            StmOrder::First => 42,
            StmOrder::Second => 258,
        };
        let mut y = vec![0.0; dim];
        y[..6].copy_from_slice(state.0.as_slice());
        for i in 0..6 {
            y[6 + 7 * i] = 1.0;
        }
        let mut out = Vec::with_capacity(epochs.len());
        let mut t_prev = t0;
        for &t_next in epochs {
            for (a, b) in split_at_knots(t_prev, t_next, control) {
                integrate(
                    |t, x, dx| self.variational_rhs(t, x, dx, order, control),
                    a,
                    b,
                    &mut y,
                    &self.tol,
                )?;
            }
            t_prev = t_next;
            let phi = Matrix6::from_column_slice(&y[6..42]);
            let second = match order {
                StmOrder::First => None,
                StmOrder::Second => {
                    let mut psi = zero_hessian();
                    for (i, m) in psi.iter_mut().enumerate() {
                        *m = Matrix6::from_column_slice(&y[42 + 36 * i..78 + 36 * i]);
                    }
                    Some(psi)
                }
            };
            out.push((
                SpacecraftState::from_array(y[..6].try_into().unwrap()),
                Stm {
                    first_order: phi,
                    second_order: second,
                },
            ));
        }
        Ok(out)
    }

    fn variational_rhs(
        &self,
        t: f64,
        y: &[f64],
        dy: &mut [f64],
        order: StmOrder,
        control: Option<&FohProfile>,
    ) -> Result<()> {
        let x = &y[..6];
        let acc = self.accel_slice(x)?;
        let u = control.map(|c| c.eval(t)).unwrap_or_else(Vector3::zeros);
        dy[..3].copy_from_slice(&x[3..6]);
        dy[3] = acc[0] + u.x;
        dy[4] = acc[1] + u.y;
        dy[5] = acc[2] + u.z;

        let a = self.jacobian_slice(x)?;
        let phi = Matrix6::from_column_slice(&y[6..42]);
        let dphi = a * phi;
        dy[6..42].copy_from_slice(dphi.as_slice());

        if order == StmOrder::Second {
            let h = self.hessian_slice(x)?;
            let mut psi = zero_hessian();
            for (i, m) in psi.iter_mut().enumerate() {
                *m = Matrix6::from_column_slice(&y[42 + 36 * i..78 + 36 * i]);
            }
            for i in 0..6 {
                let mut d = phi.transpose() * h[i] * phi;
                for (p, psi_p) in psi.iter().enumerate() {
                    let aip = a[(i, p)];
                    if aip != 0.0 {
                        d += psi_p * aip;
                    }
                }
                dy[42 + 36 * i..78 + 36 * i].copy_from_slice(d.as_slice());
            }
        }
        Ok(())
    }

    /// Period of a periodic orbit through `state`, taken as the time of first
    /// return to the `y = 0` plane with the same crossing direction. The state
    /// must lie on the section.
    pub fn reference_period(&self, state: &SpacecraftState) -> Result<f64> {
        const CHUNK: f64 = 0.05;
        const MAX_TIME: f64 = 200.0;
        let y0 = state.0[1];
        let vy0 = state.0[4];
        if y0.abs() > 1e-10 {
            return Err(Error::UnresolvablePeriod(format!(
                "state is not on the y = 0 section (y = {y0:e})"
            )));
        }
        if vy0 == 0.0 {
            return Err(Error::UnresolvablePeriod(
                "state is tangent to the y = 0 section".into(),
            ));
        }
        let dir = vy0.signum();
        let mut t = 0.0;
        let mut s = *state;
        let mut y_prev = 0.0;
        let mut left_section = false;
        while t < MAX_TIME {
            let s_next = self.propagate(&s, t, t + CHUNK, None)?;
            let y_next = s_next.0[1];
            if left_section && y_prev * dir < 0.0 && y_next * dir >= 0.0 {
                return self.bisect_crossing(&s, t, t + CHUNK);
            }
            if y_next != 0.0 {
                left_section = true;
            }
            y_prev = y_next;
            s = s_next;
            t += CHUNK;
        }
        Err(Error::UnresolvablePeriod(format!(
            "no return to the y = 0 section within {MAX_TIME} TU"
        )))
    }

    fn bisect_crossing(&self, start: &SpacecraftState, ta: f64, tb: f64) -> Result<f64> {
        let mut lo = ta;
        let mut hi = tb;
        let y_lo = start.0[1];
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let y_mid = self.propagate(start, ta, mid, None)?.0[1];
            if y_mid == 0.0 {
                return Ok(mid);
            }
            if (y_mid < 0.0) == (y_lo < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Time nodes equally spaced in the regularized variable `τ` with
    /// `dt = r_m^σ dτ`, starting from `state0` at `t0` (zero control) and ending
    /// at `tf`.
    pub fn sundman_nodes(
        &self,
        state0: &SpacecraftState,
        t0: f64,
        tf: f64,
        sigma: f64,
        n_nodes: usize,
    ) -> Result<TimeGrid> {
        if n_nodes < 2 {
            return Err(Error::InvalidArgument("n_nodes must be >= 2".into()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument("sigma must be >= 0".into()));
        }
        if !(tf > t0) {
            return Err(Error::InvalidArgument("tf must exceed t0".into()));
        }
        const T_TOL: f64 = 1e-9;
        let elapsed = |tau: f64| -> Result<f64> {
            let mut z = self.sundman_state(state0, t0);
            self.integrate_sundman(&mut z, 0.0, tau, sigma)?;
            Ok(z[6])
        };

        let rm0 = self.moon_distance(state0);
        let mut tau_end = (tf - t0) / rm0.powf(sigma);
        let mut t_end = elapsed(tau_end)?;
        if (t_end - tf).abs() > T_TOL {
            let (mut lo, mut hi) = (0.0, tau_end);
            while t_end < tf {
                lo = hi;
                hi *= 2.0;
                t_end = elapsed(hi)?;
            }
            for _ in 0..100 {
                tau_end = 0.5 * (lo + hi);
                t_end = elapsed(tau_end)?;
                if (t_end - tf).abs() <= T_TOL {
                    break;
                }
                if t_end < tf {
                    lo = tau_end;
                } else {
                    hi = tau_end;
                }
            }
            if (t_end - tf).abs() > T_TOL {
                return Err(Error::Integration {
                    t: t_end,
                    reason: "Sundman span bisection did not reach the final time".into(),
                });
            }
        }

        let dtau = tau_end / (n_nodes - 1) as f64;
        let mut z = self.sundman_state(state0, t0);
        let mut nodes = Vec::with_capacity(n_nodes);
        nodes.push(t0);
        for k in 1..n_nodes {
            self.integrate_sundman(&mut z, (k - 1) as f64 * dtau, k as f64 * dtau, sigma)?;
            nodes.push(z[6]);
        }
        nodes[n_nodes - 1] = tf;
        TimeGrid::new(nodes)
    }

    fn sundman_state(&self, state0: &SpacecraftState, t0: f64) -> Vec<f64> {
        let mut z = state0.to_array().to_vec();
        z.push(t0);
        z
    }

    fn integrate_sundman(&self, z: &mut [f64], tau0: f64, tau1: f64, sigma: f64) -> Result<()> {
        let mu = self.params.mu;
        integrate(
            |_, z, dz| {
                let acc = self.accel_slice(&z[..6])?;
                let rm = ((z[0] + mu - 1.0).powi(2) + z[1] * z[1] + z[2] * z[2]).sqrt();
                let s = if sigma == 0.0 { 1.0 } else { rm.powf(sigma) };
                dz[0] = s * z[3];
                dz[1] = s * z[4];
                dz[2] = s * z[5];
                dz[3] = s * acc[0];
                dz[4] = s * acc[1];
                dz[5] = s * acc[2];
                dz[6] = s;
                Ok(())
            },
            tau0,
            tau1,
            z,
            &self.tol,
        )?;
        Ok(())
    }
}

/// Sub-intervals of `[t0, t1]` (either direction) split at interior FOH knots.
fn split_at_knots(t0: f64, t1: f64, control: Option<&FohProfile>) -> Vec<(f64, f64)> {
    let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
    let mut cuts: Vec<f64> = control
        .map(|c| {
            c.knots()
                .iter()
                .copied()
                .filter(|&k| k > lo && k < hi)
                .collect()
        })
        .unwrap_or_default();
    if t1 < t0 {
        cuts.reverse();
    }
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut a = t0;
    for c in cuts {
        out.push((a, c));
        a = c;
    }
    out.push((a, t1));
    out
}

/// Piecewise-white-acceleration (state noise compensation) covariance over
/// one interval of length `dt` for acceleration PSD `q_psd`.
pub fn process_noise_segment(q_psd: f64, dt: f64) -> Result<Matrix6<f64>> {
    if !(q_psd >= 0.0) {
        return Err(Error::InvalidArgument("process noise PSD must be >= 0".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("process noise interval must be > 0".into()));
    }
    let mut q = Matrix6::zeros();
    let pp = q_psd * dt.powi(3) / 3.0;
    let pv = q_psd * dt * dt / 2.0;
    let vv = q_psd * dt;
    for i in 0..3 {
        q[(i, i)] = pp;
        q[(i, i + 3)] = pv;
        q[(i + 3, i)] = pv;
        q[(i + 3, i + 3)] = vv;
    }
    Ok(q)
}
