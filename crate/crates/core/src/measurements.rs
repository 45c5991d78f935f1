//! Satellite-to-satellite measurement models.
//!
//! Every model depends on the states only through `Δ = x_T − x_S`, so
//! `∂y/∂x_S = −∂y/∂x_T` and all second-derivative blocks coincide up to sign:
//! `∂²y/∂x_S² = ∂²y/∂x_T² = −∂²y/∂x_S∂x_T = h''(Δ)`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{SpacecraftState, SystemParameters};
use crate::error::{Error, Result};

/// Ranges below this are treated as a collision [DU].
pub const MIN_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    RelativePosition,
    RangeRangeRate,
}

impl MeasurementKind {
    pub fn dim(self) -> usize {
        match self {
            MeasurementKind::RelativePosition => 3,
            MeasurementKind::RangeRangeRate => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    kind: MeasurementKind,
    noise_cov: DMatrix<f64>,
}

impl MeasurementModel {
    pub fn new(kind: MeasurementKind, noise_cov: DMatrix<f64>) -> Result<Self> {
        let m = kind.dim();
        if noise_cov.nrows() != m || noise_cov.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "{kind:?} needs a {m}x{m} noise covariance, got {}x{}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        if (&noise_cov - noise_cov.transpose()).abs().max() > 0.0 {
            return Err(Error::NotPositiveDefinite(
                "measurement noise covariance is not symmetric".into(),
            ));
        }
        if noise_cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(
                "measurement noise covariance".into(),
            ));
        }
        Ok(Self { kind, noise_cov })
    }

    /// Isotropic relative-position noise with standard deviation `sigma` [DU].
    pub fn relative_position(sigma: f64) -> Result<Self> {
        Self::new(
            MeasurementKind::RelativePosition,
            DMatrix::from_diagonal_element(3, 3, sigma * sigma),
        )
    }

    /// Independent range [DU] and range-rate [DU/TU] noise.
    pub fn range_range_rate(sigma_range: f64, sigma_range_rate: f64) -> Result<Self> {
        Self::new(
            MeasurementKind::RangeRangeRate,
            DMatrix::from_diagonal(&DVector::from_vec(vec![
                sigma_range * sigma_range,
                sigma_range_rate * sigma_range_rate,
            ])),
        )
    }

    /// Builds a model from SI standard deviations: metres for positions and
    /// ranges, metres per second for range rates.
    pub fn from_si_sigmas(
        kind: MeasurementKind,
        sigmas_m: &[f64],
        params: &SystemParameters,
    ) -> Result<Self> {
        if sigmas_m.len() != kind.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{kind:?} needs {} noise values, got {}",
                kind.dim(),
                sigmas_m.len()
            )));
        }
        let normalized: Vec<f64> = match kind {
            MeasurementKind::RelativePosition => sigmas_m
                .iter()
                .map(|s| params.km_to_du(s * 1e-3))
                .collect(),
            MeasurementKind::RangeRangeRate => vec![
                params.km_to_du(sigmas_m[0] * 1e-3),
                params.km_s_to_du_tu(sigmas_m[1] * 1e-3),
            ],
        };
        let var = DVector::from_iterator(normalized.len(), normalized.iter().map(|s| s * s));
        Self::new(kind, DMatrix::from_diagonal(&var))
    }

    /// Inverse of [`Self::from_si_sigmas`] for diagonal covariances.
    pub fn si_sigmas(&self, params: &SystemParameters) -> Vec<f64> {
        let s: Vec<f64> = self.noise_cov.diagonal().iter().map(|v| v.sqrt()).collect();
        match self.kind {
            MeasurementKind::RelativePosition => {
                s.iter().map(|v| params.du_to_km(*v) * 1e3).collect()
            }
            MeasurementKind::RangeRangeRate => vec![
                params.du_to_km(s[0]) * 1e3,
                params.du_tu_to_km_s(s[1]) * 1e3,
            ],
        }
    }

    pub fn kind(&self) -> MeasurementKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn measure(
        &self,
        target: &SpacecraftState,
        sensor: &SpacecraftState,
    ) -> Result<DVector<f64>> {
        let (d, v) = difference(target, sensor);
        match self.kind {
            MeasurementKind::RelativePosition => Ok(DVector::from_column_slice(d.as_slice())),
            MeasurementKind::RangeRangeRate => {
                let rho = range(&d)?;
                Ok(DVector::from_vec(vec![rho, d.dot(&v) / rho]))
            }
        }
    }

    /// Returns `(∂y/∂x_S, ∂y/∂x_T)`, each `m × 6`.
    pub fn jacobians(
        &self,
        target: &SpacecraftState,
        sensor: &SpacecraftState,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let dt = self.jacobian_wrt_delta(target, sensor)?;
        Ok((-&dt, dt))
    }

    fn jacobian_wrt_delta(
        &self,
        target: &SpacecraftState,
        sensor: &SpacecraftState,
    ) -> Result<DMatrix<f64>> {
        let (d, v) = difference(target, sensor);
        match self.kind {
            MeasurementKind::RelativePosition => {
                let mut h = DMatrix::zeros(3, 6);
                h.view_mut((0, 0), (3, 3)).fill_with_identity();
                Ok(h)
            }
            MeasurementKind::RangeRangeRate => {
                let rho = range(&d)?;
                let u = d / rho;
                let rho_dot = u.dot(&v);
                let g = (v - u * rho_dot) / rho;
                let mut h = DMatrix::zeros(2, 6);
                for c in 0..3 {
                    h[(0, c)] = u[c];
                    h[(1, c)] = g[c];
                    h[(1, 3 + c)] = u[c];
                }
                Ok(h)
            }
        }
    }

    /// `∂²y_r/∂x_S∂x_S` for each measurement component `r`.
    pub fn hessian(
        &self,
        target: &SpacecraftState,
        sensor: &SpacecraftState,
    ) -> Result<Vec<Matrix6<f64>>> {
        let (d, v) = difference(target, sensor);
        match self.kind {
            MeasurementKind::RelativePosition => Ok(vec![Matrix6::zeros(); 3]),
            MeasurementKind::RangeRangeRate => {
                let rho = range(&d)?;
                let u = d / rho;
                let rho_dot = u.dot(&v);
                let g = (v - u * rho_dot) / rho;
                let proj = (Matrix3::identity() - u * u.transpose()) / rho;

                let mut h_rho = Matrix6::zeros();
                h_rho.fixed_view_mut::<3, 3>(0, 0).copy_from(&proj);

                let dd = -(u * g.transpose() + g * u.transpose()) / rho - proj * (rho_dot / rho);
                let mut h_rate = Matrix6::zeros();
                h_rate.fixed_view_mut::<3, 3>(0, 0).copy_from(&dd);
                h_rate.fixed_view_mut::<3, 3>(0, 3).copy_from(&proj);
                h_rate.fixed_view_mut::<3, 3>(3, 0).copy_from(&proj);
                Ok(vec![h_rho, h_rate])
            }
        }
    }
}

fn difference(target: &SpacecraftState, sensor: &SpacecraftState) -> (Vector3<f64>, Vector3<f64>) {
    (
        target.position() - sensor.position(),
        target.velocity() - sensor.velocity(),
    )
}

fn range(d: &Vector3<f64>) -> Result<f64> {
    let rho = d.norm();
    if rho < MIN_RANGE {
        return Err(Error::ZeroRange { rho });
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rrr() -> MeasurementModel {
        MeasurementModel::range_range_rate(1e-3, 1e-3).unwrap()
    }

    fn relpos() -> MeasurementModel {
        MeasurementModel::relative_position(1e-3).unwrap()
    }

    fn pair(d: [f64; 6]) -> (SpacecraftState, SpacecraftState) {
        let sensor = SpacecraftState::from_array([0.8, 0.1, -0.05, 0.02, 0.5, 0.01]);
        let target = SpacecraftState::from(sensor.0 + nalgebra::Vector6::from_column_slice(&d));
        (target, sensor)
    }

    /// Largest entrywise error normalized by the largest reference entry.
    fn normwise(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max() / b.abs().max().max(1e-300)
    }

    fn fd_jacobian_sensor(m: &MeasurementModel, t: &SpacecraftState, s: &SpacecraftState, h: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.dim(), 6);
        for j in 0..6 {
            let mut sp = s.0;
            let mut sq = s.0;
            sp[j] += h;
            sq[j] -= h;
            let yp = m.measure(t, &sp.into()).unwrap();
            let yq = m.measure(t, &sq.into()).unwrap();
            out.set_column(j, &((yp - yq) / (2.0 * h)));
        }
        out
    }

    fn fd_hessian_sensor(m: &MeasurementModel, t: &SpacecraftState, s: &SpacecraftState, h: f64) -> Vec<DMatrix<f64>> {
        let mut out = vec![DMatrix::zeros(6, 6); m.dim()];
        for k in 0..6 {
            let mut sp = s.0;
            let mut sq = s.0;
            sp[k] += h;
            sq[k] -= h;
            let (jp, _) = m.jacobians(t, &sp.into()).unwrap();
            let (jq, _) = m.jacobians(t, &sq.into()).unwrap();
            for (r, hr) in out.iter_mut().enumerate() {
                for j in 0..6 {
                    hr[(j, k)] = (jp[(r, j)] - jq[(r, j)]) / (2.0 * h);
                }
            }
        }
        out
    }

    #[test]
    fn relative_position_values() {
        let (t, s) = pair([0.0; 6]);
        assert_eq!(relpos().measure(&t, &s).unwrap(), DVector::zeros(3));
        let (jt_s, jt_t) = relpos().jacobians(&t, &s).unwrap();
        let mut expected = DMatrix::zeros(3, 6);
        expected.view_mut((0, 0), (3, 3)).fill_with_identity();
        assert_eq!(jt_t, expected);
        assert_eq!(jt_s, -expected);
        assert!(relpos().hessian(&t, &s).unwrap().iter().all(|h| h.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn range_rate_hand_values() {
        let (t, s) = pair([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = rrr().measure(&t, &s).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1].abs() < 1e-15);
        let (t, s) = pair([3.0, 4.0, 0.0, 1.0, 1.0, 0.0]);
        let y = rrr().measure(&t, &s).unwrap();
        assert!((y[0] - 5.0).abs() < 1e-14);
        assert!((y[1] - 7.0 / 5.0).abs() < 1e-14);
    }

    #[test]
    fn zero_range_is_an_error() {
        let (t, s) = pair([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(rrr().measure(&t, &s), Err(Error::ZeroRange { .. })));
        assert!(matches!(rrr().hessian(&t, &s), Err(Error::ZeroRange { .. })));
    }

    #[test]
    fn range_rate_derivatives_at_reference_geometry() {
        let m = rrr();
        let (t, s) = pair([3.0, 4.0, 0.0, 1.0, 1.0, 0.0]);
        let (js, jt) = m.jacobians(&t, &s).unwrap();
        let fd = fd_jacobian_sensor(&m, &t, &s, 1e-6);
        for r in 0..2 {
            for c in 0..6 {
                let err = (js[(r, c)] - fd[(r, c)]).abs() / fd[(r, c)].abs().max(1e-12);
                assert!(err < 1e-7 || (js[(r, c)] - fd[(r, c)]).abs() < 1e-10, "J[{r},{c}]");
            }
        }
        assert_eq!(js + jt, DMatrix::zeros(2, 6));
        let hess = m.hessian(&t, &s).unwrap();
        let fdh = fd_hessian_sensor(&m, &t, &s, 1e-5);
        for (h, f) in hess.iter().zip(&fdh) {
            for j in 0..6 {
                for k in 0..6 {
                    let err = (h[(j, k)] - f[(j, k)]).abs() / f[(j, k)].abs().max(1e-12);
                    assert!(err < 1e-5 || (h[(j, k)] - f[(j, k)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn si_noise_round_trip() {
        let p = SystemParameters::default();
        let m = MeasurementModel::from_si_sigmas(MeasurementKind::RangeRangeRate, &[100.0, 10.0], &p).unwrap();
        let back = m.si_sigmas(&p);
        assert!((back[0] - 100.0).abs() < 1e-12 * 100.0);
        assert!((back[1] - 10.0).abs() < 1e-12 * 10.0);
        let m = MeasurementModel::from_si_sigmas(MeasurementKind::RelativePosition, &[100.0; 3], &p).unwrap();
        assert!(m.si_sigmas(&p).iter().all(|v| (v - 100.0).abs() < 1e-10));
    }

    #[test]
    fn rejects_bad_noise() {
        assert!(MeasurementModel::new(MeasurementKind::RangeRangeRate, DMatrix::identity(3, 3)).is_err());
        assert!(MeasurementModel::new(MeasurementKind::RangeRangeRate, DMatrix::zeros(2, 2)).is_err());
    }

    fn geometry() -> impl Strategy<Value = [f64; 6]> {
        (
            1e-3f64..1.0,
            0.0f64..std::f64::consts::PI,
            0.0f64..std::f64::consts::TAU,
            prop::array::uniform3(-1.0f64..1.0),
        )
            .prop_map(|(rho, th, ph, v)| {
                [
                    rho * th.sin() * ph.cos(),
                    rho * th.sin() * ph.sin(),
                    rho * th.cos(),
                    v[0],
                    v[1],
                    v[2],
                ]
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn range_rate_jacobian_matches_finite_differences(d in geometry()) {
            let m = rrr();
            let (t, s) = pair(d);
            let rho = d[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
            let (js, jt) = m.jacobians(&t, &s).unwrap();
            prop_assert_eq!(&js + &jt, DMatrix::zeros(2, 6));
            let fd = fd_jacobian_sensor(&m, &t, &s, 1e-5 * rho);
            prop_assert!(normwise(&js, &fd) < 1e-6);
        }

        #[test]
        fn range_rate_hessian_matches_finite_differences(d in geometry()) {
            let m = rrr();
            let (t, s) = pair(d);
            let rho = d[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
            let hess = m.hessian(&t, &s).unwrap();
            let fd = fd_hessian_sensor(&m, &t, &s, 1e-5 * rho);
            for (h, f) in hess.iter().zip(&fd) {
                prop_assert!((h - h.transpose()).abs().max() <= 1e-12 * h.abs().max());
                let hd = DMatrix::from_column_slice(6, 6, h.as_slice());
                prop_assert!(normwise(&hd, f) < 1e-4);
            }
        }
    }
}
