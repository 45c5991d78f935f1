//! Mutual information between the stacked augmented state (observer plus
//! targets) and the stacked measurements of one observation window.
//!
//! Column block 0 of `H̃` maps the augmented state at the first measurement
//! epoch (covariance `P_{A,0}`); column block `ℓ ≥ 1` maps the process noise
//! injected over `(t_{ℓ−1}, t_ℓ]` (covariance `Q_{A,ℓ}`). Row block `j` holds
//! the measurements taken at `t_j`.

use nalgebra::{DMatrix, Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{process_noise_segment, Crtbp, SpacecraftState, Stm, StmOrder, SystemParameters};
use crate::error::{Error, Result};
use crate::measurements::MeasurementModel;

/// Measurement epochs closer than this to the window end still count [TU].
const EPOCH_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub t_start: f64,
    pub t_end: f64,
    /// Measurements per day.
    pub cadence: f64,
    /// Index of the trajectory node at `t_start`.
    pub anchor_node: usize,
}

impl ObservationWindow {
    pub fn new(t_start: f64, t_end: f64, cadence: f64, anchor_node: usize) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::InvalidArgument(format!(
                "observation window end {t_end} must follow its start {t_start}"
            )));
        }
        if !(cadence > 0.0 && cadence.is_finite()) {
            return Err(Error::InvalidArgument("cadence must be positive".into()));
        }
        Ok(Self {
            t_start,
            t_end,
            cadence,
            anchor_node,
        })
    }

    /// `t_start + j / cadence` for every `j` with the epoch inside the window.
    pub fn epochs(&self, params: &SystemParameters) -> Vec<f64> {
        let spacing = params.days_to_tu(1.0 / self.cadence);
        (0..)
            .map(|j| self.t_start + j as f64 * spacing)
            .take_while(|t| *t <= self.t_end + EPOCH_SLACK)
            .map(|t| t.min(self.t_end))
            .collect()
    }
}

/// Error covariances at the window start plus per-object process noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPrior {
    pub sensor_cov: Matrix6<f64>,
    pub target_covs: Vec<Matrix6<f64>>,
    /// Acceleration PSD [DU²/TU³]; sensor first, then targets in order.
    pub q_psd: Vec<f64>,
}

impl AugmentedPrior {
    pub fn validate(&self) -> Result<()> {
        if self.q_psd.len() != self.target_covs.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} process-noise values for {} objects",
                self.q_psd.len(),
                self.target_covs.len() + 1
            )));
        }
        for (k, p) in std::iter::once(&self.sensor_cov).chain(&self.target_covs).enumerate() {
            if (p - p.transpose()).abs().max() > 1e-12 * p.abs().max() || p.cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(format!("prior covariance of object {k}")));
            }
        }
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.target_covs.len() + 1
    }

    pub fn covariance(&self, object: usize) -> &Matrix6<f64> {
        if object == 0 {
            &self.sensor_cov
        } else {
            &self.target_covs[object - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InformationBlocks {
    pub h_tilde: DMatrix<f64>,
    pub p_tilde: DMatrix<f64>,
    pub r_tilde: DMatrix<f64>,
}

/// First-order model `I(δx) ≈ value + gradient · δx_{S,k*}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiLinearization {
    pub value: f64,
    pub gradient: Vector6<f64>,
}

impl MiLinearization {
    pub fn approx(&self, dx: &Vector6<f64>) -> f64 {
        self.value + self.gradient.dot(dx)
    }
}

/// Propagated states and transition matrices of every object at every
/// measurement epoch, relative to the window start.
struct WindowTracks {
    epochs: Vec<f64>,
    /// `tracks[object][j]`; object 0 is the sensor.
    tracks: Vec<Vec<(SpacecraftState, Stm)>>,
    /// `Φ(t_ℓ, t_0)⁻¹` per object and epoch.
    inverses: Vec<Vec<Matrix6<f64>>>,
}

impl WindowTracks {
    fn new(
        window: &ObservationWindow,
        sensor: &SpacecraftState,
        targets: &[SpacecraftState],
        crtbp: &Crtbp,
        sensor_order: StmOrder,
    ) -> Result<Self> {
        let epochs = window.epochs(&crtbp.params);
        if epochs.is_empty() {
            return Err(Error::InvalidArgument("observation window holds no epochs".into()));
        }
        let t0 = epochs[0];
        let objects: Vec<(SpacecraftState, StmOrder)> = std::iter::once((*sensor, sensor_order))
            .chain(targets.iter().map(|t| (*t, StmOrder::First)))
            .collect();
        let tracks = objects
            .par_iter()
            .map(|(s, order)| crtbp.propagate_with_stm_through(s, t0, &epochs, *order, None))
            .collect::<Result<Vec<_>>>()?;
        let inverses = tracks
            .iter()
            .map(|track| {
                track
                    .iter()
                    .zip(&epochs)
                    .map(|((_, stm), &t)| {
                        stm.first_order
                            .try_inverse()
                            .ok_or(Error::SingularTransition { t0, t1: t })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            epochs,
            tracks,
            inverses,
        })
    }

    fn n(&self) -> usize {
        self.epochs.len()
    }

    fn state(&self, object: usize, j: usize) -> &SpacecraftState {
        &self.tracks[object][j].0
    }

    fn phi0(&self, object: usize, j: usize) -> &Matrix6<f64> {
        &self.tracks[object][j].1.first_order
    }

    /// `Φ(t_j, t_ℓ)` for `object`.
    fn phi(&self, object: usize, j: usize, l: usize) -> Matrix6<f64> {
        self.phi0(object, j) * self.inverses[object][l]
    }
}

fn check_prior(prior: &AugmentedPrior, targets: &[SpacecraftState]) -> Result<()> {
    if prior.target_covs.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} target priors for {} targets",
            prior.target_covs.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target is required".into()));
    }
    prior.validate()
}

fn assemble_from_tracks(
    tracks: &WindowTracks,
    prior: &AugmentedPrior,
    model: &MeasurementModel,
) -> Result<InformationBlocks> {
    let n = tracks.n();
    let n_obj = prior.n_objects();
    let n_t = n_obj - 1;
    let m = model.dim();
    let (na, ma) = (6 * n_obj, m * n_t);
    let mut h = DMatrix::zeros(ma * n, na * n);
    let mut p = DMatrix::zeros(na * n, na * n);
    let mut r = DMatrix::zeros(ma * n, ma * n);

    for obj in 0..n_obj {
        p.view_mut((6 * obj, 6 * obj), (6, 6)).copy_from(prior.covariance(obj));
    }
    for l in 1..n {
        let dt = tracks.epochs[l] - tracks.epochs[l - 1];
        for (obj, &q) in prior.q_psd.iter().enumerate() {
            let off = l * na + 6 * obj;
            p.view_mut((off, off), (6, 6)).copy_from(&process_noise_segment(q, dt)?);
        }
    }

    for j in 0..n {
        let sensor = tracks.state(0, j);
        for i in 0..n_t {
            let row = j * ma + i * m;
            r.view_mut((row, row), (m, m)).copy_from(model.noise_cov());
            let (hs, ht) = model.jacobians(tracks.state(i + 1, j), sensor)?;
            for l in 0..=j {
                let col = l * na;
                h.view_mut((row, col), (m, 6)).copy_from(&(&hs * tracks.phi(0, j, l)));
                h.view_mut((row, col + 6 * (i + 1)), (m, 6))
                    .copy_from(&(&ht * tracks.phi(i + 1, j, l)));
            }
        }
    }
    Ok(InformationBlocks {
        h_tilde: h,
        p_tilde: p,
        r_tilde: r,
    })
}

/// Stacks `H̃`, `P̃`, `R̃` for a window whose first measurement epoch is the
/// epoch of the supplied anchor states. All objects coast over the window.
pub fn assemble_blocks(
    window: &ObservationWindow,
    sensor: &SpacecraftState,
    targets: &[SpacecraftState],
    prior: &AugmentedPrior,
    model: &MeasurementModel,
    crtbp: &Crtbp,
) -> Result<InformationBlocks> {
    check_prior(prior, targets)?;
    let tracks = WindowTracks::new(window, sensor, targets, crtbp, StmOrder::First)?;
    assemble_from_tracks(&tracks, prior, model)
}

/// A square root `S` with `S Sᵀ = P`: the Cholesky factor when `P` is
/// positive definite, else the symmetric root with round-off negatives clipped.
fn psd_sqrt(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = p.clone().cholesky() {
        return Ok(c.unpack());
    }
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floor = -1e-10 * eig.eigenvalues.abs().max();
    if eig.eigenvalues.iter().any(|&v| v < floor) {
        return Err(Error::NotPositiveDefinite("stacked prior covariance P̃".into()));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Whitened factors shared by the value and the gradient.
struct MiFactors {
    value: f64,
    l_r: DMatrix<f64>,
    w: DMatrix<f64>,
    m_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn factor(blocks: &InformationBlocks) -> Result<MiFactors> {
    let InformationBlocks {
        h_tilde,
        p_tilde,
        r_tilde,
    } = blocks;
    if h_tilde.nrows() != r_tilde.nrows() || h_tilde.ncols() != p_tilde.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "H̃ is {}x{}, P̃ is {}x{}, R̃ is {}x{}",
            h_tilde.nrows(),
            h_tilde.ncols(),
            p_tilde.nrows(),
            p_tilde.ncols(),
            r_tilde.nrows(),
            r_tilde.ncols()
        )));
    }
    let l_r = r_tilde
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("stacked measurement noise R̃".into()))?
        .unpack();
    let w = l_r
        .solve_lower_triangular(h_tilde)
        .ok_or_else(|| Error::NotPositiveDefinite("stacked measurement noise R̃".into()))?;
    // QR of [(W S)ᵀ; I] with S Sᵀ = P̃ yields the Cholesky factor of
    // W P̃ Wᵀ + I without squaring the condition number.
    let a = &w * psd_sqrt(p_tilde)?;
    let (m, n) = (a.nrows(), a.ncols());
    let mut stacked = DMatrix::zeros(n + m, m);
    stacked.rows_mut(0, n).copy_from(&a.transpose());
    stacked.rows_mut(n, m).fill_with_identity();
    let mut l = stacked.qr().r().transpose();
    for j in 0..m {
        if l[(j, j)] < 0.0 {
            l.column_mut(j).neg_mut();
        }
    }
    let m_chol = nalgebra::Cholesky::pack_dirty(l);
    let value = m_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(MiFactors {
        value,
        l_r,
        w,
        m_chol,
    })
}

/// `½ (ln det(H̃P̃H̃ᵀ + R̃) − ln det R̃)`, evaluated as `½ ln det(W P̃ Wᵀ + I)`
/// with `W = L_R⁻¹ H̃`.
pub fn mutual_information(blocks: &InformationBlocks) -> Result<f64> {
    Ok(factor(blocks)?.value)
}

/// `Ψ_c = ∂Φ/∂x₀_c`, read from the second-order tensor.
fn stm_sensitivity(psi: &[Matrix6<f64>; 6], c: usize) -> Matrix6<f64> {
    Matrix6::from_fn(|a, b| psi[a][(b, c)])
}

/// Frobenius product of two equally shaped column-major matrices.
fn frobenius<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value and gradient of the window's mutual information with respect to the
/// sensor state at the window start; target anchor states and process noise
/// are held fixed.
pub fn mi_linearize(
    window: &ObservationWindow,
    sensor: &SpacecraftState,
    targets: &[SpacecraftState],
    prior: &AugmentedPrior,
    model: &MeasurementModel,
    crtbp: &Crtbp,
) -> Result<MiLinearization> {
    check_prior(prior, targets)?;
    let tracks = WindowTracks::new(window, sensor, targets, crtbp, StmOrder::Second)?;
    let blocks = assemble_from_tracks(&tracks, prior, model)?;
    let f = factor(&blocks)?;

    // dI/dc = ⟨(H̃P̃H̃ᵀ + R̃)⁻¹ H̃ P̃, ∂H̃/∂c⟩_F.
    let wp = &f.w * &blocks.p_tilde;
    let x = f.m_chol.solve(&wp);
    let k = f
        .l_r
        .transpose()
        .solve_upper_triangular(&x)
        .ok_or_else(|| Error::NotPositiveDefinite("stacked measurement noise R̃".into()))?;

    let n = tracks.n();
    let n_t = targets.len();
    let m = model.dim();
    let (na, ma) = (6 * (n_t + 1), m * n_t);

    let psi: Vec<[Matrix6<f64>; 6]> = (0..n)
        .map(|j| {
            let second = tracks.tracks[0][j]
                .1
                .second_order
                .as_ref()
                .expect("sensor propagated to second order");
            std::array::from_fn(|c| stm_sensitivity(second, c))
        })
        .collect();

    let mut grad = Vector6::zeros();
    for j in 0..n {
        let sensor_j = tracks.state(0, j);
        let phi_s_j0 = tracks.phi0(0, j);
        for i in 0..n_t {
            let target_j = tracks.state(i + 1, j);
            let (hs, _) = model.jacobians(target_j, sensor_j)?;
            let d: Vec<Matrix6<f64>> = model
                .hessian(target_j, sensor_j)?
                .iter()
                .map(|hy| hy * phi_s_j0)
                .collect();
            let row = j * ma + i * m;
            for l in 0..=j {
                let col = l * na;
                let ks = k.view((row, col), (m, 6));
                let kt = k.view((row, col + 6 * (i + 1)), (m, 6));
                let phi_s = tracks.phi(0, j, l);
                let phi_t = tracks.phi(i + 1, j, l);
                let inv_l = &tracks.inverses[0][l];
                for c in 0..6 {
                    let mut dhs = DMatrix::zeros(m, 6);
                    for (r, dr) in d.iter().enumerate() {
                        for b in 0..6 {
                            dhs[(r, b)] = dr[(b, c)];
                        }
                    }
                    let dphi = psi[j][c] * inv_l - phi_s * psi[l][c] * inv_l;
                    let sensor_part = &dhs * phi_s + &hs * dphi;
                    let target_part = -&dhs * phi_t;
                    grad[c] += frobenius(ks.iter(), sensor_part.iter()) + frobenius(kt.iter(), target_part.iter());
                }
            }
        }
    }
    Ok(MiLinearization {
        value: f.value,
        gradient: grad,
    })
}

pub fn mi_gradient(
    window: &ObservationWindow,
    sensor: &SpacecraftState,
    targets: &[SpacecraftState],
    prior: &AugmentedPrior,
    model: &MeasurementModel,
    crtbp: &Crtbp,
) -> Result<Vector6<f64>> {
    Ok(mi_linearize(window, sensor, targets, prior, model, crtbp)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::MeasurementKind;
    use proptest::prelude::*;

    fn crtbp() -> Crtbp {
        Crtbp::new(SystemParameters::default())
    }

    fn sensor() -> SpacecraftState {
        SpacecraftState::from_array([7.78185828e-1, 0.0, 0.0, 0.0, 5.55931904e-1, 0.0])
    }

    fn targets(n: usize) -> Vec<SpacecraftState> {
        [
            [7.78717734e-1, 0.0, 0.0, 0.0, 5.55157488e-1, 0.0],
            [7.79426943e-1, 0.0, 0.0, 0.0, 5.54128887e-1, 0.0],
            [7.81554639e-1, 0.0, 0.0, 0.0, 5.51070308e-1, 0.0],
        ][..n]
            .iter()
            .map(|a| SpacecraftState::from_array(*a))
            .collect()
    }

    fn prior(n_t: usize, q: f64) -> AugmentedPrior {
        let p = SystemParameters::default();
        let pos = p.km_to_du(100.0).powi(2);
        let vel = p.km_s_to_du_tu(1e-2).powi(2);
        let cov = Matrix6::from_diagonal(&Vector6::new(pos, pos, pos, vel, vel, vel));
        AugmentedPrior {
            sensor_cov: cov,
            target_covs: vec![cov; n_t],
            q_psd: vec![p.psd_to_normalized(q); n_t + 1],
        }
    }

    fn window(n_meas: usize) -> ObservationWindow {
        let p = SystemParameters::default();
        let span = p.days_to_tu((n_meas - 1) as f64 + 0.5);
        ObservationWindow::new(0.5, 0.5 + span, 1.0, 0).unwrap()
    }

    fn relpos() -> MeasurementModel {
        let p = SystemParameters::default();
        MeasurementModel::from_si_sigmas(MeasurementKind::RelativePosition, &[100.0; 3], &p).unwrap()
    }

    fn rrr() -> MeasurementModel {
        let p = SystemParameters::default();
        MeasurementModel::from_si_sigmas(MeasurementKind::RangeRangeRate, &[100.0, 10.0], &p).unwrap()
    }

    /// Independent Kalman recursion: ½ Σ ln(det S_k / det R_k).
    fn innovation_sum(
        w: &ObservationWindow,
        sensor: &SpacecraftState,
        targets: &[SpacecraftState],
        prior: &AugmentedPrior,
        model: &MeasurementModel,
    ) -> f64 {
        let c = crtbp();
        let epochs = w.epochs(&c.params);
        let n_obj = targets.len() + 1;
        let na = 6 * n_obj;
        let mut p = DMatrix::zeros(na, na);
        for o in 0..n_obj {
            p.view_mut((6 * o, 6 * o), (6, 6)).copy_from(prior.covariance(o));
        }
        let mut states: Vec<SpacecraftState> = std::iter::once(*sensor).chain(targets.iter().copied()).collect();
        let mut total = 0.0;
        for (k, &t) in epochs.iter().enumerate() {
            if k > 0 {
                let mut phi = DMatrix::zeros(na, na);
                let mut q = DMatrix::zeros(na, na);
                for o in 0..n_obj {
                    let (s, stm) = c.propagate_with_stm(&states[o], epochs[k - 1], t, StmOrder::First).unwrap();
                    states[o] = s;
                    phi.view_mut((6 * o, 6 * o), (6, 6)).copy_from(&stm.first_order);
                    q.view_mut((6 * o, 6 * o), (6, 6))
                        .copy_from(&process_noise_segment(prior.q_psd[o], t - epochs[k - 1]).unwrap());
                }
                p = &phi * &p * phi.transpose() + q;
            }
            let m = model.dim();
            let mut h = DMatrix::zeros(m * targets.len(), na);
            let mut r = DMatrix::zeros(m * targets.len(), m * targets.len());
            for i in 0..targets.len() {
                let (hs, ht) = model.jacobians(&states[i + 1], &states[0]).unwrap();
                h.view_mut((m * i, 0), (m, 6)).copy_from(&hs);
                h.view_mut((m * i, 6 * (i + 1)), (m, 6)).copy_from(&ht);
                r.view_mut((m * i, m * i), (m, m)).copy_from(model.noise_cov());
            }
            let s = &h * &p * h.transpose() + &r;
            total += 0.5 * (s.clone().cholesky().unwrap().determinant().ln() - r.clone().determinant().ln());
            let gain = &p * h.transpose() * s.try_inverse().unwrap();
            let ikh = DMatrix::identity(na, na) - &gain * &h;
            p = &ikh * &p * ikh.transpose() + &gain * &r * gain.transpose();
        }
        total
    }

    #[test]
    fn scalar_closed_form() {
        let blocks = InformationBlocks {
            h_tilde: DMatrix::from_element(1, 1, 1.0),
            p_tilde: DMatrix::from_element(1, 1, 4.0),
            r_tilde: DMatrix::from_element(1, 1, 1.0),
        };
        assert!((mutual_information(&blocks).unwrap() - 0.5 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_sensitivity_gives_zero_information() {
        let blocks = InformationBlocks {
            h_tilde: DMatrix::zeros(4, 6),
            p_tilde: DMatrix::identity(6, 6),
            r_tilde: DMatrix::identity(4, 4) * 3.0,
        };
        assert_eq!(mutual_information(&blocks).unwrap(), 0.0);
    }

    #[test]
    fn non_pd_noise_is_rejected() {
        let blocks = InformationBlocks {
            h_tilde: DMatrix::zeros(2, 2),
            p_tilde: DMatrix::identity(2, 2),
            r_tilde: DMatrix::zeros(2, 2),
        };
        assert!(matches!(mutual_information(&blocks), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn single_epoch_degenerates_to_one_block() {
        let c = crtbp();
        let t = targets(1);
        let pr = prior(1, 1e-11);
        let w = ObservationWindow::new(0.5, 0.6, 1.0, 0).unwrap();
        let b = assemble_blocks(&w, &sensor(), &t, &pr, &relpos(), &c).unwrap();
        assert_eq!(b.h_tilde.shape(), (3, 12));
        let (hs, ht) = relpos().jacobians(&t[0], &sensor()).unwrap();
        assert_eq!(b.h_tilde.view((0, 0), (3, 6)), hs);
        assert_eq!(b.h_tilde.view((0, 6), (3, 6)), ht);
        assert_eq!(b.r_tilde, *relpos().noise_cov());
        assert_eq!(b.p_tilde.view((0, 0), (6, 6)), pr.sensor_cov);
    }

    #[test]
    fn zero_process_noise_leaves_prior_rank() {
        let b = assemble_blocks(&window(4), &sensor(), &targets(2), &prior(2, 0.0), &rrr(), &crtbp()).unwrap();
        assert_eq!(b.p_tilde.rank(1e-30), 18);
    }

    #[test]
    fn h_tilde_matches_finite_differences_of_stacked_map() {
        // Perturb the augmented anchor state and the injected noise, and
        // differentiate the stacked measurements numerically.
        let c = crtbp();
        let w = window(3);
        let t = targets(1);
        let model = relpos();
        let b = assemble_blocks(&w, &sensor(), &t, &prior(1, 1e-11), &model, &c).unwrap();
        let epochs = w.epochs(&c.params);
        let stacked = |x0: &[SpacecraftState; 2], kicks: &[[f64; 12]]| -> DMatrix<f64> {
            let mut states = *x0;
            let mut out = DMatrix::zeros(9, 1);
            for (j, &tj) in epochs.iter().enumerate() {
                if j > 0 {
                    for o in 0..2 {
                        states[o] = c.propagate(&states[o], epochs[j - 1], tj, None).unwrap();
                        for q in 0..6 {
                            states[o].0[q] += kicks[j][6 * o + q];
                        }
                    }
                }
                let y = model.measure(&states[1], &states[0]).unwrap();
                out.view_mut((3 * j, 0), (3, 1)).copy_from(&y);
            }
            out
        };
        let base = [sensor(), t[0]];
        let zero = vec![[0.0; 12]; 3];
        let h = 1e-7;
        for l in 0..3 {
            for q in 0..12 {
                let (mut xp, mut xm) = (base, base);
                let (mut kp, mut km) = (zero.clone(), zero.clone());
                if l == 0 {
                    xp[q / 6].0[q % 6] += h;
                    xm[q / 6].0[q % 6] -= h;
                } else {
                    kp[l][q] += h;
                    km[l][q] -= h;
                }
                let col = (stacked(&xp, &kp) - stacked(&xm, &km)) / (2.0 * h);
                for r in 0..9 {
                    let a = b.h_tilde[(r, 12 * l + q)];
                    let err = (a - col[(r, 0)]).abs() / col[(r, 0)].abs().max(1.0);
                    assert!(err < 1e-6, "H̃[{r},{}]: {a} vs {}", 12 * l + q, col[(r, 0)]);
                }
            }
        }
    }

    #[test]
    fn batch_equals_sequential_innovation_sum() {
        let c = crtbp();
        for (n_t, n_meas, model) in [(1, 5, relpos()), (3, 10, rrr()), (2, 7, relpos())] {
            let w = window(n_meas);
            let t = targets(n_t);
            let pr = prior(n_t, 1e-11);
            let b = assemble_blocks(&w, &sensor(), &t, &pr, &model, &c).unwrap();
            let batch = mutual_information(&b).unwrap();
            let seq = innovation_sum(&w, &sensor(), &t, &pr, &model);
            assert!((batch - seq).abs() / seq.abs() < 1e-8, "{batch} vs {seq}");
        }
    }

    #[test]
    fn extra_epoch_never_decreases_information() {
        let c = crtbp();
        let mut prev = 0.0;
        for n in 1..6 {
            let b = assemble_blocks(&window(n), &sensor(), &targets(2), &prior(2, 1e-11), &rrr(), &c).unwrap();
            let mi = mutual_information(&b).unwrap();
            assert!(mi >= prev);
            prev = mi;
        }
    }

    fn fd_gradient(w: &ObservationWindow, t: &[SpacecraftState], pr: &AugmentedPrior, model: &MeasurementModel) -> Vector6<f64> {
        let c = crtbp();
        let h = 1e-6;
        Vector6::from_fn(|k, _| {
            let mut sp = sensor();
            let mut sm = sensor();
            sp.0[k] += h;
            sm.0[k] -= h;
            let ip = mutual_information(&assemble_blocks(w, &sp, t, pr, model, &c).unwrap()).unwrap();
            let im = mutual_information(&assemble_blocks(w, &sm, t, pr, model, &c).unwrap()).unwrap();
            (ip - im) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_matches_finite_differences_for_both_models() {
        let c = crtbp();
        for (n_t, model) in [(1, relpos()), (3, rrr())] {
            let w = window(6);
            let t = targets(n_t);
            let pr = prior(n_t, 1e-11);
            let lin = mi_linearize(&w, &sensor(), &t, &pr, &model, &c).unwrap();
            let fd = fd_gradient(&w, &t, &pr, &model);
            let err = (lin.gradient - fd).norm() / fd.norm();
            assert!(err < 1e-4, "{:?}: {} vs {}", model.kind(), lin.gradient, fd);
            let b = assemble_blocks(&w, &sensor(), &t, &pr, &model, &c).unwrap();
            let value = mutual_information(&b).unwrap();
            assert!((lin.value - value).abs() < 1e-12 * value);
        }
    }

    #[test]
    fn linear_system_has_zero_gradient() {
        // One relative-position epoch: constant H and Φ = I.
        let c = crtbp();
        let w = ObservationWindow::new(0.5, 0.6, 1.0, 0).unwrap();
        let lin = mi_linearize(&w, &sensor(), &targets(1), &prior(1, 1e-11), &relpos(), &c).unwrap();
        assert!(lin.gradient.norm() == 0.0);
    }

    #[test]
    fn linearization_residual_is_second_order() {
        let c = crtbp();
        let w = window(6);
        let t = targets(1);
        let pr = prior(1, 1e-11);
        let model = relpos();
        let lin = mi_linearize(&w, &sensor(), &t, &pr, &model, &c).unwrap();
        let dir = Vector6::new(0.6, -0.3, 0.2, 0.5, 0.4, -0.3).normalize();
        let residual = |scale: f64| {
            let dx = dir * scale;
            let s = SpacecraftState::from(sensor().0 + dx);
            let exact = mutual_information(&assemble_blocks(&w, &s, &t, &pr, &model, &c).unwrap()).unwrap();
            (lin.approx(&dx) - exact).abs()
        };
        let ratio = residual(1e-4) / residual(5e-5);
        assert!((ratio / 4.0 - 1.0).abs() < 0.5, "ratio {ratio}");
        assert_eq!(lin.approx(&Vector6::zeros()), lin.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn information_is_non_negative(
            rows in 1usize..5, cols in 1usize..5,
            seed in prop::collection::vec(-2.0f64..2.0, 25),
            noise in 0.1f64..5.0) {
            let h = DMatrix::from_fn(rows, cols, |r, c| seed[r * 5 + c]);
            let a = DMatrix::from_fn(cols, cols, |r, c| seed[(r * 3 + c) % 25]);
            let p = &a * a.transpose();
            let blocks = InformationBlocks { h_tilde: h, p_tilde: p, r_tilde: DMatrix::identity(rows, rows) * noise };
            prop_assert!(mutual_information(&blocks).unwrap() >= 0.0);
        }

        #[test]
        fn linearization_is_affine(a in -3.0f64..3.0, d in prop::array::uniform6(-1.0f64..1.0)) {
            let lin = MiLinearization { value: 0.7, gradient: Vector6::new(1.0, -2.0, 0.5, 3.0, 0.1, -0.4) };
            let dx = Vector6::from_column_slice(&d);
            let lhs = lin.approx(&(dx * a)) - lin.value;
            let rhs = a * (lin.approx(&dx) - lin.value);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
