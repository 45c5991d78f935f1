//! Adaptive Dormand-Prince 8(5,3) integrator operating on flat `f64` slices.
//!
//! Step-size control follows Hairer, Nørsett & Wanner (DOP853): the error
//! estimate blends the embedded 5th- and 3rd-order solutions and the step is
//! adapted with a classic (beta = 0) controller. No dense output is produced;
//! callers that need values at interior epochs integrate piecewise.

use crate::error::{Error, Result};

/// Local error tolerances and step budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rel: 1e-12,
            abs: 1e-12,
            max_steps: 500_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const STAGES: usize = 12;

const C: [f64; STAGES] = [
    0.0,
    0.526001519587677318785587544488e-01,
    0.789002279381515978178381316732e-01,
    0.118350341907227396726757197510e+00,
    0.281649658092772603273242802490e+00,
    0.333333333333333333333333333333e+00,
    0.25e+00,
    0.307692307692307692307692307692e+00,
    0.651282051282051282051282051282e+00,
    0.6e+00,
    0.857142857142857142857142857142e+00,
    1.0,
];

#[rustfmt::skip]
const A: [[f64; STAGES]; STAGES] = [
    [0.0; STAGES],
    [5.26001519587677318785587544488e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.97250569845378994544595329183e-2, 5.91751709536136983633785987549e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.95875854768068491816892993775e-2, 0.0, 8.87627564304205475450678981324e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.41365134159266685502369798665e-1, 0.0, -8.84549479328286085344864962717e-1, 9.24834003261792003115737966543e-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.7037037037037037037037037037e-2, 0.0, 0.0, 1.70828608729473871279604482173e-1, 1.25467687566822425016691814123e-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.7109375e-2, 0.0, 0.0, 1.70252211019544039314978060272e-1, 6.02165389804559606850219397283e-2, -1.7578125e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.70920001185047927108779319836e-2, 0.0, 0.0, 1.70383925712239993810214054705e-1, 1.07262030446373284651809199168e-1, -1.53194377486244017527936158236e-2, 8.27378916381402288758473766002e-3, 0.0, 0.0, 0.0, 0.0, 0.0],
    [6.24110958716075717114429577812e-1, 0.0, 0.0, -3.36089262944694129406857109825e0, -8.68219346841726006818189891453e-1, 2.75920996994467083049415600797e1, 2.01540675504778934086186788979e1, -4.34898841810699588477366255144e1, 0.0, 0.0, 0.0, 0.0],
    [4.77662536438264365890433908527e-1, 0.0, 0.0, -2.48811461997166764192642586468e0, -5.90290826836842996371446475743e-1, 2.12300514481811942347288949897e1, 1.52792336328824235832596922938e1, -3.32882109689848629194453265587e1, -2.03312017085086261358222928593e-2, 0.0, 0.0, 0.0],
    [-9.3714243008598732571704021658e-1, 0.0, 0.0, 5.18637242884406370830023853209e0, 1.09143734899672957818500254654e0, -8.14978701074692612513997267357e0, -1.85200656599969598641566180701e1, 2.27394870993505042818970056734e1, 2.49360555267965238987089396762e0, -3.0467644718982195003823669022e0, 0.0, 0.0],
    [2.27331014751653820792359768449e0, 0.0, 0.0, -1.05344954667372501984066689879e1, -2.00087205822486249909675718444e0, -1.79589318631187989172765950534e1, 2.79488845294199600508499808837e1, -2.85899827713502369474065508674e0, -8.87285693353062954433549289258e0, 1.23605671757943030647266201528e1, 6.43392746015763530355970484046e-1, 0.0],
];

#[rustfmt::skip]
const B: [f64; STAGES] = [
    5.42937341165687622380535766363e-2, 0.0, 0.0, 0.0, 0.0,
    4.45031289275240888144113950566e0,
    1.89151789931450038304281599044e0,
    -5.8012039600105847814672114227e0,
    3.1116436695781989440891606237e-1,
    -1.52160949662516078556178806805e-1,
    2.01365400804030348374776537501e-1,
    4.47106157277725905176885569043e-2,
];

// Embedded 3rd-order weights on stages 1, 9 and 12.
const BHH: [f64; 3] = [
    0.244094488188976377952755905512e+00,
    0.733846688281611857341361741547e+00,
    0.220588235294117647058823529412e-01,
];

#[rustfmt::skip]
const E5: [f64; STAGES] = [
    0.1312004499419488073250102996e-01, 0.0, 0.0, 0.0, 0.0,
    -0.1225156446376204440720569753e+01,
    -0.4957589496572501915214079952e+00,
    0.1664377182454986536961530415e+01,
    -0.3503288487499736816886487290e+00,
    0.3341791187130174790297318841e+00,
    0.8192320648511571246570742613e-01,
    -0.2235530786388629525884427845e-01,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.333;
const FAC_MAX: f64 = 6.0;

/// Integrates `y' = rhs(t, y)` from `t0` to `t1` in place. `t1 < t0` integrates
/// backward.
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y: &mut [f64],
    tol: &Tolerances,
) -> Result<IntegrationStats>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let mut stats = IntegrationStats::default();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(stats);
    }
    if !span.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: t0,
            reason: "non-finite initial condition or interval".into(),
        });
    }
    let n = y.len();
    let dir = span.signum();
    let h_max = span.abs();

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; STAGES];
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];

    rhs(t0, y, &mut k[0])?;
    stats.evaluations += 1;

    let mut t = t0;
    let mut h = initial_step(&mut rhs, t0, y, &k[0], dir, h_max, tol, &mut y_stage, &mut f_new)?;
    stats.evaluations += 1;

    let mut last_rejected = false;
    let mut last = false;

    while !last {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("step budget of {} exhausted", tol.max_steps),
            });
        }
        if 0.1 * h.abs() <= f64::EPSILON * t.abs() {
            return Err(Error::Integration {
                t,
                reason: "step size underflow".into(),
            });
        }
        if (t + 1.01 * h - t1) * dir > 0.0 {
            h = t1 - t;
            last = true;
        }

        for s in 1..STAGES {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * k[j][i];
                }
                y_stage[i] = y[i] + h * acc;
            }
            rhs(t + C[s] * h, &y_stage, &mut k[s])?;
        }
        stats.evaluations += STAGES - 1;

        let mut err5 = 0.0;
        let mut err3 = 0.0;
        for i in 0..n {
            let mut incr = 0.0;
            let mut e5 = 0.0;
            for s in 0..STAGES {
                incr += B[s] * k[s][i];
                e5 += E5[s] * k[s][i];
            }
            y_new[i] = y[i] + h * incr;
            let e3 = incr - BHH[0] * k[0][i] - BHH[1] * k[8][i] - BHH[2] * k[11][i];
            let sk = tol.abs + tol.rel * y[i].abs().max(y_new[i].abs());
            err5 += (e5 / sk) * (e5 / sk);
            err3 += (e3 / sk) * (e3 / sk);
        }
        if !err5.is_finite() || !err3.is_finite() {
            // Treat a non-finite trial step like a large error so the step shrinks.
            err5 = f64::MAX;
            err3 = 0.0;
        }
        let mut deno = err5 + 0.01 * err3;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let err = if err5 == f64::MAX {
            f64::MAX
        } else {
            h.abs() * err5 * (1.0 / (deno * n as f64)).sqrt()
        };

        let fac11 = err.powf(1.0 / 8.0);
        let fac = (1.0 / FAC_MAX).max((1.0 / FAC_MIN).min(fac11 / SAFETY));
        let mut h_new = h / fac;

        if err <= 1.0 {
            stats.accepted += 1;
            rhs(t + h, &y_new, &mut f_new)?;
            stats.evaluations += 1;
            t += h;
            y.copy_from_slice(&y_new);
            k[0].copy_from_slice(&f_new);
            if h_new.abs() > h_max {
                h_new = dir * h_max;
            }
            if last_rejected {
                h_new = dir * h_new.abs().min(h.abs());
            }
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h_new = h / (1.0 / FAC_MIN).min(fac11 / SAFETY);
            last_rejected = true;
            last = false;
        }
        h = h_new;
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    rhs: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    h_max: f64,
    tol: &Tolerances,
    y1: &mut [f64],
    f1: &mut [f64],
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let mut dnf = 0.0;
    let mut dny = 0.0;
    for (yi, fi) in y0.iter().zip(f0) {
        let sk = tol.abs + tol.rel * yi.abs();
        dnf += (fi / sk).powi(2);
        dny += (yi / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        (dny / dnf).sqrt() * 0.01
    };
    h = h.min(h_max) * dir;
    for i in 0..y0.len() {
        y1[i] = y0[i] + h * f0[i];
    }
    rhs(t0 + h, y1, f1)?;
    let mut der2 = 0.0;
    for i in 0..y0.len() {
        let sk = tol.abs + tol.rel * y0[i].abs();
        der2 += ((f1[i] - f0[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h.abs();
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (1e-6f64).max(h.abs() * 1e-3)
    } else {
        (0.01 / der12).powf(1.0 / 8.0)
    };
    Ok(dir * (100.0 * h.abs()).min(h1).min(h_max))
}
