//! Dense primal-dual interior-point method with Nesterov-Todd scaling and a
//! Mehrotra predictor-corrector. Intended for small programs and as an
//! independent check on the sparse backend.
//!
//! Zero-cone rows become equalities `E x = f` with multipliers `y`; the
//! remaining rows are `G x + s = h`, `s ∈ K`, with multipliers `z ∈ K`.

use nalgebra::{DMatrix, DVector};

use super::{Cone, ConicProgram, ConicSolution, ConicSolver, SolveStatus, SolverSettings};
use crate::error::{Error, Result};

/// Newton direction `(Δx, Δy, Δz, Δs)`.
type Direction = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

#[derive(Clone, Debug)]
pub struct DenseIpm {
    settings: SolverSettings,
}

impl DenseIpm {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Nonneg { off: usize, dim: usize },
    Soc { off: usize, dim: usize },
}

/// Per-cone NT scaling: `W = diag(d)` on orthants, `W = β(2wwᵀ − J)` with
/// `wᵀJw = 1` on second-order cones.
enum Scaling {
    Nonneg(DVector<f64>),
    Soc { beta: f64, w: DVector<f64> },
}

struct Cones {
    blocks: Vec<Block>,
    m: usize,
}

impl Cones {
    fn degree(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Nonneg { dim, .. } => *dim,
                Block::Soc { .. } => 1,
            })
            .sum()
    }

    fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.m);
        for b in &self.blocks {
            match *b {
                Block::Nonneg { off, dim } => e.rows_mut(off, dim).fill(1.0),
                Block::Soc { off, .. } => e[off] = 1.0,
            }
        }
        e
    }

    /// Most negative cone "eigenvalue" of `u`.
    fn min_eig(&self, u: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| match *b {
                Block::Nonneg { off, dim } => u.rows(off, dim).min(),
                Block::Soc { off, dim } => u[off] - u.rows(off + 1, dim - 1).norm(),
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn shift_into_interior(&self, u: &mut DVector<f64>) {
        let alpha = -self.min_eig(u);
        if alpha >= 0.0 {
            *u += self.identity() * (1.0 + alpha);
        }
    }

    /// Jordan product `u ∘ v`.
    fn prod(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for b in &self.blocks {
            match *b {
                Block::Nonneg { off, dim } => {
                    for i in off..off + dim {
                        out[i] = u[i] * v[i];
                    }
                }
                Block::Soc { off, dim } => {
                    out[off] = u.rows(off, dim).dot(&v.rows(off, dim));
                    for i in off + 1..off + dim {
                        out[i] = u[off] * v[i] + v[off] * u[i];
                    }
                }
            }
        }
        out
    }

    /// `w` solving `λ ∘ w = v`.
    fn div(&self, lambda: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for b in &self.blocks {
            match *b {
                Block::Nonneg { off, dim } => {
                    for i in off..off + dim {
                        out[i] = v[i] / lambda[i];
                    }
                }
                Block::Soc { off, dim } => {
                    let l0 = lambda[off];
                    let l1 = lambda.rows(off + 1, dim - 1);
                    let v1 = v.rows(off + 1, dim - 1);
                    let det = l0 * l0 - l1.norm_squared();
                    let w0 = (l0 * v[off] - l1.dot(&v1)) / det;
                    out[off] = w0;
                    for i in 1..dim {
                        out[off + i] = (v[off + i] - w0 * lambda[off + i]) / l0;
                    }
                }
            }
        }
        out
    }

    /// Largest `α ≥ 0` keeping `u + α du` in the cone (`∞` if unbounded).
    fn max_step(&self, u: &DVector<f64>, du: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for b in &self.blocks {
            match *b {
                Block::Nonneg { off, dim } => {
                    for i in off..off + dim {
                        if du[i] < 0.0 {
                            alpha = alpha.min(-u[i] / du[i]);
                        }
                    }
                }
                Block::Soc { off, dim } => {
                    let (u0, d0) = (u[off], du[off]);
                    let u1 = u.rows(off + 1, dim - 1);
                    let d1 = du.rows(off + 1, dim - 1);
                    if d0 < 0.0 {
                        alpha = alpha.min(-u0 / d0);
                    }
                    let qa = d0 * d0 - d1.norm_squared();
                    let qb = u0 * d0 - u1.dot(&d1);
                    let qc = u0 * u0 - u1.norm_squared();
                    alpha = alpha.min(smallest_positive_root(qa, qb, qc));
                }
            }
        }
        alpha
    }

    fn scaling(&self, s: &DVector<f64>, z: &DVector<f64>) -> Vec<Scaling> {
        self.blocks
            .iter()
            .map(|b| match *b {
                Block::Nonneg { off, dim } => Scaling::Nonneg(DVector::from_fn(dim, |i, _| {
                    (s[off + i] / z[off + i]).sqrt()
                })),
                Block::Soc { off, dim } => {
                    let sb = s.rows(off, dim).into_owned();
                    let zb = z.rows(off, dim).into_owned();
                    let s_norm = jnorm(&sb);
                    let z_norm = jnorm(&zb);
                    let s_bar = sb / s_norm;
                    let z_bar = zb / z_norm;
                    let gamma = ((1.0 + z_bar.dot(&s_bar)) / 2.0).sqrt();
                    let mut w = s_bar.clone();
                    w[0] += z_bar[0];
                    for i in 1..dim {
                        w[i] -= z_bar[i];
                    }
                    w /= 2.0 * gamma;
                    // Hyperbolic Householder vector of the NT point w̄.
                    let scale = (2.0 * (w[0] + 1.0)).sqrt();
                    w[0] += 1.0;
                    w /= scale;
                    Scaling::Soc {
                        beta: (s_norm / z_norm).sqrt(),
                        w,
                    }
                }
            })
            .collect()
    }

    fn apply(&self, w: &[Scaling], v: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (b, sc) in self.blocks.iter().zip(w) {
            match (*b, sc) {
                (Block::Nonneg { off, dim }, Scaling::Nonneg(d)) => {
                    for i in 0..dim {
                        out[off + i] = if inverse { v[off + i] / d[i] } else { v[off + i] * d[i] };
                    }
                }
                (Block::Soc { off, dim }, Scaling::Soc { beta, w }) => {
                    let vb = v.rows(off, dim);
                    // W v = β(2 w (wᵀv) − J v);  W⁻¹ v = (2 J w (wᵀ J v) − J v) / β.
                    let jv = jmul(&vb.into_owned());
                    let res = if inverse {
                        let jw = jmul(w);
                        (jw * (2.0 * w.dot(&jv)) - jv) / *beta
                    } else {
                        (w * (2.0 * w.dot(&vb)) - jv) * *beta
                    };
                    out.rows_mut(off, dim).copy_from(&res);
                }
                _ => unreachable!("scaling built from the same blocks"),
            }
        }
        out
    }

    /// Dense `W²`.
    fn w_squared(&self, w: &[Scaling]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m, self.m);
        for (b, sc) in self.blocks.iter().zip(w) {
            match (*b, sc) {
                (Block::Nonneg { off, dim }, Scaling::Nonneg(d)) => {
                    for i in 0..dim {
                        out[(off + i, off + i)] = d[i] * d[i];
                    }
                }
                (Block::Soc { off, dim }, Scaling::Soc { beta, w }) => {
                    let mut wm = w * w.transpose() * 2.0;
                    wm[(0, 0)] -= 1.0;
                    for i in 1..dim {
                        wm[(i, i)] += 1.0;
                    }
                    wm *= *beta;
                    out.view_mut((off, off), (dim, dim)).copy_from(&(&wm * &wm));
                }
                _ => unreachable!("scaling built from the same blocks"),
            }
        }
        out
    }
}

fn jmul(v: &DVector<f64>) -> DVector<f64> {
    let mut out = -v;
    out[0] = v[0];
    out
}

fn jnorm(v: &DVector<f64>) -> f64 {
    (v[0] * v[0] - v.rows(1, v.len() - 1).norm_squared()).max(f64::MIN_POSITIVE).sqrt()
}

/// Smallest positive root of `a α² + 2 b α + c` with `c > 0`.
fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    if a == 0.0 {
        return if b < 0.0 { -c / (2.0 * b) } else { f64::INFINITY };
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    // Cancellation-free pair of roots.
    let q = -(b + b.signum() * sq);
    let roots = [q / a, if q != 0.0 { c / q } else { f64::INFINITY }];
    roots
        .into_iter()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min)
}

struct Kkt {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    exact: DMatrix<f64>,
}

impl Kkt {
    fn new(e: &DMatrix<f64>, g: &DMatrix<f64>, w2: &DMatrix<f64>) -> Self {
        const REG: f64 = 1e-11;
        let (n, p, m) = (e.ncols(), e.nrows(), g.nrows());
        let dim = n + p + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, n), (n, p)).copy_from(&e.transpose());
        k.view_mut((0, n + p), (n, m)).copy_from(&g.transpose());
        k.view_mut((n, 0), (p, n)).copy_from(e);
        k.view_mut((n + p, 0), (m, n)).copy_from(g);
        k.view_mut((n + p, n + p), (m, m)).copy_from(&(-w2));
        let mut reg = k.clone();
        for i in 0..dim {
            reg[(i, i)] += if i < n { REG } else { -REG };
        }
        Self {
            lu: reg.lu(),
            exact: k,
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = self.lu.solve(rhs)?;
        for _ in 0..3 {
            let r = rhs - &self.exact * &x;
            x += self.lu.solve(&r)?;
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

impl ConicSolver for DenseIpm {
    fn name(&self) -> &'static str {
        "dense-ipm"
    }

    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution> {
        program.validate()?;
        let n = program.n_vars();
        let dense = program.a.to_dense();

        let mut eq_rows = Vec::new();
        let mut ineq_rows = Vec::new();
        let mut blocks = Vec::new();
        let mut row = 0;
        for cone in &program.cones {
            let d = cone.dim();
            match cone {
                Cone::Zero(_) => eq_rows.extend(row..row + d),
                Cone::Nonneg(_) => {
                    blocks.push(Block::Nonneg { off: ineq_rows.len(), dim: d });
                    ineq_rows.extend(row..row + d);
                }
                Cone::Soc(_) => {
                    blocks.push(Block::Soc { off: ineq_rows.len(), dim: d });
                    ineq_rows.extend(row..row + d);
                }
            }
            row += d;
        }
        let (p, m) = (eq_rows.len(), ineq_rows.len());
        if m == 0 {
            return Err(Error::Solver("dense IPM needs at least one inequality cone".into()));
        }
        let cones = Cones { blocks, m };
        let e = DMatrix::from_fn(p, n, |r, c| dense[(eq_rows[r], c)]);
        let g = DMatrix::from_fn(m, n, |r, c| dense[(ineq_rows[r], c)]);
        let f = DVector::from_fn(p, |r, _| program.b[eq_rows[r]]);
        let h = DVector::from_fn(m, |r, _| program.b[ineq_rows[r]]);
        let c = DVector::from_column_slice(&program.c);

        let split = |v: DVector<f64>| {
            (
                v.rows(0, n).into_owned(),
                v.rows(n, p).into_owned(),
                v.rows(n + p, m).into_owned(),
            )
        };
        let stack = |a: &DVector<f64>, b: &DVector<f64>, d: &DVector<f64>| {
            let mut v = DVector::zeros(n + p + m);
            v.rows_mut(0, n).copy_from(a);
            v.rows_mut(n, p).copy_from(b);
            v.rows_mut(n + p, m).copy_from(d);
            v
        };
        let failure = |iterations| ConicSolution {
            x: vec![f64::NAN; n],
            s: vec![f64::NAN; program.n_rows()],
            z: vec![f64::NAN; program.n_rows()],
            status: SolveStatus::NumericalFailure,
            objective: f64::NAN,
            iterations,
        };

        // Least-norm starting points, shifted into the cone interior.
        let kkt0 = Kkt::new(&e, &g, &DMatrix::identity(m, m));
        let Some(primal) = kkt0.solve(&stack(&DVector::zeros(n), &f, &h)) else {
            return Ok(failure(0));
        };
        let Some(dual) = kkt0.solve(&stack(&-&c, &DVector::zeros(p), &DVector::zeros(m))) else {
            return Ok(failure(0));
        };
        let (mut x, _, zp) = split(primal);
        let mut s = -zp;
        let (_, mut y, mut z) = split(dual);
        cones.shift_into_interior(&mut s);
        cones.shift_into_interior(&mut z);

        let tol = self.settings.tol;
        let res_scale_p = 1f64.max(f.norm().max(h.norm()));
        let res_scale_d = 1f64.max(c.norm());
        let degree = cones.degree() as f64;
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;

        for it in 0..self.settings.max_iter {
            iterations = it;
            let r_x = e.transpose() * &y + g.transpose() * &z + &c;
            let r_y = &e * &x - &f;
            let r_z = &g * &x + &s - &h;
            let gap = s.dot(&z);
            let pcost = c.dot(&x);
            let pres = r_y.norm().max(r_z.norm()) / res_scale_p;
            let dres = r_x.norm() / res_scale_d;
            if pres <= tol && dres <= tol && (gap <= tol || gap <= tol * pcost.abs()) {
                status = SolveStatus::Optimal;
                break;
            }

            let w = cones.scaling(&s, &z);
            let lambda = cones.apply(&w, &z, false);
            let kkt = Kkt::new(&e, &g, &cones.w_squared(&w));
            let newton = |bs: &DVector<f64>| -> Option<Direction> {
                let lb = cones.div(&lambda, bs);
                let wlb = cones.apply(&w, &lb, false);
                let sol = kkt.solve(&stack(&-&r_x, &-&r_y, &(-&r_z - &wlb)))?;
                let (dx, dy, dz) = split(sol);
                let ds = cones.apply(&w, &(lb - cones.apply(&w, &dz, false)), false);
                Some((dx, dy, dz, ds))
            };

            let ll = cones.prod(&lambda, &lambda);
            let Some((_, _, dz_a, ds_a)) = newton(&-&ll) else {
                return Ok(failure(it));
            };
            let alpha_a = 1f64.min(cones.max_step(&s, &ds_a)).min(cones.max_step(&z, &dz_a));
            let sigma = (1.0 - alpha_a).clamp(0.0, 1.0).powi(3);
            let mu = gap / degree;
            let corr = cones.prod(&cones.apply(&w, &ds_a, true), &cones.apply(&w, &dz_a, false));
            let bs = -ll - corr + cones.identity() * (sigma * mu);
            let Some((dx, dy, dz, ds)) = newton(&bs) else {
                return Ok(failure(it));
            };
            let alpha = 1f64.min(0.99 * cones.max_step(&s, &ds).min(cones.max_step(&z, &dz)));
            x += dx * alpha;
            y += dy * alpha;
            z += dz * alpha;
            s += ds * alpha;
            if !(x.iter().chain(s.iter()).chain(z.iter()).all(|v| v.is_finite())) {
                return Ok(failure(it));
            }
        }

        let mut s_full = vec![0.0; program.n_rows()];
        let mut z_full = vec![0.0; program.n_rows()];
        for (k, &r) in ineq_rows.iter().enumerate() {
            s_full[r] = s[k];
            z_full[r] = z[k];
        }
        for (k, &r) in eq_rows.iter().enumerate() {
            z_full[r] = y[k];
        }
        let x: Vec<f64> = x.iter().copied().collect();
        Ok(ConicSolution {
            objective: program.objective(&x),
            x,
            s: s_full,
            z: z_full,
            status,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cones() -> Cones {
        Cones {
            blocks: vec![Block::Nonneg { off: 0, dim: 2 }, Block::Soc { off: 2, dim: 3 }],
            m: 5,
        }
    }

    #[test]
    fn nt_scaling_maps_z_and_s_to_the_same_point() {
        let k = cones();
        let s = DVector::from_vec(vec![0.5, 2.0, 3.0, 1.0, -1.5]);
        let z = DVector::from_vec(vec![1.5, 0.2, 2.0, -0.3, 0.8]);
        let w = k.scaling(&s, &z);
        let wz = k.apply(&w, &z, false);
        let winv_s = k.apply(&w, &s, true);
        assert!((wz - winv_s).norm() < 1e-12);
        let v = DVector::from_vec(vec![0.3, -0.1, 0.7, 0.2, 0.4]);
        assert!((k.apply(&w, &k.apply(&w, &v, false), true) - &v).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn jordan_division_inverts_product(
            l in prop::array::uniform5(0.1f64..2.0), v in prop::array::uniform5(-1.0f64..1.0)) {
            let k = cones();
            let mut lambda = DVector::from_column_slice(&l);
            lambda[2] += 2.0 * lambda.rows(3, 2).norm();
            let v = DVector::from_column_slice(&v);
            let w = k.div(&lambda, &v);
            prop_assert!((k.prod(&lambda, &w) - v).norm() < 1e-10);
        }

        #[test]
        fn max_step_lands_on_the_boundary(
            u in prop::array::uniform3(-1.0f64..1.0), d in prop::array::uniform3(-1.0f64..1.0)) {
            let k = Cones { blocks: vec![Block::Soc { off: 0, dim: 3 }], m: 3 };
            let mut u = DVector::from_column_slice(&u);
            u[0] = u.rows(1, 2).norm() + 0.5;
            let d = DVector::from_column_slice(&d);
            let a = k.max_step(&u, &d);
            if a.is_finite() {
                let p = &u + &d * a;
                prop_assert!((p[0] - p.rows(1, 2).norm()).abs() < 1e-9 * (1.0 + a));
                prop_assert!(p[0] >= -1e-12);
            }
        }
    }
}
