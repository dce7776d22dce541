//! Small dense semidefinite programs and the maximum-privacy LMIs.
//!
//! Problems are stated over symmetric matrix variables `X_k`:
//!
//! ```text
//! maximize   Σ_k ⟨C_k, X_k⟩
//! subject to Σ_k ⟨A_k, X_k⟩ = b          (equalities)
//!            Σ_k ⟨A_k, X_k⟩ ≤ b          (scalar inequalities)
//!            F0 + Σ_t w_t M_t X_{k_t} M_tᵀ ⪰ 0   (LMIs)
//!            X_k ⪰ 0                     (unless declared free)
//! ```
//!
//! LMI terms are congruences, which covers every formulation here and keeps
//! the Schur complement cheap: each entry needs only `MᵀWM′`.
//!
//! The solver is a primal-dual infeasible interior point method with
//! Nesterov–Todd scaling and Mehrotra's predictor-corrector.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use nalgebra::Cholesky;

use crate::crlb::{self, PriorCase};
use crate::linalg::{self, Mat, Tolerance, Vector};
use crate::model::SystemModel;
use crate::sanitize::Sanitization;
use crate::{Error, Result};

/// `(block, coefficient)` pairs of a linear functional `Σ ⟨A_k, X_k⟩`.
pub type LinearTerms = Vec<(usize, Mat)>;

#[derive(Debug, Clone, PartialEq)]
pub struct LmiTerm {
    pub block: usize,
    pub weight: f64,
    pub map: Mat,
}

/// `F0 + Σ_t w_t M_t X_{k_t} M_tᵀ ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lmi {
    pub constant: Mat,
    pub terms: Vec<LmiTerm>,
}

impl Lmi {
    pub fn term(&mut self, block: usize, weight: f64, map: Mat) -> &mut Self {
        self.terms.push(LmiTerm { block, weight, map });
        self
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdpProblem {
    dims: Vec<usize>,
    free: Vec<bool>,
    objective: LinearTerms,
    equalities: Vec<(LinearTerms, f64)>,
    inequalities: Vec<(LinearTerms, f64)>,
    lmis: Vec<Lmi>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// A PSD variable block; returns its index.
    pub fn add_block(&mut self, dim: usize) -> usize {
        self.dims.push(dim);
        self.free.push(false);
        self.dims.len() - 1
    }

    /// A symmetric variable block without a sign constraint.
    pub fn add_free_block(&mut self, dim: usize) -> usize {
        let k = self.add_block(dim);
        self.free[k] = true;
        k
    }

    /// Adds `⟨C, X_block⟩` to the maximized objective.
    pub fn add_objective(&mut self, block: usize, c: Mat) {
        self.objective.push((block, c));
    }

    pub fn add_equality(&mut self, terms: LinearTerms, rhs: f64) {
        self.equalities.push((terms, rhs));
    }

    pub fn add_inequality_le(&mut self, terms: LinearTerms, rhs: f64) {
        self.inequalities.push((terms, rhs));
    }

    pub fn add_lmi(&mut self, constant: Mat) -> &mut Lmi {
        self.lmis.push(Lmi { constant, terms: Vec::new() });
        self.lmis.last_mut().expect("just pushed")
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn lmis(&self) -> &[Lmi] {
        &self.lmis
    }

    pub fn validate(&self) -> Result<()> {
        let check_terms = |terms: &LinearTerms, what: &str| -> Result<()> {
            for (k, a) in terms {
                let d = *self.dims.get(*k).ok_or_else(|| Error::InvalidInput(format!("{what}: unknown block {k}")))?;
                if a.shape() != (d, d) {
                    return Err(Error::DimensionMismatch { field: what.into(), detail: format!("block {k} is {d}×{d}, coefficient is {:?}", a.shape()) });
                }
                linalg::check_finite(a, what)?;
                linalg::check_symmetric(a, what)?;
            }
            Ok(())
        };
        check_terms(&self.objective, "objective")?;
        for (t, b) in self.equalities.iter().chain(&self.inequalities) {
            check_terms(t, "linear constraint")?;
            if !b.is_finite() {
                return Err(Error::InvalidInput("non-finite right-hand side".into()));
            }
        }
        for lmi in &self.lmis {
            let m = lmi.dim();
            if lmi.constant.ncols() != m {
                return Err(Error::DimensionMismatch { field: "lmi constant".into(), detail: "must be square".into() });
            }
            linalg::check_finite(&lmi.constant, "lmi constant")?;
            linalg::check_symmetric(&lmi.constant, "lmi constant")?;
            for t in &lmi.terms {
                let d = *self.dims.get(t.block).ok_or_else(|| Error::InvalidInput(format!("lmi: unknown block {}", t.block)))?;
                if t.map.shape() != (m, d) || !t.weight.is_finite() {
                    return Err(Error::DimensionMismatch { field: "lmi term".into(), detail: format!("map must be {m}×{d}") });
                }
                linalg::check_finite(&t.map, "lmi map")?;
            }
        }
        Ok(())
    }

    /// Text dump for cross-checking with external solvers: `var` lines with
    /// block dimensions, the objective, one line per linear constraint, and
    /// one `lmi` line per LMI with `F0` and then `F_i` for every scalar
    /// variable (upper-triangle order within each block), row-major.
    pub fn dump(&self) -> String {
        let layout = Layout::new(&self.dims);
        let mut out = String::new();
        for (k, d) in self.dims.iter().enumerate() {
            let _ = writeln!(out, "var {k} {d} {}", if self.free[k] { "free" } else { "psd" });
        }
        let vec_line = |v: &Vector| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "max {}", vec_line(&layout.functional(&self.objective)));
        for (t, b) in &self.equalities {
            let _ = writeln!(out, "eq {b:e} {}", vec_line(&layout.functional(t)));
        }
        for (t, b) in &self.inequalities {
            let _ = writeln!(out, "le {b:e} {}", vec_line(&layout.functional(t)));
        }
        let mat = |m: &Mat| m.transpose().iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for lmi in &self.lmis {
            let _ = write!(out, "lmi {} {}", lmi.dim(), mat(&lmi.constant));
            for i in 0..layout.n {
                let mut e = Vector::zeros(layout.n);
                e[i] = 1.0;
                let _ = write!(out, " | {}", mat(&lmi_apply(&layout, lmi, &e)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub blocks: Vec<Mat>,
    pub objective_value: f64,
    pub status: SdpStatus,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting values of the blocks; used only when strictly feasible.
    pub initial: Option<Vec<Mat>>,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, initial: None }
    }
}

// ---- variable layout ------------------------------------------------------

/// Scalar variables: the upper triangle `(p ≤ q)` of each block, `X_pq = X_qp = y`.
struct Layout {
    offsets: Vec<usize>,
    pairs: Vec<Vec<(usize, usize)>>,
    n: usize,
}

impl Layout {
    fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::new();
        let mut pairs = Vec::new();
        let mut n = 0;
        for &d in dims {
            offsets.push(n);
            let mut p = Vec::new();
            for q in 0..d {
                for r in 0..=q {
                    p.push((r, q));
                }
            }
            n += p.len();
            pairs.push(p);
        }
        Self { offsets, pairs, n }
    }

    fn smat(&self, y: &Vector, k: usize, d: usize) -> Mat {
        let mut x = Mat::zeros(d, d);
        for (j, &(p, q)) in self.pairs[k].iter().enumerate() {
            let v = y[self.offsets[k] + j];
            x[(p, q)] = v;
            x[(q, p)] = v;
        }
        x
    }

    fn svec_into(&self, x: &Mat, k: usize, y: &mut Vector) {
        for (j, &(p, q)) in self.pairs[k].iter().enumerate() {
            y[self.offsets[k] + j] = 0.5 * (x[(p, q)] + x[(q, p)]);
        }
    }

    /// Coefficient vector `a` with `aᵀy = Σ ⟨A_k, X_k⟩`.
    fn functional(&self, terms: &LinearTerms) -> Vector {
        let mut a = Vector::zeros(self.n);
        for (k, c) in terms {
            for (j, &(p, q)) in self.pairs[*k].iter().enumerate() {
                a[self.offsets[*k] + j] += if p == q { c[(p, p)] } else { c[(p, q)] + c[(q, p)] };
            }
        }
        a
    }
}

fn lmi_apply(layout: &Layout, lmi: &Lmi, y: &Vector) -> Mat {
    let m = lmi.dim();
    let mut out = Mat::zeros(m, m);
    for t in &lmi.terms {
        let d = t.map.ncols();
        let yk = layout.smat(y, t.block, d);
        out += (&t.map * yk * t.map.transpose()) * t.weight;
    }
    linalg::symmetrize(&out)
}

// ---- conic form -----------------------------------------------------------

/// `S = F0 + F(y) ⪰ 0`.
struct MatCone {
    f0: Mat,
    terms: Vec<LmiTerm>,
}

/// `s = c + aᵀy ≥ 0`.
struct ScalarCone {
    c: f64,
    a: Vector,
}

struct Conic {
    layout: Layout,
    dims: Vec<usize>,
    b: Vector,
    e: Mat,
    f: Vector,
    mats: Vec<MatCone>,
    scalars: Vec<ScalarCone>,
    obj_scale: f64,
}

impl Conic {
    fn build(p: &SdpProblem) -> Self {
        let layout = Layout::new(&p.dims);
        let mut b = layout.functional(&p.objective);
        let obj_scale = b.amax().max(1.0);
        b /= obj_scale;
        let mut e = Mat::zeros(p.equalities.len(), layout.n);
        let mut f = Vector::zeros(p.equalities.len());
        for (r, (t, rhs)) in p.equalities.iter().enumerate() {
            let a = layout.functional(t);
            let s = a.norm().max(f64::MIN_POSITIVE);
            e.row_mut(r).copy_from(&(a / s).transpose());
            f[r] = rhs / s;
        }
        let mut scalars = Vec::new();
        for (t, rhs) in &p.inequalities {
            let a = layout.functional(t);
            let s = a.norm().max(rhs.abs()).max(f64::MIN_POSITIVE);
            scalars.push(ScalarCone { c: rhs / s, a: -a / s });
        }
        let mut mats = Vec::new();
        for (k, &d) in p.dims.iter().enumerate() {
            if !p.free[k] && d > 0 {
                mats.push(MatCone { f0: Mat::zeros(d, d), terms: vec![LmiTerm { block: k, weight: 1.0, map: Mat::identity(d, d) }] });
            }
        }
        for lmi in &p.lmis {
            if lmi.dim() == 0 {
                continue;
            }
            let mut scale = lmi.constant.norm();
            for t in &lmi.terms {
                scale = scale.max(t.weight.abs() * t.map.norm_squared());
            }
            let s = if scale > 0.0 { 1.0 / scale } else { 1.0 };
            let terms = lmi.terms.iter().filter(|t| p.dims[t.block] > 0).map(|t| LmiTerm { block: t.block, weight: t.weight * s, map: t.map.clone() }).collect();
            mats.push(MatCone { f0: linalg::symmetrize(&lmi.constant) * s, terms });
        }
        Conic { layout, dims: p.dims.clone(), b, e, f, mats, scalars, obj_scale }
    }

    fn nu(&self) -> f64 {
        (self.mats.iter().map(|c| c.f0.nrows()).sum::<usize>() + self.scalars.len()) as f64
    }

    fn apply_mat(&self, c: &MatCone, y: &Vector) -> Mat {
        let m = c.f0.nrows();
        let mut out = Mat::zeros(m, m);
        for t in &c.terms {
            let yk = self.layout.smat(y, t.block, self.dims[t.block]);
            out += (&t.map * yk * t.map.transpose()) * t.weight;
        }
        linalg::symmetrize(&out)
    }

    fn adjoint(&self, xm: &[Mat], xs: &[f64]) -> Vector {
        let mut g = Vector::zeros(self.layout.n);
        for (c, x) in self.mats.iter().zip(xm) {
            for t in &c.terms {
                let tm = t.map.transpose() * x * &t.map;
                let off = self.layout.offsets[t.block];
                for (j, &(p, q)) in self.layout.pairs[t.block].iter().enumerate() {
                    g[off + j] += t.weight * if p == q { tm[(p, p)] } else { tm[(p, q)] + tm[(q, p)] };
                }
            }
        }
        for (c, &x) in self.scalars.iter().zip(xs) {
            g.axpy(x, &c.a, 1.0);
        }
        g
    }

    /// `M_ii′ = Σ_j ⟨F_ij, W_j F_i′j W_j⟩`.
    fn schur(&self, wm: &[Mat], ws: &[f64]) -> Mat {
        let n = self.layout.n;
        let mut m = Mat::zeros(n, n);
        for (c, w) in self.mats.iter().zip(wm) {
            let wmaps: Vec<Mat> = c.terms.iter().map(|t| w * &t.map).collect();
            for t in &c.terms {
                for (ui, u) in c.terms.iter().enumerate() {
                    let k = t.map.transpose() * &wmaps[ui];
                    let ww = t.weight * u.weight;
                    let (ot, ou) = (self.layout.offsets[t.block], self.layout.offsets[u.block]);
                    for (i, &(p, q)) in self.layout.pairs[t.block].iter().enumerate() {
                        for (j, &(r, s)) in self.layout.pairs[u.block].iter().enumerate() {
                            let mut v = k[(q, r)] * k[(p, s)];
                            if r != s {
                                v += k[(q, s)] * k[(p, r)];
                            }
                            if p != q {
                                v += k[(p, r)] * k[(q, s)];
                                if r != s {
                                    v += k[(p, s)] * k[(q, r)];
                                }
                            }
                            m[(ot + i, ou + j)] += ww * v;
                        }
                    }
                }
            }
        }
        for (c, &w) in self.scalars.iter().zip(ws) {
            m.ger(w, &c.a, &c.a, 1.0);
        }
        m
    }
}

// ---- scaling and steps ----------------------------------------------------

fn chol_lower(a: &Mat) -> Mat {
    let a = linalg::symmetrize(a);
    if let Some(c) = Cholesky::new(a.clone()) {
        return c.l();
    }
    let shift = 1e-14 * a.norm().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    let mut k = 1.0;
    loop {
        if let Some(c) = Cholesky::new(&a + Mat::identity(n, n) * (shift * k)) {
            return c.l();
        }
        k *= 10.0;
    }
}

/// NT scaling `W = GGᵀ` with `W S W = X` and `G⁻¹XG⁻ᵀ = GᵀSG = diag(d)`.
struct Nt {
    g: Mat,
    g_inv: Mat,
    d: Vector,
    w: Mat,
}

fn nt_scaling(x: &Mat, s: &Mat) -> Nt {
    let lx = chol_lower(x);
    let ls = chol_lower(s);
    let svd = (ls.transpose() * &lx).svd(true, true);
    let v = svd.v_t.expect("requested").transpose();
    let d = svd.singular_values.map(|v| v.max(f64::MIN_POSITIVE));
    let dm12 = Mat::from_diagonal(&d.map(|v| 1.0 / libm::sqrt(v)));
    let dp12 = Mat::from_diagonal(&d.map(libm::sqrt));
    let g = &lx * &v * dm12;
    let lx_inv = lx.clone().solve_lower_triangular(&Mat::identity(x.nrows(), x.nrows())).unwrap_or_else(|| linalg::psd_pinv(&lx, 0.0));
    let g_inv = dp12 * v.transpose() * lx_inv;
    let w = linalg::symmetrize(&(&g * g.transpose()));
    Nt { g, g_inv, d, w }
}

/// Largest `α ≤ 1/τ`-free step with `X + αΔX ⪰ 0` (may be `∞`).
fn max_step(x: &Mat, dx: &Mat) -> f64 {
    let l = chol_lower(x);
    let n = x.nrows();
    let li = l.solve_lower_triangular(&Mat::identity(n, n)).unwrap_or_else(|| Mat::identity(n, n));
    let t = linalg::symmetrize(&(&li * dx * li.transpose()));
    let lmin = linalg::lambda_min(&t);
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn max_step_scalar(x: f64, dx: f64) -> f64 {
    if dx >= 0.0 {
        f64::INFINITY
    } else {
        -x / dx
    }
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    a.dot(b)
}

struct Iterate {
    y: Vector,
    lam: Vector,
    sm: Vec<Mat>,
    xm: Vec<Mat>,
    ss: Vec<f64>,
    xs: Vec<f64>,
}

struct Direction {
    dy: Vector,
    dlam: Vector,
    dsm: Vec<Mat>,
    dxm: Vec<Mat>,
    dss: Vec<f64>,
    dxs: Vec<f64>,
}

/// Iterations without a better iterate after which the run stops.
const STALL_ITERS: usize = 10;

pub fn solve_sdp(p: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    p.validate()?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidInput("tol must be positive and max_iter at least 1".into()));
    }
    let cp = Conic::build(p);
    let n = cp.layout.n;
    let neq = cp.e.nrows();
    let nu = cp.nu();
    let b_norm = cp.b.norm();
    let f0_norm = cp.mats.iter().map(|c| c.f0.norm()).sum::<f64>() + cp.scalars.iter().map(|c| c.c.abs()).sum::<f64>() + cp.f.norm();

    let mut it = start(&cp, p, opts)?;
    let mut best: Option<(f64, SdpSolution)> = None;
    let mut best_iter = 0;

    for iter in 0..opts.max_iter {
        // residuals
        let fm: Vec<Mat> = cp.mats.iter().map(|c| &c.f0 + cp.apply_mat(c, &it.y)).collect();
        let fs: Vec<f64> = cp.scalars.iter().map(|c| c.c + c.a.dot(&it.y)).collect();
        let rdm: Vec<Mat> = fm.iter().zip(&it.sm).map(|(f, s)| f - s).collect();
        let rds: Vec<f64> = fs.iter().zip(&it.ss).map(|(f, s)| f - s).collect();
        let re = &cp.f - &cp.e * &it.y;
        let rp = &cp.b + cp.adjoint(&it.xm, &it.xs) - cp.e.transpose() * &it.lam;
        let comp: f64 = it.sm.iter().zip(&it.xm).map(|(s, x)| dot(s, x)).sum::<f64>() + it.ss.iter().zip(&it.xs).map(|(s, x)| s * x).sum::<f64>();
        let mu = comp / nu.max(1.0);
        let pobj = cp.b.dot(&it.y);
        let dobj = cp.mats.iter().zip(&it.xm).map(|(c, x)| dot(&c.f0, x)).sum::<f64>() + cp.scalars.iter().zip(&it.xs).map(|(c, x)| c.c * x).sum::<f64>() + cp.f.dot(&it.lam);

        let primal = (rdm.iter().map(|r| r.norm()).sum::<f64>() + rds.iter().map(|r| r.abs()).sum::<f64>() + re.norm()) / (1.0 + f0_norm);
        let dual = rp.norm() / (1.0 + b_norm);
        // complementarity, not |dobj − pobj|: the latter carries residual × ‖y‖
        let gap = comp.abs() / (1.0 + pobj.abs() + dobj.abs());
        let kkt = KktResiduals { primal, dual, gap };
        let score = primal.max(dual).max(gap);
        let sol = |status| SdpSolution { blocks: blocks_of(&cp, &it.y), objective_value: pobj * cp.obj_scale, status, kkt_residuals: kkt, iterations: iter };
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, sol(SdpStatus::MaxIter)));
            best_iter = iter;
        } else if iter >= best_iter + STALL_ITERS {
            break;
        }
        if primal <= opts.tol && dual <= opts.tol && gap <= opts.tol {
            return Ok(sol(SdpStatus::Optimal));
        }
        if comp <= 0.0 && iter > 0 {
            // iterates have lost definiteness to round-off
            break;
        }
        // infeasibility certificates
        let lin_dual = &rp - &cp.b;
        if dobj < 0.0 && lin_dual.norm() <= opts.tol * (-dobj) && primal > opts.tol {
            return Ok(sol(SdpStatus::Infeasible));
        }
        if pobj > 0.0 {
            let viol: f64 = cp.mats.iter().map(|c| (-linalg::lambda_min(&cp.apply_mat(c, &it.y))).max(0.0)).sum::<f64>()
                + cp.scalars.iter().map(|c| (-c.a.dot(&it.y)).max(0.0)).sum::<f64>()
                + (&cp.e * &it.y).norm();
            if viol <= opts.tol * pobj && pobj > 1e8 * (1.0 + f0_norm) {
                return Ok(sol(SdpStatus::Unbounded));
            }
        }

        // scaling and Schur complement
        let nts: Vec<Nt> = it.xm.iter().zip(&it.sm).map(|(x, s)| nt_scaling(x, s)).collect();
        let wm: Vec<Mat> = nts.iter().map(|t| t.w.clone()).collect();
        let ws: Vec<f64> = it.xs.iter().zip(&it.ss).map(|(x, s)| x / s).collect();
        let mut kkt_mat = Mat::zeros(n + neq, n + neq);
        kkt_mat.view_mut((0, 0), (n, n)).copy_from(&cp.schur(&wm, &ws));
        kkt_mat.view_mut((0, n), (n, neq)).copy_from(&cp.e.transpose());
        kkt_mat.view_mut((n, 0), (neq, n)).copy_from(&cp.e);
        let diag_scale = (0..n).map(|i| kkt_mat[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
        for i in 0..n {
            kkt_mat[(i, i)] += 1e-14 * diag_scale;
        }
        let lu = kkt_mat.lu();

        let solve = |rcm: &[Mat], rcs: &[f64]| -> Option<Direction> {
            let tmp_m: Vec<Mat> = rcm.iter().zip(&wm).zip(&rdm).map(|((rc, w), rd)| rc - w * rd * w).collect();
            let tmp_s: Vec<f64> = rcs.iter().zip(&ws).zip(&rds).map(|((rc, w), rd)| rc - w * rd).collect();
            let mut rhs = Vector::zeros(n + neq);
            rhs.rows_mut(0, n).copy_from(&(&rp + cp.adjoint(&tmp_m, &tmp_s)));
            rhs.rows_mut(n, neq).copy_from(&re);
            let mut sol = lu.solve(&rhs)?;
            // refine against the operator form to undo round-off in M
            for _ in 0..2 {
                let dy = sol.rows(0, n).into_owned();
                let dl = sol.rows(n, neq).into_owned();
                let adm: Vec<Mat> = cp.mats.iter().zip(&wm).map(|(c, w)| w * cp.apply_mat(c, &dy) * w).collect();
                let ads: Vec<f64> = cp.scalars.iter().zip(&ws).map(|(c, w)| w * c.a.dot(&dy)).collect();
                let mut r = rhs.clone();
                let top = cp.adjoint(&adm, &ads) + cp.e.transpose() * &dl;
                r.rows_mut(0, n).axpy(-1.0, &top, 1.0);
                r.rows_mut(n, neq).axpy(-1.0, &(&cp.e * &dy), 1.0);
                sol += lu.solve(&r)?;
            }
            let dy = sol.rows(0, n).into_owned();
            let dlam = sol.rows(n, neq).into_owned();
            let dsm: Vec<Mat> = cp.mats.iter().zip(&rdm).map(|(c, rd)| rd + cp.apply_mat(c, &dy)).collect();
            let dss: Vec<f64> = cp.scalars.iter().zip(&rds).map(|(c, rd)| rd + c.a.dot(&dy)).collect();
            let dxm = rcm.iter().zip(&wm).zip(&dsm).map(|((rc, w), ds)| linalg::symmetrize(&(rc - w * ds * w))).collect();
            let dxs = rcs.iter().zip(&ws).zip(&dss).map(|((rc, w), ds)| rc - w * ds).collect();
            Some(Direction { dy, dlam, dsm, dxm, dss, dxs })
        };
        let steps = |d: &Direction| -> (f64, f64) {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for (x, dx) in it.xm.iter().zip(&d.dxm) {
                ap = ap.min(max_step(x, dx));
            }
            for (x, dx) in it.xs.iter().zip(&d.dxs) {
                ap = ap.min(max_step_scalar(*x, *dx));
            }
            for (s, ds) in it.sm.iter().zip(&d.dsm) {
                ad = ad.min(max_step(s, ds));
            }
            for (s, ds) in it.ss.iter().zip(&d.dss) {
                ad = ad.min(max_step_scalar(*s, *ds));
            }
            (ap, ad)
        };

        // predictor
        let rcm: Vec<Mat> = it.xm.iter().map(|x| -x).collect();
        let rcs: Vec<f64> = it.xs.iter().map(|x| -x).collect();
        let Some(pred) = solve(&rcm, &rcs) else { break };
        let (ap, ad) = steps(&pred);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let comp_aff: f64 = it.sm.iter().zip(&pred.dsm).zip(it.xm.iter().zip(&pred.dxm)).map(|((s, ds), (x, dx))| dot(&(s + ds * ad), &(x + dx * ap))).sum::<f64>()
            + it.ss.iter().zip(&pred.dss).zip(it.xs.iter().zip(&pred.dxs)).map(|((s, ds), (x, dx))| (s + ad * ds) * (x + ap * dx)).sum::<f64>();
        let sigma = if mu > 0.0 { libm::pow((comp_aff / nu.max(1.0) / mu).clamp(0.0, 1.0), 3.0) } else { 0.0 };

        // corrector
        let mut rcm = Vec::new();
        for ((nt, dx), ds) in nts.iter().zip(&pred.dxm).zip(&pred.dsm) {
            let dxt = &nt.g_inv * dx * nt.g_inv.transpose();
            let dst = nt.g.transpose() * ds * &nt.g;
            let prod = &dxt * &dst;
            let m = nt.d.len();
            let mut rt = Mat::zeros(m, m);
            for a in 0..m {
                for c in 0..m {
                    let dd = if a == c { nt.d[a] * nt.d[a] } else { 0.0 };
                    let sm = if a == c { sigma * mu } else { 0.0 };
                    let rhs = sm - dd - 0.5 * (prod[(a, c)] + prod[(c, a)]);
                    rt[(a, c)] = 2.0 * rhs / (nt.d[a] + nt.d[c]);
                }
            }
            rcm.push(linalg::symmetrize(&(&nt.g * rt * nt.g.transpose())));
        }
        let rcs: Vec<f64> = (0..it.xs.len()).map(|k| (sigma * mu - it.xs[k] * it.ss[k] - pred.dxs[k] * pred.dss[k]) / it.ss[k]).collect();
        let Some(dir) = solve(&rcm, &rcs) else { break };
        let (ap, ad) = steps(&dir);
        let tau = 0.9 + 0.09 * ap.min(ad).min(1.0);
        let ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);
        it.y.axpy(ad, &dir.dy, 1.0);
        for (s, ds) in it.sm.iter_mut().zip(&dir.dsm) {
            *s = linalg::symmetrize(&(&*s + ds * ad));
        }
        for (s, ds) in it.ss.iter_mut().zip(&dir.dss) {
            *s += ad * ds;
        }
        it.lam.axpy(ap, &dir.dlam, 1.0);
        for (x, dx) in it.xm.iter_mut().zip(&dir.dxm) {
            *x = linalg::symmetrize(&(&*x + dx * ap));
        }
        for (x, dx) in it.xs.iter_mut().zip(&dir.dxs) {
            *x += ap * dx;
        }
        if !it.y.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| Error::Solver("no iterate".into()))
}

fn blocks_of(cp: &Conic, y: &Vector) -> Vec<Mat> {
    cp.dims.iter().enumerate().map(|(k, &d)| cp.layout.smat(y, k, d)).collect()
}

fn start(cp: &Conic, p: &SdpProblem, opts: &SdpOptions) -> Result<Iterate> {
    let n = cp.layout.n;
    let b_max = cp.b.amax();
    let mut y = Vector::zeros(n);
    let mut feasible_start = false;
    if let Some(init) = &opts.initial {
        if init.len() != p.dims.len() || init.iter().zip(&p.dims).any(|(m, &d)| m.shape() != (d, d)) {
            return Err(Error::DimensionMismatch { field: "initial".into(), detail: "one matrix per block".into() });
        }
        let mut y0 = Vector::zeros(n);
        for (k, m) in init.iter().enumerate() {
            cp.layout.svec_into(m, k, &mut y0);
        }
        let strictly = cp.mats.iter().all(|c| linalg::lambda_min(&(&c.f0 + cp.apply_mat(c, &y0))) > 0.0)
            && cp.scalars.iter().all(|c| c.c + c.a.dot(&y0) > 0.0)
            && (&cp.f - &cp.e * &y0).amax() <= 1e-12;
        if strictly {
            y = y0;
            feasible_start = true;
        }
    }
    let mut sm = Vec::new();
    let mut xm = Vec::new();
    for c in &cp.mats {
        let m = c.f0.nrows();
        let fnorm = c.terms.iter().map(|t| t.weight.abs() * t.map.norm_squared()).fold(0.0, f64::max);
        let xi = 10.0f64.max(libm::sqrt(m as f64)).max(c.f0.norm());
        let eta = 10.0f64.max(libm::sqrt(m as f64)).max((1.0 + b_max) / (1.0 + fnorm));
        if feasible_start {
            sm.push(&c.f0 + cp.apply_mat(c, &y));
        } else {
            sm.push(Mat::identity(m, m) * xi);
        }
        xm.push(Mat::identity(m, m) * eta);
    }
    let mut ss = Vec::new();
    let mut xs = Vec::new();
    for c in &cp.scalars {
        ss.push(if feasible_start { c.c + c.a.dot(&y) } else { 10.0f64.max(c.c.abs()) });
        xs.push(10.0f64.max(1.0 + b_max));
    }
    Ok(Iterate { y, lam: Vector::zeros(cp.e.nrows()), sm, xm, ss, xs })
}

// ---- maximum privacy under perfect utility --------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrivacyOptions {
    /// Weight agent `i`'s term by `1 / tr(G_i P_x G_iᵀ)` (sum of privacies).
    pub normalized: bool,
    /// Restrict `Θ` to diagonal matrices (coordinates invisible to `UΨ`).
    pub diagonal: bool,
    pub sdp: SdpOptions,
    pub tol: Tolerance,
}

impl Default for MaxPrivacyOptions {
    fn default() -> Self {
        Self { normalized: false, diagonal: false, sdp: SdpOptions::default(), tol: Tolerance::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrivacyResult {
    pub sanitization: Sanitization,
    pub privacy: Vec<f64>,
    pub utility: f64,
    pub objective: f64,
    pub z: Mat,
    pub solution: SdpSolution,
}

/// Perfect-utility noise lives in `null(UΨ_{:,𝒮_i})` for each agent:
/// `Θ_i = Σ_b B_b Θ′_b B_bᵀ` over the agent's variable blocks. Normally one
/// block spans the whole null space; the diagonal restriction uses one 1×1
/// block per coordinate the public map cannot see.
fn utility_null_bases(model: &SystemModel, psi: &Mat, opts: &MaxPrivacyOptions) -> Result<Vec<Vec<Mat>>> {
    let up_norm = (model.u() * psi).norm();
    model
        .slices()
        .iter()
        .map(|s| {
            let up = model.u() * psi.columns(s.start, s.len);
            if opts.diagonal {
                Ok((0..s.len)
                    .filter(|&k| up.column(k).norm() <= opts.tol.rel_rank_tol * up_norm)
                    .map(|k| {
                        let mut e = Mat::zeros(s.len, 1);
                        e[(k, 0)] = 1.0;
                        e
                    })
                    .collect())
            } else {
                let b = linalg::null_basis(&up, &opts.tol)?.into_matrix();
                Ok(if b.ncols() > 0 { vec![b] } else { Vec::new() })
            }
        })
        .collect()
}

/// Embedding `E_i B` of agent `i`'s reduced noise into `ℝ^N`.
fn embedded_basis(model: &SystemModel, i: usize, b: &Mat) -> Result<Mat> {
    let s = model.agent_slice(i)?;
    let mut e = Mat::zeros(model.n(), b.ncols());
    e.view_mut((s.start, 0), (s.len, b.ncols())).copy_from(b);
    Ok(e)
}

struct NoiseBlock {
    agent: usize,
    block: usize,
    basis: Mat,
}

struct PrivacyProgram {
    problem: SdpProblem,
    noise: Vec<NoiseBlock>,
    z_block: usize,
    initial: Vec<Mat>,
}

fn privacy_program(model: &SystemModel, delta: &[f64], opts: &MaxPrivacyOptions) -> Result<PrivacyProgram> {
    if delta.len() != model.agents() || delta.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InvalidInput(format!("need {} positive finite power budgets", model.agents())));
    }
    let factors = crlb::crlb_factors(model)?;
    let bases = utility_null_bases(model, &factors.psi, opts)?;
    let (l, n) = (model.l(), model.n());
    let mut prob = SdpProblem::new();
    let mut noise = Vec::new();
    let mut initial = Vec::new();
    for (i, agent_bases) in bases.into_iter().enumerate() {
        let mut budget = Vec::new();
        for b in agent_bases {
            let d = b.ncols();
            let k = prob.add_block(d);
            initial.push(Mat::identity(d, d) * (delta[i] / (2.0 * model.agent_dims()[i] as f64)));
            budget.push((k, Mat::identity(d, d)));
            noise.push(NoiseBlock { agent: i, block: k, basis: b });
        }
        if !budget.is_empty() {
            prob.add_inequality_le(budget, delta[i]);
        }
    }
    let z = prob.add_block(l);
    initial.push(&factors.p_x * 0.5);
    let mut weight = Mat::zeros(l, l);
    for i in 0..model.agents() {
        let g = &model.g()[i];
        let w = if opts.normalized && !model.g_is_zero(i) { 1.0 / linalg::weighted_trace(g, &factors.p_x) } else { 1.0 };
        weight += g.transpose() * g * w;
    }
    prob.add_objective(z, linalg::symmetrize(&weight));
    match factors.prior_case {
        PriorCase::NoPrior => {
            // R + Σ E_iB_iΘ′_iB_iᵀE_iᵀ − H Z Hᵀ ⪰ 0  ⇔  Z ⪯ P̃
            let lmi = prob.add_lmi(model.r().clone());
            for nb in &noise {
                lmi.term(nb.block, 1.0, embedded_basis(model, nb.agent, &nb.basis)?);
            }
            lmi.term(z, -1.0, model.h().clone());
        }
        PriorCase::WithPrior => {
            // [[P0 − Z, P0Hᵀ], [HP0, Φ⁻¹ + Θ]] ⪰ 0  ⇔  Z ⪯ P̃
            let p0 = factors.p0.as_ref().expect("prior case");
            let mut f0 = Mat::zeros(l + n, l + n);
            f0.view_mut((0, 0), (l, l)).copy_from(p0);
            let p0h = p0 * model.h().transpose();
            f0.view_mut((0, l), (l, n)).copy_from(&p0h);
            f0.view_mut((l, 0), (n, l)).copy_from(&p0h.transpose());
            f0.view_mut((l, l), (n, n)).copy_from(&(model.h() * p0 * model.h().transpose() + model.r()));
            let lmi = prob.add_lmi(linalg::symmetrize(&f0));
            let mut top = Mat::zeros(l + n, l);
            top.view_mut((0, 0), (l, l)).copy_from(&Mat::identity(l, l));
            lmi.term(z, -1.0, top);
            for nb in &noise {
                let e = embedded_basis(model, nb.agent, &nb.basis)?;
                let mut m = Mat::zeros(l + n, e.ncols());
                m.view_mut((l, 0), (n, e.ncols())).copy_from(&e);
                lmi.term(nb.block, 1.0, m);
            }
        }
    }
    Ok(PrivacyProgram { problem: prob, noise, z_block: z, initial })
}

fn solve_privacy_program(model: &SystemModel, prog: PrivacyProgram, opts: &MaxPrivacyOptions) -> Result<MaxPrivacyResult> {
    let mut sdp_opts = opts.sdp.clone();
    if sdp_opts.initial.is_none() {
        sdp_opts.initial = Some(prog.initial.clone());
    }
    let sol = solve_sdp(&prog.problem, &sdp_opts)?;
    match sol.status {
        SdpStatus::Optimal | SdpStatus::MaxIter => {}
        SdpStatus::Infeasible => return Err(Error::Solver("max-privacy program reported infeasible".into())),
        SdpStatus::Unbounded => return Err(Error::Solver("max-privacy program reported unbounded".into())),
    }
    if sol.status == SdpStatus::MaxIter && sol.kkt_residuals.primal.max(sol.kkt_residuals.dual).max(sol.kkt_residuals.gap) > 1e-5 {
        return Err(Error::Solver(format!("max-privacy program did not converge: {:?}", sol.kkt_residuals)));
    }
    let mut blocks: Vec<Mat> = model.agent_dims().iter().map(|&d| Mat::zeros(d, d)).collect();
    for nb in &prog.noise {
        let t = linalg::psd_project(&sol.blocks[nb.block]);
        blocks[nb.agent] += &nb.basis * t * nb.basis.transpose();
    }
    let blocks: Vec<Mat> = blocks.iter().map(linalg::symmetrize).collect();
    let theta = linalg::block_diag(&blocks);
    let sanitization = Sanitization::noise_only(model.agent_dims(), theta)?;
    let report = crlb::tradeoff_report(model, &sanitization)?;
    Ok(MaxPrivacyResult {
        sanitization,
        privacy: report.privacy,
        utility: report.utility,
        objective: sol.objective_value,
        z: sol.blocks[prog.z_block].clone(),
        solution: sol,
    })
}

/// Maximizes `Σ_i tr(G_i Z G_iᵀ)` over `Z ⪯ P̃(I, Θ)`, block-diagonal
/// `Θ` with `UΨΘ = 0`, and `tr Θ_i ≤ δ_i`, without a prior.
pub fn max_privacy_no_prior(model: &SystemModel, delta: &[f64], opts: &MaxPrivacyOptions) -> Result<MaxPrivacyResult> {
    if model.has_prior() {
        return Err(Error::WrongCase { expected: "no-prior" });
    }
    let prog = privacy_program(model, delta, opts)?;
    solve_privacy_program(model, prog, opts)
}

/// As [`max_privacy_no_prior`], with the prior-case LMI.
pub fn max_privacy_with_prior(model: &SystemModel, delta: &[f64], opts: &MaxPrivacyOptions) -> Result<MaxPrivacyResult> {
    if !model.has_prior() {
        return Err(Error::WrongCase { expected: "with-prior" });
    }
    let prog = privacy_program(model, delta, opts)?;
    solve_privacy_program(model, prog, opts)
}

pub fn max_privacy(model: &SystemModel, delta: &[f64], opts: &MaxPrivacyOptions) -> Result<MaxPrivacyResult> {
    let prog = privacy_program(model, delta, opts)?;
    solve_privacy_program(model, prog, opts)
}

/// The max-privacy program itself, e.g. for [`SdpProblem::dump`].
pub fn max_privacy_problem(model: &SystemModel, delta: &[f64], opts: &MaxPrivacyOptions) -> Result<SdpProblem> {
    Ok(privacy_program(model, delta, opts)?.problem)
}
