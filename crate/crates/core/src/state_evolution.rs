//! Deterministic high-dimensional limit of the DD iteration.
//!
//! The state at time `t` holds the overlap blocks `Ω[r, s] = lim θ_rᵀθ_s/d`
//! for `r, s ≤ t`, the blocks `Σ`, `Ξ` and `V` for `r, s < t`, the mode
//! overlaps `m_{j,s}` and the head trajectory `ā_s`. A step at time `t`
//! computes the new row of `Σ`, the new column and row of `Ξ`, and the new
//! row of `Ω` for `θ_{t+1}`. All time indices in the public API are 1-based.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;

use crate::descent::{overlap_columns, overlap_values, DdParams};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, symmetrize, BlockMatrix, PSD_TOL};
use crate::mixture::{MixtureSpec, ResponseLaw};
use crate::model::{Activations, LossGradient, LossModel};
use crate::quadrature::{checked_sqrt, Estimate, ExpectationEngine, GaussianRule};

/// Default bound on the number of SE steps.
pub const DEFAULT_STEP_CAP: usize = 512;

/// Stream offset separating test-functional draws from step draws.
const TEST_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct SeInit {
    /// `lim θ_1ᵀθ_1 / d`.
    pub theta_sq: DMatrix<f64>,
    /// `m_{j,1}` for each mode.
    pub m1: Vec<DVector<f64>>,
    pub a1: DVector<f64>,
    pub chi: DMatrix<f64>,
    pub p: Vec<f64>,
    pub laws: Vec<ResponseLaw>,
}

impl SeInit {
    /// Standard initialisation for a spec: `θ̄² = I_L`, `m_{j,1} = 0`.
    pub fn standard(spec: &MixtureSpec, width: usize, a1: &[f64]) -> Self {
        let j = spec.num_modes();
        SeInit {
            theta_sq: DMatrix::identity(width, width),
            m1: vec![DVector::zeros(width); j],
            a1: DVector::from_column_slice(a1),
            chi: to_dmatrix(spec.chi()),
            p: spec.class_probs().to_vec(),
            laws: spec.response_laws().to_vec(),
        }
    }
}

pub fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

pub fn to_array2(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn(m.shape(), |(r, c)| m[(r, c)])
}

#[derive(Debug, Clone)]
pub struct SeState {
    t: usize,
    width: usize,
    chi: DMatrix<f64>,
    p: Vec<f64>,
    laws: Vec<ResponseLaw>,
    omega: BlockMatrix,
    sigma: BlockMatrix,
    xi: BlockMatrix,
    v: BlockMatrix,
    /// `m[s][j]`.
    m: Vec<Vec<DVector<f64>>>,
    /// `l[s][j] = p_j E[g]`.
    l: Vec<Vec<DVector<f64>>>,
    a_bar: Vec<DVector<f64>>,
    /// Parameters of each completed step.
    steps: Vec<DdParams>,
    cap: usize,
    near_singular: usize,
}

pub fn se_init(init: SeInit) -> Result<SeState> {
    let l = init.theta_sq.nrows();
    let j = init.p.len();
    if l == 0 || init.theta_sq.ncols() != l {
        return Err(Error::shape("theta_sq must be a non-empty square matrix"));
    }
    if init.m1.len() != j || init.laws.len() != j || init.chi.shape() != (j, j) {
        return Err(Error::shape(format!(
            "{j} modes but {} overlaps, {} laws, chi {:?}",
            init.m1.len(),
            init.laws.len(),
            init.chi.shape()
        )));
    }
    if init.m1.iter().any(|m| m.len() != l) {
        return Err(Error::shape("every m_{j,1} must have length L"));
    }
    if psd_sqrt(&init.theta_sq).is_err() {
        return Err(Error::config("initial overlap theta_sq is not PSD"));
    }
    let mut omega = BlockMatrix::new(l);
    omega.grow();
    omega.set(0, 0, &symmetrize(&init.theta_sq));
    Ok(SeState {
        t: 1,
        width: l,
        chi: init.chi,
        p: init.p,
        laws: init.laws,
        omega,
        sigma: BlockMatrix::new(l),
        xi: BlockMatrix::new(l),
        v: BlockMatrix::new(l),
        m: vec![init.m1],
        l: Vec::new(),
        a_bar: vec![init.a1],
        steps: Vec::new(),
        cap: DEFAULT_STEP_CAP,
        near_singular: 0,
    })
}

impl SeState {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_modes(&self) -> usize {
        self.p.len()
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.p
    }

    pub fn chi(&self) -> &DMatrix<f64> {
        &self.chi
    }

    pub fn laws(&self) -> &[ResponseLaw] {
        &self.laws
    }

    pub fn with_step_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Count of near-singular covariances met so far.
    pub fn near_singular_count(&self) -> usize {
        self.near_singular
    }

    /// `Ω[r, s]`, defined for `r, s ≤ t`.
    pub fn omega(&self, r: usize, s: usize) -> DMatrix<f64> {
        self.omega.get(r - 1, s - 1)
    }

    /// `Σ[r, s]`, defined for `r, s < t`.
    pub fn sigma(&self, r: usize, s: usize) -> DMatrix<f64> {
        self.sigma.get(r - 1, s - 1)
    }

    /// `Ξ[r, s]`, defined for `r, s < t`.
    pub fn xi(&self, r: usize, s: usize) -> DMatrix<f64> {
        self.xi.get(r - 1, s - 1)
    }

    pub fn v(&self, r: usize, s: usize) -> DMatrix<f64> {
        self.v.get(r - 1, s - 1)
    }

    /// `m_{j,s}` with 1-based `j` and `s ≤ t`.
    pub fn m(&self, j: usize, s: usize) -> &DVector<f64> {
        &self.m[s - 1][j - 1]
    }

    /// All `m_{j,s}` at time `s` in mode order.
    pub fn m_at(&self, s: usize) -> &[DVector<f64>] {
        &self.m[s - 1]
    }

    /// `l_{j,s}`, defined for `s < t`.
    pub fn l(&self, j: usize, s: usize) -> &DVector<f64> {
        &self.l[s - 1][j - 1]
    }

    pub fn a_bar(&self, s: usize) -> &DVector<f64> {
        &self.a_bar[s - 1]
    }

    pub fn omega_full(&self) -> &DMatrix<f64> {
        self.omega.as_matrix()
    }

    pub fn sigma_full(&self) -> &DMatrix<f64> {
        self.sigma.as_matrix()
    }

    pub fn steps(&self) -> &[DdParams] {
        &self.steps
    }
}

/// Expectations needed to advance from time `t`.
struct StepMoments {
    /// `Σ[r, t]` for `r = 1..=t`.
    sigma_col: Vec<DMatrix<f64>>,
    /// `E_j[g]` at time `t` (not weighted by `p_j`).
    eg: Vec<DVector<f64>>,
    /// `Σ_j p_j E_j[f]` at time `t`.
    ef: DVector<f64>,
    near_singular: usize,
}

fn pair_covariance(state: &SeState, r: usize, s: usize) -> DMatrix<f64> {
    let l = state.width;
    let mut c = DMatrix::zeros(2 * l, 2 * l);
    c.view_mut((0, 0), (l, l)).copy_from(&state.omega(r, r));
    c.view_mut((0, l), (l, l)).copy_from(&state.omega(r, s));
    c.view_mut((l, 0), (l, l)).copy_from(&state.omega(s, r));
    c.view_mut((l, l), (l, l)).copy_from(&state.omega(s, s));
    c
}

fn is_near_singular(cov: &DMatrix<f64>) -> bool {
    psd_sqrt(cov)
        .map(|r| r.condition > crate::linalg::COND_WARN)
        .unwrap_or(false)
}

/// Diagonal moments at time `t`: `Σ[t, t]`, `E_j[g]`, `Σ_j p_j E_j[f]`.
fn diagonal_moments(
    state: &SeState,
    acts: &dyn Activations,
    rule: &GaussianRule,
) -> (DMatrix<f64>, Vec<DVector<f64>>, DVector<f64>) {
    let t = state.t;
    let l = state.width;
    let a = state.a_bar(t).as_slice().to_vec();
    let lp = a.len();
    let mut sigma = DMatrix::zeros(l, l);
    let mut eg = Vec::with_capacity(state.num_modes());
    let mut ef = DVector::zeros(lp);
    let mut h = vec![0.0; l];
    let mut g = vec![0.0; l];
    let mut f = vec![0.0; lp];
    for (j, law) in state.laws.iter().enumerate() {
        let pj = state.p[j];
        let mj = state.m(j + 1, t);
        let mut gj = DVector::zeros(l);
        let mut ggj = DMatrix::zeros(l, l);
        let mut fj = DVector::zeros(lp);
        for (y, py) in law.atoms() {
            if py == 0.0 {
                continue;
            }
            for (i, w) in rule.weights.iter().enumerate() {
                let x = rule.point(i);
                for k in 0..l {
                    h[k] = x[k] + mj[k];
                }
                acts.g(&h, y, &a, &mut g);
                let wy = w * py;
                for k in 0..l {
                    gj[k] += wy * g[k];
                    for c in 0..=k {
                        ggj[(k, c)] += wy * g[k] * g[c];
                    }
                }
                if lp > 0 {
                    acts.f(&h, y, &a, &mut f);
                    for k in 0..lp {
                        fj[k] += wy * f[k];
                    }
                }
            }
        }
        for k in 0..l {
            for c in 0..k {
                ggj[(c, k)] = ggj[(k, c)];
            }
        }
        sigma += ggj * pj;
        ef += fj * pj;
        eg.push(gj);
    }
    (sigma, eg, ef)
}

/// `Σ[r, t] = Σ_j p_j E[g(G^r + m_{j,r}, Y_j, ā_r) g(G^t + m_{j,t}, Y_j, ā_t)ᵀ]`.
fn pair_moment(
    state: &SeState,
    acts: &dyn Activations,
    rule: &GaussianRule,
    r: usize,
) -> DMatrix<f64> {
    let t = state.t;
    let l = state.width;
    let ar = state.a_bar(r).as_slice().to_vec();
    let at = state.a_bar(t).as_slice().to_vec();
    let mut out = DMatrix::zeros(l, l);
    let mut hr = vec![0.0; l];
    let mut ht = vec![0.0; l];
    let mut gr = vec![0.0; l];
    let mut gt = vec![0.0; l];
    for (j, law) in state.laws.iter().enumerate() {
        let mjr = state.m(j + 1, r);
        let mjt = state.m(j + 1, t);
        let mut acc = DMatrix::zeros(l, l);
        for (y, py) in law.atoms() {
            if py == 0.0 {
                continue;
            }
            for (i, w) in rule.weights.iter().enumerate() {
                let x = rule.point(i);
                for k in 0..l {
                    hr[k] = x[k] + mjr[k];
                    ht[k] = x[l + k] + mjt[k];
                }
                acts.g(&hr, y, &ar, &mut gr);
                acts.g(&ht, y, &at, &mut gt);
                let wy = w * py;
                for k in 0..l {
                    for c in 0..l {
                        acc[(k, c)] += wy * gr[k] * gt[c];
                    }
                }
            }
        }
        out += acc * state.p[j];
    }
    out
}

fn step_moments(
    state: &SeState,
    acts: &dyn Activations,
    engine: &ExpectationEngine,
) -> Result<StepMoments> {
    let t = state.t;
    let l = state.width;
    if acts.width() != l || acts.head_width() != state.a_bar(t).len() {
        return Err(Error::shape(format!(
            "activations have widths ({}, {}), state has ({l}, {})",
            acts.width(),
            acts.head_width(),
            state.a_bar(t).len()
        )));
    }
    let quad = engine.uses_quadrature(l);
    let stream = t as u64;

    let diag_cov = state.omega(t, t);
    let diag_root = checked_sqrt(&diag_cov, t, t)?;
    let diag_rule = engine
        .standard(l, quad, stream)?
        .transformed(&diag_root.sqrt);
    let (sigma_tt, eg, ef) = diagonal_moments(state, acts, &diag_rule);
    let mut near_singular = usize::from(is_near_singular(&diag_cov));

    let pair_bank = if t > 1 {
        Some(engine.standard(2 * l, quad, stream)?)
    } else {
        None
    };
    let pairs: Vec<Result<(DMatrix<f64>, bool)>> = (1..t)
        .into_par_iter()
        .map(|r| {
            let cov = pair_covariance(state, r, t);
            let root = checked_sqrt(&cov, r, t)?;
            let rule = pair_bank.as_ref().expect("t > 1").transformed(&root.sqrt);
            Ok((pair_moment(state, acts, &rule, r), is_near_singular(&cov)))
        })
        .collect();
    let mut sigma_col = Vec::with_capacity(t);
    for p in pairs {
        let (m, singular) = p?;
        near_singular += usize::from(singular);
        sigma_col.push(m);
    }
    sigma_col.push(sigma_tt);
    Ok(StepMoments {
        sigma_col,
        eg,
        ef,
        near_singular,
    })
}

fn check_cap(state: &SeState) -> Result<()> {
    if state.t >= state.cap {
        return Err(Error::StepCap { cap: state.cap });
    }
    Ok(())
}

fn check_finite(state: &SeState) -> Result<()> {
    let t = state.t;
    let finite = state.omega(t, t).iter().all(|v| v.is_finite())
        && state.a_bar(t).iter().all(|v| v.is_finite())
        && state
            .m_at(t)
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: t - 1,
            what: "state evolution".into(),
        })
    }
}

/// Advance the state by one step of the general DD recursion.
pub fn se_step(
    state: &SeState,
    acts: &dyn Activations,
    params: DdParams,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<SeState> {
    params.validate()?;
    check_cap(state)?;
    let mom = step_moments(state, acts, engine)?;
    let t = state.t;
    let jn = state.num_modes();
    let mut next = state.clone();
    next.near_singular += mom.near_singular;

    let l_t: Vec<DVector<f64>> = (0..jn).map(|j| &mom.eg[j] * state.p[j]).collect();
    next.l.push(l_t.clone());
    next.sigma.grow();
    next.xi.grow();
    next.v.grow();
    next.steps.push(params);

    // Σ and V: new column t and its transpose as row t.
    for r in 1..=t {
        let s_rt = if r == t {
            symmetrize(&mom.sigma_col[r - 1])
        } else {
            mom.sigma_col[r - 1].clone()
        };
        let mut v_rt = &s_rt * alpha;
        for j in 0..jn {
            for k in 0..jn {
                let c = state.chi[(j, k)];
                if c != 0.0 {
                    v_rt += next.l(j + 1, r) * next.l(k + 1, t).transpose() * (alpha * alpha * c);
                }
            }
        }
        if r == t {
            v_rt = symmetrize(&v_rt);
        }
        next.sigma.set(r - 1, t - 1, &s_rt);
        next.sigma.set(t - 1, r - 1, &s_rt.transpose());
        next.v.set(r - 1, t - 1, &v_rt);
        next.v.set(t - 1, r - 1, &v_rt.transpose());
    }

    // Ξ: column t, then row t.
    let mut xi_1t = DMatrix::zeros(state.width, state.width);
    for j in 0..jn {
        xi_1t += state.m(j + 1, 1) * l_t[j].transpose() * alpha;
    }
    next.xi.set(0, t - 1, &xi_1t);
    for r in 1..t {
        let pr = next.steps[r - 1];
        let val = next.xi(r, t) * pr.eta0 - next.v(r, t) * pr.eta1;
        next.xi.set(r, t - 1, &val);
    }
    if t > 1 {
        let pp = next.steps[t - 2];
        for s in 1..t {
            let val = next.xi(t - 1, s) * pp.eta0 - next.v(t - 1, s) * pp.eta1;
            next.xi.set(t - 1, s - 1, &val);
        }
    }

    // Ω: new row and column for θ_{t+1}.
    next.omega.grow();
    let pt = params;
    let o_1 = state.omega(1, t) * pt.eta0 - next.xi(1, t) * pt.eta1;
    next.omega.set(0, t, &o_1);
    next.omega.set(t, 0, &o_1.transpose());
    for r in 1..=t {
        let pr = next.steps[r - 1];
        let c00 = pr.eta0 * pt.eta0;
        let c01 = pr.eta0 * pt.eta1;
        let c10 = pr.eta1 * pt.eta0;
        let c11 = pr.eta1 * pt.eta1;
        let xi_rt = next.xi(r, t);
        let xi_tr_t = next.xi(t, r).transpose();
        let cross = if c01 == c10 {
            (xi_rt + xi_tr_t) * c01
        } else {
            xi_rt * c01 + xi_tr_t * c10
        };
        let mut val = state.omega(r, t) * c00 - cross + next.v(r, t) * c11;
        if r == t {
            val = symmetrize(&val);
        }
        next.omega.set(r, t, &val);
        next.omega.set(t, r, &val.transpose());
    }

    // m and ā.
    let mut m_next = Vec::with_capacity(jn);
    for j in 0..jn {
        let mut drift = DVector::zeros(state.width);
        for k in 0..jn {
            drift += &l_t[k] * state.chi[(j, k)];
        }
        m_next.push(state.m(j + 1, t) * pt.eta0 - drift * (pt.eta1 * alpha));
    }
    next.m.push(m_next);
    next.a_bar
        .push(state.a_bar(t) * pt.gamma0 - &mom.ef * pt.gamma1);
    next.t = t + 1;
    check_finite(&next)?;
    Ok(next)
}

/// The pure-DD recursion written in its specialised form: `g = ∇_hΨ`,
/// `f = ∇_aΨ`, unit damping and step `η`.
pub fn pure_dd_se_step(
    state: &SeState,
    model: &dyn LossModel,
    eta: f64,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<SeState> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::config(format!(
            "eta = {eta} must be finite and >= 0"
        )));
    }
    if state.steps.iter().any(|p| *p != DdParams::pure(eta)) {
        return Err(Error::config(
            "pure DD state evolution requires every previous step to be pure DD with the same eta",
        ));
    }
    check_cap(state)?;
    let grad = LossGradient(model);
    let mom = step_moments(state, &grad, engine)?;
    let t = state.t;
    let jn = state.num_modes();
    let p = &state.p;
    let mut next = state.clone();
    next.near_singular += mom.near_singular;

    // E[∇_hΨ_{t,j}] weighted by p_j.
    let pe: Vec<DVector<f64>> = (0..jn).map(|j| &mom.eg[j] * p[j]).collect();
    next.l.push(pe.clone());
    next.sigma.grow();
    next.xi.grow();
    next.v.grow();
    next.steps.push(DdParams::pure(eta));

    for r in 1..=t {
        let s_rt = if r == t {
            symmetrize(&mom.sigma_col[r - 1])
        } else {
            mom.sigma_col[r - 1].clone()
        };
        let mut v_rt = &s_rt * alpha;
        for j in 0..jn {
            for k in 0..jn {
                let c = state.chi[(j, k)];
                if c != 0.0 {
                    v_rt += next.l(j + 1, r) * pe[k].transpose() * (alpha * alpha * c);
                }
            }
        }
        if r == t {
            v_rt = symmetrize(&v_rt);
        }
        next.sigma.set(r - 1, t - 1, &s_rt);
        next.sigma.set(t - 1, r - 1, &s_rt.transpose());
        next.v.set(r - 1, t - 1, &v_rt);
        next.v.set(t - 1, r - 1, &v_rt.transpose());
    }

    let mut xi_1t = DMatrix::zeros(state.width, state.width);
    for j in 0..jn {
        xi_1t += state.m(j + 1, 1) * pe[j].transpose() * alpha;
    }
    next.xi.set(0, t - 1, &xi_1t);
    for r in 1..t {
        let val = next.xi(r, t) * 1.0 - next.v(r, t) * eta;
        next.xi.set(r, t - 1, &val);
    }
    if t > 1 {
        for s in 1..t {
            let val = next.xi(t - 1, s) * 1.0 - next.v(t - 1, s) * eta;
            next.xi.set(t - 1, s - 1, &val);
        }
    }

    next.omega.grow();
    let o_1 = state.omega(1, t) * 1.0 - next.xi(1, t) * eta;
    next.omega.set(0, t, &o_1);
    next.omega.set(t, 0, &o_1.transpose());
    for r in 1..=t {
        let mut val = state.omega(r, t) * 1.0 - (next.xi(r, t) + next.xi(t, r).transpose()) * eta
            + next.v(r, t) * (eta * eta);
        if r == t {
            val = symmetrize(&val);
        }
        next.omega.set(r, t, &val);
        next.omega.set(t, r, &val.transpose());
    }

    let mut m_next = Vec::with_capacity(jn);
    for j in 0..jn {
        let mut drift = DVector::zeros(state.width);
        for k in 0..jn {
            drift += &pe[k] * state.chi[(j, k)];
        }
        m_next.push(state.m(j + 1, t) * 1.0 - drift * (eta * alpha));
    }
    next.m.push(m_next);
    next.a_bar.push(state.a_bar(t) * 1.0 - &mom.ef * eta);
    next.t = t + 1;
    check_finite(&next)?;
    Ok(next)
}

/// `Σ_j p_j E[Ψ(m_j + Z, Y_j, ā)]` with `Z ~ N(0, Ω)`.
#[allow(clippy::too_many_arguments)]
pub fn test_functional(
    m: &[DVector<f64>],
    omega: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    model: &dyn LossModel,
    laws: &[ResponseLaw],
    p: &[f64],
    engine: &ExpectationEngine,
    stream: u64,
) -> Result<Estimate> {
    let l = model.width();
    if omega.shape() != (l, l)
        || m.iter().any(|v| v.len() != l)
        || a_bar.len() != model.head_width()
    {
        return Err(Error::shape(
            "test functional inputs do not match the model widths",
        ));
    }
    if m.len() != laws.len() || m.len() != p.len() {
        return Err(Error::shape("one overlap, law and probability per mode"));
    }
    let root = checked_sqrt(omega, 0, 0)?;
    let rule = engine
        .standard(l, engine.uses_quadrature(l), TEST_STREAM + stream)?
        .transformed(&root.sqrt);
    let a = a_bar.as_slice();
    let mut h = vec![0.0; l];
    let atoms: Vec<Vec<(f64, f64)>> = laws.iter().map(|law| law.atoms()).collect();
    let est = rule.estimate(|x| {
        let mut total = 0.0;
        for (j, mj) in m.iter().enumerate() {
            for k in 0..l {
                h[k] = x[k] + mj[k];
            }
            for &(y, py) in &atoms[j] {
                if py != 0.0 {
                    total += p[j] * py * model.psi(&h, y, a);
                }
            }
        }
        total
    });
    Ok(est)
}

/// Predicted test error of the state's current iterate.
pub fn state_test_error(
    state: &SeState,
    model: &dyn LossModel,
    engine: &ExpectationEngine,
) -> Result<Estimate> {
    let t = state.t;
    test_functional(
        state.m_at(t),
        &state.omega(t, t),
        state.a_bar(t),
        model,
        &state.laws,
        &state.p,
        engine,
        t as u64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormPoint {
    pub omega: f64,
    pub test: f64,
}

/// Signal-less linear-MSE recursion in closed scalar form (`L = 1`, `μ = 0`,
/// `y = 0`, so `Σ = Ω`, `l = 0`, `m = 0`). Returns `Ω_t[t, t]` and
/// `test_t = Ω_t[t, t] / 2` for `t = 1..=T`.
pub fn signalless_closed_form(
    eta0: f64,
    eta1: f64,
    alpha: f64,
    theta_sq: f64,
    steps: usize,
) -> Result<Vec<ClosedFormPoint>> {
    if steps == 0 {
        return Err(Error::config("T must be >= 1"));
    }
    let n = steps + 1;
    let mut om = vec![vec![0.0f64; n]; n];
    let mut xi = vec![vec![0.0f64; n]; n];
    let mut v = vec![vec![0.0f64; n]; n];
    om[0][0] = theta_sq;
    for t in 0..steps {
        for r in 0..=t {
            v[r][t] = alpha * om[r][t];
            v[t][r] = alpha * om[t][r];
        }
        xi[0][t] = 0.0;
        for r in 0..t {
            xi[r + 1][t] = eta0 * xi[r][t] - eta1 * v[r][t];
        }
        if t > 0 {
            for s in 0..t {
                xi[t][s] = eta0 * xi[t - 1][s] - eta1 * v[t - 1][s];
            }
        }
        om[0][t + 1] = eta0 * om[0][t] - eta1 * xi[0][t];
        om[t + 1][0] = om[0][t + 1];
        for r in 0..=t {
            let val = eta0 * eta0 * om[r][t] - eta0 * eta1 * (xi[r][t] + xi[t][r])
                + eta1 * eta1 * v[r][t];
            om[r + 1][t + 1] = val;
            om[t + 1][r + 1] = val;
        }
    }
    Ok((0..steps)
        .map(|t| ClosedFormPoint {
            omega: om[t][t],
            test: 0.5 * om[t][t],
        })
        .collect())
}

/// One row of an SE trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SeRecord {
    pub t: usize,
    pub test: f64,
    pub test_stderr: f64,
    pub omega_tt: DMatrix<f64>,
    pub xi_tt: DMatrix<f64>,
    /// `J x L`.
    pub m: DMatrix<f64>,
    pub a: Vec<f64>,
}

/// Run the SE for `steps` steps and record each time.
///
/// With `pure_eta = Some(η)` the specialised pure-DD recursion is used and
/// `params` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn run_state_evolution(
    init: SeInit,
    model: &dyn LossModel,
    activations: Option<&dyn Activations>,
    params: DdParams,
    pure_eta: Option<f64>,
    alpha: f64,
    engine: &ExpectationEngine,
    steps: usize,
) -> Result<(Vec<SeRecord>, SeState)> {
    let mut state = se_init(init)?;
    if steps >= state.cap {
        return Err(Error::StepCap { cap: state.cap });
    }
    let grad = LossGradient(model);
    let acts: &dyn Activations = activations.unwrap_or(&grad);
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = state.t;
        let test = state_test_error(&state, model, engine)?;
        let next = match pure_eta {
            Some(eta) => pure_dd_se_step(&state, model, eta, alpha, engine)?,
            None => se_step(&state, acts, params, alpha, engine)?,
        };
        let jn = state.num_modes();
        let m = DMatrix::from_fn(jn, state.width, |j, c| state.m(j + 1, t)[c]);
        records.push(SeRecord {
            t,
            test: test.mean,
            test_stderr: test.stderr,
            omega_tt: state.omega(t, t),
            xi_tt: next.xi(t, t),
            m,
            a: state.a_bar(t).iter().copied().collect(),
        });
        state = next;
    }
    if state.near_singular > 0 {
        log::warn!(
            "{} near-singular covariance blocks (condition > 1e8) during state evolution",
            state.near_singular
        );
    }
    Ok((records, state))
}

pub fn write_se_csv<W: Write>(records: &[SeRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = records.first() else {
        w.flush()?;
        return Ok(());
    };
    let (modes, width) = first.m.shape();
    let mut header = vec!["t".to_string(), "test_se".into()];
    header.extend(overlap_columns(width, modes, first.a.len()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.t.to_string(), r.test.to_string()];
        let vals = overlap_values(
            &to_array2(&r.omega_tt).view(),
            &to_array2(&r.xi_tt).view(),
            &to_array2(&r.m).view(),
            &r.a,
        );
        row.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed SE CSV: `t` and `test_se` columns plus the raw table.
#[derive(Debug, Clone, PartialEq)]
pub struct SeTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SeTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_se_csv<R: std::io::Read>(input: R) -> Result<SeTable> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("t") || !header.iter().any(|h| h == "test_se") {
        return Err(Error::config("SE CSV needs `t` and `test_se` columns"));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::config(format!("bad number `{v}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(SeTable { header, rows })
}

/// Largest eigenvalue deficit below zero of the full `Ω`.
pub fn omega_min_eigenvalue(state: &SeState) -> f64 {
    let m = symmetrize(state.omega_full());
    nalgebra::SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Whether `Ω` is PSD within the crate tolerance.
pub fn omega_is_psd(state: &SeState) -> bool {
    let scale = state.omega_full().amax().max(1.0);
    omega_min_eigenvalue(state) >= -PSD_TOL * scale
}
