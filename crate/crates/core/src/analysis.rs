//! First-order expansion of the SE test error, fixed-point residuals and
//! selection rules driven by train error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::descent::{DdParams, StepRecord};
use crate::error::{Error, Result};
use crate::model::{Activations, LossGradient, LossModel};
use crate::quadrature::{checked_sqrt, EngineConfig, ExpectationEngine, GaussianRule, Method};
use crate::state_evolution::{se_step, test_functional, SeState};

/// The six first-order terms of `test_{t+1} − test_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorBreakdown {
    pub t: usize,
    pub a_damp: f64,
    pub a_descent: f64,
    pub th_damp: f64,
    pub th_signal: f64,
    pub om_damp: f64,
    pub om_cross: f64,
    pub predicted_delta: f64,
    pub actual_delta: f64,
    pub residual: f64,
}

/// Pure-DD grouping of the first-order terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PureTaylor {
    pub t: usize,
    /// `−η ‖G_t p‖²`.
    pub head_signal: f64,
    /// `−η α ‖U_t (diag(p) χ diag(p))^{1/2}‖_F²`.
    pub theta_signal: f64,
    /// `−η/2 Σ_j p_j ⟨E ∇²_hΨ_j, Ξ_t[t,t] + Ξ_t[t,t]ᵀ⟩`.
    pub variance: f64,
    pub predicted_delta: f64,
    pub actual_delta: f64,
    pub residual: f64,
}

/// Per-mode expectations at the current time.
struct ModeMoments {
    grad_h: Vec<DVector<f64>>,
    grad_a: Vec<DVector<f64>>,
    hess: Vec<DMatrix<f64>>,
    g: Vec<DVector<f64>>,
    f: Vec<DVector<f64>>,
    gg: Vec<DMatrix<f64>>,
}

fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Engine for single-time expectations: a Gauss–Hermite grid when it is
/// small enough, otherwise the caller's engine.
fn diagonal_engine(engine: &ExpectationEngine, width: usize) -> Result<ExpectationEngine> {
    let order = engine.config().gh_order;
    let grid = order.checked_pow(width as u32).unwrap_or(usize::MAX);
    if grid <= 1 << 16 {
        ExpectationEngine::new(EngineConfig {
            method: Method::GaussHermite,
            ..engine.config().clone()
        })
    } else {
        Ok(engine.clone())
    }
}

fn single_rule(state: &SeState, engine: &ExpectationEngine) -> Result<GaussianRule> {
    let t = state.t();
    let l = state.width();
    let root = checked_sqrt(&state.omega(t, t), t, t)?;
    Ok(engine
        .standard(l, engine.uses_quadrature(l), t as u64)?
        .transformed(&root.sqrt))
}

fn mode_moments(
    state: &SeState,
    model: &dyn LossModel,
    acts: &dyn Activations,
    rule: &GaussianRule,
) -> ModeMoments {
    let t = state.t();
    let l = state.width();
    let a = state.a_bar(t).as_slice().to_vec();
    let lp = a.len();
    let mut out = ModeMoments {
        grad_h: Vec::new(),
        grad_a: Vec::new(),
        hess: Vec::new(),
        g: Vec::new(),
        f: Vec::new(),
        gg: Vec::new(),
    };
    let mut h = vec![0.0; l];
    let (mut gh, mut ga, mut hs) = (vec![0.0; l], vec![0.0; lp], vec![0.0; l * l]);
    let (mut g, mut f) = (vec![0.0; l], vec![0.0; lp]);
    for (j, law) in state.laws().iter().enumerate() {
        let mj = state.m(j + 1, t);
        let mut s_gh = DVector::zeros(l);
        let mut s_ga = DVector::zeros(lp);
        let mut s_hs = DMatrix::zeros(l, l);
        let mut s_g = DVector::zeros(l);
        let mut s_f = DVector::zeros(lp);
        let mut s_gg = DMatrix::zeros(l, l);
        for (y, py) in law.atoms() {
            if py == 0.0 {
                continue;
            }
            for (i, w) in rule.weights.iter().enumerate() {
                let x = rule.point(i);
                for k in 0..l {
                    h[k] = x[k] + mj[k];
                }
                let wy = w * py;
                model.grad_h(&h, y, &a, &mut gh);
                model.grad_a(&h, y, &a, &mut ga);
                model.hess_h(&h, y, &a, &mut hs);
                acts.g(&h, y, &a, &mut g);
                acts.f(&h, y, &a, &mut f);
                for k in 0..l {
                    s_gh[k] += wy * gh[k];
                    s_g[k] += wy * g[k];
                    for c in 0..l {
                        s_hs[(k, c)] += wy * hs[k * l + c];
                        s_gg[(k, c)] += wy * g[k] * g[c];
                    }
                }
                for k in 0..lp {
                    s_ga[k] += wy * ga[k];
                    s_f[k] += wy * f[k];
                }
            }
        }
        out.grad_h.push(s_gh);
        out.grad_a.push(s_ga);
        out.hess.push(s_hs);
        out.g.push(s_g);
        out.f.push(s_f);
        out.gg.push(s_gg);
    }
    out
}

/// `Ξ_t[t, t]`, which does not depend on the parameters of step `t`.
fn current_xi(
    state: &SeState,
    acts: &dyn Activations,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<DMatrix<f64>> {
    let t = state.t();
    // Any valid parameters work: only the history enters Ξ_t[t, t].
    let next = se_step(state, acts, DdParams::pure(0.0), alpha, engine)?;
    Ok(next.xi(t, t))
}

struct Snapshot {
    moments: ModeMoments,
    xi_tt: DMatrix<f64>,
    diag_engine: ExpectationEngine,
}

fn snapshot(
    state: &SeState,
    model: &dyn LossModel,
    acts: &dyn Activations,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<Snapshot> {
    let diag_engine = diagonal_engine(engine, state.width())?;
    let rule = single_rule(state, &diag_engine)?;
    Ok(Snapshot {
        moments: mode_moments(state, model, acts, &rule),
        xi_tt: current_xi(state, acts, alpha, engine)?,
        diag_engine,
    })
}

/// Test error at `t` and `t + 1` using only the diagonal recursion
/// `Ω_{t+1}[t+1,t+1] = η0²Ω_t[t,t] − η0η1(Ξ_t[t,t] + Ξ_t[t,t]ᵀ) + η1² V[t,t]`.
fn diagonal_test_pair(
    state: &SeState,
    model: &dyn LossModel,
    snap: &Snapshot,
    params: DdParams,
    alpha: f64,
) -> Result<(f64, f64)> {
    let t = state.t();
    let jn = state.num_modes();
    let p = state.class_probs();
    let chi = state.chi();
    let mm = &snap.moments;
    let l_t: Vec<DVector<f64>> = (0..jn).map(|j| &mm.g[j] * p[j]).collect();
    let mut sigma = DMatrix::zeros(state.width(), state.width());
    for j in 0..jn {
        sigma += &mm.gg[j] * p[j];
    }
    let mut v = sigma * alpha;
    for j in 0..jn {
        for k in 0..jn {
            v += &l_t[j] * l_t[k].transpose() * (alpha * alpha * chi[(j, k)]);
        }
    }
    let xi = &snap.xi_tt;
    let omega_t = state.omega(t, t);
    let omega_next = &omega_t * (params.eta0 * params.eta0)
        - (xi + xi.transpose()) * (params.eta0 * params.eta1)
        + v * (params.eta1 * params.eta1);
    let omega_next = crate::linalg::symmetrize(&omega_next);
    let m_next: Vec<DVector<f64>> = (0..jn)
        .map(|j| {
            let mut drift = DVector::zeros(state.width());
            for k in 0..jn {
                drift += &l_t[k] * chi[(j, k)];
            }
            state.m(j + 1, t) * params.eta0 - drift * (params.eta1 * alpha)
        })
        .collect();
    let mut ef = DVector::zeros(state.a_bar(t).len());
    for j in 0..jn {
        ef += &mm.f[j] * p[j];
    }
    let a_next = state.a_bar(t) * params.gamma0 - ef * params.gamma1;

    let eng = &snap.diag_engine;
    let stream = t as u64;
    let now = test_functional(
        state.m_at(t),
        &omega_t,
        state.a_bar(t),
        model,
        state.laws(),
        p,
        eng,
        stream,
    )?;
    let next = test_functional(
        &m_next,
        &omega_next,
        &a_next,
        model,
        state.laws(),
        p,
        eng,
        stream,
    )?;
    Ok((now.mean, next.mean))
}

/// First-order terms of the test-error increment for one DD step from a
/// fixed SE snapshot. `activations` defaults to the loss gradient.
pub fn taylor_terms(
    state: &SeState,
    model: &dyn LossModel,
    activations: Option<&dyn Activations>,
    params: DdParams,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<TaylorBreakdown> {
    params.validate()?;
    let grad = LossGradient(model);
    let acts: &dyn Activations = activations.unwrap_or(&grad);
    let snap = snapshot(state, model, acts, alpha, engine)?;
    let t = state.t();
    let p = state.class_probs();
    let chi = state.chi();
    let jn = state.num_modes();
    let mm = &snap.moments;
    let a_bar = state.a_bar(t);
    let omega_t = state.omega(t, t);
    let xi_sym = &snap.xi_tt + snap.xi_tt.transpose();

    let mut a_damp = 0.0;
    let mut th_damp = 0.0;
    let mut om_damp = 0.0;
    let mut om_cross = 0.0;
    let mut a_descent = 0.0;
    let mut th_signal = 0.0;
    for j in 0..jn {
        a_damp += p[j] * mm.grad_a[j].dot(a_bar);
        th_damp += p[j] * mm.grad_h[j].dot(state.m(j + 1, t));
        om_damp += p[j] * frobenius(&mm.hess[j], &omega_t);
        om_cross += p[j] * frobenius(&mm.hess[j], &xi_sym);
        for k in 0..jn {
            a_descent += p[j] * p[k] * mm.grad_a[j].dot(&mm.f[k]);
            th_signal += p[j] * chi[(j, k)] * p[k] * mm.grad_h[j].dot(&mm.g[k]);
        }
    }
    let a_damp = -(1.0 - params.gamma0) * a_damp;
    let a_descent = -params.gamma1 * a_descent;
    let th_damp = -(1.0 - params.eta0) * th_damp;
    let th_signal = -params.eta1 * alpha * th_signal;
    let om_damp = -params.eta0 * (1.0 - params.eta0) * om_damp;
    let om_cross = -0.5 * params.eta0 * params.eta1 * om_cross;
    let predicted_delta = a_damp + a_descent + th_damp + th_signal + om_damp + om_cross;

    let (now, next) = diagonal_test_pair(state, model, &snap, params, alpha)?;
    let actual_delta = next - now;
    Ok(TaylorBreakdown {
        t,
        a_damp,
        a_descent,
        th_damp,
        th_signal,
        om_damp,
        om_cross,
        predicted_delta,
        actual_delta,
        residual: actual_delta - predicted_delta,
    })
}

/// `(diag(p) χ diag(p))^{1/2}` with negative eigenvalues clipped to zero.
pub fn weighted_chi_sqrt(chi: &DMatrix<f64>, p: &[f64]) -> DMatrix<f64> {
    let d = DMatrix::from_fn(chi.nrows(), chi.ncols(), |j, k| p[j] * chi[(j, k)] * p[k]);
    let eig = SymmetricEigen::new(crate::linalg::symmetrize(&d));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// The pure-DD grouping of the first-order terms at step size `η`.
pub fn pure_taylor_terms(
    state: &SeState,
    model: &dyn LossModel,
    eta: f64,
    alpha: f64,
    engine: &ExpectationEngine,
) -> Result<PureTaylor> {
    let params = DdParams::pure(eta);
    params.validate()?;
    let grad = LossGradient(model);
    let snap = snapshot(state, model, &grad, alpha, engine)?;
    let t = state.t();
    let p = state.class_probs();
    let jn = state.num_modes();
    let mm = &snap.moments;

    let lp = state.a_bar(t).len();
    let mut gp = DVector::zeros(lp);
    for j in 0..jn {
        gp += &mm.grad_a[j] * p[j];
    }
    let u = DMatrix::from_fn(state.width(), jn, |k, j| mm.grad_h[j][k]);
    let ud = u * weighted_chi_sqrt(state.chi(), p);
    let xi_sym = &snap.xi_tt + snap.xi_tt.transpose();
    let mut variance = 0.0;
    for j in 0..jn {
        variance += p[j] * frobenius(&mm.hess[j], &xi_sym);
    }
    let head_signal = -eta * gp.norm_squared();
    let theta_signal = -eta * alpha * ud.norm_squared();
    let variance = -0.5 * eta * variance;
    let predicted_delta = head_signal + theta_signal + variance;
    let (now, next) = diagonal_test_pair(state, model, &snap, params, alpha)?;
    let actual_delta = next - now;
    Ok(PureTaylor {
        t,
        head_signal,
        theta_signal,
        variance,
        predicted_delta,
        actual_delta,
        residual: actual_delta - predicted_delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResidual {
    pub r_m: Vec<Vec<f64>>,
    pub r_a: Vec<f64>,
}

impl FixedPointResidual {
    pub fn norm(&self) -> f64 {
        self.r_m
            .iter()
            .flatten()
            .chain(self.r_a.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Residual of the fixed-point equations on the subspace
/// `η0 = 1 − η`, `η1 = c η`, `γ0 = 1`, `γ1 = γ`.
#[allow(clippy::too_many_arguments)]
pub fn fixed_point_residual(
    m: &[DVector<f64>],
    omega: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    c: f64,
    alpha: f64,
    chi: &DMatrix<f64>,
    p: &[f64],
    laws: &[crate::mixture::ResponseLaw],
    acts: &dyn Activations,
    engine: &ExpectationEngine,
) -> Result<FixedPointResidual> {
    let l = acts.width();
    let jn = p.len();
    if m.len() != jn || laws.len() != jn || chi.shape() != (jn, jn) || omega.shape() != (l, l) {
        return Err(Error::shape("fixed-point inputs do not agree on J and L"));
    }
    let root = checked_sqrt(omega, 0, 0)?;
    let rule = engine
        .standard(l, engine.uses_quadrature(l), 0)?
        .transformed(&root.sqrt);
    let a = a_bar.as_slice();
    let lp = a.len();
    let mut h = vec![0.0; l];
    let mut g = vec![0.0; l];
    let mut f = vec![0.0; lp];
    let mut eg = Vec::with_capacity(jn);
    let mut ef = DVector::zeros(lp);
    for j in 0..jn {
        let mut sg = DVector::zeros(l);
        let mut sf = DVector::zeros(lp);
        for (y, py) in laws[j].atoms() {
            for (i, w) in rule.weights.iter().enumerate() {
                let x = rule.point(i);
                for k in 0..l {
                    h[k] = x[k] + m[j][k];
                }
                acts.g(&h, y, a, &mut g);
                acts.f(&h, y, a, &mut f);
                for k in 0..l {
                    sg[k] += w * py * g[k];
                }
                for k in 0..lp {
                    sf[k] += w * py * f[k];
                }
            }
        }
        ef += &sf * p[j];
        eg.push(sg);
    }
    let r_m = (0..jn)
        .map(|j| {
            let mut r = m[j].clone();
            for k in 0..jn {
                r += &eg[k] * (c * alpha * chi[(j, k)] * p[k]);
            }
            r.iter().copied().collect()
        })
        .collect();
    Ok(FixedPointResidual {
        r_m,
        r_a: ef.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMode {
    Absolute,
    Log,
}

/// First 1-based `t` at which the next train error fails to improve by `ε`.
///
/// Absolute mode stops when `E_{t+1} − E_t ≥ ε`; log mode stops when
/// `log E_{t+1} − log E_t ≥ log(1 − ε)`, i.e. when the relative decrease is
/// below `ε`. Returns `None` if no such `t` exists.
pub fn early_stop_online(errors: &[f64], eps: f64, mode: StopMode) -> Result<Option<usize>> {
    if !(eps >= 0.0) {
        return Err(Error::config(format!("epsilon = {eps} must be >= 0")));
    }
    if mode == StopMode::Log {
        if eps >= 1.0 {
            return Err(Error::config("log mode needs epsilon < 1"));
        }
        if errors.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("log mode needs positive train errors"));
        }
    }
    let threshold = match mode {
        StopMode::Absolute => eps,
        StopMode::Log => (1.0 - eps).ln(),
    };
    for t in 0..errors.len().saturating_sub(1) {
        let d = match mode {
            StopMode::Absolute => errors[t + 1] - errors[t],
            StopMode::Log => errors[t + 1].ln() - errors[t].ln(),
        };
        if d >= threshold || d.is_nan() {
            return Ok(Some(t + 1));
        }
    }
    Ok(None)
}

/// Saved time `t` with the smallest train error; ties go to the smaller `t`.
pub fn early_stop_offline(records: &[StepRecord], saved: &[usize]) -> Result<usize> {
    if saved.is_empty() {
        return Err(Error::config("no saved indices"));
    }
    let mut best: Option<(usize, f64)> = None;
    let mut sorted = saved.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for t in sorted {
        let rec = records
            .iter()
            .find(|r| r.t == t)
            .ok_or_else(|| Error::config(format!("no record for saved time {t}")))?;
        let e = rec.train_error;
        if best.is_none_or(|(_, b)| lt(e, b)) {
            best = Some((t, e));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Strict less-than with NaN treated as +∞.
fn lt(a: f64, b: f64) -> bool {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    key(a) < key(b)
}

/// 1-based index of the smallest candidate error; ties go to the smaller
/// index and NaN ranks last.
pub fn select_candidate(errors: &[f64]) -> Result<usize> {
    if errors.is_empty() {
        return Err(Error::config("no candidates"));
    }
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate().skip(1) {
        if lt(e, errors[best]) {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Median, quartiles and range of one cross-seed slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::config("cannot summarize an empty slice"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Summary {
        median: quantile(&v, 0.5),
        q25: quantile(&v, 0.25),
        q75: quantile(&v, 0.75),
        min: v[0],
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDiagnostics {
    /// `|train − test|` per seed and step.
    pub gaps: Vec<Vec<f64>>,
    pub gap: Vec<Summary>,
    pub train: Vec<Summary>,
    pub test: Vec<Summary>,
}

/// Cross-seed statistics of train error, test error and their gap.
pub fn gap_diagnostics(trajectories: &[&[StepRecord]]) -> Result<GapDiagnostics> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::config("no trajectories"))?;
    let len = first.len();
    if trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::shape("trajectories have different lengths"));
    }
    let gaps: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|tr| {
            tr.iter()
                .map(|r| (r.train_error - r.test_error).abs())
                .collect()
        })
        .collect();
    let mut gap = Vec::with_capacity(len);
    let mut train = Vec::with_capacity(len);
    let mut test = Vec::with_capacity(len);
    for t in 0..len {
        gap.push(summarize(&gaps.iter().map(|g| g[t]).collect::<Vec<_>>())?);
        train.push(summarize(
            &trajectories
                .iter()
                .map(|tr| tr[t].train_error)
                .collect::<Vec<_>>(),
        )?);
        test.push(summarize(
            &trajectories
                .iter()
                .map(|tr| tr[t].test_error)
                .collect::<Vec<_>>(),
        )?);
    }
    Ok(GapDiagnostics {
        gaps,
        gap,
        train,
        test,
    })
}
