//! Full-batch gradient descent and the DD iteration.
//!
//! One DD step with parameters `(η0, η1, γ0, γ1)` reads
//!
//! ```text
//! h_t     = X θ_t + η1 M_t
//! ĥ_t     = g(h_t, y, a_t)
//! θ̃_t     = Xᵀ ĥ_t − α θ_t J̄ᵀ,      J̄ = mean_i ∇_h g(h_{t,i}, y_i, a_t)
//! θ_{t+1} = η0 θ_t − η1 θ̃_t
//! a_{t+1} = γ0 a_t − γ1 mean_i f(h_{t,i}, y_i, a_t)
//! M_{t+1} = η0 M_t + ĥ_t,             M_1 = 0
//! ```

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{empirical_overlaps, sample_dataset, Dataset, MixtureSpec, OverlapRecord};
use crate::model::{Activations, LossGradient, LossModel};
use crate::seeds;

/// Step sizes of one DD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdParams {
    pub eta0: f64,
    pub eta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

impl DdParams {
    /// Pure DD: unit damping, `η1 = γ1 = η`.
    pub fn pure(eta: f64) -> Self {
        DdParams {
            eta0: 1.0,
            eta1: eta,
            gamma0: 1.0,
            gamma1: eta,
        }
    }

    /// Weight-decayed DD: `η0 = 1 − η`, `η1 = c η`, `γ0 = 1`, `γ1 = γ`.
    pub fn damped(eta: f64, c: f64, gamma: f64) -> Self {
        DdParams {
            eta0: 1.0 - eta,
            eta1: c * eta,
            gamma0: 1.0,
            gamma1: gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.eta0, self.eta1, self.gamma0, self.gamma1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("step sizes must be finite"));
        }
        if !(0.0..=1.0).contains(&self.eta0) {
            return Err(Error::config(format!(
                "eta0 = {} outside [0, 1]",
                self.eta0
            )));
        }
        if self.eta1 < 0.0 || self.gamma1 < 0.0 {
            return Err(Error::config("eta1 and gamma1 must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdConfig {
    pub params: DdParams,
    pub alpha: f64,
    /// Include the memory term `η1 M_t` in `h_t`.
    pub memory: bool,
    /// Include the correction `−α θ_t J̄ᵀ` in `θ̃_t`.
    pub onsager: bool,
}

impl DdConfig {
    pub fn new(params: DdParams, alpha: f64) -> Self {
        DdConfig {
            params,
            alpha,
            memory: true,
            onsager: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha = {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// `d x L`.
    pub theta: Array2<f64>,
    pub a: Array1<f64>,
    /// `n x L` running memory.
    pub memory: Array2<f64>,
    /// 1-based step index of `theta`.
    pub t: usize,
    /// Past `ĥ` matrices, kept only when requested.
    pub history: Option<Vec<Array2<f64>>>,
}

impl TrainerState {
    pub fn new(theta: Array2<f64>, a: Array1<f64>, n: usize, keep_history: bool) -> Self {
        let l = theta.ncols();
        TrainerState {
            theta,
            a,
            memory: Array2::zeros((n, l)),
            t: 1,
            history: keep_history.then(Vec::new),
        }
    }

    /// `Σ_s η0^{t−1−s} ĥ_s` recomputed from the stored history.
    pub fn replay_memory(&self, eta0: f64) -> Option<Array2<f64>> {
        let hist = self.history.as_ref()?;
        let mut m = Array2::zeros(self.memory.dim());
        let last = hist.len();
        for (s, h) in hist.iter().enumerate() {
            m = m + h * eta0.powi((last - 1 - s) as i32);
        }
        Some(m)
    }
}

/// Everything produced by one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub next: TrainerState,
    /// Pre-activations `h_t` that were fed to `g`.
    pub h: Array2<f64>,
    pub h_hat: Array2<f64>,
    /// The update direction; `Xᵀ ĥ` for gradient descent.
    pub theta_tilde: Array2<f64>,
}

struct RowEval {
    h_hat: Array2<f64>,
    jacobian_mean: Option<Array2<f64>>,
    f_mean: Array1<f64>,
}

fn eval_rows(
    acts: &dyn Activations,
    h: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    a: &[f64],
    want_jacobian: bool,
) -> RowEval {
    let (n, l) = h.dim();
    let lp = acts.head_width();
    let mut h_hat = Array2::zeros((n, l));
    let mut jac = vec![0.0; l * l];
    let mut jac_sum = vec![0.0; l * l];
    let mut f = vec![0.0; lp];
    let mut f_sum = vec![0.0; lp];
    let mut row = vec![0.0; l];
    let mut out = vec![0.0; l];
    for i in 0..n {
        for (r, v) in row.iter_mut().zip(h.row(i)) {
            *r = *v;
        }
        acts.g(&row, y[i], a, &mut out);
        for (dst, v) in h_hat.row_mut(i).iter_mut().zip(&out) {
            *dst = *v;
        }
        if want_jacobian {
            acts.g_jacobian(&row, y[i], a, &mut jac);
            for (s, v) in jac_sum.iter_mut().zip(&jac) {
                *s += v;
            }
        }
        if lp > 0 {
            acts.f(&row, y[i], a, &mut f);
            for (s, v) in f_sum.iter_mut().zip(&f) {
                *s += v;
            }
        }
    }
    let nf = n as f64;
    RowEval {
        h_hat,
        jacobian_mean: want_jacobian
            .then(|| Array2::from_shape_vec((l, l), jac_sum).expect("l*l") / nf),
        f_mean: Array1::from_vec(f_sum) / nf,
    }
}

fn check_shapes(state: &TrainerState, data: &Dataset, l: usize, lp: usize) -> Result<()> {
    if state.theta.nrows() != data.d() || state.theta.ncols() != l {
        return Err(Error::shape(format!(
            "theta is {:?}, expected ({}, {l})",
            state.theta.dim(),
            data.d()
        )));
    }
    if state.a.len() != lp {
        return Err(Error::shape(format!(
            "head has {} entries, expected {lp}",
            state.a.len()
        )));
    }
    if state.memory.dim() != (data.n(), l) {
        return Err(Error::shape(format!(
            "memory is {:?}, expected ({}, {l})",
            state.memory.dim(),
            data.n()
        )));
    }
    Ok(())
}

fn ensure_finite(step: usize, what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: what.to_string(),
        })
    }
}

/// One full-batch gradient step.
pub fn gd_step(
    state: &TrainerState,
    data: &Dataset,
    model: &dyn LossModel,
    eta: f64,
    gamma: f64,
) -> Result<StepOutput> {
    check_shapes(state, data, model.width(), model.head_width())?;
    let acts = LossGradient(model);
    let a = state.a.to_vec();
    let h = data.x.dot(&state.theta);
    let ev = eval_rows(&acts, &h.view(), &data.y.view(), &a, false);
    let theta_tilde = data.x.t().dot(&ev.h_hat);
    let theta = &state.theta - &(&theta_tilde * eta);
    let a_next = &state.a - &(&ev.f_mean * gamma);
    ensure_finite(state.t, "theta", theta.iter().copied())?;
    ensure_finite(state.t, "head", a_next.iter().copied())?;
    let mut history = state.history.clone();
    if let Some(hist) = history.as_mut() {
        hist.push(ev.h_hat.clone());
    }
    Ok(StepOutput {
        next: TrainerState {
            theta,
            a: a_next,
            memory: state.memory.clone(),
            t: state.t + 1,
            history,
        },
        h,
        h_hat: ev.h_hat,
        theta_tilde,
    })
}

/// One step of the DD iteration.
pub fn dd_step(
    state: &TrainerState,
    data: &Dataset,
    acts: &dyn Activations,
    config: &DdConfig,
) -> Result<StepOutput> {
    config.validate()?;
    if state.t == 0 {
        return Err(Error::config("step index is 1-based"));
    }
    check_shapes(state, data, acts.width(), acts.head_width())?;
    let p = config.params;
    let a = state.a.to_vec();

    let mut h = data.x.dot(&state.theta);
    if config.memory {
        h = h + &state.memory * p.eta1;
    }
    let ev = eval_rows(acts, &h.view(), &data.y.view(), &a, config.onsager);
    let mut theta_tilde = data.x.t().dot(&ev.h_hat);
    if let Some(jbar) = &ev.jacobian_mean {
        if jbar.dim() != (acts.width(), acts.width()) {
            return Err(Error::shape("Jacobian of g is not L x L"));
        }
        theta_tilde = theta_tilde - state.theta.dot(&jbar.t()) * config.alpha;
    }
    let theta = &state.theta * p.eta0 - &theta_tilde * p.eta1;
    let a_next = &state.a * p.gamma0 - &ev.f_mean * p.gamma1;
    let memory = if config.memory {
        &state.memory * p.eta0 + &ev.h_hat
    } else {
        state.memory.clone()
    };
    ensure_finite(state.t, "theta", theta.iter().copied())?;
    ensure_finite(state.t, "head", a_next.iter().copied())?;
    ensure_finite(state.t, "memory", memory.iter().copied())?;

    let mut history = state.history.clone();
    if let Some(hist) = history.as_mut() {
        hist.push(ev.h_hat.clone());
    }
    Ok(StepOutput {
        next: TrainerState {
            theta,
            a: a_next,
            memory,
            t: state.t + 1,
            history,
        },
        h,
        h_hat: ev.h_hat,
        theta_tilde,
    })
}

/// Pure DD with step `η` and `α = n / d`.
pub fn pure_dd_step(
    state: &TrainerState,
    data: &Dataset,
    model: &dyn LossModel,
    eta: f64,
) -> Result<StepOutput> {
    let config = DdConfig::new(DdParams::pure(eta), data.n() as f64 / data.d() as f64);
    dd_step(state, data, &LossGradient(model), &config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Algorithm {
    Gd { eta: f64, gamma: f64 },
    Dd(DdParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `θ_1` and `a_1` with i.i.d. standard normal entries.
    #[default]
    Standard,
    /// Standard `θ_1`, fixed head.
    FixedHead(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOptions {
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    /// Holdout size, `n` when `None`.
    pub holdout_n: Option<usize>,
    pub init: Init,
    pub keep_history: bool,
}

impl TrajectoryOptions {
    pub fn new(n: usize, steps: usize, seed: u64) -> Self {
        TrajectoryOptions {
            n,
            steps,
            seed,
            holdout_n: None,
            init: Init::Standard,
            keep_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub overlaps: OverlapRecord,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_state: TrainerState,
}

/// Initial parameters drawn from the init stream of `seed`.
pub fn initial_state(
    d: usize,
    n: usize,
    width: usize,
    head_width: usize,
    seed: u64,
    init: &Init,
    keep_history: bool,
) -> Result<TrainerState> {
    let mut rng = seeds::rng(seed, &[seeds::tag::INIT]);
    let theta = Array2::from_shape_simple_fn((d, width), || rng.sample::<f64, _>(StandardNormal));
    let a = match init {
        Init::Standard => {
            Array1::from_shape_simple_fn(head_width, || rng.sample::<f64, _>(StandardNormal))
        }
        Init::FixedHead(v) => {
            if v.len() != head_width {
                return Err(Error::config(format!(
                    "fixed head has {} entries, model needs {head_width}",
                    v.len()
                )));
            }
            Array1::from_vec(v.clone())
        }
    };
    Ok(TrainerState::new(theta, a, n, keep_history))
}

/// Train for `steps` steps on fresh data and record each iterate.
///
/// Record `t` holds the train error of `h_t` (including memory for DD), the
/// holdout error of `θ_t`, and overlaps of `θ_t`. Train, holdout and
/// initialisation use independent streams derived from `seed`.
pub fn run_trajectory(
    spec: &MixtureSpec,
    model: &dyn LossModel,
    activations: Option<&dyn Activations>,
    algorithm: Algorithm,
    opts: &TrajectoryOptions,
) -> Result<Trajectory> {
    if opts.steps == 0 {
        return Err(Error::config("steps must be >= 1"));
    }
    let data = sample_dataset(spec, opts.n, seeds::derive(opts.seed, &[seeds::tag::TRAIN]))?;
    let holdout = sample_dataset(
        spec,
        opts.holdout_n.unwrap_or(opts.n),
        seeds::derive(opts.seed, &[seeds::tag::HOLDOUT]),
    )?;
    let state = initial_state(
        spec.dimension(),
        opts.n,
        model.width(),
        model.head_width(),
        opts.seed,
        &opts.init,
        opts.keep_history,
    )?;
    run_on_data(
        spec,
        &data,
        &holdout,
        model,
        activations,
        algorithm,
        state,
        opts.steps,
    )
}

/// Like [`run_trajectory`] with caller-provided data and initial state.
#[allow(clippy::too_many_arguments)]
pub fn run_on_data(
    spec: &MixtureSpec,
    data: &Dataset,
    holdout: &Dataset,
    model: &dyn LossModel,
    activations: Option<&dyn Activations>,
    algorithm: Algorithm,
    mut state: TrainerState,
    steps: usize,
) -> Result<Trajectory> {
    let grad = LossGradient(model);
    let acts: &dyn Activations = activations.unwrap_or(&grad);
    let alpha = data.n() as f64 / data.d() as f64;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = state.t;
        let out = match algorithm {
            Algorithm::Gd { eta, gamma } => gd_step(&state, data, model, eta, gamma),
            Algorithm::Dd(params) => dd_step(&state, data, acts, &DdConfig::new(params, alpha)),
        };
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                return Err(Error::Diverged {
                    step: t,
                    source: Box::new(e),
                    partial: Box::new(records),
                })
            }
        };
        let a = state.a.to_vec();
        let train_error = model.mean_psi(&out.h.view(), &data.y.view(), &a);
        let test_h = holdout.x.dot(&state.theta);
        let test_error = model.mean_psi(&test_h.view(), &holdout.y.view(), &a);
        let overlaps = empirical_overlaps(
            &state.theta.view(),
            &out.theta_tilde.view(),
            &out.h_hat.view(),
            spec,
        )?;
        records.push(StepRecord {
            t,
            train_error,
            test_error,
            overlaps,
            a,
        });
        state = out.next;
    }
    Ok(Trajectory {
        records,
        final_state: state,
    })
}

/// Column names shared by empirical and SE trajectory CSVs after the error
/// columns.
pub fn overlap_columns(width: usize, modes: usize, head_width: usize) -> Vec<String> {
    let mut cols = Vec::new();
    for a in 1..=width {
        for b in a..=width {
            cols.push(format!("omega_{a}_{b}"));
        }
    }
    for a in 1..=width {
        for b in 1..=width {
            cols.push(format!("xi_{a}_{b}"));
        }
    }
    for j in 1..=modes {
        for c in 1..=width {
            cols.push(format!("m_{j}_{c}"));
        }
    }
    for c in 1..=head_width {
        cols.push(format!("a_{c}"));
    }
    cols
}

/// Values in the order of [`overlap_columns`].
pub fn overlap_values(
    omega: &ArrayView2<f64>,
    xi: &ArrayView2<f64>,
    m: &ArrayView2<f64>,
    a: &[f64],
) -> Vec<f64> {
    let l = omega.nrows();
    let mut v = Vec::new();
    for r in 0..l {
        for c in r..l {
            v.push(omega[[r, c]]);
        }
    }
    v.extend(xi.iter().copied());
    for row in m.axis_iter(Axis(0)) {
        v.extend(row.iter().copied());
    }
    v.extend_from_slice(a);
    v
}

pub fn write_trajectory_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = records.first() else {
        w.flush()?;
        return Ok(());
    };
    let (modes, width) = first.overlaps.m.dim();
    let mut header = vec![
        "t".to_string(),
        "train_error".into(),
        "test_error_emp".into(),
    ];
    header.extend(overlap_columns(width, modes, first.a.len()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.t.to_string(),
            r.train_error.to_string(),
            r.test_error.to_string(),
        ];
        row.extend(
            overlap_values(
                &r.overlaps.omega.view(),
                &r.overlaps.xi.view(),
                &r.overlaps.m.view(),
                &r.a,
            )
            .iter()
            .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_signalless_spec, build_xor_spec};
    use crate::model::{CustomActivations, LinearMse, XorBilinear};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny(x: f64) -> Dataset {
        Dataset {
            x: array![[x]],
            y: array![0.0],
            labels: vec![0],
        }
    }

    fn scalar_state(theta: f64) -> TrainerState {
        TrainerState::new(array![[theta]], Array1::zeros(0), 1, false)
    }

    #[test]
    fn gd_hand_example() {
        let out = gd_step(&scalar_state(1.0), &tiny(2.0), &LinearMse, 0.1, 0.1).unwrap();
        assert_eq!(out.h[[0, 0]], 2.0);
        assert_eq!(out.h_hat[[0, 0]], 2.0);
        assert_relative_eq!(out.next.theta[[0, 0]], 0.6, epsilon = 1e-15);
        assert_eq!(out.next.t, 2);
    }

    #[test]
    fn zero_steps_leave_state_unchanged() {
        let data = tiny(1.7);
        let s = scalar_state(0.4);
        let g = gd_step(&s, &data, &LinearMse, 0.0, 0.0).unwrap();
        assert_eq!(g.next.theta, s.theta);
        let d = pure_dd_step(&s, &data, &LinearMse, 0.0).unwrap();
        assert_eq!(d.next.theta, s.theta);
        assert_eq!(d.next.a, s.a);
    }

    #[test]
    fn pure_dd_scalar_hand_example() {
        for &(x, eta) in &[(2.0, 0.1), (0.5, 0.3), (-1.2, 0.05)] {
            let out = pure_dd_step(&scalar_state(1.0), &tiny(x), &LinearMse, eta).unwrap();
            let alpha = 1.0;
            assert_relative_eq!(out.theta_tilde[[0, 0]], x * x - alpha, epsilon = 1e-14);
            assert_relative_eq!(
                out.next.theta[[0, 0]],
                1.0 - eta * (x * x - alpha),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn first_step_has_no_memory() {
        let spec = build_xor_spec(6, 1.0).unwrap();
        let data = sample_dataset(&spec, 9, 1).unwrap();
        let s = initial_state(6, 9, 2, 1, 0, &Init::Standard, false).unwrap();
        let out = pure_dd_step(&s, &data, &XorBilinear, 0.05).unwrap();
        assert_eq!(out.h, data.x.dot(&s.theta));
    }

    #[test]
    fn constant_g_has_no_onsager_term() {
        let acts = CustomActivations {
            width: 1,
            head_width: 0,
            g: Box::new(|_, _, _, out| out[0] = 0.5),
            g_jacobian: Box::new(|_, _, _, out| out[0] = 0.0),
            f: Box::new(|_, _, _, _| {}),
        };
        let spec = build_signalless_spec(5).unwrap();
        let data = sample_dataset(&spec, 4, 2).unwrap();
        let s = initial_state(5, 4, 1, 0, 1, &Init::Standard, false).unwrap();
        let out = dd_step(&s, &data, &acts, &DdConfig::new(DdParams::pure(0.1), 0.8)).unwrap();
        assert_eq!(
            out.theta_tilde,
            data.x.t().dot(&Array2::from_elem((4, 1), 0.5))
        );
    }

    #[test]
    fn disabled_terms_reproduce_gd_exactly() {
        let spec = build_xor_spec(10, 2.0).unwrap();
        let data = sample_dataset(&spec, 12, 4).unwrap();
        let mut gd = initial_state(10, 12, 2, 1, 3, &Init::Standard, false).unwrap();
        let mut dd = gd.clone();
        let (eta, gamma) = (0.07, 0.03);
        let config = DdConfig {
            params: DdParams {
                eta0: 1.0,
                eta1: eta,
                gamma0: 1.0,
                gamma1: gamma,
            },
            alpha: 1.2,
            memory: false,
            onsager: false,
        };
        for _ in 0..5 {
            let g = gd_step(&gd, &data, &XorBilinear, eta, gamma).unwrap();
            let d = dd_step(&dd, &data, &LossGradient(&XorBilinear), &config).unwrap();
            assert_eq!(g.next.theta, d.next.theta);
            assert_eq!(g.next.a, d.next.a);
            assert_eq!(g.h_hat, d.h_hat);
            gd = g.next;
            dd = d.next;
        }
    }

    #[test]
    fn memory_matches_explicit_sum() {
        let spec = build_xor_spec(8, 1.0).unwrap();
        let data = sample_dataset(&spec, 10, 5).unwrap();
        let mut s = initial_state(8, 10, 2, 1, 2, &Init::Standard, true).unwrap();
        let params = DdParams {
            eta0: 0.9,
            eta1: 0.05,
            gamma0: 1.0,
            gamma1: 0.05,
        };
        let config = DdConfig::new(params, 1.25);
        for _ in 0..10 {
            s = dd_step(&s, &data, &LossGradient(&XorBilinear), &config)
                .unwrap()
                .next;
            let replay = s.replay_memory(params.eta0).unwrap();
            for (a, b) in replay.iter().zip(s.memory.iter()) {
                assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn shape_and_config_errors() {
        let data = tiny(1.0);
        let bad = TrainerState::new(array![[1.0, 2.0]], Array1::zeros(0), 1, false);
        assert!(matches!(
            gd_step(&bad, &data, &LinearMse, 0.1, 0.1),
            Err(Error::Shape(_))
        ));
        let cfg = DdConfig::new(
            DdParams {
                eta0: 1.5,
                ..DdParams::pure(0.1)
            },
            1.0,
        );
        assert!(dd_step(&scalar_state(1.0), &data, &LossGradient(&LinearMse), &cfg).is_err());
        let cfg = DdConfig::new(DdParams::pure(0.1), 0.0);
        assert!(dd_step(&scalar_state(1.0), &data, &LossGradient(&LinearMse), &cfg).is_err());
    }

    #[test]
    fn non_finite_update_reports_step() {
        let data = tiny(1e200);
        let err = gd_step(&scalar_state(1e200), &data, &LinearMse, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }));
    }

    #[test]
    fn single_step_trajectory_reports_initial_errors() {
        let spec = build_signalless_spec(30).unwrap();
        let opts = TrajectoryOptions::new(20, 1, 11);
        let tr = run_trajectory(
            &spec,
            &LinearMse,
            None,
            Algorithm::Dd(DdParams::pure(0.05)),
            &opts,
        )
        .unwrap();
        assert_eq!(tr.records.len(), 1);
        let data = sample_dataset(&spec, 20, seeds::derive(11, &[seeds::tag::TRAIN])).unwrap();
        let s = initial_state(30, 20, 1, 0, 11, &Init::Standard, false).unwrap();
        let h = data.x.dot(&s.theta);
        assert_eq!(
            tr.records[0].train_error,
            LinearMse.mean_psi(&h.view(), &data.y.view(), &[])
        );
        assert_eq!(tr.records[0].t, 1);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let spec = build_xor_spec(20, 2.0).unwrap();
        let opts = TrajectoryOptions::new(20, 5, 3);
        let run = || {
            run_trajectory(
                &spec,
                &XorBilinear,
                None,
                Algorithm::Dd(DdParams::pure(0.05)),
                &opts,
            )
            .unwrap()
            .records
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fixed_head_stays_fixed_without_head_step() {
        let spec = build_xor_spec(20, 4.0).unwrap();
        let mut opts = TrajectoryOptions::new(20, 4, 3);
        opts.init = Init::FixedHead(vec![1.0]);
        let params = DdParams {
            eta0: 0.9,
            eta1: 0.05,
            gamma0: 1.0,
            gamma1: 0.0,
        };
        let tr = run_trajectory(&spec, &XorBilinear, None, Algorithm::Dd(params), &opts).unwrap();
        assert!(tr.records.iter().all(|r| r.a == vec![1.0]));
    }

    #[test]
    fn csv_layout() {
        let spec = build_xor_spec(4, 1.0).unwrap();
        let tr = run_trajectory(
            &spec,
            &XorBilinear,
            None,
            Algorithm::Gd {
                eta: 0.1,
                gamma: 0.1,
            },
            &TrajectoryOptions::new(6, 2, 0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&tr.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(
            header.starts_with("t,train_error,test_error_emp,omega_1_1,omega_1_2,omega_2_2,xi_1_1")
        );
        assert!(header.ends_with("m_4_1,m_4_2,a_1"));
        assert_eq!(text.lines().count(), 3);
    }
}
