//! Loss functions `Ψ(h, y, a) = L(M_a(h), y)` with analytic derivatives.
//!
//! `h ∈ R^L` is the pre-activation of one sample and `a ∈ R^{L'}` the head
//! parameters. Cross-entropy entries are evaluated in logit form,
//! `Ψ = softplus(z) − y z`, which is exact and finite for every `z`.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "linear-mse")]
    LinearMse,
    #[serde(rename = "glm-ce")]
    GlmCe,
    #[serde(rename = "xor-bilinear")]
    XorBilinear,
    #[serde(rename = "mlp2-tanh")]
    Mlp2Tanh,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::LinearMse,
        ModelKind::GlmCe,
        ModelKind::XorBilinear,
        ModelKind::Mlp2Tanh,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ModelKind::LinearMse => "linear-mse",
            ModelKind::GlmCe => "glm-ce",
            ModelKind::XorBilinear => "xor-bilinear",
            ModelKind::Mlp2Tanh => "mlp2-tanh",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// Per-sample loss with derivatives. All slices have lengths `width()` for
/// `h` and `head_width()` for `a`; Hessians are row-major `L x L`.
pub trait LossModel: Send + Sync + fmt::Debug {
    fn kind(&self) -> ModelKind;
    fn width(&self) -> usize;
    fn head_width(&self) -> usize;
    fn predict(&self, h: &[f64], a: &[f64]) -> f64;
    fn psi(&self, h: &[f64], y: f64, a: &[f64]) -> f64;
    fn grad_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);
    fn grad_a(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);
    fn hess_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);

    /// Mean of `Ψ` over the rows of `h`.
    fn mean_psi(&self, h: &ArrayView2<f64>, y: &ArrayView1<f64>, a: &[f64]) -> f64 {
        let n = h.nrows();
        let mut row = vec![0.0; h.ncols()];
        let mut total = 0.0;
        for i in 0..n {
            for (r, v) in row.iter_mut().zip(h.row(i)) {
                *r = *v;
            }
            total += self.psi(&row, y[i], a);
        }
        total / n as f64
    }
}

/// The pair `(g, f)` that drives a DD iteration, with the Jacobian of `g`.
pub trait Activations: Send + Sync {
    fn width(&self) -> usize;
    fn head_width(&self) -> usize;
    fn g(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);
    /// Row-major `out[k * L + l] = ∂g_k / ∂h_l`.
    fn g_jacobian(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);
    fn f(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]);
}

/// `g = ∇_h Ψ`, `f = ∇_a Ψ`: the choice that recovers gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct LossGradient<'a>(pub &'a dyn LossModel);

impl Activations for LossGradient<'_> {
    fn width(&self) -> usize {
        self.0.width()
    }
    fn head_width(&self) -> usize {
        self.0.head_width()
    }
    fn g(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        self.0.grad_h(h, y, a, out)
    }
    fn g_jacobian(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        self.0.hess_h(h, y, a, out)
    }
    fn f(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        self.0.grad_a(h, y, a, out)
    }
}

type VecFn = dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync;

/// Caller-supplied `(g, f)` pair.
pub struct CustomActivations {
    pub width: usize,
    pub head_width: usize,
    pub g: Box<VecFn>,
    pub g_jacobian: Box<VecFn>,
    pub f: Box<VecFn>,
}

impl Activations for CustomActivations {
    fn width(&self) -> usize {
        self.width
    }
    fn head_width(&self) -> usize {
        self.head_width
    }
    fn g(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        (self.g)(h, y, a, out)
    }
    fn g_jacobian(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        (self.g_jacobian)(h, y, a, out)
    }
    fn f(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        (self.f)(h, y, a, out)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `σ(z)` against `y`.
fn logit_ce(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearMse;

impl LossModel for LinearMse {
    fn kind(&self) -> ModelKind {
        ModelKind::LinearMse
    }
    fn width(&self) -> usize {
        1
    }
    fn head_width(&self) -> usize {
        0
    }
    fn predict(&self, h: &[f64], _a: &[f64]) -> f64 {
        h[0]
    }
    fn psi(&self, h: &[f64], y: f64, _a: &[f64]) -> f64 {
        0.5 * (h[0] - y) * (h[0] - y)
    }
    fn grad_h(&self, h: &[f64], y: f64, _a: &[f64], out: &mut [f64]) {
        out[0] = h[0] - y;
    }
    fn grad_a(&self, _h: &[f64], _y: f64, _a: &[f64], _out: &mut [f64]) {}
    fn hess_h(&self, _h: &[f64], _y: f64, _a: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GlmCe;

impl LossModel for GlmCe {
    fn kind(&self) -> ModelKind {
        ModelKind::GlmCe
    }
    fn width(&self) -> usize {
        1
    }
    fn head_width(&self) -> usize {
        0
    }
    fn predict(&self, h: &[f64], _a: &[f64]) -> f64 {
        sigmoid(h[0])
    }
    fn psi(&self, h: &[f64], y: f64, _a: &[f64]) -> f64 {
        logit_ce(h[0], y)
    }
    fn grad_h(&self, h: &[f64], y: f64, _a: &[f64], out: &mut [f64]) {
        out[0] = sigmoid(h[0]) - y;
    }
    fn grad_a(&self, _h: &[f64], _y: f64, _a: &[f64], _out: &mut [f64]) {}
    fn hess_h(&self, h: &[f64], _y: f64, _a: &[f64], out: &mut [f64]) {
        let p = sigmoid(h[0]);
        out[0] = p * (1.0 - p);
    }
}

/// `ŷ = σ(a h¹ h²)` with cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct XorBilinear;

impl LossModel for XorBilinear {
    fn kind(&self) -> ModelKind {
        ModelKind::XorBilinear
    }
    fn width(&self) -> usize {
        2
    }
    fn head_width(&self) -> usize {
        1
    }
    fn predict(&self, h: &[f64], a: &[f64]) -> f64 {
        sigmoid(a[0] * h[0] * h[1])
    }
    fn psi(&self, h: &[f64], y: f64, a: &[f64]) -> f64 {
        logit_ce(a[0] * h[0] * h[1], y)
    }
    fn grad_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let r = sigmoid(a[0] * h[0] * h[1]) - y;
        out[0] = r * a[0] * h[1];
        out[1] = r * a[0] * h[0];
    }
    fn grad_a(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let r = sigmoid(a[0] * h[0] * h[1]) - y;
        out[0] = r * h[0] * h[1];
    }
    fn hess_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let a = a[0];
        let p = sigmoid(a * h[0] * h[1]);
        let s = p * (1.0 - p);
        let off = s * a * a * h[0] * h[1] + (p - y) * a;
        out[0] = s * a * a * h[1] * h[1];
        out[1] = off;
        out[2] = off;
        out[3] = s * a * a * h[0] * h[0];
    }
}

/// `ŷ = σ(Σ_k a_k tanh h_k)` with cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2Tanh {
    width: usize,
}

impl Mlp2Tanh {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::config("mlp2-tanh needs width >= 1"));
        }
        Ok(Mlp2Tanh { width })
    }

    fn logit(&self, h: &[f64], a: &[f64]) -> f64 {
        h.iter().zip(a).map(|(hk, ak)| ak * hk.tanh()).sum()
    }
}

impl LossModel for Mlp2Tanh {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp2Tanh
    }
    fn width(&self) -> usize {
        self.width
    }
    fn head_width(&self) -> usize {
        self.width
    }
    fn predict(&self, h: &[f64], a: &[f64]) -> f64 {
        sigmoid(self.logit(h, a))
    }
    fn psi(&self, h: &[f64], y: f64, a: &[f64]) -> f64 {
        logit_ce(self.logit(h, a), y)
    }
    fn grad_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let r = sigmoid(self.logit(h, a)) - y;
        for k in 0..self.width {
            let t = h[k].tanh();
            out[k] = r * a[k] * (1.0 - t * t);
        }
    }
    fn grad_a(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let r = sigmoid(self.logit(h, a)) - y;
        for k in 0..self.width {
            out[k] = r * h[k].tanh();
        }
    }
    fn hess_h(&self, h: &[f64], y: f64, a: &[f64], out: &mut [f64]) {
        let l = self.width;
        let p = sigmoid(self.logit(h, a));
        let s = p * (1.0 - p);
        let r = p - y;
        for k in 0..l {
            let tk = h[k].tanh();
            let sk = 1.0 - tk * tk;
            for m in 0..l {
                let tm = h[m].tanh();
                let sm = 1.0 - tm * tm;
                out[k * l + m] = s * a[k] * a[m] * sk * sm;
            }
            out[k * l + k] += r * a[k] * (-2.0 * tk * sk);
        }
    }
}

/// Build a catalog entry. `width` is the pre-activation width `L`.
pub fn make_model(kind: &str, width: usize) -> Result<Box<dyn LossModel>> {
    let kind: ModelKind = kind.parse()?;
    make_model_kind(kind, width)
}

pub fn make_model_kind(kind: ModelKind, width: usize) -> Result<Box<dyn LossModel>> {
    let need = |w: usize| {
        if width == w {
            Ok(())
        } else {
            Err(Error::config(format!("{kind} has width {w}, got {width}")))
        }
    };
    Ok(match kind {
        ModelKind::LinearMse => {
            need(1)?;
            Box::new(LinearMse)
        }
        ModelKind::GlmCe => {
            need(1)?;
            Box::new(GlmCe)
        }
        ModelKind::XorBilinear => {
            need(2)?;
            Box::new(XorBilinear)
        }
        ModelKind::Mlp2Tanh => Box::new(Mlp2Tanh::new(width)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::LN_2;

    #[test]
    fn catalog_ids_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.id().parse::<ModelKind>().unwrap(), k);
        }
        assert!(matches!(
            make_model("resnet", 1),
            Err(Error::UnknownModel(_))
        ));
        assert!(make_model("xor-bilinear", 3).is_err());
        assert!(make_model("linear-mse", 2).is_err());
        assert!(make_model("mlp2-tanh", 0).is_err());
        assert_eq!(make_model("mlp2-tanh", 9).unwrap().head_width(), 9);
    }

    #[test]
    fn linear_mse_gradient() {
        let m = make_model("linear-mse", 1).unwrap();
        let mut g = [0.0];
        m.grad_h(&[0.3], 1.0, &[], &mut g);
        assert_eq!(g[0], 0.3 - 1.0);
        assert_eq!(m.psi(&[0.3], 0.0, &[]), 0.5 * 0.09);
    }

    #[test]
    fn xor_hessian_matches_closed_form() {
        let m = XorBilinear;
        let (h1, h2, a, y) = (0.7, -1.3, 0.9, 1.0);
        let p = sigmoid(a * h1 * h2);
        let mut hess = [0.0; 4];
        m.hess_h(&[h1, h2], y, &[a], &mut hess);
        let w = p * (1.0 - p) * a * a;
        assert_relative_eq!(hess[0], w * h2 * h2, epsilon = 1e-15);
        assert_relative_eq!(hess[3], w * h1 * h1, epsilon = 1e-15);
        assert_relative_eq!(hess[1], w * h1 * h2 + a * (p - y), epsilon = 1e-15);
        assert_eq!(hess[1], hess[2]);
    }

    #[test]
    fn mlp_with_zero_head_has_zero_grad_h() {
        let m = Mlp2Tanh::new(3).unwrap();
        let mut g = [1.0; 3];
        m.grad_h(&[0.2, -0.5, 1.1], 1.0, &[0.0; 3], &mut g);
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn uninformative_prediction_costs_log_two() {
        for y in [0.0, 1.0] {
            assert_eq!(GlmCe.psi(&[0.0], y, &[]), LN_2);
            assert_eq!(XorBilinear.psi(&[0.0, 3.0], y, &[2.0]), LN_2);
            assert_eq!(XorBilinear.psi(&[1.0, 3.0], y, &[0.0]), LN_2);
            let m = Mlp2Tanh::new(4).unwrap();
            assert_eq!(m.psi(&[0.3, 1.0, -2.0, 0.1], y, &[0.0; 4]), LN_2);
        }
    }

    #[test]
    fn cross_entropy_is_finite_and_nonnegative_when_saturated() {
        for z in [-800.0, -40.0, 0.0, 40.0, 800.0] {
            for y in [0.0, 1.0] {
                let v = GlmCe.psi(&[z], y, &[]);
                assert!(v.is_finite() && v >= 0.0, "z={z} y={y} psi={v}");
            }
        }
        assert_relative_eq!(GlmCe.psi(&[800.0], 0.0, &[]), 800.0, epsilon = 1e-12);
    }

    #[test]
    fn xor_grad_h_growth_bound() {
        let m = XorBilinear;
        let mut g = [0.0; 2];
        for &a in &[-3.0, -0.5, 0.0, 1.0, 4.0] {
            for i in -10..=10 {
                for j in -10..=10 {
                    let h = [i as f64 * 0.7, j as f64 * 0.9];
                    for y in [0.0, 1.0] {
                        m.grad_h(&h, y, &[a], &mut g);
                        let bound = f64::abs(a) * (h[0].abs() + h[1].abs()) + 1e-12;
                        assert!(g[0].abs() <= bound && g[1].abs() <= bound);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_gradient_adapter_forwards() {
        let m = XorBilinear;
        let act = LossGradient(&m);
        let (h, a) = ([0.4, -0.2], [1.5]);
        let (mut g1, mut g2) = ([0.0; 2], [0.0; 2]);
        act.g(&h, 1.0, &a, &mut g1);
        m.grad_h(&h, 1.0, &a, &mut g2);
        assert_eq!(g1, g2);
        assert_eq!(act.width(), 2);
        assert_eq!(act.head_width(), 1);
    }

    #[test]
    fn mean_psi_averages_rows() {
        let h = ndarray::array![[0.0], [2.0]];
        let y = ndarray::array![0.0, 0.0];
        assert_eq!(LinearMse.mean_psi(&h.view(), &y.view(), &[]), 1.0);
    }
}
