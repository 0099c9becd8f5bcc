//! Finite Gaussian-mixture data and empirical overlaps.
//!
//! A sample is drawn by picking a mode `j` with probability `p_j`, then
//! `x = μ_j / d + z` with `z` either `N(0, I/d)` or the three-point law
//! `±√(2/d)` (each w.p. 1/4), `0` (w.p. 1/2), and `y ~ P_j`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// A finite discrete response law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponseLaw {
    PointMass {
        value: f64,
    },
    /// `value` with probability `1 - prob`, `flipped` with probability `prob`.
    Flip {
        value: f64,
        flipped: f64,
        prob: f64,
    },
    Discrete {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl ResponseLaw {
    pub fn point_mass(value: f64) -> Self {
        ResponseLaw::PointMass { value }
    }

    /// Support points and their probabilities.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            ResponseLaw::PointMass { value } => vec![(*value, 1.0)],
            ResponseLaw::Flip {
                value,
                flipped,
                prob,
            } => vec![(*value, 1.0 - prob), (*flipped, *prob)],
            ResponseLaw::Discrete { values, probs } => {
                values.iter().copied().zip(probs.iter().copied()).collect()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms().iter().map(|(v, p)| v * p).sum()
    }

    fn validate(&self) -> Result<()> {
        match self {
            ResponseLaw::PointMass { value } if !value.is_finite() => {
                Err(Error::config("point-mass value must be finite"))
            }
            ResponseLaw::Flip { prob, .. } if !(0.0..=1.0).contains(prob) => Err(Error::config(
                format!("flip probability {prob} outside [0, 1]"),
            )),
            ResponseLaw::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::config(
                        "discrete law needs equally many values and probabilities",
                    ));
                }
                if probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::config("discrete law has a negative probability"));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "discrete law probabilities sum to {s}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ResponseLaw::PointMass { value } => *value,
            ResponseLaw::Flip {
                value,
                flipped,
                prob,
            } => {
                if rng.random::<f64>() < *prob {
                    *flipped
                } else {
                    *value
                }
            }
            ResponseLaw::Discrete { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("validated non-empty")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    ThreePoint,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "three-point" => Ok(NoiseKind::ThreePoint),
            other => Err(Error::config(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Serializable form of a [`MixtureSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub dimension: usize,
    #[serde(default)]
    pub noise: NoiseKind,
    pub class_probs: Vec<f64>,
    pub signal_vectors: Vec<Vec<f64>>,
    pub response_laws: Vec<ResponseLaw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    dimension: usize,
    signals: Array2<f64>,
    class_probs: Vec<f64>,
    response_laws: Vec<ResponseLaw>,
    noise: NoiseKind,
    chi: Array2<f64>,
}

impl MixtureSpec {
    /// Validate and build a spec. Class probabilities are normalized.
    pub fn new(
        signals: Array2<f64>,
        class_probs: Vec<f64>,
        response_laws: Vec<ResponseLaw>,
        noise: NoiseKind,
    ) -> Result<Self> {
        let (j, d) = signals.dim();
        if j == 0 || d == 0 {
            return Err(Error::config("need at least one mode and dimension >= 1"));
        }
        if class_probs.len() != j || response_laws.len() != j {
            return Err(Error::config(format!(
                "{j} signal vectors but {} class probabilities and {} response laws",
                class_probs.len(),
                response_laws.len()
            )));
        }
        if signals.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("signal vectors must be finite"));
        }
        if class_probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::config("class probabilities must be finite and >= 0"));
        }
        let total: f64 = class_probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("class probabilities sum to zero"));
        }
        let class_probs: Vec<f64> = class_probs.iter().map(|p| p / total).collect();
        for law in &response_laws {
            law.validate()?;
        }
        let chi = gram(&signals.view());
        Ok(MixtureSpec {
            dimension: d,
            signals,
            class_probs,
            response_laws,
            noise,
            chi,
        })
    }

    pub fn from_config(cfg: &MixtureConfig) -> Result<Self> {
        let j = cfg.signal_vectors.len();
        let d = cfg.dimension;
        if let Some(bad) = cfg.signal_vectors.iter().position(|v| v.len() != d) {
            return Err(Error::config(format!(
                "signal vector {} has length {}, expected {d}",
                bad + 1,
                cfg.signal_vectors[bad].len()
            )));
        }
        let flat: Vec<f64> = cfg.signal_vectors.iter().flatten().copied().collect();
        let signals =
            Array2::from_shape_vec((j, d), flat).map_err(|e| Error::config(e.to_string()))?;
        MixtureSpec::new(
            signals,
            cfg.class_probs.clone(),
            cfg.response_laws.clone(),
            cfg.noise,
        )
    }

    pub fn to_config(&self) -> MixtureConfig {
        MixtureConfig {
            dimension: self.dimension,
            noise: self.noise,
            class_probs: self.class_probs.clone(),
            signal_vectors: self.signals.outer_iter().map(|r| r.to_vec()).collect(),
            response_laws: self.response_laws.clone(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MixtureConfig = toml::from_str(text)?;
        MixtureSpec::from_config(&cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.to_config())?)
    }

    pub fn with_noise(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_modes(&self) -> usize {
        self.class_probs.len()
    }

    /// Signal vectors as rows of a `J x d` matrix.
    pub fn signals(&self) -> ArrayView2<'_, f64> {
        self.signals.view()
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn response_laws(&self) -> &[ResponseLaw] {
        &self.response_laws
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    /// Cached `χ = μ μᵀ / d`.
    pub fn chi(&self) -> &Array2<f64> {
        &self.chi
    }
}

fn gram(signals: &ArrayView2<f64>) -> Array2<f64> {
    let d = signals.ncols() as f64;
    let mut g = signals.dot(&signals.t()) / d;
    // Enforce exact symmetry regardless of summation order.
    let j = g.nrows();
    for a in 0..j {
        for b in 0..a {
            let v = 0.5 * (g[[a, b]] + g[[b, a]]);
            g[[a, b]] = v;
            g[[b, a]] = v;
        }
    }
    g
}

/// `χ_{jk} = μ_jᵀ μ_k / d`.
pub fn compute_chi(spec: &MixtureSpec) -> Array2<f64> {
    spec.chi.clone()
}

/// One mode with zero signal and labels identically zero.
pub fn build_signalless_spec(d: usize) -> Result<MixtureSpec> {
    if d == 0 {
        return Err(Error::config("dimension must be >= 1"));
    }
    MixtureSpec::new(
        Array2::zeros((1, d)),
        vec![1.0],
        vec![ResponseLaw::point_mass(0.0)],
        NoiseKind::Gaussian,
    )
}

/// Four-mode XOR mixture with `v = λ 1_{d/2}`.
///
/// Modes `[v, v]` and `[-v, -v]` carry label 0, modes `[-v, v]` and `[v, -v]`
/// carry label 1.
pub fn build_xor_spec(d: usize, lambda: f64) -> Result<MixtureSpec> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "XOR needs an even dimension, got {d}"
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("XOR needs lambda > 0, got {lambda}")));
    }
    let half = d / 2;
    let signs = [(1.0, 1.0), (-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0)];
    let mut signals = Array2::zeros((4, d));
    for (j, (s1, s2)) in signs.iter().enumerate() {
        for i in 0..d {
            signals[[j, i]] = lambda * if i < half { s1 } else { s2 };
        }
    }
    MixtureSpec::new(
        signals,
        vec![0.25; 4],
        vec![
            ResponseLaw::point_mass(0.0),
            ResponseLaw::point_mass(0.0),
            ResponseLaw::point_mass(1.0),
            ResponseLaw::point_mass(1.0),
        ],
        NoiseKind::Gaussian,
    )
}

/// Two balanced classes with antipodal means `±v`, where `v` has i.i.d.
/// `N(0, λ²)` entries drawn from `signal_seed`. Labels are 0 and 1, each
/// flipped with probability `flip`.
pub fn build_two_class_spec(
    d: usize,
    lambda: f64,
    flip: f64,
    signal_seed: u64,
) -> Result<MixtureSpec> {
    if d == 0 {
        return Err(Error::config("dimension must be >= 1"));
    }
    let mut rng = seeds::rng(signal_seed, &[d as u64]);
    let v: Vec<f64> = (0..d)
        .map(|_| lambda * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut signals = Array2::zeros((2, d));
    for i in 0..d {
        signals[[0, i]] = v[i];
        signals[[1, i]] = -v[i];
    }
    MixtureSpec::new(
        signals,
        vec![0.5, 0.5],
        vec![
            ResponseLaw::Flip {
                value: 0.0,
                flipped: 1.0,
                prob: flip,
            },
            ResponseLaw::Flip {
                value: 1.0,
                flipped: 0.0,
                prob: flip,
            },
        ],
        NoiseKind::Gaussian,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// CSV with one row per sample: `x_1..x_d, y, label` (label is 1-based).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.d()).map(|i| format!("x_{i}")).collect();
        header.push("y".into());
        header.push("label".into());
        w.write_record(&header)?;
        for (i, row) in self.x.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.y[i].to_string());
            rec.push((self.labels[i] + 1).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Draw `n` i.i.d. samples. Identical `(spec, n, seed)` give identical data.
pub fn sample_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n must be >= 1"));
    }
    let d = spec.dimension();
    let inv_d = 1.0 / d as f64;
    let sd = inv_d.sqrt();
    let spike = (2.0 * inv_d).sqrt();
    let picker = WeightedIndex::new(spec.class_probs())
        .map_err(|e| Error::config(format!("class probabilities: {e}")))?;
    let mut rng = seeds::rng(seed, &[]);

    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let j = picker.sample(&mut rng);
        labels.push(j);
        y[i] = spec.response_laws()[j].sample(&mut rng);
        let mu = spec.signals.row(j);
        match spec.noise() {
            NoiseKind::Gaussian => {
                for (xv, m) in row.iter_mut().zip(mu.iter()) {
                    let z: f64 = rng.sample(StandardNormal);
                    *xv = m * inv_d + sd * z;
                }
            }
            NoiseKind::ThreePoint => {
                for (xv, m) in row.iter_mut().zip(mu.iter()) {
                    let u: f64 = rng.random();
                    let z = if u < 0.25 {
                        -spike
                    } else if u < 0.5 {
                        spike
                    } else {
                        0.0
                    };
                    *xv = m * inv_d + z;
                }
            }
        }
    }
    Ok(Dataset { x, y, labels })
}

/// Finite-sample overlaps of a parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRecord {
    /// `J x L`, row `j` is `μ_jᵀ θ / d`.
    pub m: Array2<f64>,
    /// `θᵀ θ / d`.
    pub omega: Array2<f64>,
    /// `θᵀ θ̃ / d`.
    pub xi: Array2<f64>,
    /// `ĥᵀ ĥ / n`.
    pub sigma: Array2<f64>,
}

pub fn empirical_overlaps(
    theta: &ArrayView2<f64>,
    theta_tilde: &ArrayView2<f64>,
    h_hat: &ArrayView2<f64>,
    spec: &MixtureSpec,
) -> Result<OverlapRecord> {
    let d = spec.dimension();
    if theta.nrows() != d || theta_tilde.dim() != theta.dim() || h_hat.ncols() != theta.ncols() {
        return Err(Error::shape(format!(
            "theta {:?}, theta_tilde {:?}, h_hat {:?} with d = {d}",
            theta.dim(),
            theta_tilde.dim(),
            h_hat.dim()
        )));
    }
    let df = d as f64;
    let n = h_hat.nrows().max(1) as f64;
    Ok(OverlapRecord {
        m: spec.signals.dot(theta) / df,
        omega: theta.t().dot(theta) / df,
        xi: theta.t().dot(theta_tilde) / df,
        sigma: h_hat.t().dot(h_hat) / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn signalless_spec_has_zero_chi() {
        let s = build_signalless_spec(800).unwrap();
        assert_eq!(s.num_modes(), 1);
        assert_eq!(s.chi()[[0, 0]], 0.0);
        assert_eq!(compute_chi(&s), array![[0.0]]);
        let tiny = build_signalless_spec(1).unwrap();
        assert_eq!(tiny.signals().row(0).to_vec(), vec![0.0]);
        assert!(build_signalless_spec(0).is_err());
    }

    #[test]
    fn signalless_rows_average_to_zero() {
        let s = build_signalless_spec(4).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&s, n, 3).unwrap();
        let tol = 3.0 / ((n * 4) as f64).sqrt();
        for m in ds.x.mean_axis(Axis(0)).unwrap().iter() {
            assert!(m.abs() < tol, "{m} vs {tol}");
        }
    }

    #[test]
    fn xor_construction() {
        let s = build_xor_spec(2, 1.0).unwrap();
        assert_eq!(s.signals().row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(s.signals().row(2).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(s.class_probs(), &[0.25; 4]);
        assert!(build_xor_spec(3, 1.0).is_err());
        assert!(build_xor_spec(4, 0.0).is_err());

        let s = build_xor_spec(1000, 2.0).unwrap();
        let ip = s.signals().row(0).dot(&s.signals().row(2));
        assert_eq!(ip, 0.0);
    }

    #[test]
    fn xor_chi_matches_hand_computation() {
        for &(d, lambda) in &[(2usize, 1.0), (10, 4.0), (1000, 0.7)] {
            let s = build_xor_spec(d, lambda).unwrap();
            let l2: f64 = lambda * lambda;
            let expect = array![
                [1.0, -1.0, 0.0, 0.0],
                [-1.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, -1.0],
                [0.0, 0.0, -1.0, 1.0]
            ] * l2;
            for (got, want) in s.chi().iter().zip(expect.iter()) {
                assert_relative_eq!(*got, *want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chi_of_scaled_basis_vector() {
        let d = 9;
        let mut mu = Array2::zeros((1, d));
        mu[[0, 0]] = (d as f64).sqrt();
        let s = MixtureSpec::new(
            mu,
            vec![1.0],
            vec![ResponseLaw::point_mass(1.0)],
            NoiseKind::Gaussian,
        )
        .unwrap();
        assert_relative_eq!(s.chi()[[0, 0]], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn class_probs_are_normalized() {
        let s = MixtureSpec::new(
            Array2::zeros((2, 3)),
            vec![1.0, 3.0],
            vec![ResponseLaw::point_mass(0.0), ResponseLaw::point_mass(1.0)],
            NoiseKind::Gaussian,
        )
        .unwrap();
        let sum: f64 = s.class_probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(s.class_probs(), &[0.25, 0.75]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let laws = vec![ResponseLaw::point_mass(0.0)];
        assert!(MixtureSpec::new(
            Array2::zeros((1, 2)),
            vec![-1.0],
            laws.clone(),
            NoiseKind::Gaussian
        )
        .is_err());
        assert!(MixtureSpec::new(
            Array2::zeros((1, 2)),
            vec![1.0, 1.0],
            laws.clone(),
            NoiseKind::Gaussian
        )
        .is_err());
        let bad = vec![ResponseLaw::Discrete {
            values: vec![0.0, 1.0],
            probs: vec![0.5, 0.4],
        }];
        assert!(
            MixtureSpec::new(Array2::zeros((1, 2)), vec![1.0], bad, NoiseKind::Gaussian).is_err()
        );
    }

    #[test]
    fn sampling_shapes_and_labels() {
        let s = build_signalless_spec(800).unwrap();
        let ds = sample_dataset(&s, 200, 7).unwrap();
        assert_eq!(ds.x.dim(), (200, 800));
        assert!(ds.y.iter().all(|&v| v == 0.0));

        let x = build_xor_spec(4, 1.0).unwrap();
        let one = sample_dataset(&x, 1, 0).unwrap();
        assert_eq!(one.n(), 1);
        assert!(one.labels[0] < 4);
        assert!(sample_dataset(&x, 0, 0).is_err());
    }

    #[test]
    fn xor_labels_follow_modes() {
        let s = build_xor_spec(6, 2.0).unwrap();
        let ds = sample_dataset(&s, 500, 1).unwrap();
        for (i, &j) in ds.labels.iter().enumerate() {
            assert_eq!(ds.y[i], if j < 2 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn three_point_noise_moments() {
        let d = 10;
        let s = build_signalless_spec(d)
            .unwrap()
            .with_noise(NoiseKind::ThreePoint);
        let ds = sample_dataset(&s, 100_000, 11).unwrap();
        let spike = (2.0 / d as f64).sqrt();
        for col in ds.x.axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| v * v).mean().unwrap() - mean * mean;
            assert!((var - 0.1).abs() < 5e-3, "var {var}");
            assert!(col
                .iter()
                .all(|&v| v == 0.0 || (v.abs() - spike).abs() < 1e-15));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = build_xor_spec(8, 1.5).unwrap();
        assert_eq!(
            sample_dataset(&s, 50, 9).unwrap(),
            sample_dataset(&s, 50, 9).unwrap()
        );
        assert_ne!(
            sample_dataset(&s, 50, 9).unwrap().x,
            sample_dataset(&s, 50, 10).unwrap().x
        );
    }

    #[test]
    fn overlaps_of_zero_and_signal() {
        let s = build_xor_spec(4, 1.0).unwrap();
        let z = Array2::zeros((4, 2));
        let h = Array2::zeros((3, 2));
        let o = empirical_overlaps(&z.view(), &z.view(), &h.view(), &s).unwrap();
        assert!(o
            .m
            .iter()
            .chain(o.omega.iter())
            .chain(o.xi.iter())
            .chain(o.sigma.iter())
            .all(|&v| v == 0.0));

        let theta = s.signals().row(0).to_owned().insert_axis(Axis(1));
        let h = Array2::zeros((3, 1));
        let o = empirical_overlaps(&theta.view(), &theta.view(), &h.view(), &s).unwrap();
        assert_relative_eq!(o.m[[0, 0]], s.chi()[[0, 0]], epsilon = 1e-14);
        assert!(empirical_overlaps(&theta.view(), &z.view(), &h.view(), &s).is_err());
    }

    #[test]
    fn omega_of_iid_parameters_is_near_one() {
        let d = 100_000;
        let s = build_signalless_spec(d).unwrap();
        let mut rng = seeds::rng(5, &[]);
        let theta = Array2::from_shape_fn((d, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let h = Array2::zeros((1, 1));
        let o = empirical_overlaps(&theta.view(), &theta.view(), &h.view(), &s).unwrap();
        assert!((o.omega[[0, 0]] - 1.0).abs() < 0.02);
    }

    #[test]
    fn toml_round_trip() {
        let s = build_xor_spec(6, 1.5)
            .unwrap()
            .with_noise(NoiseKind::ThreePoint);
        let text = s.to_toml().unwrap();
        let back = MixtureSpec::from_toml(&text).unwrap();
        assert_eq!(back, s);

        let flip = build_two_class_spec(5, 1.0, 0.1, 3).unwrap();
        assert_eq!(
            MixtureSpec::from_toml(&flip.to_toml().unwrap()).unwrap(),
            flip
        );
    }

    #[test]
    fn dataset_csv_has_header_and_rows() {
        let s = build_xor_spec(2, 1.0).unwrap();
        let ds = sample_dataset(&s, 3, 0).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x_1,x_2,y,label");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn response_laws_sample_their_support() {
        let mut rng = seeds::rng(1, &[]);
        let law = ResponseLaw::Discrete {
            values: vec![-1.0, 2.0],
            probs: vec![0.3, 0.7],
        };
        let n = 20_000;
        let hits = (0..n).filter(|_| law.sample(&mut rng) == 2.0).count() as f64 / n as f64;
        assert!((hits - 0.7).abs() < 0.02);
        assert_relative_eq!(law.mean(), 1.1, epsilon = 1e-12);
        let flip = ResponseLaw::Flip {
            value: 1.0,
            flipped: 0.0,
            prob: 0.0,
        };
        assert!((0..100).all(|_| flip.sample(&mut rng) == 1.0));
    }
}
