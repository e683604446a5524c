//! Model parameters, interaction kernels and the structural constants of the
//! synchronous-coupling argument.
//!
//! The interaction kernel `K` enters the dynamics only through its
//! derivatives; the bound `d2_sup >= sup |K''|` is carried alongside so the
//! smallness predicate `lambda * d2_sup <= min(gamma, 1/gamma) / 8` is
//! certified rather than sampled.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue floor used for every symmetric matrix square root.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Serializable descriptor of a builtin kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Zero,
    /// `K(x) = a x^2 + b x`.
    QuadraticLinear { a: f64, b: f64 },
    /// `K(x) = amplitude * sin(x)`.
    Sine { amplitude: f64 },
    /// `K(x) = height * exp(-x^2 / (2 width^2))`.
    GaussianBump { height: f64, width: f64 },
    /// `x -> (K(x) + K(-x)) / 2`.
    Symmetrized { inner: Box<KernelSpec> },
}

impl KernelSpec {
    fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("kernel parameter `{name}` must be finite, got {v}")))
            }
        };
        match self {
            KernelSpec::Zero => Ok(()),
            KernelSpec::QuadraticLinear { a, b } => {
                finite("a", *a)?;
                finite("b", *b)
            }
            KernelSpec::Sine { amplitude } => finite("amplitude", *amplitude),
            KernelSpec::GaussianBump { height, width } => {
                finite("height", *height)?;
                finite("width", *width)?;
                if *width <= 0.0 {
                    return Err(Error::Config(format!("gaussian_bump width must be positive, got {width}")));
                }
                Ok(())
            }
            KernelSpec::Symmetrized { inner } => inner.validate(),
        }
    }

    fn eval(&self, x: f64, order: u8) -> f64 {
        match self {
            KernelSpec::Zero => 0.0,
            KernelSpec::QuadraticLinear { a, b } => match order {
                0 => a * x * x + b * x,
                1 => 2.0 * a * x + b,
                _ => 2.0 * a,
            },
            KernelSpec::Sine { amplitude: c } => match order {
                0 => c * x.sin(),
                1 => c * x.cos(),
                _ => -c * x.sin(),
            },
            KernelSpec::GaussianBump { height, width } => {
                let w2 = width * width;
                let e = height * (-0.5 * x * x / w2).exp();
                match order {
                    0 => e,
                    1 => -x / w2 * e,
                    _ => (x * x / w2 - 1.0) / w2 * e,
                }
            }
            KernelSpec::Symmetrized { inner } => {
                let (p, m) = (inner.eval(x, order), inner.eval(-x, order));
                // d/dx of K(-x) flips sign on odd orders
                if order == 1 {
                    0.5 * (p - m)
                } else {
                    0.5 * (p + m)
                }
            }
        }
    }

    /// Exact `sup |K''|` of the builtin.
    fn d2_sup(&self) -> f64 {
        match self {
            KernelSpec::Zero => 0.0,
            KernelSpec::QuadraticLinear { a, .. } => 2.0 * a.abs(),
            KernelSpec::Sine { amplitude } => amplitude.abs(),
            // |(s - 1) e^{-s/2}| peaks at s = 0
            KernelSpec::GaussianBump { height, width } => height.abs() / (width * width),
            KernelSpec::Symmetrized { inner } => inner.even_part_d2_sup(),
        }
    }

    fn even_part_d2_sup(&self) -> f64 {
        match self {
            KernelSpec::Sine { .. } | KernelSpec::Zero => 0.0,
            KernelSpec::Symmetrized { inner } => inner.even_part_d2_sup(),
            other => other.d2_sup(),
        }
    }

    fn is_even(&self) -> bool {
        match self {
            KernelSpec::Zero | KernelSpec::GaussianBump { .. } | KernelSpec::Symmetrized { .. } => true,
            KernelSpec::QuadraticLinear { b, .. } => *b == 0.0,
            KernelSpec::Sine { amplitude } => *amplitude == 0.0,
        }
    }

    fn quadratic_coefficients(&self) -> Option<(f64, f64)> {
        match self {
            KernelSpec::Zero => Some((0.0, 0.0)),
            KernelSpec::QuadraticLinear { a, b } => Some((*a, *b)),
            KernelSpec::Symmetrized { inner } => inner.quadratic_coefficients().map(|(a, _)| (a, 0.0)),
            _ => None,
        }
    }

    fn sine_amplitude(&self) -> Option<f64> {
        match self {
            KernelSpec::Sine { amplitude } => Some(*amplitude),
            _ => None,
        }
    }
}

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

struct CustomKernel {
    k: Box<ScalarFn>,
    d1: Box<ScalarFn>,
    d2: Box<ScalarFn>,
}

#[derive(Clone)]
enum Shape {
    Builtin(KernelSpec),
    Custom(Arc<CustomKernel>),
}

/// Interaction potential `K` together with its first two derivatives and a
/// certified bound on `|K''|`.
#[derive(Clone)]
pub struct InteractionKernel {
    shape: Shape,
    d2_sup: f64,
    is_even: bool,
}

impl fmt::Debug for InteractionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("InteractionKernel");
        match &self.shape {
            Shape::Builtin(spec) => s.field("spec", spec),
            Shape::Custom(_) => s.field("spec", &"custom"),
        };
        s.field("d2_sup", &self.d2_sup).field("is_even", &self.is_even).finish()
    }
}

/// Builds one of the builtin kernels with its exact `d2_sup`.
pub fn builtin_kernel(spec: &KernelSpec) -> Result<InteractionKernel> {
    spec.validate()?;
    Ok(InteractionKernel {
        d2_sup: spec.d2_sup(),
        is_even: spec.is_even(),
        shape: Shape::Builtin(spec.clone()),
    })
}

impl InteractionKernel {
    pub fn zero() -> Self {
        builtin_kernel(&KernelSpec::Zero).expect("zero kernel is valid")
    }

    pub fn quadratic_linear(a: f64, b: f64) -> Result<Self> {
        builtin_kernel(&KernelSpec::QuadraticLinear { a, b })
    }

    pub fn sine(amplitude: f64) -> Result<Self> {
        builtin_kernel(&KernelSpec::Sine { amplitude })
    }

    pub fn gaussian_bump(height: f64, width: f64) -> Result<Self> {
        builtin_kernel(&KernelSpec::GaussianBump { height, width })
    }

    /// User-supplied kernel. The bound `d2_sup` is trusted, not checked.
    pub fn custom<K, D1, D2>(k: K, d1: D1, d2: D2, d2_sup: f64, is_even: bool) -> Result<Self>
    where
        K: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(d2_sup >= 0.0 && d2_sup.is_finite()) {
            return Err(Error::Config(format!("custom kernel d2_sup must be finite and >= 0, got {d2_sup}")));
        }
        Ok(Self {
            shape: Shape::Custom(Arc::new(CustomKernel { k: Box::new(k), d1: Box::new(d1), d2: Box::new(d2) })),
            d2_sup,
            is_even,
        })
    }

    /// Even part `(K(x) + K(-x)) / 2` of this kernel.
    pub fn symmetrized(&self) -> Self {
        match &self.shape {
            Shape::Builtin(spec) => builtin_kernel(&KernelSpec::Symmetrized { inner: Box::new(spec.clone()) })
                .expect("inner spec already validated"),
            Shape::Custom(c) => {
                let (a, b, c2) = (c.clone(), c.clone(), c.clone());
                Self {
                    shape: Shape::Custom(Arc::new(CustomKernel {
                        k: Box::new(move |x| 0.5 * ((a.k)(x) + (a.k)(-x))),
                        d1: Box::new(move |x| 0.5 * ((b.d1)(x) - (b.d1)(-x))),
                        d2: Box::new(move |x| 0.5 * ((c2.d2)(x) + (c2.d2)(-x))),
                    })),
                    d2_sup: self.d2_sup,
                    is_even: true,
                }
            }
        }
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Builtin(spec) => spec.eval(x, 0),
            Shape::Custom(c) => (c.k)(x),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Builtin(spec) => spec.eval(x, 1),
            Shape::Custom(c) => (c.d1)(x),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Builtin(spec) => spec.eval(x, 2),
            Shape::Custom(c) => (c.d2)(x),
        }
    }

    pub fn d2_sup(&self) -> f64 {
        self.d2_sup
    }

    pub fn is_even(&self) -> bool {
        self.is_even
    }

    pub fn spec(&self) -> Option<&KernelSpec> {
        match &self.shape {
            Shape::Builtin(spec) => Some(spec),
            Shape::Custom(_) => None,
        }
    }

    /// `(a, b)` when the kernel is exactly `a x^2 + b x` (zero kernel included).
    pub fn quadratic_coefficients(&self) -> Option<(f64, f64)> {
        self.spec().and_then(KernelSpec::quadratic_coefficients)
    }

    /// Amplitude `c` when the kernel is exactly `c sin(x)`.
    pub fn sine_amplitude(&self) -> Option<f64> {
        self.spec().and_then(KernelSpec::sine_amplitude)
    }
}

/// Friction, interaction strength and kernel.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub gamma: f64,
    pub lambda: f64,
    pub kernel: InteractionKernel,
}

impl ModelParams {
    pub fn new(gamma: f64, lambda: f64, kernel: InteractionKernel) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive and finite, got {gamma}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative and finite, got {lambda}")));
        }
        Ok(Self { gamma, lambda, kernel })
    }

    /// `min(gamma, 1/gamma)`.
    pub fn gamma_min(&self) -> f64 {
        self.gamma.min(self.gamma.recip())
    }

    /// Interaction strength at which the smallness condition is an equality.
    pub fn smallness_threshold(&self) -> f64 {
        self.gamma_min() / 8.0
    }
}

/// `lambda * sup|K''| <= min(gamma, 1/gamma) / 8`.
pub fn smallness_holds(params: &ModelParams) -> bool {
    params.lambda * params.kernel.d2_sup() <= params.smallness_threshold()
}

/// Constants of the modified coupling norm `|dx + a dv|^2 + b |dv|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingConstants {
    pub a: f64,
    pub b: f64,
    /// `[[1, -a], [-a, b + a^2]]`.
    pub m: Matrix2<f64>,
    /// Symmetric square root of `M^{-1}`.
    pub a_mat: Matrix2<f64>,
}

impl CouplingConstants {
    /// Gram matrix of the modified norm in `(dx, dv)` coordinates.
    pub fn modified_gram(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, self.a, self.a, self.a * self.a + self.b)
    }

    /// `max(2, b + 2a^2) / min(1/2, b / (1 + 2a^2))`.
    pub fn norm_equivalence_ratio(&self) -> f64 {
        let a2 = self.a * self.a;
        (self.b + 2.0 * a2).max(2.0) / (self.b / (1.0 + 2.0 * a2)).min(0.5)
    }

    /// Decay rate `a/4` of the squared modified norm.
    pub fn squared_norm_rate(&self) -> f64 {
        self.a / 4.0
    }
}

/// Symmetric square root via eigendecomposition, eigenvalues floored at [`EIGEN_FLOOR`].
pub fn sym_sqrt(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt());
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root, same floor as [`sym_sqrt`].
pub fn sym_inv_sqrt(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt().recip());
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `a = min(gamma, 1/gamma)/2`, `b = 1 + a^2 - a gamma`, `M` and `A = M^{-1/2}`.
///
/// # Panics
/// If `gamma` is not positive and finite.
pub fn coupling_constants(gamma: f64) -> CouplingConstants {
    assert!(gamma > 0.0 && gamma.is_finite(), "gamma must be positive, got {gamma}");
    let a = 0.5 * gamma.min(gamma.recip());
    let b = 1.0 + a * a - a * gamma;
    let m = Matrix2::new(1.0, -a, -a, b + a * a);
    CouplingConstants { a, b, m, a_mat: sym_inv_sqrt(&m) }
}

/// Probability weights on real sample points (an x-marginal).
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Marginal {
    /// Fails unless the weights are nonnegative and sum to one within `1e-10`.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::Contract(format!(
                "marginal needs matching, nonempty points/weights ({} vs {})",
                points.len(),
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Contract(format!("marginal is not normalized (total weight {total})")));
        }
        Ok(Self { points, weights })
    }

    pub fn point_mass(at: f64) -> Self {
        Self { points: vec![at], weights: vec![1.0] }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.points.iter().zip(&self.weights).map(|(p, w)| w * (p - m) * (p - m)).sum()
    }

    /// Quadrature of `(g * rho)(x) = sum_j w_j g(x - y_j)`.
    pub fn convolve(&self, x: f64, g: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(y, w)| w * g(x - y)).sum()
    }
}

/// `F_f(x) = -lambda * sum_j w_j K'(x - y_j)`.
pub fn mean_field_force(params: &ModelParams, x: f64, marginal: &Marginal) -> f64 {
    -params.lambda * marginal.convolve(x, |d| params.kernel.d1(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn gamma_grid() -> Vec<f64> {
        (-4..=4).map(|k| 2f64.powi(k)).collect()
    }

    #[test]
    fn quadratic_linear_values() {
        let k = InteractionKernel::quadratic_linear(1.0, 2.0).unwrap();
        assert_eq!(k.evaluate(1.0), 3.0);
        assert_eq!(k.d1(1.0), 4.0);
        assert_eq!(k.d2(1.0), 2.0);
        assert_eq!(k.d2_sup(), 2.0);
        assert!(!k.is_even());
    }

    #[test]
    fn sine_kernel_bound_and_parity() {
        let k = InteractionKernel::sine(1.0).unwrap();
        assert_eq!(k.d2_sup(), 1.0);
        assert!(!k.is_even());
        assert_eq!(InteractionKernel::sine(-3.0).unwrap().d2_sup(), 3.0);
    }

    #[test]
    fn symmetrized_linear_part_cancels() {
        let k = InteractionKernel::quadratic_linear(0.0, 5.0).unwrap().symmetrized();
        for x in [-3.0, -0.5, 0.0, 0.25, 7.0] {
            assert_eq!(k.evaluate(x), 0.0);
            assert_eq!(k.d1(x), 0.0);
        }
        assert!(k.is_even());
        assert_eq!(k.d2_sup(), 0.0);
        assert_eq!(k.quadratic_coefficients(), Some((0.0, 0.0)));
    }

    #[test]
    fn symmetrized_sine_is_identically_zero() {
        let k = InteractionKernel::sine(2.0).unwrap().symmetrized();
        assert_eq!(k.d2_sup(), 0.0);
        for x in [-1.0, 0.3, 2.0] {
            assert_abs_diff_eq!(k.evaluate(x), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(k.d1(x), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_bump_bound_is_attained_at_origin() {
        let k = InteractionKernel::gaussian_bump(2.0, 0.5).unwrap();
        assert_eq!(k.d2_sup(), 8.0);
        assert_abs_diff_eq!(k.d2(0.0).abs(), 8.0, epsilon = 1e-12);
        assert!(k.is_even());
    }

    #[test]
    fn unknown_descriptor_is_a_config_error() {
        let err = serde_json::from_str::<KernelSpec>(r#"{"type": "coulomb"}"#);
        assert!(err.is_err());
        let bad = builtin_kernel(&KernelSpec::GaussianBump { height: 1.0, width: 0.0 });
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn descriptor_json_round_trip() {
        let spec = KernelSpec::Symmetrized { inner: Box::new(KernelSpec::QuadraticLinear { a: 0.5, b: 1.0 }) };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<KernelSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn smallness_examples() {
        let sine = InteractionKernel::sine(1.0).unwrap();
        assert!(smallness_holds(&ModelParams::new(1.0, 0.125, sine.clone()).unwrap()));
        assert!(!smallness_holds(&ModelParams::new(1.0, 0.2, sine).unwrap()));
        for g in gamma_grid() {
            assert!(smallness_holds(&ModelParams::new(g, 0.0, InteractionKernel::zero()).unwrap()));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ModelParams::new(0.0, 0.1, InteractionKernel::zero()).is_err());
        assert!(ModelParams::new(1.0, -0.1, InteractionKernel::zero()).is_err());
        assert!(ModelParams::new(f64::NAN, 0.1, InteractionKernel::zero()).is_err());
    }

    #[test]
    fn coupling_constants_gamma_one() {
        let c = coupling_constants(1.0);
        assert_eq!(c.a, 0.5);
        assert_eq!(c.b, 0.75);
        assert_eq!(c.m, Matrix2::new(1.0, -0.5, -0.5, 1.0));
        assert_abs_diff_eq!(c.m.determinant(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn coupling_constants_gamma_two() {
        let c = coupling_constants(2.0);
        assert_eq!(c.a, 0.25);
        assert_eq!(c.b, 0.5625);
        assert_abs_diff_eq!(c.m, Matrix2::new(1.0, -0.25, -0.25, 0.625), epsilon = 1e-15);
        assert_abs_diff_eq!(c.m.determinant(), c.b, epsilon = 1e-15);
    }

    #[test]
    fn coupling_identities_on_gamma_grid() {
        for g in gamma_grid() {
            let c = coupling_constants(g);
            assert!((0.5..=1.25).contains(&c.b), "b = {} at gamma {g}", c.b);
            assert_abs_diff_eq!(c.m.determinant(), c.b, epsilon = 1e-12);
            assert!((c.a_mat - c.a_mat.transpose()).abs().max() < 1e-15);
            let ident = c.a_mat * c.a_mat * c.m;
            assert!((ident - Matrix2::identity()).abs().max() < 1e-12);
            assert_abs_diff_eq!(c.norm_equivalence_ratio(), 4.0, epsilon = 1e-12);
            // the ratio bounds the true condition number of the modified norm
            let eig = SymmetricEigen::new(c.modified_gram()).eigenvalues;
            assert!(eig.max() / eig.min() <= 4.0 + 1e-12);
        }
    }

    #[test]
    fn sym_sqrt_matches_closed_form() {
        // 2x2 closed form: sqrt(S) = (S + sqrt(det) I) / sqrt(tr + 2 sqrt(det))
        let s: Matrix2<f64> = Matrix2::new(2.0, 0.3, 0.3, 0.7);
        let sd = s.determinant().sqrt();
        let closed = (s + Matrix2::identity() * sd) / (s.trace() + 2.0 * sd).sqrt();
        assert!((sym_sqrt(&s) - closed).abs().max() < 1e-14);
    }

    #[test]
    fn mean_field_force_examples() {
        let m = Marginal::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let zero = ModelParams::new(1.0, 0.7, InteractionKernel::zero()).unwrap();
        assert_eq!(mean_field_force(&zero, 1.3, &m), 0.0);

        let (a, b, lambda) = (0.7, -0.4, 0.3);
        let quad = ModelParams::new(1.0, lambda, InteractionKernel::quadratic_linear(a, b).unwrap()).unwrap();
        for x in [-2.0, 0.0, 1.7] {
            let analytic = -lambda * (2.0 * a * (x - m.mean()) + b);
            assert_abs_diff_eq!(mean_field_force(&quad, x, &m), analytic, epsilon = 1e-10);
        }

        let sine = ModelParams::new(1.0, 0.4, InteractionKernel::sine(1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(mean_field_force(&sine, PI / 2.0, &Marginal::point_mass(0.0)), 0.0, epsilon = 1e-16);
    }

    #[test]
    fn unnormalized_marginal_is_rejected() {
        assert!(matches!(Marginal::new(vec![0.0, 1.0], vec![0.5, 0.6]), Err(Error::Contract(_))));
    }

    fn any_spec() -> impl Strategy<Value = KernelSpec> {
        let leaf = prop_oneof![
            Just(KernelSpec::Zero),
            (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b)| KernelSpec::QuadraticLinear { a, b }),
            (-3.0..3.0f64).prop_map(|amplitude| KernelSpec::Sine { amplitude }),
            (-3.0..3.0f64, 0.2..3.0f64).prop_map(|(height, width)| KernelSpec::GaussianBump { height, width }),
        ];
        leaf.prop_recursive(2, 4, 1, |inner| inner.prop_map(|i| KernelSpec::Symmetrized { inner: Box::new(i) }))
    }

    proptest! {
        #[test]
        fn d2_bounded_by_certified_sup(spec in any_spec(), xs in prop::collection::vec(-20.0..20.0f64, 64)) {
            let k = builtin_kernel(&spec).unwrap();
            for x in xs {
                prop_assert!(k.d2(x).abs() <= k.d2_sup() * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn d1_central_difference_matches_d2(spec in any_spec(), x in -6.0..6.0f64) {
            let k = builtin_kernel(&spec).unwrap();
            let h = 1e-4;
            let fd = (k.d1(x + h) - k.d1(x - h)) / (2.0 * h);
            // O(h^2) truncation scaled by the third derivative, plus roundoff
            prop_assert!((fd - k.d2(x)).abs() <= 1e-6 * (1.0 + k.d2_sup()));
        }

        #[test]
        fn smallness_is_monotone_in_lambda(gamma in 0.05..20.0f64, lambda in 0.0..1.0f64, shrink in 0.0..1.0f64) {
            let k = InteractionKernel::sine(1.0).unwrap();
            let big = ModelParams::new(gamma, lambda, k.clone()).unwrap();
            let small = ModelParams::new(gamma, lambda * shrink, k).unwrap();
            prop_assert!(!smallness_holds(&big) || smallness_holds(&small));
        }

        #[test]
        fn coupling_identities_any_gamma(gamma in 0.0625..16.0f64) {
            let c = coupling_constants(gamma);
            prop_assert!((0.5..=1.25).contains(&c.b));
            prop_assert!((c.norm_equivalence_ratio() - 4.0).abs() < 1e-12);
            prop_assert!((c.a_mat * c.a_mat * c.m - Matrix2::identity()).abs().max() < 1e-12);
        }
    }
}
