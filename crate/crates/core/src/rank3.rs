//! Homogenized stiffness of the restricted (equilateral) rank-3 laminate.
//!
//! A cell is described by three relative layer widths and the normal angle of
//! the base layer (layer 3). The other two normals follow at fixed offsets of
//! `pi/3` and `2*pi/3`, so the three layer tangents always form an equilateral
//! triangle.
//!
//! The stiffness is evaluated in the rotated "moment" basis in which the
//! fourth-order plane tensor inverse is an ordinary 3x3 matrix inverse, and is
//! then mapped back to the Voigt matrix with ordering `(11, 22, 12)` and
//! engineering shear strain.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Box bound on the base-layer orientation.
pub const THETA_BOUND: f64 = 4.0 * PI;

/// Below this volume fraction the stiffness contributions fall back to 1/3 each.
const EMPTY_DENSITY: f64 = 1e-12;

/// Tolerance on the stiffness-contribution partition of unity.
const CONTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Rank3Error {
    #[error("layer width alpha{index} = {value} is outside [0, 1]")]
    WidthOutOfRange { index: usize, value: f64 },
    #[error("orientation {0} is outside [-4pi, 4pi]")]
    OrientationOutOfRange(f64),
    #[error("stiffness contributions {0:?} must be non-negative and sum to one")]
    InvalidContributions([f64; 3]),
    #[error("laminate inversion is numerically singular (reciprocal condition {rcond:e})")]
    Singular { rcond: f64 },
    #[error("invalid material constants: {0}")]
    InvalidMaterial(String),
}

/// Widths and base-layer orientation of one equilateral rank-3 cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaminateSpec {
    /// Relative widths of layers 1, 2 and 3.
    pub alpha: [f64; 3],
    /// Normal angle of layer 3 in radians.
    pub theta3: f64,
}

impl LaminateSpec {
    pub fn new(alpha: [f64; 3], theta3: f64) -> Result<Self, Rank3Error> {
        for (index, &value) in alpha.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Rank3Error::WidthOutOfRange {
                    index: index + 1,
                    value,
                });
            }
        }
        if !theta3.is_finite() || theta3.abs() > THETA_BOUND {
            return Err(Rank3Error::OrientationOutOfRange(theta3));
        }
        Ok(Self { alpha, theta3 })
    }

    pub fn volume_fraction(&self) -> f64 {
        volume_fraction(&self.alpha)
    }

    pub fn layer_densities(&self) -> [f64; 3] {
        layer_densities(&self.alpha)
    }

    /// Normal angles of layers 1, 2, 3.
    pub fn normal_angles(&self) -> [f64; 3] {
        equilateral_normals(self.theta3)
    }

    /// Unit normals `[cos, sin]` of layers 1, 2, 3.
    pub fn normals(&self) -> [[f64; 2]; 3] {
        self.normal_angles().map(|t| [t.cos(), t.sin()])
    }

    /// Unit tangents `[-sin, cos]` of layers 1, 2, 3.
    pub fn tangents(&self) -> [[f64; 2]; 3] {
        self.normal_angles().map(|t| [-t.sin(), t.cos()])
    }
}

/// Normal angles `(theta3 + 2pi/3, theta3 + pi/3, theta3)`.
pub fn equilateral_normals(theta3: f64) -> [f64; 3] {
    [theta3 + 2.0 * PI / 3.0, theta3 + PI / 3.0, theta3]
}

/// Young's moduli of the solid and void phases and the shared Poisson ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialConstants {
    pub e_plus: f64,
    pub e_minus: f64,
    pub nu: f64,
}

impl MaterialConstants {
    /// Solid modulus `e_plus`, void modulus `1e-6 * e_plus`.
    pub fn new(e_plus: f64, nu: f64) -> Result<Self, Rank3Error> {
        Self::with_void(e_plus, 1e-6 * e_plus, nu)
    }

    pub fn with_void(e_plus: f64, e_minus: f64, nu: f64) -> Result<Self, Rank3Error> {
        if !(e_plus > 0.0 && e_plus.is_finite()) {
            return Err(Rank3Error::InvalidMaterial(format!(
                "e_plus = {e_plus} must be positive"
            )));
        }
        if !(0.0..e_plus).contains(&e_minus) {
            return Err(Rank3Error::InvalidMaterial(format!(
                "e_minus = {e_minus} must lie in [0, e_plus)"
            )));
        }
        if !(nu > 0.0 && nu < 0.5) {
            return Err(Rank3Error::InvalidMaterial(format!(
                "nu = {nu} must lie in (0, 0.5)"
            )));
        }
        Ok(Self {
            e_plus,
            e_minus,
            nu,
        })
    }

    pub fn solid(&self) -> ElasticityMatrix {
        ElasticityMatrix::isotropic(self.e_plus, self.nu)
    }

    pub fn void(&self) -> ElasticityMatrix {
        ElasticityMatrix::isotropic(self.e_minus, self.nu)
    }
}

impl Default for MaterialConstants {
    fn default() -> Self {
        Self {
            e_plus: 1.0,
            e_minus: 1e-6,
            nu: 0.3,
        }
    }
}

/// Plane-stress constitutive matrix in Voigt form, ordering `(11, 22, 12)`,
/// acting on engineering shear strain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticityMatrix(pub Matrix3<f64>);

impl ElasticityMatrix {
    pub fn isotropic(e: f64, nu: f64) -> Self {
        PlaneTensor::isotropic(e, nu).to_voigt()
    }

    pub fn zero() -> Self {
        Self(Matrix3::zeros())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0 * factor)
    }

    pub fn tensor(&self) -> PlaneTensor {
        let m = &self.0;
        PlaneTensor {
            c1111: m[(0, 0)],
            c2222: m[(1, 1)],
            c1122: m[(0, 1)],
            c1112: m[(0, 2)],
            c2221: m[(1, 2)],
            c1212: m[(2, 2)],
        }
    }
}

/// The six independent components of a plane fourth-order tensor with minor
/// and major symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlaneTensor {
    pub c1111: f64,
    pub c2222: f64,
    pub c1122: f64,
    pub c1112: f64,
    pub c2221: f64,
    pub c1212: f64,
}

impl PlaneTensor {
    /// Hooke's law for an isotropic plane-stress material.
    pub fn isotropic(e: f64, nu: f64) -> Self {
        let k = e / (1.0 - nu * nu);
        Self {
            c1111: k,
            c2222: k,
            c1122: k * nu,
            c1112: 0.0,
            c2221: 0.0,
            c1212: k * (1.0 - nu) / 2.0,
        }
    }

    /// Layer tensor for a layer with normal angle `theta`.
    pub fn layer(theta: f64, nu: f64) -> Self {
        let (c2, s2) = ((2.0 * theta).cos(), (2.0 * theta).sin());
        let (c4, s4) = ((4.0 * theta).cos(), (4.0 * theta).sin());
        let g = 4.0 * (1.0 - nu);
        Self {
            c1111: (c4 + 4.0 * c2 + 3.0) / 8.0 + (1.0 - c4) / g,
            c2222: (c4 - 4.0 * c2 + 3.0) / 8.0 + (1.0 - c4) / g,
            c1122: (1.0 - c4) / 8.0 - (1.0 - c4) / g,
            c1112: (2.0 * s2 + s4) / 8.0 - s4 / g,
            c2221: (2.0 * s2 - s4) / 8.0 + s4 / g,
            c1212: (1.0 - c4) / 8.0 + (1.0 + c4) / g,
        }
    }

    /// Matrix in the rotated moment basis.
    pub fn to_rotated(&self) -> Matrix3<f64> {
        let mean = 0.5 * (self.c1111 + self.c2222);
        let a11 = mean - self.c1122;
        let a12 = self.c1112 - self.c2221;
        let a13 = 0.5 * (self.c1111 - self.c2222);
        let a22 = 2.0 * self.c1212;
        let a23 = self.c1112 + self.c2221;
        let a33 = mean + self.c1122;
        Matrix3::new(a11, a12, a13, a12, a22, a23, a13, a23, a33)
    }

    /// Inverse of [`PlaneTensor::to_rotated`].
    pub fn from_rotated(m: &Matrix3<f64>) -> Self {
        let mean = 0.5 * (m[(0, 0)] + m[(2, 2)]);
        Self {
            c1111: mean + m[(0, 2)],
            c2222: mean - m[(0, 2)],
            c1122: -0.5 * (m[(0, 0)] - m[(2, 2)]),
            c1112: 0.5 * (m[(0, 1)] + m[(1, 2)]),
            c2221: -0.5 * (m[(0, 1)] - m[(1, 2)]),
            c1212: 0.5 * m[(1, 1)],
        }
    }

    pub fn to_voigt(&self) -> ElasticityMatrix {
        ElasticityMatrix(Matrix3::new(
            self.c1111, self.c1122, self.c1112, //
            self.c1122, self.c2222, self.c2221, //
            self.c1112, self.c2221, self.c1212,
        ))
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            c1111: self.c1111 * f,
            c2222: self.c2222 * f,
            c1122: self.c1122 * f,
            c1112: self.c1112 * f,
            c2221: self.c2221 * f,
            c1212: self.c1212 * f,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            c1111: self.c1111 + o.c1111,
            c2222: self.c2222 + o.c2222,
            c1122: self.c1122 + o.c1122,
            c1112: self.c1112 + o.c1112,
            c2221: self.c2221 + o.c2221,
            c1212: self.c1212 + o.c1212,
        }
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        [
            self.c1111 - o.c1111,
            self.c2222 - o.c2222,
            self.c1122 - o.c1122,
            self.c1112 - o.c1112,
            self.c2221 - o.c2221,
            self.c1212 - o.c1212,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// Maps the rotated-basis matrix back to tensor components and returns them.
pub fn tensor_matrix_roundtrip(t: &PlaneTensor) -> PlaneTensor {
    PlaneTensor::from_rotated(&t.to_rotated())
}

/// Volume fraction `1 - prod(1 - alpha_n)`.
pub fn volume_fraction(alpha: &[f64; 3]) -> f64 {
    1.0 - (1.0 - alpha[0]) * (1.0 - alpha[1]) * (1.0 - alpha[2])
}

/// Solid material deposited on each layer, starting from layer 3.
pub fn layer_densities(alpha: &[f64; 3]) -> [f64; 3] {
    [
        (1.0 - alpha[2]) * (1.0 - alpha[1]) * alpha[0],
        (1.0 - alpha[2]) * alpha[1],
        alpha[2],
    ]
}

/// Gradient of [`volume_fraction`] with respect to the three widths.
pub fn volume_fraction_gradient(alpha: &[f64; 3]) -> [f64; 3] {
    [
        (1.0 - alpha[1]) * (1.0 - alpha[2]),
        (1.0 - alpha[0]) * (1.0 - alpha[2]),
        (1.0 - alpha[0]) * (1.0 - alpha[1]),
    ]
}

/// Relative stiffness contributions `P_n = rho_n / rho`.
pub fn stiffness_contributions(alpha: &[f64; 3]) -> [f64; 3] {
    let rho = volume_fraction(alpha);
    if rho < EMPTY_DENSITY {
        return [1.0 / 3.0; 3];
    }
    layer_densities(alpha).map(|r| r / rho)
}

/// Jacobian `dP_n / d alpha_k`, indexed `[n][k]`.
fn stiffness_contribution_jacobian(alpha: &[f64; 3]) -> [[f64; 3]; 3] {
    let rho = volume_fraction(alpha);
    if rho < EMPTY_DENSITY {
        return [[0.0; 3]; 3];
    }
    let [a1, a2, a3] = *alpha;
    let dens = layer_densities(alpha);
    let d_layer = [
        [(1.0 - a2) * (1.0 - a3), -(1.0 - a3) * a1, -(1.0 - a2) * a1],
        [0.0, 1.0 - a3, -a2],
        [0.0, 0.0, 1.0],
    ];
    let d_rho = volume_fraction_gradient(alpha);
    let mut jac = [[0.0; 3]; 3];
    for n in 0..3 {
        for k in 0..3 {
            jac[n][k] = (d_layer[n][k] * rho - dens[n] * d_rho[k]) / (rho * rho);
        }
    }
    jac
}

/// Trigonometric moments `(m1, m2, m3, m4)` for the equilateral laminate with
/// base-layer normal `theta3`.
pub fn trig_moments(p: [f64; 3], theta3: f64) -> Result<[f64; 4], Rank3Error> {
    trig_moments_for_angles(p, equilateral_normals(theta3))
}

/// Trigonometric moments for arbitrary layer normal angles.
pub fn trig_moments_for_angles(p: [f64; 3], angles: [f64; 3]) -> Result<[f64; 4], Rank3Error> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > CONTRIBUTION_TOL {
        return Err(Rank3Error::InvalidContributions(p));
    }
    Ok(moments_unchecked(&p, &angles))
}

fn moments_unchecked(p: &[f64; 3], angles: &[f64; 3]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for n in 0..3 {
        let (t2, t4) = (2.0 * angles[n], 4.0 * angles[n]);
        m[0] += p[n] * t2.cos();
        m[1] += p[n] * t2.sin();
        m[2] += p[n] * t4.cos();
        m[3] += p[n] * t4.sin();
    }
    m
}

/// Layer-tensor mixture in the rotated basis, written in terms of the moments.
pub fn moment_matrix(m: [f64; 4], nu: f64) -> Matrix3<f64> {
    let g = 4.0 * (1.0 - nu);
    let a = (1.0 + nu) / g;
    let base = (3.0 - nu) / g;
    Matrix3::new(
        base - a * m[2],
        -a * m[3],
        0.5 * m[0],
        -a * m[3],
        base + a * m[2],
        0.5 * m[1],
        0.5 * m[0],
        0.5 * m[1],
        0.5,
    )
}

/// Derivatives of [`moment_matrix`] with respect to each moment.
fn moment_matrix_partials(nu: f64) -> [Matrix3<f64>; 4] {
    let a = (1.0 + nu) / (4.0 * (1.0 - nu));
    let mut dm1 = Matrix3::zeros();
    dm1[(0, 2)] = 0.5;
    dm1[(2, 0)] = 0.5;
    let mut dm2 = Matrix3::zeros();
    dm2[(1, 2)] = 0.5;
    dm2[(2, 1)] = 0.5;
    let mut dm3 = Matrix3::zeros();
    dm3[(0, 0)] = -a;
    dm3[(1, 1)] = a;
    let mut dm4 = Matrix3::zeros();
    dm4[(0, 1)] = -a;
    dm4[(1, 0)] = -a;
    [dm1, dm2, dm3, dm4]
}

/// Converts a rotated-basis matrix to the Voigt matrix.
fn rotated_to_voigt(m: &Matrix3<f64>) -> Matrix3<f64> {
    PlaneTensor::from_rotated(m).to_voigt().0
}

/// Intermediate quantities of one stiffness evaluation in the rotated basis.
struct Evaluation {
    rho: f64,
    p: [f64; 3],
    mixture: Matrix3<f64>,
    /// Inverse of the bracketed term; `None` in the fully solid limit.
    bracket_inv: Option<Matrix3<f64>>,
    stiffness: Matrix3<f64>,
}

fn evaluate(
    alpha: &[f64; 3],
    angles: &[f64; 3],
    mat: &MaterialConstants,
) -> Result<Evaluation, Rank3Error> {
    let rho = volume_fraction(alpha);
    let p = stiffness_contributions(alpha);
    let mixture = moment_matrix(moments_unchecked(&p, angles), mat.nu);
    let solid = PlaneTensor::isotropic(mat.e_plus, mat.nu).to_rotated();
    if 1.0 - rho <= f64::EPSILON {
        return Ok(Evaluation {
            rho,
            p,
            mixture,
            bracket_inv: None,
            stiffness: solid,
        });
    }
    let void = PlaneTensor::isotropic(mat.e_minus, mat.nu).to_rotated();
    // The isotropic difference is diagonal in the rotated basis.
    let diff = solid - void;
    let diff_inv = Matrix3::from_diagonal(&diff.diagonal().map(|d| 1.0 / d));
    let c = (1.0 - mat.nu * mat.nu) / mat.e_plus;
    let bracket = diff_inv - mixture * (c * rho);
    let rcond = reciprocal_condition(&bracket);
    let inv = match bracket.try_inverse() {
        Some(inv) if rcond > 1e-14 => inv,
        _ => return Err(Rank3Error::Singular { rcond }),
    };
    let stiffness = solid - inv * (1.0 - rho);
    Ok(Evaluation {
        rho,
        p,
        mixture,
        bracket_inv: Some(inv),
        stiffness,
    })
}

/// Reciprocal 1-norm condition estimate of a symmetric 3x3 matrix, using the
/// explicit inverse.
fn reciprocal_condition(m: &Matrix3<f64>) -> f64 {
    let norm1 = |a: &Matrix3<f64>| {
        (0..3)
            .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match m.try_inverse() {
        Some(inv) => {
            let k = norm1(m) * norm1(&inv);
            if k.is_finite() && k > 0.0 {
                1.0 / k
            } else {
                0.0
            }
        }
        None => 0.0,
    }
}

/// Condition number of the bracketed inverse for diagnostics; infinite in the
/// fully solid limit where the bracket is never inverted.
pub fn inversion_condition(spec: &LaminateSpec, mat: &MaterialConstants) -> f64 {
    let rho = spec.volume_fraction();
    if 1.0 - rho <= f64::EPSILON {
        return f64::INFINITY;
    }
    let p = stiffness_contributions(&spec.alpha);
    let mixture = moment_matrix(moments_unchecked(&p, &spec.normal_angles()), mat.nu);
    let solid = PlaneTensor::isotropic(mat.e_plus, mat.nu).to_rotated();
    let void = PlaneTensor::isotropic(mat.e_minus, mat.nu).to_rotated();
    let diff = solid - void;
    let diff_inv = Matrix3::from_diagonal(&diff.diagonal().map(|d| 1.0 / d));
    let c = (1.0 - mat.nu * mat.nu) / mat.e_plus;
    1.0 / reciprocal_condition(&(diff_inv - mixture * (c * rho)))
}

/// Effective stiffness of an equilateral rank-3 cell.
pub fn elasticity_matrix(
    spec: &LaminateSpec,
    mat: &MaterialConstants,
) -> Result<ElasticityMatrix, Rank3Error> {
    elasticity_matrix_free(&spec.alpha, &spec.normal_angles(), mat)
}

/// Effective stiffness with three independent layer normal angles.
pub fn elasticity_matrix_free(
    alpha: &[f64; 3],
    angles: &[f64; 3],
    mat: &MaterialConstants,
) -> Result<ElasticityMatrix, Rank3Error> {
    let ev = evaluate(alpha, angles, mat)?;
    Ok(ElasticityMatrix(rotated_to_voigt(&ev.stiffness)))
}

/// Voigt-matrix derivatives with respect to the widths and the three layer
/// normal angles.
#[derive(Debug, Clone, Copy)]
pub struct LaminateGradient {
    pub d_alpha: [Matrix3<f64>; 3],
    pub d_angle: [Matrix3<f64>; 3],
}

impl LaminateGradient {
    /// Derivative with respect to the base angle when all three normals rotate together.
    pub fn d_theta3(&self) -> Matrix3<f64> {
        self.d_angle[0] + self.d_angle[1] + self.d_angle[2]
    }
}

/// Stiffness and analytic derivatives for arbitrary layer angles.
pub fn elasticity_with_gradient_free(
    alpha: &[f64; 3],
    angles: &[f64; 3],
    mat: &MaterialConstants,
) -> Result<(ElasticityMatrix, LaminateGradient), Rank3Error> {
    let ev = evaluate(alpha, angles, mat)?;
    let s = ElasticityMatrix(rotated_to_voigt(&ev.stiffness));
    let Some(b) = ev.bracket_inv else {
        let zero = Matrix3::zeros();
        return Ok((
            s,
            LaminateGradient {
                d_alpha: [zero; 3],
                d_angle: [zero; 3],
            },
        ));
    };
    let c = (1.0 - mat.nu * mat.nu) / mat.e_plus;
    let partials = moment_matrix_partials(mat.nu);
    let rho = ev.rho;

    // dS2 = drho * B + (1 - rho) * B * dA * B, with dA = -c * (drho * M + rho * dM)
    let d_stiffness = |d_rho: f64, d_mixture: &Matrix3<f64>| -> Matrix3<f64> {
        let d_bracket = -(ev.mixture * d_rho + d_mixture * rho) * c;
        b * d_rho + b * d_bracket * b * (1.0 - rho)
    };

    let trig: [[f64; 4]; 3] = angles.map(|t| {
        let (t2, t4) = (2.0 * t, 4.0 * t);
        [t2.cos(), t2.sin(), t4.cos(), t4.sin()]
    });
    let d_rho = volume_fraction_gradient(alpha);
    let d_p = stiffness_contribution_jacobian(alpha);
    let mut d_alpha = [Matrix3::zeros(); 3];
    for k in 0..3 {
        let mut d_mixture = Matrix3::zeros();
        for (j, partial) in partials.iter().enumerate() {
            let dm: f64 = (0..3).map(|n| d_p[n][k] * trig[n][j]).sum();
            d_mixture += partial * dm;
        }
        d_alpha[k] = rotated_to_voigt(&d_stiffness(d_rho[k], &d_mixture));
    }
    let mut d_angle = [Matrix3::zeros(); 3];
    for n in 0..3 {
        let t = angles[n];
        let pn = ev.p[n];
        let dm = [
            -2.0 * pn * (2.0 * t).sin(),
            2.0 * pn * (2.0 * t).cos(),
            -4.0 * pn * (4.0 * t).sin(),
            4.0 * pn * (4.0 * t).cos(),
        ];
        let d_mixture = partials
            .iter()
            .zip(dm)
            .fold(Matrix3::zeros(), |acc, (m, d)| acc + m * d);
        d_angle[n] = rotated_to_voigt(&d_stiffness(0.0, &d_mixture));
    }
    Ok((s, LaminateGradient { d_alpha, d_angle }))
}

/// Derivatives `(dS/d alpha1, dS/d alpha2, dS/d alpha3, dS/d theta3)` of the
/// equilateral laminate.
pub fn elasticity_sensitivities(
    spec: &LaminateSpec,
    mat: &MaterialConstants,
) -> Result<[Matrix3<f64>; 4], Rank3Error> {
    let (_, g) = elasticity_with_gradient_free(&spec.alpha, &spec.normal_angles(), mat)?;
    Ok([g.d_alpha[0], g.d_alpha[1], g.d_alpha[2], g.d_theta3()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat() -> MaterialConstants {
        MaterialConstants::default()
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn volume_fraction_reported_range() {
        assert_relative_eq!(volume_fraction(&[0.1; 3]), 0.271, epsilon = 1e-12);
        assert_relative_eq!(volume_fraction(&[0.5; 3]), 0.875, epsilon = 1e-12);
        assert_eq!(volume_fraction(&[0.0; 3]), 0.0);
    }

    #[test]
    fn layer_densities_examples() {
        let d = layer_densities(&[0.5; 3]);
        assert_relative_eq!(d[0], 0.125, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(d[2], 0.5, epsilon = 1e-15);
        let d = layer_densities(&[0.1; 3]);
        assert_relative_eq!(d[0], 0.081, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.09, epsilon = 1e-15);
        assert_relative_eq!(d[2], 0.1, epsilon = 1e-15);
        assert_eq!(layer_densities(&[0.4, 0.0, 0.0]), [0.4, 0.0, 0.0]);
    }

    #[test]
    fn empty_laminate_contributions_do_not_divide_by_zero() {
        assert_eq!(stiffness_contributions(&[0.0; 3]), [1.0 / 3.0; 3]);
        let s = elasticity_matrix(&LaminateSpec::new([0.0; 3], 0.2).unwrap(), &mat()).unwrap();
        let void = mat().void();
        assert!((s.0 - void.0).amax() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(LaminateSpec::new([0.1, 1.2, 0.1], 0.0).is_err());
        assert!(LaminateSpec::new([0.1; 3], 13.0).is_err());
        assert!(LaminateSpec::new([0.1; 3], -4.0 * PI).is_ok());
        assert!(MaterialConstants::new(1.0, 0.5).is_err());
        assert!(MaterialConstants::with_void(1.0, 2.0, 0.3).is_err());
    }

    #[test]
    fn moments_of_balanced_and_single_layers() {
        let m = trig_moments([1.0 / 3.0; 3], 0.77).unwrap();
        for v in m {
            assert!(v.abs() < 1e-15);
        }
        let m = trig_moments_for_angles([0.0, 0.0, 1.0], [1.0, 2.0, 0.0]).unwrap();
        assert_relative_eq!(m[0], 1.0);
        assert_relative_eq!(m[1], 0.0);
        assert_relative_eq!(m[2], 1.0);
        assert_relative_eq!(m[3], 0.0);
        assert!(trig_moments([0.5, 0.6, -0.1], 0.0).is_err());
        assert!(trig_moments([0.5, 0.6, 0.1], 0.0).is_err());
    }

    #[test]
    fn moments_match_termwise_sum() {
        let p = [0.2, 0.3, 0.5];
        let theta3: f64 = 0.7;
        let angles = [theta3 + 2.0 * PI / 3.0, theta3 + PI / 3.0, theta3];
        let mut expect = [0.0; 4];
        for n in 0..3 {
            expect[0] += p[n] * (2.0 * angles[n]).cos();
            expect[1] += p[n] * (2.0 * angles[n]).sin();
            expect[2] += p[n] * (4.0 * angles[n]).cos();
            expect[3] += p[n] * (4.0 * angles[n]).sin();
        }
        let m = trig_moments(p, theta3).unwrap();
        for k in 0..4 {
            assert_relative_eq!(m[k], expect[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn rotated_basis_roundtrip_is_identity() {
        let iso = PlaneTensor::isotropic(1.0, 0.3);
        assert!(tensor_matrix_roundtrip(&iso).max_abs_diff(&iso) < 1e-15);
        let layer = PlaneTensor::layer(0.0, 0.3);
        assert!(tensor_matrix_roundtrip(&layer).max_abs_diff(&layer) < 1e-15);
    }

    #[test]
    fn isotropic_rotated_form_is_diagonal() {
        let (e, nu) = (2.0, 0.25);
        let r = PlaneTensor::isotropic(e, nu).to_rotated();
        assert_relative_eq!(r[(0, 0)], e / (1.0 + nu), epsilon = 1e-14);
        assert_relative_eq!(r[(1, 1)], e / (1.0 + nu), epsilon = 1e-14);
        assert_relative_eq!(r[(2, 2)], e / (1.0 - nu), epsilon = 1e-14);
        assert!(r[(0, 1)].abs() + r[(0, 2)].abs() + r[(1, 2)].abs() < 1e-15);
    }

    #[test]
    fn moment_matrix_matches_single_layer_tensor() {
        let nu = 0.3;
        for &theta in &[0.0, 0.4, 1.3, -2.2] {
            let layer = PlaneTensor::layer(theta, nu).to_rotated();
            let m = moment_matrix(moments_unchecked(&[0.0, 0.0, 1.0], &[0.0, 0.0, theta]), nu);
            assert!((layer - m).amax() < 1e-14);
        }
    }

    #[test]
    fn single_layer_carries_load_along_its_tangent() {
        // Layer 3 with normal along x: strips run along y and carry
        // rho * E in that direction, nothing across.
        let m = MaterialConstants::with_void(1.0, 0.0, 0.3).unwrap();
        let a = 0.4;
        let s = elasticity_matrix_free(&[0.0, 0.0, a], &[0.0, 0.0, 0.0], &m).unwrap();
        assert_relative_eq!(s.0[(1, 1)], a, epsilon = 1e-12);
        assert!(s.0[(0, 0)].abs() < 1e-12);
        assert!(s.0[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn equal_layer_densities_are_isotropic() {
        // Widths chosen so that every layer holds density 0.2.
        let alpha = [1.0 / 3.0, 0.25, 0.2];
        let spec_a = LaminateSpec::new(alpha, 0.0).unwrap();
        let spec_b = LaminateSpec::new(alpha, 0.37).unwrap();
        let a = elasticity_matrix(&spec_a, &mat()).unwrap();
        let b = elasticity_matrix(&spec_b, &mat()).unwrap();
        assert!((a.0 - b.0).amax() < 1e-9);
        let d = elasticity_sensitivities(&spec_b, &mat()).unwrap();
        assert!(max_abs(&d[3]) < 1e-12);
    }

    #[test]
    fn solid_limit_recovers_solid_stiffness() {
        let spec = LaminateSpec::new([1.0, 1.0, 1.0], 0.3).unwrap();
        let s = elasticity_matrix(&spec, &mat()).unwrap();
        assert!((s.0 - mat().solid().0).amax() < 1e-14);
        let near = LaminateSpec::new([0.999999; 3], 0.3).unwrap();
        let s = elasticity_matrix(&near, &mat()).unwrap();
        assert!((s.0 - mat().solid().0).amax() < 1e-4);
    }

    #[test]
    fn elasticity_matrix_symmetric_positive_definite() {
        let spec = LaminateSpec::new([0.2, 0.3, 0.4], 0.5).unwrap();
        let s = elasticity_matrix(&spec, &mat()).unwrap();
        assert!((s.0 - s.0.transpose()).amax() < 1e-14);
        let eig = s.0.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0));
    }

    fn central_difference<F: Fn(f64) -> Matrix3<f64>>(f: F, x: f64, h: f64) -> Matrix3<f64> {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn width_sensitivity_matches_finite_difference() {
        let m = mat();
        let base = [0.2, 0.3, 0.4];
        let theta = 0.5;
        let analytic =
            elasticity_sensitivities(&LaminateSpec::new(base, theta).unwrap(), &m).unwrap();
        for k in 0..3 {
            let fd = central_difference(
                |x| {
                    let mut a = base;
                    a[k] = x;
                    elasticity_matrix(&LaminateSpec::new(a, theta).unwrap(), &m)
                        .unwrap()
                        .0
                },
                base[k],
                1e-6,
            );
            assert!(
                rel_err(&analytic[k], &fd) < 1e-5,
                "alpha{} rel err {}",
                k + 1,
                rel_err(&analytic[k], &fd)
            );
        }
    }

    #[test]
    fn orientation_sensitivity_matches_finite_difference() {
        let m = mat();
        let alpha = [0.1, 0.5, 0.2];
        let theta = 0.5;
        let analytic =
            elasticity_sensitivities(&LaminateSpec::new(alpha, theta).unwrap(), &m).unwrap();
        let fd = central_difference(
            |t| {
                elasticity_matrix(&LaminateSpec::new(alpha, t).unwrap(), &m)
                    .unwrap()
                    .0
            },
            theta,
            1e-6,
        );
        assert!(rel_err(&analytic[3], &fd) < 1e-5);
    }

    #[test]
    fn free_angle_sensitivities_match_finite_difference() {
        let m = mat();
        let alpha = [0.25, 0.15, 0.35];
        let angles = [0.3, 1.7, -0.4];
        let (_, g) = elasticity_with_gradient_free(&alpha, &angles, &m).unwrap();
        for n in 0..3 {
            let fd = central_difference(
                |t| {
                    let mut a = angles;
                    a[n] = t;
                    elasticity_matrix_free(&alpha, &a, &m).unwrap().0
                },
                angles[n],
                1e-6,
            );
            assert!(rel_err(&g.d_angle[n], &fd) < 1e-5);
        }
    }

    #[test]
    fn two_pi_periodic_in_orientation() {
        let spec = LaminateSpec::new([0.1, 0.45, 0.2], 0.9).unwrap();
        let shifted = LaminateSpec::new(spec.alpha, 0.9 + 2.0 * PI).unwrap();
        let a = elasticity_matrix(&spec, &mat()).unwrap();
        let b = elasticity_matrix(&shifted, &mat()).unwrap();
        assert!((a.0 - b.0).amax() < 1e-12);
    }
}
