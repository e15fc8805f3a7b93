//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Matrix3;
use trilattice::fea::{LoadCase, PointLoad, ProblemSpec};
use trilattice::problems;
use trilattice::rank3::MaterialConstants;

/// Independent fourth-order components of a plane elasticity tensor.
#[derive(Debug, Clone, Copy)]
pub struct Components {
    pub s1111: f64,
    pub s2222: f64,
    pub s1122: f64,
    pub s1112: f64,
    pub s2221: f64,
    pub s1212: f64,
}

/// Isotropic plane-stress tensor.
pub fn hooke(e: f64, nu: f64) -> Components {
    let c = e / (1.0 - nu * nu);
    Components {
        s1111: c,
        s2222: c,
        s1122: c * nu,
        s1112: 0.0,
        s2221: 0.0,
        s1212: c * (1.0 - nu) / 2.0,
    }
}

/// Layer tensor of a single lamination direction with normal angle `theta`,
/// written out component by component.
pub fn layer_tensor(theta: f64, nu: f64) -> Components {
    let (c2, c4, s2, s4) = (
        (2.0 * theta).cos(),
        (4.0 * theta).cos(),
        (2.0 * theta).sin(),
        (4.0 * theta).sin(),
    );
    let k = 4.0 * (1.0 - nu);
    Components {
        s1111: (c4 + 4.0 * c2 + 3.0) / 8.0 + (1.0 - c4) / k,
        s2222: (c4 - 4.0 * c2 + 3.0) / 8.0 + (1.0 - c4) / k,
        s1122: (1.0 - c4) / 8.0 - (1.0 - c4) / k,
        s1112: (2.0 * s2 + s4) / 8.0 - s4 / k,
        s2221: (2.0 * s2 - s4) / 8.0 + s4 / k,
        s1212: (1.0 - c4) / 8.0 + (1.0 + c4) / k,
    }
}

/// Components to the rotated matrix form.
pub fn to_matrix(a: &Components) -> Matrix3<f64> {
    let m11 = 0.5 * (a.s1111 + a.s2222) - a.s1122;
    let m12 = a.s1112 - a.s2221;
    let m13 = 0.5 * (a.s1111 - a.s2222);
    let m22 = 2.0 * a.s1212;
    let m23 = a.s1112 + a.s2221;
    let m33 = 0.5 * (a.s1111 + a.s2222) + a.s1122;
    Matrix3::new(m11, m12, m13, m12, m22, m23, m13, m23, m33)
}

/// Rotated matrix form back to components.
pub fn from_matrix(m: &Matrix3<f64>) -> Components {
    Components {
        s1111: 0.5 * (m[(0, 0)] + m[(2, 2)]) + m[(0, 2)],
        s2222: 0.5 * (m[(0, 0)] + m[(2, 2)]) - m[(0, 2)],
        s1122: -0.5 * (m[(0, 0)] - m[(2, 2)]),
        s1112: 0.5 * (m[(0, 1)] + m[(1, 2)]),
        s2221: -0.5 * (m[(0, 1)] - m[(1, 2)]),
        s1212: 0.5 * m[(1, 1)],
    }
}

/// Voigt matrix in (11, 22, 12) order with engineering shear.
pub fn voigt(a: &Components) -> Matrix3<f64> {
    Matrix3::new(
        a.s1111, a.s1122, a.s1112, a.s1122, a.s2222, a.s2221, a.s1112, a.s2221, a.s1212,
    )
}

/// Rank-3 stiffness through the tensor route: layer tensors mixed by their
/// stiffness shares, converted to matrix form, combined with the solid and
/// void phases, and converted back.
pub fn tensor_route(alpha: [f64; 3], normals: [f64; 3], mat: &MaterialConstants) -> Matrix3<f64> {
    let rho = [
        (1.0 - alpha[2]) * (1.0 - alpha[1]) * alpha[0],
        (1.0 - alpha[2]) * alpha[1],
        alpha[2],
    ];
    let total: f64 = rho.iter().sum();
    let nu = mat.nu;
    let mut mixture = Matrix3::zeros();
    for n in 0..3 {
        mixture += to_matrix(&layer_tensor(normals[n], nu)) * (rho[n] / total);
    }
    let plus = to_matrix(&hooke(mat.e_plus, nu));
    let minus = to_matrix(&hooke(mat.e_minus, nu));
    let inner =
        (plus - minus).try_inverse().unwrap() - mixture * (total * (1.0 - nu * nu) / mat.e_plus);
    let s2 = plus - inner.try_inverse().unwrap() * (1.0 - total);
    voigt(&from_matrix(&s2))
}

pub fn max_abs(m: &Matrix3<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Small cantilever with a second, horizontal load case at the top corner.
pub fn two_load_problem(n: usize) -> ProblemSpec {
    let mut p = problems::cantilever(n, n, 1);
    let node = p.node(n, n);
    p.load_cases.push(LoadCase {
        loads: vec![PointLoad {
            node,
            force: [0.7, 0.2],
        }],
        fixations: None,
    });
    p.weights = vec![0.5, 0.5];
    p.validate().unwrap();
    p
}
