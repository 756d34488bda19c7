//! Triangle quadrature rules in barycentric form.
//!
//! Weights are normalized to sum to one, so an integral over a triangle `T`
//! is `|T| * sum_q w_q f(x_q)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureOrder {
    /// One-point centroid rule, exact for degree 1.
    #[default]
    Midpoint,
    /// Six-point symmetric rule, exact for degree 4.
    Four,
}

pub struct Rule {
    pub points: &'static [[f64; 3]],
    pub weights: &'static [f64],
}

const MIDPOINT_POINTS: [[f64; 3]; 1] = [[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
const MIDPOINT_WEIGHTS: [f64; 1] = [1.0];

const A1: f64 = 0.445_948_490_915_965;
const B1: f64 = 0.108_103_018_168_070;
const A2: f64 = 0.091_576_213_509_771;
const B2: f64 = 0.816_847_572_980_459;
const W1: f64 = 0.223_381_589_678_011;
const W2: f64 = 0.109_951_743_655_322;

const DEG4_POINTS: [[f64; 3]; 6] = [
    [A1, A1, B1],
    [A1, B1, A1],
    [B1, A1, A1],
    [A2, A2, B2],
    [A2, B2, A2],
    [B2, A2, A2],
];
const DEG4_WEIGHTS: [f64; 6] = [W1, W1, W1, W2, W2, W2];

impl QuadratureOrder {
    pub fn rule(self) -> Rule {
        match self {
            QuadratureOrder::Midpoint => Rule {
                points: &MIDPOINT_POINTS,
                weights: &MIDPOINT_WEIGHTS,
            },
            QuadratureOrder::Four => Rule {
                points: &DEG4_POINTS,
                weights: &DEG4_WEIGHTS,
            },
        }
    }
}

impl Rule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[inline]
pub fn map_point(tri: &[[f64; 2]; 3], bary: &[f64; 3]) -> [f64; 2] {
    [
        bary[0] * tri[0][0] + bary[1] * tri[1][0] + bary[2] * tri[2][0],
        bary[0] * tri[0][1] + bary[1] * tri[1][1] + bary[2] * tri[2][1],
    ]
}
