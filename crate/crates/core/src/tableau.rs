//! Butcher tableaux of the Lobatto family used by the integrator.
//!
//! The discrete scheme needs `a_{1j} = 0` (so the first stage sits at the step
//! point) together with stiff accuracy `a_{sj} = b_j` (so the last stage is the
//! step value). The Lobatto IIIA coefficients satisfy both; the conjugate IIIB
//! weights `b_j - b_j a_{ji}/b_i` appearing in the momentum stage equation are
//! generated from the same `(a, b)`, so no second tableau is stored.
//! Coefficients are hard-coded rationals/surds and certified by [`validate`]
//! at test time.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TableauError {
    #[error("unsupported stage count {0}; available: 2, 3, 4")]
    UnsupportedStageCount(usize),
}

/// Runge-Kutta coefficients `(a, b, c)` with `a` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub s: usize,
    a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// A structural condition violated by a tableau, reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum TableauViolation {
    /// Σ b_j ≠ 1.
    WeightSum { value: f64 },
    /// Σ_j a_ij ≠ c_i.
    RowSum { row: usize, value: f64, expected: f64 },
    /// a_{1j} ≠ 0.
    FirstRowNonzero { col: usize, value: f64 },
    /// a_{sj} ≠ b_j (stiff accuracy).
    NotStifflyAccurate { col: usize, value: f64, expected: f64 },
    /// c_1 ≠ 0 or c_s ≠ 1.
    EndpointNodes { c_first: f64, c_last: f64 },
    /// Simplifying condition C(q): Σ_j a_ij c_j^{q-1} ≠ c_i^q / q.
    SimplifyingCondition { row: usize, q: usize, residual: f64 },
}

impl std::fmt::Display for TableauViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TableauViolation::WeightSum { value } => write!(f, "sum(b) = {value}, expected 1"),
            TableauViolation::RowSum {
                row,
                value,
                expected,
            } => write!(f, "row {row}: sum(a) = {value}, expected c = {expected}"),
            TableauViolation::FirstRowNonzero { col, value } => {
                write!(f, "a[1][{col}] = {value}, expected 0")
            }
            TableauViolation::NotStifflyAccurate {
                col,
                value,
                expected,
            } => write!(f, "a[s][{col}] = {value}, expected b = {expected}"),
            TableauViolation::EndpointNodes { c_first, c_last } => {
                write!(f, "c_1 = {c_first}, c_s = {c_last}, expected 0 and 1")
            }
            TableauViolation::SimplifyingCondition { row, q, residual } => {
                write!(f, "C({q}) fails on row {row} with residual {residual:.3e}")
            }
        }
    }
}

impl ButcherTableau {
    pub fn new(s: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Self {
        assert_eq!(a.len(), s * s);
        assert_eq!(b.len(), s);
        assert_eq!(c.len(), s);
        ButcherTableau { s, a, b, c }
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.s + j]
    }
}

/// The s-stage Lobatto tableau (orders 2, 4, 6 for s = 2, 3, 4).
pub fn lobatto(s: usize) -> Result<ButcherTableau, TableauError> {
    let t = match s {
        2 => ButcherTableau::new(
            2,
            vec![
                0.0, 0.0, //
                0.5, 0.5,
            ],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
        ),
        3 => ButcherTableau::new(
            3,
            vec![
                0.0,
                0.0,
                0.0,
                5.0 / 24.0,
                1.0 / 3.0,
                -1.0 / 24.0,
                1.0 / 6.0,
                2.0 / 3.0,
                1.0 / 6.0,
            ],
            vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 1.0],
        ),
        4 => {
            let r5 = 5.0_f64.sqrt();
            ButcherTableau::new(
                4,
                vec![
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                    (11.0 + r5) / 120.0,
                    (25.0 - r5) / 120.0,
                    (25.0 - 13.0 * r5) / 120.0,
                    (-1.0 + r5) / 120.0,
                    (11.0 - r5) / 120.0,
                    (25.0 + 13.0 * r5) / 120.0,
                    (25.0 + r5) / 120.0,
                    (-1.0 - r5) / 120.0,
                    1.0 / 12.0,
                    5.0 / 12.0,
                    5.0 / 12.0,
                    1.0 / 12.0,
                ],
                vec![1.0 / 12.0, 5.0 / 12.0, 5.0 / 12.0, 1.0 / 12.0],
                vec![0.0, (5.0 - r5) / 10.0, (5.0 + r5) / 10.0, 1.0],
            )
        }
        other => return Err(TableauError::UnsupportedStageCount(other)),
    };
    Ok(t)
}

/// Checks all structural invariants and the simplifying conditions C(q),
/// q = 1..s-1, within 1e-14. Empty result means the tableau is certified.
pub fn validate(t: &ButcherTableau) -> Vec<TableauViolation> {
    const TOL: f64 = 1e-14;
    let s = t.s;
    let mut out = Vec::new();
    let bsum: f64 = t.b.iter().sum();
    if (bsum - 1.0).abs() > TOL {
        out.push(TableauViolation::WeightSum { value: bsum });
    }
    for i in 0..s {
        let rsum: f64 = (0..s).map(|j| t.a(i, j)).sum();
        if (rsum - t.c[i]).abs() > TOL {
            out.push(TableauViolation::RowSum {
                row: i,
                value: rsum,
                expected: t.c[i],
            });
        }
    }
    for j in 0..s {
        if t.a(0, j).abs() > TOL {
            out.push(TableauViolation::FirstRowNonzero {
                col: j,
                value: t.a(0, j),
            });
        }
        if (t.a(s - 1, j) - t.b[j]).abs() > TOL {
            out.push(TableauViolation::NotStifflyAccurate {
                col: j,
                value: t.a(s - 1, j),
                expected: t.b[j],
            });
        }
    }
    if t.c[0].abs() > TOL || (t.c[s - 1] - 1.0).abs() > TOL {
        out.push(TableauViolation::EndpointNodes {
            c_first: t.c[0],
            c_last: t.c[s - 1],
        });
    }
    for q in 1..s {
        for i in 0..s {
            let lhs: f64 = (0..s).map(|j| t.a(i, j) * t.c[j].powi(q as i32 - 1)).sum();
            let residual = lhs - t.c[i].powi(q as i32) / q as f64;
            if residual.abs() > TOL {
                out.push(TableauViolation::SimplifyingCondition {
                    row: i,
                    q,
                    residual,
                });
            }
        }
    }
    out
}
