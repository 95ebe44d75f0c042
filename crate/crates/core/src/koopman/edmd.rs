//! Least-squares fit of a discrete linear model in the lifted coordinates:
//! stack lifted snapshots, form the normal equations, and solve for the
//! one-step operator [A | B] with optional ridge damping.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::lift::{lift, lifted_dim};
use crate::koopman::dataset::SnapshotDataset;
use crate::srb::STATE_DIM;

/// Condition-number ceiling past which an undamped normal-equation solve is
/// rejected instead of silently amplifying noise.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Discrete one-step predictor in lifted coordinates: z' = A z + B u.
/// Serialized form stores matrices as row-major nested arrays alongside
/// explicit dimensions that are cross-checked on load.
#[derive(Clone, Debug)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dictionary_order: usize,
    pub dt: f64,
}

/// On-disk schema for [`KoopmanModel`].
#[derive(Serialize, Deserialize)]
struct ModelJson {
    lifted_dim: usize,
    control_dim: usize,
    dictionary_order: usize,
    dt: f64,
    #[serde(with = "dmatrix_rows")]
    a: DMatrix<f64>,
    #[serde(with = "dmatrix_rows")]
    b: DMatrix<f64>,
}

impl KoopmanModel {
    pub fn lifted_dim(&self) -> usize {
        lifted_dim(self.dictionary_order)
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lifted_dim();
        if self.a.nrows() != n || self.a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "model transition matrix",
                expected: n,
                got: self.a.nrows().max(self.a.ncols()),
            });
        }
        if self.b.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "model input matrix rows",
                expected: n,
                got: self.b.nrows(),
            });
        }
        if self.b.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "model input matrix cols",
                expected: 12,
                got: 0,
            });
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::BadArtifact {
                detail: format!("model dt must be positive, got {}", self.dt),
            });
        }
        if self.a.iter().any(|v| !v.is_finite()) || self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model matrices",
            });
        }
        Ok(())
    }

    /// One prediction step. `z` must already be lifted.
    pub fn predict(&self, z: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.lifted_dim();
        if z.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "lifted state rows",
                expected: n,
                got: z.nrows(),
            });
        }
        if u.nrows() != self.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control rows",
                expected: self.control_dim(),
                got: u.nrows(),
            });
        }
        if z.ncols() != u.ncols() {
            return Err(Error::DimensionMismatch {
                context: "prediction batch width",
                expected: z.ncols(),
                got: u.ncols(),
            });
        }
        Ok(&self.a * z + &self.b * u)
    }

    pub fn to_json(&self) -> Result<String> {
        let json = ModelJson {
            lifted_dim: self.lifted_dim(),
            control_dim: self.control_dim(),
            dictionary_order: self.dictionary_order,
            dt: self.dt,
            a: self.a.clone(),
            b: self.b.clone(),
        };
        serde_json::to_string_pretty(&json).map_err(|e| Error::BadArtifact {
            detail: format!("model serialization failed: {e}"),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: ModelJson = serde_json::from_str(text).map_err(|e| Error::BadArtifact {
            detail: format!("model deserialization failed: {e}"),
        })?;
        if json.a.nrows() != json.lifted_dim || json.b.ncols() != json.control_dim {
            return Err(Error::BadArtifact {
                detail: format!(
                    "declared dimensions {}x{} disagree with matrices {}x{}",
                    json.lifted_dim,
                    json.control_dim,
                    json.a.nrows(),
                    json.b.ncols()
                ),
            });
        }
        let model = Self {
            a: json.a,
            b: json.b,
            dictionary_order: json.dictionary_order,
            dt: json.dt,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Row-major nested-array codec for DMatrix fields, so artifacts are plain
/// JSON readable outside this crate.
pub(crate) mod dmatrix_rows {
    use nalgebra::DMatrix;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// Fit result: the model plus diagnostics of the solve.
#[derive(Clone, Debug)]
pub struct EdmdFit {
    pub model: KoopmanModel,
    /// ||Z' - K Zhat||_F / sqrt(M), the per-sample RMS residual in lifted
    /// coordinates. Dominated by the high-order dictionary blocks; small
    /// values are not required for good state prediction.
    pub training_residual: f64,
    /// Same residual restricted to the 12 raw-state rows, the part that
    /// matters for control.
    pub state_residual: f64,
    /// 2-norm condition number of the (undamped) Gram matrix.
    pub g2_condition: f64,
    /// Ridge coefficient actually applied.
    pub regularization: f64,
}

/// Lifts every snapshot column. Shared by the fit and the evaluator.
pub(crate) fn lift_columns(states: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let n = lifted_dim(order);
    let mut z = DMatrix::zeros(n, states.ncols());
    for (j, col) in states.column_iter().enumerate() {
        let x = nalgebra::SVector::<f64, STATE_DIM>::from_column_slice(col.as_slice());
        let state = crate::srb::RigidBodyState::from_vector(&x);
        z.column_mut(j).copy_from(&lift(&state, order));
    }
    z
}

/// Solves the normal equations for K = [A | B].
///
/// With Z = lifted states, Z' = lifted successors, U = controls, and
/// Zhat = [Z; U] stacked: G1 = (1/M) Z' Zhat^T, G2 = (1/M) Zhat Zhat^T,
/// K = G1 (G2 + lambda I)^{-1}. `regularization = None` picks a small ridge
/// scaled to trace(G2); `Some(0.0)` demands the pure least-squares solution
/// and fails on rank deficiency instead of damping it.
pub fn edmd_fit(
    data: &SnapshotDataset,
    dictionary_order: usize,
    regularization: Option<f64>,
) -> Result<EdmdFit> {
    data.validate()?;
    if dictionary_order < 1 {
        return Err(Error::InvalidConfig {
            detail: "dictionary order must be at least 1".into(),
        });
    }
    let n = lifted_dim(dictionary_order);
    let m_in = data.control_dim();
    let samples = data.samples();
    let rows = n + m_in;

    let z = lift_columns(&data.states, dictionary_order);
    let z_next = lift_columns(&data.successors, dictionary_order);
    let mut zhat = DMatrix::zeros(rows, samples);
    zhat.view_mut((0, 0), (n, samples)).copy_from(&z);
    zhat.view_mut((n, 0), (m_in, samples))
        .copy_from(&data.controls);

    let scale = 1.0 / samples as f64;
    let g1 = (&z_next * zhat.transpose()) * scale;
    let g2 = (&zhat * zhat.transpose()) * scale;

    let condition = condition_number(&g2);
    let lambda = match regularization {
        Some(l) => {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::InvalidConfig {
                    detail: format!("regularization must be finite and nonnegative, got {l}"),
                });
            }
            l
        }
        None => 1e-9 * g2.trace() / rows as f64,
    };

    if lambda == 0.0 {
        if samples < rows {
            return Err(Error::InsufficientData {
                samples,
                needed: rows,
            });
        }
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::RankDeficient {
                condition,
            });
        }
    }

    let mut damped = g2.clone();
    for i in 0..rows {
        damped[(i, i)] += lambda;
    }
    // (G2 + lambda I) K^T = G1^T; the damped Gram matrix is symmetric
    // positive definite whenever the checks above pass.
    let chol = damped.clone().cholesky().ok_or(Error::RankDeficient {
        condition,
    })?;
    let k_t = chol.solve(&g1.transpose());
    let k = k_t.transpose();

    let a = k.view((0, 0), (n, n)).into_owned();
    let b = k.view((0, n), (n, m_in)).into_owned();
    let model = KoopmanModel {
        a,
        b,
        dictionary_order,
        dt: data.dt,
    };
    model.validate()?;

    let residual_matrix = &z_next - &k * &zhat;
    let residual = residual_matrix.norm() / (samples as f64).sqrt();
    let state_residual =
        residual_matrix.view((1, 0), (STATE_DIM, samples)).norm() / (samples as f64).sqrt();
    Ok(EdmdFit {
        model,
        training_residual: residual,
        state_residual,
        g2_condition: condition,
        regularization: lambda,
    })
}

fn condition_number(g: &DMatrix<f64>) -> f64 {
    let sv = g.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
