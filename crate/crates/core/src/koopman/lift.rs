//! Observable dictionary. A state lifts to
//! [1, p, Theta, v, Omega, vec(R W), vec(R W^2), ..., vec(R W^order)]
//! where W is the skew matrix of the body angular velocity and vec stacks
//! columns. Dimension is 13 + 9*order; the raw state sits at entries 1..13 so
//! recovering it from a lifted vector is a plain selection.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::srb::{rotation_from_euler, RigidBodyState, STATE_DIM};

/// Skew-symmetric cross-product matrix: hat(v) * w == v x w.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Lifted dimension for a dictionary order: 13 + 9*order.
pub const fn lifted_dim(order: usize) -> usize {
    13 + 9 * order
}

/// Lifts a state into the observable dictionary. `order` >= 1.
pub fn lift(x: &RigidBodyState, order: usize) -> DVector<f64> {
    assert!(order >= 1, "dictionary order must be at least 1");
    let n = lifted_dim(order);
    let mut z = DVector::zeros(n);
    z[0] = 1.0;
    z.rows_mut(1, STATE_DIM).copy_from(&x.to_vector());

    let r = rotation_from_euler(&x.orientation);
    let w = hat(&x.angular_velocity);
    let mut block = r;
    let mut offset = 1 + STATE_DIM;
    for _ in 0..order {
        block *= w;
        z.as_mut_slice()[offset..offset + 9].copy_from_slice(block.as_slice());
        offset += 9;
    }
    z
}

/// 12 x (13+9*order) matrix C with C * lift(x) == x exactly.
pub fn selection_matrix(order: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(STATE_DIM, lifted_dim(order));
    for i in 0..STATE_DIM {
        c[(i, i + 1)] = 1.0;
    }
    c
}
