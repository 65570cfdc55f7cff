//! Pose error metrics and their gradients.

use ndarray::{Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

/// Guards divisions by a vector norm near a coincident pair of points.
const NORM_EPS: f64 = 1e-12;

fn check_same_shape(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "coordinates must be 3-dimensional, got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

/// Mean per-joint position error: Euclidean distance between corresponding
/// joints, averaged over every frame and joint. Units follow the input (mm).
pub fn mpjpe(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    check_same_shape(pred, target)?;
    let (t, n, _) = pred.dim();
    let mut acc = 0.0;
    for f in 0..t {
        for j in 0..n {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pred[[f, j, c]] - target[[f, j, c]];
                d2 += d * d;
            }
            acc += d2.sqrt();
        }
    }
    Ok(acc / (t * n) as f64)
}

/// Gradient of [`mpjpe`] with respect to `pred`.
pub fn mpjpe_grad(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    check_same_shape(pred, target)?;
    let (t, n, _) = pred.dim();
    let scale = 1.0 / (t * n) as f64;
    let mut grad = Array3::zeros(pred.raw_dim());
    for f in 0..t {
        for j in 0..n {
            let mut d = [0.0f64; 3];
            let mut d2 = 0.0;
            for c in 0..3 {
                d[c] = pred[[f, j, c]] - target[[f, j, c]];
                d2 += d[c] * d[c];
            }
            let dist = d2.sqrt();
            if dist > NORM_EPS {
                for c in 0..3 {
                    grad[[f, j, c]] = scale * d[c] / dist;
                }
            }
        }
    }
    Ok(grad)
}

fn bone_lengths(frames: ArrayView3<'_, f64>, topo: &SkeletonTopology) -> Vec<Vec<f64>> {
    let t = frames.shape()[0];
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let pose = frames.index_axis(Axis(0), f);
        let mut row = Vec::with_capacity(topo.bones().len());
        for &(a, b) in topo.bones() {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pose[[a, c]] - pose[[b, c]];
                d2 += d * d;
            }
            row.push(d2.sqrt());
        }
        out.push(row);
    }
    out
}

/// Mean absolute difference in bone length between a reference pose stream and
/// a predicted one, averaged over frames and bones.
pub fn bone_length_loss(
    reference: ArrayView3<'_, f64>,
    pred: ArrayView3<'_, f64>,
    topo: &SkeletonTopology,
) -> Result<f64> {
    check_same_shape(reference, pred)?;
    if reference.shape()[1] != topo.n_joints() {
        return Err(Error::Shape(format!(
            "pose has {} joints, topology has {}",
            reference.shape()[1],
            topo.n_joints()
        )));
    }
    if topo.bones().is_empty() {
        return Err(Error::Precondition("topology has no bones".into()));
    }
    let lr = bone_lengths(reference, topo);
    let lp = bone_lengths(pred, topo);
    let t = reference.shape()[0];
    let nb = topo.bones().len();
    let mut acc = 0.0;
    for f in 0..t {
        for b in 0..nb {
            acc += (lr[f][b] - lp[f][b]).abs();
        }
    }
    Ok(acc / (t * nb) as f64)
}

/// Gradient of [`bone_length_loss`] with respect to `pred`.
pub fn bone_length_loss_grad(
    reference: ArrayView3<'_, f64>,
    pred: ArrayView3<'_, f64>,
    topo: &SkeletonTopology,
) -> Result<Array3<f64>> {
    check_same_shape(reference, pred)?;
    if reference.shape()[1] != topo.n_joints() {
        return Err(Error::Shape(format!(
            "pose has {} joints, topology has {}",
            reference.shape()[1],
            topo.n_joints()
        )));
    }
    if topo.bones().is_empty() {
        return Err(Error::Precondition("topology has no bones".into()));
    }
    let lr = bone_lengths(reference, topo);
    let t = reference.shape()[0];
    let nb = topo.bones().len();
    let scale = 1.0 / (t * nb) as f64;
    let mut grad = Array3::zeros(pred.raw_dim());
    for f in 0..t {
        for (bi, &(a, b)) in topo.bones().iter().enumerate() {
            let mut d = [0.0f64; 3];
            let mut d2 = 0.0;
            for c in 0..3 {
                d[c] = pred[[f, a, c]] - pred[[f, b, c]];
                d2 += d[c] * d[c];
            }
            let lp = d2.sqrt();
            if lp <= NORM_EPS {
                continue;
            }
            // d|lr - lp|/dlp = -sign(lr - lp); zero at the tie
            let diff = lr[f][bi] - lp;
            if diff == 0.0 {
                continue;
            }
            let outer = -diff.signum() * scale;
            for c in 0..3 {
                let g = outer * d[c] / lp;
                grad[[f, a, c]] += g;
                grad[[f, b, c]] -= g;
            }
        }
    }
    Ok(grad)
}
