//! Loss terms and task metrics.
//!
//! The sampler trains against a compound loss: a task loss evaluated on the
//! refined set, a conformity loss keeping it on the input surface, and an
//! offset loss suppressing long-range point movement. Rotation errors and
//! classification accuracy are the reporting metrics.

use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};
use crate::tensor::{Tape, Tensor};

/// Balance factors for the compound loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        for v in [lambda, alpha, beta] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {v} must be finite and >= 0")));
            }
        }
        if lambda == 0.0 && alpha == 0.0 && beta == 0.0 {
            return Err(Error::Config("at least one loss weight must be nonzero".into()));
        }
        Ok(Self { lambda, alpha, beta })
    }

    /// Defaults for classification training.
    pub fn classification() -> Self {
        Self {
            lambda: 0.5,
            alpha: 10.0,
            beta: 1.0,
        }
    }

    /// Defaults for registration training.
    pub fn registration() -> Self {
        Self {
            lambda: 100.0,
            alpha: 10.0,
            beta: 1.0,
        }
    }
}

/// lambda * task + alpha * conf + beta * off.
pub fn compound_loss(task: f64, conf: f64, off: f64, w: &LossWeights) -> Result<f64> {
    let value = w.lambda * task + w.alpha * conf + w.beta * off;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "compound loss is not finite: task={task} conf={conf} off={off}"
        )));
    }
    Ok(value)
}

/// Tape-side compound loss over scalar nodes.
pub fn compound_loss_on_tape(
    tape: &Tape,
    task: &Tensor,
    conf: &Tensor,
    off: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let t = tape.scale(task, w.lambda)?;
    let c = tape.scale(conf, w.alpha)?;
    let o = tape.scale(off, w.beta)?;
    tape.add(&tape.add(&t, &c)?, &o)
}

/// Negative log-probability of the true class from an explicit probability
/// vector. Training paths use [`Tape::cross_entropy_logits`], which applies
/// a stable log-softmax to raw logits instead.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Contract(format!(
            "cross_entropy: label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(
            "cross_entropy: probabilities must be nonnegative and sum to 1".into(),
        ));
    }
    let p = probs[label];
    if p <= 0.0 {
        return Err(Error::Numeric("cross_entropy: zero probability for true class".into()));
    }
    Ok(-p.ln())
}

/// Chamfer distance between the input set and the (tracked) refined set;
/// identical in value to [`geometry::chamfer`], recorded on the tape with
/// gradients flowing to the samples.
pub fn conformity_loss(tape: &Tape, refined: &Tensor, input: &PointCloud) -> Result<Tensor> {
    tape.chamfer_to_fixed(refined, input.points())
}

/// Mean per-pair displacement length, rows paired by index. Exact at zero
/// displacement; the differentiable tape twin smooths the square root.
pub fn offset_loss(before: &[[f64; 3]], after: &[[f64; 3]]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::Dimension(format!(
            "offset_loss: {} vs {} rows",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(Error::Contract("offset_loss: empty pair list".into()));
    }
    let mut total = 0.0;
    for (a, b) in before.iter().zip(after) {
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let dz = b[2] - a[2];
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    Ok(total / before.len() as f64)
}

/// Tape-side offset loss.
pub fn offset_loss_on_tape(tape: &Tape, s_prime: &Tensor, refined: &Tensor) -> Result<Tensor> {
    tape.offset_mean(s_prime, refined)
}

/// A rotation as a quaternion (w scalar part).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Unit quaternion for a rotation about an axis (axis need not be
    /// normalized), angle in radians.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Self::new(
            c,
            s * axis[0] / len,
            s * axis[1] / len,
            s * axis[2] / len,
        )
    }
}

/// How the rotation error maps the quaternion inner product to an angle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RotationErrorConvention {
    /// 2 * arccos(2 <q_pred, q_gt>^2 - 1), in degrees.
    #[default]
    Doubled,
    /// arccos(2 <q_pred, q_gt>^2 - 1), in degrees; exposed for comparison
    /// against external geodesic-angle conventions.
    Geodesic,
}

/// Rotation error between two unit quaternions, in degrees. Sign-invariant
/// in either argument; zero iff they agree up to sign.
pub fn rotation_error(
    pred: &Quaternion,
    gt: &Quaternion,
    convention: RotationErrorConvention,
) -> Result<f64> {
    for (q, name) in [(pred, "q_pred"), (gt, "q_gt")] {
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "rotation_error: {name} is not a unit quaternion (norm {})",
                q.norm()
            )));
        }
    }
    let inner = pred.dot(gt);
    let arg = (2.0 * inner * inner - 1.0).clamp(-1.0, 1.0);
    let radians = match convention {
        RotationErrorConvention::Doubled => 2.0 * arg.acos(),
        RotationErrorConvention::Geodesic => arg.acos(),
    };
    Ok(radians.to_degrees())
}

/// Arithmetic mean rotation error over prediction/ground-truth pairs.
pub fn mean_rotation_error(
    pairs: &[(Quaternion, Quaternion)],
    convention: RotationErrorConvention,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("mean_rotation_error: empty pair list".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += rotation_error(p, g, convention)?;
    }
    Ok(total / pairs.len() as f64)
}

/// A validated 3x3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Checks orthonormality and positive determinant within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let m = &self.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Contract(
                        "rotation matrix is not orthonormal".into(),
                    ));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "rotation matrix determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    /// For a rotation the inverse is the transpose.
    pub fn inverse(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn matmul(&self, other: &RotationMatrix) -> RotationMatrix {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }

    pub fn from_quaternion(q: &Quaternion) -> RotationMatrix {
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        RotationMatrix([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }
}

/// Registration task loss: the unsupervised Chamfer term between the
/// sampled source and template plus the squared Frobenius distance of
/// R_pred^-1 * R_gt from the identity.
pub fn registration_task_loss(
    source: &[[f64; 3]],
    template: &[[f64; 3]],
    r_pred: &RotationMatrix,
    r_gt: &RotationMatrix,
) -> Result<f64> {
    r_pred.validate()?;
    r_gt.validate()?;
    let chamfer = geometry::chamfer(source, template)?;
    let rel = r_pred.inverse().matmul(r_gt);
    let mut frob = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = rel.0[i][j] - if i == j { 1.0 } else { 0.0 };
            frob += d * d;
        }
    }
    Ok(chamfer + frob)
}

/// Fraction of matching prediction/label pairs.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy: empty prediction list".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_closed_forms() {
        let onehot = [0.0, 1.0, 0.0];
        assert_eq!(cross_entropy(&onehot, 1).unwrap(), 0.0);

        let uniform = [0.25; 4];
        assert!((cross_entropy(&uniform, 2).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let half = [0.5, 0.5];
        assert!((cross_entropy(&half, 0).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&half, 2),
            Err(Error::Contract(_))
        ));
        assert!(cross_entropy(&[0.9, 0.3], 0).is_err());
    }

    #[test]
    fn conformity_equals_plain_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = rng.gen_range(1..20);
            let m = rng.gen_range(1..20);
            let p: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let s: Vec<[f64; 3]> = (0..m)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let tape = Tape::new();
            let cloud = PointCloud::new(p.clone()).unwrap();
            let on_tape = conformity_loss(&tape, &Tensor::from_rows3(&s).unwrap(), &cloud)
                .unwrap()
                .item()
                .unwrap();
            let plain = geometry::chamfer(&p, &s).unwrap();
            assert!((on_tape - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn conformity_hand_value_and_zero_case() {
        let tape = Tape::new();
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let s = Tensor::from_rows3(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(conformity_loss(&tape, &s, &p).unwrap().item().unwrap(), 2.0);

        let same = Tensor::from_rows3(p.points()).unwrap();
        assert_eq!(conformity_loss(&tape, &same, &p).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn offset_loss_cases() {
        let a = [[0.0, 0.0, 0.0]];
        assert_eq!(offset_loss(&a, &a).unwrap(), 0.0);

        let moved = [[3.0, 4.0, 0.0]];
        assert_eq!(offset_loss(&a, &moved).unwrap(), 5.0);

        let two_before = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let two_after = [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(offset_loss(&two_before, &two_after).unwrap(), 2.0);
    }

    #[test]
    fn offset_loss_bounded_by_max_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let before: Vec<[f64; 3]> = (0..12)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let after: Vec<[f64; 3]> = before
            .iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-0.2..0.2),
                    p[1] + rng.gen_range(-0.2..0.2),
                    p[2] + rng.gen_range(-0.2..0.2),
                ]
            })
            .collect();
        let mean = offset_loss(&before, &after).unwrap();
        let max = before
            .iter()
            .zip(&after)
            .map(|(a, b)| {
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        assert!(mean <= max + 1e-12);

        // Equal displacements achieve the bound.
        let shifted: Vec<[f64; 3]> = before.iter().map(|p| [p[0] + 0.5, p[1], p[2]]).collect();
        assert!((offset_loss(&before, &shifted).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compound_loss_linearity() {
        let w = LossWeights::new(0.5, 10.0, 1.0).unwrap();
        assert_eq!(compound_loss(2.0, 3.0, 4.0, &LossWeights::new(0.5, 10.0, 1.0).unwrap()).unwrap(), 35.0);
        assert_eq!(compound_loss(7.0, 100.0, -3.0, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap(), 7.0);
        assert_eq!(compound_loss(7.0, 100.0, -3.0, &LossWeights::new(0.0, 0.0, 1.0).unwrap()).unwrap(), -3.0);

        // Exactly linear in each term.
        let base = compound_loss(1.0, 2.0, 3.0, &w).unwrap();
        let bumped = compound_loss(2.0, 2.0, 3.0, &w).unwrap();
        assert!((bumped - base - w.lambda).abs() < 1e-12);

        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rotation_error_closed_forms() {
        let q = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.7);
        assert_eq!(rotation_error(&q, &q, RotationErrorConvention::Doubled).unwrap(), 0.0);
        assert_eq!(
            rotation_error(&q, &q.negated(), RotationErrorConvention::Doubled).unwrap(),
            0.0
        );

        // Inner product cos(45 deg): 2 arccos(0) = 180 degrees as written.
        let a = Quaternion::identity();
        let b = Quaternion::from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
        assert!((a.dot(&b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let re = rotation_error(&a, &b, RotationErrorConvention::Doubled).unwrap();
        assert!((re - 180.0).abs() < 1e-9);
        let geo = rotation_error(&a, &b, RotationErrorConvention::Geodesic).unwrap();
        assert!((geo - 90.0).abs() < 1e-9);

        let not_unit = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            rotation_error(&not_unit, &a, RotationErrorConvention::Doubled),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rotation_error_is_symmetric_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let qa = Quaternion::from_axis_angle(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let qb = Quaternion::from_axis_angle(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let conv = RotationErrorConvention::Doubled;
            let ab = rotation_error(&qa, &qb, conv).unwrap();
            let ba = rotation_error(&qb, &qa, conv).unwrap();
            let neg = rotation_error(&qa.negated(), &qb, conv).unwrap();
            assert!((ab - ba).abs() < 1e-9);
            assert!((ab - neg).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_rotation_error_cases() {
        let q = Quaternion::identity();
        let pairs = vec![(q, q), (q, q)];
        assert_eq!(
            mean_rotation_error(&pairs, RotationErrorConvention::Doubled).unwrap(),
            0.0
        );

        // One exact pair and one 180-degree pair average to 90 degrees.
        let b = Quaternion::from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
        let pairs = vec![(q, q), (q, b)];
        let mre = mean_rotation_error(&pairs, RotationErrorConvention::Doubled).unwrap();
        assert!((mre - 90.0).abs() < 1e-9);

        assert!(mean_rotation_error(&[], RotationErrorConvention::Doubled).is_err());
    }

    #[test]
    fn registration_loss_closed_forms() {
        let t = [[0.3, -0.1, 0.4], [0.0, 0.2, -0.5]];
        let eye = RotationMatrix::identity();
        assert_eq!(registration_task_loss(&t, &t, &eye, &eye).unwrap(), 0.0);

        // 180-degree flip about z: diag(-1,-1,1); residual diag(-2,-2,0).
        let flip = RotationMatrix([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(registration_task_loss(&t, &t, &eye, &flip).unwrap(), 8.0);

        let skew = RotationMatrix([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            registration_task_loss(&t, &t, &skew, &eye),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rotation_term_is_swap_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = [[0.0, 0.0, 0.0]];
        for _ in 0..10 {
            let qa = Quaternion::from_axis_angle(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let qb = Quaternion::from_axis_angle(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let ra = RotationMatrix::from_quaternion(&qa);
            let rb = RotationMatrix::from_quaternion(&qb);
            let ab = registration_task_loss(&t, &t, &ra, &rb).unwrap();
            let ba = registration_task_loss(&t, &t, &rb, &ra).unwrap();
            assert!((ab - ba).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }
}
