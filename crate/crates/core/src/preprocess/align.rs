//! Correspondence-free similarity alignment under the varifold metric.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::{TriMesh, Vec3};
use crate::optim::{Adam, AdamConfig};
use crate::varifold::{embed, sq_dist_grad_vertices, sq_norm, VarifoldKernel};

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let s = q.iter().map(|c| c * c).sum::<f64>();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    Ok(quat_numerator(q) / s)
}

/// `|q|² R(q)`, homogeneous of degree two in the quaternion entries.
fn quat_numerator(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Pulls a gradient with respect to `R(q)` back to the quaternion entries.
fn quat_grad(q: [f64; 4], g_rot: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let s = q.iter().map(|c| c * c).sum::<f64>();
    let h = quat_numerator(q);
    let dh = [
        Matrix3::new(w, -z, y, z, w, -x, -y, x, w) * 2.0,
        Matrix3::new(x, y, z, y, -x, -w, z, w, -x) * 2.0,
        Matrix3::new(-y, x, w, x, y, z, -w, z, -y) * 2.0,
        Matrix3::new(-z, -w, x, w, -z, y, x, y, z) * 2.0,
    ];
    let gh = g_rot.component_mul(&h).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = g_rot.component_mul(&dh[k]).sum() / s - gh * 2.0 * q[k] / (s * s);
    }
    out
}

fn rotation_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let q = uq.into_inner();
    [q.w, q.i, q.j, q.k]
}

/// `x ↦ scale · R(quaternion) x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub quaternion: [f64; 4],
    pub scale: f64,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            quaternion: [1.0, 0.0, 0.0, 0.0],
            scale: 1.0,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(quaternion: [f64; 4], scale: f64, translation: Vec3) -> Result<Self> {
        let n = quaternion.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::ZeroQuaternion);
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidParam(format!("scale = {scale}")));
        }
        Ok(SimilarityTransform {
            quaternion: quaternion.map(|c| c / n),
            scale,
            translation,
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(self.quaternion).expect("unit quaternion")
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p * self.scale + self.translation
    }

    pub fn apply_mesh(&self, mesh: &TriMesh) -> TriMesh {
        let r = self.rotation() * self.scale;
        mesh.map_vertices(|v| r * v + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        let r = self.rotation() * other.rotation();
        SimilarityTransform {
            quaternion: rotation_to_quat(&r),
            scale: self.scale * other.scale,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation().transpose();
        let [w, x, y, z] = self.quaternion;
        SimilarityTransform {
            quaternion: [w, -x, -y, -z],
            scale: 1.0 / self.scale,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Largest parameter deviation from the identity, with the quaternion
    /// compared up to sign.
    pub fn deviation_from_identity(&self) -> f64 {
        let [w, x, y, z] = self.quaternion;
        let s = if w < 0.0 { -1.0 } else { 1.0 };
        let q_dev = [s * w - 1.0, s * x, s * y, s * z]
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
        let t_dev = self.translation.amax();
        q_dev.max((self.scale - 1.0).abs()).max(t_dev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentConfig {
    /// Stop as soon as the energy drops below this value.
    pub tolerance: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub kernel: VarifoldKernel,
    /// Reject steps that increase the energy (and halve the step size).
    pub monotone: bool,
}

impl AlignmentConfig {
    /// Defaults relative to a target: Adam step 1e-2, 500 iterations and
    /// tolerance `1e-6 · ‖μ_target‖²`.
    pub fn for_target(target: &TriMesh, kernel: VarifoldKernel) -> Self {
        let norm = sq_norm(&embed(target), &kernel);
        AlignmentConfig {
            tolerance: 1e-6 * norm,
            max_iters: 500,
            step_size: 1e-2,
            kernel,
            monotone: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.step_size > 0.0 && self.max_iters > 0 && self.kernel.sigma_pos > 0.0) {
            return Err(Error::InvalidParam(format!("alignment config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    pub aligned: TriMesh,
    pub energy: f64,
    /// Best-seen energy after every iteration of the winning start.
    pub trace: Vec<f64>,
}

/// Axis flips tried as initial rotations.
pub const START_QUATERNIONS: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Aligns `moving` onto `target` by minimising
/// `E(R, c, t) = ‖μ_target − μ_{cR(moving)+t}‖²` from each of the
/// [`START_QUATERNIONS`], keeping the lowest final energy.
pub fn rigid_align(moving: &TriMesh, target: &TriMesh, cfg: &AlignmentConfig) -> Result<Alignment> {
    cfg.validate()?;
    let mut best: Option<Alignment> = None;
    for q0 in START_QUATERNIONS {
        let run = align_from(moving, target, cfg, q0)?;
        let better = best.as_ref().is_none_or(|b| run.energy < b.energy);
        if better {
            let done = run.energy < cfg.tolerance;
            best = Some(run);
            if done {
                break;
            }
        }
    }
    Ok(best.expect("at least one start"))
}

/// Single-start alignment from the rotation `q0`, unit scale and zero
/// translation.
pub fn align_from(moving: &TriMesh, target: &TriMesh, cfg: &AlignmentConfig, q0: [f64; 4]) -> Result<Alignment> {
    let target_repr = embed(target);
    let target_norm = sq_norm(&target_repr, &cfg.kernel);
    // Rotation and scaling act about the moving centroid; translation is
    // measured in units of the target's size so all parameters share a scale.
    let pivot = moving.centroid();
    let length = target.bbox_diagonal().max(1e-12);
    let local: Vec<Vec3> = moving.vertices().iter().map(|v| v - pivot).collect();
    let faces = moving.faces();

    // params: q (4), log scale, translation / length (3)
    let mut params = [q0[0], q0[1], q0[2], q0[3], 0.0, 0.0, 0.0, 0.0];
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.step_size), params.len());

    let eval = |p: &[f64; 8], want_grad: bool| -> Result<(f64, [f64; 8])> {
        let q = [p[0], p[1], p[2], p[3]];
        let rot = quat_to_rotation(q)?;
        let c = p[4].exp();
        let t = Vec3::new(p[5], p[6], p[7]) * length;
        let rl: Vec<Vec3> = local.iter().map(|v| rot * v).collect();
        let verts: Vec<Vec3> = rl.iter().map(|v| v * c + pivot + t).collect();
        let (e, g) = sq_dist_grad_vertices(&verts, faces, &target_repr, target_norm, &cfg.kernel)?;
        let mut out = [0.0; 8];
        if want_grad {
            let mut g_t = Vec3::zeros();
            let mut g_c = 0.0;
            let mut g_r = Matrix3::zeros();
            for i in 0..verts.len() {
                g_t += g[i];
                g_c += g[i].dot(&rl[i]);
                g_r += g[i] * local[i].transpose();
            }
            let gq = quat_grad(q, &(g_r * c));
            out[..4].copy_from_slice(&gq);
            out[4] = g_c * c;
            out[5] = g_t.x * length;
            out[6] = g_t.y * length;
            out[7] = g_t.z * length;
        }
        Ok((e, out))
    };

    let (mut energy, mut grad) = eval(&params, true)?;
    if !energy.is_finite() {
        return Err(Error::AlignmentDiverged { iter: 0 });
    }
    let mut best_params = params;
    let mut best_energy = energy;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut lr_scale = 1.0;
    for iter in 0..cfg.max_iters {
        if best_energy < cfg.tolerance {
            break;
        }
        let prev = params;
        opt.step(&mut params, &grad, lr_scale);
        normalise_quat(&mut params);
        let (e, g) = eval(&params, true)?;
        if !e.is_finite() {
            return Err(Error::AlignmentDiverged { iter: iter + 1 });
        }
        if cfg.monotone && e > energy {
            params = prev;
            lr_scale *= 0.5;
            trace.push(best_energy);
            continue;
        }
        energy = e;
        grad = g;
        if energy < best_energy {
            best_energy = energy;
            best_params = params;
        }
        trace.push(best_energy);
    }

    let p = best_params;
    let rot_q = [p[0], p[1], p[2], p[3]];
    let c = p[4].exp();
    let t_local = Vec3::new(p[5], p[6], p[7]) * length;
    // c R (v - pivot) + pivot + t  =  c R v + (pivot + t - c R pivot)
    let rot = quat_to_rotation(rot_q)?;
    let translation = pivot + t_local - rot * pivot * c;
    let transform = SimilarityTransform::new(rot_q, c, translation)?;
    Ok(Alignment {
        aligned: transform.apply_mesh(moving),
        transform,
        energy: best_energy,
        trace,
    })
}

fn normalise_quat(p: &mut [f64; 8]) {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]).sqrt();
    if n > 0.0 {
        for c in p.iter_mut().take(4) {
            *c /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::cup::{generate_cup, CupParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_x() {
        let h = core::f64::consts::FRAC_PI_4;
        let r = quat_to_rotation([h.cos(), h.sin(), 0.0, 0.0]).unwrap();
        assert!((r * Vec3::y() - Vec3::z()).norm() < 1e-9);
    }

    #[test]
    fn double_cover() {
        let q = [0.3, -0.2, 0.9, 0.1];
        let r1 = quat_to_rotation(q).unwrap();
        let r2 = quat_to_rotation(q.map(|c| -c)).unwrap();
        assert!((r1 - r2).norm() < 1e-15);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(quat_to_rotation([0.0; 4]), Err(Error::ZeroQuaternion)));
    }

    #[test]
    fn quaternion_gradient_matches_fd() {
        let q = [0.7, -0.3, 0.5, 0.2];
        let g_r = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 1.1, 0.4, -0.2);
        let f = |q: [f64; 4]| quat_to_rotation(q).unwrap().component_mul(&g_r).sum();
        let an = quat_grad(q, &g_r);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-7, "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn compose_and_inverse() {
        let a = SimilarityTransform::new([0.9, 0.1, -0.3, 0.2], 1.3, Vec3::new(1.0, 2.0, -1.0)).unwrap();
        let id = a.compose(&a.inverse());
        assert!(id.deviation_from_identity() < 1e-12);
        let p = Vec3::new(0.3, -4.0, 2.0);
        let b = SimilarityTransform::new([0.2, 0.8, 0.1, -0.4], 0.7, Vec3::new(-3.0, 0.5, 0.0)).unwrap();
        assert!((a.compose(&b).apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-12);
    }

    fn small_cup() -> TriMesh {
        generate_cup(&CupParams {
            rings: 5,
            sectors: 10,
            ..CupParams::default()
        })
        .unwrap()
    }

    #[test]
    fn self_alignment_is_identity() {
        let m = small_cup();
        let k = VarifoldKernel::for_template(&m);
        let mut cfg = AlignmentConfig::for_target(&m, k);
        cfg.tolerance = 1e-8;
        let out = rigid_align(&m, &m, &cfg).unwrap();
        assert!(out.energy < 1e-8);
        assert!(out.transform.deviation_from_identity() < 1e-3);
    }

    #[test]
    fn shallow_to_deep_has_positive_energy() {
        let deep = small_cup();
        let shallow = generate_cup(&CupParams {
            rings: 5,
            sectors: 10,
            depth_scale: 0.5,
            rim_retraction: 0.2,
            ..CupParams::default()
        })
        .unwrap();
        let k = VarifoldKernel::for_template(&deep);
        let mut cfg = AlignmentConfig::for_target(&deep, k);
        cfg.max_iters = 100;
        let out = rigid_align(&shallow, &deep, &cfg).unwrap();
        assert!(out.energy > 0.0);
    }

    #[test]
    fn monotone_mode_never_increases() {
        let m = small_cup();
        let moved = SimilarityTransform::new([0.95, 0.2, 0.1, 0.0], 1.1, Vec3::new(2.0, 0.0, -1.0))
            .unwrap()
            .apply_mesh(&m);
        let k = VarifoldKernel::for_template(&m);
        let mut cfg = AlignmentConfig::for_target(&m, k);
        cfg.max_iters = 60;
        cfg.monotone = true;
        let out = align_from(&moved, &m, &cfg, START_QUATERNIONS[0]).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    proptest! {
        #[test]
        fn rotations_are_orthonormal(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-6);
            let r = quat_to_rotation([w, x, y, z]).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn thousand_random_quaternions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = quat_to_rotation(q).unwrap();
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        }
    }
}
