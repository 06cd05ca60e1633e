use gpdssm_core::cup::{generate_cup, CupParams};
use gpdssm_core::preprocess::{rigid_align, AlignmentConfig, SimilarityTransform};
use gpdssm_core::varifold::VarifoldKernel;
use gpdssm_core::{TriMesh, Vec3};
use rand::{Rng, SeedableRng};

/// Cup warped so it has no rotational symmetry.
pub fn asymmetric_cup(seed: u64) -> TriMesh {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = CupParams {
        rings: 6,
        sectors: 12,
        depth_scale: rng.random_range(0.5..1.0),
        rim_retraction: rng.random_range(0.0..0.2),
        radial_noise_sd: 0.3,
        seed,
        ..CupParams::default()
    };
    let (a, b) = (rng.random_range(0.05..0.15), rng.random_range(0.1..0.3));
    let r = p.radius;
    generate_cup(&p)
        .unwrap()
        .map_vertices(|v| Vec3::new(v.x + a * v.y * v.y / r, 0.8 * v.y, v.z + b * v.x))
}

fn tight_config(target: &TriMesh) -> AlignmentConfig {
    let mut cfg = AlignmentConfig::for_target(target, VarifoldKernel::for_template(target));
    cfg.tolerance *= 1e-4;
    cfg.max_iters = 1000;
    cfg
}

fn ground_truth() -> SimilarityTransform {
    let axis = Vec3::new(1.0, 1.0, 0.0) / 2f64.sqrt();
    let half = 25f64.to_radians() / 2.0;
    SimilarityTransform::new(
        [half.cos(), axis.x * half.sin(), axis.y * half.sin(), axis.z * half.sin()],
        1.2,
        Vec3::new(3.0, -1.0, 2.0),
    )
    .unwrap()
}

#[test]
fn recovers_known_similarity() {
    let gt = ground_truth();
    for seed in 0..20 {
        let moving = asymmetric_cup(seed);
        let target = gt.apply_mesh(&moving);
        let out = rigid_align(&moving, &target, &tight_config(&target)).unwrap();
        let dev = out.transform.compose(&gt.inverse()).deviation_from_identity();
        assert!(dev < 1e-2, "instance {seed}: deviation {dev:e}");
    }
}

#[test]
fn forward_and_backward_alignments_cancel() {
    let pose = SimilarityTransform::new([0.96, -0.1, 0.2, 0.15], 0.9, Vec3::new(-2.0, 1.5, 0.5)).unwrap();
    for seed in 100..104 {
        let a = asymmetric_cup(seed);
        let b = pose.apply_mesh(&a);
        let ab = rigid_align(&a, &b, &tight_config(&b)).unwrap().transform;
        let ba = rigid_align(&b, &a, &tight_config(&a)).unwrap().transform;
        assert!(ba.compose(&ab).deviation_from_identity() < 5e-2);
    }
}
