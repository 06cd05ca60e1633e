//! Semi-automated extraction of the acetabular cup from a larger surface.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{component_face_sets, fit_plane, Landmarks, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub center: Vec3,
    pub radius: f64,
}

impl Ball {
    fn contains(&self, p: &Vec3) -> bool {
        (p - self.center).norm() <= self.radius * (1.0 + 1e-9) + 1e-12
    }
}

/// Minimal enclosing ball (Welzl's algorithm, incremental form). The
/// points are visited in a fixed pseudo-random order so the result is
/// deterministic.
pub fn minimal_enclosing_ball(points: &[Vec3]) -> Result<Ball> {
    if points.is_empty() {
        return Err(Error::EmptyInput("points for enclosing ball"));
    }
    let mut pts = points.to_vec();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    let mut ball = Ball {
        center: pts[0],
        radius: 0.0,
    };
    for i in 1..pts.len() {
        if !ball.contains(&pts[i]) {
            ball = ball_with_one(&pts[..i], pts[i]);
        }
    }
    Ok(ball)
}

fn ball_with_one(pts: &[Vec3], q: Vec3) -> Ball {
    let mut ball = Ball {
        center: q,
        radius: 0.0,
    };
    for j in 0..pts.len() {
        if !ball.contains(&pts[j]) {
            ball = ball_with_two(&pts[..j], q, pts[j]);
        }
    }
    ball
}

fn ball_with_two(pts: &[Vec3], q1: Vec3, q2: Vec3) -> Ball {
    let mut ball = diametral(q1, q2);
    for k in 0..pts.len() {
        if !ball.contains(&pts[k]) {
            ball = ball_with_three(&pts[..k], q1, q2, pts[k]);
        }
    }
    ball
}

fn ball_with_three(pts: &[Vec3], q1: Vec3, q2: Vec3, q3: Vec3) -> Ball {
    let mut ball = circum_ball3(q1, q2, q3);
    for l in 0..pts.len() {
        if !ball.contains(&pts[l]) {
            ball = circum_ball4(q1, q2, q3, pts[l]);
        }
    }
    ball
}

fn diametral(a: Vec3, b: Vec3) -> Ball {
    Ball {
        center: (a + b) * 0.5,
        radius: (a - b).norm() * 0.5,
    }
}

fn circum_ball3(a: Vec3, b: Vec3, c: Vec3) -> Ball {
    let ab = b - a;
    let ac = c - a;
    let n = ab.cross(&ac);
    let n2 = n.norm_squared();
    let scale = ab.norm_squared().max(ac.norm_squared());
    if n2 <= 1e-24 * scale * scale {
        // collinear: the farthest pair spans the ball
        let cands = [diametral(a, b), diametral(a, c), diametral(b, c)];
        return cands
            .into_iter()
            .max_by(|x, y| x.radius.total_cmp(&y.radius))
            .expect("three candidates");
    }
    let offset = (n.cross(&ab) * ac.norm_squared() + ac.cross(&n) * ab.norm_squared()) / (2.0 * n2);
    Ball {
        center: a + offset,
        radius: offset.norm(),
    }
}

fn circum_ball4(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> Ball {
    let m = Matrix3::from_rows(&[
        (b - a).transpose(),
        (c - a).transpose(),
        (d - a).transpose(),
    ]);
    let rhs = Vec3::new(
        0.5 * (b - a).norm_squared(),
        0.5 * (c - a).norm_squared(),
        0.5 * (d - a).norm_squared(),
    );
    let scale = m.norm().powi(3).max(1e-300);
    if m.determinant().abs() > 1e-12 * scale {
        if let Some(inv) = m.try_inverse() {
            let off = inv * rhs;
            return Ball {
                center: a + off,
                radius: off.norm(),
            };
        }
    }
    // coplanar: smallest three-point ball that covers all four
    let pts = [a, b, c, d];
    let mut best: Option<Ball> = None;
    for skip in 0..4 {
        let tri: Vec<Vec3> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        let ball = circum_ball3(tri[0], tri[1], tri[2]);
        if ball.contains(&pts[skip]) && best.is_none_or(|b| ball.radius < b.radius) {
            best = Some(ball);
        }
    }
    best.unwrap_or_else(|| circum_ball3(a, b, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig {
    /// Slack, relative to the ball radius, allowed below the rim plane and
    /// outside the ball when selecting vertices.
    pub rel_tolerance: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            rel_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    /// The extracted cup, expressed in the rotated frame where the rim
    /// plane is horizontal.
    pub cup: TriMesh,
    pub rotation: Matrix3<f64>,
    pub plane_level: f64,
    pub ball: Ball,
}

pub fn extract_cup(mesh: &TriMesh, rim_landmarks: &Landmarks) -> Result<TriMesh> {
    extract_cup_with(mesh, rim_landmarks, &ExtractionConfig::default()).map(|e| e.cup)
}

/// Rim-plane fit, rotation of the plane normal onto +z, minimal ball
/// around the rotated rim and everything above it, selection of the
/// vertices inside the ball and above the plane, and removal of stray
/// components.
pub fn extract_cup_with(mesh: &TriMesh, rim_landmarks: &Landmarks, cfg: &ExtractionConfig) -> Result<Extraction> {
    let (normal, level) = fit_plane(rim_landmarks)?;
    let rotation = Rotation3::rotation_between(&normal, &Vec3::z())
        .unwrap_or_else(Rotation3::identity)
        .into_inner();
    let rotated = mesh.map_vertices(|v| rotation * v);
    let rim: Vec<Vec3> = rim_landmarks.points().iter().map(|p| rotation * p).collect();

    let mut support = rim.clone();
    support.extend(rotated.vertices().iter().filter(|v| v.z > level).copied());
    let ball = minimal_enclosing_ball(&support)?;

    let tol = cfg.rel_tolerance * ball.radius;
    let keep: Vec<bool> = rotated
        .vertices()
        .iter()
        .map(|v| v.z >= level - tol && (v - ball.center).norm() <= ball.radius + tol)
        .collect();
    let faces: Vec<usize> = rotated
        .faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.iter().all(|&i| keep[i]))
        .map(|(i, _)| i)
        .collect();
    if faces.is_empty() {
        return Err(Error::ExtractionFailed);
    }
    let region = rotated.submesh(&faces)?;
    let largest = component_face_sets(&region)
        .into_iter()
        .next()
        .ok_or(Error::ExtractionFailed)?;
    let cup = region.submesh(&largest)?;
    Ok(Extraction {
        cup,
        rotation,
        plane_level: level,
        ball,
    })
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::cup::{generate_cup, rim_vertex_indices, CupParams};
    use crate::mesh::connected_components;
    use alloc::vec;
    use core::f64::consts::PI;
    use rand::Rng;

    #[test]
    fn ball_of_random_points_contains_all_and_touches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..200)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5)))
                .collect();
            let b = minimal_enclosing_ball(&pts).unwrap();
            assert!(pts.iter().all(|p| b.contains(p)));
            let on_boundary = pts.iter().filter(|p| ((*p - b.center).norm() - b.radius).abs() < 1e-9).count();
            assert!(on_boundary >= 2);
            // shrinking fails
            let smaller = Ball { center: b.center, radius: b.radius * 0.999 };
            assert!(pts.iter().any(|p| !smaller.contains(p)));
        }
    }

    #[test]
    fn ball_of_hemisphere_is_its_sphere() {
        let cup = generate_cup(&CupParams::default()).unwrap();
        let b = minimal_enclosing_ball(cup.vertices()).unwrap();
        assert!(b.center.norm() < 1e-6);
        assert!((b.radius - 25.0).abs() < 1e-6);
    }

    /// Hemisphere (apex up) welded into a flat square plate at z = 0.
    fn hemisphere_on_plate(p: &CupParams) -> (TriMesh, usize) {
        let cup = generate_cup(p).unwrap();
        let mut verts = cup.vertices().to_vec();
        let mut faces = cup.faces().to_vec();
        let rim = rim_vertex_indices(p);
        // outer ring at 1.5 R and plate corners
        let outer_start = verts.len();
        for j in 0..p.sectors {
            let phi = 2.0 * PI * j as f64 / p.sectors as f64;
            verts.push(Vec3::new(1.5 * p.radius * phi.cos(), 1.5 * p.radius * phi.sin(), 0.0));
        }
        for j in 0..p.sectors {
            let (a, b) = (rim[j], rim[(j + 1) % p.sectors]);
            let (c, d) = (outer_start + j, outer_start + (j + 1) % p.sectors);
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
        let outer2 = verts.len();
        for j in 0..p.sectors {
            let phi = 2.0 * PI * j as f64 / p.sectors as f64;
            verts.push(Vec3::new(3.0 * p.radius * phi.cos(), 3.0 * p.radius * phi.sin(), 0.0));
        }
        for j in 0..p.sectors {
            let (a, b) = (outer_start + j, outer_start + (j + 1) % p.sectors);
            let (c, d) = (outer2 + j, outer2 + (j + 1) % p.sectors);
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
        (TriMesh::new(verts, faces).unwrap(), cup.num_faces())
    }

    fn equator_landmarks(r: f64) -> Landmarks {
        Landmarks::new(
            (0..4)
                .map(|i| {
                    let phi = 0.5 * PI * i as f64 + 0.3;
                    Vec3::new(r * phi.cos(), r * phi.sin(), 0.0)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hemisphere_recovered_from_plate() {
        let p = CupParams {
            rings: 8,
            sectors: 16,
            ..CupParams::default()
        };
        let (mesh, cup_faces) = hemisphere_on_plate(&p);
        let out = extract_cup(&mesh, &equator_landmarks(p.radius)).unwrap();
        assert!((out.num_faces() as i64 - cup_faces as i64).abs() <= 2);
    }

    #[test]
    fn clean_cup_is_kept() {
        let p = CupParams {
            rings: 10,
            sectors: 20,
            rim_retraction: 0.1,
            ..CupParams::default()
        };
        let cup = generate_cup(&p).unwrap();
        let rim = rim_vertex_indices(&p);
        let lm = Landmarks::new(vec![
            cup.vertices()[rim[0]],
            cup.vertices()[rim[5]],
            cup.vertices()[rim[10]],
            cup.vertices()[rim[15]],
        ])
        .unwrap();
        let out = extract_cup(&cup, &lm).unwrap();
        assert!(out.num_vertices() as f64 >= 0.99 * cup.num_vertices() as f64);
    }

    #[test]
    fn floating_blob_removed() {
        let p = CupParams {
            rings: 6,
            sectors: 12,
            ..CupParams::default()
        };
        let cup = generate_cup(&p).unwrap();
        let mut verts = cup.vertices().to_vec();
        let mut faces = cup.faces().to_vec();
        // small tetrahedron hovering inside the cup's half-space
        let base = verts.len();
        let c = Vec3::new(5.0, 3.0, 12.0);
        verts.extend([c, c + Vec3::x(), c + Vec3::y(), c + Vec3::z()]);
        faces.extend([[base, base + 2, base + 1], [base, base + 1, base + 3], [base + 1, base + 2, base + 3], [base, base + 3, base + 2]]);
        let mesh = TriMesh::new(verts, faces).unwrap();
        let out = extract_cup(&mesh, &equator_landmarks(p.radius)).unwrap();
        assert_eq!(out.num_faces(), cup.num_faces());
        assert_eq!(connected_components(&out).len(), 1);
    }

    #[test]
    fn tilted_input_is_levelled() {
        let p = CupParams {
            rings: 6,
            sectors: 12,
            ..CupParams::default()
        };
        let cup = generate_cup(&p).unwrap();
        let rot = Rotation3::from_euler_angles(0.4, -0.2, 0.1);
        let tilted = cup.map_vertices(|v| rot * v + Vec3::new(4.0, -1.0, 2.0));
        let lm = Landmarks::new(
            equator_landmarks(p.radius)
                .points()
                .iter()
                .map(|v| rot * v + Vec3::new(4.0, -1.0, 2.0))
                .collect(),
        )
        .unwrap();
        let out = extract_cup_with(&tilted, &lm, &ExtractionConfig::default()).unwrap();
        assert_eq!(out.cup.num_faces(), cup.num_faces());
        let lowest = out.cup.vertices().iter().map(|v| v.z).fold(f64::MAX, f64::min);
        assert!((lowest - out.plane_level).abs() < 1e-9);
    }

    #[test]
    fn nothing_above_plane_fails() {
        let p = CupParams { rings: 4, sectors: 8, ..CupParams::default() };
        let cup = generate_cup(&p).unwrap();
        // plane far above the cup
        let lm = Landmarks::new(vec![
            Vec3::new(0.0, 0.0, 500.0),
            Vec3::new(1.0, 0.0, 500.0),
            Vec3::new(0.0, 1.0, 500.0),
        ])
        .unwrap();
        assert!(matches!(extract_cup(&cup, &lm), Err(Error::ExtractionFailed)));
    }
}
