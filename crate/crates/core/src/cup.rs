//! Synthetic acetabulum-like cups standing in for clinical surfaces.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::mesh::{TriMesh, Vec3};

/// Depth scale below which a synthetic cup is labelled dysplastic.
pub const DYSPLASTIC_DEPTH_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CupParams {
    /// Nominal sphere radius in mm.
    pub radius: f64,
    /// 1.0 gives a hemisphere; smaller values flatten the cup.
    pub depth_scale: f64,
    /// Fraction of the polar extent removed at the rim, in `[0, 1)`.
    pub rim_retraction: f64,
    /// Standard deviation of the radial vertex noise in mm.
    pub radial_noise_sd: f64,
    pub rings: usize,
    pub sectors: usize,
    pub seed: u64,
}

impl Default for CupParams {
    fn default() -> Self {
        CupParams {
            radius: 25.0,
            depth_scale: 1.0,
            rim_retraction: 0.0,
            radial_noise_sd: 0.0,
            rings: 20,
            sectors: 40,
            seed: 0,
        }
    }
}

impl CupParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParam(format!("cup parameters: {what}")));
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.rim_retraction) {
            return bad("rim_retraction must lie in [0, 1)");
        }
        if !(self.radial_noise_sd >= 0.0) {
            return bad("radial_noise_sd must be non-negative");
        }
        if self.rings < 1 || self.sectors < 3 || self.num_faces() < 8 {
            return bad("resolution must give at least 8 faces");
        }
        Ok(())
    }

    pub fn num_faces(&self) -> usize {
        self.sectors * (2 * self.rings).saturating_sub(1)
    }
}

/// Spherical cap with the apex on +z and the rim below it. The apex sits at
/// `z = depth_scale * radius`; the rim ring at polar angle
/// `(1 - rim_retraction) * π/2`.
pub fn generate_cup(params: &CupParams) -> Result<TriMesh> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.radial_noise_sd).map_err(|_| {
        Error::InvalidParam(format!("noise sd {}", params.radial_noise_sd))
    })?;
    let (rings, sectors) = (params.rings, params.sectors);
    let theta_max = 0.5 * PI * (1.0 - params.rim_retraction);
    let mut vertices = Vec::with_capacity(1 + rings * sectors);
    let place = |theta: f64, phi: f64, rng: &mut ChaCha8Rng| {
        let r = if params.radial_noise_sd > 0.0 {
            params.radius + noise.sample(rng)
        } else {
            params.radius
        };
        let (st, ct) = (theta.sin(), theta.cos());
        Vec3::new(r * st * phi.cos(), r * st * phi.sin(), params.depth_scale * r * ct)
    };
    vertices.push(place(0.0, 0.0, &mut rng));
    for i in 1..=rings {
        let theta = theta_max * i as f64 / rings as f64;
        for j in 0..sectors {
            let phi = 2.0 * PI * j as f64 / sectors as f64;
            vertices.push(place(theta, phi, &mut rng));
        }
    }
    let ring = |i: usize, j: usize| 1 + (i - 1) * sectors + (j % sectors);
    let mut faces = Vec::with_capacity(params.num_faces());
    for j in 0..sectors {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..rings {
        for j in 0..sectors {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    TriMesh::new(vertices, faces)
}

/// Vertex indices of the rim ring produced by [`generate_cup`].
pub fn rim_vertex_indices(params: &CupParams) -> Vec<usize> {
    let start = 1 + (params.rings - 1) * params.sectors;
    (start..start + params.sectors).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Control,
    Dysplastic,
}

impl Label {
    pub fn from_depth(depth_scale: f64) -> Label {
        if depth_scale < DYSPLASTIC_DEPTH_THRESHOLD {
            Label::Dysplastic
        } else {
            Label::Control
        }
    }

    /// 1 for dysplastic, 0 for control.
    pub fn as_binary(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Dysplastic => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Control => "control",
            Label::Dysplastic => "dysplastic",
        }
    }
}

/// One synthetic subject: shape parameters plus correlated radiographic angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSubject {
    pub label: Label,
    pub cup: CupParams,
    pub lcea: f64,
    pub ai: f64,
}

/// Draws a subject of the given class. `template` supplies the radius,
/// resolution and noise level; depth, rim retraction, seed and angles are
/// sampled.
pub fn sample_subject<R: Rng + ?Sized>(label: Label, template: &CupParams, rng: &mut R) -> SyntheticSubject {
    let (depth, rim, lcea_mean, ai_mean) = match label {
        Label::Control => (
            rng.random_range(0.85..1.05),
            rng.random_range(0.0..0.05),
            30.0,
            8.0,
        ),
        Label::Dysplastic => (
            rng.random_range(0.45..0.70),
            rng.random_range(0.10..0.25),
            16.0,
            19.0,
        ),
    };
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let seed = rng.next_u64();
    SyntheticSubject {
        label,
        cup: CupParams {
            depth_scale: depth,
            rim_retraction: rim,
            seed,
            ..*template
        },
        lcea: lcea_mean + 3.0 * z1,
        ai: ai_mean + 3.0 * z2,
    }
}
