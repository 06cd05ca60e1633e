//! Versioned binary archives for trained states.
//!
//! Layout: the 8-byte magic `GPDSSMAR`, a `u32` format version, a `u32` kind
//! tag, then the payload. Every integer is a little-endian `u64`, every real a
//! little-endian IEEE `f64`, strings are a length followed by UTF-8 bytes,
//! booleans are one byte. Vectors carry their length; matrices carry rows and
//! columns followed by row-major entries; meshes carry the vertex count,
//! `x y z` per vertex, the face count and three indices per face.
//!
//! GPDSSM payload: ids, template mesh, control points, σ_v, σ_pos, β, time
//! steps, σ_v-optimisation flag, GP variance, length_t, length_z, inducing
//! times, inducing latents, q(U) mean, q(U) factor, latent count, then
//! per-shape latent mean and sd, and the training loss trace.
//!
//! LDDMM payload: ids, template mesh, control points, σ_v, σ_pos, β, λ, time
//! steps, momentum count with one point list each, PCA mean, components,
//! variances, embeddings, and the summed registration trace.
//!
//! Latent payload: model name, row count, then per row id, mean, sd and
//! reconstruction energy.

use std::path::Path;

use gpdssm_core::flow::{SpatialKernel, Template};
use gpdssm_core::gp::{GaussianDist, GpKernelParams, InducingState};
use gpdssm_core::gpdssm::GpdssmState;
use gpdssm_core::lddmm::{AtlasState, MomentaPca};
use gpdssm_core::varifold::VarifoldKernel;
use gpdssm_core::{TriMesh, Vec3};
use nalgebra::DMatrix;

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"GPDSSMAR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Gpdssm = 1,
    Lddmm = 2,
    Latents = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpdssmArchive {
    pub ids: Vec<String>,
    pub state: GpdssmState,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LddmmArchive {
    pub ids: Vec<String>,
    pub atlas: AtlasState,
    pub pca: MomentaPca,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub id: String,
    pub mean: Vec<f64>,
    /// Empty for point estimates.
    pub sd: Vec<f64>,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentArchive {
    pub model: String,
    pub rows: Vec<LatentRow>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: Kind) -> Self {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.extend_from_slice(&(kind as u32).to_le_bytes());
        w
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.0.push(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn points(&mut self, p: &[Vec3]) {
        self.usize(p.len());
        for v in p {
            self.f64(v.x);
            self.f64(v.y);
            self.f64(v.z);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }
    fn mesh(&mut self, m: &TriMesh) {
        self.points(m.vertices());
        self.usize(m.num_faces());
        for f in m.faces() {
            f.iter().for_each(|&i| self.usize(i));
        }
    }
    fn ids(&mut self, ids: &[String]) {
        self.usize(ids.len());
        ids.iter().for_each(|s| self.str(s));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], path: &'a Path, kind: Kind) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a GPDSSM archive"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.err(&format!("unsupported archive version {version} (expected {VERSION})")));
        }
        let k = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if k != kind as u32 {
            return Err(r.err(&format!("archive kind {k}, expected {}", kind as u32)));
        }
        Ok(r)
    }
    fn err(&self, msg: &str) -> AppError {
        AppError::validation(format!("{}: byte {}: {msg}", self.path.display(), self.pos))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("archive truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Length prefix, bounded by the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit.max(1) as u64) > remaining {
            return Err(self.err("length exceeds archive size"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.err(&format!("invalid boolean byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn points(&mut self) -> Result<Vec<Vec3>> {
        let n = self.len(24)?;
        (0..n).map(|_| Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))).collect()
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.len(0)?;
        let cols = self.len(0)?;
        let count = rows.checked_mul(cols).filter(|&c| c <= (self.buf.len() - self.pos) / 8);
        let count = count.ok_or_else(|| self.err("matrix exceeds archive size"))?;
        let data: Vec<f64> = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
    fn mesh(&mut self) -> Result<TriMesh> {
        let vertices = self.points()?;
        let nf = self.len(24)?;
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let mut f = [0usize; 3];
            for slot in &mut f {
                *slot = self.u64()? as usize;
            }
            faces.push(f);
        }
        TriMesh::new(vertices, faces).map_err(|e| self.err(&e.to_string()))
    }
    fn ids(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn model_err(path: &Path, e: gpdssm_core::Error) -> AppError {
    AppError::validation(format!("{}: {e}", path.display()))
}

impl GpdssmArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = Writer::new(Kind::Gpdssm);
        w.ids(&self.ids);
        w.mesh(s.template.mesh());
        w.points(s.template.points());
        w.f64(s.spatial.sigma_v);
        w.f64(s.varifold.sigma_pos);
        w.f64(s.beta);
        w.usize(s.steps);
        w.bool(s.optimize_sigma_v);
        w.f64(s.gp.variance);
        w.f64(s.gp.length_t);
        w.f64(s.gp.length_z);
        w.vec(&s.inducing.times);
        w.matrix(&s.inducing.latents);
        w.matrix(&s.inducing.q_mean);
        w.matrix(&s.inducing.q_chol);
        w.usize(s.latents.len());
        for q in &s.latents {
            w.vec(&q.mean);
            w.vec(&q.sd);
        }
        w.vec(&self.trace);
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, Kind::Gpdssm)?;
        let ids = r.ids()?;
        let mesh = r.mesh()?;
        let points = r.points()?;
        let m = |e| model_err(path, e);
        let template = Template::new(points, mesh).map_err(m)?;
        let spatial = SpatialKernel::new(r.f64()?).map_err(m)?;
        let varifold = VarifoldKernel::new(r.f64()?).map_err(m)?;
        let beta = r.f64()?;
        let steps = r.u64()? as usize;
        let optimize_sigma_v = r.bool()?;
        let gp = GpKernelParams::new(r.f64()?, r.f64()?, r.f64()?).map_err(m)?;
        let times = r.vec()?;
        let latents_u = r.matrix()?;
        let q_mean = r.matrix()?;
        let q_chol = r.matrix()?;
        let inducing = InducingState::new(times, latents_u, q_mean, q_chol).map_err(m)?;
        let n = r.len(16)?;
        let latents = (0..n)
            .map(|_| GaussianDist::new(r.vec()?, r.vec()?).map_err(m))
            .collect::<Result<Vec<_>>>()?;
        let trace = r.vec()?;
        r.finish()?;
        if ids.len() != latents.len() {
            return Err(r.err("id count differs from latent count"));
        }
        if !(beta.is_finite() && beta > 0.0) || steps == 0 {
            return Err(r.err("invalid beta or step count"));
        }
        let state =
            GpdssmState { template, spatial, varifold, gp, inducing, latents, beta, steps, optimize_sigma_v };
        Ok(GpdssmArchive { ids, state, trace })
    }
}

impl LddmmArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.atlas;
        let mut w = Writer::new(Kind::Lddmm);
        w.ids(&self.ids);
        w.mesh(a.template.mesh());
        w.points(a.template.points());
        w.f64(a.spatial.sigma_v);
        w.f64(a.varifold.sigma_pos);
        w.f64(a.beta);
        w.f64(a.lambda);
        w.usize(a.steps);
        w.usize(a.momenta.len());
        a.momenta.iter().for_each(|m| w.points(m));
        w.vec(&self.pca.mean);
        w.matrix(&self.pca.components);
        w.vec(&self.pca.variances);
        w.matrix(&self.pca.embeddings);
        w.vec(&self.trace);
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, Kind::Lddmm)?;
        let m = |e| model_err(path, e);
        let ids = r.ids()?;
        let mesh = r.mesh()?;
        let points = r.points()?;
        let template = Template::new(points, mesh).map_err(m)?;
        let spatial = SpatialKernel::new(r.f64()?).map_err(m)?;
        let varifold = VarifoldKernel::new(r.f64()?).map_err(m)?;
        let beta = r.f64()?;
        let lambda = r.f64()?;
        let steps = r.u64()? as usize;
        let count = r.len(8)?;
        let momenta = (0..count).map(|_| r.points()).collect::<Result<Vec<_>>>()?;
        let mean = r.vec()?;
        let components = r.matrix()?;
        let variances = r.vec()?;
        let embeddings = r.matrix()?;
        let trace = r.vec()?;
        r.finish()?;
        let n = template.num_points();
        let consistent = ids.len() == momenta.len()
            && momenta.iter().all(|p| p.len() == n)
            && mean.len() == 3 * n
            && components.nrows() == 3 * n
            && variances.len() == components.ncols()
            && embeddings.nrows() == ids.len()
            && embeddings.ncols() == components.ncols();
        if !consistent {
            return Err(r.err("inconsistent LDDMM archive dimensions"));
        }
        let atlas = AtlasState { template, spatial, varifold, momenta, beta, lambda, steps };
        Ok(LddmmArchive { ids, atlas, pca: MomentaPca { mean, components, variances, embeddings }, trace })
    }
}

impl LatentArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::Latents);
        w.str(&self.model);
        w.usize(self.rows.len());
        for row in &self.rows {
            w.str(&row.id);
            w.vec(&row.mean);
            w.vec(&row.sd);
            w.f64(row.energy);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, Kind::Latents)?;
        let model = r.str()?;
        let n = r.len(32)?;
        let rows = (0..n)
            .map(|_| Ok(LatentRow { id: r.str()?, mean: r.vec()?, sd: r.vec()?, energy: r.f64()? }))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(LatentArchive { model, rows })
    }
}

pub fn read_bytes(path: &Path, what: &str, hint: &'static str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(AppError::Missing { what: what.to_string(), path: path.to_path_buf(), hint })
        }
        Err(e) => Err(AppError::io(path, e)),
    }
}
