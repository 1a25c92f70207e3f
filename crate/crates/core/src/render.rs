//! Pinhole rays, sampling along rays, alpha compositing, voxel-grid
//! extraction and the scene-wide mean density.

use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use diffcore::{Array, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::fields::{FieldOutput, QueryBatch, RadianceField};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.min[i] < self.max[i]) || !self.max[i].is_finite()) {
            return Err(Error::DegenerateScene(format!(
                "bounds {:?}..{:?} have an empty axis",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| self.max[i] - self.min[i]).product()
    }

    /// Slab test; returns the parametric overlap `[t0, t1]` with `t0 ≥ 0`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 < t1).then_some((t0, t1))
    }

    /// Cell centers of an `n[0] × n[1] × n[2]` grid, `x` slowest.
    pub fn cell_centers(&self, n: [usize; 3]) -> Vec<Vec3> {
        let step: Vec<f64> = (0..3)
            .map(|i| (self.max[i] - self.min[i]) / n[i] as f64)
            .collect();
        let mut out = Vec::with_capacity(n[0] * n[1] * n[2]);
        for ix in 0..n[0] {
            for iy in 0..n[1] {
                for iz in 0..n[2] {
                    out.push([
                        self.min[0] + (ix as f64 + 0.5) * step[0],
                        self.min[1] + (iy as f64 + 0.5) * step[1],
                        self.min[2] + (iz as f64 + 0.5) * step[2],
                    ]);
                }
            }
        }
        out
    }
}

/// Pinhole camera. The camera looks down its local −z axis with +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world transform, row-major.
    pub pose: [[f64; 4]; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub id: usize,
}

impl Camera {
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: usize,
        height: usize,
        id: usize,
    ) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = cross(up, back);
        if !(norm(right) > 1e-9) {
            return invalid("look_at: up vector parallel to the view direction");
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        pose[3][3] = 1.0;
        let focal = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        let cam = Self {
            pose,
            focal,
            width,
            height,
            id,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn origin(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    fn column(&self, c: usize) -> Vec3 {
        [self.pose[0][c], self.pose[1][c], self.pose[2][c]]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return invalid(format!("focal length {} must be positive", self.focal));
        }
        if self.width == 0 || self.height == 0 {
            return invalid("camera has no pixels");
        }
        for a in 0..3 {
            for b in 0..3 {
                let d = dot(self.column(a), self.column(b));
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return invalid("camera rotation is not orthonormal");
                }
            }
        }
        Ok(())
    }

    /// World-space unit direction through the center of pixel `(col, row)`.
    pub fn pixel_direction(&self, col: usize, row: usize) -> Vec3 {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let (r, u, b) = (self.column(0), self.column(1), self.column(2));
        normalize([
            r[0] * x + u[0] * y - b[0],
            r[1] * x + u[1] * y - b[1],
            r[2] * x + u[2] * y - b[2],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// Restricts `[t_near, t_far]` to the box; `None` when the ray misses it.
    pub fn clipped(&self, bounds: &Aabb) -> Option<Ray> {
        let (a, b) = bounds.intersect(self.origin, self.direction)?;
        let (t_near, t_far) = (a.max(self.t_near), b.min(self.t_far));
        (t_near < t_far).then_some(Ray {
            t_near,
            t_far,
            ..*self
        })
    }
}

/// One ray per pixel, row-major, with `t ∈ [0, ∞)`.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let origin = camera.origin();
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(Ray {
                origin,
                direction: camera.pixel_direction(col, row),
                t_near: 0.0,
                t_far: f64::INFINITY,
            });
        }
    }
    Ok(rays)
}

/// Sample depths and spacings along `[t_near, t_far]`.
///
/// Without an rng, samples sit at the midpoints of `n` equal bins; with one,
/// each bin gets a single uniform draw. The last spacing runs to `t_far`.
pub fn sample_along_ray(
    t_near: f64,
    t_far: f64,
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return invalid("at least one sample per ray is required");
    }
    if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
        return invalid(format!("ray interval [{t_near}, {t_far}] is invalid"));
    }
    let width = (t_far - t_near) / n as f64;
    let t: Vec<f64> = match rng {
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n)
            .map(|i| t_near + (i as f64 + rng.random::<f64>()) * width)
            .collect(),
    };
    let mut dt: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    dt.push(t_far - t[n - 1]);
    Ok((t, dt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub samples: usize,
    pub stratified: bool,
    /// Seed of the per-ray stratification streams.
    pub seed: u64,
    /// Composite the residual transmittance over white instead of black.
    pub white_background: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            stratified: false,
            seed: 0,
            white_background: false,
        }
    }
}

impl SamplingConfig {
    pub fn deterministic(samples: usize) -> Self {
        Self {
            samples,
            ..Self::default()
        }
    }

    fn background(&self) -> f64 {
        if self.white_background {
            1.0
        } else {
            0.0
        }
    }
}

/// The rays of a batch that hit the scene bounds, with their samples.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
    /// Output slot of every hit ray.
    pub slots: Vec<usize>,
    /// Total output slots, hit or not.
    pub total: usize,
    pub samples: usize,
    /// `[R·N, 3]` sample positions, ray-major.
    pub positions: Array,
    /// `[R·N, 3]` ray directions repeated per sample.
    pub directions: Array,
    /// `[R, N]` depths.
    pub depths: Array,
    /// `[R, N]` spacings.
    pub spacings: Array,
}

impl RayBundle {
    /// Clips `rays` to `bounds` and samples each survivor. Ray `i` draws its
    /// stratification from stream `i` of `cfg.seed`, so results do not depend
    /// on how a caller chunks the batch as long as indices are preserved.
    pub fn new(rays: &[Ray], bounds: &Aabb, cfg: &SamplingConfig) -> Result<Self> {
        let indexed: Vec<(usize, Ray)> = rays.iter().copied().enumerate().collect();
        Self::from_indexed(&indexed, rays.len(), bounds, cfg)
    }

    pub(crate) fn from_indexed(
        rays: &[(usize, Ray)],
        total: usize,
        bounds: &Aabb,
        cfg: &SamplingConfig,
    ) -> Result<Self> {
        bounds.validate()?;
        let n = cfg.samples;
        if n == 0 {
            return invalid("at least one sample per ray is required");
        }
        let mut kept = Vec::new();
        let mut slots = Vec::new();
        let (mut pos, mut dirs, mut depths, mut spacings) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (slot, (index, ray)) in rays.iter().enumerate() {
            if (norm(ray.direction) - 1.0).abs() > 1e-6 {
                return invalid("ray direction is not unit length");
            }
            let Some(r) = ray.clipped(bounds) else {
                continue;
            };
            let mut rng = cfg.stratified.then(|| {
                let mut g = ChaCha8Rng::seed_from_u64(cfg.seed);
                g.set_stream(*index as u64);
                g
            });
            let (t, dt) = sample_along_ray(r.t_near, r.t_far, n, rng.as_mut())?;
            for &ti in &t {
                pos.extend_from_slice(&r.at(ti));
                dirs.extend_from_slice(&r.direction);
            }
            depths.extend(t);
            spacings.extend(dt);
            kept.push(r);
            slots.push(slot);
        }
        let r = kept.len();
        Ok(Self {
            rays: kept,
            slots,
            total,
            samples: n,
            positions: Array::new(vec![r * n, 3], pos)?,
            directions: Array::new(vec![r * n, 3], dirs)?,
            depths: Array::new(vec![r, n], depths)?,
            spacings: Array::new(vec![r, n], spacings)?,
        })
    }

    pub fn hit_count(&self) -> usize {
        self.rays.len()
    }
}

/// Differentiable compositing result for `R` rays.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[R, 3]`
    pub rgb: Var,
    /// `[R, N]` compositing weights `T_i (1 − exp(−σ_i Δt_i))`.
    pub weights: Var,
    /// `[R, N]` transmittance before each sample.
    pub transmittance: Var,
}

/// `I = Σ_i T_i (1 − exp(−σ_i Δt_i)) c_i` with `T_i = exp(−Σ_{j<i} σ_j Δt_j)`.
///
/// `color: [R·N, 3]`, `density: [R·N, 1]`, `spacings: [R, N]`.
pub fn composite(tape: &mut Tape, color: Var, density: Var, spacings: &Array) -> Result<Composite> {
    let (r, n) = match spacings.shape() {
        [r, n] => (*r, *n),
        s => return invalid(format!("spacings must be [R, N], got {s:?}")),
    };
    if tape.shape(density) != [r * n, 1] || tape.shape(color) != [r * n, 3] {
        return invalid(format!(
            "composite: color {:?} / density {:?} do not match {r} rays × {n} samples",
            tape.shape(color),
            tape.shape(density)
        ));
    }
    if let Some(bad) = tape.value(density).data().iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!(
            "density {bad} reached the renderer"
        )));
    }
    if let Some(bad) = tape.value(density).data().iter().find(|s| **s < 0.0) {
        return invalid(format!("negative density {bad} reached the renderer"));
    }
    if spacings.data().iter().any(|d| !(*d > 0.0)) {
        return invalid("sample spacings must be positive");
    }
    let sigma = tape.reshape(density, &[r, n])?;
    let dt = tape.constant(spacings.clone());
    let tau = tape.mul(sigma, dt)?;
    let neg = tape.neg(tau);
    let e = tape.exp(neg);
    let alpha = tape.neg(e);
    let alpha = tape.add_scalar(alpha, 1.0);
    let acc = tape.cumsum_exclusive(tau)?;
    let acc = tape.neg(acc);
    let trans = tape.exp(acc);
    let weights = tape.mul(trans, alpha)?;
    let w3 = tape.reshape(weights, &[r, n, 1])?;
    let w3 = tape.expand_last(w3, 3)?;
    let c3 = tape.reshape(color, &[r, n, 3])?;
    let contrib = tape.mul(w3, c3)?;
    let rgb = tape.sum_axis(contrib, 1)?;
    Ok(Composite {
        rgb,
        weights,
        transmittance: trans,
    })
}

/// Plain-value version of [`composite`] for one ray.
pub fn composite_ray(colors: &[Vec3], densities: &[f64], spacings: &[f64]) -> Result<Vec3> {
    if colors.len() != densities.len() || densities.len() != spacings.len() {
        return invalid("composite_ray: length mismatch");
    }
    let mut out = [0.0; 3];
    let mut acc = 0.0f64;
    for ((c, &s), &dt) in colors.iter().zip(densities).zip(spacings) {
        if !(s >= 0.0) {
            return invalid(format!("negative density {s}"));
        }
        let w = (-acc).exp() * (1.0 - (-s * dt).exp());
        for k in 0..3 {
            out[k] += w * c[k];
        }
        acc += s * dt;
    }
    Ok(out)
}

/// Anything that rewrites base field outputs before compositing.
pub trait Perturber {
    fn perturb(
        &self,
        tape: &mut Tape,
        batch: &mut QueryBatch,
        base: FieldOutput,
        camera: Option<usize>,
    ) -> Result<FieldOutput>;
}

/// Per-point base outputs, either evaluated now or supplied from a cache.
pub enum BaseSource<'a> {
    Field(&'a dyn RadianceField),
    /// `(color [P, 3], density [P, 1])` already evaluated at the bundle's points.
    Cached(&'a Array, &'a Array),
}

/// Differentiable render of a bundle into `[total, 3]` output rows; rays that
/// miss the bounds take the background color.
pub fn render_bundle(
    tape: &mut Tape,
    base: BaseSource<'_>,
    perturber: Option<&dyn Perturber>,
    bundle: &RayBundle,
    camera: Option<usize>,
    cfg: &SamplingConfig,
) -> Result<Var> {
    let bg = cfg.background();
    if bundle.hit_count() == 0 {
        return Ok(tape.constant(Array::full(&[bundle.total, 3], bg)));
    }
    let mut batch =
        QueryBatch::from_arrays(tape, bundle.positions.clone(), bundle.directions.clone())?;
    let out = match base {
        BaseSource::Field(f) => f.evaluate(tape, &mut batch)?,
        BaseSource::Cached(c, d) => FieldOutput {
            color: tape.constant(c.clone()),
            density: tape.constant(d.clone()),
        },
    };
    let out = match perturber {
        Some(p) => p.perturb(tape, &mut batch, out, camera)?,
        None => out,
    };
    let comp = composite(tape, out.color, out.density, &bundle.spacings)?;
    let mut rgb = comp.rgb;
    if bg != 0.0 {
        let n = bundle.samples;
        let last = tape.slice_last(comp.transmittance, n - 1, n)?;
        let last_w = tape.slice_last(comp.weights, n - 1, n)?;
        let residual = tape.sub(last, last_w)?;
        let residual = tape.scale(residual, bg);
        let residual = tape.expand_last(residual, 3)?;
        rgb = tape.add(rgb, residual)?;
    }
    if bundle.hit_count() == bundle.total {
        return Ok(rgb);
    }
    let miss = bundle.total - bundle.hit_count();
    let fill = tape.constant(Array::full(&[1, 3], bg));
    let rows = tape.concat_rows(&[rgb, fill])?;
    let hit = bundle.hit_count();
    let mut source = vec![hit; bundle.total];
    for (k, &slot) in bundle.slots.iter().enumerate() {
        source[slot] = k;
    }
    let index: Vec<usize> = source
        .iter()
        .flat_map(|&s| (0..3).map(move |c| s * 3 + c))
        .collect();
    debug_assert_eq!(index.len(), (hit + miss) * 3);
    Ok(tape.gather(rows, Rc::from(index), &[bundle.total, 3])?)
}

/// RGB image with channels in `[0, 1]`, row-major, 3 values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RenderedImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return invalid(format!(
                "{} values cannot fill a {width}×{height} RGB image",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height * 3],
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> Vec3 {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![self.height, self.width, 3], self.data.clone()).expect("sized")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let fail = || Error::Format("malformed PPM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fail());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail())?);
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| fail());
        if fields[0] != "P6" || num(fields[3])? != 255 {
            return Err(fail());
        }
        let (w, h) = (num(fields[1])?, num(fields[2])?);
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(fail)?;
        Self::new(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(io_err(path))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_ppm(&std::fs::read(path).map_err(io_err(path))?)
    }
}

/// Rays per tape when rendering whole images without gradients.
const RENDER_CHUNK: usize = 512;

/// Renders every pixel of `camera`, optionally through a perturber.
pub fn render_image(
    field: &dyn RadianceField,
    perturber: Option<&dyn Perturber>,
    camera: &Camera,
    bounds: &Aabb,
    cfg: &SamplingConfig,
) -> Result<RenderedImage> {
    let rays = generate_rays(camera)?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    let indexed: Vec<(usize, Ray)> = rays.into_iter().enumerate().collect();
    for chunk in indexed.chunks(RENDER_CHUNK) {
        let bundle = RayBundle::from_indexed(chunk, chunk.len(), bounds, cfg)?;
        let mut tape = Tape::new();
        let rgb = render_bundle(
            &mut tape,
            BaseSource::Field(field),
            perturber,
            &bundle,
            Some(camera.id),
            cfg,
        )?;
        data.extend_from_slice(tape.value(rgb).data());
    }
    RenderedImage::new(camera.width, camera.height, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewDirPolicy {
    /// Every cell is queried looking down `(0, 0, −1)`.
    Canonical,
    /// Color is averaged over the six axis directions.
    AxisMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    /// Sub-samples per axis inside each cell; 1 means the cell center only.
    pub subsamples: usize,
    pub view_dir: ViewDirPolicy,
}

impl VoxelSpec {
    pub fn new(bounds: Aabb, resolution: usize) -> Self {
        Self {
            bounds,
            resolution: [resolution; 3],
            subsamples: 1,
            view_dir: ViewDirPolicy::Canonical,
        }
    }

    pub fn cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.resolution.contains(&0) || self.subsamples == 0 {
            return invalid("voxel resolution and sub-sample count must be positive");
        }
        Ok(())
    }

    fn directions(&self) -> Vec<Vec3> {
        match self.view_dir {
            ViewDirPolicy::Canonical => vec![[0.0, 0.0, -1.0]],
            ViewDirPolicy::AxisMean => vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ],
        }
    }

    /// Query points ordered cell-major, then sub-sample, then direction.
    fn query_points(&self) -> (Array, Array, usize) {
        let k = self.subsamples;
        let dirs = self.directions();
        let step: Vec<f64> = (0..3)
            .map(|i| (self.bounds.max[i] - self.bounds.min[i]) / self.resolution[i] as f64)
            .collect();
        let per_cell = k * k * k * dirs.len();
        let mut pos = Vec::with_capacity(self.cells() * per_cell * 3);
        let mut dir = Vec::with_capacity(pos.capacity());
        let n = self.resolution;
        for ix in 0..n[0] {
            for iy in 0..n[1] {
                for iz in 0..n[2] {
                    for sx in 0..k {
                        for sy in 0..k {
                            for sz in 0..k {
                                let p = [
                                    self.bounds.min[0]
                                        + (ix as f64 + (sx as f64 + 0.5) / k as f64) * step[0],
                                    self.bounds.min[1]
                                        + (iy as f64 + (sy as f64 + 0.5) / k as f64) * step[1],
                                    self.bounds.min[2]
                                        + (iz as f64 + (sz as f64 + 0.5) / k as f64) * step[2],
                                ];
                                for d in &dirs {
                                    pos.extend_from_slice(&p);
                                    dir.extend_from_slice(d);
                                }
                            }
                        }
                    }
                }
            }
        }
        let total = self.cells() * per_cell;
        (
            Array::new(vec![total, 3], pos).expect("sized"),
            Array::new(vec![total, 3], dir).expect("sized"),
            per_cell,
        )
    }
}

/// Differentiable voxel features: `color: [C, 3]`, `density: [C, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct VoxelVars {
    pub color: Var,
    pub density: Var,
}

impl VoxelVars {
    /// `[C, 4]` rows of `(r, g, b, σ)`.
    pub fn features(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.concat(&[self.color, self.density])?)
    }
}

/// Evaluates base outputs at the voxel query points (for caching).
pub fn voxel_base_outputs(field: &dyn RadianceField, spec: &VoxelSpec) -> Result<(Array, Array)> {
    spec.validate()?;
    let (pos, dir, _) = spec.query_points();
    let mut tape = Tape::new();
    let mut batch = QueryBatch::from_arrays(&mut tape, pos, dir)?;
    let out = field.evaluate(&mut tape, &mut batch)?;
    Ok((
        tape.value(out.color).clone(),
        tape.value(out.density).clone(),
    ))
}

/// Per-cell mean of `(c, σ)` over the cell's sub-samples (and directions).
pub fn extract_voxel_vars(
    tape: &mut Tape,
    base: BaseSource<'_>,
    perturber: Option<&dyn Perturber>,
    spec: &VoxelSpec,
) -> Result<VoxelVars> {
    spec.validate()?;
    let (pos, dir, per_cell) = spec.query_points();
    let cells = spec.cells();
    let mut batch = QueryBatch::from_arrays(tape, pos, dir)?;
    let out = match base {
        BaseSource::Field(f) => f.evaluate(tape, &mut batch)?,
        BaseSource::Cached(c, d) => FieldOutput {
            color: tape.constant(c.clone()),
            density: tape.constant(d.clone()),
        },
    };
    let out = match perturber {
        Some(p) => p.perturb(tape, &mut batch, out, None)?,
        None => out,
    };
    if per_cell == 1 {
        return Ok(VoxelVars {
            color: out.color,
            density: out.density,
        });
    }
    let mean = |tape: &mut Tape, v: Var, width: usize| -> Result<Var> {
        let r = tape.reshape(v, &[cells, per_cell, width])?;
        let s = tape.sum_axis(r, 1)?;
        Ok(tape.scale(s, 1.0 / per_cell as f64))
    };
    Ok(VoxelVars {
        color: mean(tape, out.color, 3)?,
        density: mean(tape, out.density, 1)?,
    })
}

/// Regular grid of `(c, σ)` features, cells ordered with `x` slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureGrid {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    /// `[C, 4]` rows of `(r, g, b, σ)`.
    pub features: Array,
}

impl VoxelFeatureGrid {
    pub fn density(&self, cell: usize) -> f64 {
        self.features.data()[cell * 4 + 3]
    }

    pub fn color(&self, cell: usize) -> Vec3 {
        let d = &self.features.data()[cell * 4..cell * 4 + 3];
        [d[0], d[1], d[2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let b = &self.bounds;
        let [nx, ny, nz] = self.resolution;
        let mut out = format!(
            "radguard-voxels 1\nbounds {} {} {} {} {} {}\nresolution {nx} {ny} {nz}\nlayout r g b sigma\nend\n",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        )
        .into_bytes();
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(format!("voxel file: {m}"));
        let end = bytes
            .windows(4)
            .position(|w| w == b"end\n")
            .ok_or_else(|| fail("no header terminator"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fail("header not utf-8"))?;
        let mut bounds = None;
        let mut res = None;
        for line in header.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("bounds") => {
                    let v: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                    if v.len() != 6 {
                        return Err(fail("bad bounds"));
                    }
                    bounds = Some(Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])?);
                }
                Some("resolution") => {
                    let v: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
                    if v.len() != 3 {
                        return Err(fail("bad resolution"));
                    }
                    res = Some([v[0], v[1], v[2]]);
                }
                _ => {}
            }
        }
        let (bounds, resolution) = (
            bounds.ok_or_else(|| fail("missing bounds"))?,
            res.ok_or_else(|| fail("missing resolution"))?,
        );
        let payload = &bytes[end + 4..];
        let cells: usize = resolution.iter().product();
        if payload.len() != cells * 32 {
            return Err(fail("payload size does not match resolution"));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            bounds,
            resolution,
            features: Array::new(vec![cells, 4], data)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }
}

/// Plain voxel grid extraction.
pub fn extract_voxel_grid(
    field: &dyn RadianceField,
    perturber: Option<&dyn Perturber>,
    spec: &VoxelSpec,
) -> Result<VoxelFeatureGrid> {
    let mut tape = Tape::new();
    let v = extract_voxel_vars(&mut tape, BaseSource::Field(field), perturber, spec)?;
    let f = v.features(&mut tape)?;
    Ok(VoxelFeatureGrid {
        bounds: spec.bounds,
        resolution: spec.resolution,
        features: tape.value(f).clone(),
    })
}

/// Points per tape when sweeping a density grid.
const DENSITY_CHUNK: usize = 8192;

/// Arithmetic mean of `σ` at the cell centers of a uniform grid over `bounds`.
pub fn mean_density(field: &dyn RadianceField, bounds: &Aabb, resolution: usize) -> Result<f64> {
    bounds.validate()?;
    if resolution < 2 {
        return invalid("mean density needs at least 2 cells per axis");
    }
    let centers = bounds.cell_centers([resolution; 3]);
    let mut total = 0.0;
    for chunk in centers.chunks(DENSITY_CHUNK) {
        let pos: Vec<f64> = chunk.iter().flatten().copied().collect();
        let dir: Vec<f64> = chunk.iter().flat_map(|_| [0.0, 0.0, -1.0]).collect();
        let mut tape = Tape::new();
        let mut batch = QueryBatch::from_arrays(
            &mut tape,
            Array::new(vec![chunk.len(), 3], pos)?,
            Array::new(vec![chunk.len(), 3], dir)?,
        )?;
        let out = field.evaluate(&mut tape, &mut batch)?;
        total += tape.value(out.density).sum();
    }
    Ok(total / centers.len() as f64)
}

/// Uniform random rays drawn from a camera's pixels, for ray-batch losses.
pub fn sample_pixels(rng: &mut ChaCha8Rng, pixels: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..pixels)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera(w: usize, h: usize) -> Camera {
        let mut pose = [[0.0; 4]; 4];
        for i in 0..4 {
            pose[i][i] = 1.0;
        }
        Camera {
            pose,
            focal: 10.0,
            width: w,
            height: h,
            id: 0,
        }
    }

    #[test]
    fn pinhole_geometry() {
        let cam = identity_camera(5, 5);
        let rays = generate_rays(&cam).unwrap();
        let center = rays[2 * 5 + 2].direction;
        assert!(norm(sub(center, [0.0, 0.0, -1.0])) < 1e-12);
        for r in &rays {
            assert!((norm(r.direction) - 1.0).abs() < 1e-9);
            assert_eq!(r.origin, [0.0; 3]);
        }
        let mut bad = cam.clone();
        bad.focal = 0.0;
        assert!(generate_rays(&bad).is_err());
    }

    #[test]
    fn look_at_points_at_target() {
        let cam = Camera::look_at(
            [3.0, 1.0, 2.0],
            [0.1, 0.2, 0.3],
            [0.0, 1.0, 0.0],
            40.0,
            9,
            9,
            0,
        )
        .unwrap();
        let d = cam.pixel_direction(4, 4);
        let want = normalize(sub([0.1, 0.2, 0.3], [3.0, 1.0, 2.0]));
        assert!(norm(sub(d, want)) < 1e-12);
    }

    #[test]
    fn midpoint_and_stratified_samples() {
        let (t, dt) = sample_along_ray(0.0, 1.0, 4, None).unwrap();
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(dt, vec![0.25, 0.25, 0.25, 0.125]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, dt) = sample_along_ray(1.0, 3.0, 8, Some(&mut rng)).unwrap();
        for (i, ti) in t.iter().enumerate() {
            let lo = 1.0 + 0.25 * i as f64;
            assert!(*ti >= lo && *ti < lo + 0.25);
        }
        let total: f64 = dt.iter().sum();
        assert!((total - (3.0 - t[0])).abs() < 1e-12);
        assert!(sample_along_ray(0.0, 1.0, 0, None).is_err());
    }

    #[test]
    fn two_sample_composite_by_hand() {
        let w1 = 1.0 - (-0.5f64).exp();
        let w2 = (-0.5f64).exp() * (1.0 - (-1.0f64).exp());
        let got = composite_ray(
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &[1.0, 2.0],
            &[0.5, 0.5],
        )
        .unwrap();
        assert!((got[0] - w1).abs() < 1e-15 && (got[1] - w2).abs() < 1e-15 && got[2] == 0.0);

        let mut t = Tape::new();
        let c = t.constant(Array::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let s = t.constant(Array::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let dt = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let out = composite(&mut t, c, s, &dt).unwrap();
        let v = t.value(out.rgb).data();
        assert!((v[0] - w1).abs() < 1e-15 && (v[1] - w2).abs() < 1e-15 && v[2] == 0.0);
    }

    #[test]
    fn opaque_and_empty_composites() {
        let got = composite_ray(&[[1.0, 0.5, 0.0]], &[50.0], &[1.0]).unwrap();
        let e = (-50.0f64).exp();
        assert!((got[0] - 1.0).abs() <= e && (got[1] - 0.5).abs() <= e && got[2] == 0.0);
        let got = composite_ray(&[[0.3, 0.4, 0.5]; 3], &[0.0; 3], &[0.1; 3]).unwrap();
        assert_eq!(got, [0.0; 3]);
        assert!(composite_ray(&[[0.0; 3]], &[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn negative_density_rejected_on_tape() {
        let mut t = Tape::new();
        let c = t.constant(Array::full(&[1, 3], 0.5));
        let s = t.constant(Array::new(vec![1, 1], vec![-0.1]).unwrap());
        assert!(composite(&mut t, c, s, &Array::full(&[1, 1], 0.1)).is_err());
    }

    #[test]
    fn slab_intersection() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect([0.0, 0.0, 4.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((t0 - 3.0).abs() < 1e-12 && (t1 - 5.0).abs() < 1e-12);
        assert!(b.intersect([0.0, 3.0, 4.0], [0.0, 0.0, -1.0]).is_none());
        let (t0, _) = b.intersect([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t0, 0.0);
        assert!(Aabb::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let img = RenderedImage::new(2, 1, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let back = RenderedImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back.to_ppm(), img.to_ppm());
        assert_eq!(&img.to_ppm()[..11], b"P6\n2 1\n255\n");
        assert_eq!(img.to_ppm()[12], 128);
    }

    #[test]
    fn voxel_file_round_trip() {
        let g = VoxelFeatureGrid {
            bounds: Aabb::cube(1.0),
            resolution: [1, 2, 1],
            features: Array::new(vec![2, 4], vec![0.1, 0.2, 0.3, 4.0, 0.5, 0.6, 0.7, 0.0]).unwrap(),
        };
        assert_eq!(VoxelFeatureGrid::from_bytes(&g.to_bytes()).unwrap(), g);
    }
}
