//! Procedural analytic scenes, camera rigs, posed datasets and the dense
//! quadrature oracle.

use std::path::Path;

use diffcore::{Array, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::fields::{FieldOutput, QueryBatch, RadianceField};
use crate::params::hex_digest;
use crate::render::{
    composite_ray, generate_rays, normalize, render_image, sample_along_ray, Aabb, Camera, Ray,
    RenderedImage, SamplingConfig, Vec3,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Peak density inside the primitive.
    pub density: f64,
    /// Width of the smoothstep shell straddling the surface.
    pub falloff: f64,
    pub albedo: Vec3,
    /// Blend weight toward a view-dependent shade, in `[0, 1]`.
    #[serde(default)]
    pub tint: f64,
}

/// `1` inside by more than `w/2`, `0` outside by more than `w/2`, smoothstep
/// in between, `1/2` on the surface.
pub fn smoothstep_falloff(signed_distance: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return if signed_distance <= 0.0 { 1.0 } else { 0.0 };
    }
    let t = ((signed_distance + 0.5 * width) / width).clamp(0.0, 1.0);
    1.0 - t * t * (3.0 - 2.0 * t)
}

impl Primitive {
    pub fn signed_distance(&self, x: Vec3) -> f64 {
        let p = [
            x[0] - self.center[0],
            x[1] - self.center[1],
            x[2] - self.center[2],
        ];
        match self.shape {
            Shape::Sphere { radius } => (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius,
            Shape::Box { half_extents } => {
                let q: Vec<f64> = (0..3).map(|i| p[i].abs() - half_extents[i]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
        }
    }

    pub fn density_at(&self, x: Vec3) -> f64 {
        self.density * smoothstep_falloff(self.signed_distance(x), self.falloff)
    }

    pub fn color_toward(&self, d: Vec3) -> Vec3 {
        let shade = 0.5 + 0.5 * d[2];
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (1.0 - self.tint) * self.albedo[k] + self.tint * shade;
        }
        c
    }

    /// Axis-aligned box of the primitive's surface.
    pub fn occupancy_box(&self) -> Aabb {
        let h = match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
        };
        Aabb {
            min: [
                self.center[0] - h[0],
                self.center[1] - h[1],
                self.center[2] - h[2],
            ],
            max: [
                self.center[0] + h[0],
                self.center[1] + h[1],
                self.center[2] + h[2],
            ],
        }
    }

    /// Largest slope of the primitive's density along any direction.
    pub fn lipschitz(&self) -> f64 {
        if self.falloff > 0.0 {
            1.5 * self.density / self.falloff
        } else {
            f64::INFINITY
        }
    }

    fn validate(&self) -> Result<()> {
        let size_ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
        };
        let color_ok = self.albedo.iter().all(|c| (0.0..=1.0).contains(c));
        if !size_ok || !(self.density >= 0.0) || !(self.falloff >= 0.0) || !color_ok {
            return invalid(format!("invalid primitive {self:?}"));
        }
        if !(0.0..=1.0).contains(&self.tint) {
            return invalid("tint must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Closed-form radiance field made of soft primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub label: usize,
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.bounds.validate()?;
        if self.label >= num_classes {
            return invalid(format!(
                "label {} outside {num_classes} classes",
                self.label
            ));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn density(&self, x: Vec3) -> f64 {
        if !self.bounds.contains(x) {
            return 0.0;
        }
        self.primitives.iter().map(|p| p.density_at(x)).sum()
    }

    /// Density-weighted blend of primitive colors; the unweighted mean where
    /// nothing is present, black for an empty scene.
    pub fn color(&self, x: Vec3, d: Vec3) -> Vec3 {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for p in &self.primitives {
            let w = p.density_at(x);
            let c = p.color_toward(d);
            for k in 0..3 {
                acc[k] += w * c[k];
            }
            total += w;
        }
        if total > 0.0 {
            return acc.map(|a| (a / total).clamp(0.0, 1.0));
        }
        if self.primitives.is_empty() {
            return [0.0; 3];
        }
        let n = self.primitives.len() as f64;
        let mut mean = [0.0; 3];
        for p in &self.primitives {
            let c = p.color_toward(d);
            for k in 0..3 {
                mean[k] += c[k] / n;
            }
        }
        mean
    }

    pub fn occupancy_boxes(&self) -> Vec<Aabb> {
        self.primitives
            .iter()
            .map(Primitive::occupancy_box)
            .collect()
    }

    /// Mean density over the bounds, integrated exactly for scenes made of
    /// non-overlapping spheres that lie inside the bounds; `None` otherwise.
    pub fn mean_density_closed_form(&self) -> Option<f64> {
        let mut total = 0.0;
        for p in &self.primitives {
            let Shape::Sphere { radius: r } = p.shape else {
                return None;
            };
            // ρ · 4π ∫ f(s − r) s² ds; the shell integrand is a quintic, so
            // five-point Gauss–Legendre is exact.
            let w = p.falloff;
            let inner = (r - 0.5 * w).max(0.0);
            let shell = integrate(|s| smoothstep_falloff(s - r, w) * s * s, inner, r + 0.5 * w);
            let vol = 4.0 * std::f64::consts::PI * (inner.powi(3) / 3.0 + shell);
            total += p.density * vol;
        }
        Some(total / self.bounds.volume())
    }
}

/// Gauss–Legendre quadrature of a polynomial integrand of degree ≤ 9.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [
        0.0,
        0.538_469_310_105_683_1,
        -0.538_469_310_105_683_1,
        0.906_179_845_938_664,
        -0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    X.iter().zip(W).map(|(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

impl RadianceField for AnalyticScene {
    fn evaluate(&self, tape: &mut Tape, batch: &mut QueryBatch) -> Result<FieldOutput> {
        let (pos, dir) = (tape.value(batch.positions), tape.value(batch.directions));
        let n = batch.len();
        let mut color = Vec::with_capacity(n * 3);
        let mut density = Vec::with_capacity(n);
        for (x, d) in pos.data().chunks_exact(3).zip(dir.data().chunks_exact(3)) {
            let (x, d) = ([x[0], x[1], x[2]], [d[0], d[1], d[2]]);
            density.push(self.density(x));
            color.extend_from_slice(&self.color(x, d));
        }
        Ok(FieldOutput {
            color: tape.constant(Array::new(vec![n, 3], color)?),
            density: tape.constant(Array::new(vec![n, 1], density)?),
        })
    }

    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_vec(self).expect("scene serializes");
        hex_digest(&Sha256::digest(&text))
    }
}

/// Dense midpoint quadrature of the rendering integral on the analytic field.
pub fn oracle_render(scene: &AnalyticScene, ray: &Ray, samples: usize) -> Result<Vec3> {
    if samples < 1024 {
        return invalid("the quadrature oracle needs at least 1024 samples");
    }
    let Some(r) = ray.clipped(&scene.bounds) else {
        return Ok([0.0; 3]);
    };
    let (t, dt) = sample_along_ray(r.t_near, r.t_far, samples, None)?;
    let mut colors = Vec::with_capacity(samples);
    let mut dens = Vec::with_capacity(samples);
    for ti in t {
        let x = r.at(ti);
        dens.push(scene.density(x));
        colors.push(scene.color(x, r.direction));
    }
    composite_ray(&colors, &dens, &dt)
}

pub fn oracle_image(
    scene: &AnalyticScene,
    camera: &Camera,
    samples: usize,
) -> Result<RenderedImage> {
    let mut data = Vec::with_capacity(camera.width * camera.height * 3);
    for ray in generate_rays(camera)? {
        data.extend_from_slice(&oracle_render(scene, &ray, samples)?);
    }
    RenderedImage::new(camera.width, camera.height, data)
}

/// Cameras on a sphere around a look-at point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub n_views: usize,
    pub radius: f64,
    /// Elevation range in degrees.
    pub elevation: [f64; 2],
    pub look_at: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Fraction of views held out for testing.
    pub test_fraction: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            n_views: 24,
            radius: 4.0,
            elevation: [-10.0, 40.0],
            look_at: [0.0; 3],
            fov_deg: 40.0,
            width: 64,
            height: 64,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || !(self.radius > 0.0) || self.width == 0 || self.height == 0 {
            return invalid("camera rig needs views, a positive radius and pixels");
        }
        if !(self.elevation[0] <= self.elevation[1])
            || self.elevation.iter().any(|e| e.abs() >= 89.0)
        {
            return invalid("elevation range must be ordered and within ±89°");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return invalid("test fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Evenly spaced azimuths with a random phase; random elevations.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (0..self.n_views)
            .map(|i| {
                let az = phase + std::f64::consts::TAU * i as f64 / self.n_views as f64;
                let el = rng
                    .random_range(self.elevation[0]..=self.elevation[1])
                    .to_radians();
                let eye = [
                    self.look_at[0] + self.radius * el.cos() * az.sin(),
                    self.look_at[1] + self.radius * el.sin(),
                    self.look_at[2] + self.radius * el.cos() * az.cos(),
                ];
                Camera::look_at(
                    eye,
                    self.look_at,
                    [0.0, 1.0, 0.0],
                    self.fov_deg,
                    self.width,
                    self.height,
                    i,
                )
            })
            .collect()
    }

    /// Disjoint `(train, test)` camera indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n_test = (self.n_views as f64 * self.test_fraction).round() as usize;
        let mut idx: Vec<usize> = (0..self.n_views).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (train, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: RenderedImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub label: usize,
    pub views: Vec<View>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ground-truth source for dataset images.
pub enum Renderer<'a> {
    Oracle {
        samples: usize,
    },
    Field {
        field: &'a dyn RadianceField,
        sampling: SamplingConfig,
    },
}

pub fn generate_dataset(
    scene: &AnalyticScene,
    rig: &CameraRig,
    renderer: &Renderer<'_>,
) -> Result<Dataset> {
    let cameras = rig.cameras()?;
    let (train, test) = rig.split();
    let views = cameras
        .into_iter()
        .map(|camera| {
            let image = match renderer {
                Renderer::Oracle { samples } => oracle_image(scene, &camera, *samples)?,
                Renderer::Field { field, sampling } => {
                    render_image(*field, None, &camera, &scene.bounds, sampling)?
                }
            };
            Ok(View { camera, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        label: scene.label,
        views,
        train,
        test,
    })
}

impl Dataset {
    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.train.iter().map(|&i| &self.views[i])
    }

    pub fn test_views(&self) -> impl Iterator<Item = &View> {
        self.test.iter().map(|&i| &self.views[i])
    }

    /// Writes `view_XX.ppm` images plus `poses.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, v) in self.views.iter().enumerate() {
            v.image.write_ppm(dir.join(format!("view_{i:03}.ppm")))?;
        }
        let poses = PosesFile {
            label: self.label,
            train: self.train.clone(),
            test: self.test.clone(),
            cameras: self.views.iter().map(|v| v.camera.clone()).collect(),
        };
        let path = dir.join("poses.json");
        let text = serde_json::to_string_pretty(&poses).expect("poses serialize");
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("poses.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let poses: PosesFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let views = poses
            .cameras
            .into_iter()
            .enumerate()
            .map(|(i, camera)| {
                let image = RenderedImage::read_ppm(dir.join(format!("view_{i:03}.ppm")))?;
                Ok(View { camera, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: poses.label,
            views,
            train: poses.train,
            test: poses.test,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    label: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    cameras: Vec<Camera>,
}

const PALETTE: [Vec3; 6] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.75, 0.25],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.15],
    [0.75, 0.2, 0.8],
    [0.15, 0.8, 0.85],
];

fn jitter(rng: &mut ChaCha8Rng, v: Vec3, amount: f64) -> Vec3 {
    v.map(|c| c + rng.random_range(-amount..=amount))
}

/// One scene per class with layouts and palettes that differ by class.
pub fn scene_bank(num_classes: usize, seed: u64) -> Result<Vec<AnalyticScene>> {
    if num_classes < 2 {
        return invalid("a scene bank needs at least two classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Aabb::cube(1.0);
    let scenes = (0..num_classes)
        .map(|label| {
            let albedo = PALETTE[label % PALETTE.len()];
            let second = PALETTE[(label + 3) % PALETTE.len()];
            let soft = |shape, center, albedo, tint| Primitive {
                shape,
                center,
                density: 30.0,
                falloff: 0.1,
                albedo,
                tint,
            };
            let primitives = match label % 4 {
                0 => vec![soft(
                    Shape::Sphere {
                        radius: rng.random_range(0.5..0.6),
                    },
                    jitter(&mut rng, [0.0; 3], 0.05),
                    albedo,
                    0.2,
                )],
                1 => vec![soft(
                    Shape::Box {
                        half_extents: jitter(&mut rng, [0.45, 0.45, 0.45], 0.05),
                    },
                    jitter(&mut rng, [0.0; 3], 0.05),
                    albedo,
                    0.1,
                )],
                2 => vec![
                    soft(
                        Shape::Sphere { radius: 0.35 },
                        jitter(&mut rng, [-0.4, 0.0, 0.0], 0.05),
                        albedo,
                        0.2,
                    ),
                    soft(
                        Shape::Sphere { radius: 0.35 },
                        jitter(&mut rng, [0.4, 0.0, 0.0], 0.05),
                        second,
                        0.2,
                    ),
                ],
                _ => vec![
                    soft(
                        Shape::Box {
                            half_extents: [0.6, 0.15, 0.6],
                        },
                        jitter(&mut rng, [0.0, -0.4, 0.0], 0.05),
                        albedo,
                        0.0,
                    ),
                    soft(
                        Shape::Sphere { radius: 0.3 },
                        jitter(&mut rng, [0.0, 0.25, 0.0], 0.05),
                        second,
                        0.3,
                    ),
                ],
            };
            let scene = AnalyticScene {
                name: format!("class_{label}"),
                label,
                bounds,
                primitives,
            };
            scene.validate(num_classes)?;
            Ok(scene)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scenes)
}

/// Random scenes of one or two boxes, used as occupancy training data.
pub fn box_scenes(count: usize, seed: u64) -> Result<Vec<AnalyticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Aabb::cube(1.0);
    (0..count)
        .map(|i| {
            let n = rng.random_range(1..=2);
            let primitives = (0..n)
                .map(|_| {
                    let half: Vec3 = [0.0; 3].map(|_| rng.random_range(0.15..0.4));
                    let center: Vec3 = half.map(|h| rng.random_range(-(0.95 - h)..(0.95 - h)));
                    Primitive {
                        shape: Shape::Box { half_extents: half },
                        center,
                        density: 30.0,
                        falloff: 0.1,
                        albedo: PALETTE[rng.random_range(0..PALETTE.len())],
                        tint: rng.random_range(0.0..0.3),
                    }
                })
                .collect();
            let scene = AnalyticScene {
                name: format!("boxes_{i}"),
                label: 0,
                bounds,
                primitives,
            };
            scene.validate(1)?;
            Ok(scene)
        })
        .collect()
}

pub fn save_bank(scenes: &[AnalyticScene], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(scenes).expect("scenes serialize");
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_bank(path: &Path) -> Result<Vec<AnalyticScene>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let scenes: Vec<AnalyticScene> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for s in &scenes {
        s.validate(scenes.len())?;
    }
    Ok(scenes)
}

/// Unit-length direction from `a` toward `b`.
pub fn direction(a: Vec3, b: Vec3) -> Vec3 {
    normalize([b[0] - a[0], b[1] - a[1], b[2] - a[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(rho: f64, r: f64, w: f64) -> AnalyticScene {
        AnalyticScene {
            name: "s".into(),
            label: 0,
            bounds: Aabb::cube(1.0),
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius: r },
                center: [0.0; 3],
                density: rho,
                falloff: w,
                albedo: [0.9, 0.4, 0.1],
                tint: 0.0,
            }],
        }
    }

    #[test]
    fn density_examples() {
        let s = sphere(7.0, 0.5, 0.2);
        assert_eq!(s.density([0.0; 3]), 7.0);
        assert_eq!(s.density([0.9, 0.0, 0.0]), 0.0);
        assert_eq!(s.density([0.5, 0.0, 0.0]), 3.5);
        assert_eq!(s.density([5.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn box_signed_distance() {
        let p = Primitive {
            shape: Shape::Box {
                half_extents: [1.0, 2.0, 3.0],
            },
            center: [0.0; 3],
            density: 1.0,
            falloff: 0.0,
            albedo: [0.0; 3],
            tint: 0.0,
        };
        assert_eq!(p.signed_distance([0.0; 3]), -1.0);
        assert_eq!(p.signed_distance([4.0, 0.0, 0.0]), 3.0);
        assert!((p.signed_distance([4.0, 6.0, 0.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let empty = AnalyticScene {
            primitives: vec![],
            ..sphere(1.0, 0.5, 0.1)
        };
        let ray = Ray {
            origin: [0.0, 0.0, 4.0],
            direction: [0.0, 0.0, -1.0],
            t_near: 0.0,
            t_far: f64::INFINITY,
        };
        assert_eq!(oracle_render(&empty, &ray, 1024).unwrap(), [0.0; 3]);
        let s = sphere(200.0, 0.5, 0.05);
        let miss = Ray {
            origin: [0.0, 0.9, 4.0],
            ..ray
        };
        assert_eq!(oracle_render(&s, &miss, 1024).unwrap(), [0.0; 3]);
        let a = oracle_render(&s, &ray, 2048).unwrap();
        let b = oracle_render(&s, &ray, 4096).unwrap();
        for k in 0..3 {
            assert!((a[k] - s.primitives[0].albedo[k]).abs() < 1e-3, "{a:?}");
            assert!((a[k] - b[k]).abs() < 1e-3);
        }
        assert!(oracle_render(&s, &ray, 512).is_err());
    }

    #[test]
    fn rig_and_split() {
        let rig = CameraRig {
            n_views: 10,
            ..CameraRig::default()
        };
        let (train, test) = rig.split();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.iter().all(|i| !test.contains(i)));
        for cam in rig.cameras().unwrap() {
            let d = cam.pixel_direction(31, 31);
            let center = cam.pixel_direction(32, 32);
            let want = direction(cam.origin(), rig.look_at);
            // the look-at ray sits on the corner shared by the four center pixels
            let mid = normalize([
                0.5 * (d[0] + center[0]),
                0.5 * (d[1] + center[1]),
                0.5 * (d[2] + center[2]),
            ]);
            assert!(crate::render::norm(crate::render::sub(mid, want)) < 1e-3);
            cam.validate().unwrap();
        }
    }

    #[test]
    fn bank_is_labelled_and_reproducible() {
        let bank = scene_bank(4, 7).unwrap();
        assert_eq!(
            bank.iter().map(|s| s.label).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(bank, scene_bank(4, 7).unwrap());
        assert!(scene_bank(1, 7).is_err());
        let json = serde_json::to_string(&bank).unwrap();
        let back: Vec<AnalyticScene> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn closed_form_mean_density_of_hard_sphere() {
        let s = sphere(2.0, 0.5, 0.0);
        let want = 2.0 * 4.0 / 3.0 * std::f64::consts::PI * 0.125 / 8.0;
        assert!((s.mean_density_closed_form().unwrap() - want).abs() < 1e-12);
    }
}
