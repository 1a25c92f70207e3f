//! Constrained perturbation of radiance-field outputs, the protection and
//! naturalness objectives, the protection training loop and the adversarial
//! fine-tuning baseline.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use diffcore::{Adam, AdamConfig, Array, Tape, Var};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{meta_field, Container};
use crate::downstream::{ClassifierModel, Modality, VoxelOccupancyModel};
use crate::error::{at_step, invalid, io_err, Error, Result};
use crate::fields::{
    FieldOutput, MlpConfig, PerturbationFieldConfig, PerturbationFieldModel, QueryBatch,
    RadianceField, RadianceFieldModel, RadianceSample, RawPerturbation, SensitivityFieldConfig,
    SensitivityFieldModel,
};
use crate::params::ParamStore;
use crate::render::{
    extract_voxel_vars, generate_rays, mean_density, render_bundle, voxel_base_outputs, Aabb,
    BaseSource, Camera, Perturber, RayBundle, RenderedImage, SamplingConfig, VoxelSpec,
};

fn bound(s: f64, sigma_bar: f64) -> Result<f64> {
    if !(sigma_bar > 0.0) {
        return Err(Error::DegenerateScene(format!(
            "mean density {sigma_bar} leaves no room for density perturbation"
        )));
    }
    if !(s > 0.0 && s < 1.0) {
        return invalid(format!("sensitivity {s} must lie strictly inside (0, 1)"));
    }
    Ok((1.0 - s) * sigma_bar)
}

/// `b · tanh(δ / b)` with `b = (1 − s) · σ̄`. Where `tanh` rounds to `±1`
/// the result is pulled one ulp inside `±b` so the bound stays strict.
pub fn soft_clamp(delta: f64, s: f64, sigma_bar: f64) -> Result<f64> {
    let b = bound(s, sigma_bar)?;
    let v = b * (delta / b).tanh();
    if v.abs() >= b {
        return Ok(b.next_down().copysign(v));
    }
    Ok(v)
}

/// `min(max(δ, −b), b)` with `b = (1 − s) · σ̄`.
pub fn hard_clip(delta: f64, s: f64, sigma_bar: f64) -> Result<f64> {
    let b = bound(s, sigma_bar)?;
    Ok(delta.clamp(-b, b))
}

/// `bound · tanh(δ / bound)` on the tape; `bound` must be positive.
pub fn soft_clamp_var(tape: &mut Tape, delta: Var, bound: Var) -> Result<Var> {
    let q = tape.div(delta, bound)?;
    let t = tape.tanh(q);
    Ok(tape.mul(bound, t)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    ColorOnly,
    DensityOnly,
    Both,
}

impl PerturbMode {
    fn color(self) -> bool {
        self != PerturbMode::DensityOnly
    }

    fn density(self) -> bool {
        self != PerturbMode::ColorOnly
    }
}

/// How the raw density perturbation is bounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Soft clamp with `s` from the Sensitivity Field.
    Sensitivity,
    /// Soft clamp with the fixed bound `ε`.
    FixedEps { eps: f64 },
    /// Hard clip to the sensitivity bound.
    HardClip,
    /// Soft clamp with `1 − s` in place of `s`.
    Complement,
    /// Soft clamp with `s ~ U(0, 1)` drawn per query point.
    Random { seed: u64 },
    /// No bound at all.
    None,
}

impl ConstraintMode {
    fn uses_sensitivity(self) -> bool {
        matches!(
            self,
            ConstraintMode::Sensitivity | ConstraintMode::HardClip | ConstraintMode::Complement
        )
    }

    fn uses_sigma_bar(self) -> bool {
        self.uses_sensitivity() || matches!(self, ConstraintMode::Random { .. })
    }

    pub fn validate(self) -> Result<()> {
        if let ConstraintMode::FixedEps { eps } = self {
            if !(eps > 0.0 && eps.is_finite()) {
                return invalid(format!("fixed bound ε = {eps} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            cosine: true,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            total_steps: self.steps,
            cosine: self.cosine,
            lr_min: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectConfig {
    pub lambda_pro: f64,
    pub lambda_nat: f64,
    pub perturb_mode: PerturbMode,
    pub constraint: ConstraintMode,
    pub constrain_color: bool,
    /// Color bound scale `κ_c` used when `constrain_color` is set.
    pub color_bound: f64,
    pub optimizer: OptimizerConfig,
    /// Cells per axis of the grid that defines `σ̄`.
    pub sigma_bar_resolution: usize,
    pub rays_per_step: usize,
    pub samples: usize,
    pub seed: u64,
    pub perturbation_mlp: MlpConfig,
    pub sensitivity_mlp: MlpConfig,
    pub embedding_dim: usize,
}

impl Default for ProtectConfig {
    fn default() -> Self {
        Self {
            lambda_pro: 3e-4,
            lambda_nat: 1.0,
            perturb_mode: PerturbMode::Both,
            constraint: ConstraintMode::Sensitivity,
            constrain_color: false,
            color_bound: 0.1,
            optimizer: OptimizerConfig::default(),
            sigma_bar_resolution: 32,
            rays_per_step: 1024,
            samples: 64,
            seed: 0,
            perturbation_mlp: MlpConfig::full(),
            sensitivity_mlp: MlpConfig::full(),
            embedding_dim: 16,
        }
    }
}

impl ProtectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pro >= 0.0 && self.lambda_nat >= 0.0) {
            return invalid("loss weights must be nonnegative");
        }
        if !(self.color_bound > 0.0) {
            return invalid("color bound scale must be positive");
        }
        if self.rays_per_step == 0 || self.samples == 0 || self.sigma_bar_resolution < 2 {
            return invalid("rays per step, samples and σ̄ resolution must be positive");
        }
        self.constraint.validate()?;
        self.perturbation_mlp.validate()?;
        self.sensitivity_mlp.validate()
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig::deterministic(self.samples)
    }
}

/// Base sample after perturbation, with every intermediate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbedSample {
    pub color: [f64; 3],
    pub density: f64,
    pub raw_color: [f64; 3],
    pub raw_density: f64,
    pub clamped_density: f64,
    pub sensitivity: f64,
}

/// Plain-value perturbation of one sample, given an already constrained
/// `δ̂^σ` and the sensitivity `s` used for the optional color bound.
pub fn apply_perturbation(
    sample: RadianceSample,
    delta_color: [f64; 3],
    delta_density: f64,
    mode: PerturbMode,
    constrain_color: bool,
    color_bound: f64,
    s: f64,
) -> PerturbedSample {
    let mut color = sample.color;
    if mode.color() {
        for k in 0..3 {
            let d = if constrain_color {
                let b = (1.0 - s) * color_bound;
                b * (delta_color[k] / b).tanh()
            } else {
                delta_color[k]
            };
            color[k] = (sample.color[k] + d).clamp(0.0, 1.0);
        }
    }
    let clamped = if mode.density() { delta_density } else { 0.0 };
    let density = if mode.density() {
        (sample.density + clamped).max(0.0)
    } else {
        sample.density
    };
    PerturbedSample {
        color,
        density,
        raw_color: delta_color,
        raw_density: delta_density,
        clamped_density: clamped,
        sensitivity: s,
    }
}

/// Deterministic `U(0, 1)` draw keyed by a seed and a query position.
pub fn hashed_uniform(seed: u64, x: &[f64]) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in x {
        h ^= v.to_bits();
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// The Perturbation and Sensitivity Fields with their weights on a tape.
pub struct BoundFields<'a> {
    pub gp: &'a PerturbationFieldModel,
    pub gp_vars: Vec<Var>,
    pub gs: &'a SensitivityFieldModel,
    pub gs_vars: Vec<Var>,
    pub sigma_bar: f64,
    pub config: &'a ProtectConfig,
    /// Camera id of every embedding row.
    pub camera_ids: &'a [usize],
}

/// Tape values of one perturbed batch.
#[derive(Clone, Copy, Debug)]
pub struct PerturbedVars {
    pub output: FieldOutput,
    pub raw: RawPerturbation,
    pub clamped_density: Option<Var>,
    pub sensitivity: Option<Var>,
}

impl BoundFields<'_> {
    pub fn perturb_batch(
        &self,
        tape: &mut Tape,
        batch: &mut QueryBatch,
        base: FieldOutput,
        camera: Option<usize>,
    ) -> Result<PerturbedVars> {
        let cfg = self.config;
        let mode = cfg.perturb_mode;
        let row = camera.and_then(|id| self.camera_ids.iter().position(|&c| c == id));
        let raw = self.gp.forward(tape, &self.gp_vars, batch, row)?;
        let need_s = (mode.density() && cfg.constraint.uses_sensitivity())
            || (mode.color() && cfg.constrain_color);
        let logit = if need_s {
            Some(self.gs.logit(tape, &self.gs_vars, batch)?)
        } else {
            None
        };
        if mode.density() && cfg.constraint.uses_sigma_bar() && !(self.sigma_bar > 0.0) {
            return Err(Error::DegenerateScene(format!(
                "mean density {} leaves no room for density perturbation",
                self.sigma_bar
            )));
        }

        let mut clamped_density = None;
        let density = if mode.density() {
            let d = raw.density;
            let hat = match cfg.constraint {
                ConstraintMode::None => d,
                ConstraintMode::FixedEps { eps } => {
                    let b = tape.constant(Array::scalar(eps));
                    soft_clamp_var(tape, d, b)?
                }
                ConstraintMode::Sensitivity | ConstraintMode::HardClip => {
                    let z = logit.expect("sensitivity evaluated");
                    let nz = tape.neg(z);
                    let one_minus_s = tape.sigmoid(nz);
                    let b = tape.scale(one_minus_s, self.sigma_bar);
                    if cfg.constraint == ConstraintMode::HardClip {
                        tape.hard_clip(d, b)?
                    } else {
                        soft_clamp_var(tape, d, b)?
                    }
                }
                ConstraintMode::Complement => {
                    // s' = 1 − s, so the bound scales with s itself.
                    let s = tape.sigmoid(logit.expect("sensitivity evaluated"));
                    let b = tape.scale(s, self.sigma_bar);
                    soft_clamp_var(tape, d, b)?
                }
                ConstraintMode::Random { seed } => {
                    let pos = tape.value(batch.positions).clone();
                    let b: Vec<f64> = pos
                        .data()
                        .chunks_exact(3)
                        .map(|x| (1.0 - hashed_uniform(seed, x)) * self.sigma_bar)
                        .collect();
                    let b = tape.constant(Array::new(vec![b.len(), 1], b)?);
                    soft_clamp_var(tape, d, b)?
                }
            };
            clamped_density = Some(hat);
            let sum = tape.add(base.density, hat)?;
            tape.clamp_min0(sum)
        } else {
            base.density
        };

        let color = if mode.color() {
            let mut dc = raw.color;
            if cfg.constrain_color {
                let z = logit.expect("sensitivity evaluated");
                let nz = tape.neg(z);
                let one_minus_s = tape.sigmoid(nz);
                let b = tape.scale(one_minus_s, cfg.color_bound);
                let b = tape.expand_last(b, 3)?;
                dc = soft_clamp_var(tape, dc, b)?;
            }
            let sum = tape.add(base.color, dc)?;
            tape.clamp(sum, 0.0, 1.0)
        } else {
            base.color
        };
        let sensitivity = logit.map(|z| tape.sigmoid(z));
        Ok(PerturbedVars {
            output: FieldOutput { color, density },
            raw,
            clamped_density,
            sensitivity,
        })
    }
}

impl Perturber for BoundFields<'_> {
    fn perturb(
        &self,
        tape: &mut Tape,
        batch: &mut QueryBatch,
        base: FieldOutput,
        camera: Option<usize>,
    ) -> Result<FieldOutput> {
        Ok(self.perturb_batch(tape, batch, base, camera)?.output)
    }
}

/// A downstream model together with the ground truth it is scored against.
pub enum Target<'a> {
    Classifier {
        model: &'a ClassifierModel,
        label: usize,
    },
    Voxel {
        model: &'a VoxelOccupancyModel,
        spec: VoxelSpec,
        occupancy: &'a Array,
    },
}

impl Target<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            Target::Classifier { .. } => Modality::Image,
            Target::Voxel { .. } => Modality::Voxel,
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            Target::Classifier { model, .. } => model.params.checksum(),
            Target::Voxel { model, .. } => model.params.checksum(),
        }
    }
}

/// The input handed to the downstream model.
#[derive(Clone, Copy, Debug)]
pub enum AdversarialInput {
    /// Any shape holding one row-major `H×W×3` image.
    Image(Var),
    /// `[C, 4]` voxel features.
    Voxel(Var),
}

impl AdversarialInput {
    fn modality(self) -> Modality {
        match self {
            AdversarialInput::Image(_) => Modality::Image,
            AdversarialInput::Voxel(_) => Modality::Voxel,
        }
    }
}

/// Task loss `L_F(F(x′), y)` with the downstream weights held constant.
pub fn task_loss(tape: &mut Tape, target: &Target<'_>, input: AdversarialInput) -> Result<Var> {
    match (target, input) {
        (Target::Classifier { model, label }, AdversarialInput::Image(x)) => {
            let vars = model.params.bind(tape, false);
            let z = model.forward(tape, &vars, x)?;
            model.loss(tape, z, &[*label])
        }
        (
            Target::Voxel {
                model, occupancy, ..
            },
            AdversarialInput::Voxel(x),
        ) => {
            let vars = model.params.bind(tape, false);
            let z = model.forward(tape, &vars, x)?;
            model.loss(tape, z, occupancy)
        }
        (t, x) => Err(Error::ModalityMismatch {
            expected: t.modality().name(),
            got: x.modality().name(),
        }),
    }
}

/// `L_pro = −L_F(F(x′), y)`.
pub fn protection_loss(
    tape: &mut Tape,
    target: &Target<'_>,
    input: AdversarialInput,
) -> Result<Var> {
    let l = task_loss(tape, target, input)?;
    Ok(tape.neg(l))
}

/// `Σ_r ‖I′(r) − I^gt(r)‖²` over `[R, 3]` rows.
pub fn naturalness_loss(tape: &mut Tape, rendered: Var, truth: &Array) -> Result<Var> {
    if truth.is_empty() {
        return invalid("naturalness loss over an empty ray batch");
    }
    if tape.shape(rendered) != truth.shape() {
        return invalid(format!(
            "rendered rows {:?} do not match ground truth {:?}",
            tape.shape(rendered),
            truth.shape()
        ));
    }
    let gt = tape.constant(truth.clone());
    let r = tape.sub(rendered, gt)?;
    let sq = tape.square(r);
    Ok(tape.sum(sq))
}

/// `λ_pro · L_pro + λ_nat · L_nat`.
pub fn total_loss(
    tape: &mut Tape,
    l_pro: Var,
    l_nat: Var,
    lambda_pro: f64,
    lambda_nat: f64,
) -> Result<Var> {
    let a = tape.scale(l_pro, lambda_pro);
    let b = tape.scale(l_nat, lambda_nat);
    Ok(tape.add(a, b)?)
}

pub fn total_loss_value(l_pro: f64, l_nat: f64, lambda_pro: f64, lambda_nat: f64) -> f64 {
    lambda_pro * l_pro + lambda_nat * l_nat
}

/// Detachable protection: the trained fields plus what they were trained
/// against.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionBundle {
    pub gp: PerturbationFieldModel,
    pub gs: SensitivityFieldModel,
    pub sigma_bar: f64,
    pub config: ProtectConfig,
    pub base_checksum: String,
    /// Camera id of every embedding row.
    pub camera_ids: Vec<usize>,
}

impl ProtectionBundle {
    pub const KIND: &'static str = "protection_bundle";

    /// Zero-initialized fields with `σ̄` measured on the frozen base field.
    pub fn initial(
        config: &ProtectConfig,
        base: &dyn RadianceField,
        bounds: &Aabb,
        camera_ids: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let sigma_bar = mean_density(base, bounds, config.sigma_bar_resolution)?;
        let gp = PerturbationFieldModel::new(
            PerturbationFieldConfig {
                mlp: config.perturbation_mlp,
                embedding_dim: config.embedding_dim,
                num_cameras: camera_ids.len(),
            },
            config.seed,
        )?;
        let gs = SensitivityFieldModel::new(
            SensitivityFieldConfig {
                mlp: config.sensitivity_mlp,
            },
            config.seed.wrapping_add(1),
        )?;
        Ok(Self {
            gp,
            gs,
            sigma_bar,
            config: config.clone(),
            base_checksum: base.checksum(),
            camera_ids,
        })
    }

    fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundFields<'a> {
        BoundFields {
            gp: &self.gp,
            gp_vars: self.gp.params.bind(tape, trainable),
            gs: &self.gs,
            gs_vars: self.gs.params.bind(tape, trainable),
            sigma_bar: self.sigma_bar,
            config: &self.config,
            camera_ids: &self.camera_ids,
        }
    }

    /// Errors unless `base` is the field this bundle was trained on.
    pub fn verify(&self, base: &dyn RadianceField) -> Result<()> {
        let actual = base.checksum();
        if actual != self.base_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.base_checksum.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Plain perturbation of a single query.
    pub fn query(
        &self,
        base: &dyn RadianceField,
        x: [f64; 3],
        d: [f64; 3],
        camera: Option<usize>,
    ) -> Result<PerturbedSample> {
        let sample = base.query(x, d)?;
        let mut tape = Tape::new();
        let mut batch = QueryBatch::from_arrays(
            &mut tape,
            Array::new(vec![1, 3], x.to_vec())?,
            Array::new(vec![1, 3], d.to_vec())?,
        )?;
        let b = FieldOutput {
            color: tape.constant(Array::new(vec![1, 3], sample.color.to_vec())?),
            density: tape.constant(Array::new(vec![1, 1], vec![sample.density])?),
        };
        let bound = self.bind(&mut tape, false);
        let p = bound.perturb_batch(&mut tape, &mut batch, b, camera)?;
        let v = |t: &Tape, v: Var| t.value(v).data().to_vec();
        let c = v(&tape, p.output.color);
        let rc = v(&tape, p.raw.color);
        Ok(PerturbedSample {
            color: [c[0], c[1], c[2]],
            density: v(&tape, p.output.density)[0],
            raw_color: [rc[0], rc[1], rc[2]],
            raw_density: v(&tape, p.raw.density)[0],
            clamped_density: p.clamped_density.map_or(0.0, |h| v(&tape, h)[0]),
            sensitivity: match p.sensitivity {
                Some(s) => v(&tape, s)[0],
                None => self.gs.query(x)?,
            },
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            Self::KIND,
            json!({
                "config": self.config,
                "sigma_bar": self.sigma_bar,
                "base_checksum": self.base_checksum,
                "camera_ids": self.camera_ids,
                "perturbation": self.gp.config,
                "sensitivity": self.gs.config,
            }),
        );
        self.gp.write_into(&mut c, "gp.");
        self.gs.write_into(&mut c, "gs.");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let m = &c.meta;
        Ok(Self {
            gp: PerturbationFieldModel::read_from(meta_field(m, "perturbation")?, c, "gp.")?,
            gs: SensitivityFieldModel::read_from(meta_field(m, "sensitivity")?, c, "gs.")?,
            sigma_bar: meta_field(m, "sigma_bar")?,
            config: meta_field(m, "config")?,
            base_checksum: meta_field(m, "base_checksum")?,
            camera_ids: meta_field(m, "camera_ids")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    /// Loads a bundle and checks it against the base field it will perturb.
    pub fn load(path: impl AsRef<Path>, base: &dyn RadianceField) -> Result<Self> {
        let b = Self::from_container(&Container::load(path)?)?;
        b.verify(base)?;
        Ok(b)
    }
}

impl Perturber for ProtectionBundle {
    fn perturb(
        &self,
        tape: &mut Tape,
        batch: &mut QueryBatch,
        base: FieldOutput,
        camera: Option<usize>,
    ) -> Result<FieldOutput> {
        self.bind(tape, false).perturb(tape, batch, base, camera)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Absent on steps that do not evaluate the term.
    pub l_pro: Option<f64>,
    pub l_nat: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub fn log_csv(entries: &[LogEntry]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,l_pro,l_nat,loss,lr,wall_ms\n");
    for e in entries {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            e.step,
            opt(e.l_pro),
            opt(e.l_nat),
            e.loss,
            e.lr,
            e.wall_ms
        ));
    }
    s
}

pub fn write_log_csv(path: impl AsRef<Path>, entries: &[LogEntry]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_csv(entries)).map_err(io_err(path))
}

/// A posed ground-truth view used for training.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    pub camera: &'a Camera,
    pub image: &'a RenderedImage,
}

/// Everything a protection run reads but never changes.
pub struct ProtectInputs<'a> {
    pub base: &'a dyn RadianceField,
    pub bounds: Aabb,
    pub views: Vec<TrainView<'a>>,
    pub target: Target<'a>,
}

struct CachedView {
    bundle: RayBundle,
    color: Array,
    density: Array,
}

fn cache_view(
    base: &dyn RadianceField,
    camera: &Camera,
    bounds: &Aabb,
    cfg: &SamplingConfig,
) -> Result<CachedView> {
    let rays = generate_rays(camera)?;
    let bundle = RayBundle::new(&rays, bounds, cfg)?;
    let (color, density) = if bundle.hit_count() == 0 {
        (Array::zeros(&[0, 3]), Array::zeros(&[0, 1]))
    } else {
        let mut tape = Tape::new();
        let mut batch = QueryBatch::from_arrays(
            &mut tape,
            bundle.positions.clone(),
            bundle.directions.clone(),
        )?;
        let out = base.evaluate(&mut tape, &mut batch)?;
        (
            tape.value(out.color).clone(),
            tape.value(out.density).clone(),
        )
    };
    Ok(CachedView {
        bundle,
        color,
        density,
    })
}

/// `(ℛ row indices, ground-truth rows)` for one naturalness batch.
fn ray_batch(
    rng: &mut ChaCha8Rng,
    image: &RenderedImage,
    count: usize,
) -> Result<(Rc<[usize]>, Array)> {
    let pixels = image.width * image.height;
    let chosen: Vec<usize> = if count >= pixels {
        (0..pixels).collect()
    } else {
        let mut v = sample_indices(rng, pixels, count).into_vec();
        v.sort_unstable();
        v
    };
    let index: Vec<usize> = chosen
        .iter()
        .flat_map(|&p| (0..3).map(move |c| 3 * p + c))
        .collect();
    let truth: Vec<f64> = index.iter().map(|&i| image.data[i]).collect();
    Ok((index.into(), Array::new(vec![chosen.len(), 3], truth)?))
}

/// What one step feeds through the differentiable pipeline.
#[derive(Clone, Copy, Debug)]
enum Query {
    View(usize),
    Voxel,
}

struct StepLosses {
    l_pro: Option<Var>,
    l_nat: Option<Var>,
    total: Var,
}

/// One step's objective. Image targets get both terms from a full render of
/// a random training view. Voxel targets alternate: even steps score the
/// perturbed grid, odd steps fit a ray batch.
fn step_objective(
    tape: &mut Tape,
    step: usize,
    rng: &mut ChaCha8Rng,
    inputs: &ProtectInputs<'_>,
    config: &ProtectConfig,
    forward: &mut dyn FnMut(&mut Tape, Query) -> Result<Var>,
) -> Result<StepLosses> {
    let image_target = inputs.target.modality() == Modality::Image;
    if !image_target && step % 2 == 0 {
        let features = forward(tape, Query::Voxel)?;
        let l_pro = protection_loss(tape, &inputs.target, AdversarialInput::Voxel(features))?;
        let total = tape.scale(l_pro, config.lambda_pro);
        return Ok(StepLosses {
            l_pro: Some(l_pro),
            l_nat: None,
            total,
        });
    }
    let v = rng.random_range(0..inputs.views.len());
    let rendered = forward(tape, Query::View(v))?;
    let (index, truth) = ray_batch(rng, inputs.views[v].image, config.rays_per_step)?;
    let rows = tape.gather(rendered, index, truth.shape())?;
    let l_nat = naturalness_loss(tape, rows, &truth)?;
    if image_target {
        let l_pro = protection_loss(tape, &inputs.target, AdversarialInput::Image(rendered))?;
        let total = total_loss(tape, l_pro, l_nat, config.lambda_pro, config.lambda_nat)?;
        Ok(StepLosses {
            l_pro: Some(l_pro),
            l_nat: Some(l_nat),
            total,
        })
    } else {
        let total = tape.scale(l_nat, config.lambda_nat);
        Ok(StepLosses {
            l_pro: None,
            l_nat: Some(l_nat),
            total,
        })
    }
}

fn read_losses(
    tape: &Tape,
    step: usize,
    l: &StepLosses,
) -> Result<(Option<f64>, Option<f64>, f64)> {
    let get = |v: Var| tape.value(v).data()[0];
    let l_pro = l.l_pro.map(get);
    let l_nat = l.l_nat.map(get);
    let total = get(l.total);
    let bad = |x: Option<f64>| x.is_some_and(|v| !v.is_finite());
    if !total.is_finite() || bad(l_pro) || bad(l_nat) {
        return Err(Error::Numerical {
            step,
            detail: format!("loss {total} (L_pro {l_pro:?}, L_nat {l_nat:?})"),
        });
    }
    Ok((l_pro, l_nat, total))
}

fn check_grads(step: usize, grads: &[Array], what: &str) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                step,
                detail: format!("{what} gradient {i} contains {bad}"),
            });
        }
    }
    Ok(())
}

fn check_inputs(inputs: &ProtectInputs<'_>, config: &ProtectConfig) -> Result<()> {
    config.validate()?;
    inputs.bounds.validate()?;
    if inputs.views.is_empty() {
        return invalid("training needs at least one view");
    }
    if let Target::Voxel { model, spec, .. } = &inputs.target {
        if spec.resolution != model.config.resolution {
            return invalid(format!(
                "voxel grid {:?} does not match model resolution {:?}",
                spec.resolution, model.config.resolution
            ));
        }
    }
    Ok(())
}

fn check_frozen(what: &str, before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(Error::ChecksumMismatch {
            expected: format!("{what} {before}"),
            actual: after.to_string(),
        });
    }
    Ok(())
}

/// Trains the Perturbation and Sensitivity Fields against a frozen base
/// field and a frozen downstream model. `initial` resumes from an existing
/// bundle; otherwise both fields start from zero heads.
pub fn train_protection(
    inputs: &ProtectInputs<'_>,
    config: &ProtectConfig,
    initial: Option<ProtectionBundle>,
) -> Result<(ProtectionBundle, Vec<LogEntry>)> {
    check_inputs(inputs, config)?;
    let camera_ids: Vec<usize> = inputs.views.iter().map(|v| v.camera.id).collect();
    let mut bundle = match initial {
        Some(b) => {
            b.verify(inputs.base)?;
            if b.camera_ids != camera_ids {
                return invalid("resumed bundle was trained on a different view set");
            }
            ProtectionBundle {
                config: config.clone(),
                ..b
            }
        }
        None => ProtectionBundle::initial(config, inputs.base, &inputs.bounds, camera_ids)?,
    };
    let base_sum = inputs.base.checksum();
    let target_sum = inputs.target.checksum();
    let sampling = config.sampling();

    let mut views: Vec<Option<CachedView>> = (0..inputs.views.len()).map(|_| None).collect();
    let voxel_cache = match &inputs.target {
        Target::Voxel { spec, .. } => Some(voxel_base_outputs(inputs.base, spec)?),
        Target::Classifier { .. } => None,
    };

    let adam_cfg = config.optimizer.adam();
    let mut adam_p = Adam::new(adam_cfg, bundle.gp.params.values());
    let mut adam_s = Adam::new(adam_cfg, bundle.gs.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.optimizer.steps);
    let start = Instant::now();

    for step in 0..config.optimizer.steps {
        let mut tape = Tape::new();
        let fields = bundle.bind(&mut tape, true);
        let mut forward = |tape: &mut Tape, q: Query| -> Result<Var> {
            match q {
                Query::View(v) => {
                    if views[v].is_none() {
                        views[v] = Some(cache_view(
                            inputs.base,
                            inputs.views[v].camera,
                            &inputs.bounds,
                            &sampling,
                        )?);
                    }
                    let c = views[v].as_ref().expect("cached");
                    render_bundle(
                        tape,
                        BaseSource::Cached(&c.color, &c.density),
                        Some(&fields),
                        &c.bundle,
                        Some(inputs.views[v].camera.id),
                        &sampling,
                    )
                }
                Query::Voxel => {
                    let (color, density) = voxel_cache.as_ref().expect("voxel target");
                    let Target::Voxel { spec, .. } = &inputs.target else {
                        unreachable!("voxel query on an image target")
                    };
                    let vv = extract_voxel_vars(
                        tape,
                        BaseSource::Cached(color, density),
                        Some(&fields),
                        spec,
                    )?;
                    vv.features(tape)
                }
            }
        };
        let losses = step_objective(&mut tape, step, &mut rng, inputs, config, &mut forward)
            .map_err(at_step(step))?;
        let (l_pro, l_nat, loss) = read_losses(&tape, step, &losses)?;
        let grads = tape.backward(losses.total).map_err(at_step(step))?;
        let gp = ParamStore::collect_grads(&grads, &fields.gp_vars);
        let gs = ParamStore::collect_grads(&grads, &fields.gs_vars);
        drop(fields);
        check_grads(step, &gp, "perturbation field")?;
        check_grads(step, &gs, "sensitivity field")?;
        let lr = adam_p.current_lr();
        adam_p.step(
            bundle.gp.params.values_mut(),
            &gp.iter().collect::<Vec<_>>(),
        )?;
        adam_s.step(
            bundle.gs.params.values_mut(),
            &gs.iter().collect::<Vec<_>>(),
        )?;
        log.push(LogEntry {
            step,
            l_pro,
            l_nat,
            loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    check_frozen("base field", &base_sum, &inputs.base.checksum())?;
    check_frozen("downstream model", &target_sum, &inputs.target.checksum())?;
    Ok((bundle, log))
}

/// A radiance field evaluated through trainable tape variables.
pub(crate) struct TrainableField<'a> {
    pub(crate) model: &'a RadianceFieldModel,
    pub(crate) vars: Vec<Var>,
}

impl RadianceField for TrainableField<'_> {
    fn evaluate(&self, tape: &mut Tape, batch: &mut QueryBatch) -> Result<FieldOutput> {
        self.model.forward(tape, &self.vars, batch)
    }

    fn checksum(&self) -> String {
        self.model.checksum()
    }
}

/// Adversarial fine-tuning baseline: the same objective, optimized directly
/// over the base field's weights with no Perturbation or Sensitivity Field.
/// `inputs.base` supplies the frozen reference only for checksums; the
/// returned field is a fine-tuned copy of `base`.
pub fn train_adv_ft(
    base: &RadianceFieldModel,
    inputs: &ProtectInputs<'_>,
    config: &ProtectConfig,
) -> Result<(RadianceFieldModel, Vec<LogEntry>)> {
    check_inputs(inputs, config)?;
    let target_sum = inputs.target.checksum();
    let sampling = config.sampling();
    let mut model = base.clone();
    let rays: Vec<RayBundle> = inputs
        .views
        .iter()
        .map(|v| RayBundle::new(&generate_rays(v.camera)?, &inputs.bounds, &sampling))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(config.optimizer.adam(), model.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.optimizer.steps);
    let start = Instant::now();

    for step in 0..config.optimizer.steps {
        let mut tape = Tape::new();
        let field = TrainableField {
            model: &model,
            vars: model.params.bind(&mut tape, true),
        };
        let mut forward = |tape: &mut Tape, q: Query| -> Result<Var> {
            match q {
                Query::View(v) => render_bundle(
                    tape,
                    BaseSource::Field(&field),
                    None,
                    &rays[v],
                    None,
                    &sampling,
                ),
                Query::Voxel => {
                    let Target::Voxel { spec, .. } = &inputs.target else {
                        unreachable!("voxel query on an image target")
                    };
                    let vv = extract_voxel_vars(tape, BaseSource::Field(&field), None, spec)?;
                    vv.features(tape)
                }
            }
        };
        let losses = step_objective(&mut tape, step, &mut rng, inputs, config, &mut forward)
            .map_err(at_step(step))?;
        let (l_pro, l_nat, loss) = read_losses(&tape, step, &losses)?;
        let grads = tape.backward(losses.total).map_err(at_step(step))?;
        let g = ParamStore::collect_grads(&grads, &field.vars);
        drop(field);
        check_grads(step, &g, "radiance field")?;
        let lr = adam.current_lr();
        adam.step(model.params.values_mut(), &g.iter().collect::<Vec<_>>())?;
        log.push(LogEntry {
            step,
            l_pro,
            l_nat,
            loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    check_frozen("downstream model", &target_sum, &inputs.target.checksum())?;
    Ok((model, log))
}
