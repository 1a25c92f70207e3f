//! Photometric training of the base radiance field.

use std::path::Path;
use std::time::Instant;

use diffcore::{Adam, AdamConfig, Array, Tape};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{meta_field, Container};
use crate::error::{at_step, invalid, io_err, Error, Result};
use crate::fields::{QueryBatch, RadianceField, RadianceFieldConfig, RadianceFieldModel};
use crate::params::ParamStore;
use crate::protect::{naturalness_loss, OptimizerConfig, TrainView};
use crate::render::{
    generate_rays, render_bundle, Aabb, BaseSource, Ray, RayBundle, SamplingConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub field: RadianceFieldConfig,
    pub optimizer: OptimizerConfig,
    pub rays_per_step: usize,
    pub samples: usize,
    /// Jitter sample depths, with a fresh stream every step.
    pub stratified: bool,
    pub seed: u64,
    /// Geometry warm start: steps regressing the field onto a reference
    /// field at random points before photometric training. Zero disables it.
    pub distill_steps: usize,
    pub distill_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            field: RadianceFieldConfig::default(),
            optimizer: OptimizerConfig {
                steps: 3000,
                ..OptimizerConfig::default()
            },
            rays_per_step: 1024,
            samples: 64,
            stratified: true,
            seed: 0,
            distill_steps: 0,
            distill_points: 4096,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 || self.samples == 0 {
            return invalid("rays per step and samples must be positive");
        }
        if self.distill_steps > 0 && self.distill_points == 0 {
            return invalid("distillation needs at least one point per step");
        }
        self.field.mlp.validate()
    }
}

/// A field together with its optimizer state, so training can resume.
pub struct FitState {
    pub model: RadianceFieldModel,
    adam: Adam,
}

impl FitState {
    pub fn new(config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let model = RadianceFieldModel::new(config.field, config.seed)?;
        let adam = Adam::new(adam_config(config), model.params.values());
        Ok(Self { model, adam })
    }

    pub fn step(&self) -> usize {
        self.adam.step_count()
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        let (m, v) = self.adam.moments();
        c.meta = json!({
            "config": self.model.config,
            "step": self.adam.step_count(),
        });
        for (i, (a, b)) in m.iter().zip(v).enumerate() {
            c.tensors.push((format!("adam.m.{i}"), a.clone()));
            c.tensors.push((format!("adam.v.{i}"), b.clone()));
        }
        c
    }

    /// Restores a training checkpoint. A plain field checkpoint resumes
    /// with fresh moments at step 0.
    pub fn from_container(c: &Container, config: &FitConfig) -> Result<Self> {
        let model = RadianceFieldModel::from_container(c)?;
        if model.config != config.field {
            return invalid("checkpoint field architecture differs from the configuration");
        }
        let step: usize = meta_field(&c.meta, "step").unwrap_or(0);
        let n = model.params.len();
        let adam = if c.tensor("adam.m.0").is_ok() {
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                m.push(c.tensor(&format!("adam.m.{i}"))?.clone());
                v.push(c.tensor(&format!("adam.v.{i}"))?.clone());
            }
            Adam::restore(adam_config(config), step, m, v)?
        } else {
            Adam::new(adam_config(config), model.params.values())
        };
        Ok(Self { model, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>, config: &FitConfig) -> Result<Self> {
        Self::from_container(&Container::load(path)?, config)
    }
}

fn adam_config(config: &FitConfig) -> AdamConfig {
    config.optimizer.adam()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLogEntry {
    pub step: usize,
    pub loss: f64,
    /// PSNR of the step's ray batch.
    pub batch_psnr: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub fn write_fit_log(path: impl AsRef<Path>, entries: &[FitLogEntry]) -> Result<()> {
    let mut s = String::from("step,loss,batch_psnr,lr,wall_ms\n");
    for e in entries {
        s.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            e.step, e.loss, e.batch_psnr, e.lr, e.wall_ms
        ));
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(io_err(path))
}

/// Trains until `config.optimizer.steps` total steps, continuing from the
/// state's step counter.
pub fn fit_field(
    state: &mut FitState,
    views: &[TrainView<'_>],
    bounds: &Aabb,
    config: &FitConfig,
) -> Result<Vec<FitLogEntry>> {
    config.validate()?;
    bounds.validate()?;
    if views.is_empty() {
        return invalid("field training needs at least one view");
    }
    let mut rays: Vec<Ray> = Vec::new();
    let mut colors: Vec<f64> = Vec::new();
    for v in views {
        rays.extend(generate_rays(v.camera)?);
        colors.extend_from_slice(&v.image.data);
    }
    let start = Instant::now();
    let first = state.step();
    let mut log = Vec::with_capacity(config.optimizer.steps.saturating_sub(first));
    for step in first..config.optimizer.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64 + 1);
        let count = config.rays_per_step.min(rays.len());
        let chosen = sample_indices(&mut rng, rays.len(), count).into_vec();
        let batch: Vec<Ray> = chosen.iter().map(|&i| rays[i]).collect();
        let truth: Vec<f64> = chosen
            .iter()
            .flat_map(|&i| colors[3 * i..3 * i + 3].iter().copied())
            .collect();
        let truth = Array::new(vec![count, 3], truth)?;
        let sampling = SamplingConfig {
            samples: config.samples,
            stratified: config.stratified,
            seed: config.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            white_background: false,
        };
        let bundle = RayBundle::new(&batch, bounds, &sampling)?;

        let mut tape = Tape::new();
        let vars = state.model.params.bind(&mut tape, true);
        let field = crate::protect::TrainableField {
            model: &state.model,
            vars,
        };
        let rendered = render_bundle(
            &mut tape,
            BaseSource::Field(&field),
            None,
            &bundle,
            None,
            &sampling,
        )
        .map_err(at_step(step))?;
        let sse = naturalness_loss(&mut tape, rendered, &truth).map_err(at_step(step))?;
        let loss = tape.scale(sse, 1.0 / (3 * count) as f64);
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numerical {
                step,
                detail: format!("photometric loss {lv}"),
            });
        }
        let grads = tape.backward(loss).map_err(at_step(step))?;
        let g = ParamStore::collect_grads(&grads, &field.vars);
        drop(field);
        let lr = state.adam.current_lr();
        state.adam.step(
            state.model.params.values_mut(),
            &g.iter().collect::<Vec<_>>(),
        )?;
        log.push(FitLogEntry {
            step,
            loss: lv,
            batch_psnr: -10.0 * lv.max(1e-10).log10(),
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Regresses the field onto `reference` at uniform random points in
/// `bounds`: squared error of log(1 + density) plus squared color error.
/// Uses its own optimizer, so the photometric step counter is untouched.
pub fn distill_field(
    state: &mut FitState,
    reference: &dyn RadianceField,
    bounds: &Aabb,
    config: &FitConfig,
) -> Result<Vec<FitLogEntry>> {
    config.validate()?;
    bounds.validate()?;
    let mut adam = Adam::new(adam_config(config), state.model.params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd157_111a);
    let n = config.distill_points;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.distill_steps);
    for step in 0..config.distill_steps {
        let mut xs = Vec::with_capacity(3 * n);
        let mut ds = Vec::with_capacity(3 * n);
        for _ in 0..n {
            for k in 0..3 {
                xs.push(rng.random_range(bounds.min[k]..bounds.max[k]));
            }
            let d: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            ds.extend(d.iter().map(|v| v / norm));
        }
        let xs = Array::new(vec![n, 3], xs)?;
        let ds = Array::new(vec![n, 3], ds)?;

        let mut ref_tape = Tape::new();
        let mut ref_batch = QueryBatch::from_arrays(&mut ref_tape, xs.clone(), ds.clone())?;
        let target = reference.evaluate(&mut ref_tape, &mut ref_batch)?;
        let target_color = ref_tape.value(target.color).clone();
        let target_density = ref_tape.value(target.density).map(|v| v.ln_1p());

        let mut tape = Tape::new();
        let vars = state.model.params.bind(&mut tape, true);
        let mut batch = QueryBatch::from_arrays(&mut tape, xs, ds)?;
        let out = state
            .model
            .forward(&mut tape, &vars, &mut batch)
            .map_err(at_step(step))?;
        let tc = tape.constant(target_color);
        let td = tape.constant(target_density);
        let dc = tape.sub(out.color, tc)?;
        let dc = tape.square(dc);
        let color_loss = tape.mean(dc)?;
        let ld = tape.add_scalar(out.density, 1.0);
        let ld = tape.log(ld).map_err(at_step(step))?;
        let dd = tape.sub(ld, td)?;
        let dd = tape.square(dd);
        let density_loss = tape.mean(dd)?;
        let loss = tape.add(color_loss, density_loss)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numerical {
                step,
                detail: format!("distillation loss {lv}"),
            });
        }
        let grads = tape.backward(loss).map_err(at_step(step))?;
        let g = ParamStore::collect_grads(&grads, &vars);
        let lr = adam.current_lr();
        adam.step(
            state.model.params.values_mut(),
            &g.iter().collect::<Vec<_>>(),
        )?;
        log.push(FitLogEntry {
            step,
            loss: lv,
            batch_psnr: f64::NAN,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{MlpConfig, PositionalEncoding};
    use crate::scenes::{generate_dataset, scene_bank, CameraRig, Dataset, Renderer};

    fn tiny_config() -> FitConfig {
        let enc = |bands| PositionalEncoding {
            bands,
            include_input: true,
        };
        FitConfig {
            field: RadianceFieldConfig {
                mlp: MlpConfig {
                    width: 8,
                    depth: 2,
                    color_width: 4,
                    position_encoding: enc(2),
                    direction_encoding: enc(1),
                },
                ..RadianceFieldConfig::default()
            },
            optimizer: OptimizerConfig {
                steps: 6,
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            rays_per_step: 32,
            samples: 8,
            distill_steps: 30,
            distill_points: 128,
            ..FitConfig::default()
        }
    }

    fn scene_and_data() -> (crate::scenes::AnalyticScene, Dataset) {
        let scene = scene_bank(2, 0).unwrap().remove(0);
        let rig = CameraRig {
            n_views: 3,
            width: 6,
            height: 6,
            ..CameraRig::default()
        };
        let data = generate_dataset(&scene, &rig, &Renderer::Oracle { samples: 1024 }).unwrap();
        (scene, data)
    }

    fn views(data: &Dataset) -> Vec<TrainView<'_>> {
        data.views
            .iter()
            .map(|v| TrainView {
                camera: &v.camera,
                image: &v.image,
            })
            .collect()
    }

    #[test]
    fn validation() {
        assert!(tiny_config().validate().is_ok());
        let c = FitConfig {
            rays_per_step: 0,
            ..tiny_config()
        };
        assert!(matches!(c.validate(), Err(Error::Invalid(_))));
        let c = FitConfig {
            distill_points: 0,
            ..tiny_config()
        };
        assert!(matches!(c.validate(), Err(Error::Invalid(_))));
        let (scene, _) = scene_and_data();
        let mut state = FitState::new(&tiny_config()).unwrap();
        assert!(fit_field(&mut state, &[], &scene.bounds, &tiny_config()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let (scene, data) = scene_and_data();
        let cfg = tiny_config();
        let mut a = FitState::new(&cfg).unwrap();
        let mut b = FitState::new(&cfg).unwrap();
        let la = fit_field(&mut a, &views(&data), &scene.bounds, &cfg).unwrap();
        fit_field(&mut b, &views(&data), &scene.bounds, &cfg).unwrap();
        assert_eq!(a.model.params.checksum(), b.model.params.checksum());
        assert_eq!(
            la.iter().map(|e| e.step).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        assert_eq!(a.step(), 6);
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let (scene, data) = scene_and_data();
        let mut cfg = tiny_config();
        cfg.optimizer.cosine = false;
        let mut straight = FitState::new(&cfg).unwrap();
        fit_field(&mut straight, &views(&data), &scene.bounds, &cfg).unwrap();

        let half = FitConfig {
            optimizer: OptimizerConfig {
                steps: 3,
                ..cfg.optimizer
            },
            ..cfg.clone()
        };
        assert!(!cfg.optimizer.cosine);
        let mut first = FitState::new(&half).unwrap();
        fit_field(&mut first, &views(&data), &scene.bounds, &half).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.rgck");
        first.save(&path).unwrap();
        let mut resumed = FitState::load(&path, &cfg).unwrap();
        assert_eq!(resumed.step(), 3);
        let log = fit_field(&mut resumed, &views(&data), &scene.bounds, &cfg).unwrap();
        assert_eq!(log.iter().map(|e| e.step).collect::<Vec<_>>(), [3, 4, 5]);
        assert_eq!(
            resumed.model.params.checksum(),
            straight.model.params.checksum()
        );
    }

    #[test]
    fn plain_field_checkpoint_restarts_the_counter() {
        let cfg = tiny_config();
        let state = FitState::new(&cfg).unwrap();
        let plain = FitState::from_container(&state.model.to_container(), &cfg).unwrap();
        assert_eq!(plain.step(), 0);
        let other = FitConfig {
            field: RadianceFieldConfig::default(),
            ..cfg.clone()
        };
        assert!(FitState::from_container(&state.to_container(), &other).is_err());
    }

    #[test]
    fn distillation_moves_the_field_toward_the_reference() {
        let (scene, _) = scene_and_data();
        let cfg = tiny_config();
        let mut state = FitState::new(&cfg).unwrap();
        let before = state.model.params.checksum();
        let log = distill_field(&mut state, &scene, &scene.bounds, &cfg).unwrap();
        assert_eq!(log.len(), 30);
        assert_eq!(state.step(), 0);
        assert_ne!(state.model.params.checksum(), before);
        let head: f64 = log[..5].iter().map(|e| e.loss).sum();
        let tail: f64 = log[25..].iter().map(|e| e.loss).sum();
        assert!(tail < head, "distillation loss {head} -> {tail}");
    }

    #[test]
    fn divergence_is_a_numerical_failure() {
        let (scene, data) = scene_and_data();
        let cfg = FitConfig {
            optimizer: OptimizerConfig {
                lr: 1e300,
                ..tiny_config().optimizer
            },
            ..tiny_config()
        };
        let mut state = FitState::new(&cfg).unwrap();
        let err = fit_field(&mut state, &views(&data), &scene.bounds, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err}");
        let mut state = FitState::new(&cfg).unwrap();
        let err = distill_field(&mut state, &scene, &scene.bounds, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err}");
    }
}
