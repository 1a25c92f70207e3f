//! Run configuration and the stages that chain scenes, base fields,
//! downstream models, protection and evaluation.

use std::collections::BTreeMap;

use diffcore::Array;
use serde::{Deserialize, Serialize};

use crate::downstream::{
    occupancy_target, train_classifier, train_voxel_model, ClassifierConfig, ClassifierModel,
    DownstreamTrainConfig, VoxelModelConfig, VoxelOccupancyModel,
};
use crate::error::{invalid, Result};
use crate::eval::{
    accuracy, occupancy_iou, occupancy_recall, psnr, ssim, MetricRow, TransformSpec,
};
use crate::fields::{MlpConfig, RadianceField, RadianceFieldConfig, RadianceFieldModel};
use crate::fit::{distill_field, fit_field, FitConfig, FitLogEntry, FitState};
use crate::protect::{
    train_adv_ft, train_protection, LogEntry, OptimizerConfig, ProtectConfig, ProtectInputs,
    ProtectionBundle, Target, TrainView,
};
use crate::render::{
    extract_voxel_grid, render_image, Aabb, Perturber, RenderedImage, SamplingConfig,
    VoxelFeatureGrid, VoxelSpec,
};
use crate::scenes::{
    box_scenes, generate_dataset, scene_bank, AnalyticScene, CameraRig, Dataset, Renderer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenesConfig {
    pub num_classes: usize,
    pub rig: CameraRig,
    /// Quadrature samples per ray for ground-truth images.
    pub oracle_samples: usize,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            rig: CameraRig {
                width: 32,
                height: 32,
                ..CameraRig::default()
            },
            oracle_samples: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelTaskConfig {
    pub model: VoxelModelConfig,
    pub train: DownstreamTrainConfig,
    /// Random box scenes whose analytic grids train the model.
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Bank scene whose radiance field is attacked through the voxel pathway.
    pub scene: usize,
    /// Protection weight used against the occupancy model.
    pub lambda_pro: f64,
}

impl Default for VoxelTaskConfig {
    fn default() -> Self {
        Self {
            model: VoxelModelConfig::default(),
            train: DownstreamTrainConfig {
                epochs: 300,
                lr: 1e-2,
                ..DownstreamTrainConfig::default()
            },
            train_scenes: 24,
            test_scenes: 8,
            scene: 1,
            lambda_pro: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub transforms: Vec<TransformSpec>,
    pub adv_ft_lambdas: Vec<f64>,
    pub adv_ft_steps: usize,
    /// Hidden widths of the extra classifiers used for transfer evaluation.
    pub transfer_hidden: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            transforms: vec![
                TransformSpec::GaussianNoise { variance: 0.005 },
                TransformSpec::GaussianBlur { sigma: 1.0 },
                TransformSpec::CropMargins { fraction: 0.1 },
                TransformSpec::DownUp { factor: 2.0 },
            ],
            adv_ft_lambdas: vec![1.0, 10.0, 100.0],
            adv_ft_steps: 300,
            transfer_hidden: vec![32, 128],
        }
    }
}

/// Everything a run reads, with desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: ScenesConfig,
    pub field: FitConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: DownstreamTrainConfig,
    pub voxel: VoxelTaskConfig,
    pub protect: ProtectConfig,
    /// Samples per ray when rendering fields for evaluation.
    pub render_samples: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mlp = MlpConfig {
            width: 32,
            depth: 2,
            ..MlpConfig::desk()
        };
        Self {
            seed: 0,
            scenes: ScenesConfig::default(),
            field: FitConfig {
                field: RadianceFieldConfig {
                    mlp: MlpConfig::desk(),
                    ..RadianceFieldConfig::default()
                },
                optimizer: OptimizerConfig {
                    steps: 400,
                    lr: 5e-3,
                    ..OptimizerConfig::default()
                },
                samples: 32,
                distill_steps: 200,
                ..FitConfig::default()
            },
            classifier: ClassifierConfig {
                patch: 8,
                hidden: 64,
                num_classes: 4,
                width: 32,
                height: 32,
            },
            classifier_train: DownstreamTrainConfig::default(),
            voxel: VoxelTaskConfig::default(),
            protect: ProtectConfig {
                lambda_pro: 50.0,
                samples: 32,
                perturbation_mlp: mlp,
                sensitivity_mlp: mlp,
                ..ProtectConfig::default()
            },
            render_samples: 32,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copies the global seed into every stage so one number drives a run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenes.rig.seed = seed;
        self.field.seed = seed;
        self.classifier_train.seed = seed;
        self.voxel.train.seed = seed;
        self.protect.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.rig.validate()?;
        if self.scenes.num_classes < 2 || self.scenes.oracle_samples < 1024 {
            return invalid("scene bank needs ≥ 2 classes and ≥ 1024 oracle samples");
        }
        if self.classifier.num_classes != self.scenes.num_classes
            || self.classifier.width != self.scenes.rig.width
            || self.classifier.height != self.scenes.rig.height
        {
            return invalid("classifier shape must match the scene bank and camera rig");
        }
        self.classifier.validate()?;
        if self.voxel.scene >= self.scenes.num_classes {
            return invalid("voxel scene index outside the bank");
        }
        if self.render_samples == 0 {
            return invalid("render samples must be positive");
        }
        self.field.validate()?;
        self.protect.validate()?;
        self.eval
            .transforms
            .iter()
            .try_for_each(TransformSpec::validate)
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig::deterministic(self.render_samples)
    }

    pub fn bank(&self) -> Result<Vec<AnalyticScene>> {
        scene_bank(self.scenes.num_classes, self.seed)
    }

    pub fn voxel_spec(&self, bounds: Aabb) -> VoxelSpec {
        VoxelSpec {
            resolution: self.voxel.model.resolution,
            ..VoxelSpec::new(bounds, self.voxel.model.resolution[0])
        }
    }
}

pub fn build_datasets(config: &RunConfig, bank: &[AnalyticScene]) -> Result<Vec<Dataset>> {
    let renderer = Renderer::Oracle {
        samples: config.scenes.oracle_samples,
    };
    bank.iter()
        .map(|s| generate_dataset(s, &config.scenes.rig, &renderer))
        .collect()
}

pub fn train_views(dataset: &Dataset) -> Vec<TrainView<'_>> {
    dataset
        .train_views()
        .map(|v| TrainView {
            camera: &v.camera,
            image: &v.image,
        })
        .collect()
}

/// Fits a base field to a dataset, after the geometry warm start from the
/// scene when the configuration asks for one.
pub fn fit_scene(
    config: &RunConfig,
    dataset: &Dataset,
    scene: &AnalyticScene,
) -> Result<(FitState, Vec<FitLogEntry>)> {
    let mut state = FitState::new(&config.field)?;
    distill_field(&mut state, scene, &scene.bounds, &config.field)?;
    let log = fit_field(
        &mut state,
        &train_views(dataset),
        &scene.bounds,
        &config.field,
    )?;
    Ok((state, log))
}

/// Classifier trained on the ground-truth training views of every scene.
pub fn train_bank_classifier(
    config: &RunConfig,
    datasets: &[Dataset],
) -> Result<(ClassifierModel, Vec<f64>)> {
    let data: Vec<(&RenderedImage, usize)> = datasets
        .iter()
        .flat_map(|d| d.train_views().map(move |v| (&v.image, d.label)))
        .collect();
    train_classifier(config.classifier, &data, &config.classifier_train)
}

/// Renders of a dataset's test views, with or without a perturber.
pub fn render_test_views(
    config: &RunConfig,
    field: &dyn RadianceField,
    perturber: Option<&dyn Perturber>,
    dataset: &Dataset,
    bounds: &Aabb,
) -> Result<Vec<RenderedImage>> {
    dataset
        .test_views()
        .map(|v| render_image(field, perturber, &v.camera, bounds, &config.sampling()))
        .collect()
}

pub fn protect_scene(
    protect: &ProtectConfig,
    field: &RadianceFieldModel,
    dataset: &Dataset,
    bounds: &Aabb,
    target: Target<'_>,
) -> Result<(ProtectionBundle, Vec<LogEntry>)> {
    let inputs = ProtectInputs {
        base: field,
        bounds: *bounds,
        views: train_views(dataset),
        target,
    };
    train_protection(&inputs, protect, None)
}

pub fn adv_ft_scene(
    protect: &ProtectConfig,
    field: &RadianceFieldModel,
    dataset: &Dataset,
    bounds: &Aabb,
    target: Target<'_>,
) -> Result<(RadianceFieldModel, Vec<LogEntry>)> {
    let inputs = ProtectInputs {
        base: field,
        bounds: *bounds,
        views: train_views(dataset),
        target,
    };
    train_adv_ft(field, &inputs, protect)
}

/// Naturalness and accuracy of one scene's renders.
pub fn classification_row(
    name: &str,
    classifier: &ClassifierModel,
    renders: &[RenderedImage],
    reference: &[RenderedImage],
    label: usize,
) -> Result<MetricRow> {
    if renders.is_empty() || renders.len() != reference.len() {
        return invalid("renders and references must be nonempty and paired");
    }
    let n = renders.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    for (a, b) in renders.iter().zip(reference) {
        p += crate::eval::cap_psnr(psnr(a, b)?);
        s += ssim(a, b)?;
    }
    let images: Vec<&RenderedImage> = renders.iter().collect();
    let acc = accuracy(&classifier.predict(&images)?, &vec![label; renders.len()])?;
    Ok(MetricRow {
        scene: name.to_string(),
        psnr_db: p / n,
        ssim: s / n,
        task: BTreeMap::from([("accuracy".to_string(), acc)]),
    })
}

/// Occupancy training data: analytic grids of random box scenes.
pub struct VoxelData {
    pub grids: Vec<(VoxelFeatureGrid, Array)>,
    pub train: usize,
}

pub fn voxel_data(config: &RunConfig) -> Result<VoxelData> {
    let v = &config.voxel;
    let scenes = box_scenes(v.train_scenes + v.test_scenes, config.seed ^ 0xb0c5)?;
    let grids = scenes
        .iter()
        .map(|s| {
            let spec = config.voxel_spec(s.bounds);
            Ok((
                extract_voxel_grid(s, None, &spec)?,
                occupancy_target(&s.occupancy_boxes(), &spec),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoxelData {
        grids,
        train: v.train_scenes,
    })
}

pub fn train_voxel_task(
    config: &RunConfig,
    data: &VoxelData,
) -> Result<(VoxelOccupancyModel, Vec<f64>)> {
    let train: Vec<(&VoxelFeatureGrid, &Array)> = data.grids[..data.train]
        .iter()
        .map(|(g, t)| (g, t))
        .collect();
    train_voxel_model(config.voxel.model, &train, &config.voxel.train)
}

pub fn mask(target: &Array) -> Vec<bool> {
    target.data().iter().map(|&v| v > 0.5).collect()
}

/// IoU and recall at overlap 0.25 / 0.5 of a model on one grid.
pub fn voxel_metrics(
    model: &VoxelOccupancyModel,
    grid: &VoxelFeatureGrid,
    target: &Array,
) -> Result<BTreeMap<String, f64>> {
    let pred = model.predict(grid)?;
    let truth = mask(target);
    Ok(BTreeMap::from([
        ("iou".to_string(), occupancy_iou(&pred, &truth)?),
        (
            "recall_25".to_string(),
            occupancy_recall(&pred, &truth, grid.resolution, 0.25)?,
        ),
        (
            "recall_50".to_string(),
            occupancy_recall(&pred, &truth, grid.resolution, 0.5)?,
        ),
    ]))
}

/// Mean IoU of a model over the held-out grids.
pub fn heldout_iou(model: &VoxelOccupancyModel, data: &VoxelData) -> Result<f64> {
    let test = &data.grids[data.train..];
    if test.is_empty() {
        return invalid("no held-out grids");
    }
    let mut total = 0.0;
    for (g, t) in test {
        total += occupancy_iou(&model.predict(g)?, &mask(t))?;
    }
    Ok(total / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut c = RunConfig::default();
        c.classifier.num_classes = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.voxel.scene = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.render_samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let c = RunConfig::default().with_seed(11);
        assert_eq!(
            [
                c.seed,
                c.scenes.rig.seed,
                c.field.seed,
                c.classifier_train.seed,
                c.voxel.train.seed,
                c.protect.seed
            ],
            [11; 6]
        );
    }

    #[test]
    fn voxel_grids_pair_features_and_targets() {
        let mut c = RunConfig::default();
        c.voxel.train_scenes = 2;
        c.voxel.test_scenes = 1;
        c.voxel.model.resolution = [6; 3];
        let data = voxel_data(&c).unwrap();
        assert_eq!(data.grids.len(), 3);
        assert_eq!(data.train, 2);
        for (g, t) in &data.grids {
            assert_eq!(g.resolution, [6; 3]);
            assert_eq!(t.len(), 216);
            assert!(mask(t).iter().any(|&v| v));
        }
    }

    #[test]
    fn classification_row_checks_pairing() {
        let clf = ClassifierModel::new(
            ClassifierConfig {
                patch: 4,
                hidden: 4,
                num_classes: 2,
                width: 12,
                height: 12,
            },
            0,
        )
        .unwrap();
        let img = RenderedImage::new(12, 12, vec![0.5; 432]).unwrap();
        assert!(classification_row("s", &clf, &[], &[], 0).is_err());
        assert!(classification_row("s", &clf, &[img.clone()], &[], 0).is_err());
        let row = classification_row("s", &clf, &[img.clone()], &[img], 0).unwrap();
        assert_eq!(row.psnr_db, crate::eval::PSNR_CAP_DB);
        assert_eq!(row.ssim, 1.0);
    }
}
