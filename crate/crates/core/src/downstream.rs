//! Toy downstream models: a patch-MLP image classifier and a per-cell voxel
//! occupancy model, plus their training loops.

use std::rc::Rc;

use diffcore::{Adam, AdamConfig, Array, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{meta_field, Container};
use crate::error::{invalid, Error, Result};
use crate::params::{Init, Linear, ParamStore};
use crate::render::{Aabb, RenderedImage, VoxelFeatureGrid, VoxelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Voxel,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Voxel => "voxel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub patch: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.hidden == 0 || self.num_classes < 2 {
            return invalid("classifier needs a patch size, hidden units and ≥ 2 classes");
        }
        if self.width % self.patch != 0 || self.height % self.patch != 0 {
            return invalid(format!(
                "{}×{} image is not divisible into {p}×{p} patches",
                self.width,
                self.height,
                p = self.patch
            ));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Flatten 8×8 (or `patch`×`patch`) patches → linear → ReLU → mean-pool →
/// linear logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    embed: Linear,
    head: Linear,
}

/// Flat indices that cut `batch` row-major `[H, W, 3]` images into
/// `[batch · patches, patch · patch · 3]` rows.
fn patch_index(cfg: &ClassifierConfig, batch: usize) -> Rc<[usize]> {
    let (w, h, p) = (cfg.width, cfg.height, cfg.patch);
    let mut idx = Vec::with_capacity(batch * w * h * 3);
    for b in 0..batch {
        for py in 0..h / p {
            for px in 0..w / p {
                for y in 0..p {
                    for x in 0..p {
                        let pixel = (py * p + y) * w + px * p + x;
                        for c in 0..3 {
                            idx.push(b * w * h * 3 + pixel * 3 + c);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

impl ClassifierModel {
    pub const KIND: &'static str = "classifier";

    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g = Init::GlorotUniform;
        let embed = Linear::new(
            &mut params,
            "embed",
            config.patch_dim(),
            config.hidden,
            g,
            &mut rng,
        );
        let head = Linear::new(
            &mut params,
            "head",
            config.hidden,
            config.num_classes,
            g,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            embed,
            head,
        })
    }

    pub fn modality(&self) -> Modality {
        Modality::Image
    }

    /// `images`: any shape holding `B` row-major `H×W×3` images. Returns `[B, C]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], images: Var) -> Result<Var> {
        let per = self.config.width * self.config.height * 3;
        let n: usize = tape.shape(images).iter().product();
        if n == 0 || n % per != 0 {
            return invalid(format!(
                "classifier expects {}×{} RGB images, got shape {:?}",
                self.config.width,
                self.config.height,
                tape.shape(images)
            ));
        }
        let batch = n / per;
        let patches = self.config.patches();
        let rows = tape.gather(
            images,
            patch_index(&self.config, batch),
            &[batch * patches, self.config.patch_dim()],
        )?;
        let centered = tape.add_scalar(rows, -0.5);
        let h = self.embed.forward(tape, vars, centered)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[batch, patches, self.config.hidden])?;
        let pooled = tape.sum_axis(h, 1)?;
        let pooled = tape.scale(pooled, 1.0 / patches as f64);
        Ok(self.head.forward(tape, vars, pooled)?)
    }

    /// Mean softmax cross-entropy; rejects out-of-range labels.
    pub fn loss(&self, tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        if let Some(bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return invalid(format!(
                "label {bad} outside {} classes",
                self.config.num_classes
            ));
        }
        Ok(tape.softmax_cross_entropy(logits, labels)?)
    }

    fn stack(&self, images: &[&RenderedImage]) -> Result<Array> {
        let mut data =
            Vec::with_capacity(images.len() * self.config.width * self.config.height * 3);
        for im in images {
            if (im.width, im.height) != (self.config.width, self.config.height) {
                return invalid(format!(
                    "image is {}×{}, classifier expects {}×{}",
                    im.width, im.height, self.config.width, self.config.height
                ));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Array::new(
            vec![images.len(), self.config.height, self.config.width, 3],
            data,
        )?)
    }

    /// `[B, C]` logits.
    pub fn logits(&self, images: &[&RenderedImage]) -> Result<Array> {
        let mut tape = Tape::new();
        let x = tape.constant(self.stack(images)?);
        let vars = self.params.bind(&mut tape, false);
        let z = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, images: &[&RenderedImage]) -> Result<Vec<usize>> {
        let z = self.logits(images)?;
        Ok(argmax_rows(&z))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND, json!({ "config": self.config }));
        self.params.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let mut m = Self::new(meta_field(&c.meta, "config")?, 0)?;
        m.params.read_from(c, "")?;
        Ok(m)
    }
}

pub fn argmax_rows(z: &Array) -> Vec<usize> {
    let c = *z.shape().last().unwrap_or(&1);
    z.data()
        .chunks(c.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DownstreamTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            detail: format!("training loss became {loss}"),
        })
    }
}

/// Mini-batch Adam on softmax cross-entropy; returns the model and per-epoch
/// mean losses.
pub fn train_classifier(
    config: ClassifierConfig,
    data: &[(&RenderedImage, usize)],
    train: &DownstreamTrainConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    let mut labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return invalid("classifier training needs examples from at least two classes");
    }
    if train.batch_size == 0 || train.epochs == 0 {
        return invalid("epochs and batch size must be positive");
    }
    let mut model = ClassifierModel::new(config, train.seed)?;
    let steps = train.epochs * data.len().div_ceil(train.batch_size);
    let mut adam = Adam::new(
        AdamConfig {
            lr: train.lr,
            total_steps: steps,
            ..AdamConfig::default()
        },
        model.params.values(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let images: Vec<&RenderedImage> = batch.iter().map(|&i| data[i].0).collect();
            let y: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let mut tape = Tape::new();
            let x = tape.constant(model.stack(&images)?);
            let vars = model.params.bind(&mut tape, true);
            let z = model.forward(&mut tape, &vars, x)?;
            let loss = model.loss(&mut tape, z, &y)?;
            let lv = tape.value(loss).data()[0];
            check_loss(step, lv)?;
            let grads = tape.backward(loss)?;
            let g = ParamStore::collect_grads(&grads, &vars);
            let refs: Vec<&Array> = g.iter().collect();
            adam.step(model.params.values_mut(), &refs)?;
            total += lv * batch.len() as f64;
            step += 1;
        }
        history.push(total / data.len() as f64);
    }
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelModelConfig {
    pub resolution: [usize; 3],
    pub hidden: usize,
    /// Density enters the network as `tanh(density_scale · σ)`.
    pub density_scale: f64,
}

impl Default for VoxelModelConfig {
    fn default() -> Self {
        Self {
            resolution: [16; 3],
            hidden: 32,
            density_scale: 0.1,
        }
    }
}

/// Per-cell MLP over `(c, σ)` and its 3×3×3 neighborhood mean.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelOccupancyModel {
    pub config: VoxelModelConfig,
    pub params: ParamStore,
    hidden: Linear,
    out: Linear,
}

/// For each cell, the 27 neighbor cells with edge replication.
fn neighborhood_index(res: [usize; 3]) -> Rc<[usize]> {
    let [nx, ny, nz] = res;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut idx = Vec::with_capacity(nx * ny * nz * 27 * 4);
    for x in 0..nx as isize {
        for y in 0..ny as isize {
            for z in 0..nz as isize {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let cell = (clamp(x + dx, nx) * ny + clamp(y + dy, ny)) * nz
                                + clamp(z + dz, nz);
                            idx.extend((0..4).map(|k| cell * 4 + k));
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

impl VoxelOccupancyModel {
    pub const KIND: &'static str = "voxel_occupancy";

    pub fn new(config: VoxelModelConfig, seed: u64) -> Result<Self> {
        if config.resolution.contains(&0) || config.hidden == 0 || !(config.density_scale > 0.0) {
            return invalid("voxel model needs a resolution, hidden units and a positive scale");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g = Init::GlorotUniform;
        let hidden = Linear::new(&mut params, "hidden", 8, config.hidden, g, &mut rng);
        let out = Linear::new(&mut params, "out", config.hidden, 1, g, &mut rng);
        Ok(Self {
            config,
            params,
            hidden,
            out,
        })
    }

    pub fn modality(&self) -> Modality {
        Modality::Voxel
    }

    pub fn cells(&self) -> usize {
        self.config.resolution.iter().product()
    }

    /// `features: [C, 4]` rows of `(r, g, b, σ)`; returns `[C, 1]` logits.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        let c = self.cells();
        if tape.shape(features) != [c, 4] {
            return invalid(format!(
                "voxel model expects [{c}, 4] features for resolution {:?}, got {:?}",
                self.config.resolution,
                tape.shape(features)
            ));
        }
        let color = tape.slice_last(features, 0, 3)?;
        let sigma = tape.slice_last(features, 3, 4)?;
        let sigma = tape.scale(sigma, self.config.density_scale);
        let sigma = tape.tanh(sigma);
        let f = tape.concat(&[color, sigma])?;
        let nb = tape.gather(f, neighborhood_index(self.config.resolution), &[c, 27, 4])?;
        let nb = tape.sum_axis(nb, 1)?;
        let nb = tape.scale(nb, 1.0 / 27.0);
        let x = tape.concat(&[f, nb])?;
        let h = self.hidden.forward(tape, vars, x)?;
        let h = tape.relu(h);
        Ok(self.out.forward(tape, vars, h)?)
    }

    /// Mean binary cross-entropy `softplus(z) − y·z` against a `[C, 1]` target.
    pub fn loss(&self, tape: &mut Tape, logits: Var, target: &Array) -> Result<Var> {
        bce_with_logits(tape, logits, target)
    }

    pub fn logits(&self, grid: &VoxelFeatureGrid) -> Result<Array> {
        if grid.resolution != self.config.resolution {
            return invalid(format!(
                "grid resolution {:?} does not match model resolution {:?}",
                grid.resolution, self.config.resolution
            ));
        }
        let mut tape = Tape::new();
        let f = tape.constant(grid.features.clone());
        let vars = self.params.bind(&mut tape, false);
        let z = self.forward(&mut tape, &vars, f)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, grid: &VoxelFeatureGrid) -> Result<Vec<bool>> {
        Ok(self.logits(grid)?.data().iter().map(|&z| z > 0.0).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND, json!({ "config": self.config }));
        self.params.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let mut m = Self::new(meta_field(&c.meta, "config")?, 0)?;
        m.params.read_from(c, "")?;
        Ok(m)
    }
}

pub fn bce_with_logits(tape: &mut Tape, logits: Var, target: &Array) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return invalid(format!(
            "occupancy target {:?} does not match logits {:?}",
            target.shape(),
            tape.shape(logits)
        ));
    }
    if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return invalid("occupancy targets must be 0 or 1");
    }
    let sp = tape.softplus(logits);
    let y = tape.constant(target.clone());
    let yz = tape.mul(y, logits)?;
    let l = tape.sub(sp, yz)?;
    Ok(tape.mean(l)?)
}

/// `[C, 1]` target: 1 where the cell center lies inside any box.
pub fn occupancy_target(boxes: &[Aabb], spec: &VoxelSpec) -> Array {
    let centers = spec.bounds.cell_centers(spec.resolution);
    let data = centers
        .iter()
        .map(|c| f64::from(boxes.iter().any(|b| b.contains(*c))))
        .collect();
    Array::new(vec![centers.len(), 1], data).expect("sized")
}

/// Full-batch Adam on mean BCE over every training grid.
pub fn train_voxel_model(
    config: VoxelModelConfig,
    data: &[(&VoxelFeatureGrid, &Array)],
    train: &DownstreamTrainConfig,
) -> Result<(VoxelOccupancyModel, Vec<f64>)> {
    if data.is_empty() || train.epochs == 0 {
        return invalid("voxel training needs grids and at least one epoch");
    }
    let mut model = VoxelOccupancyModel::new(config, train.seed)?;
    for (g, t) in data {
        if g.resolution != config.resolution || t.shape() != [model.cells(), 1] {
            return invalid("training grid resolution does not match the model");
        }
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: train.lr,
            total_steps: train.epochs,
            ..AdamConfig::default()
        },
        model.params.values(),
    );
    let mut history = Vec::with_capacity(train.epochs);
    for step in 0..train.epochs {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true);
        let mut losses = Vec::with_capacity(data.len());
        for (g, t) in data {
            let f = tape.constant(g.features.clone());
            let z = model.forward(&mut tape, &vars, f)?;
            losses.push(model.loss(&mut tape, z, t)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, 1.0 / data.len() as f64);
        let lv = tape.value(total).data()[0];
        check_loss(step, lv)?;
        let grads = tape.backward(total)?;
        let g = ParamStore::collect_grads(&grads, &vars);
        let refs: Vec<&Array> = g.iter().collect();
        adam.step(model.params.values_mut(), &refs)?;
        history.push(lv);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::finite_difference_check_subset;
    use proptest::prelude::*;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            patch: 4,
            hidden: 6,
            num_classes: 4,
            width: 8,
            height: 8,
        }
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let m = ClassifierModel::new(small(), 0).unwrap();
        let mut t = Tape::new();
        let z = t.constant(Array::zeros(&[3, 4]));
        let l = m.loss(&mut t, z, &[0, 1, 3]).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        let z = t.constant(Array::new(vec![1, 4], vec![0.0, 800.0, 0.0, 0.0]).unwrap());
        let l = m.loss(&mut t, z, &[1]).unwrap();
        assert!(t.value(l).data()[0] < 1e-300);
        assert!(m.loss(&mut t, z, &[4]).is_err());
    }

    #[test]
    fn patches_cover_each_pixel_once() {
        let cfg = small();
        let idx = patch_index(&cfg, 2);
        let mut seen = idx.to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..2 * 8 * 8 * 3).collect::<Vec<_>>());
        // first patch row is the first 4 pixels of image row 0
        assert_eq!(&idx[..12], &(0..12).collect::<Vec<_>>()[..]);
        assert_eq!(idx[12], 8 * 3);
    }

    #[test]
    fn classifier_input_gradient() {
        let m = ClassifierModel::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array::new(
            vec![8, 8, 3],
            (0..192)
                .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
                .collect(),
        )
        .unwrap();
        let r = finite_difference_check_subset(
            |t, p| {
                let vars = m.params.bind(t, false);
                let z = m.forward(t, &vars, p[0])?;
                Ok(m.loss(t, z, &[2])?)
            },
            &[img],
            1e-4,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn non_divisible_image_rejected() {
        let cfg = ClassifierConfig {
            width: 10,
            ..small()
        };
        assert!(ClassifierModel::new(cfg, 0).is_err());
    }

    #[test]
    fn single_class_training_rejected() {
        let im = RenderedImage::filled(8, 8, 0.5);
        let data = vec![(&im, 0), (&im, 0)];
        assert!(train_classifier(small(), &data, &DownstreamTrainConfig::default()).is_err());
    }

    #[test]
    fn classifier_training_is_seed_deterministic() {
        let a = RenderedImage::filled(8, 8, 0.2);
        let b = RenderedImage::filled(8, 8, 0.8);
        let data = vec![(&a, 0), (&b, 1), (&a, 0), (&b, 1)];
        let cfg = DownstreamTrainConfig {
            epochs: 20,
            batch_size: 2,
            lr: 1e-2,
            seed: 4,
        };
        let (m1, h1) = train_classifier(small(), &data, &cfg).unwrap();
        let (m2, _) = train_classifier(small(), &data, &cfg).unwrap();
        assert_eq!(m1.params.checksum(), m2.params.checksum());
        assert!(h1.last().unwrap() < &h1[0]);
        assert_eq!(m1.predict(&[&a, &b]).unwrap(), vec![0, 1]);
        let back = ClassifierModel::from_container(&m1.to_container()).unwrap();
        assert_eq!(back, m1);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(row in proptest::collection::vec(-50.0f64..50.0, 2..10)) {
            let p = softmax(&row);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    fn tiny_voxel() -> VoxelModelConfig {
        VoxelModelConfig {
            resolution: [2, 3, 2],
            hidden: 5,
            density_scale: 0.1,
        }
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let z = t.constant(Array::zeros(&[4, 1]));
        let y = Array::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = bce_with_logits(&mut t, z, &y).unwrap();
        assert!((t.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let z = t.constant(Array::new(vec![4, 1], vec![-60.0, 60.0, 60.0, -60.0]).unwrap());
        let l = bce_with_logits(&mut t, z, &y).unwrap();
        assert!(t.value(l).data()[0] < 1e-25);
        let wrong = Array::zeros(&[3, 1]);
        assert!(bce_with_logits(&mut t, z, &wrong).is_err());
    }

    #[test]
    fn voxel_density_gradient() {
        let m = VoxelOccupancyModel::new(tiny_voxel(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Array::new(
            vec![12, 4],
            (0..48)
                .map(|_| rand::Rng::random_range(&mut rng, 0.0..3.0))
                .collect(),
        )
        .unwrap();
        let target = Array::new(
            vec![12, 1],
            (0..12).map(|i| f64::from(i % 3 == 0)).collect(),
        )
        .unwrap();
        let r = finite_difference_check_subset(
            |t, p| {
                let vars = m.params.bind(t, false);
                let z = m.forward(t, &vars, p[0])?;
                Ok(m.loss(t, z, &target)?)
            },
            &[feats],
            1e-4,
            48,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn neighborhood_of_interior_cell() {
        let idx = neighborhood_index([3, 3, 3]);
        let center = 13;
        let cells: Vec<usize> = idx[center * 108..(center + 1) * 108]
            .chunks(4)
            .map(|c| c[0] / 4)
            .collect();
        assert_eq!(cells, (0..27).collect::<Vec<_>>());
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let m = VoxelOccupancyModel::new(tiny_voxel(), 2).unwrap();
        let grid = VoxelFeatureGrid {
            bounds: Aabb::cube(1.0),
            resolution: [2, 2, 2],
            features: Array::zeros(&[8, 4]),
        };
        assert!(m.logits(&grid).is_err());
    }
}
