use std::path::{Path, PathBuf};

use radguard::checkpoint::Container;
use radguard::downstream::{occupancy_target, ClassifierModel, VoxelOccupancyModel};
use radguard::eval::{accuracy, apply_transform, cap_psnr, psnr, transfer_matrix, MetricReport};
use radguard::fields::RadianceFieldModel;
use radguard::fit::{fit_field, write_fit_log, FitState};
use radguard::pipeline::{
    build_datasets, classification_row, fit_scene, heldout_iou, protect_scene, render_test_views,
    train_bank_classifier, train_views, train_voxel_task, voxel_data, voxel_metrics, RunConfig,
};
use radguard::protect::{write_log_csv, ProtectionBundle, Target};
use radguard::render::{extract_voxel_grid, Perturber, RenderedImage};
use radguard::scenes::{load_bank, save_bank, AnalyticScene, Dataset};

use crate::{config, CliError};

pub struct Run {
    pub config: RunConfig,
    pub root: PathBuf,
    pub force: bool,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Validation(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io(path))
}

impl Run {
    /// Creates a fresh artifact directory holding the resolved config.
    /// An existing nonempty directory is only replaced under `--force`.
    fn stage(&self, name: &str) -> Result<PathBuf, CliError> {
        let dir = self.root.join(name);
        let occupied = std::fs::read_dir(&dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied {
            if !self.force {
                return Err(CliError::Validation(format!(
                    "{} already exists; pass --force to overwrite it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        write(&dir.join("config.toml"), &config::render(&self.config)?)?;
        Ok(dir)
    }

    fn bank(&self) -> Result<Vec<AnalyticScene>, CliError> {
        let bank = load_bank(&self.root.join("scenes/bank.json"))?;
        if bank.len() != self.config.scenes.num_classes {
            return Err(CliError::Validation(format!(
                "scene bank holds {} scenes, config expects {}",
                bank.len(),
                self.config.scenes.num_classes
            )));
        }
        Ok(bank)
    }

    fn datasets(&self, bank: &[AnalyticScene]) -> Result<Vec<Dataset>, CliError> {
        (0..bank.len())
            .map(|k| Ok(Dataset::load(&self.root.join(format!("scenes/class_{k}")))?))
            .collect()
    }

    fn fields(&self, count: usize) -> Result<Vec<RadianceFieldModel>, CliError> {
        (0..count)
            .map(|k| {
                Ok(FitState::load(
                    self.root.join(format!("fields/field_{k}.rgck")),
                    &self.config.field,
                )?
                .model)
            })
            .collect()
    }

    fn classifier(&self) -> Result<ClassifierModel, CliError> {
        Ok(ClassifierModel::from_container(&Container::load(
            self.root.join("downstream/classifier.rgck"),
        )?)?)
    }

    fn voxel_model(&self) -> Result<VoxelOccupancyModel, CliError> {
        Ok(VoxelOccupancyModel::from_container(&Container::load(
            self.root.join("downstream/voxel.rgck"),
        )?)?)
    }

    fn bundles(&self, fields: &[RadianceFieldModel]) -> Result<Vec<ProtectionBundle>, CliError> {
        fields
            .iter()
            .enumerate()
            .map(|(k, f)| {
                Ok(ProtectionBundle::load(
                    self.root.join(format!("protection/bundle_{k}.rgck")),
                    f,
                )?)
            })
            .collect()
    }
}

pub fn scene_gen(run: &Run) -> Result<(), CliError> {
    let dir = run.stage("scenes")?;
    let bank = run.config.bank()?;
    let datasets = build_datasets(&run.config, &bank)?;
    save_bank(&bank, &dir.join("bank.json"))?;
    for (k, d) in datasets.iter().enumerate() {
        d.save(&dir.join(format!("class_{k}")))?;
    }
    println!(
        "wrote {} scenes with {} views each to {}",
        bank.len(),
        run.config.scenes.rig.n_views,
        dir.display()
    );
    Ok(())
}

fn mean_psnr(renders: &[RenderedImage], truth: &[&RenderedImage]) -> Result<f64, CliError> {
    let mut total = 0.0;
    for (a, b) in renders.iter().zip(truth) {
        total += cap_psnr(psnr(a, b)?);
    }
    Ok(total / renders.len() as f64)
}

/// With `resume`, existing checkpoints continue training up to the
/// configured step count instead of starting over.
pub fn train_field(run: &Run, resume: bool) -> Result<(), CliError> {
    let bank = run.bank()?;
    let datasets = run.datasets(&bank)?;
    let dir = if resume {
        let dir = run.root.join("fields");
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        write(&dir.join("config.toml"), &config::render(&run.config)?)?;
        dir
    } else {
        run.stage("fields")?
    };
    let cfg = &run.config;
    for (k, (scene, data)) in bank.iter().zip(&datasets).enumerate() {
        let path = dir.join(format!("field_{k}.rgck"));
        let (state, log) = if resume && path.exists() {
            let mut state = FitState::load(&path, &cfg.field)?;
            let log = fit_field(&mut state, &train_views(data), &scene.bounds, &cfg.field)?;
            (state, log)
        } else {
            fit_scene(cfg, data, scene)?
        };
        state.save(&path)?;
        write_fit_log(dir.join(format!("log_{k}.csv")), &log)?;
        let views: Vec<_> = data.train_views().collect();
        let renders = views
            .iter()
            .map(|v| {
                radguard::render::render_image(
                    &state.model,
                    None,
                    &v.camera,
                    &scene.bounds,
                    &cfg.sampling(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let truth: Vec<&RenderedImage> = views.iter().map(|v| &v.image).collect();
        println!(
            "scene {k}: step {} train PSNR {:.2} dB",
            state.step(),
            mean_psnr(&renders, &truth)?
        );
    }
    Ok(())
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    write(path, &s)
}

pub fn train_downstream(run: &Run) -> Result<(), CliError> {
    let bank = run.bank()?;
    let datasets = run.datasets(&bank)?;
    let dir = run.stage("downstream")?;
    let (classifier, losses) = train_bank_classifier(&run.config, &datasets)?;
    classifier
        .to_container()
        .save(dir.join("classifier.rgck"))?;
    write_losses(&dir.join("classifier_loss.csv"), &losses)?;
    let (images, labels): (Vec<&RenderedImage>, Vec<usize>) = datasets
        .iter()
        .flat_map(|d| d.test_views().map(move |v| (&v.image, d.label)))
        .unzip();
    let clean = accuracy(&classifier.predict(&images)?, &labels)?;

    let data = voxel_data(&run.config)?;
    let (voxel, losses) = train_voxel_task(&run.config, &data)?;
    voxel.to_container().save(dir.join("voxel.rgck"))?;
    write_losses(&dir.join("voxel_loss.csv"), &losses)?;
    let iou = heldout_iou(&voxel, &data)?;
    let gates = serde_json::json!({ "classifier_test_accuracy": clean, "voxel_heldout_iou": iou });
    write(
        &dir.join("gates.json"),
        &serde_json::to_string_pretty(&gates).expect("json"),
    )?;
    println!("classifier test accuracy {clean:.3}, voxel held-out IoU {iou:.3}");
    Ok(())
}

pub fn protect(run: &Run) -> Result<(), CliError> {
    let bank = run.bank()?;
    let datasets = run.datasets(&bank)?;
    let fields = run.fields(bank.len())?;
    let classifier = run.classifier()?;
    let voxel = run.voxel_model()?;
    let dir = run.stage("protection")?;
    let cfg = &run.config;
    for (k, ((scene, data), field)) in bank.iter().zip(&datasets).zip(&fields).enumerate() {
        let target = Target::Classifier {
            model: &classifier,
            label: data.label,
        };
        let (bundle, log) = protect_scene(&cfg.protect, field, data, &scene.bounds, target)?;
        bundle.save(dir.join(format!("bundle_{k}.rgck")))?;
        write_log_csv(dir.join(format!("log_{k}.csv")), &log)?;
        println!(
            "scene {k}: final loss {:.4}",
            log.last().map_or(f64::NAN, |e| e.loss)
        );
    }
    let k = cfg.voxel.scene;
    let spec = cfg.voxel_spec(bank[k].bounds);
    let occupancy = occupancy_target(&bank[k].occupancy_boxes(), &spec);
    let mut pc = cfg.protect.clone();
    pc.lambda_pro = cfg.voxel.lambda_pro;
    let target = Target::Voxel {
        model: &voxel,
        spec,
        occupancy: &occupancy,
    };
    let (bundle, log) = protect_scene(&pc, &fields[k], &datasets[k], &bank[k].bounds, target)?;
    bundle.save(dir.join("voxel_bundle.rgck"))?;
    write_log_csv(dir.join("voxel_log.csv"), &log)?;
    println!(
        "voxel pathway on scene {k}: final loss {:.4}",
        log.last().map_or(f64::NAN, |e| e.loss)
    );
    Ok(())
}

pub fn render(run: &Run, protected: bool) -> Result<(), CliError> {
    let bank = run.bank()?;
    let datasets = run.datasets(&bank)?;
    let fields = run.fields(bank.len())?;
    let bundles = if protected {
        Some(run.bundles(&fields)?)
    } else {
        None
    };
    let dir = run.stage(if protected {
        "renders_on"
    } else {
        "renders_off"
    })?;
    for k in 0..bank.len() {
        let perturber = bundles.as_ref().map(|b| &b[k] as &dyn Perturber);
        let renders = render_test_views(
            &run.config,
            &fields[k],
            perturber,
            &datasets[k],
            &bank[k].bounds,
        )?;
        let scene_dir = dir.join(format!("scene_{k}"));
        std::fs::create_dir_all(&scene_dir).map_err(io(&scene_dir))?;
        for (i, img) in renders.iter().enumerate() {
            img.write_ppm(scene_dir.join(format!("view_{i:03}.ppm")))?;
        }
    }
    println!("wrote renders to {}", dir.display());
    Ok(())
}

/// Clean and protected test renders of every scene.
struct Renders {
    truth: Vec<Vec<RenderedImage>>,
    clean: Vec<Vec<RenderedImage>>,
    protected: Vec<Vec<RenderedImage>>,
    labels: Vec<usize>,
}

fn renders(
    run: &Run,
) -> Result<
    (
        Vec<AnalyticScene>,
        Vec<Dataset>,
        Vec<RadianceFieldModel>,
        Renders,
    ),
    CliError,
> {
    let bank = run.bank()?;
    let datasets = run.datasets(&bank)?;
    let fields = run.fields(bank.len())?;
    let bundles = run.bundles(&fields)?;
    let mut r = Renders {
        truth: Vec::new(),
        clean: Vec::new(),
        protected: Vec::new(),
        labels: Vec::new(),
    };
    for k in 0..bank.len() {
        let (f, d, b) = (&fields[k], &datasets[k], &bank[k].bounds);
        r.truth
            .push(d.test_views().map(|v| v.image.clone()).collect());
        r.clean.push(render_test_views(&run.config, f, None, d, b)?);
        r.protected
            .push(render_test_views(&run.config, f, Some(&bundles[k]), d, b)?);
        r.labels.push(d.label);
    }
    Ok((bank, datasets, fields, r))
}

fn config_json(config: &RunConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

/// Table-shaped report: naturalness and accuracy per scene for the
/// classifier, and occupancy metrics for the voxel pathway.
pub fn eval(run: &Run) -> Result<(), CliError> {
    let classifier = run.classifier()?;
    let voxel = run.voxel_model()?;
    let (bank, datasets, fields, r) = renders(run)?;
    let dir = run.stage("eval")?;
    let cfg = &run.config;

    let mut rows = Vec::new();
    for k in 0..bank.len() {
        let mut row = classification_row(
            &format!("scene_{k}"),
            &classifier,
            &r.protected[k],
            &r.clean[k],
            r.labels[k],
        )?;
        let clean =
            classification_row("clean", &classifier, &r.clean[k], &r.truth[k], r.labels[k])?;
        let truth: Vec<&RenderedImage> = r.truth[k].iter().collect();
        row.task
            .insert("clean_accuracy".into(), clean.task["accuracy"]);
        row.task.insert("clean_psnr_vs_truth".into(), clean.psnr_db);
        row.task.insert(
            "protected_psnr_vs_truth".into(),
            mean_psnr(&r.protected[k], &truth)?,
        );
        rows.push(row);
    }
    let report = MetricReport::new(config_json(cfg), rows);
    report.save(&dir, "classification")?;
    let agg = report.aggregate()?;
    println!(
        "classification: PSNR {:.2} dB, SSIM {:.3}, accuracy {:.3} (clean {:.3})",
        agg.psnr_db, agg.ssim, agg.task["accuracy"], agg.task["clean_accuracy"]
    );

    let k = cfg.voxel.scene;
    let field = &fields[k];
    let bundle = ProtectionBundle::load(run.root.join("protection/voxel_bundle.rgck"), field)?;
    let spec = cfg.voxel_spec(bank[k].bounds);
    let occupancy = occupancy_target(&bank[k].occupancy_boxes(), &spec);
    let clean_grid = extract_voxel_grid(field, None, &spec)?;
    let grid = extract_voxel_grid(field, Some(&bundle), &spec)?;
    let mut task = voxel_metrics(&voxel, &grid, &occupancy)?;
    for (name, v) in voxel_metrics(&voxel, &clean_grid, &occupancy)? {
        task.insert(format!("clean_{name}"), v);
    }
    let protected = render_test_views(cfg, field, Some(&bundle), &datasets[k], &bank[k].bounds)?;
    let mut row = classification_row(
        &format!("scene_{k}"),
        &classifier,
        &protected,
        &r.clean[k],
        r.labels[k],
    )?;
    row.task = task;
    let report = MetricReport::new(config_json(cfg), vec![row.clone()]);
    report.save(&dir, "voxel")?;
    println!(
        "voxel: PSNR {:.2} dB, IoU {:.3} (clean {:.3})",
        row.psnr_db, row.task["iou"], row.task["clean_iou"]
    );
    Ok(())
}

/// Accuracy of the protection target and of independently trained
/// classifiers on the same protected renders.
pub fn transfer_eval(run: &Run) -> Result<(), CliError> {
    let classifier = run.classifier()?;
    let (_, datasets, _, r) = renders(run)?;
    let dir = run.stage("transfer")?;
    let cfg = &run.config;
    let mut extra = Vec::new();
    for (j, &hidden) in cfg.eval.transfer_hidden.iter().enumerate() {
        let mut c = cfg.clone();
        c.classifier.hidden = hidden;
        c.classifier_train.seed = cfg.classifier_train.seed.wrapping_add(1 + j as u64);
        extra.push(train_bank_classifier(&c, &datasets)?.0);
    }
    let mut targets = vec![&classifier];
    targets.extend(extra.iter());
    let pair = |sets: &[Vec<RenderedImage>]| -> Vec<(RenderedImage, usize)> {
        sets.iter()
            .zip(&r.labels)
            .flat_map(|(s, &l)| s.iter().map(move |img| (img.clone(), l)))
            .collect()
    };
    let matrix = transfer_matrix(&[pair(&r.protected), pair(&r.clean)], &targets)?;
    let mut s = format!("renders,target_hidden_{}", cfg.classifier.hidden);
    for h in &cfg.eval.transfer_hidden {
        s.push_str(&format!(",hidden_{h}"));
    }
    s.push('\n');
    for (name, row) in ["protected", "clean"].iter().zip(&matrix) {
        s.push_str(name);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    write(&dir.join("transfer.csv"), &s)?;
    print!("{s}");
    Ok(())
}

/// Classifier accuracy after image transformations of the renders.
pub fn robustness_eval(run: &Run) -> Result<(), CliError> {
    let classifier = run.classifier()?;
    let (_, _, _, r) = renders(run)?;
    let dir = run.stage("robustness")?;
    let cfg = &run.config;
    let mut s = String::from("transform,clean_accuracy,protected_accuracy\n");
    for spec in &cfg.eval.transforms {
        let mut acc = [0.0; 2];
        for (slot, sets) in [&r.clean, &r.protected].into_iter().enumerate() {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for (k, set) in sets.iter().enumerate() {
                for (i, img) in set.iter().enumerate() {
                    let seed = cfg.seed ^ ((k as u64) << 32 | i as u64);
                    images.push(apply_transform(img, spec, seed)?);
                    labels.push(r.labels[k]);
                }
            }
            let refs: Vec<&RenderedImage> = images.iter().collect();
            acc[slot] = accuracy(&classifier.predict(&refs)?, &labels)?;
        }
        s.push_str(&format!("{},{},{}\n", spec.name(), acc[0], acc[1]));
    }
    write(&dir.join("robustness.csv"), &s)?;
    print!("{s}");
    Ok(())
}
