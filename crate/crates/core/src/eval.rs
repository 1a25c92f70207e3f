//! Image metrics, occupancy metrics, robustness transforms and reports.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::ClassifierModel;
use crate::error::{invalid, io_err, Result};
use crate::render::RenderedImage;

/// Value written in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_size(a: &RenderedImage, b: &RenderedImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return invalid(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        ));
    }
    Ok(())
}

pub fn mse(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    same_size(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

fn luma(img: &RenderedImage) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over luma with an 11×11 Gaussian window (`σ = 1.5`),
/// evaluated at every window position that fits inside the image.
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    same_size(a, b)?;
    const WIN: usize = 11;
    if a.width < WIN || a.height < WIN {
        return invalid(format!("SSIM needs at least {WIN}×{WIN} images"));
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let k = gaussian_kernel(1.5, WIN / 2);
    let (x, y) = (luma(a), luma(b));
    let w = a.width;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.height - WIN {
        for c0 in 0..=w - WIN {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let g = k[i] * k[j];
                    let p = (r0 + i) * w + c0 + j;
                    mx += g * x[p];
                    my += g * y[p];
                    xx += g * (x[p] * x[p]);
                    yy += g * (y[p] * y[p]);
                    xy += g * (x[p] * y[p]);
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return invalid("accuracy over an empty test set");
    }
    if predicted.len() != labels.len() {
        return invalid("prediction and label counts differ");
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Intersection over union of two occupancy masks; two empty masks score 1.
pub fn occupancy_iou(predicted: &[bool], target: &[bool]) -> Result<f64> {
    if target.is_empty() {
        return invalid("IoU over an empty grid");
    }
    if predicted.len() != target.len() {
        return invalid("occupancy masks differ in size");
    }
    let inter = predicted
        .iter()
        .zip(target)
        .filter(|(p, t)| **p && **t)
        .count();
    let union = predicted
        .iter()
        .zip(target)
        .filter(|(p, t)| **p || **t)
        .count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 6-connected components of a mask on a grid with `x` slowest.
pub fn connected_components(mask: &[bool], resolution: [usize; 3]) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = resolution;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(c) = queue.pop_front() {
            comp.push(c);
            let (x, y, z) = (c / (ny * nz), (c / nz) % ny, c % nz);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                visit(c - ny * nz);
            }
            if x + 1 < nx {
                visit(c + ny * nz);
            }
            if y > 0 {
                visit(c - nz);
            }
            if y + 1 < ny {
                visit(c + nz);
            }
            if z > 0 {
                visit(c - 1);
            }
            if z + 1 < nz {
                visit(c + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Fraction of target components matched by some predicted component with
/// IoU at least `threshold`. With no target objects the recall is 1.
pub fn occupancy_recall(
    predicted: &[bool],
    target: &[bool],
    resolution: [usize; 3],
    threshold: f64,
) -> Result<f64> {
    let cells: usize = resolution.iter().product();
    if predicted.len() != cells || target.len() != cells {
        return invalid("occupancy masks do not match the grid resolution");
    }
    let truth = connected_components(target, resolution);
    if truth.is_empty() {
        return Ok(1.0);
    }
    let pred = connected_components(predicted, resolution);
    let hit = truth
        .iter()
        .filter(|t| pred.iter().any(|p| set_iou(t, p) >= threshold))
        .count();
    Ok(hit as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    GaussianNoise {
        variance: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
    /// Removes `fraction` of each dimension from every margin.
    CropMargins {
        fraction: f64,
    },
    DownUp {
        factor: f64,
    },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::GaussianNoise { variance } if !(variance >= 0.0) => {
                invalid("noise variance must be nonnegative")
            }
            TransformSpec::GaussianBlur { sigma } if !(sigma >= 0.0) => {
                invalid("blur sigma must be nonnegative")
            }
            TransformSpec::CropMargins { fraction } if !(0.0..0.5).contains(&fraction) => {
                invalid(format!("crop fraction {fraction} must lie in [0, 0.5)"))
            }
            TransformSpec::DownUp { factor } if !(factor >= 1.0) => {
                invalid("resampling factor must be at least 1")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TransformSpec::GaussianNoise { variance } => format!("noise_{variance}"),
            TransformSpec::GaussianBlur { sigma } => format!("blur_{sigma}"),
            TransformSpec::CropMargins { fraction } => format!("crop_{fraction}"),
            TransformSpec::DownUp { factor } => format!("down_up_{factor}"),
        }
    }
}

/// Bilinear resample of the window `[x0, x1] × [y0, y1]` (pixel-center
/// coordinates) onto a `w × h` grid, corners aligned.
fn resample(img: &RenderedImage, window: [f64; 4], w: usize, h: usize) -> RenderedImage {
    let [x0, x1, y0, y1] = window;
    let at = |i: usize, n: usize, lo: f64, hi: f64| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for r in 0..h {
        let y = at(r, h, y0, y1).clamp(0.0, (img.height - 1) as f64);
        let ya = y.floor() as usize;
        let yb = (ya + 1).min(img.height - 1);
        let fy = y - ya as f64;
        for c in 0..w {
            let x = at(c, w, x0, x1).clamp(0.0, (img.width - 1) as f64);
            let xa = x.floor() as usize;
            let xb = (xa + 1).min(img.width - 1);
            let fx = x - xa as f64;
            for k in 0..3 {
                let p = |xx: usize, yy: usize| img.data[(yy * img.width + xx) * 3 + k];
                let top = p(xa, ya) + (p(xb, ya) - p(xa, ya)) * fx;
                let bot = p(xa, yb) + (p(xb, yb) - p(xa, yb)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    RenderedImage {
        width: w,
        height: h,
        data,
    }
}

fn blur(img: &RenderedImage, sigma: f64) -> RenderedImage {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma, radius);
    let (w, h) = (img.width, img.height);
    // Weighted sum of differences from the center pixel keeps flat regions exact.
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let center = src[(r * w + c) * 3 + ch];
                    let mut acc = 0.0;
                    for (i, wk) in k.iter().enumerate() {
                        let off = i as isize - radius as isize;
                        let (rr, cc) = if horizontal {
                            (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                        } else {
                            ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                        };
                        acc += wk * (src[(rr as usize * w + cc as usize) * 3 + ch] - center);
                    }
                    out[(r * w + c) * 3 + ch] = center + acc;
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    RenderedImage {
        width: w,
        height: h,
        data: pass(&tmp, false),
    }
}

/// Applies a transform; the result is clipped to `[0, 1]`.
pub fn apply_transform(
    img: &RenderedImage,
    spec: &TransformSpec,
    seed: u64,
) -> Result<RenderedImage> {
    spec.validate()?;
    let (w, h) = (img.width, img.height);
    let mut out = match *spec {
        TransformSpec::GaussianNoise { variance } => {
            let mut out = img.clone();
            if variance > 0.0 {
                let normal = Normal::new(0.0, variance.sqrt()).expect("finite deviation");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for v in &mut out.data {
                    *v += normal.sample(&mut rng);
                }
            }
            out
        }
        TransformSpec::GaussianBlur { sigma } => blur(img, sigma),
        TransformSpec::CropMargins { fraction } => {
            let mx = fraction * (w - 1) as f64;
            let my = fraction * (h - 1) as f64;
            resample(
                img,
                [mx, (w - 1) as f64 - mx, my, (h - 1) as f64 - my],
                w,
                h,
            )
        }
        TransformSpec::DownUp { factor } => {
            let dw = ((w as f64 / factor).round() as usize).max(1);
            let dh = ((h as f64 / factor).round() as usize).max(1);
            let full = [0.0, (w - 1) as f64, 0.0, (h - 1) as f64];
            let small = resample(img, full, dw, dh);
            resample(&small, [0.0, (dw - 1) as f64, 0.0, (dh - 1) as f64], w, h)
        }
    };
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Accuracy of every target model on the protected renders produced
/// against every surrogate: `matrix[s][t]`.
pub fn transfer_matrix(
    protected: &[Vec<(RenderedImage, usize)>],
    targets: &[&ClassifierModel],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(protected.len());
    for renders in protected {
        let images: Vec<&RenderedImage> = renders.iter().map(|r| &r.0).collect();
        let labels: Vec<usize> = renders.iter().map(|r| r.1).collect();
        let mut row = Vec::with_capacity(targets.len());
        for t in targets {
            row.push(accuracy(&t.predict(&images)?, &labels)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// One scene's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Task metrics such as `accuracy`, `iou`, `recall_25`.
    pub task: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// SHA-256 of the configuration that produced the report.
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(config: serde_json::Value, rows: Vec<MetricRow>) -> Self {
        let fingerprint = Sha256::digest(config.to_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Self {
            fingerprint,
            config,
            rows,
        }
    }

    /// Arithmetic mean of every column; PSNR is capped before averaging.
    pub fn aggregate(&self) -> Result<MetricRow> {
        if self.rows.is_empty() {
            return invalid("report has no rows");
        }
        let n = self.rows.len() as f64;
        let mut task = BTreeMap::new();
        for r in &self.rows {
            for (k, v) in &r.task {
                *task.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        Ok(MetricRow {
            scene: "mean".into(),
            psnr_db: self.rows.iter().map(|r| cap_psnr(r.psnr_db)).sum::<f64>() / n,
            ssim: self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            task,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let agg = self.aggregate()?;
        let keys: Vec<&String> = agg.task.keys().collect();
        let mut s = String::from("scene,psnr_db,ssim");
        for k in &keys {
            s.push(',');
            s.push_str(k);
        }
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&agg)) {
            s.push_str(&format!("{},{},{}", r.scene, cap_psnr(r.psnr_db), r.ssim));
            for k in &keys {
                s.push(',');
                if let Some(v) = r.task.get(*k) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let agg = self.aggregate()?;
        let mut v = serde_json::to_value(self).expect("report serializes");
        for r in v["rows"].as_array_mut().expect("rows array") {
            if r["psnr_db"].is_null() {
                r["psnr_db"] = PSNR_CAP_DB.into();
            }
        }
        v["aggregate"] = serde_json::to_value(&agg).expect("row serializes");
        Ok(serde_json::to_string_pretty(&v).expect("value serializes"))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()?).map_err(io_err(&csv))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(io_err(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> RenderedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RenderedImage {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn psnr_examples() {
        let a = RenderedImage::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), 99.0);
        let b = RenderedImage::filled(4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = RenderedImage::filled(4, 4, 0.0);
        let o = RenderedImage::filled(4, 4, 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&a, &RenderedImage::filled(4, 5, 0.5)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(1, 16, 12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = RenderedImage {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a.clone()
        };
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let c = RenderedImage::filled(11, 11, 0.5);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
        let small = RenderedImage::filled(10, 11, 0.5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_matches_single_window_hand_value() {
        // One 11×11 window over two constant images: only the mean term remains.
        let a = RenderedImage::filled(11, 11, 0.2);
        let b = RenderedImage::filled(11, 11, 0.6);
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metric_symmetry_and_bounds(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 12, 12);
            let b = random_image(s2 + 1000, 12, 12);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let v = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..1.0).contains(&v));
            prop_assert_eq!(v, ssim(&b, &a).unwrap());
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn occupancy_metrics() {
        let res = [3, 3, 3];
        let mut t = vec![false; 27];
        t[0] = true;
        t[1] = true;
        t[26] = true;
        assert_eq!(occupancy_iou(&t, &t).unwrap(), 1.0);
        assert_eq!(occupancy_iou(&[false; 27], &[false; 27]).unwrap(), 1.0);
        assert_eq!(connected_components(&t, res).len(), 2);
        assert_eq!(occupancy_recall(&t, &t, res, 0.5).unwrap(), 1.0);
        let mut p = vec![false; 27];
        p[0] = true;
        assert!((occupancy_iou(&p, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // {0} vs {0, 1} has IoU 0.5; {26} is missed.
        assert_eq!(occupancy_recall(&p, &t, res, 0.5).unwrap(), 0.5);
        assert_eq!(occupancy_recall(&p, &t, res, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn transform_identities() {
        let a = random_image(3, 9, 7);
        for spec in [
            TransformSpec::GaussianNoise { variance: 0.0 },
            TransformSpec::GaussianBlur { sigma: 0.0 },
            TransformSpec::CropMargins { fraction: 0.0 },
            TransformSpec::DownUp { factor: 1.0 },
        ] {
            assert_eq!(apply_transform(&a, &spec, 5).unwrap(), a, "{spec:?}");
        }
        let c = RenderedImage::filled(9, 7, 0.37);
        assert_eq!(
            apply_transform(&c, &TransformSpec::GaussianBlur { sigma: 1.3 }, 0).unwrap(),
            c
        );
        assert!(apply_transform(&a, &TransformSpec::CropMargins { fraction: 0.5 }, 0).is_err());
    }

    #[test]
    fn noise_variance_matches() {
        let c = RenderedImage::filled(64, 64, 0.5);
        let n = apply_transform(&c, &TransformSpec::GaussianNoise { variance: 0.01 }, 9).unwrap();
        let mean = n.data.iter().sum::<f64>() / n.data.len() as f64;
        let var = n.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.data.len() as f64;
        assert!((var - 0.01).abs() < 0.002, "{var}");
        let again =
            apply_transform(&c, &TransformSpec::GaussianNoise { variance: 0.01 }, 9).unwrap();
        assert_eq!(n, again);
    }

    #[test]
    fn blur_is_a_normalized_smoother() {
        let mut img = RenderedImage::filled(15, 15, 0.0);
        let centre = (7 * 15 + 7) * 3;
        img.data[centre] = 1.0;
        let b = apply_transform(&img, &TransformSpec::GaussianBlur { sigma: 1.0 }, 0).unwrap();
        let red: f64 = b.data.iter().step_by(3).sum();
        assert!((red - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(1.0, 3);
        assert!((b.data[centre] - k[3] * k[3]).abs() < 1e-15);
    }

    #[test]
    fn crop_and_resample_shapes() {
        let a = random_image(4, 16, 16);
        let c = apply_transform(&a, &TransformSpec::CropMargins { fraction: 0.25 }, 0).unwrap();
        assert_eq!((c.width, c.height), (16, 16));
        // corner pixel now samples the crop corner at (3.75, 3.75)
        let expect = {
            let p = |x: usize, y: usize| a.data[(y * 16 + x) * 3];
            let top = p(3, 3) + (p(4, 3) - p(3, 3)) * 0.75;
            let bot = p(3, 4) + (p(4, 4) - p(3, 4)) * 0.75;
            top + (bot - top) * 0.75
        };
        assert!((c.data[0] - expect).abs() < 1e-12);
        let d = apply_transform(&a, &TransformSpec::DownUp { factor: 2.0 }, 0).unwrap();
        assert_eq!((d.width, d.height), (16, 16));
        assert!(d.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let row = |name: &str, p: f64, acc: f64| MetricRow {
            scene: name.into(),
            psnr_db: p,
            ssim: 0.5,
            task: BTreeMap::from([("accuracy".to_string(), acc)]),
        };
        let r = MetricReport::new(
            serde_json::json!({"seed": 1}),
            vec![row("a", 20.0, 1.0), row("b", f64::INFINITY, 0.0)],
        );
        let agg = r.aggregate().unwrap();
        assert_eq!(agg.psnr_db, 59.5);
        assert_eq!(agg.task["accuracy"], 0.5);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "scene,psnr_db,ssim,accuracy");
        assert!(csv.contains("\nb,99,0.5,0\n"));
        assert!(csv.ends_with("mean,59.5,0.5,0.5\n"));
        assert!(r.to_json().unwrap().contains(&r.fingerprint));
        assert_eq!(r.fingerprint.len(), 64);
        assert!(MetricReport::new(serde_json::Value::Null, vec![])
            .aggregate()
            .is_err());
    }
}
