//! Detection scoring and training-pair export.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{ensure_same_dims, save_gray, save_mask, BinaryMask, GrayImage};
use crate::par;

pub const DEFAULT_PERFECT_TOL: f64 = 1e-4;
pub const GOOD_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum DetectionLabel {
    Perfect,
    Good,
    Poor,
}

impl DetectionLabel {
    pub const ALL: [DetectionLabel; 3] = [Self::Perfect, Self::Good, Self::Poor];

    pub fn name(self) -> &'static str {
        match self {
            Self::Perfect => "Perfect",
            Self::Good => "Good",
            Self::Poor => "Poor",
        }
    }
}

impl fmt::Display for DetectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fraction of the image that is ground-truth fan but missing from the prediction.
pub fn mismatch_fraction(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let missing = gt
        .data()
        .iter()
        .zip(pred.data())
        .filter(|(&g, &p)| g && !p)
        .count();
    Ok(missing as f64 / gt.data().len() as f64)
}

pub fn label_with(mismatch: f64, perfect_tol: f64) -> DetectionLabel {
    if mismatch <= perfect_tol {
        DetectionLabel::Perfect
    } else if mismatch < GOOD_LIMIT {
        DetectionLabel::Good
    } else {
        DetectionLabel::Poor
    }
}

pub fn label(mismatch: f64) -> DetectionLabel {
    label_with(mismatch, DEFAULT_PERFECT_TOL)
}

/// Dice coefficient; 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let both = gt
        .data()
        .iter()
        .zip(pred.data())
        .filter(|(&g, &p)| g && p)
        .count();
    let total = gt.count() + pred.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageScore {
    pub mismatch: f64,
    pub dice: f64,
    pub label: DetectionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelSummary {
    pub label: DetectionLabel,
    pub count: usize,
    pub percent: f64,
    /// `None` when no image carries this label.
    pub mean_mismatch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub labels: [LabelSummary; 3],
    /// Perfect and Good together.
    pub acceptable: LabelSummary,
    pub mean_mismatch: f64,
    pub mean_dice: f64,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| par::pairwise_sum(values) / values.len() as f64)
}

impl EvalReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidParameter("nothing to evaluate".into()));
        }
        let n = images.len() as f64;
        let summarize = |label, keep: &dyn Fn(DetectionLabel) -> bool| {
            // Sorted so the mean does not depend on input order.
            let mut m: Vec<f64> = images
                .iter()
                .filter(|s| keep(s.label))
                .map(|s| s.mismatch)
                .collect();
            m.sort_by(f64::total_cmp);
            LabelSummary {
                label,
                count: m.len(),
                percent: 100.0 * m.len() as f64 / n,
                mean_mismatch: mean(&m),
            }
        };
        let labels = DetectionLabel::ALL.map(|l| summarize(l, &|x| x == l));
        let acceptable = summarize(DetectionLabel::Good, &|x| x != DetectionLabel::Poor);
        let mut all: Vec<f64> = images.iter().map(|s| s.mismatch).collect();
        all.sort_by(f64::total_cmp);
        let mut dices: Vec<f64> = images.iter().map(|s| s.dice).collect();
        dices.sort_by(f64::total_cmp);
        Ok(Self {
            mean_mismatch: mean(&all).unwrap_or(0.0),
            mean_dice: mean(&dices).unwrap_or(1.0),
            images,
            labels,
            acceptable,
        })
    }

    pub fn summary(&self, label: DetectionLabel) -> &LabelSummary {
        &self.labels[label as usize]
    }

    /// Aligned table: label, image count with percentage, mean mismatch.
    pub fn to_table(&self) -> String {
        let pct = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let mut out = format!(
            "{:<8} {:>14} {:>15}\n",
            "Label", "# Images", "Mean mismatch"
        );
        for s in self.labels.iter() {
            let count = format!("{} ({:.1}%)", s.count, s.percent);
            out.push_str(&format!(
                "{:<8} {:>14} {:>15}\n",
                s.label.name(),
                count,
                pct(s.mean_mismatch)
            ));
        }
        let a = &self.acceptable;
        let count = format!("{} ({:.1}%)", a.count, a.percent);
        out.push_str(&format!(
            "{:<8} {:>14} {:>15}\n",
            "Total",
            count,
            pct(a.mean_mismatch)
        ));
        out
    }

    /// Per-image rows followed by nothing else; `names` label the rows.
    pub fn write_csv(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["name", "mismatch", "dice", "label"])?;
        for (name, s) in names.iter().zip(&self.images) {
            w.write_record([
                name.clone(),
                format!("{:e}", s.mismatch),
                format!("{:e}", s.dice),
                s.label.name().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

pub fn score(pred: &BinaryMask, gt: &BinaryMask, perfect_tol: f64) -> Result<ImageScore> {
    let mismatch = mismatch_fraction(pred, gt)?;
    Ok(ImageScore {
        mismatch,
        dice: dice(pred, gt)?,
        label: label_with(mismatch, perfect_tol),
    })
}

pub fn batch_evaluate_with(
    pairs: &[(BinaryMask, BinaryMask)],
    perfect_tol: f64,
) -> Result<EvalReport> {
    let scores = par::map_indices(pairs.len(), |i| {
        score(&pairs[i].0, &pairs[i].1, perfect_tol)
    });
    EvalReport::from_scores(scores.into_iter().collect::<Result<_>>()?)
}

/// Scores `(pred, gt)` pairs and aggregates them per label.
pub fn batch_evaluate(pairs: &[(BinaryMask, BinaryMask)]) -> Result<EvalReport> {
    batch_evaluate_with(pairs, DEFAULT_PERFECT_TOL)
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` and `manifest.csv` under `dir`.
pub fn export_dataset(
    images: &[GrayImage],
    masks: &[BinaryMask],
    dir: impl AsRef<Path>,
) -> Result<()> {
    if images.len() != masks.len() {
        return Err(Error::InvalidParameter(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    for (img, mask) in images.iter().zip(masks) {
        ensure_same_dims(img.dims(), mask.dims())?;
    }
    let dir = dir.as_ref();
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv::Writer::from_path(&manifest_path)?;
    manifest.write_record(["index", "width", "height", "fan_area_fraction"])?;
    for (i, (img, mask)) in images.iter().zip(masks).enumerate() {
        let name = format!("{i:04}.png");
        save_gray(img, img_dir.join(&name))?;
        save_mask(mask, mask_dir.join(&name))?;
        manifest.write_record([
            format!("{i:04}"),
            img.width().to_string(),
            img.height().to_string(),
            mask.area_fraction().to_string(),
        ])?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))
}
