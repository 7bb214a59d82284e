//! Segmentation quality metrics: Dice coefficient, average surface
//! distance, and 95th-percentile Hausdorff distance.
//!
//! Conventions (the common community choices, stated explicitly):
//! DSC(empty, empty) = 1 and DSC(empty, non-empty) = 0; surface distances
//! are undefined when either class mask is empty, and such samples are
//! excluded from the ASD/HD95 averages and counted in the report.
//! Boundaries use 4-connectivity; a mask pixel on the image frame is
//! always boundary. Distances are in pixel units.

use serde::Serialize;

use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Aggregated metrics for one class.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    /// Mean Dice over ALL samples (always defined).
    pub dsc: f64,
    /// Mean over samples with defined surfaces; NaN when none qualify.
    pub asd: f64,
    /// Mean over samples with defined surfaces; NaN when none qualify.
    pub hd95: f64,
    /// Samples included in the surface-distance averages.
    pub n: usize,
    /// Samples excluded because either surface was empty.
    pub n_excluded: usize,
}

/// Mean over the foreground classes (1..C-1).
#[derive(Debug, Clone, Serialize)]
pub struct MeanMetrics {
    pub dsc: f64,
    pub asd: f64,
    pub hd95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Indexed by class.
    pub per_class: Vec<ClassMetrics>,
    pub mean_foreground: MeanMetrics,
    pub num_samples: usize,
}

impl MetricReport {
    /// Convert pixel-unit surface distances to physical units.
    pub fn scale_surface_units(&mut self, factor: f64) {
        for c in &mut self.per_class {
            c.asd *= factor;
            c.hd95 *= factor;
        }
        self.mean_foreground.asd *= factor;
        self.mean_foreground.hd95 *= factor;
    }

    /// CSV with one row per class: class, dsc, asd, hd95, n, n_excluded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dsc,asd,hd95,n,n_excluded\n");
        for (cls, m) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{cls},{},{},{},{},{}\n",
                m.dsc, m.asd, m.hd95, m.n, m.n_excluded
            ));
        }
        out
    }

    /// JSON mirror of the full report (NaN serializes as null).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_pair(pred: &LabelMask, target: &LabelMask, cls: usize) -> Result<()> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::ShapeMismatch {
            context: "metric masks",
            lhs: vec![pred.height, pred.width],
            rhs: vec![target.height, target.width],
        });
    }
    let num_classes = pred.num_classes.min(target.num_classes);
    if cls >= num_classes {
        return Err(Error::ClassOutOfRange { cls, num_classes });
    }
    Ok(())
}

/// Dice similarity coefficient of the binary masks of one class.
pub fn dsc(pred: &LabelMask, target: &LabelMask, cls: usize) -> Result<f64> {
    check_pair(pred, target, cls)?;
    let c = cls as u8;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (a, b) in pred.labels.iter().zip(&target.labels) {
        let in_p = *a == c;
        let in_t = *b == c;
        p += in_p as usize;
        t += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Boundary pixels of one class: mask pixels with a 4-neighbor outside
/// the class (the image frame counts as outside). Row-major order.
pub fn boundary(mask: &LabelMask, cls: usize) -> Vec<(usize, usize)> {
    let c = cls as u8;
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != c {
                continue;
            }
            let interior = y > 0
                && y + 1 < h
                && x > 0
                && x + 1 < w
                && mask.get(y - 1, x) == c
                && mask.get(y + 1, x) == c
                && mask.get(y, x - 1) == c
                && mask.get(y, x + 1) == c;
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

/// Symmetric surface-distance multiset between the class boundaries of
/// two masks, sorted ascending so downstream sums are scan-order
/// independent.
pub fn surface_distances(pred: &LabelMask, target: &LabelMask, cls: usize) -> Result<Vec<f64>> {
    check_pair(pred, target, cls)?;
    let bp = boundary(pred, cls);
    let bt = boundary(target, cls);
    if bp.is_empty() {
        return Err(Error::UndefinedSurface {
            which: "prediction",
            cls,
        });
    }
    if bt.is_empty() {
        return Err(Error::UndefinedSurface {
            which: "target",
            cls,
        });
    }
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>| {
        for &(y, x) in from {
            let mut best = f64::INFINITY;
            for &(ty, tx) in to {
                let dy = y as f64 - ty as f64;
                let dx = x as f64 - tx as f64;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            out.push(best.sqrt());
        }
    };
    let mut distances = Vec::with_capacity(bp.len() + bt.len());
    nearest(&bp, &bt, &mut distances);
    nearest(&bt, &bp, &mut distances);
    distances.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(distances)
}

/// 95th percentile with linear interpolation between order statistics.
pub fn hd95(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyInput("hd95 distance list"));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = sorted.len();
    let rank = 0.95 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < n {
        Ok(sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac)
    } else {
        Ok(sorted[n - 1])
    }
}

/// Arithmetic mean of the distance list.
pub fn asd(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyInput("asd distance list"));
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Evaluate predictions against targets, averaging per class over
/// samples. Foreground summary averages classes 1..C-1.
pub fn evaluate(preds: &[LabelMask], targets: &[LabelMask]) -> Result<MetricReport> {
    if preds.is_empty() || targets.is_empty() {
        return Err(Error::EmptyInput("evaluate mask lists"));
    }
    if preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluate got {} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let num_classes = targets[0].num_classes;
    let mut per_class = Vec::with_capacity(num_classes);
    for cls in 0..num_classes {
        let mut dsc_sum = 0.0;
        let mut asd_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut n = 0usize;
        let mut n_excluded = 0usize;
        for (p, t) in preds.iter().zip(targets) {
            dsc_sum += dsc(p, t, cls)?;
            match surface_distances(p, t, cls) {
                Ok(d) => {
                    asd_sum += asd(&d)?;
                    hd_sum += hd95(&d)?;
                    n += 1;
                }
                Err(Error::UndefinedSurface { .. }) => n_excluded += 1,
                Err(e) => return Err(e),
            }
        }
        let denom = n as f64;
        per_class.push(ClassMetrics {
            dsc: dsc_sum / preds.len() as f64,
            asd: if n > 0 { asd_sum / denom } else { f64::NAN },
            hd95: if n > 0 { hd_sum / denom } else { f64::NAN },
            n,
            n_excluded,
        });
    }
    let fg = &per_class[1..];
    let fg_n = fg.len().max(1) as f64;
    let mean_foreground = MeanMetrics {
        dsc: fg.iter().map(|c| c.dsc).sum::<f64>() / fg_n,
        asd: fg.iter().map(|c| c.asd).sum::<f64>() / fg_n,
        hd95: fg.iter().map(|c| c.hd95).sum::<f64>() / fg_n,
    };
    Ok(MetricReport {
        per_class,
        mean_foreground,
        num_samples: preds.len(),
    })
}
