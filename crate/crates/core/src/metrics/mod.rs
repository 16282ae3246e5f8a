//! Overlap, volume and surface-distance metrics on anisotropic grids.

mod surface;

pub use surface::{assd, directed_distances, extract_surface, hd95, SurfaceMesh, Surfel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{linear_index, BinaryMask, Spacing};

/// Per-case metrics. Distances are in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub iou: f64,
    pub rve: f64,
    pub hd95: f64,
    pub assd: f64,
    /// Set when either mask was empty and a policy value replaced a metric.
    pub empty_flag: bool,
}

impl MetricReport {
    pub const PERFECT: MetricReport = MetricReport { dsc: 1.0, iou: 1.0, rve: 0.0, hd95: 0.0, assd: 0.0, empty_flag: false };

    /// Field-wise mean.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            dsc: sum(|r| r.dsc),
            iou: sum(|r| r.iou),
            rve: sum(|r| r.rve),
            hd95: sum(|r| r.hd95),
            assd: sum(|r| r.assd),
            empty_flag: reports.iter().any(|r| r.empty_flag),
        })
    }
}

/// What to report when a distance metric is undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct EmptyPolicy {
    /// Distance reported for an empty mask; `None` means the grid diagonal.
    pub sentinel_mm: Option<f64>,
}

impl EmptyPolicy {
    pub fn sentinel(&self, dims: [usize; 3], spacing: Spacing) -> f64 {
        self.sentinel_mm.unwrap_or_else(|| {
            let s = spacing.as_array();
            (0..3).map(|a| (dims[a] as f64 * s[a]).powi(2)).sum::<f64>().sqrt()
        })
    }
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}; align first", pred.dims(), gt.dims())));
    }
    Ok(())
}

struct Counts {
    p: usize,
    g: usize,
    both: usize,
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Counts {
    let mut c = Counts { p: 0, g: 0, both: 0 };
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        c.p += a as usize;
        c.g += b as usize;
        c.both += (a & b) as usize;
    }
    c
}

/// Nearest-neighbour resampling of `pred` onto the grid of `gt`. Voxel
/// centres sit at `index * spacing` on both grids.
pub fn align_to_gt(pred: &BinaryMask, gt: &BinaryMask) -> Result<BinaryMask> {
    pred.spacing().validate()?;
    gt.spacing().validate()?;
    if pred.dims() == gt.dims() && pred.spacing() == gt.spacing() {
        return Ok(pred.clone());
    }
    let (sp, sg) = (pred.spacing().as_array(), gt.spacing().as_array());
    let pd = pred.dims();
    let lookup: Vec<Vec<Option<usize>>> = (0..3)
        .map(|a| {
            (0..gt.dims()[a])
                .map(|i| {
                    let src = (i as f64 * sg[a] / sp[a] + 0.5).floor();
                    (src >= 0.0 && (src as usize) < pd[a]).then_some(src as usize)
                })
                .collect()
        })
        .collect();
    Ok(BinaryMask::from_fn(gt.dims(), gt.spacing(), |i, j, k| match (lookup[0][i], lookup[1][j], lookup[2][k]) {
        (Some(a), Some(b), Some(c)) => pred.data()[linear_index(pd, a, b, c)] != 0,
        _ => false,
    }))
}

/// Dice similarity coefficient; two empty masks score 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let c = counts(pred, gt);
    Ok(if c.p + c.g == 0 { 1.0 } else { 2.0 * c.both as f64 / (c.p + c.g) as f64 })
}

/// Jaccard index; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let c = counts(pred, gt);
    let union = c.p + c.g - c.both;
    Ok(if union == 0 { 1.0 } else { c.both as f64 / union as f64 })
}

/// Relative volume error `|V(P) - V(G)| / V(G)`.
pub fn rve(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    check_pair(pred, gt)?;
    let c = counts(pred, gt);
    if c.g == 0 {
        return Err(Error::UndefinedMetric("relative volume error needs a non-empty ground truth".into()));
    }
    let vv = spacing.voxel_volume();
    let (vp, vg) = (c.p as f64 * vv, c.g as f64 * vv);
    Ok((vp - vg).abs() / vg)
}

/// All five metrics with the default empty-mask policy.
pub fn report(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<MetricReport> {
    report_with(pred, gt, spacing, EmptyPolicy::default())
}

pub fn report_with(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing, policy: EmptyPolicy) -> Result<MetricReport> {
    check_pair(pred, gt)?;
    spacing.validate()?;
    let c = counts(pred, gt);
    match (c.p == 0, c.g == 0) {
        (true, true) => return Ok(MetricReport { empty_flag: true, ..MetricReport::PERFECT }),
        (true, false) | (false, true) => {
            let s = policy.sentinel(gt.dims(), spacing);
            tracing::debug!(pred = c.p, gt = c.g, sentinel = s, "empty mask, distance sentinel applied");
            return Ok(MetricReport { dsc: 0.0, iou: 0.0, rve: 1.0, hd95: s, assd: s, empty_flag: true });
        }
        _ => {}
    }
    let sp = extract_surface(pred, spacing);
    let sg = extract_surface(gt, spacing);
    let d_pg = directed_distances(&sp, &sg);
    let d_gp = directed_distances(&sg, &sp);
    Ok(MetricReport {
        dsc: dsc(pred, gt)?,
        iou: iou(pred, gt)?,
        rve: rve(pred, gt, spacing)?,
        hd95: surface::percentile(&sp, &d_pg, 0.95).max(surface::percentile(&sg, &d_gp, 0.95)),
        assd: 0.5 * (surface::weighted_mean(&sp, &d_pg) + surface::weighted_mean(&sg, &d_gp)),
        empty_flag: false,
    })
}
