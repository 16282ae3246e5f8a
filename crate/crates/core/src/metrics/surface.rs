//! Surfels and area-weighted surface distances.
//!
//! A surfel is one exposed face of a foreground voxel. Its centroid lies half
//! a voxel from the voxel centre along the face normal and its area is the
//! product of the two in-plane spacings.

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Spacing};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub centroid: [f64; 3],
    pub area: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceMesh {
    pub surfels: Vec<Surfel>,
}

impl SurfaceMesh {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.surfels.iter().map(|s| s.area).sum()
    }
}

/// Faces between foreground and background, the grid border counting as
/// background.
pub fn extract_surface(mask: &BinaryMask, spacing: Spacing) -> SurfaceMesh {
    let d = mask.dims();
    let s = spacing.as_array();
    let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let mut surfels = Vec::new();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if !mask.get(i, j, k) {
                    continue;
                }
                let p = [i, j, k];
                for axis in 0..3 {
                    for dir in [-1isize, 1] {
                        let n = p[axis] as isize + dir;
                        let exposed = n < 0 || n >= d[axis] as isize || {
                            let mut q = p;
                            q[axis] = n as usize;
                            !mask.get(q[0], q[1], q[2])
                        };
                        if exposed {
                            let mut c = [i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]];
                            c[axis] += 0.5 * dir as f64 * s[axis];
                            surfels.push(Surfel { centroid: c, area: areas[axis] });
                        }
                    }
                }
            }
        }
    }
    SurfaceMesh { surfels }
}

/// For every surfel of `from`, the distance to the nearest surfel centroid of
/// `to`.
pub fn directed_distances(from: &SurfaceMesh, to: &SurfaceMesh) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let tree = KdTree::build(to.surfels.iter().map(|s| s.centroid).collect());
    from.surfels.iter().map(|s| tree.nearest_sq(s.centroid).sqrt()).collect()
}

/// Smallest distance whose cumulative area reaches `q` of the total.
pub(crate) fn percentile(mesh: &SurfaceMesh, dist: &[f64], q: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = dist.iter().zip(&mesh.surfels).map(|(&d, s)| (d, s.area)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (d, a) in &pairs {
        acc += a;
        if acc >= q * total {
            return *d;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

pub(crate) fn weighted_mean(mesh: &SurfaceMesh, dist: &[f64]) -> f64 {
    let total = mesh.total_area();
    dist.iter().zip(&mesh.surfels).map(|(d, s)| d * s.area).sum::<f64>() / total
}

fn surfaces(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<(SurfaceMesh, SurfaceMesh)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (sp, sg) = (extract_surface(pred, spacing), extract_surface(gt, spacing));
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::UndefinedMetric("surface distance with an empty mask".into()));
    }
    Ok((sp, sg))
}

/// Symmetric area-weighted 95th percentile surface distance, in mm.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (sp, sg) = surfaces(pred, gt, spacing)?;
    let a = percentile(&sp, &directed_distances(&sp, &sg), 0.95);
    let b = percentile(&sg, &directed_distances(&sg, &sp), 0.95);
    Ok(a.max(b))
}

/// Mean of the two directed area-weighted average surface distances, in mm.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (sp, sg) = surfaces(pred, gt, spacing)?;
    let a = weighted_mean(&sp, &directed_distances(&sp, &sg));
    let b = weighted_mean(&sg, &directed_distances(&sg, &sp));
    Ok(0.5 * (a + b))
}

/// Static 3-d tree for exact nearest-neighbour queries.
struct KdTree {
    points: Vec<[f64; 3]>,
}

const LEAF: usize = 8;

impl KdTree {
    fn build(mut points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        Self::split(&mut points[..], 0);
        debug_assert_eq!(points.len(), n);
        Self { points }
    }

    // Implicit layout: the median of each slice is its pivot.
    fn split(pts: &mut [[f64; 3]], depth: usize) {
        if pts.len() <= LEAF {
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let (lo, hi) = pts.split_at_mut(mid);
        Self::split(lo, depth + 1);
        Self::split(&mut hi[1..], depth + 1);
    }

    fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.points, 0, q, &mut best);
        best
    }

    fn search(pts: &[[f64; 3]], depth: usize, q: [f64; 3], best: &mut f64) {
        if pts.len() <= LEAF {
            for p in pts {
                let d = sq_dist(p, &q);
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        let pivot = pts[mid];
        let d = sq_dist(&pivot, &q);
        if d < *best {
            *best = d;
        }
        let delta = q[axis] - pivot[axis];
        let (near, far) = if delta < 0.0 { (&pts[..mid], &pts[mid + 1..]) } else { (&pts[mid + 1..], &pts[..mid]) };
        Self::search(near, depth + 1, q, best);
        if delta * delta <= *best {
            Self::search(far, depth + 1, q, best);
        }
    }
}

#[inline]
fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}
