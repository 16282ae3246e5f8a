//! Shared test helpers and brute-force oracles.
#![allow(dead_code)]

use rand::Rng;
use sat3d_core::volgrid::{BinaryMask, Spacing};

/// A random pair of masks on a shared grid of side at most `max_side`, with a
/// random anisotropic spacing. Masks are unions of random boxes plus salt
/// noise, and are occasionally empty.
pub fn random_mask_pair(rng: &mut impl Rng, max_side: usize) -> (BinaryMask, BinaryMask, Spacing) {
    let dims = [rng.random_range(1..=max_side), rng.random_range(1..=max_side), rng.random_range(1..=max_side)];
    let spacing = Spacing::new(rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)).unwrap();
    let one = |rng: &mut dyn rand::RngCore| {
        let boxes: Vec<[(usize, usize); 3]> = (0..rng.random_range(0..4))
            .map(|_| {
                let mut b = [(0, 0); 3];
                for a in 0..3 {
                    let lo = rng.random_range(0..dims[a]);
                    b[a] = (lo, rng.random_range(lo..dims[a]) + 1);
                }
                b
            })
            .collect();
        let salt = rng.random_range(0.0..0.15);
        let mut noise: Vec<bool> = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.random_bool(salt)).collect();
        BinaryMask::from_fn(dims, spacing, |i, j, k| {
            let p = [i, j, k];
            let n = noise.pop().unwrap();
            n || boxes.iter().any(|b| (0..3).all(|a| p[a] >= b[a].0 && p[a] < b[a].1))
        })
    };
    let p = one(rng);
    let g = one(rng);
    (p, g, spacing)
}

/// Surfels enumerated face-plane by face-plane: `(centroid, area)`.
pub fn oracle_surfels(m: &BinaryMask, s: Spacing) -> Vec<([f64; 3], f64)> {
    let d = m.dims();
    let sp = s.as_array();
    let at = |p: [isize; 3]| -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]) && m.get(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let area = sp[u] * sp[v];
        for plane in 0..=d[axis] as isize {
            for a in 0..d[u] as isize {
                for b in 0..d[v] as isize {
                    let mut lo = [0isize; 3];
                    lo[axis] = plane - 1;
                    lo[u] = a;
                    lo[v] = b;
                    let mut hi = lo;
                    hi[axis] = plane;
                    if at(lo) != at(hi) {
                        let mut c = [0.0; 3];
                        for ax in 0..3 {
                            c[ax] = lo[ax] as f64 * sp[ax];
                        }
                        c[axis] = (plane as f64 - 0.5) * sp[axis];
                        out.push((c, area));
                    }
                }
            }
        }
    }
    out
}

/// All-pairs HD95 and ASSD over surfel centroids.
pub fn oracle_surface_distances(p: &BinaryMask, g: &BinaryMask, s: Spacing) -> (f64, f64) {
    let sp = oracle_surfels(p, s);
    let sg = oracle_surfels(g, s);
    let directed = |from: &[([f64; 3], f64)], to: &[([f64; 3], f64)]| -> Vec<(f64, f64)> {
        from.iter()
            .map(|(c, a)| {
                let d = to
                    .iter()
                    .map(|(q, _)| ((c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2) + (c[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                (d, *a)
            })
            .collect()
    };
    let pct = |mut v: Vec<(f64, f64)>| {
        v.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let total: f64 = v.iter().map(|x| x.1).sum();
        let mut acc = 0.0;
        for (d, a) in &v {
            acc += a;
            if acc >= 0.95 * total {
                return *d;
            }
        }
        v.last().unwrap().0
    };
    let mean = |v: &[(f64, f64)]| v.iter().map(|(d, a)| d * a).sum::<f64>() / v.iter().map(|x| x.1).sum::<f64>();
    let (a, b) = (directed(&sp, &sg), directed(&sg, &sp));
    let assd = 0.5 * (mean(&a) + mean(&b));
    (pct(a).max(pct(b)), assd)
}
