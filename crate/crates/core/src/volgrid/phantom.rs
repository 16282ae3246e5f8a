//! Synthetic lesion phantoms: a bright body ellipsoid holding one or more
//! brighter, irregular lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{voxel_count, BinaryMask, Spacing, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    /// Inclusive range of lesion counts.
    pub lesion_count: (usize, usize),
    /// Inclusive range of ellipsoid semi-axes, in voxels.
    pub radius: (f64, f64),
    /// Relative amplitude of the radial boundary perturbation, in `[0, 1)`.
    pub boundary_noise: f64,
    /// Lesion intensity above the body background.
    pub contrast: f32,
    pub background: f32,
    /// Standard deviation of additive Gaussian noise inside the body.
    pub image_noise: f32,
    pub spacing: Spacing,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [64; 3],
            lesion_count: (1, 2),
            radius: (10.0, 16.0),
            boundary_noise: 0.15,
            contrast: 1.0,
            background: 1.0,
            image_noise: 0.1,
            spacing: Spacing::ISO,
            seed: 0,
        }
    }
}

/// Number of sinusoids in the boundary perturbation.
const WAVES: usize = 3;

struct Lesion {
    centre: [f64; 3],
    radii: [f64; 3],
    waves: [([f64; 3], f64, f64, f64); WAVES],
}

impl Lesion {
    fn contains(&self, p: [f64; 3], noise: f64) -> bool {
        let u = [
            (p[0] - self.centre[0]) / self.radii[0],
            (p[1] - self.centre[1]) / self.radii[1],
            (p[2] - self.centre[2]) / self.radii[2],
        ];
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if noise == 0.0 || rho == 0.0 {
            return rho <= 1.0;
        }
        let mut p = 0.0;
        for (dir, freq, phase, weight) in &self.waves {
            let cos = (u[0] * dir[0] + u[1] * dir[1] + u[2] * dir[2]) / rho;
            p += weight * (freq * cos + phase).sin();
        }
        rho <= 1.0 + noise * p
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (rmin, rmax) = self.radius;
        if !(rmin.is_finite() && rmax.is_finite()) || rmin < 1.0 || rmax < rmin {
            return Err(Error::Spec(format!("radius range {:?} must satisfy 1 <= min <= max", self.radius)));
        }
        if self.lesion_count.0 == 0 || self.lesion_count.1 < self.lesion_count.0 {
            return Err(Error::Spec(format!("lesion count range {:?} must satisfy 1 <= min <= max", self.lesion_count)));
        }
        if !(0.0..1.0).contains(&self.boundary_noise) {
            return Err(Error::Spec(format!("boundary noise {} outside [0, 1)", self.boundary_noise)));
        }
        if !(self.contrast.is_finite() && self.background.is_finite() && self.image_noise.is_finite()) || self.image_noise < 0.0 {
            return Err(Error::Spec("intensities must be finite and noise non-negative".into()));
        }
        let extent = self.max_extent();
        for &n in &self.grid {
            if 2.0 * extent + 1.0 > n as f64 - 1.0 {
                return Err(Error::Spec(format!("lesions up to {extent:.1} voxels do not fit a grid side of {n}")));
            }
        }
        self.spacing.validate().map_err(|e| Error::Spec(e.to_string()))
    }

    fn max_extent(&self) -> f64 {
        self.radius.1 * (1.0 + self.boundary_noise)
    }
}

/// Renders the phantom described by `spec`. A pure function of the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.grid;
    let extent = spec.max_extent();
    let count = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| {
            let mut centre = [0.0; 3];
            for (c, &n) in centre.iter_mut().zip(&dims) {
                *c = rng.random_range(extent + 0.5..=n as f64 - 1.5 - extent);
            }
            let radii = [0; 3].map(|_| if spec.radius.0 == spec.radius.1 { spec.radius.0 } else { rng.random_range(spec.radius.0..=spec.radius.1) });
            let mut weights = [0.0; WAVES].map(|_| rng.random_range(0.2..1.0));
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let waves = weights.map(|w| {
                let d: [f64; 3] = UnitSphere.sample(&mut rng);
                (d, rng.random_range(2.0..5.0), rng.random_range(0.0..std::f64::consts::TAU), w)
            });
            Lesion { centre, radii, waves }
        })
        .collect();

    let body_centre = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let body_radii = dims.map(|n| 0.47 * n as f64);
    let noise = Normal::new(0.0f32, spec.image_noise.max(0.0)).expect("valid normal");
    let n = voxel_count(dims);
    let mut img = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let inside_lesion = lesions.iter().any(|l| l.contains(p, spec.boundary_noise));
                let b = (0..3).map(|a| ((p[a] - body_centre[a]) / body_radii[a]).powi(2)).sum::<f64>() <= 1.0;
                let mut v = 0.0f32;
                if b || inside_lesion {
                    v = spec.background + if inside_lesion { spec.contrast } else { 0.0 };
                    if spec.image_noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                }
                img.push(v);
                mask.push(inside_lesion as u8);
            }
        }
    }
    let vol = Volume::from_grid(dims, img, spec.spacing)?.with_modality("phantom");
    Ok((vol, BinaryMask::new(dims, mask, spec.spacing)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversized_lesions_are_rejected() {
        let spec = PhantomSpec { grid: [16; 3], radius: (8.0, 8.0), ..Default::default() };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn lesions_are_brighter_than_body() {
        let spec = PhantomSpec { grid: [32; 3], radius: (5.0, 7.0), image_noise: 0.0, seed: 3, ..Default::default() };
        let (v, m) = generate_phantom(&spec).unwrap();
        assert!(m.count() > 0);
        for (x, &l) in v.data().iter().zip(m.data()) {
            if l == 1 {
                assert_eq!(*x, 2.0);
            } else {
                assert!(*x == 0.0 || *x == 1.0);
            }
        }
    }
}
