//! Intensity normalisation, mask-guided crop/pad and label-exact augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{linear_index, voxel_count, BinaryMask, Spacing, Volume};
use crate::error::{Error, Result};

const MIN_STD: f64 = 1e-8;

/// Z-scores each channel over its voxels with value > 0; everything else
/// becomes 0.
pub fn znormalize(v: &Volume) -> Result<Volume> {
    let n = voxel_count(v.dims());
    let mut masks = Vec::with_capacity(v.channels());
    for c in 0..v.channels() {
        let m: Vec<bool> = v.channel(c).iter().map(|&x| x > 0.0).collect();
        if !m.iter().any(|&b| b) {
            return Err(Error::DegenerateInput(format!("channel {c} has no voxel above 0")));
        }
        masks.push(m);
    }
    let mut out = v.clone();
    for (c, m) in masks.iter().enumerate() {
        normalize_channel(&mut out.data_mut()[c * n..(c + 1) * n], m);
    }
    Ok(out)
}

/// Same as [`znormalize`] but with an explicit voxel set shared by all
/// channels. Re-applying with the original set is the identity.
pub fn znormalize_masked(v: &Volume, mask: &[bool]) -> Result<Volume> {
    let n = voxel_count(v.dims());
    if mask.len() != n {
        return Err(Error::Shape(format!("mask has {} voxels, volume {n}", mask.len())));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::DegenerateInput("empty normalisation mask".into()));
    }
    let mut out = v.clone();
    for c in 0..v.channels() {
        normalize_channel(&mut out.data_mut()[c * n..(c + 1) * n], mask);
    }
    Ok(out)
}

fn normalize_channel(x: &mut [f32], mask: &[bool]) {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (&v, &m) in x.iter().zip(mask) {
        if m {
            sum += v as f64;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = x.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| (v as f64 - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    for (v, &m) in x.iter_mut().zip(mask) {
        *v = if !m || std < MIN_STD { 0.0 } else { ((*v as f64 - mean) / std) as f32 };
    }
}

/// Where a crop/pad output sits relative to its source: output voxel `o`
/// along axis `a` reads source voxel `o + offset[a]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub source_dims: [usize; 3],
    pub target_dims: [usize; 3],
    pub offset: [isize; 3],
}

impl Placement {
    /// Writes a target-grid field back onto the source grid; voxels outside
    /// the window get `fill`.
    pub fn restore<T: Copy>(&self, values: &[T], fill: T) -> Vec<T> {
        shift_copy(values, self.target_dims, self.source_dims, self.offset.map(|o| -o), fill)
    }

    pub fn restore_mask(&self, m: &BinaryMask) -> BinaryMask {
        BinaryMask::new(self.source_dims, self.restore(m.data(), 0), m.spacing()).expect("restored mask")
    }
}

pub(crate) fn shift_copy<T: Copy>(src: &[T], src_dims: [usize; 3], dst_dims: [usize; 3], offset: [isize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; voxel_count(dst_dims)];
    let range = |a: usize| {
        let lo = (-offset[a]).max(0) as usize;
        let hi = (src_dims[a] as isize - offset[a]).clamp(0, dst_dims[a] as isize) as usize;
        lo..hi.max(lo)
    };
    let (ri, rj, rk) = (range(0), range(1), range(2));
    if rk.is_empty() {
        return out;
    }
    for i in ri {
        let si = (i as isize + offset[0]) as usize;
        for j in rj.clone() {
            let sj = (j as isize + offset[1]) as usize;
            let sk = (rk.start as isize + offset[2]) as usize;
            let d = linear_index(dst_dims, i, j, rk.start);
            let s = linear_index(src_dims, si, sj, sk);
            out[d..d + rk.len()].copy_from_slice(&src[s..s + rk.len()]);
        }
    }
    out
}

/// Crops around the foreground centroid or zero-pads symmetrically so the
/// spatial shape becomes `target`.
pub fn crop_or_pad(v: &Volume, m: &BinaryMask, target: [usize; 3]) -> Result<(Volume, BinaryMask)> {
    let (v, m, _) = crop_or_pad_with_placement(v, m, target)?;
    Ok((v, m))
}

pub fn crop_or_pad_with_placement(v: &Volume, m: &BinaryMask, target: [usize; 3]) -> Result<(Volume, BinaryMask, Placement)> {
    let dims = v.dims();
    if m.dims() != dims {
        return Err(Error::Shape(format!("volume {dims:?} and mask {:?} differ", m.dims())));
    }
    let placement = plan_crop(m, target);
    let n = voxel_count(dims);
    let mut data = Vec::with_capacity(v.channels() * voxel_count(target));
    for c in 0..v.channels() {
        data.extend(shift_copy(&v.data()[c * n..(c + 1) * n], dims, target, placement.offset, 0.0));
    }
    let mut vol = Volume::new([v.channels(), target[0], target[1], target[2]], data, v.spacing())?;
    vol.modality = v.modality.clone();
    let mask = BinaryMask::new(target, shift_copy(m.data(), dims, target, placement.offset, 0), m.spacing())?;
    Ok((vol, mask, placement))
}

fn plan_crop(m: &BinaryMask, target: [usize; 3]) -> Placement {
    let dims = m.dims();
    let fg = m.foreground();
    let mut offset = [0isize; 3];
    for a in 0..3 {
        let (n, t) = (dims[a], target[a]);
        if n <= t {
            // Symmetric padding; an odd remainder goes after.
            offset[a] = -(((t - n) / 2) as isize);
            continue;
        }
        let (start, lo, hi) = if fg.is_empty() {
            ((n - t) / 2, None, None)
        } else {
            let coords = fg.iter().map(|&idx| super::unravel(dims, idx)[a]);
            let (mut sum, mut lo, mut hi) = (0usize, usize::MAX, 0usize);
            for c in coords {
                sum += c;
                lo = lo.min(c);
                hi = hi.max(c);
            }
            // Centroid rounded half-down: an exact .5 goes to the lower index.
            let count = fg.len();
            let mut centre = sum / count;
            if 2 * (sum - centre * count) > count {
                centre += 1;
            }
            (centre.saturating_sub(t / 2), Some(lo), Some(hi))
        };
        let mut s = start;
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if hi - lo < t {
                s = s.max((hi + 1).saturating_sub(t)).min(lo);
            }
        }
        offset[a] = s.min(n - t) as isize;
    }
    Placement { source_dims: dims, target_dims: target, offset }
}

/// A flip-and-quarter-turn transform of the voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flips: [bool; 3],
    /// Rotation plane as an axis pair.
    pub plane: (usize, usize),
    pub quarter_turns: u8,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flips: [false; 3], plane: (0, 1), quarter_turns: 0 };

    /// Each axis flips with probability 0.5; then a uniform number of quarter
    /// turns in a uniformly chosen axis plane.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let plane = [(0, 1), (0, 2), (1, 2)][rng.random_range(0..3)];
        let quarter_turns = rng.random_range(0..4u8);
        Self { flips, plane, quarter_turns }
    }

    pub fn is_identity(&self) -> bool {
        self.flips == [false; 3] && self.quarter_turns == 0
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut d = dims;
        if self.quarter_turns % 2 == 1 {
            d.swap(self.plane.0, self.plane.1);
        }
        d
    }

    pub fn output_spacing(&self, s: Spacing) -> Spacing {
        let mut a = s.as_array();
        if self.quarter_turns % 2 == 1 {
            a.swap(self.plane.0, self.plane.1);
        }
        Spacing::from_array(a)
    }

    /// For each output voxel, the linear index of its source voxel.
    pub fn source_map(&self, dims: [usize; 3]) -> Vec<usize> {
        let out_dims = self.output_dims(dims);
        let (pa, pb) = self.plane;
        let mut map = Vec::with_capacity(voxel_count(dims));
        for i in 0..out_dims[0] {
            for j in 0..out_dims[1] {
                for k in 0..out_dims[2] {
                    // Undo the rotations one quarter turn at a time, then the flips.
                    let mut idx = [i, j, k];
                    let mut cur = out_dims;
                    for _ in 0..self.quarter_turns {
                        // Forward turn: out[a] = in[b], out[b] = n_a - 1 - in[a].
                        let prev = {
                            let mut d = cur;
                            d.swap(pa, pb);
                            d
                        };
                        let (ia, ib) = (idx[pa], idx[pb]);
                        idx[pa] = prev[pa] - 1 - ib;
                        idx[pb] = ia;
                        cur = prev;
                    }
                    for a in 0..3 {
                        if self.flips[a] {
                            idx[a] = dims[a] - 1 - idx[a];
                        }
                    }
                    map.push(linear_index(dims, idx[0], idx[1], idx[2]));
                }
            }
        }
        map
    }
}

/// Applies the same random flips and quarter turns to a volume and its mask.
pub fn augment(v: &Volume, m: &BinaryMask, seed: u64) -> Result<(Volume, BinaryMask)> {
    augment_with(v, m, AugmentParams::sample(seed))
}

pub fn augment_with(v: &Volume, m: &BinaryMask, p: AugmentParams) -> Result<(Volume, BinaryMask)> {
    let dims = v.dims();
    if m.dims() != dims {
        return Err(Error::Shape(format!("volume {dims:?} and mask {:?} differ", m.dims())));
    }
    if p.is_identity() {
        return Ok((v.clone(), m.clone()));
    }
    let map = p.source_map(dims);
    let out_dims = p.output_dims(dims);
    let n = voxel_count(dims);
    let mut data = Vec::with_capacity(v.data().len());
    for c in 0..v.channels() {
        let ch = &v.data()[c * n..(c + 1) * n];
        data.extend(map.iter().map(|&s| ch[s]));
    }
    let mut vol = Volume::new([v.channels(), out_dims[0], out_dims[1], out_dims[2]], data, p.output_spacing(v.spacing()))?;
    vol.modality = v.modality.clone();
    let mask = BinaryMask::new(out_dims, map.iter().map(|&s| m.data()[s]).collect(), p.output_spacing(m.spacing()))?;
    Ok((vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_grid(dims, (0..voxel_count(dims)).map(|x| x as f32).collect(), Spacing::ISO).unwrap()
    }

    #[test]
    fn two_value_volume_maps_to_plus_minus_one() {
        let v = Volume::from_grid([2, 2, 2], vec![1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0], Spacing::ISO).unwrap();
        let z = znormalize(&v).unwrap();
        for (a, b) in z.data().iter().zip([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_normalises_to_zero() {
        let v = Volume::from_grid([3, 3, 3], vec![5.0; 27], Spacing::ISO).unwrap();
        assert!(znormalize(&v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn background_is_excluded() {
        let v = Volume::from_grid([1, 1, 4], vec![-7.0, 2.0, 4.0, 0.0], Spacing::ISO).unwrap();
        assert_eq!(znormalize(&v).unwrap().data(), &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(
            znormalize(&Volume::from_grid([1, 1, 2], vec![0.0, -1.0], Spacing::ISO).unwrap()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn pad_is_centred() {
        let v = ramp([2, 3, 4]);
        let m = BinaryMask::zeros([2, 3, 4], Spacing::ISO);
        let (out, mask, p) = crop_or_pad_with_placement(&v, &m, [4, 4, 4]).unwrap();
        assert_eq!(p.offset, [-1, 0, 0]);
        assert_eq!(out.dims(), [4, 4, 4]);
        assert_eq!(mask.count(), 0);
        assert_eq!(out.get(0, 1, 0, 0), v.get(0, 0, 0, 0));
        assert_eq!(out.get(0, 0, 0, 0), 0.0);
        assert_eq!(p.restore(out.data(), -1.0), v.data());
    }

    #[test]
    fn centroid_tie_rounds_down() {
        // Foreground at rows 2 and 3: centroid 2.5 → centre 2.
        let m = BinaryMask::from_fn([8, 1, 1], Spacing::ISO, |i, _, _| i == 2 || i == 3);
        let v = ramp([8, 1, 1]);
        let (_, _, p) = crop_or_pad_with_placement(&v, &m, [2, 1, 1]).unwrap();
        assert_eq!(p.offset[0], 2);
        // Centroid 3 exactly → window [2, 4).
        let m = BinaryMask::from_fn([8, 1, 1], Spacing::ISO, |i, _, _| (2..=4).contains(&i));
        let (_, _, p) = crop_or_pad_with_placement(&v, &m, [2, 1, 1]).unwrap();
        assert_eq!(p.offset[0], 2);
    }

    #[test]
    fn quarter_turn_is_a_rotation() {
        let p = AugmentParams { flips: [false; 3], plane: (0, 1), quarter_turns: 1 };
        let dims = [2, 3, 1];
        let map = p.source_map(dims);
        assert_eq!(p.output_dims(dims), [3, 2, 1]);
        let mut seen = map.clone();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        let four = AugmentParams { quarter_turns: 4, ..p };
        assert_eq!(four.source_map(dims), (0..6).collect::<Vec<_>>());
    }
}
