//! Whole-volume inference with overlapping windows, and the fixed-budget
//! K-point evaluation protocol that keeps the best-Dice candidate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{report, MetricReport};
use crate::promptloop::{run_episode, EpisodeTrace, PointPrompt, Prediction, PromptableModel, SampleMode, StepOutput};
use crate::volgrid::preprocess::shift_copy;
use crate::volgrid::{linear_index, voxel_count, BinaryMask, ProbGrid, Volume};

/// Default window overlap.
pub const OVERLAP: f64 = 0.5;
/// Gaussian window width as a fraction of the patch side.
pub const SIGMA_SCALE: f64 = 1.0 / 8.0;
/// Window weights are floored at this fraction of the peak so every
/// covered voxel keeps a usable normaliser.
const MIN_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowPlan {
    pub shape: [usize; 3],
    pub patch: [usize; 3],
    /// `shape` grown to at least `patch` along every axis.
    pub padded: [usize; 3],
    pub overlap: f64,
    pub sigma_scale: f64,
    /// Window corners on the padded grid, lexicographically sorted.
    pub origins: Vec<[usize; 3]>,
}

/// Window origins with stride `patch·(1−overlap)`; the last window on each
/// axis is clamped to the boundary. Volumes smaller than the patch are
/// padded and get a single window.
pub fn plan_windows(shape: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<SlidingWindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    if shape.contains(&0) || patch.contains(&0) {
        return Err(Error::Config(format!("shape {shape:?} and patch {patch:?} must be non-empty")));
    }
    let padded = [0, 1, 2].map(|a| shape[a].max(patch[a]));
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let stride = ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
            let last = padded[a] - patch[a];
            let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
            s.push(last);
            s
        })
        .collect();
    let mut origins = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                origins.push([i, j, k]);
            }
        }
    }
    Ok(SlidingWindowPlan { shape, patch, padded, overlap, sigma_scale: SIGMA_SCALE, origins })
}

impl SlidingWindowPlan {
    /// Separable Gaussian centred on the patch, peak 1.
    pub fn window_weights(&self) -> Vec<f32> {
        let axis = |a: usize| -> Vec<f64> {
            let n = self.patch[a];
            let sigma = n as f64 * self.sigma_scale;
            let c = (n as f64 - 1.0) / 2.0;
            (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
        };
        let (x, y, z) = (axis(0), axis(1), axis(2));
        let mut w = Vec::with_capacity(voxel_count(self.patch));
        for a in &x {
            for b in &y {
                for c in &z {
                    w.push((a * b * c).max(MIN_WEIGHT) as f32);
                }
            }
        }
        w
    }

    /// Number of windows covering each voxel of the original shape.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; voxel_count(self.shape)];
        for o in &self.origins {
            self.for_each_voxel(*o, |g, _| cov[g] += 1);
        }
        cov
    }

    /// Sum of raw window weights per voxel of the original shape.
    pub fn weight_sum(&self) -> Vec<f64> {
        let w = self.window_weights();
        let mut acc = vec![0.0f64; voxel_count(self.shape)];
        for o in &self.origins {
            self.for_each_voxel(*o, |g, l| acc[g] += w[l] as f64);
        }
        acc
    }

    /// Sum over windows of each window's normalised weight; 1 wherever the
    /// plan covers the volume.
    pub fn normalized_weight_sum(&self) -> Vec<f64> {
        let w = self.window_weights();
        let total = self.weight_sum();
        let mut acc = vec![0.0f64; total.len()];
        for o in &self.origins {
            self.for_each_voxel(*o, |g, l| acc[g] += w[l] as f64 / total[g]);
        }
        acc
    }

    /// Calls `f(global, local)` for the window voxels inside the volume.
    fn for_each_voxel(&self, o: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let hi = [0, 1, 2].map(|a| (o[a] + self.patch[a]).min(self.shape[a]));
        for i in o[0]..hi[0] {
            for j in o[1]..hi[1] {
                for k in o[2]..hi[2] {
                    f(linear_index(self.shape, i, j, k), linear_index(self.patch, i - o[0], j - o[1], k - o[2]));
                }
            }
        }
    }

    /// The window at `o` cut from a field on the original grid, padded
    /// with `fill`.
    fn crop<T: Copy>(&self, field: &[T], o: [usize; 3], fill: T) -> Vec<T> {
        shift_copy(field, self.shape, self.patch, o.map(|v| v as isize), fill)
    }

    /// Blends per-window fields back onto the original grid with Gaussian
    /// weights. A plan with one window is cropped, not blended, so it is
    /// bit-identical to a direct forward pass.
    fn blend(&self, windows: &[Vec<f32>]) -> Vec<f32> {
        if self.origins.len() == 1 {
            return shift_copy(&windows[0], self.patch, self.shape, self.origins[0].map(|v| -(v as isize)), 0.0);
        }
        let w = self.window_weights();
        let mut num = vec![0.0f64; voxel_count(self.shape)];
        let mut den = vec![0.0f64; num.len()];
        for (o, win) in self.origins.iter().zip(windows) {
            self.for_each_voxel(*o, |g, l| {
                num[g] += w[l] as f64 * win[l] as f64;
                den[g] += w[l] as f64;
            });
        }
        num.iter().zip(&den).map(|(n, d)| (n / d) as f32).collect()
    }
}

/// A fixed-size model applied to arbitrary volumes window by window.
/// Prompts in volume coordinates are routed to every window containing
/// them; windows without prompts run unprompted.
pub struct Windowed<'a, M> {
    pub model: &'a M,
    pub plan: SlidingWindowPlan,
}

impl<M: PromptableModel> PromptableModel for Windowed<'_, M> {
    type Image = Vec<M::Image>;

    fn embed(&self, v: &Volume) -> Result<Vec<M::Image>> {
        if v.dims() != self.plan.shape {
            return Err(Error::Shape(format!("volume {:?} vs plan {:?}", v.dims(), self.plan.shape)));
        }
        let n = voxel_count(v.dims());
        let p = self.plan.patch;
        self.plan
            .origins
            .iter()
            .map(|&o| {
                let data: Vec<f32> = (0..v.channels()).flat_map(|c| self.plan.crop(&v.data()[c * n..(c + 1) * n], o, 0.0)).collect();
                self.model.embed(&Volume::new([v.channels(), p[0], p[1], p[2]], data, v.spacing())?)
            })
            .collect()
    }

    fn predict(&self, img: &Vec<M::Image>, points: &[PointPrompt], prev_mask: &BinaryMask, prev_conf: &BinaryMask) -> Result<Prediction> {
        let shape = self.plan.shape;
        for p in points {
            if p.index().is_none_or(|c| (0..3).any(|a| c[a] >= shape[a])) {
                return Err(Error::PromptBounds { coord: p.coord, dims: shape });
            }
        }
        let (mut probs, mut confs) = (Vec::new(), Vec::new());
        let spacing = prev_mask.spacing();
        for (o, emb) in self.plan.origins.iter().zip(img) {
            let local: Vec<PointPrompt> = points
                .iter()
                .filter(|p| (0..3).all(|a| (p.coord[a] as usize) >= o[a] && (p.coord[a] as usize) < o[a] + self.plan.patch[a]))
                .map(|p| PointPrompt { coord: [0, 1, 2].map(|a| p.coord[a] - o[a] as i64), label: p.label })
                .collect();
            let m = BinaryMask::new(self.plan.patch, self.plan.crop(prev_mask.data(), *o, 0), spacing)?;
            let c = BinaryMask::new(self.plan.patch, self.plan.crop(prev_conf.data(), *o, 0), spacing)?;
            let out = self.model.predict(emb, &local, &m, &c)?;
            probs.push(out.prob.into_data());
            confs.push(out.confidence.into_data());
        }
        Ok(Prediction { prob: ProbGrid::new(shape, self.plan.blend(&probs))?, confidence: ProbGrid::new(shape, self.plan.blend(&confs))? })
    }

    fn threshold(&self) -> f64 {
        self.model.threshold()
    }

    fn input_dims(&self) -> Option<[usize; 3]> {
        Some(self.plan.shape)
    }
}

/// Probability over the whole volume for `prompts` with blank dense
/// prompts.
pub fn sliding_predict<M: PromptableModel>(model: &M, volume: &Volume, prompts: &[PointPrompt], plan: &SlidingWindowPlan) -> Result<ProbGrid> {
    let w = Windowed { model, plan: plan.clone() };
    let img = w.embed(volume)?;
    let blank = BinaryMask::zeros(volume.dims(), volume.spacing());
    Ok(w.predict(&img, prompts, &blank, &blank)?.prob)
}

/// Point budgets reported per case, foreground clicks only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    budgets: Vec<usize>,
    foreground_only: bool,
}

impl EvalProtocol {
    pub const BUDGETS: [usize; 4] = [5, 10, 15, 20];

    pub fn new(budgets: Vec<usize>) -> Result<Self> {
        if budgets.is_empty() || budgets.iter().any(|k| !Self::BUDGETS.contains(k)) {
            return Err(Error::Config(format!("budgets {budgets:?} must be a non-empty subset of {:?}", Self::BUDGETS)));
        }
        Ok(Self { budgets, foreground_only: true })
    }

    pub fn full() -> Self {
        Self { budgets: Self::BUDGETS.to_vec(), foreground_only: true }
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn foreground_only(&self) -> bool {
        self.foreground_only
    }
}

/// Result of one case under a K-point budget.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub best_step: usize,
    pub best_mask: BinaryMask,
    pub best_report: MetricReport,
    /// Metrics after every step, step 0 first.
    pub reports: Vec<MetricReport>,
    pub trace: EpisodeTrace,
    pub steps: Vec<StepOutput>,
}

/// Index of the highest DSC; ties go to the earliest candidate.
pub fn best_candidate(dscs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &d) in dscs.iter().enumerate() {
        if best.is_none_or(|b| d > dscs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Runs an unprompted step and then one foreground click per step for `k`
/// clicks, and keeps the candidate with the highest DSC. Volumes larger
/// than the model's input are processed window by window.
pub fn eval_case<M: PromptableModel, R: Rng + ?Sized>(model: &M, volume: &Volume, gt: &BinaryMask, k: usize, rng: &mut R) -> Result<CaseOutcome> {
    if gt.is_empty() {
        return Err(Error::NoForeground);
    }
    let steps = match model.input_dims() {
        Some(d) if d != volume.dims() => {
            let w = Windowed { model, plan: plan_windows(volume.dims(), d, OVERLAP)? };
            run_episode(&w, volume, gt, k + 1, SampleMode::Eval, rng)?
        }
        _ => run_episode(model, volume, gt, k + 1, SampleMode::Eval, rng)?,
    };
    let reports = steps.iter().map(|s| report(&s.pred, gt, gt.spacing())).collect::<Result<Vec<_>>>()?;
    let best_step = best_candidate(&reports.iter().map(|r| r.dsc).collect::<Vec<_>>()).expect("at least one step");
    Ok(CaseOutcome {
        best_step,
        best_mask: steps[best_step].pred.clone(),
        best_report: reports[best_step],
        trace: EpisodeTrace::from_steps(&steps, Some(gt), None),
        reports,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_is_one_window() {
        let p = plan_windows([16; 3], [16; 3], 0.5).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn overlap_is_validated() {
        assert!(plan_windows([8; 3], [4; 3], 1.0).is_err());
        assert!(plan_windows([8; 3], [4; 3], -0.1).is_err());
    }

    #[test]
    fn ties_pick_the_earliest() {
        assert_eq!(best_candidate(&[0.2, 0.7, 0.7, 0.1]), Some(1));
        assert_eq!(best_candidate(&[]), None);
    }
}
