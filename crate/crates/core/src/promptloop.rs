//! The m-step prompt-refinement loop: error-driven point sampling and the
//! carry-over of (previous mask, binarised confidence) as the dense prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::dsc;
use crate::netblocks::{binarize_confidence, ImageEmbedding, Sat3d};
use crate::volgrid::{unravel, BinaryMask, ConfidenceMap, ProbGrid, Spacing, Volume};

/// A clicked voxel with label 1 (foreground) or 0 (background).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub coord: [i64; 3],
    pub label: u8,
}

impl PointPrompt {
    pub fn positive(c: [usize; 3]) -> Self {
        Self { coord: [c[0] as i64, c[1] as i64, c[2] as i64], label: 1 }
    }

    pub fn negative(c: [usize; 3]) -> Self {
        Self { label: 0, ..Self::positive(c) }
    }

    /// Voxel index, if non-negative.
    pub fn index(&self) -> Option<[usize; 3]> {
        self.coord.iter().all(|&c| c >= 0).then(|| [self.coord[0] as usize, self.coord[1] as usize, self.coord[2] as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Uniform over the error set, negative labels allowed.
    Train,
    /// Foreground only: missed foreground first, else any foreground.
    Eval,
}

/// Draws the next click from the disagreement between `pred` and `gt`.
pub fn sample_prompt<R: Rng + ?Sized>(pred: &BinaryMask, gt: &BinaryMask, mode: SampleMode, rng: &mut R) -> Result<PointPrompt> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if gt.is_empty() {
        return Err(Error::NoForeground);
    }
    let (p, g) = (pred.data(), gt.data());
    let candidates: Vec<usize> = match mode {
        SampleMode::Train => (0..g.len()).filter(|&i| p[i] != g[i]).collect(),
        SampleMode::Eval => (0..g.len()).filter(|&i| g[i] == 1 && p[i] == 0).collect(),
    };
    let pool = if candidates.is_empty() { gt.foreground() } else { candidates };
    let i = pool[rng.random_range(0..pool.len())];
    let c = unravel(gt.dims(), i);
    Ok(if g[i] == 1 { PointPrompt::positive(c) } else { PointPrompt::negative(c) })
}

/// Accumulated clicks and the dense prompt for the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub points: Vec<PointPrompt>,
    pub prev_mask: BinaryMask,
    pub prev_conf_bin: BinaryMask,
    pub step: usize,
    /// Number of steps `m` this state may run.
    pub budget: usize,
}

impl PromptState {
    /// Step 0: no clicks, blank mask and confidence.
    pub fn new(dims: [usize; 3], spacing: Spacing, budget: usize) -> Self {
        Self { points: vec![], prev_mask: BinaryMask::zeros(dims, spacing), prev_conf_bin: BinaryMask::zeros(dims, spacing), step: 0, budget }
    }
}

/// Probability and critic confidence for one refinement step.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prob: ProbGrid,
    pub confidence: ConfidenceMap,
}

/// Anything that can be prompted like the full network.
pub trait PromptableModel {
    type Image;

    fn embed(&self, v: &Volume) -> Result<Self::Image>;

    fn predict(&self, img: &Self::Image, points: &[PointPrompt], prev_mask: &BinaryMask, prev_conf: &BinaryMask) -> Result<Prediction>;

    /// Confidence binarisation threshold.
    fn threshold(&self) -> f64 {
        0.3
    }

    /// Spatial size the model accepts, if fixed.
    fn input_dims(&self) -> Option<[usize; 3]> {
        None
    }
}

impl PromptableModel for Sat3d {
    type Image = ImageEmbedding;

    fn embed(&self, v: &Volume) -> Result<ImageEmbedding> {
        self.encode_image(v)
    }

    fn predict(&self, img: &ImageEmbedding, points: &[PointPrompt], prev_mask: &BinaryMask, prev_conf: &BinaryMask) -> Result<Prediction> {
        let p = self.encode_prompts(points, prev_mask, prev_conf)?;
        let logits = self.decode_mask(img, &p)?;
        let prob = ProbGrid::new(prev_mask.dims(), logits.data().iter().map(|&z| sat3d_tensor::sigmoid(z)).collect())?;
        let confidence = self.critic_forward(&prob)?;
        Ok(Prediction { prob, confidence })
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }

    fn input_dims(&self) -> Option<[usize; 3]> {
        Some([self.config.input_size; 3])
    }
}

/// Everything one refinement step consumed and produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub step: usize,
    /// Clicks the model saw at this step.
    pub points: Vec<PointPrompt>,
    /// Dense prompt inputs (the previous step's outputs).
    pub dense_mask: BinaryMask,
    pub dense_conf: BinaryMask,
    pub prob: ProbGrid,
    pub confidence: ConfidenceMap,
    /// `prob > 0.5`.
    pub pred: BinaryMask,
    /// `confidence > T`.
    pub conf_bin: BinaryMask,
}

/// Runs one step of `state` through `predict` and advances the state.
pub fn advance(
    state: &mut PromptState,
    threshold: f64,
    predict: impl FnOnce(&PromptState) -> Result<Prediction>,
) -> Result<StepOutput> {
    if state.step >= state.budget {
        return Err(Error::BudgetExceeded { budget: state.budget });
    }
    let Prediction { prob, confidence } = predict(state)?;
    let spacing = state.prev_mask.spacing();
    let pred = prob.above(0.5, spacing);
    let conf_bin = binarize_confidence(&confidence, threshold, spacing)?;
    let out = StepOutput {
        step: state.step,
        points: state.points.clone(),
        dense_mask: std::mem::replace(&mut state.prev_mask, pred.clone()),
        dense_conf: std::mem::replace(&mut state.prev_conf_bin, conf_bin.clone()),
        prob,
        confidence,
        pred,
        conf_bin,
    };
    state.step += 1;
    Ok(out)
}

pub fn refine_step<M: PromptableModel>(model: &M, img: &M::Image, state: &mut PromptState) -> Result<StepOutput> {
    advance(state, model.threshold(), |s| model.predict(img, &s.points, &s.prev_mask, &s.prev_conf_bin))
}

/// Drives `m` steps: step 0 unprompted, then one sampled click before each
/// later step. `step_fn` produces each prediction, so callers that build
/// differentiable graphs share the same state machine.
pub fn drive_episode<R: Rng + ?Sized>(
    gt: &BinaryMask,
    m: usize,
    mode: SampleMode,
    threshold: f64,
    rng: &mut R,
    mut step_fn: impl FnMut(&PromptState) -> Result<Prediction>,
) -> Result<Vec<StepOutput>> {
    if m == 0 {
        return Err(Error::Config("an episode needs at least one step".into()));
    }
    if m > 1 && gt.is_empty() {
        return Err(Error::NoForeground);
    }
    let mut state = PromptState::new(gt.dims(), gt.spacing(), m);
    let mut steps = Vec::with_capacity(m);
    for t in 0..m {
        if t >= 1 {
            let p = sample_prompt(&state.prev_mask, gt, mode, rng)?;
            state.points.push(p);
        }
        steps.push(advance(&mut state, threshold, &mut step_fn)?);
    }
    Ok(steps)
}

pub fn run_episode<M: PromptableModel, R: Rng + ?Sized>(
    model: &M,
    volume: &Volume,
    gt: &BinaryMask,
    m: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<StepOutput>> {
    if volume.dims() != gt.dims() {
        return Err(Error::Shape(format!("volume {:?} vs mask {:?}", volume.dims(), gt.dims())));
    }
    let img = model.embed(volume)?;
    drive_episode(gt, m, mode, model.threshold(), rng, |s| model.predict(&img, &s.points, &s.prev_mask, &s.prev_conf_bin))
}

/// JSON-friendly record of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// The click added before this step, if any.
    pub point: Option<PointPrompt>,
    pub dice: Option<f64>,
    pub foreground: usize,
    pub loss: Option<LossReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub points: Vec<PointPrompt>,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn from_steps(steps: &[StepOutput], gt: Option<&BinaryMask>, losses: Option<&[LossReport]>) -> Self {
        let mut prev = 0;
        let steps: Vec<TraceStep> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let point = (s.points.len() > prev).then(|| *s.points.last().unwrap());
                prev = s.points.len();
                TraceStep {
                    step: s.step,
                    point,
                    dice: gt.and_then(|g| dsc(&s.pred, g).ok()),
                    foreground: s.pred.count(),
                    loss: losses.and_then(|l| l.get(i).copied()),
                }
            })
            .collect();
        let points = steps.iter().filter_map(|s| s.point).collect();
        Self { points, steps }
    }
}
