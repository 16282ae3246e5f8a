use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sat3d_core::inference::{best_candidate, eval_case, plan_windows, sliding_predict, EvalProtocol, SlidingWindowPlan};
use sat3d_core::netblocks::{ModelConfig, Sat3d};
use sat3d_core::promptloop::{PointPrompt, Prediction, PromptableModel};
use sat3d_core::volgrid::{generate_phantom, BinaryMask, PhantomSpec, ProbGrid, Spacing, Volume};
use sat3d_core::Error;

/// Probability is a pointwise function of intensity, so any correct
/// window/blend pipeline reproduces it exactly.
struct Pointwise;

fn squash(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl PromptableModel for Pointwise {
    type Image = Volume;

    fn embed(&self, v: &Volume) -> sat3d_core::Result<Volume> {
        Ok(v.clone())
    }

    fn predict(&self, v: &Volume, _: &[PointPrompt], _: &BinaryMask, _: &BinaryMask) -> sat3d_core::Result<Prediction> {
        let p = ProbGrid::new(v.dims(), v.data().iter().map(|&x| squash(x)).collect())?;
        Ok(Prediction { confidence: p.clone(), prob: p })
    }

    fn input_dims(&self) -> Option<[usize; 3]> {
        Some([8; 3])
    }
}

/// Marks exactly the voxels it was prompted at.
struct Echo;

impl PromptableModel for Echo {
    type Image = [usize; 3];

    fn embed(&self, v: &Volume) -> sat3d_core::Result<[usize; 3]> {
        Ok(v.dims())
    }

    fn predict(&self, d: &[usize; 3], points: &[PointPrompt], _: &BinaryMask, _: &BinaryMask) -> sat3d_core::Result<Prediction> {
        let mut p = vec![0.0f32; d[0] * d[1] * d[2]];
        for q in points {
            let c = q.index().unwrap();
            assert!((0..3).all(|a| c[a] < d[a]), "point {c:?} not routed into the window");
            p[(c[0] * d[1] + c[1]) * d[2] + c[2]] = 1.0;
        }
        Ok(Prediction { prob: ProbGrid::new(*d, p)?, confidence: ProbGrid::zeros(*d) })
    }
}

fn ramp(dims: [usize; 3]) -> Volume {
    let n = dims[0] * dims[1] * dims[2];
    Volume::from_grid(dims, (0..n).map(|i| ((i * 37) % 101) as f32 / 25.0 - 2.0).collect(), Spacing::ISO).unwrap()
}

#[test]
fn full_size_volume_is_one_window() {
    for overlap in [0.0, 0.25, 0.5, 0.9] {
        let p = plan_windows([128; 3], [128; 3], overlap).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
    }
}

#[test]
fn half_overlap_on_192_gives_eight_windows() {
    let p = plan_windows([192; 3], [128; 3], 0.5).unwrap();
    let mut expect = vec![];
    for i in [0, 64] {
        for j in [0, 64] {
            for k in [0, 64] {
                expect.push([i, j, k]);
            }
        }
    }
    assert_eq!(p.origins, expect);
    assert!(p.coverage().iter().all(|&c| c >= 1));
}

#[test]
fn small_volume_is_padded_and_cropped_back() {
    let p = plan_windows([100; 3], [128; 3], 0.5).unwrap();
    assert_eq!(p.padded, [128; 3]);
    assert_eq!(p.origins.len(), 1);

    // through a pointwise model the crop must land on the original voxels
    let p = plan_windows([5, 7, 6], [8; 3], 0.5).unwrap();
    let v = ramp([5, 7, 6]);
    let out = sliding_predict(&Pointwise, &v, &[], &p).unwrap();
    assert_eq!(out.dims(), [5, 7, 6]);
    let expect: Vec<f32> = v.data().iter().map(|&x| squash(x)).collect();
    assert_eq!(out.data(), &expect[..]);
}

#[test]
fn blending_a_pointwise_field_is_exact() {
    let p = plan_windows([19, 12, 8], [8; 3], 0.5).unwrap();
    assert!(p.origins.len() > 1);
    let v = ramp([19, 12, 8]);
    let out = sliding_predict(&Pointwise, &v, &[], &p).unwrap();
    let expect: Vec<f32> = v.data().iter().map(|&x| squash(x)).collect();
    assert_eq!(out.data(), &expect[..]);
}

#[test]
fn constant_fields_blend_to_themselves() {
    let p = plan_windows([13, 9, 11], [8; 3], 0.5).unwrap();
    for c in [0.0f32, 0.3, 0.77, 1.0] {
        let v = Volume::from_grid([13, 9, 11], vec![(c / (1.0 - c)).ln(); 13 * 9 * 11], Spacing::ISO).unwrap();
        let out = sliding_predict(&Pointwise, &v, &[], &p).unwrap();
        let want = squash(v.data()[0]);
        assert!(out.data().iter().all(|&x| x == want));
    }
}

#[test]
fn normalised_weights_sum_to_one() {
    for (shape, patch) in [([192; 3], [128; 3]), ([30, 17, 9], [8; 3]), ([8; 3], [8; 3])] {
        let p = plan_windows(shape, patch, 0.5).unwrap();
        let worst = p.normalized_weight_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{shape:?}: {worst}");
    }
}

#[test]
fn single_window_is_bit_identical_to_direct_forward() {
    let model = Sat3d::new(ModelConfig::tiny(16)).unwrap();
    let (v, _) = generate_phantom(&PhantomSpec { grid: [16; 3], radius: (3.0, 4.0), seed: 3, ..Default::default() }).unwrap();
    let points = [PointPrompt::positive([8, 8, 8]), PointPrompt::negative([1, 2, 3])];
    let plan = plan_windows([16; 3], [16; 3], 0.5).unwrap();
    let windowed = sliding_predict(&model, &v, &points, &plan).unwrap();
    let blank = BinaryMask::zeros([16; 3], v.spacing());
    let direct = model.predict(&model.embed(&v).unwrap(), &points, &blank, &blank).unwrap().prob;
    let bits = |g: &ProbGrid| g.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&windowed), bits(&direct));
}

#[test]
fn prompts_are_routed_in_window_coordinates() {
    let plan = plan_windows([20, 14, 9], [8; 3], 0.5).unwrap();
    let v = Volume::zeros([20, 14, 9], Spacing::ISO);
    let points = [PointPrompt::positive([0, 0, 0]), PointPrompt::positive([19, 13, 8]), PointPrompt::negative([10, 6, 4])];
    let out = sliding_predict(&Echo, &v, &points, &plan).unwrap();
    let marked: Vec<usize> = (0..out.data().len()).filter(|&i| out.data()[i] > 0.0).collect();
    let idx = |c: [usize; 3]| (c[0] * 14 + c[1]) * 9 + c[2];
    assert_eq!(marked, vec![idx([0, 0, 0]), idx([10, 6, 4]), idx([19, 13, 8])]);
    assert!(marked.iter().all(|&i| out.data()[i] == 1.0));

    let outside = [PointPrompt::positive([20, 0, 0])];
    assert!(matches!(sliding_predict(&Echo, &v, &outside, &plan), Err(Error::PromptBounds { .. })));
}

proptest! {
    #[test]
    fn every_voxel_is_covered(
        shape in prop::array::uniform3(1usize..40),
        patch in prop::array::uniform3(1usize..16),
        overlap in 0.0f64..0.95,
    ) {
        let p: SlidingWindowPlan = plan_windows(shape, patch, overlap).unwrap();
        prop_assert!(p.coverage().iter().all(|&c| c >= 1));
        let mut sorted = p.origins.clone();
        sorted.sort();
        prop_assert_eq!(&sorted, &p.origins);
        for o in &p.origins {
            for a in 0..3 {
                prop_assert!(o[a] + patch[a] <= p.padded[a]);
            }
        }
    }
}

/// Predicts the first `base + step·gain` foreground voxels of the ground
/// truth (in index order), where `step` is the number of clicks seen.
struct Growing {
    gt: BinaryMask,
    base: usize,
    gain: usize,
}

impl PromptableModel for Growing {
    type Image = ();

    fn embed(&self, _: &Volume) -> sat3d_core::Result<()> {
        Ok(())
    }

    fn predict(&self, _: &(), points: &[PointPrompt], _: &BinaryMask, _: &BinaryMask) -> sat3d_core::Result<Prediction> {
        let n = self.base + points.len() * self.gain;
        let fg = self.gt.foreground();
        let mut p = vec![0.0f32; self.gt.data().len()];
        for &i in fg.iter().take(n) {
            p[i] = 1.0;
        }
        Ok(Prediction { prob: ProbGrid::new(self.gt.dims(), p)?, confidence: ProbGrid::full(self.gt.dims(), 1.0) })
    }
}

fn ball(d: usize, r: f64) -> BinaryMask {
    let c = (d as f64 - 1.0) / 2.0;
    BinaryMask::from_fn([d; 3], Spacing::ISO, |i, j, k| {
        (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2) <= r * r
    })
}

#[test]
fn oracle_is_best_at_the_unprompted_step() {
    let gt = ball(12, 4.0);
    let oracle = Growing { gt: gt.clone(), base: usize::MAX / 2, gain: 0 };
    let out = eval_case(&oracle, &Volume::zeros([12; 3], Spacing::ISO), &gt, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.best_step, 0);
    assert_eq!(out.best_report.dsc, 1.0);
    assert_eq!(out.reports.len(), 6);
}

#[test]
fn improving_model_is_best_at_the_last_step() {
    let gt = ball(12, 4.0);
    let model = Growing { gt: gt.clone(), base: 10, gain: 20 };
    let out = eval_case(&model, &Volume::zeros([12; 3], Spacing::ISO), &gt, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(out.steps.len(), 11);
    assert_eq!(out.best_step, 10);
    assert!(out.reports.windows(2).all(|w| w[1].dsc > w[0].dsc));
    assert_eq!(out.trace.points.len(), 10);
    assert!(out.trace.points.iter().all(|p| p.label == 1 && gt.get(p.coord[0] as usize, p.coord[1] as usize, p.coord[2] as usize)));
}

#[test]
fn ties_resolve_to_the_earliest_step() {
    let gt = ball(12, 4.0);
    let flat = Growing { gt: gt.clone(), base: 40, gain: 0 };
    let out = eval_case(&flat, &Volume::zeros([12; 3], Spacing::ISO), &gt, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(out.best_step, 0);
    assert!(out.reports.iter().all(|r| r.dsc == out.reports[0].dsc));
}

#[test]
fn appending_a_worse_candidate_keeps_the_choice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rand::Rng::random_range(&mut rng, 1..12);
        let mut d: Vec<f64> = (0..n).map(|_| (rand::Rng::random_range(&mut rng, 0..5) as f64) / 4.0).collect();
        let best = best_candidate(&d);
        let worst = d.iter().cloned().fold(f64::INFINITY, f64::min);
        d.push(worst - 0.01);
        assert_eq!(best_candidate(&d), best);
    }
}

#[test]
fn empty_ground_truth_is_rejected() {
    let gt = BinaryMask::zeros([6; 3], Spacing::ISO);
    let m = Growing { gt: gt.clone(), base: 0, gain: 0 };
    let r = eval_case(&m, &Volume::zeros([6; 3], Spacing::ISO), &gt, 5, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::NoForeground)));
}

#[test]
fn large_volumes_are_evaluated_window_by_window() {
    let model = Sat3d::new(ModelConfig::tiny(16)).unwrap();
    let (v, gt) = generate_phantom(&PhantomSpec { grid: [24, 16, 20], radius: (3.0, 5.0), seed: 4, ..Default::default() }).unwrap();
    let out = eval_case(&model, &v, &gt, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.steps.len(), 4);
    assert_eq!(out.best_mask.dims(), [24, 16, 20]);
    assert!(out.steps.iter().all(|s| s.confidence.data().iter().all(|c| (0.0..=1.0).contains(c))));
}

#[test]
fn protocol_budgets_are_validated() {
    assert_eq!(EvalProtocol::full().budgets(), &[5, 10, 15, 20]);
    assert!(EvalProtocol::full().foreground_only());
    assert!(EvalProtocol::new(vec![5, 20]).is_ok());
    assert!(matches!(EvalProtocol::new(vec![]), Err(Error::Config(_))));
    assert!(matches!(EvalProtocol::new(vec![7]), Err(Error::Config(_))));
}
