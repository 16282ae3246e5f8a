use sat3d_core::losses::LossWeights;
use sat3d_core::metrics::MetricReport;
use sat3d_core::netblocks::{Group, ModelConfig, Sat3d};
use sat3d_core::promptloop::{PointPrompt, Prediction, PromptableModel};
use sat3d_core::trainer::{evaluate_epoch, AdamW, TrainConfig, Trainer};
use sat3d_core::volgrid::{generate_phantom, znormalize, BinaryMask, PhantomSpec, ProbGrid, Volume};
use sat3d_core::Error;
use sat3d_tensor::{Gradients, Graph, ParamStore, Tensor};

fn phantoms(n: u64, size: usize) -> Vec<(Volume, BinaryMask)> {
    (0..n)
        .map(|seed| {
            let spec = PhantomSpec { grid: [size; 3], radius: (size as f64 / 6.0, size as f64 / 4.0), seed, ..Default::default() };
            let (v, m) = generate_phantom(&spec).unwrap();
            (znormalize(&v).unwrap(), m)
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig { epochs: 4, t_max: 4, m: 3, ..TrainConfig::desk() }
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(Sat3d::new(ModelConfig::tiny(16)).unwrap(), cfg).unwrap()
}

fn snapshot(store: &ParamStore, group: Option<Group>) -> Vec<f32> {
    store
        .iter()
        .filter(|(_, n, _)| group.is_none_or(|g| Group::of(n) == Some(g)))
        .flat_map(|(_, _, t)| t.data().to_vec())
        .collect()
}

fn generator_params(store: &ParamStore) -> Vec<f32> {
    store.iter().filter(|(_, n, _)| Group::of(n) != Some(Group::Critic)).flat_map(|(_, _, t)| t.data().to_vec()).collect()
}

#[test]
fn one_step_is_deterministic() {
    let data = phantoms(2, 16);
    let a = trainer(tiny_config()).train_step(&data).unwrap();
    let b = trainer(tiny_config()).train_step(&data).unwrap();
    assert_eq!(a, b);
    assert!(a.updated && a.step == 1);
}

#[test]
fn weighted_total_identity_holds_every_step() {
    let data = phantoms(2, 16);
    let mut t = trainer(tiny_config());
    for _ in 0..3 {
        let r = t.train_step(&data).unwrap();
        for l in r.samples.iter().chain([&r.loss]) {
            assert_eq!(l.l_total, l.l_s + 0.01 * l.l_c + 0.1 * l.l_u);
            assert_eq!(l.l_s, l.l_dice + l.l_ce);
            assert!(l.is_finite());
        }
    }
}

#[test]
fn ablation_leaves_critic_without_generator_gradient() {
    let (v, gt) = phantoms(1, 16).remove(0);
    let off = TrainConfig { loss: LossWeights { lambda_c: 0.0, lambda_u: 0.0, ..LossWeights::default() }, ..tiny_config() };
    let t = trainer(off);
    let phase = t.generator_phase(&v, &gt, &mut t.sample_rng(0)).unwrap();
    assert_eq!(phase.grads.sq_norm(t.critic_ids().iter().copied()), 0.0);
    assert!(phase.grads.sq_norm(t.generator_ids().iter().copied()) > 0.0);

    // with the default weights the adversarial term reaches the critic
    let t = trainer(tiny_config());
    let phase = t.generator_phase(&v, &gt, &mut t.sample_rng(0)).unwrap();
    assert!(phase.grads.sq_norm(t.critic_ids().iter().copied()) > 0.0);
}

/// Gradient of the sum of every parameter: ones everywhere.
fn unit_gradients(store: &ParamStore) -> Gradients {
    let g = Graph::new();
    let loss = store.ids().map(|id| g.param(store, id).sum_all()).reduce(|a, b| a.add(&b)).unwrap();
    g.backward(&loss)
}

#[test]
fn updates_are_exclusive() {
    let mut t = trainer(tiny_config());
    let grads = unit_gradients(&t.model.params);
    let critic0 = snapshot(&t.model.params, Some(Group::Critic));
    let gen0 = generator_params(&t.model.params);
    t.generator_update(&grads);
    assert_eq!(snapshot(&t.model.params, Some(Group::Critic)), critic0);
    let gen1 = generator_params(&t.model.params);
    assert_ne!(gen1, gen0);
    t.critic_update(&grads);
    assert_eq!(generator_params(&t.model.params), gen1);
    assert_ne!(snapshot(&t.model.params, Some(Group::Critic)), critic0);
}

#[test]
fn accumulation_matches_one_large_batch() {
    let data = phantoms(2, 16);
    let mut whole = trainer(TrainConfig { batch_size: 2, accumulation: 1, ..tiny_config() });
    let mut split = trainer(TrainConfig { batch_size: 1, accumulation: 2, ..tiny_config() });
    for _ in 0..2 {
        whole.train_epoch(&data).unwrap();
        split.train_epoch(&data).unwrap();
    }
    assert_eq!(whole.step, 2);
    assert_eq!(split.step, 2);
    let (a, b) = (snapshot(&whole.model.params, None), snapshot(&split.model.params, None));
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-6, "max parameter difference {worst}");
}

#[test]
fn group_step_sizes_follow_the_rate_multipliers() {
    // a quadratic with unit gradient everywhere: Adam's first step is
    // lr / (1 + eps) per entry, so step sizes expose the rates
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::full() };
    let mut store = ParamStore::new();
    for g in ["encoder.w", "prompt.w", "decoder.w"] {
        store.insert(g, Tensor::zeros([7]));
    }
    let ids: Vec<_> = store.ids().collect();
    let grads = unit_gradients(&store);
    let before = snapshot(&store, None);
    let rates = [Group::Encoder, Group::Prompt, Group::Decoder].map(|gr| cfg.group_lr(gr, 0));
    let mut opt = AdamW::new();
    opt.step(&mut store, &grads, &ids, |id| rates[id.0], &cfg);
    let after = snapshot(&store, None);
    let step: Vec<f64> = (0..3).map(|i| (before[i * 7] - after[i * 7]).abs() as f64).collect();
    assert!((step[1] / step[0] - 0.1).abs() < 1e-5, "{step:?}");
    assert!((step[2] / step[0] - 0.1).abs() < 1e-5, "{step:?}");
    assert!((step[0] - 8e-4).abs() < 1e-9, "{step:?}");
}

#[test]
fn adamw_matches_reference_update() {
    // two steps checked against the decoupled-decay recurrence in f64
    let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::full() };
    let mut store = ParamStore::new();
    let id = store.insert("encoder.w", Tensor::new([2], vec![0.5, -1.5]));
    let (lr, (b1, b2), eps, wd) = (1e-2f64, cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut p = [0.5f64, -1.5];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    let mut opt = AdamW::new();
    for t in 1..=2 {
        let gv = [p[0] * 2.0, p[1] * 2.0];
        let mut g = Gradients::default();
        let graph = Graph::new();
        let x = graph.param(&store, id);
        g.accumulate(&graph.backward(&x.mul(&x).sum_all()), 1.0);
        opt.step(&mut store, &g, &[id], |_| lr, &cfg);
        for i in 0..2 {
            p[i] *= 1.0 - lr * wd;
            m[i] = b1 * m[i] + (1.0 - b1) * gv[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gv[i] * gv[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..2 {
            assert!((store.get(id).data()[i] as f64 - p[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn cosine_schedule_is_the_closed_form() {
    let cfg = TrainConfig { base_lr: 3e-3, eta_min: 1e-5, t_max: 37, ..TrainConfig::full() };
    for e in 0..=80 {
        let expect = 1e-5 + (3e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * e as f64 / 37.0).cos()) / 2.0;
        assert_eq!(cfg.lr_at(e), expect);
    }
    let full = TrainConfig::full();
    assert_eq!(full.lr_at(full.t_max), 0.0);
}

#[test]
fn critic_learns_against_a_frozen_generator() {
    let (_, gt) = phantoms(1, 16).remove(0);
    let mut t = trainer(TrainConfig { base_lr: 1e-3, ..tiny_config() });
    let fake = ProbGrid::full([16; 3], 0.5);
    let gen0 = generator_params(&t.model.params);
    let mut losses = vec![];
    for _ in 0..50 {
        let (g, l) = t.critic_phase(&gt, std::slice::from_ref(&fake)).unwrap();
        losses.push(l);
        t.critic_update(&g);
    }
    assert_eq!(generator_params(&t.model.params), gen0);
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head - 0.05, "critic loss {head} -> {tail}");
}

#[test]
fn critic_cannot_beat_chance_on_identical_inputs() {
    // D(gt) = D(pred) per voxel, and -ln d - ln(1-d) >= 2 ln 2
    let (_, gt) = phantoms(1, 16).remove(0);
    let pred = ProbGrid::new([16; 3], gt.to_f32()).unwrap();
    let mut t = trainer(TrainConfig { base_lr: 1e-3, ..tiny_config() });
    let mut losses = vec![];
    for _ in 0..50 {
        let (g, l) = t.critic_phase(&gt, std::slice::from_ref(&pred)).unwrap();
        losses.push(l);
        t.critic_update(&g);
    }
    let floor = 2.0 * std::f64::consts::LN_2;
    assert!(losses.iter().all(|&l| l >= floor - 1e-9), "{losses:?}");
    assert!(losses[49] <= losses[0] + 1e-6);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let data = phantoms(2, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(tiny_config());
    full.train_epoch(&data).unwrap();
    full.save_checkpoint(dir.path().join("e1.safetensors")).unwrap();
    let expect = full.train_epoch(&data).unwrap();

    let mut resumed = Trainer::resume(dir.path().join("e1.safetensors"), None).unwrap();
    assert_eq!(resumed.epoch, 1);
    assert_eq!(resumed.config, tiny_config());
    let got = resumed.train_epoch(&data).unwrap();
    assert_eq!(got, expect);
    assert_eq!(snapshot(&resumed.model.params, None), snapshot(&full.model.params, None));
}

#[test]
fn fit_writes_log_and_checkpoints() {
    let data = phantoms(2, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(TrainConfig { epochs: 2, ..tiny_config() });
    let summary = t.fit(&data, &data[..1], Some(dir.path())).unwrap();
    assert_eq!(summary.epochs_run, 2);
    for f in ["latest", "loss_best", "dice_best"] {
        assert!(dir.path().join(format!("{f}.safetensors")).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["kind"] == "epoch").count(), 2);
    assert_eq!(lines.iter().filter(|l| l["kind"] == "step").count(), 2);
    assert!(lines.iter().all(|l| l["lr"].as_f64().is_some()));
    let latest = Trainer::resume(dir.path().join("latest.safetensors"), None).unwrap();
    assert_eq!((latest.epoch, latest.step), (2, 2));

    // a failed write leaves the previous checkpoint intact
    let before = std::fs::read(dir.path().join("latest.safetensors")).unwrap();
    let blocked = dir.path().join("latest.safetensors").join("nested.safetensors");
    assert!(matches!(t.save_checkpoint(&blocked), Err(Error::Checkpoint(_))));
    assert_eq!(std::fs::read(dir.path().join("latest.safetensors")).unwrap(), before);
}

#[test]
fn non_finite_loss_aborts() {
    let data = phantoms(1, 16);
    let mut t = trainer(tiny_config());
    let id = t.model.params.id("decoder.mask_token").expect("mask token");
    t.model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let before = snapshot(&t.model.params, None);
    assert!(matches!(t.train_step(&data), Err(Error::NanLoss { .. })));
    let after = snapshot(&t.model.params, None);
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

/// Ignores prompts and returns the mask stored for the volume, or an
/// empty mask for unknown volumes.
struct Lookup(Vec<(Volume, BinaryMask)>);

impl PromptableModel for Lookup {
    type Image = BinaryMask;

    fn embed(&self, v: &Volume) -> sat3d_core::Result<BinaryMask> {
        Ok(self.0.iter().find(|(x, _)| x == v).map_or_else(|| BinaryMask::zeros(v.dims(), v.spacing()), |(_, m)| m.clone()))
    }

    fn predict(&self, img: &BinaryMask, _: &[PointPrompt], _: &BinaryMask, _: &BinaryMask) -> sat3d_core::Result<Prediction> {
        Ok(Prediction { prob: ProbGrid::new(img.dims(), img.to_f32())?, confidence: ProbGrid::full(img.dims(), 1.0) })
    }
}

#[test]
fn evaluation_aggregates_protocol_reports() {
    let cases = phantoms(3, 16);
    let oracle = evaluate_epoch(&Lookup(cases.clone()), &cases, 5, 0).unwrap();
    assert_eq!(oracle, MetricReport::PERFECT);
    let empty = evaluate_epoch(&Lookup(vec![]), &cases, 5, 0).unwrap();
    assert_eq!(empty.dsc, 0.0);

    let half: Vec<(Volume, BinaryMask)> = cases
        .iter()
        .map(|(v, gt)| (v.clone(), BinaryMask::from_fn(gt.dims(), gt.spacing(), |i, j, k| gt.get(i, j, k) && i < 8)))
        .collect();
    let model = Lookup(half);
    let per_case: Vec<MetricReport> = cases.iter().map(|c| evaluate_epoch(&model, std::slice::from_ref(c), 5, 3).unwrap()).collect();
    let mean = evaluate_epoch(&model, &cases, 5, 3).unwrap();
    let expect = MetricReport::mean(&per_case).unwrap();
    for (a, b) in [(mean.dsc, expect.dsc), (mean.iou, expect.iou), (mean.rve, expect.rve), (mean.hd95, expect.hd95), (mean.assd, expect.assd)] {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(mean.dsc > 0.0 && mean.dsc < 1.0);
}
