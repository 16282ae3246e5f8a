//! Alternating min-max optimisation: a generator step on the weighted
//! segmentation/adversarial/uncertainty loss, then a critic step on its BCE.
//!
//! Both sub-networks use AdamW with decoupled weight decay and a cosine
//! learning-rate schedule evaluated per epoch. Gradients are mean-reduced
//! over every sample of an accumulation window before an update fires.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sat3d_tensor::{sigmoid, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::error::{Error, Result};
use crate::inference::eval_case;
use crate::losses::{tape, total_generator_loss, LossReport, LossWeights};
use crate::metrics::{dsc, MetricReport};
use crate::netblocks::{load_archive, save_archive, Archive};
use crate::netblocks::{Cx, Group, Sat3d};
use crate::promptloop::{drive_episode, PromptState, Prediction, PromptableModel, SampleMode, StepOutput};
use crate::volgrid::{augment, crop_or_pad, BinaryMask, ProbGrid, Volume};

/// Learning-rate multiplier per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrMultipliers {
    pub encoder: f64,
    pub prompt: f64,
    pub decoder: f64,
    pub critic: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self { encoder: 1.0, prompt: 0.1, decoder: 0.1, critic: 1.0 }
    }
}

impl LrMultipliers {
    pub fn of(&self, g: Group) -> f64 {
        match g {
            Group::Encoder => self.encoder,
            Group::Prompt => self.prompt,
            Group::Decoder => self.decoder,
            Group::Critic => self.critic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub lr_mult: LrMultipliers,
    /// Cosine horizon in epochs.
    pub t_max: usize,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub seed: u64,
    /// Prompt steps per training episode.
    pub m: usize,
    pub loss: LossWeights,
    /// Random flips/rotations before each episode.
    pub augment: bool,
    /// Point budget of the validation protocol.
    pub eval_budget: usize,
    /// Stop once the epoch's training Dice reaches this value.
    pub target_dice: Option<f64>,
    /// Stop after this many optimiser updates.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-scale schedule: 500 epochs, batches of 3 with 20-step accumulation.
    pub fn full() -> Self {
        Self {
            epochs: 500,
            base_lr: 8e-4,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lr_mult: LrMultipliers::default(),
            t_max: 500,
            eta_min: 0.0,
            batch_size: 3,
            accumulation: 20,
            seed: 0,
            m: 5,
            loss: LossWeights::default(),
            augment: true,
            eval_budget: 5,
            target_dice: None,
            max_steps: None,
        }
    }

    /// Small crops, batch 2, no accumulation; one epoch per pass over a
    /// handful of phantoms.
    pub fn desk() -> Self {
        Self { epochs: 300, t_max: 300, batch_size: 2, accumulation: 1, augment: false, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.accumulation == 0 || self.m == 0 {
            return bad("batch size, accumulation and prompt steps must be positive");
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || self.eta_min < 0.0 || self.t_max == 0 {
            return bad("learning rate schedule is invalid");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || !(self.adam_eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive");
        }
        if self.eval_budget == 0 {
            return bad("evaluation budget must be positive");
        }
        self.loss.validate()
    }

    /// Cosine-annealed base rate at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let phase = std::f64::consts::PI * epoch as f64 / self.t_max as f64;
        self.eta_min + (self.base_lr - self.eta_min) * (1.0 + phase.cos()) / 2.0
    }

    pub fn group_lr(&self, g: Group, epoch: usize) -> f64 {
        self.lr_at(epoch) * self.lr_mult.of(g)
    }
}

/// AdamW with decoupled weight decay: `p -= lr·wd·p`, then the
/// bias-corrected Adam step.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    /// Number of updates applied so far.
    pub t: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter in `ids` that has a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        ids: &[ParamId],
        lr: impl Fn(ParamId) -> f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let n = g.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let lr = lr(id);
            let decay = (1.0 - lr * cfg.weight_decay) as f32;
            let (b1f, b2f) = (b1 as f32, b2 as f32);
            let (a1, a2) = ((1.0 - b1) as f32, (1.0 - b2) as f32);
            let step = (lr / c1) as f32;
            let c2s = c2.sqrt() as f32;
            let eps = cfg.adam_eps as f32;
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1f * m[i] + a1 * gi;
                v[i] = b2f * v[i] + a2 * gi * gi;
                p[i] = p[i] * decay - step * m[i] / (v[i].sqrt() / c2s + eps);
            }
        }
    }

    fn to_tensors(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, name, t) in store.iter() {
            if let Some(Some((m, v))) = self.moments.get(id.0) {
                out.push((format!("{prefix}.m.{name}"), Tensor::new(t.shape().to_vec(), m.clone())));
                out.push((format!("{prefix}.v.{name}"), Tensor::new(t.shape().to_vec(), v.clone())));
            }
        }
        out
    }

    fn from_archive(a: &Archive, prefix: &str, store: &ParamStore, t: u64) -> Self {
        let mut o = Self { t, moments: vec![None; store.len()] };
        for (id, name, _) in store.iter() {
            if let (Some(m), Some(v)) = (a.tensor(&format!("{prefix}.m.{name}")), a.tensor(&format!("{prefix}.v.{name}"))) {
                o.moments[id.0] = Some((m.data().to_vec(), v.data().to_vec()));
            }
        }
        o
    }
}

/// Outcome of one micro-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    /// Optimiser updates applied after this micro-batch.
    pub step: usize,
    pub updated: bool,
    pub loss: LossReport,
    /// Dice of each sample's final-step prediction.
    pub dice: Vec<f64>,
    /// Per-sample loss reports (mean over the episode).
    pub samples: Vec<LossReport>,
}

/// Gradients and bookkeeping of one sample's generator phase.
pub struct GeneratorPhase {
    pub grads: Gradients,
    pub report: LossReport,
    pub steps: Vec<StepOutput>,
    pub step_losses: Vec<LossReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_loss: Option<f64>,
    pub best_dice: Option<f64>,
    pub final_dice: Option<f64>,
    pub reached_target: bool,
}

/// Training state: model, both optimisers and pending gradients.
pub struct Trainer {
    pub model: Sat3d,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Optimiser updates applied so far.
    pub step: usize,
    pub best_loss: Option<f64>,
    pub best_dice: Option<f64>,
    gen_opt: AdamW,
    critic_opt: AdamW,
    gen_acc: Gradients,
    critic_acc: Gradients,
    /// Samples accumulated since the last update.
    pending_samples: usize,
    pending_micro: usize,
    samples_seen: u64,
    gen_ids: Vec<ParamId>,
    critic_ids: Vec<ParamId>,
}

const FORMAT_KEY: &str = "trainer";

impl Trainer {
    pub fn new(model: Sat3d, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (mut gen_ids, mut critic_ids) = (vec![], vec![]);
        for (id, name, _) in model.params.iter() {
            match Group::of(name) {
                Some(Group::Critic) => critic_ids.push(id),
                Some(_) => gen_ids.push(id),
                None => return Err(Error::Config(format!("parameter {name} belongs to no group"))),
            }
        }
        Ok(Self {
            model,
            config,
            epoch: 0,
            step: 0,
            best_loss: None,
            best_dice: None,
            gen_opt: AdamW::new(),
            critic_opt: AdamW::new(),
            gen_acc: Gradients::default(),
            critic_acc: Gradients::default(),
            pending_samples: 0,
            pending_micro: 0,
            samples_seen: 0,
            gen_ids,
            critic_ids,
        })
    }

    pub fn generator_ids(&self) -> &[ParamId] {
        &self.gen_ids
    }

    pub fn critic_ids(&self) -> &[ParamId] {
        &self.critic_ids
    }

    /// Rng for the `n`-th training sample since the start of training, so
    /// episodes do not depend on how samples are grouped into batches.
    pub fn sample_rng(&self, n: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(n);
        r
    }

    /// Runs one training episode with a recording graph. The gradients
    /// cover every parameter the loss reaches, critic included; only the
    /// generator entries are ever applied.
    pub fn generator_phase(&self, volume: &Volume, gt: &BinaryMask, rng: &mut ChaCha8Rng) -> Result<GeneratorPhase> {
        let m = &self.model;
        let s = m.config.input_size;
        if volume.dims() != [s; 3] || gt.dims() != [s; 3] {
            return Err(Error::Shape(format!("training crops must be {s}^3, got {:?}", volume.dims())));
        }
        let w = self.config.loss;
        let t = m.config.threshold;
        let gtf = gt.to_f32();
        let g = Graph::new();
        let cx = Cx::new(&g, &m.params);
        let img = m.encoder.forward(cx, &cx.constant(Tensor::new([1, s, s, s], volume.data().to_vec())));
        let mut terms: Vec<Var> = Vec::with_capacity(self.config.m);
        let mut reports = Vec::with_capacity(self.config.m);
        let steps = drive_episode(gt, self.config.m, SampleMode::Train, t, rng, |st: &PromptState| {
            let (sparse, dense) = m.prompt.forward(cx, &st.points, &st.prev_mask.to_f32(), &st.prev_conf_bin.to_f32())?;
            let logits = m.decoder.forward(cx, &m.prompt, &img, &sparse, &dense);
            let prob = logits.sigmoid();
            let critic_logits = m.critic.forward(cx, &prob);
            let confidence: Vec<f32> = critic_logits.value().data().iter().map(|&z| sigmoid(z)).collect();
            let (seg_v, seg) = tape::seg_loss(&logits, &gtf, w.epsilon);
            let (adv_v, l_c) = tape::adv_loss(&critic_logits);
            let (mce_v, l_u) = tape::masked_ce(&logits, &gtf, &confidence, w.threshold);
            let r = total_generator_loss(seg, l_c, l_u, &w);
            if !r.is_finite() {
                let snap = json!({ "episode_step": st.step, "points": st.points, "loss": format!("{r:?}") });
                return Err(Error::NanLoss { step: self.step, snapshot: snap.to_string() });
            }
            terms.push(seg_v.add(&adv_v.scale(w.lambda_c as f32)).add(&mce_v.scale(w.lambda_u as f32)));
            reports.push(r);
            Ok(Prediction { prob: ProbGrid::new([s; 3], prob.value().data().to_vec())?, confidence: ProbGrid::new([s; 3], confidence)? })
        })?;
        let report = mean_report(&reports, &w);
        let n = terms.len() as f32;
        let total = terms.iter().skip(1).fold(terms[0].clone(), |a, b| a.add(b)).scale(1.0 / n);
        let grads = g.backward(&total);
        Ok(GeneratorPhase { grads, report, steps, step_losses: reports })
    }

    /// Critic BCE between the ground truth (real) and each detached
    /// prediction (fake), averaged over predictions.
    pub fn critic_phase(&self, gt: &BinaryMask, preds: &[ProbGrid]) -> Result<(Gradients, f64)> {
        if preds.is_empty() {
            return Err(Error::Config("critic phase needs at least one prediction".into()));
        }
        let m = &self.model;
        let d = gt.dims();
        let g = Graph::new();
        let cx = Cx::new(&g, &m.params);
        let grid = |v: Vec<f32>| cx.constant(Tensor::new([1, d[0], d[1], d[2]], v));
        let on_gt = m.critic.forward(cx, &grid(gt.to_f32()));
        let mut total: Option<Var> = None;
        let mut value = 0.0;
        for p in preds {
            if p.dims() != d {
                return Err(Error::Shape(format!("prediction {:?} vs ground truth {d:?}", p.dims())));
            }
            let on_pred = m.critic.forward(cx, &grid(p.data().to_vec()));
            let (l, v) = tape::critic_loss(&on_gt, &on_pred);
            value += v / preds.len() as f64;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l),
            });
        }
        if !value.is_finite() {
            return Err(Error::NanLoss { step: self.step, snapshot: json!({ "l_critic": value }).to_string() });
        }
        Ok((g.backward(&total.unwrap().scale(1.0 / preds.len() as f32)), value))
    }

    /// Generator phase then critic phase for every sample of one
    /// micro-batch; an update fires every `accumulation` micro-batches.
    pub fn train_step(&mut self, batch: &[(Volume, BinaryMask)]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut samples = Vec::with_capacity(batch.len());
        let mut dice = Vec::with_capacity(batch.len());
        for (i, (v, gt)) in batch.iter().enumerate() {
            let mut rng = self.sample_rng(self.samples_seen + i as u64);
            let (v, gt) = if self.config.augment {
                let (av, am) = augment(v, gt, rand::Rng::random(&mut rng))?;
                crop_or_pad(&av, &am, v.dims())?
            } else {
                (v.clone(), gt.clone())
            };
            let gp = self.generator_phase(&v, &gt, &mut rng)?;
            let preds: Vec<ProbGrid> = gp.steps.iter().map(|s| s.prob.clone()).collect();
            let (cg, l_critic) = self.critic_phase(&gt, &preds)?;
            let (mut gg, mut cg) = (gp.grads, cg);
            drop_entries(&mut gg, &self.critic_ids);
            drop_entries(&mut cg, &self.gen_ids);
            self.gen_acc.accumulate(&gg, 1.0);
            self.critic_acc.accumulate(&cg, 1.0);
            dice.push(dsc(&gp.steps.last().unwrap().pred, &gt)?);
            samples.push(LossReport { l_critic, ..gp.report });
        }
        self.pending_samples += batch.len();
        self.samples_seen += batch.len() as u64;
        self.pending_micro += 1;
        let updated = self.pending_micro == self.config.accumulation;
        if updated {
            self.apply_update();
        }
        let mut loss = mean_report(&samples, &self.config.loss);
        loss.l_critic = samples.iter().map(|r| r.l_critic).sum::<f64>() / samples.len() as f64;
        Ok(StepReport { epoch: self.epoch, step: self.step, updated, loss, dice, samples })
    }

    /// Applies pending gradients, mean-reduced over the samples seen.
    fn apply_update(&mut self) {
        if self.pending_samples == 0 {
            return;
        }
        let scale = 1.0 / self.pending_samples as f32;
        let mut gen = std::mem::take(&mut self.gen_acc);
        let mut critic = std::mem::take(&mut self.critic_acc);
        gen.scale(scale);
        critic.scale(scale);
        self.generator_update(&gen);
        self.critic_update(&critic);
        self.pending_samples = 0;
        self.pending_micro = 0;
        self.step += 1;
    }

    /// Current learning rate of every parameter, indexed by id.
    fn rates(&self) -> Vec<f64> {
        self.model.params.iter().map(|(_, n, _)| self.config.group_lr(Group::of(n).expect("grouped"), self.epoch)).collect()
    }

    /// One AdamW step on the generator parameters; critic entries of
    /// `grads` are ignored.
    pub fn generator_update(&mut self, grads: &Gradients) {
        let lr = self.rates();
        self.gen_opt.step(&mut self.model.params, grads, &self.gen_ids, |id| lr[id.0], &self.config);
    }

    /// One AdamW step on the critic parameters; generator entries of
    /// `grads` are ignored.
    pub fn critic_update(&mut self, grads: &Gradients) {
        let lr = self.rates();
        self.critic_opt.step(&mut self.model.params, grads, &self.critic_ids, |id| lr[id.0], &self.config);
    }

    /// Runs one epoch over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[(Volume, BinaryMask)]) -> Result<Vec<StepReport>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX - self.epoch as u64);
        order.shuffle(&mut rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|s| self.step >= s) {
                break;
            }
            let batch: Vec<(Volume, BinaryMask)> = chunk.iter().map(|&i| data[i].clone()).collect();
            out.push(self.train_step(&batch)?);
        }
        // leftover micro-batches update at the epoch boundary so a
        // checkpoint never holds unapplied gradients
        if self.pending_micro > 0 {
            self.apply_update();
            if let Some(last) = out.last_mut() {
                last.updated = true;
                last.step = self.step;
            }
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Trains until `epochs`, the target Dice or the step cap. Writes a
    /// JSON-lines log and the `latest`, `loss_best` and `dice_best`
    /// checkpoints under `out_dir` when given. Validation Dice comes from
    /// the K-point protocol on `val`; without a validation set the mean
    /// final-step training Dice is tracked instead.
    pub fn fit(&mut self, data: &[(Volume, BinaryMask)], val: &[(Volume, BinaryMask)], out_dir: Option<&Path>) -> Result<FitSummary> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::Checkpoint(format!("{}: {e}", d.display())))?;
                Some(OpenOptions::new().create(true).append(true).open(d.join("train_log.jsonl"))?)
            }
            None => None,
        };
        let mut summary = FitSummary { best_loss: self.best_loss, best_dice: self.best_dice, ..Default::default() };
        while self.epoch < self.config.epochs {
            if self.config.max_steps.is_some_and(|s| self.step >= s) {
                break;
            }
            let lr = self.config.lr_at(self.epoch);
            let reports = self.train_epoch(data)?;
            let epoch = self.epoch - 1;
            let losses: Vec<LossReport> = reports.iter().flat_map(|r| r.samples.iter().copied()).collect();
            let mut mean = mean_report(&losses, &self.config.loss);
            mean.l_critic = losses.iter().map(|r| r.l_critic).sum::<f64>() / losses.len().max(1) as f64;
            let train_dice = mean_of(reports.iter().flat_map(|r| r.dice.iter().copied()));
            let val_dice = if val.is_empty() {
                None
            } else {
                Some(evaluate_epoch(&self.model, val, self.config.eval_budget, self.config.seed ^ epoch as u64)?.dsc)
            };
            let tracked = val_dice.or(train_dice);
            if let Some(f) = log.as_mut() {
                for r in &reports {
                    writeln!(f, "{}", json!({ "kind": "step", "epoch": epoch, "step": r.step, "lr": lr, "loss": r.loss, "dice": r.dice }))?;
                }
                writeln!(f, "{}", json!({ "kind": "epoch", "epoch": epoch, "step": self.step, "lr": lr, "loss": mean, "train_dice": train_dice, "val_dice": val_dice }))?;
            }
            info!(epoch, step = self.step, loss = mean.l_total, critic = mean.l_critic, dice = ?tracked, "epoch done");
            let better_loss = self.best_loss.is_none_or(|b| mean.l_total < b);
            let better_dice = tracked.is_some_and(|d| self.best_dice.is_none_or(|b| d > b));
            if better_loss {
                self.best_loss = Some(mean.l_total);
            }
            if better_dice {
                self.best_dice = tracked;
            }
            if let Some(d) = out_dir {
                self.save_checkpoint(d.join("latest.safetensors"))?;
                if better_loss {
                    self.save_checkpoint(d.join("loss_best.safetensors"))?;
                }
                if better_dice {
                    self.save_checkpoint(d.join("dice_best.safetensors"))?;
                }
            }
            summary.epochs_run += 1;
            summary.final_dice = tracked;
            if let (Some(t), Some(d)) = (self.config.target_dice, train_dice) {
                if d >= t {
                    summary.reached_target = true;
                    break;
                }
            }
        }
        summary.steps = self.step;
        summary.best_loss = self.best_loss;
        summary.best_dice = self.best_dice;
        Ok(summary)
    }

    fn to_archive(&self) -> Archive {
        let state = json!({
            FORMAT_KEY: {
                "epoch": self.epoch,
                "step": self.step,
                "samples_seen": self.samples_seen,
                "best_loss": self.best_loss,
                "best_dice": self.best_dice,
                "gen_t": self.gen_opt.t,
                "critic_t": self.critic_opt.t,
                "config": self.config,
            }
        });
        let mut a = self.model.to_archive(state);
        a.tensors.extend(self.gen_opt.to_tensors("adamw.generator", &self.model.params));
        a.tensors.extend(self.critic_opt.to_tensors("adamw.critic", &self.model.params));
        a
    }

    /// Model, optimiser moments and counters, written atomically.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_archive(&self.to_archive(), path)
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`]. The
    /// stored training config is used unless `config` overrides it.
    pub fn resume(path: impl AsRef<Path>, config: Option<TrainConfig>) -> Result<Self> {
        let a = load_archive(path)?;
        let model = Sat3d::from_archive(&a)?;
        let st = a.extra.get(FORMAT_KEY).ok_or_else(|| Error::Checkpoint("archive holds no training state".into()))?;
        let cfg = match config {
            Some(c) => c,
            None => serde_json::from_value(st["config"].clone())?,
        };
        let mut t = Trainer::new(model, cfg)?;
        let num = |k: &str| st[k].as_u64().ok_or_else(|| Error::Checkpoint(format!("training state lacks {k}")));
        t.epoch = num("epoch")? as usize;
        t.step = num("step")? as usize;
        t.samples_seen = num("samples_seen")?;
        t.best_loss = st["best_loss"].as_f64();
        t.best_dice = st["best_dice"].as_f64();
        t.gen_opt = AdamW::from_archive(&a, "adamw.generator", &t.model.params, num("gen_t")?);
        t.critic_opt = AdamW::from_archive(&a, "adamw.critic", &t.model.params, num("critic_t")?);
        Ok(t)
    }
}

/// Mean of `reports` with the sums recomputed from the averaged parts, so
/// the weighted-sum identities hold exactly for the logged values.
fn mean_report(reports: &[LossReport], w: &LossWeights) -> LossReport {
    let mut m = LossReport::mean(reports);
    m.l_s = m.l_dice + m.l_ce;
    m.l_total = m.l_s + w.lambda_c * m.l_c + w.lambda_u * m.l_u;
    m
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Removes the gradient entries of `ids`.
fn drop_entries(g: &mut Gradients, ids: &[ParamId]) {
    let skip: HashSet<ParamId> = ids.iter().copied().collect();
    g.retain(|id| !skip.contains(&id));
}

/// Mean best-candidate metrics of the K-point protocol over `cases`.
pub fn evaluate_epoch<M: PromptableModel>(model: &M, cases: &[(Volume, BinaryMask)], k: usize, seed: u64) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for (i, (v, gt)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        reports.push(eval_case(model, v, gt, k, &mut rng)?.best_report);
    }
    MetricReport::mean(&reports).ok_or_else(|| Error::Config("validation set is empty".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let c = TrainConfig::full();
        assert_eq!(c.lr_at(0), 8e-4);
        assert!(c.lr_at(500).abs() < 1e-18);
        assert!((c.lr_at(250) - 4e-4).abs() < 1e-15);
    }

    #[test]
    fn group_rates() {
        let c = TrainConfig::full();
        assert_eq!(c.group_lr(Group::Prompt, 0), 8e-5);
        assert_eq!(c.group_lr(Group::Critic, 0), 8e-4);
    }

    #[test]
    fn invalid_config() {
        let c = TrainConfig { accumulation: 0, ..TrainConfig::desk() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
