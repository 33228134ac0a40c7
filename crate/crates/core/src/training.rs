//! Base pre-training and preference fine-tuning.
//!
//! Fine-tuning follows the actor/reference scheme: the reference is a
//! frozen copy of the adapter-equipped base taken before the first update;
//! every step re-mines preference pairs with the current actor, computes
//! the hybrid loss and takes one AdamW step on the adapter factors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, exemplar_prompts, EvalProtocol};
use crate::losses::{bce, instance_objective, mask_log_likelihood_grad, LossBreakdown, LossConfig};
use crate::mask::{binarize, compute_dice, compute_iou, BinaryMask, Image, InstanceMask};
use crate::mining::{
    candidates_from_outputs, mine_from_grid, prompt_set_for_tier, sample_tier, synthesize_prompt_sets, MinedInstance,
    MiningConfig,
};
use crate::model::ops::FeatureMap;
use crate::model::{
    clone_frozen, encode, encode_backward, finish_gradients, init_params, save_checkpoint, ArchConfig, DecodeCache,
    Encoded,
    Gradients, ModelParams, ParamView, Prepared, TrainMode,
};
use crate::rng::{self, derive_seed, streams};
use crate::synthdata::{build_task_target, DataRatio, DatasetSplit, Scene, TaskMode};

/// Scenes plus their validation / training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, split_seed: u64) -> Result<Self> {
        let ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
        let split = DatasetSplit::new(&ids, split_seed)?;
        Ok(Self { scenes, split })
    }

    pub fn train_scenes(&self, ratio: DataRatio) -> Vec<&Scene> {
        self.split.train_slice(ratio).iter().map(|i| &self.scenes[*i]).collect()
    }

    pub fn validation_scenes(&self) -> Vec<&Scene> {
        self.split.validation.iter().map(|i| &self.scenes[*i]).collect()
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamW {
    pub fn new(params: &ModelParams, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, view: &ParamView) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in &view.ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = params.get_mut(id)?;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= self.learning_rate * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// SHA-256 over the non-adapter tensors only.
pub fn frozen_base_hash(params: &ModelParams) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (id, t) in params.named().filter(|(id, _)| !id.is_adapter()) {
        h.update(id.name().as_bytes());
        for v in t {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Runs `f` on a pool of `jobs` threads (one when `deterministic`).
pub fn with_pool<T: Send>(jobs: Option<usize>, deterministic: bool, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = if deterministic { 1 } else { jobs.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn map_items<T: Sync, R: Send>(items: &[T], deterministic: bool, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if deterministic {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

// ---------------------------------------------------------------------------
// Pre-training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Step budget.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Stop once validation Dice reaches this value.
    pub dice_floor: f64,
    pub eval_every: usize,
    /// Instances whose centroids lie within this distance of the prompted
    /// one form the middle hypothesis target.
    pub group_radius: f64,
    pub quality_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            dice_floor: 0.60,
            eval_every: 50,
            group_radius: 14.0,
            quality_weight: 1.0,
            seed: 0,
        }
    }
}

fn centroid(m: &BinaryMask) -> (f64, f64) {
    let c = m.coords();
    let n = c.len().max(1) as f64;
    let (r, s) = c.iter().fold((0.0, 0.0), |(a, b), (r, s)| (a + *r as f64, b + *s as f64));
    (r / n, s / n)
}

/// Targets for the `m` hypotheses, from narrowest to widest: the prompted
/// instance, the instances around it, every instance in the scene.
pub fn hierarchy_targets(scene: &Scene, instance: &InstanceMask, m: usize, group_radius: f64) -> Vec<BinaryMask> {
    let shape = instance.mask().shape();
    let (cr, cc) = centroid(instance.mask());
    let mut group = BinaryMask::empty(shape);
    let mut all = BinaryMask::empty(shape);
    for other in &scene.instances {
        let (r, c) = centroid(other.mask());
        if ((r - cr).powi(2) + (c - cc).powi(2)).sqrt() <= group_radius {
            group.union_with(other.mask()).expect("same shape");
        }
        all.union_with(other.mask()).expect("same shape");
    }
    let levels = [instance.mask().clone(), group, all];
    (0..m).map(|j| levels[j.min(2)].clone()).collect()
}

/// Mean Dice of each hypothesis against its hierarchy target, prompting
/// one exemplar per scene with clean points.
pub fn pretrain_validation_dice(params: &ModelParams, scenes: &[&Scene], cfg: &PretrainConfig) -> Result<f64> {
    let protocol = EvalProtocol {
        task_mode: TaskMode::T1,
        seed: cfg.seed,
        ..EvalProtocol::default()
    };
    let prepared = Prepared::new(params);
    let per_scene = scenes
        .par_iter()
        .map(|s| -> Result<f64> {
            let prompts = exemplar_prompts(s, &protocol)?.expect("T1 always has an exemplar");
            let inst = s.instance(prompts.target_instance_id).expect("exemplar exists");
            let targets = hierarchy_targets(s, inst, params.arch.num_masks, cfg.group_radius);
            let out = prepared.decode(&encode(params, &s.image)?, &prompts)?.0;
            let mut sum = 0.0;
            for (logits, t) in out.mask_logits.iter().zip(&targets) {
                sum += compute_dice(&binarize(logits, 0.0), t)?;
            }
            Ok(sum / targets.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.iter().sum::<f64>() / per_scene.len().max(1) as f64)
}

fn pretrain_item(
    params: &ModelParams,
    prepared: &Prepared<'_>,
    scene: &Scene,
    cfg: &PretrainConfig,
    step: usize,
) -> Result<(f64, Gradients)> {
    let mut r = rng::substream(cfg.seed, streams::PROMPTS, &[scene.seed, step as u64]);
    let inst = &scene.instances[r.random_range(0..scene.instances.len())];
    let mining = MiningConfig::default();
    let tier = sample_tier(&mining, &mut r);
    let num_pos = r.random_range(mining.pos_range.0..=mining.pos_range.1);
    let num_neg = r.random_range(mining.neg_range.0..=mining.neg_range.1);
    let prompts = prompt_set_for_tier(inst, scene, tier, num_pos, num_neg, &mut r)?;
    let m = params.arch.num_masks;
    let targets = hierarchy_targets(scene, inst, m, cfg.group_radius);

    let enc = encode(params, &scene.image)?;
    let (out, cache) = prepared.decode(&enc, &prompts)?;
    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(m);
    for (logits, t) in out.mask_logits.iter().zip(&targets) {
        loss += bce(logits, t)?;
        d_logits.push(mask_log_likelihood_grad(logits, t, -1.0)?);
    }
    // The quality head learns the IoU of each hypothesis with the prompted
    // instance alone.
    let mut d_quality = vec![0.0; m];
    for j in 0..m {
        let iou = compute_iou(&binarize(&out.mask_logits[j], 0.0), inst.mask())?;
        let diff = out.quality_scores[j] - iou;
        loss += cfg.quality_weight * diff * diff / m as f64;
        d_quality[j] = cfg.quality_weight * 2.0 * diff / m as f64;
    }
    let mut grads = Gradients::zeros_like(params);
    let f = &enc.features;
    let mut d_features = FeatureMap::zeros(f.height, f.width, f.channels);
    prepared.decode_backward(&cache, &d_logits, Some(&d_quality), &mut grads, Some(&mut d_features));
    encode_backward(params, &enc, d_features, &mut grads);
    Ok((loss, grads))
}

/// Outcome of [`pretrain_base`].
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub best_val_dice: f64,
    pub steps_run: usize,
    pub reached_floor: bool,
}

/// Supervised pre-training of an adapter-free base model on every training
/// scene of `data`, with hierarchical targets per hypothesis.
pub fn pretrain_base(data: &Dataset, arch: &ArchConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let arch = ArchConfig {
        adapter_rank: None,
        ..arch.clone()
    };
    if data.scenes.is_empty() {
        return Err(Error::Contract("pre-training needs scenes".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("pre-training batch size and eval interval must be positive".into()));
    }
    let mut params = init_params(&arch, derive_seed(cfg.seed, streams::INIT, &[0]))?;
    let train = data.train_scenes(DataRatio::P100);
    let val = data.validation_scenes();
    let view = crate::model::trainable_parameters(&params, TrainMode::Full);
    let mut opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut order: Vec<&Scene> = Vec::new();
    let mut steps_run = 0;
    let mut reached_floor = false;
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh = train.clone();
            fresh.shuffle(&mut rng::substream(cfg.seed, streams::BATCH, &[step as u64]));
            order.extend(fresh);
        }
        let batch: Vec<&Scene> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let prepared = Prepared::new(&params);
        let results = batch
            .par_iter()
            .map(|s| pretrain_item(&params, &prepared, s, cfg, step))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_like(&params);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_scaled(g, 1.0 / batch.len() as f64);
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!("pre-training step {step}")));
        }
        opt.step(&mut params, &grads, &view)?;
        steps_run = step + 1;
        if steps_run % cfg.eval_every == 0 || steps_run == cfg.steps {
            let dice = pretrain_validation_dice(&params, &val, cfg)?;
            info!("pretrain step {steps_run}: loss {loss:.4}, val dice {dice:.4}");
            if dice > best.0 {
                best = (dice, params.clone());
            }
            if dice >= cfg.dice_floor {
                reached_floor = true;
                break;
            }
        }
    }
    if !reached_floor {
        warn!(
            "pre-training stopped at {:.3} validation Dice, below the {:.2} floor; keeping the best model",
            best.0, cfg.dice_floor
        );
    }
    Ok(PretrainOutcome {
        params: best.1,
        best_val_dice: best.0,
        steps_run,
        reached_floor,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub data_ratio: DataRatio,
    pub task_mode: TaskMode,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub adapter_rank: usize,
    pub train_mode: TrainMode,
    /// Validation protocol; its task mode is overridden by `task_mode`.
    pub eval: EvalProtocol,
    pub seed: u64,
    pub deterministic: bool,
    pub jobs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 14,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            data_ratio: DataRatio::P10,
            task_mode: TaskMode::T2,
            mining: MiningConfig::default(),
            loss: LossConfig::default(),
            adapter_rank: 64,
            train_mode: TrainMode::AdaptersOnly,
            eval: EvalProtocol::default(),
            seed: 0,
            deterministic: false,
            jobs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if !crate::model::ALLOWED_RANKS.contains(&self.adapter_rank) {
            return Err(Error::Config(format!(
                "adapter_rank {} not in {:?}",
                self.adapter_rank,
                crate::model::ALLOWED_RANKS
            )));
        }
        self.mining.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }

    pub fn validation_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            task_mode: self.task_mode,
            class_override: None,
            ..self.eval.clone()
        }
    }
}

/// Rows of the loss-term ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_K1")]
    NoK1,
    #[serde(rename = "no_K2")]
    NoK2,
    #[serde(rename = "no_K3")]
    NoK3,
    #[serde(rename = "K3_only")]
    K3Only,
    #[serde(rename = "K1_only")]
    K1Only,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoK1,
        Variant::NoK2,
        Variant::NoK3,
        Variant::K3Only,
        Variant::K1Only,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoK1 => "no_K1",
            Variant::NoK2 => "no_K2",
            Variant::NoK3 => "no_K3",
            Variant::K3Only => "K3_only",
            Variant::K1Only => "K1_only",
        }
    }

    /// Zeroes the weights of the disabled terms.
    pub fn apply(self, loss: &LossConfig) -> LossConfig {
        let mut l = loss.clone();
        match self {
            Variant::Full => {}
            Variant::NoK1 => l.po1_weight = 0.0,
            Variant::NoK2 => l.lambda_intra = 0.0,
            Variant::NoK3 => l.sup_weight = 0.0,
            Variant::K3Only => l.lambda_dw = 0.0,
            Variant::K1Only => {
                l.lambda_intra = 0.0;
                l.sup_weight = 0.0;
            }
        }
        l
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub inter_pairs: usize,
    pub intra_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub train_scenes: usize,
    pub steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub initial_val_dice: f64,
    pub epoch_val_dice: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub reference_hash_before: String,
    pub reference_hash_after: String,
    pub frozen_base_hash_before: String,
    pub frozen_base_hash_after: String,
    pub final_hash: String,
    /// Absent in deterministic mode so repeated reports compare equal.
    pub wall_clock_secs: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `step,po1,po2,sup,total,val_dice`; validation Dice on the last step
    /// of each epoch.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,po1,po2,sup,total,val_dice\n");
        for s in &self.steps {
            let val = if (s.step + 1) % self.steps_per_epoch == 0 {
                format!("{:.6}", self.epoch_val_dice[s.epoch])
            } else {
                String::new()
            };
            writeln!(
                out,
                "{},{:.12},{:.12},{:.12},{:.12},{}",
                s.step, s.loss.po1, s.loss.po2, s.loss.sup, s.loss.total, val
            )
            .expect("string write");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: ModelParams,
    pub last: ModelParams,
}

/// Everything one batch item contributes to a step.
struct ItemResult {
    loss: LossBreakdown,
    grads: Gradients,
    inter: usize,
    intra: usize,
}

fn task_item(scene: &Scene, mode: TaskMode, r: &mut rng::Rng) -> Result<(InstanceMask, BinaryMask)> {
    let (pool, class): (Vec<&InstanceMask>, _) = match mode {
        TaskMode::T1 => (scene.instances.iter().collect(), None),
        TaskMode::T2 => (
            scene.instances_of_class(scene.prompted_class).collect(),
            Some(scene.prompted_class),
        ),
    };
    if pool.is_empty() {
        return Err(Error::Lookup(format!("scene {} has no instance to prompt", scene.id)));
    }
    let inst = pool[r.random_range(0..pool.len())].clone();
    let target = build_task_target(scene, mode, class)?.composite_mask;
    Ok((inst, target))
}

#[allow(clippy::too_many_arguments)]
fn train_item(
    actor: &Prepared<'_>,
    reference: &Prepared<'_>,
    actor_enc: &Encoded,
    ref_enc: &Encoded,
    scene: &Scene,
    cfg: &TrainConfig,
    step: usize,
) -> Result<ItemResult> {
    let mut r = rng::substream(cfg.seed, streams::MINING, &[scene.seed, step as u64]);
    let (inst, target) = task_item(scene, cfg.task_mode, &mut r)?;
    let mining_seed = derive_seed(cfg.seed, streams::MINING, &[scene.seed, u64::from(inst.id), step as u64]);
    let (tiers, sets): (Vec<_>, Vec<_>) = synthesize_prompt_sets(&inst, scene, &cfg.mining, mining_seed)?
        .into_iter()
        .unzip();

    let mut outs = Vec::with_capacity(sets.len());
    let mut caches = Vec::with_capacity(sets.len());
    for s in &sets {
        let (o, c) = actor.decode(actor_enc, s)?;
        outs.push(o);
        caches.push(c);
    }
    let ref_outs = sets
        .iter()
        .map(|s| reference.decode(ref_enc, s).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let grid = candidates_from_outputs(&sets, &outs, &target)?;
    let mined = mine_from_grid(tiers, sets, grid)?;
    let (loss, d_logits) = instance_objective(&outs, &ref_outs, &mined, &target, &cfg.loss)?;

    let grads = backward_item(actor, actor_enc, &caches, &d_logits, cfg.train_mode);
    Ok(ItemResult {
        loss,
        grads,
        inter: mined.inter.len(),
        intra: mined.intra.len(),
    })
}

/// Raw (unprojected) parameter gradients from per-slot logit gradients.
fn backward_item(
    actor: &Prepared<'_>,
    actor_enc: &Encoded,
    caches: &[DecodeCache],
    d_logits: &[Vec<Vec<f64>>],
    mode: TrainMode,
) -> Gradients {
    let params = actor.params;
    let mut grads = Gradients::zeros_like(params);
    let full = mode == TrainMode::Full;
    let f = &actor_enc.features;
    let mut d_features = FeatureMap::zeros(f.height, f.width, f.channels);
    for (cache, dl) in caches.iter().zip(d_logits) {
        actor.decode_backward(cache, dl, None, &mut grads, full.then_some(&mut d_features));
    }
    if full {
        encode_backward(params, actor_enc, d_features, &mut grads);
    }
    grads
}

/// Loss and gradient (restricted to the trainable view of `mode`) for an
/// already mined instance, with both models run from scratch. This is the
/// same fused route a training step uses.
pub fn mined_instance_gradient(
    actor: &ModelParams,
    reference: &ModelParams,
    image: &Image,
    mined: &MinedInstance,
    target: &BinaryMask,
    cfg: &LossConfig,
    mode: TrainMode,
) -> Result<(LossBreakdown, Gradients)> {
    let (pa, pr) = (Prepared::new(actor), Prepared::new(reference));
    let (ea, er) = (encode(actor, image)?, encode(reference, image)?);
    let mut outs = Vec::with_capacity(mined.sets.len());
    let mut caches = Vec::with_capacity(mined.sets.len());
    for s in &mined.sets {
        let (o, c) = pa.decode(&ea, s)?;
        outs.push(o);
        caches.push(c);
    }
    let ref_outs = mined
        .sets
        .iter()
        .map(|s| pr.decode(&er, s).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let (loss, d_logits) = instance_objective(&outs, &ref_outs, mined, target, cfg)?;
    let mut grads = backward_item(&pa, &ea, &caches, &d_logits, mode);
    finish_gradients(actor, &mut grads, mode);
    Ok((loss, grads))
}

fn write_dump(out_dir: Option<&Path>, step: usize, ids: &[&str], losses: &[LossBreakdown]) -> String {
    // Non-finite floats have no JSON form, so losses are dumped as text.
    let losses: Vec<String> = losses.iter().map(|l| format!("{l:?}")).collect();
    let dump = serde_json::json!({ "step": step, "scenes": ids, "losses": losses });
    if let Some(dir) = out_dir {
        let path = dir.join(format!("nonfinite_step_{step}.json"));
        if std::fs::create_dir_all(dir).is_ok() && std::fs::write(&path, dump.to_string()).is_ok() {
            return format!("; batch dumped to {}", path.display());
        }
    }
    format!("; batch {dump}")
}

/// Preference fine-tuning of `base`. Fresh adapters of `cfg.adapter_rank`
/// are attached first; the reference copy is taken right after.
pub fn train(base: &ModelParams, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    with_pool(cfg.jobs, cfg.deterministic, || train_inner(base, data, cfg, out_dir))?
}

fn train_inner(base: &ModelParams, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut actor = base.with_adapters(Some(cfg.adapter_rank), derive_seed(cfg.seed, streams::INIT, &[1]))?;
    let reference = clone_frozen(&actor);
    let reference_hash_before = reference.content_hash();
    let frozen_base_hash_before = frozen_base_hash(&actor);
    let view = crate::model::trainable_parameters(&actor, cfg.train_mode);
    let mut opt = AdamW::new(&actor, cfg.learning_rate, cfg.weight_decay);

    let train_scenes = data.train_scenes(cfg.data_ratio);
    let val = data.validation_scenes();
    if train_scenes.is_empty() {
        return Err(Error::Contract("training slice is empty".into()));
    }
    let steps_per_epoch = train_scenes.len().div_ceil(cfg.batch_size);
    let protocol = cfg.validation_protocol();
    let initial_val_dice = evaluate(&actor, &val, &protocol)?.mean_dice;
    info!(
        "fine-tuning on {} scenes, {} steps/epoch, initial val dice {initial_val_dice:.4}",
        train_scenes.len(),
        steps_per_epoch
    );

    // The reference never changes, and with a frozen encoder neither do the
    // actor's features, so both encodings are computed once per scene.
    let ref_prepared = Prepared::new(&reference);
    let ref_encoded = map_items(&train_scenes, cfg.deterministic, |s| encode(&reference, &s.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut steps = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut epoch_val_dice = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0, actor.clone());
    let config_echo = serde_json::to_value(cfg).expect("config serializes");
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, streams::BATCH, &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let prepared = Prepared::new(&actor);
            let actor_encoded: Option<Vec<Encoded>> = if cfg.train_mode == TrainMode::Full {
                Some(
                    map_items(chunk, cfg.deterministic, |i| encode(&actor, &train_scenes[*i].image))
                        .into_iter()
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let results = map_items(
                &(0..chunk.len()).collect::<Vec<_>>(),
                cfg.deterministic,
                |&b| {
                    let i = chunk[b];
                    let enc = actor_encoded.as_ref().map_or(&ref_encoded[i], |e| &e[b]);
                    train_item(&prepared, &ref_prepared, enc, &ref_encoded[i], train_scenes[i], cfg, step)
                },
            )
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grads = Gradients::zeros_like(&actor);
            let (mut inter, mut intra) = (0, 0);
            for r in &results {
                grads.add_scaled(&r.grads, scale);
                inter += r.inter;
                intra += r.intra;
            }
            let losses: Vec<LossBreakdown> = results.iter().map(|r| r.loss).collect();
            let loss = LossBreakdown::mean(&losses);
            finish_gradients(&actor, &mut grads, cfg.train_mode);
            if !loss.is_finite() || !grads.all_finite() {
                let ids: Vec<&str> = chunk.iter().map(|i| train_scenes[*i].id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (epoch {epoch}){}",
                    write_dump(out_dir, step, &ids, &losses)
                )));
            }
            debug!(
                "step {step}: po1 {:.6} po2 {:.6} sup {:.6} total {:.6} ({inter} inter / {intra} intra pairs)",
                loss.po1, loss.po2, loss.sup, loss.total
            );
            opt.step(&mut actor, &grads, &view)?;
            steps.push(StepRecord {
                step,
                epoch,
                loss,
                inter_pairs: inter,
                intra_pairs: intra,
            });
            step += 1;
        }
        let dice = evaluate(&actor, &val, &protocol)?.mean_dice;
        info!(
            "epoch {epoch}: total {:.4}, val dice {dice:.4}",
            steps.last().map_or(0.0, |s| s.loss.total)
        );
        epoch_val_dice.push(dice);
        if dice > best.0 {
            best = (dice, epoch, actor.clone());
            if let Some(dir) = out_dir {
                save_checkpoint(&actor, &config_echo, &dir.join("best.ckpt"))?;
            }
        }
    }
    if !actor.all_finite() {
        return Err(Error::NonFinite("actor parameters after training".into()));
    }
    let (best_checkpoint, last_checkpoint) = match out_dir {
        Some(dir) => {
            let last = dir.join("last.ckpt");
            save_checkpoint(&actor, &config_echo, &last)?;
            (Some(dir.join("best.ckpt")), Some(last))
        }
        None => (None, None),
    };
    let report = TrainReport {
        config: cfg.clone(),
        train_scenes: train_scenes.len(),
        steps_per_epoch,
        steps,
        initial_val_dice,
        epoch_val_dice,
        best_epoch: best.1,
        best_val_dice: best.0,
        reference_hash_before,
        reference_hash_after: reference.content_hash(),
        frozen_base_hash_before,
        frozen_base_hash_after: frozen_base_hash(&actor),
        final_hash: actor.content_hash(),
        wall_clock_secs: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
        best_checkpoint,
        last_checkpoint,
    };
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(TrainOutcome {
        report,
        best: best.2,
        last: actor,
    })
}

/// Writes `report.json` and `losses.csv`.
pub fn write_report(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let p = dir.join("report.json");
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("losses.csv");
    std::fs::write(&p, report.loss_csv()).map_err(|e| Error::io(&p, e))
}

/// Trains one ablation row: same config with the variant's terms disabled.
pub fn run_ablation_variant(
    variant: Variant,
    base: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        loss: variant.apply(&cfg.loss),
        ..cfg.clone()
    };
    info!("ablation variant {}", variant.name());
    train(base, data, &cfg, out_dir)
}
