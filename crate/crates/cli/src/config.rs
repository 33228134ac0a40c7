//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Unknown keys are rejected with
//! the key named. [`RunConfig::to_text`] echoes every key, defaults
//! included, in a fixed order.

use std::fmt::Write as _;
use std::path::PathBuf;

use sampo_core::eval::EvalProtocol;
use sampo_core::mining::QualityTier;
use sampo_core::model::{ArchConfig, TrainMode};
use sampo_core::synthdata::{ClassTexture, DataRatio, SceneSpec, TaskMode};
use sampo_core::training::{PretrainConfig, TrainConfig};
use sampo_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Empty means "pick a timestamped directory under the output root".
    pub output_dir: Option<PathBuf>,
    pub deterministic: bool,
    /// 0 lets the thread pool decide.
    pub jobs: usize,
    pub scene: SceneSpec,
    pub scene_count: usize,
    pub widths: [usize; 3],
    pub pretrain: PretrainConfig,
    pub pretrain_scenes: usize,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            deterministic: false,
            jobs: 0,
            scene: SceneSpec::default(),
            scene_count: 300,
            widths: ArchConfig::default().widths,
            pretrain: PretrainConfig::default(),
            pretrain_scenes: 400,
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

/// Key, default-as-text, description. The order here is the echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed; every random stream derives from it"),
    ("output_dir", "run directory; empty picks <root>/<command>-<timestamp>"),
    ("deterministic", "sequential execution for bitwise reproducibility"),
    ("jobs", "worker threads, 0 = all cores"),
    ("scene.height", "image height in pixels"),
    ("scene.width", "image width in pixels"),
    ("scene.num_classes", "object classes per scene"),
    ("scene.instances_min", "fewest instances per class"),
    ("scene.instances_max", "most instances per class"),
    ("scene.radius_min", "smallest major semi-axis"),
    ("scene.radius_max", "largest major semi-axis"),
    ("scene.textures", "per class mean:noise:eccentricity, comma separated"),
    ("scene.background_intensity", "background mean intensity"),
    ("scene.background_noise", "background noise half-width"),
    ("scene.overlap_allowed", "allow touching or overlapping instances"),
    ("scene.max_attempts", "placement attempts per instance"),
    ("scene.count", "scenes generated by gen-data"),
    ("model.widths", "encoder channel widths, three comma-separated values"),
    ("pretrain.scenes", "size of the separate pre-training corpus"),
    ("pretrain.steps", "pre-training step budget"),
    ("pretrain.batch_size", "pre-training batch size"),
    ("pretrain.learning_rate", "pre-training learning rate"),
    ("pretrain.weight_decay", "pre-training weight decay"),
    ("pretrain.dice_floor", "stop pre-training at this validation Dice"),
    ("pretrain.eval_every", "pre-training validation interval in steps"),
    ("pretrain.group_radius", "radius of the middle hypothesis target"),
    ("pretrain.quality_weight", "weight of the quality-head regression"),
    ("train.epochs", "fine-tuning epochs"),
    ("train.batch_size", "fine-tuning batch size"),
    ("train.learning_rate", "AdamW learning rate"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.data_ratio", "percent of the training pool used: 10, 20, 30 or 100"),
    ("train.task_mode", "T1 (all instances) or T2 (prompted class)"),
    ("train.adapter_rank", "adapter rank: 4, 8, 32 or 64"),
    ("train.train_mode", "adapters_only or full"),
    ("mining.num_prompt_sets", "prompt sets per instance"),
    ("mining.tier_weights", "clean:w,boundary:w,noisy:w sampling weights"),
    ("mining.pos_min", "fewest positive points per prompt set"),
    ("mining.pos_max", "most positive points per prompt set"),
    ("mining.neg_min", "fewest negative points per prompt set"),
    ("mining.neg_max", "most negative points per prompt set"),
    ("loss.beta", "preference temperature"),
    ("loss.lambda_intra", "weight of the intra-prompt term"),
    ("loss.lambda_dw", "weight of the preference terms against the anchor"),
    ("loss.po1_weight", "weight of the inter-prompt term"),
    ("loss.sup_weight", "weight of the supervised anchor"),
    ("eval.num_pos", "positive points on the exemplar"),
    ("eval.num_neg", "negative points around the exemplar"),
    ("eval.seed", "seed of exemplar choice and point placement"),
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn tier_name(t: QualityTier) -> &'static str {
    match t {
        QualityTier::Clean => "clean",
        QualityTier::Boundary => "boundary",
        QualityTier::Noisy => "noisy",
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "deterministic" => self.deterministic = flag(key, v)?,
            "jobs" => self.jobs = num(key, v)?,
            "scene.height" => self.scene.height = num(key, v)?,
            "scene.width" => self.scene.width = num(key, v)?,
            "scene.num_classes" => self.scene.num_classes = num(key, v)?,
            "scene.instances_min" => self.scene.instances_per_class.0 = num(key, v)?,
            "scene.instances_max" => self.scene.instances_per_class.1 = num(key, v)?,
            "scene.radius_min" => self.scene.radius_range.0 = num(key, v)?,
            "scene.radius_max" => self.scene.radius_range.1 = num(key, v)?,
            "scene.textures" => {
                self.scene.textures = v
                    .split(',')
                    .map(|t| {
                        let p: Vec<&str> = t.trim().split(':').collect();
                        match p[..] {
                            [m, n, e] => Ok(ClassTexture {
                                mean_intensity: num(key, m)?,
                                noise_amplitude: num(key, n)?,
                                eccentricity: num(key, e)?,
                            }),
                            _ => Err(bad(key, v, "mean:noise:eccentricity entries")),
                        }
                    })
                    .collect::<Result<_>>()?
            }
            "scene.background_intensity" => self.scene.background_intensity = num(key, v)?,
            "scene.background_noise" => self.scene.background_noise = num(key, v)?,
            "scene.overlap_allowed" => self.scene.overlap_allowed = flag(key, v)?,
            "scene.max_attempts" => self.scene.max_attempts = num(key, v)?,
            "scene.count" => self.scene_count = num(key, v)?,
            "model.widths" => {
                let w: Vec<usize> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
                self.widths = w.try_into().map_err(|_| bad(key, v, "three widths"))?;
            }
            "pretrain.scenes" => self.pretrain_scenes = num(key, v)?,
            "pretrain.steps" => self.pretrain.steps = num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = num(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = num(key, v)?,
            "pretrain.dice_floor" => self.pretrain.dice_floor = num(key, v)?,
            "pretrain.eval_every" => self.pretrain.eval_every = num(key, v)?,
            "pretrain.group_radius" => self.pretrain.group_radius = num(key, v)?,
            "pretrain.quality_weight" => self.pretrain.quality_weight = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.data_ratio" => {
                self.train.data_ratio = DataRatio::try_from(num::<u32>(key, v)?)?;
            }
            "train.task_mode" => self.train.task_mode = v.parse::<TaskMode>()?,
            "train.adapter_rank" => self.train.adapter_rank = num(key, v)?,
            "train.train_mode" => {
                self.train.train_mode = match v {
                    "adapters_only" => TrainMode::AdaptersOnly,
                    "full" => TrainMode::Full,
                    _ => return Err(bad(key, v, "adapters_only or full")),
                }
            }
            "mining.num_prompt_sets" => self.train.mining.num_prompt_sets = num(key, v)?,
            "mining.tier_weights" => {
                self.train.mining.quality_tiers = v
                    .split(',')
                    .map(|t| {
                        let (name, w) = t.trim().split_once(':').ok_or_else(|| bad(key, v, "tier:weight entries"))?;
                        let tier = match name.trim() {
                            "clean" => QualityTier::Clean,
                            "boundary" => QualityTier::Boundary,
                            "noisy" => QualityTier::Noisy,
                            _ => return Err(bad(key, v, "tiers clean, boundary or noisy")),
                        };
                        Ok((tier, num(key, w.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "mining.pos_min" => self.train.mining.pos_range.0 = num(key, v)?,
            "mining.pos_max" => self.train.mining.pos_range.1 = num(key, v)?,
            "mining.neg_min" => self.train.mining.neg_range.0 = num(key, v)?,
            "mining.neg_max" => self.train.mining.neg_range.1 = num(key, v)?,
            "loss.beta" => self.train.loss.beta = num(key, v)?,
            "loss.lambda_intra" => self.train.loss.lambda_intra = num(key, v)?,
            "loss.lambda_dw" => self.train.loss.lambda_dw = num(key, v)?,
            "loss.po1_weight" => self.train.loss.po1_weight = num(key, v)?,
            "loss.sup_weight" => self.train.loss.sup_weight = num(key, v)?,
            "eval.num_pos" => self.eval.num_pos = num(key, v)?,
            "eval.num_neg" => self.eval.num_neg = num(key, v)?,
            "eval.seed" => self.eval.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Propagates the global settings into the component configs.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.train.deterministic = self.deterministic;
        c.train.jobs = (self.jobs > 0).then_some(self.jobs);
        c.train.eval = self.eval.clone();
        c.eval.task_mode = self.train.task_mode;
        c.pretrain.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.arch().validate()?;
        let r = self.resolved();
        r.train.validate()?;
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || self.pretrain.eval_every == 0 {
            return Err(Error::Config("pretrain steps, batch_size and eval_every must be positive".into()));
        }
        if self.scene_count < 2 || self.pretrain_scenes < 2 {
            return Err(Error::Config("scene.count and pretrain.scenes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            height: self.scene.height,
            width: self.scene.width,
            widths: self.widths,
            num_masks: self.train.mining.num_masks,
            adapter_rank: None,
        }
    }

    fn get(&self, key: &str) -> String {
        let s = &self.scene;
        let p = &self.pretrain;
        let t = &self.train;
        let m = &t.mining;
        let l = &t.loss;
        match key {
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "deterministic" => self.deterministic.to_string(),
            "jobs" => self.jobs.to_string(),
            "scene.height" => s.height.to_string(),
            "scene.width" => s.width.to_string(),
            "scene.num_classes" => s.num_classes.to_string(),
            "scene.instances_min" => s.instances_per_class.0.to_string(),
            "scene.instances_max" => s.instances_per_class.1.to_string(),
            "scene.radius_min" => s.radius_range.0.to_string(),
            "scene.radius_max" => s.radius_range.1.to_string(),
            "scene.textures" => s
                .textures
                .iter()
                .map(|t| format!("{}:{}:{}", fmt_f(t.mean_intensity), fmt_f(t.noise_amplitude), fmt_f(t.eccentricity)))
                .collect::<Vec<_>>()
                .join(","),
            "scene.background_intensity" => fmt_f(s.background_intensity),
            "scene.background_noise" => fmt_f(s.background_noise),
            "scene.overlap_allowed" => s.overlap_allowed.to_string(),
            "scene.max_attempts" => s.max_attempts.to_string(),
            "scene.count" => self.scene_count.to_string(),
            "model.widths" => self.widths.map(|w| w.to_string()).join(","),
            "pretrain.scenes" => self.pretrain_scenes.to_string(),
            "pretrain.steps" => p.steps.to_string(),
            "pretrain.batch_size" => p.batch_size.to_string(),
            "pretrain.learning_rate" => fmt_f(p.learning_rate),
            "pretrain.weight_decay" => fmt_f(p.weight_decay),
            "pretrain.dice_floor" => fmt_f(p.dice_floor),
            "pretrain.eval_every" => p.eval_every.to_string(),
            "pretrain.group_radius" => fmt_f(p.group_radius),
            "pretrain.quality_weight" => fmt_f(p.quality_weight),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => fmt_f(t.learning_rate),
            "train.weight_decay" => fmt_f(t.weight_decay),
            "train.data_ratio" => t.data_ratio.percent().to_string(),
            "train.task_mode" => t.task_mode.to_string(),
            "train.adapter_rank" => t.adapter_rank.to_string(),
            "train.train_mode" => match t.train_mode {
                TrainMode::AdaptersOnly => "adapters_only".into(),
                TrainMode::Full => "full".into(),
            },
            "mining.num_prompt_sets" => m.num_prompt_sets.to_string(),
            "mining.tier_weights" => m
                .quality_tiers
                .iter()
                .map(|(t, w)| format!("{}:{}", tier_name(*t), fmt_f(*w)))
                .collect::<Vec<_>>()
                .join(","),
            "mining.pos_min" => m.pos_range.0.to_string(),
            "mining.pos_max" => m.pos_range.1.to_string(),
            "mining.neg_min" => m.neg_range.0.to_string(),
            "mining.neg_max" => m.neg_range.1.to_string(),
            "loss.beta" => fmt_f(l.beta),
            "loss.lambda_intra" => fmt_f(l.lambda_intra),
            "loss.lambda_dw" => fmt_f(l.lambda_dw),
            "loss.po1_weight" => fmt_f(l.po1_weight),
            "loss.sup_weight" => fmt_f(l.sup_weight),
            "eval.num_pos" => self.eval.num_pos.to_string(),
            "eval.num_neg" => self.eval.num_neg.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            _ => unreachable!("every KEYS entry has a getter: {key}"),
        }
    }

    /// Every key with its current value, one per line, commented.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            writeln!(out, "# {doc}\n{key} = {}", self.get(key)).expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_and_echoed() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let mut c = cfg.clone();
            c.set(key, &cfg.get(key)).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\nloss.lambda_dw = 0.5 # trailing\ntrain.data_ratio = 30\nmining.tier_weights = clean:2,noisy:1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.loss.lambda_dw, 0.5);
        assert_eq!(cfg.train.data_ratio, DataRatio::P30);
        assert_eq!(cfg.train.mining.quality_tiers.len(), 2);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunConfig::parse("loss.lamda_dw = 1").unwrap_err().to_string();
        assert!(e.contains("loss.lamda_dw"), "{e}");
        assert!(RunConfig::parse("train.data_ratio = 15").is_err());
        assert!(RunConfig::parse("train.adapter_rank = 7").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("deterministic = maybe").is_err());
    }
}
