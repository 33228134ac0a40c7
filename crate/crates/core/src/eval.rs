//! Evaluation protocols and sweeps.
//!
//! Every protocol prompts ONE exemplar instance per scene (for T2, one of the
//! prompted class) with clean-tier points, keeps the slot the quality head
//! ranks highest, and scores it with Dice against the full task target.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binarize, compute_dice, BinaryMask};
use crate::mining::{prompt_set_for_tier, QualityTier};
use crate::model::{ForwardOutput, ModelParams, Prepared, PromptSet};
use crate::rng::{self, streams};
use crate::synthdata::{build_task_target, DataRatio, Scene, TaskMode};
use crate::training::{train, Dataset, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub task_mode: TaskMode,
    pub num_pos: usize,
    pub num_neg: usize,
    /// T2 class to prompt; `None` uses each scene's prompted class.
    pub class_override: Option<u8>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            task_mode: TaskMode::T2,
            num_pos: 3,
            num_neg: 3,
            class_override: None,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.num_pos == 0 {
            return Err(Error::Config("evaluation needs at least one positive point".into()));
        }
        if self.task_mode == TaskMode::T1 && self.class_override.is_some() {
            return Err(Error::Config("T1 evaluation takes no class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub dice: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_dice: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub records: Vec<SceneRecord>,
}

impl EvalResult {
    /// `scene_id,dice,skipped_flag`, one row per scene.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,dice,skipped_flag\n");
        for r in &self.records {
            writeln!(out, "{},{:.6},{}", r.scene_id, r.dice, u8::from(r.skipped)).expect("string write");
        }
        out
    }
}

/// Highest quality score wins (first on ties); slot 1 (the middle
/// hypothesis) if the scores are all equal or not finite.
pub fn select_slot(quality: &[f64]) -> usize {
    let degenerate = quality.iter().any(|q| !q.is_finite())
        || quality.windows(2).all(|w| w[0] == w[1]);
    if degenerate {
        return 1.min(quality.len().saturating_sub(1));
    }
    let mut best = 0;
    for (j, q) in quality.iter().enumerate() {
        if *q > quality[best] {
            best = j;
        }
    }
    best
}

pub fn prediction(out: &ForwardOutput) -> BinaryMask {
    binarize(&out.mask_logits[select_slot(&out.quality_scores)], 0.0)
}

/// Exemplar prompts for one scene, or `None` when the class is absent.
pub fn exemplar_prompts(scene: &Scene, protocol: &EvalProtocol) -> Result<Option<PromptSet>> {
    let class = match protocol.task_mode {
        TaskMode::T1 => None,
        TaskMode::T2 => Some(protocol.class_override.unwrap_or(scene.prompted_class)),
    };
    let pool: Vec<_> = scene
        .instances
        .iter()
        .filter(|i| class.is_none_or(|c| i.class_id == c))
        .collect();
    if pool.is_empty() {
        return Ok(None);
    }
    let mut pick = rng::substream(protocol.seed, streams::EVAL, &[scene.seed]);
    let exemplar = pool[rand::Rng::random_range(&mut pick, 0..pool.len())];
    let mut r = rng::substream(
        protocol.seed,
        streams::EVAL,
        &[scene.seed, protocol.num_pos as u64, protocol.num_neg as u64],
    );
    prompt_set_for_tier(exemplar, scene, QualityTier::Clean, protocol.num_pos, protocol.num_neg, &mut r)
        .map(Some)
}

fn evaluate_scene(prepared: &Prepared<'_>, scene: &Scene, protocol: &EvalProtocol) -> Result<SceneRecord> {
    let skipped = || SceneRecord {
        scene_id: scene.id.clone(),
        dice: 0.0,
        skipped: true,
    };
    let Some(prompts) = exemplar_prompts(scene, protocol)? else {
        return Ok(skipped());
    };
    let class = (protocol.task_mode == TaskMode::T2)
        .then(|| protocol.class_override.unwrap_or(scene.prompted_class));
    let target = build_task_target(scene, protocol.task_mode, class)?.composite_mask;
    let enc = crate::model::encode(prepared.params, &scene.image)?;
    let out = prepared.decode(&enc, &prompts)?.0;
    Ok(SceneRecord {
        scene_id: scene.id.clone(),
        dice: compute_dice(&prediction(&out), &target)?,
        skipped: false,
    })
}

/// Mean Dice over the non-skipped scenes. Read-only on `params`.
pub fn evaluate(params: &ModelParams, scenes: &[&Scene], protocol: &EvalProtocol) -> Result<EvalResult> {
    protocol.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let prepared = Prepared::new(params);
    let records = scenes
        .par_iter()
        .map(|s| evaluate_scene(&prepared, s, protocol))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = records.iter().filter(|r| !r.skipped).map(|r| r.dice).collect();
    let mean_dice = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalResult {
        mean_dice,
        evaluated: scored.len(),
        skipped: records.len() - scored.len(),
        records,
    })
}

/// Mean Dice over a grid of positive/negative point counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub pos_values: Vec<usize>,
    pub neg_values: Vec<usize>,
    /// `mean_dice[i][j]` for `pos_values[i]`, `neg_values[j]`.
    pub mean_dice: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl SweepResult {
    pub fn cells(&self) -> impl Iterator<Item = f64> + '_ {
        self.mean_dice.iter().flatten().copied()
    }

    /// Population standard deviation over all cells.
    pub fn std_dev(&self) -> f64 {
        let n = self.cells().count() as f64;
        let mean = self.cells().sum::<f64>() / n;
        (self.cells().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// `pos,neg,mean_dice,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pos,neg,mean_dice,n\n");
        for (i, p) in self.pos_values.iter().enumerate() {
            for (j, q) in self.neg_values.iter().enumerate() {
                writeln!(out, "{p},{q},{:.6},{}", self.mean_dice[i][j], self.counts[i][j]).expect("string write");
            }
        }
        out
    }

    /// Heatmap with positives down the rows and negatives across, colored
    /// on a fixed `[0, 1]` scale.
    pub fn heatmap_png(&self, path: &Path) -> Result<()> {
        const CELL: u32 = 24;
        let (rows, cols) = (self.pos_values.len() as u32, self.neg_values.len() as u32);
        let img = image::RgbImage::from_fn(cols * CELL, rows * CELL, |x, y| {
            let v = self.mean_dice[(y / CELL) as usize][(x / CELL) as usize];
            let border = x % CELL == 0 || y % CELL == 0;
            if border {
                image::Rgb([255, 255, 255])
            } else {
                image::Rgb(colormap(v))
            }
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Dark blue at 0 through teal and green to yellow at 1.
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    rgb
}

pub const SWEEP_POS: std::ops::RangeInclusive<usize> = 1..=10;
pub const SWEEP_NEG: std::ops::RangeInclusive<usize> = 0..=10;

/// One [`evaluate`] per grid cell, every cell with the same protocol seed.
pub fn point_sensitivity_sweep(
    params: &ModelParams,
    scenes: &[&Scene],
    base: &EvalProtocol,
    pos_values: &[usize],
    neg_values: &[usize],
) -> Result<SweepResult> {
    if pos_values.is_empty() || neg_values.is_empty() || pos_values.contains(&0) {
        return Err(Error::Config("sweep needs positive counts >= 1 and a nonempty grid".into()));
    }
    let mut mean_dice = Vec::with_capacity(pos_values.len());
    let mut counts = Vec::with_capacity(pos_values.len());
    for &p in pos_values {
        let mut row = Vec::with_capacity(neg_values.len());
        let mut row_n = Vec::with_capacity(neg_values.len());
        for &q in neg_values {
            let protocol = EvalProtocol {
                num_pos: p,
                num_neg: q,
                ..base.clone()
            };
            let r = evaluate(params, scenes, &protocol)?;
            row.push(r.mean_dice);
            row_n.push(r.evaluated);
        }
        info!("sweep row pos={p} done");
        mean_dice.push(row);
        counts.push(row_n);
    }
    Ok(SweepResult {
        pos_values: pos_values.to_vec(),
        neg_values: neg_values.to_vec(),
        mean_dice,
        counts,
    })
}

/// The full 10 x 11 grid (1-10 positives, 0-10 negatives).
pub fn full_point_sweep(params: &ModelParams, scenes: &[&Scene], base: &EvalProtocol) -> Result<SweepResult> {
    let pos: Vec<usize> = SWEEP_POS.collect();
    let neg: Vec<usize> = SWEEP_NEG.collect();
    point_sensitivity_sweep(params, scenes, base, &pos, &neg)
}

/// One row of a ratio or hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyValueRow {
    pub key: String,
    pub value: String,
    pub mean_dice: f64,
}

/// `key,value,mean_dice`.
pub fn key_value_csv(rows: &[KeyValueRow]) -> String {
    let mut out = String::from("key,value,mean_dice\n");
    for r in rows {
        writeln!(out, "{},{},{:.6}", r.key, r.value, r.mean_dice).expect("string write");
    }
    out
}

/// λ_dw values of the hyperparameter sweep.
pub const LAMBDA_DW_VALUES: [f64; 4] = [0.1, 0.5, 1.0, 2.0];
/// Adapter ranks of the hyperparameter sweep.
pub const RANK_VALUES: [usize; 4] = [4, 8, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaDw,
    Rank,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::LambdaDw => "lambda_dw",
            SweepAxis::Rank => "rank",
        }
    }
}

/// One trained checkpoint of a ratio or hyperparameter sweep.
#[derive(Debug, Clone)]
pub struct TrainedRow {
    pub row: KeyValueRow,
    pub config: TrainConfig,
    pub report: TrainReport,
}

fn train_row(
    key: &str,
    value: String,
    base: &ModelParams,
    data: &Dataset,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainedRow> {
    let dir = out_dir.map(|d| d.join(format!("{key}_{value}")));
    let outcome = train(base, data, &cfg, dir.as_deref())?;
    // Held-out Dice of the last model, i.e. the final epoch's validation pass.
    let mean_dice = *outcome
        .report
        .epoch_val_dice
        .last()
        .ok_or_else(|| Error::Contract("training ran no epochs".into()))?;
    info!("{key} = {value}: held-out dice {mean_dice:.4}");
    Ok(TrainedRow {
        row: KeyValueRow {
            key: key.to_string(),
            value,
            mean_dice,
        },
        config: cfg,
        report: outcome.report,
    })
}

/// Trains one checkpoint per data ratio from the same base and reports the
/// held-out Dice of each.
pub fn ratio_sweep(
    base: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    ratios: &[DataRatio],
    out_dir: Option<&Path>,
) -> Result<Vec<TrainedRow>> {
    ratios
        .iter()
        .map(|r| {
            let c = TrainConfig {
                data_ratio: *r,
                ..cfg.clone()
            };
            train_row("ratio", r.percent().to_string(), base, data, c, out_dir)
        })
        .collect()
}

/// Trains one checkpoint per value of `axis`, everything else fixed.
pub fn hyperparam_sweep(
    axis: SweepAxis,
    base: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainedRow>> {
    match axis {
        SweepAxis::LambdaDw => LAMBDA_DW_VALUES
            .iter()
            .map(|v| {
                let mut c = cfg.clone();
                c.loss.lambda_dw = *v;
                train_row(axis.key(), v.to_string(), base, data, c, out_dir)
            })
            .collect(),
        SweepAxis::Rank => RANK_VALUES
            .iter()
            .map(|v| {
                let c = TrainConfig {
                    adapter_rank: *v,
                    ..cfg.clone()
                };
                train_row(axis.key(), v.to_string(), base, data, c, out_dir)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::LogitMap;
    use crate::model::{init_params, ArchConfig};
    use crate::synthdata::{generate_scenes, SceneSpec};

    #[test]
    fn slot_selection_rules() {
        assert_eq!(select_slot(&[0.1, 0.7, 0.3]), 1);
        assert_eq!(select_slot(&[0.7, 0.7, 0.3]), 0);
        assert_eq!(select_slot(&[0.2, 0.2, 0.2]), 1);
        assert_eq!(select_slot(&[0.2, f64::NAN, 0.9]), 1);
        assert_eq!(select_slot(&[f64::NAN]), 0);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let spec = SceneSpec::default();
        let scene = &generate_scenes(&spec, 3, 1).unwrap()[0];
        let target = build_task_target(scene, TaskMode::T2, Some(scene.prompted_class))
            .unwrap()
            .composite_mask;
        let to_logits = |m: &BinaryMask| {
            LogitMap::new(m.shape(), m.bits().iter().map(|b| if *b { 4.0 } else { -4.0 }).collect()).unwrap()
        };
        let out = ForwardOutput {
            mask_logits: vec![to_logits(&BinaryMask::empty(spec.shape())), to_logits(&target), to_logits(&target)],
            quality_scores: vec![0.0, 1.0, 0.5],
        };
        assert_eq!(compute_dice(&prediction(&out), &target).unwrap(), 1.0);
        let empty = ForwardOutput {
            quality_scores: vec![1.0, 0.0, 0.0],
            ..out
        };
        assert_eq!(compute_dice(&prediction(&empty), &target).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let spec = SceneSpec::default();
        let scenes = generate_scenes(&spec, 10, 4).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let p = init_params(&ArchConfig::default(), 2).unwrap();
        let hash = p.content_hash();
        let a = evaluate(&p, &refs, &EvalProtocol::default()).unwrap();
        let b = evaluate(&p, &refs, &EvalProtocol::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evaluated, 4);
        assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.dice)));
        assert_eq!(p.content_hash(), hash);

        let absent = EvalProtocol {
            class_override: Some(9),
            ..EvalProtocol::default()
        };
        let r = evaluate(&p, &refs, &absent).unwrap();
        assert_eq!((r.evaluated, r.skipped), (0, 4));
        assert!(r.to_csv().lines().skip(1).all(|l| l.ends_with(",1")));
    }

    #[test]
    fn sweep_cell_matches_direct_evaluation() {
        let scenes = generate_scenes(&SceneSpec::default(), 5, 3).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let p = init_params(&ArchConfig::default(), 2).unwrap();
        let base = EvalProtocol::default();
        let sweep = point_sensitivity_sweep(&p, &refs, &base, &[1, 3], &[0, 3]).unwrap();
        let direct = evaluate(&p, &refs, &EvalProtocol { num_pos: 3, num_neg: 3, ..base }).unwrap();
        assert_eq!(sweep.mean_dice[1][1], direct.mean_dice);
        assert_eq!(sweep.to_csv().lines().count(), 5);
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
    }

    #[test]
    fn hyperparam_rows_differ_only_on_the_swept_key() {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            instances_per_class: (1, 3),
            radius_range: (3, 5),
            ..SceneSpec::default()
        };
        let data = Dataset::new(generate_scenes(&spec, 5, 6).unwrap(), 5).unwrap();
        let arch = ArchConfig {
            height: 32,
            width: 32,
            widths: [4, 8, 16],
            num_masks: 3,
            adapter_rank: None,
        };
        let base = init_params(&arch, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            data_ratio: DataRatio::P100,
            deterministic: true,
            ..TrainConfig::default()
        };
        let rows = hyperparam_sweep(SweepAxis::LambdaDw, &base, &data, &cfg, None).unwrap();
        let values: Vec<&str> = rows.iter().map(|r| r.row.value.as_str()).collect();
        assert_eq!(values, ["0.1", "0.5", "1", "2"]);
        for r in &rows {
            let mut c = r.config.clone();
            c.loss.lambda_dw = cfg.loss.lambda_dw;
            assert_eq!(c, cfg);
            assert!((0.0..=1.0).contains(&r.row.mean_dice));
        }
        let rows = hyperparam_sweep(SweepAxis::Rank, &base, &data, &cfg, None).unwrap();
        let ranks: Vec<usize> = rows.iter().map(|r| r.config.adapter_rank).collect();
        assert_eq!(ranks, RANK_VALUES);
        let csv = key_value_csv(&rows.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("key,value,mean_dice\nrank,4,"));

        let rows = ratio_sweep(&base, &data, &cfg, &DataRatio::ALL, None).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].report.train_scenes, data.train_scenes(DataRatio::P100).len());
    }
}
