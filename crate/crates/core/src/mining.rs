//! Online preference mining.
//!
//! For one ground-truth instance: synthesize `N` prompt sets of varying
//! quality, run the current actor on each, score all `N x M` mask
//! hypotheses by IoU against the target, and pick
//!
//! * inter-prompt pairs: per output slot, best vs worst prompt set;
//! * intra-prompt pairs: per prompt set, best vs worst slot;
//! * the global pair: best vs worst hypothesis over the whole grid, which
//!   feeds the supervised anchor.
//!
//! Pairs with equal scores carry no preference and are skipped.

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binarize, compute_iou, BinaryMask, InstanceMask, LogitMap};
use crate::model::{Encoded, ForwardOutput, PointPrompt, Prepared, PromptSet};
use crate::rng::{self, streams};
use crate::synthdata::Scene;

/// How carefully a simulated annotator placed the points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityTier {
    /// Positives deep inside the instance, negatives well into the background.
    Clean,
    /// At least one positive on the instance rim.
    Boundary,
    /// One positive slightly outside the instance; negatives on other instances.
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Prompt sets per instance (N).
    pub num_prompt_sets: usize,
    /// Mask hypotheses per prompt set (M); must match the model.
    pub num_masks: usize,
    /// Tiers and their sampling weights.
    pub quality_tiers: Vec<(QualityTier, f64)>,
    pub pos_range: (usize, usize),
    pub neg_range: (usize, usize),
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            num_prompt_sets: 4,
            num_masks: 3,
            quality_tiers: vec![
                (QualityTier::Clean, 1.0),
                (QualityTier::Boundary, 1.0),
                (QualityTier::Noisy, 1.0),
            ],
            pos_range: (1, 3),
            neg_range: (0, 3),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompt_sets < 2 {
            return Err(Error::Config("mining needs at least 2 prompt sets".into()));
        }
        if self.num_masks < 2 {
            return Err(Error::Config("intra-prompt pairs need at least 2 masks".into()));
        }
        if self.quality_tiers.is_empty()
            || self.quality_tiers.iter().any(|(_, w)| !(*w >= 0.0))
            || self.quality_tiers.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err(Error::Config("quality tier weights must be >= 0 with a positive sum".into()));
        }
        let (plo, phi) = self.pos_range;
        let (nlo, nhi) = self.neg_range;
        if plo < 1 || plo > phi || phi > 3 || nlo > nhi || nhi > 3 {
            return Err(Error::Config(format!(
                "point ranges pos {:?} / neg {:?} must lie within 1-3 / 0-3",
                self.pos_range, self.neg_range
            )));
        }
        Ok(())
    }
}

pub const EROSION_RADIUS: usize = 2;
pub const BOUNDARY_BAND: usize = 2;
pub const BACKGROUND_MARGIN: usize = 4;
pub const NOISY_OFFSET: usize = 2;

fn pick(rng: &mut rng::Rng, pool: &[(usize, usize)]) -> (usize, usize) {
    pool[rng.random_range(0..pool.len())]
}

fn background_pool(scene: &Scene, around: &BinaryMask, margin: usize) -> Vec<(usize, usize)> {
    let mut occupied = around.dilate(margin);
    for inst in &scene.instances {
        occupied
            .union_with(inst.mask())
            .expect("instances share the scene shape");
    }
    let shape = occupied.shape();
    (0..shape.height)
        .flat_map(|r| (0..shape.width).map(move |c| (r, c)))
        .filter(|&(r, c)| !occupied.get(r, c))
        .collect()
}

fn interior(instance: &InstanceMask) -> Vec<(usize, usize)> {
    let eroded = instance.mask().erode(EROSION_RADIUS);
    if eroded.is_empty() {
        debug!(
            "instance {} too small for {}-px erosion; sampling its raw interior",
            instance.id, EROSION_RADIUS
        );
        instance.mask().coords()
    } else {
        eroded.coords()
    }
}

/// Draws one tier according to the configured weights.
pub fn sample_tier(cfg: &MiningConfig, rng: &mut rng::Rng) -> QualityTier {
    let total: f64 = cfg.quality_tiers.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total);
    for (tier, w) in &cfg.quality_tiers {
        if u < *w {
            return *tier;
        }
        u -= w;
    }
    cfg.quality_tiers.last().expect("validated non-empty").0
}

/// Builds one prompt set of the given tier.
pub fn prompt_set_for_tier(
    instance: &InstanceMask,
    scene: &Scene,
    tier: QualityTier,
    num_pos: usize,
    num_neg: usize,
    rng: &mut rng::Rng,
) -> Result<PromptSet> {
    let inner = interior(instance);
    let all = instance.mask().coords();
    let mut points = Vec::with_capacity(num_pos + num_neg);
    match tier {
        QualityTier::Clean => {
            for _ in 0..num_pos {
                let (r, c) = pick(rng, &inner);
                points.push(PointPrompt::positive(r, c));
            }
        }
        QualityTier::Boundary => {
            let core = instance.mask().erode(BOUNDARY_BAND);
            let band: Vec<_> = all.iter().copied().filter(|&(r, c)| !core.get(r, c)).collect();
            let (r, c) = pick(rng, if band.is_empty() { &all } else { &band });
            points.push(PointPrompt::positive(r, c));
            for _ in 1..num_pos {
                let (r, c) = pick(rng, &all);
                points.push(PointPrompt::positive(r, c));
            }
        }
        QualityTier::Noisy => {
            let ring = instance.mask().dilate(NOISY_OFFSET);
            let outside: Vec<_> = ring
                .coords()
                .into_iter()
                .filter(|&(r, c)| !instance.mask().get(r, c))
                .collect();
            let (r, c) = pick(rng, if outside.is_empty() { &all } else { &outside });
            points.push(PointPrompt::positive(r, c));
            for _ in 1..num_pos {
                let (r, c) = pick(rng, &all);
                points.push(PointPrompt::positive(r, c));
            }
        }
    }
    if num_neg > 0 {
        let pool = match tier {
            QualityTier::Noisy => {
                let others: Vec<_> = scene
                    .instances
                    .iter()
                    .filter(|i| i.id != instance.id)
                    .flat_map(|i| i.mask().coords())
                    .collect();
                if others.is_empty() {
                    background_pool(scene, instance.mask(), 1)
                } else {
                    others
                }
            }
            _ => background_pool(scene, instance.mask(), BACKGROUND_MARGIN),
        };
        let pool = if pool.is_empty() {
            background_pool(scene, instance.mask(), 0)
        } else {
            pool
        };
        if !pool.is_empty() {
            for _ in 0..num_neg {
                let (r, c) = pick(rng, &pool);
                points.push(PointPrompt::negative(r, c));
            }
        }
    }
    PromptSet::new(points, instance.id)
}

/// `N` prompt sets for one instance, each of a randomly drawn quality tier.
pub fn synthesize_prompt_sets(
    instance: &InstanceMask,
    scene: &Scene,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<Vec<(QualityTier, PromptSet)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_prompt_sets);
    for k in 0..cfg.num_prompt_sets {
        let mut rng = rng::substream(seed, streams::PROMPTS, &[k as u64]);
        let tier = sample_tier(cfg, &mut rng);
        let num_pos = rng.random_range(cfg.pos_range.0..=cfg.pos_range.1);
        let num_neg = rng.random_range(cfg.neg_range.0..=cfg.neg_range.1);
        out.push((tier, prompt_set_for_tier(instance, scene, tier, num_pos, num_neg, &mut rng)?));
    }
    Ok(out)
}

/// One binarized hypothesis and its score against the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub mask: BinaryMask,
    pub logits: LogitMap,
    /// Output slot `j`, 0-based.
    pub slot: usize,
    /// Prompt set `k`, 0-based.
    pub prompt_index: usize,
    pub prompt_set: PromptSet,
    /// IoU against the target.
    pub score: f64,
}

/// `grid[k][j]`: hypothesis `j` of prompt set `k`.
pub type CandidateGrid = Vec<Vec<CandidateMask>>;

/// Scores the actor's outputs (one per prompt set) against the target.
pub fn candidates_from_outputs(
    sets: &[PromptSet],
    outputs: &[ForwardOutput],
    target: &BinaryMask,
) -> Result<CandidateGrid> {
    if sets.is_empty() {
        return Err(Error::Contract("no prompt sets to score".into()));
    }
    let mut grid = Vec::with_capacity(sets.len());
    for (k, (set, out)) in sets.iter().zip(outputs).enumerate() {
        let mut row = Vec::with_capacity(out.mask_logits.len());
        for (j, logits) in out.mask_logits.iter().enumerate() {
            let mask = binarize(logits, 0.0);
            let score = compute_iou(&mask, target)?;
            row.push(CandidateMask {
                mask,
                logits: logits.clone(),
                slot: j,
                prompt_index: k,
                prompt_set: set.clone(),
                score,
            });
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Runs the actor once per prompt set and scores every hypothesis.
pub fn generate_candidates(
    actor: &Prepared<'_>,
    encoded: &Encoded,
    sets: &[PromptSet],
    target: &BinaryMask,
) -> Result<CandidateGrid> {
    let outputs = sets
        .iter()
        .map(|s| actor.decode(encoded, s).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    candidates_from_outputs(sets, &outputs, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    InterPrompt,
    IntraPrompt,
}

/// Grid coordinates `(prompt_index, slot)` of a selected pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairIndex {
    pub winner: (usize, usize),
    pub loser: (usize, usize),
    pub kind: PairKind,
}

/// Index of the maximum (first on ties) and minimum (last on ties).
fn extremes(scores: impl Iterator<Item = f64>) -> Option<(usize, usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut worst: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
        if worst.is_none_or(|(_, w)| s <= w) {
            worst = Some((i, s));
        }
    }
    let ((bi, bs), (wi, ws)) = (best?, worst?);
    Some((bi, wi, bs, ws))
}

/// Per slot `j`: best vs worst prompt set. `scores[k][j]`.
pub fn select_inter_prompt_indices(scores: &[Vec<f64>]) -> Vec<PairIndex> {
    let m = scores.first().map_or(0, Vec::len);
    (0..m)
        .filter_map(|j| {
            let (w, l, ws, ls) = extremes(scores.iter().map(|row| row[j]))?;
            (ws > ls).then_some(PairIndex {
                winner: (w, j),
                loser: (l, j),
                kind: PairKind::InterPrompt,
            })
        })
        .collect()
}

/// Per prompt set `k`: best vs worst slot. `scores[k][j]`.
pub fn select_intra_prompt_indices(scores: &[Vec<f64>]) -> Vec<PairIndex> {
    scores
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let (w, l, ws, ls) = extremes(row.iter().copied())?;
            (ws > ls).then_some(PairIndex {
                winner: (k, w),
                loser: (k, l),
                kind: PairKind::IntraPrompt,
            })
        })
        .collect()
}

/// Best vs worst hypothesis over the whole grid (row-major tie order).
/// Always defined when the grid has at least two cells, even on ties.
pub fn select_global_indices(scores: &[Vec<f64>]) -> Option<((usize, usize), (usize, usize))> {
    let m = scores.first().map_or(0, Vec::len);
    if scores.len() * m < 2 {
        return None;
    }
    let (w, l, _, _) = extremes(scores.iter().flatten().copied())?;
    Some(((w / m, w % m), (l / m, l % m)))
}

pub fn score_table(grid: &CandidateGrid) -> Vec<Vec<f64>> {
    grid.iter()
        .map(|row| row.iter().map(|c| c.score).collect())
        .collect()
}

/// A winner/loser pair of candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: CandidateMask,
    pub loser: CandidateMask,
    pub kind: PairKind,
}

fn materialize(grid: &CandidateGrid, idx: &[PairIndex]) -> Vec<PreferencePair> {
    idx.iter()
        .map(|p| PreferencePair {
            winner: grid[p.winner.0][p.winner.1].clone(),
            loser: grid[p.loser.0][p.loser.1].clone(),
            kind: p.kind,
        })
        .collect()
}

pub fn select_inter_prompt_pairs(grid: &CandidateGrid) -> Vec<PreferencePair> {
    materialize(grid, &select_inter_prompt_indices(&score_table(grid)))
}

pub fn select_intra_prompt_pairs(grid: &CandidateGrid) -> Vec<PreferencePair> {
    materialize(grid, &select_intra_prompt_indices(&score_table(grid)))
}

/// Everything mined for one instance at one step.
#[derive(Debug, Clone)]
pub struct MinedInstance {
    pub tiers: Vec<QualityTier>,
    pub sets: Vec<PromptSet>,
    pub grid: CandidateGrid,
    pub inter: Vec<PairIndex>,
    pub intra: Vec<PairIndex>,
    pub global: ((usize, usize), (usize, usize)),
}

impl MinedInstance {
    pub fn inter_pairs(&self) -> Vec<PreferencePair> {
        materialize(&self.grid, &self.inter)
    }

    pub fn intra_pairs(&self) -> Vec<PreferencePair> {
        materialize(&self.grid, &self.intra)
    }

    pub fn record(&self, scene_id: &str, instance_id: u16) -> MiningRecord {
        MiningRecord {
            scene_id: scene_id.to_string(),
            instance_id,
            scores: score_table(&self.grid),
            inter: self.inter.clone(),
            intra: self.intra.clone(),
            global: self.global,
        }
    }
}

/// Selects pairs from an already scored grid.
pub fn mine_from_grid(
    tiers: Vec<QualityTier>,
    sets: Vec<PromptSet>,
    grid: CandidateGrid,
) -> Result<MinedInstance> {
    let scores = score_table(&grid);
    let global = select_global_indices(&scores)
        .ok_or_else(|| Error::Contract("candidate grid needs at least two cells".into()))?;
    Ok(MinedInstance {
        inter: select_inter_prompt_indices(&scores),
        intra: select_intra_prompt_indices(&scores),
        global,
        tiers,
        sets,
        grid,
    })
}

/// Prompt synthesis, candidate generation, scoring and pair selection for
/// one instance under the current actor parameters.
pub fn mine_instance(
    actor: &Prepared<'_>,
    encoded: &Encoded,
    scene: &Scene,
    instance: &InstanceMask,
    target: &BinaryMask,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<MinedInstance> {
    if cfg.num_masks != actor.params.arch.num_masks {
        return Err(Error::Config(format!(
            "mining expects {} masks but the model has {}",
            cfg.num_masks, actor.params.arch.num_masks
        )));
    }
    let (tiers, sets): (Vec<_>, Vec<_>) =
        synthesize_prompt_sets(instance, scene, cfg, seed)?.into_iter().unzip();
    let grid = generate_candidates(actor, encoded, &sets, target)?;
    mine_from_grid(tiers, sets, grid)
}

/// One line of the optional mining audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub scene_id: String,
    pub instance_id: u16,
    pub scores: Vec<Vec<f64>>,
    pub inter: Vec<PairIndex>,
    pub intra: Vec<PairIndex>,
    pub global: ((usize, usize), (usize, usize)),
}

impl MiningRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Shape;
    use crate::model::{encode, init_params, ArchConfig, Polarity};
    use crate::synthdata::{build_task_target, generate_scene, SceneSpec, TaskMode};
    use proptest::prelude::*;

    fn scene() -> Scene {
        generate_scene(&SceneSpec::default(), 42).unwrap()
    }

    #[test]
    fn inter_examples() {
        // Slot scores [0.3, 0.9, 0.5] over three prompt sets.
        let s = vec![vec![0.3], vec![0.9], vec![0.5]];
        let p = select_inter_prompt_indices(&s);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].winner.0, p[0].loser.0), (1, 0));
        assert!(select_inter_prompt_indices(&[vec![0.5], vec![0.5]]).is_empty());
        let full = vec![
            vec![0.1, 0.2, 0.3],
            vec![0.4, 0.5, 0.6],
            vec![0.7, 0.8, 0.9],
            vec![0.0, 0.05, 0.15],
        ];
        assert_eq!(select_inter_prompt_indices(&full).len(), 3);
    }

    #[test]
    fn intra_examples() {
        let p = select_intra_prompt_indices(&[vec![0.2, 0.8, 0.8]]);
        assert_eq!((p[0].winner.1, p[0].loser.1), (1, 0));
        assert!(select_intra_prompt_indices(&[vec![0.4, 0.4, 0.4]]).is_empty());
        let sep = vec![vec![0.1, 0.2, 0.3]; 4];
        assert_eq!(select_intra_prompt_indices(&sep).len(), 4);
    }

    #[test]
    fn global_pair_defined_on_ties() {
        let g = select_global_indices(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(g, ((0, 0), (1, 1)));
    }

    #[test]
    fn prompt_sets_cardinality_and_clean_tier() {
        let s = scene();
        let inst = &s.instances[0];
        let cfg = MiningConfig::default();
        let sets = synthesize_prompt_sets(inst, &s, &cfg, 7).unwrap();
        assert_eq!(sets.len(), 4);
        assert_eq!(sets, synthesize_prompt_sets(inst, &s, &cfg, 7).unwrap());
        for (_, set) in &sets {
            set.check_training_budget().unwrap();
        }
        let mut r = rng::substream(3, "t", &[]);
        for _ in 0..20 {
            let set = prompt_set_for_tier(inst, &s, QualityTier::Clean, 3, 3, &mut r).unwrap();
            for p in &set.points {
                match p.polarity {
                    Polarity::Positive => assert!(inst.mask().get(p.row, p.col)),
                    Polarity::Negative => {
                        assert!(!inst.mask().dilate(BACKGROUND_MARGIN).get(p.row, p.col))
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_tier_places_one_positive_outside() {
        let s = scene();
        let inst = &s.instances[0];
        let mut r = rng::substream(4, "t", &[]);
        let set = prompt_set_for_tier(inst, &s, QualityTier::Noisy, 2, 2, &mut r).unwrap();
        let first = set.points[0];
        assert!(!inst.mask().get(first.row, first.col));
        assert!(inst.mask().dilate(NOISY_OFFSET).get(first.row, first.col));
        for p in set.points.iter().filter(|p| p.polarity == Polarity::Negative) {
            assert!(s.instances.iter().any(|i| i.id != inst.id && i.mask().get(p.row, p.col)));
        }
    }

    #[test]
    fn candidate_grid_shape_and_scoring() {
        let s = scene();
        let p = init_params(&ArchConfig::default(), 1).unwrap();
        let enc = encode(&p, &s.image).unwrap();
        let target = build_task_target(&s, TaskMode::T1, None).unwrap().composite_mask;
        let sets: Vec<_> = synthesize_prompt_sets(&s.instances[0], &s, &MiningConfig::default(), 1)
            .unwrap()
            .into_iter()
            .map(|(_, set)| set)
            .collect();
        let grid = generate_candidates(&Prepared::new(&p), &enc, &sets, &target).unwrap();
        assert_eq!(grid.len() * grid[0].len(), 12);

        // Identical and empty candidates score 1 and 0.
        let shape = Shape::new(64, 64);
        let perfect = ForwardOutput {
            mask_logits: vec![
                LogitMap::new(shape, target.bits().iter().map(|b| if *b { 5.0 } else { -5.0 }).collect()).unwrap(),
                LogitMap::constant(shape, -5.0),
                LogitMap::constant(shape, -5.0),
            ],
            quality_scores: vec![0.0; 3],
        };
        let g = candidates_from_outputs(&sets[..1], &[perfect], &target).unwrap();
        assert_eq!(g[0][0].score, 1.0);
        assert_eq!(g[0][1].score, 0.0);
    }

    #[test]
    fn degenerate_grid_yields_no_pairs() {
        let scores = vec![vec![0.25; 3]; 2];
        assert!(select_inter_prompt_indices(&scores).is_empty());
        assert!(select_intra_prompt_indices(&scores).is_empty());
    }

    fn brute_force(scores: &[Vec<f64>]) -> (Vec<PairIndex>, Vec<PairIndex>) {
        let n = scores.len();
        let m = scores[0].len();
        let mut inter = Vec::new();
        for j in 0..m {
            let max = (0..n).map(|k| scores[k][j]).fold(f64::NEG_INFINITY, f64::max);
            let min = (0..n).map(|k| scores[k][j]).fold(f64::INFINITY, f64::min);
            if max > min {
                let w = (0..n).find(|&k| scores[k][j] == max).unwrap();
                let l = (0..n).rev().find(|&k| scores[k][j] == min).unwrap();
                inter.push(PairIndex { winner: (w, j), loser: (l, j), kind: PairKind::InterPrompt });
            }
        }
        let mut intra = Vec::new();
        for k in 0..n {
            let max = scores[k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = scores[k].iter().copied().fold(f64::INFINITY, f64::min);
            if max > min {
                let w = (0..m).find(|&j| scores[k][j] == max).unwrap();
                let l = (0..m).rev().find(|&j| scores[k][j] == min).unwrap();
                intra.push(PairIndex { winner: (k, w), loser: (k, l), kind: PairKind::IntraPrompt });
            }
        }
        (inter, intra)
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(
            scores in (2usize..=5).prop_flat_map(|n| {
                proptest::collection::vec(proptest::collection::vec(0u8..4, 3), n)
            })
        ) {
            // Coarse quantization makes ties common.
            let scores: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| r.iter().map(|v| f64::from(*v) / 4.0).collect())
                .collect();
            let (inter, intra) = brute_force(&scores);
            prop_assert_eq!(select_inter_prompt_indices(&scores), inter.clone());
            prop_assert_eq!(select_intra_prompt_indices(&scores), intra.clone());
            for p in inter.iter().chain(&intra) {
                prop_assert!(scores[p.winner.0][p.winner.1] > scores[p.loser.0][p.loser.1]);
            }
            for p in &inter {
                prop_assert!(p.winner.0 != p.loser.0 && p.winner.1 == p.loser.1);
            }
            for p in &intra {
                prop_assert!(p.winner.0 == p.loser.0 && p.winner.1 != p.loser.1);
            }
        }
    }
}
