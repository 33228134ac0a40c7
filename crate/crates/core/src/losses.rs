//! Preference and supervised losses.
//!
//! ```text
//! log pi(y | S)  = mean_p [ y_p log s(z_p) + (1 - y_p) log s(-z_p) ]
//! pair loss      = -log s(beta * [(a_w - r_w) - (a_l - r_l)])
//! po1            = mean over inter-prompt pairs (winner and loser under their own prompts)
//! po2            = mean over intra-prompt pairs (shared prompt, different slots)
//! sup            = BCE(z_w, gt) + BCE(z_l, gt)
//! total          = lambda_dw * (w1 * po1 + lambda * po2) + w_sup * sup
//! ```
//!
//! `w1` and `w_sup` are 1 except in ablations.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Image, LogitMap, LOGIT_CLAMP};
use crate::mining::{MinedInstance, PairIndex, PreferencePair};
use crate::model::{encode, ForwardOutput, ModelParams, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    /// Weight of the intra-prompt term.
    pub lambda_intra: f64,
    /// Weight of the whole preference term.
    pub lambda_dw: f64,
    /// Weight of the inter-prompt term (ablation switch).
    pub po1_weight: f64,
    /// Weight of the supervised anchor (ablation switch).
    pub sup_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_intra: 1.0,
            lambda_dw: 1.0,
            po1_weight: 1.0,
            sup_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_intra", self.lambda_intra),
            ("lambda_dw", self.lambda_dw),
            ("po1_weight", self.po1_weight),
            ("sup_weight", self.sup_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub po1: f64,
    pub po2: f64,
    pub sup: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.po1, self.po2, self.sup, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.po1 += b.po1;
            acc.po2 += b.po2;
            acc.sup += b.sup;
            acc.total += b.total;
        }
        LossBreakdown {
            po1: acc.po1 / n,
            po2: acc.po2 / n,
            sup: acc.sup / n,
            total: acc.total / n,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(logits: &LogitMap, mask: &BinaryMask) -> Result<()> {
    if logits.shape() != mask.shape() {
        return Err(Error::Contract(format!(
            "logits {:?} and mask {:?} differ in shape",
            logits.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Mean per-pixel Bernoulli log-probability of `mask` under `logits`.
pub fn mask_log_likelihood(logits: &LogitMap, mask: &BinaryMask) -> Result<f64> {
    check_shapes(logits, mask)?;
    let n = mask.bits().len();
    let sum: f64 = mask
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = logits.clamped(i);
            if y {
                -softplus(-z)
            } else {
                -softplus(z)
            }
        })
        .sum();
    Ok(sum / n as f64)
}

/// Derivative of [`mask_log_likelihood`] w.r.t. each raw logit, scaled by
/// `scale`. Zero where the clamp is active.
pub fn mask_log_likelihood_grad(logits: &LogitMap, mask: &BinaryMask, scale: f64) -> Result<Vec<f64>> {
    check_shapes(logits, mask)?;
    let n = mask.bits().len() as f64;
    Ok(mask
        .bits()
        .iter()
        .zip(logits.values())
        .map(|(&y, &z)| {
            if z.abs() > LOGIT_CLAMP {
                0.0
            } else {
                scale * (f64::from(u8::from(y)) - sigmoid(z)) / n
            }
        })
        .collect())
}

/// Mean binary cross-entropy of `logits` against `gt`.
pub fn bce(logits: &LogitMap, gt: &BinaryMask) -> Result<f64> {
    Ok(-mask_log_likelihood(logits, gt)?)
}

/// Preference margin: the winner's log-ratio minus the loser's.
pub fn pair_margin(actor_w: f64, ref_w: f64, actor_l: f64, ref_l: f64) -> f64 {
    (actor_w - ref_w) - (actor_l - ref_l)
}

/// `-log sigmoid(beta * margin)`.
pub fn dpo_pair_loss(actor_w: f64, ref_w: f64, actor_l: f64, ref_l: f64, beta: f64) -> f64 {
    softplus(-beta * pair_margin(actor_w, ref_w, actor_l, ref_l))
}

/// Derivative of [`dpo_pair_loss`] w.r.t. the margin.
pub fn dpo_pair_loss_dmargin(margin: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * margin)
}

fn pair_likelihoods(
    pair: &PreferencePair,
    actor: &Prepared<'_>,
    reference: &Prepared<'_>,
    image: &Image,
) -> Result<[f64; 4]> {
    let ea = encode(actor.params, image)?;
    let er = encode(reference.params, image)?;
    let side = |c: &crate::mining::CandidateMask| -> Result<(f64, f64)> {
        let a = actor.decode(&ea, &c.prompt_set)?.0;
        let r = reference.decode(&er, &c.prompt_set)?.0;
        Ok((
            mask_log_likelihood(&a.mask_logits[c.slot], &c.mask)?,
            mask_log_likelihood(&r.mask_logits[c.slot], &c.mask)?,
        ))
    };
    let (aw, rw) = side(&pair.winner)?;
    let (al, rl) = side(&pair.loser)?;
    Ok([aw, rw, al, rl])
}

fn mean_pair_loss(
    pairs: &[PreferencePair],
    actor: &ModelParams,
    reference: &ModelParams,
    image: &Image,
    cfg: &LossConfig,
    what: &str,
) -> Result<f64> {
    if pairs.is_empty() {
        debug!("{what}: no preference pairs, contributing 0");
        return Ok(0.0);
    }
    let (pa, pr) = (Prepared::new(actor), Prepared::new(reference));
    let mut sum = 0.0;
    for p in pairs {
        let [aw, rw, al, rl] = pair_likelihoods(p, &pa, &pr, image)?;
        sum += dpo_pair_loss(aw, rw, al, rl, cfg.beta);
    }
    Ok(sum / pairs.len() as f64)
}

/// Inter-prompt term, re-running the actor and reference on each pair's own
/// prompt sets.
pub fn loss_po1(
    pairs: &[PreferencePair],
    actor: &ModelParams,
    reference: &ModelParams,
    image: &Image,
    cfg: &LossConfig,
) -> Result<f64> {
    mean_pair_loss(pairs, actor, reference, image, cfg, "po1")
}

/// Intra-prompt term; winner and loser share a prompt set.
pub fn loss_po2(
    pairs: &[PreferencePair],
    actor: &ModelParams,
    reference: &ModelParams,
    image: &Image,
    cfg: &LossConfig,
) -> Result<f64> {
    mean_pair_loss(pairs, actor, reference, image, cfg, "po2")
}

/// Supervised anchor: BCE of the winner's and loser's logits against `gt`.
pub fn loss_sup(winner_logits: &LogitMap, loser_logits: &LogitMap, gt: &BinaryMask) -> Result<f64> {
    Ok(bce(winner_logits, gt)? + bce(loser_logits, gt)?)
}

pub fn loss_total(po1: f64, po2: f64, sup: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        po1,
        po2,
        sup,
        total: cfg.lambda_dw * (cfg.po1_weight * po1 + cfg.lambda_intra * po2) + cfg.sup_weight * sup,
    }
}

/// Loss of one mined instance, recomputed from scratch by re-running both
/// models. Mined masks and pair indices are held fixed.
pub fn instance_loss(
    actor: &ModelParams,
    reference: &ModelParams,
    image: &Image,
    mined: &MinedInstance,
    target: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let po1 = loss_po1(&mined.inter_pairs(), actor, reference, image, cfg)?;
    let po2 = loss_po2(&mined.intra_pairs(), actor, reference, image, cfg)?;
    let (w, l) = mined.global;
    let enc = encode(actor, image)?;
    let pa = Prepared::new(actor);
    let zw = pa.decode(&enc, &mined.sets[w.0])?.0.mask_logits.swap_remove(w.1);
    let zl = pa.decode(&enc, &mined.sets[l.0])?.0.mask_logits.swap_remove(l.1);
    Ok(loss_total(po1, po2, loss_sup(&zw, &zl, target)?, cfg))
}

/// Loss of one mined instance and its gradient w.r.t. every actor logit.
///
/// `actor_out[k]` / `ref_out[k]` are the two models' outputs for prompt set
/// `k`; the actor outputs must be the ones the grid was mined from.
/// Returns `d_logits[k][j]`, empty where slot `j` of set `k` gets no gradient.
pub fn instance_objective(
    actor_out: &[ForwardOutput],
    ref_out: &[ForwardOutput],
    mined: &MinedInstance,
    target: &BinaryMask,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<Vec<f64>>>)> {
    let n = mined.grid.len();
    if actor_out.len() != n || ref_out.len() != n {
        return Err(Error::Contract(format!(
            "expected {n} outputs per model, got {} / {}",
            actor_out.len(),
            ref_out.len()
        )));
    }
    let mut d_logits: Vec<Vec<Vec<f64>>> = actor_out
        .iter()
        .map(|o| vec![Vec::new(); o.mask_logits.len()])
        .collect();
    let mut accumulate = |k: usize, j: usize, g: Vec<f64>| {
        let slot = &mut d_logits[k][j];
        if slot.is_empty() {
            *slot = g;
        } else {
            slot.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    };

    let mut pref_term = |pairs: &[PairIndex], weight: f64| -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let count = pairs.len() as f64;
        let mut sum = 0.0;
        for p in pairs {
            let (w, l) = (p.winner, p.loser);
            let mw = &mined.grid[w.0][w.1].mask;
            let ml = &mined.grid[l.0][l.1].mask;
            let (zaw, zrw) = (&actor_out[w.0].mask_logits[w.1], &ref_out[w.0].mask_logits[w.1]);
            let (zal, zrl) = (&actor_out[l.0].mask_logits[l.1], &ref_out[l.0].mask_logits[l.1]);
            let margin = pair_margin(
                mask_log_likelihood(zaw, mw)?,
                mask_log_likelihood(zrw, mw)?,
                mask_log_likelihood(zal, ml)?,
                mask_log_likelihood(zrl, ml)?,
            );
            sum += softplus(-cfg.beta * margin);
            let dm = weight * dpo_pair_loss_dmargin(margin, cfg.beta) / count;
            if dm != 0.0 {
                accumulate(w.0, w.1, mask_log_likelihood_grad(zaw, mw, dm)?);
                accumulate(l.0, l.1, mask_log_likelihood_grad(zal, ml, -dm)?);
            }
        }
        Ok(sum / count)
    };
    let po1 = pref_term(&mined.inter, cfg.lambda_dw * cfg.po1_weight)?;
    let po2 = pref_term(&mined.intra, cfg.lambda_dw * cfg.lambda_intra)?;

    let (w, l) = mined.global;
    let zw = &actor_out[w.0].mask_logits[w.1];
    let zl = &actor_out[l.0].mask_logits[l.1];
    let sup = loss_sup(zw, zl, target)?;
    if cfg.sup_weight != 0.0 {
        accumulate(w.0, w.1, mask_log_likelihood_grad(zw, target, -cfg.sup_weight)?);
        accumulate(l.0, l.1, mask_log_likelihood_grad(zl, target, -cfg.sup_weight)?);
    }
    Ok((loss_total(po1, po2, sup, cfg), d_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Shape;
    use crate::mining::{mine_from_grid, synthesize_prompt_sets, candidates_from_outputs, MiningConfig};
    use crate::model::{clone_frozen, init_params, AdaptedLayer, ArchConfig};
    use crate::synthdata::{build_task_target, generate_scene, SceneSpec, TaskMode};
    use proptest::prelude::*;
    use rand::Rng as _;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Reference log(1 + e^x) by direct evaluation, valid for moderate x.
    fn naive_softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    #[test]
    fn closed_form_values() {
        assert!((dpo_pair_loss(0.3, 0.3, -1.0, -1.0, 1.0) - LN2).abs() < 1e-12);
        assert!((dpo_pair_loss(2.0, 0.0, 0.0, 0.0, 1.0) - naive_softplus(-2.0)).abs() < 1e-12);
        assert!((dpo_pair_loss(0.0, 0.0, 2.0, 0.0, 1.0) - naive_softplus(2.0)).abs() < 1e-12);
        assert!((naive_softplus(-2.0) - 0.126928).abs() < 1e-6);
        assert!((naive_softplus(2.0) - 2.126928).abs() < 1e-6);

        let s = Shape::new(16, 16);
        let zero = LogitMap::constant(s, 0.0);
        let ten = LogitMap::constant(s, 10.0);
        for m in [BinaryMask::empty(s), BinaryMask::full(s)] {
            assert!((mask_log_likelihood(&zero, &m).unwrap() + LN2).abs() < 1e-12);
        }
        let ones = mask_log_likelihood(&ten, &BinaryMask::full(s)).unwrap();
        assert!((ones + naive_softplus(-10.0)).abs() < 1e-12);
        assert!((ones + 4.53989e-5).abs() < 1e-9);
        let zeros = mask_log_likelihood(&ten, &BinaryMask::empty(s)).unwrap();
        assert!((zeros + naive_softplus(10.0)).abs() < 1e-12);
        assert!((zeros + 10.0000454).abs() < 1e-7);
    }

    #[test]
    fn sup_values() {
        let s = Shape::new(16, 16);
        let zero = LogitMap::constant(s, 0.0);
        assert!((loss_sup(&zero, &zero, &BinaryMask::full(s)).unwrap() - 2.0 * LN2).abs() < 1e-12);

        let mut gt = BinaryMask::empty(s);
        for c in 0..8 {
            gt.set(3, c, true);
        }
        let confident = LogitMap::new(
            s,
            gt.bits().iter().map(|b| if *b { 100.0 } else { -100.0 }).collect(),
        )
        .unwrap();
        // Every pixel is clamped to +-30 and contributes ln(1 + e^-30).
        let expected = LN2 + (-30f64).exp().ln_1p();
        assert!((loss_sup(&confident, &zero, &gt).unwrap() - expected).abs() < 1e-12);

        let neg = LogitMap::constant(s, -25.0);
        assert!(loss_sup(&neg, &neg, &BinaryMask::empty(s)).unwrap() < 1e-9);
        assert!(loss_sup(&neg, &LogitMap::constant(Shape::new(8, 8), 0.0), &gt).is_err());
    }

    #[test]
    fn total_combines_components() {
        let b = loss_total(LN2, LN2, 2.0 * LN2, &LossConfig::default());
        assert!((b.total - 4.0 * LN2).abs() < 1e-12);
        assert!((b.total - 2.772589).abs() < 1e-6);
        let sup_only = LossConfig {
            lambda_dw: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(loss_total(0.9, 1.7, 0.31, &sup_only).total, 0.31);
        assert!(LossConfig { beta: 0.0, ..LossConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn pair_loss_identity_and_monotonicity(m in -40.0f64..40.0, d in 1e-3f64..5.0) {
            let l = |m: f64| dpo_pair_loss(m, 0.0, 0.0, 0.0, 1.0);
            let neg = dpo_pair_loss(0.0, 0.0, m, 0.0, 1.0);
            prop_assert!((l(m) - neg + m).abs() < 1e-12);
            prop_assert!(l(m + d) < l(m));
            prop_assert!(l(m) >= 0.0);
        }

        #[test]
        fn likelihood_gradient_matches_differences(
            z in proptest::collection::vec(-8.0f64..8.0, 6),
            y in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let s = Shape::new(2, 3);
            let mask = BinaryMask::from_bits(s, y).unwrap();
            let g = mask_log_likelihood_grad(&LogitMap::new(s, z.clone()).unwrap(), &mask, 1.0).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut p = z.clone();
                p[i] += h;
                let mut q = z.clone();
                q[i] -= h;
                let fd = (mask_log_likelihood(&LogitMap::new(s, p).unwrap(), &mask).unwrap()
                    - mask_log_likelihood(&LogitMap::new(s, q).unwrap(), &mask).unwrap())
                    / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gradient_step_prefers_winner_on_toy_policy() {
        // Two-pixel policy whose logits are the parameters themselves.
        let s = Shape::new(1, 2);
        let winner = BinaryMask::from_bits(s, vec![true, false]).unwrap();
        let loser = BinaryMask::from_bits(s, vec![false, true]).unwrap();
        let theta = [0.2, -0.1];
        let reference = LogitMap::new(s, theta.to_vec()).unwrap();
        let ll = |t: &[f64], m: &BinaryMask| mask_log_likelihood(&LogitMap::new(s, t.to_vec()).unwrap(), m).unwrap();
        let margin = pair_margin(
            ll(&theta, &winner),
            mask_log_likelihood(&reference, &winner).unwrap(),
            ll(&theta, &loser),
            mask_log_likelihood(&reference, &loser).unwrap(),
        );
        let dm = dpo_pair_loss_dmargin(margin, 1.0);
        let gw = mask_log_likelihood_grad(&reference, &winner, dm).unwrap();
        let gl = mask_log_likelihood_grad(&reference, &loser, -dm).unwrap();
        let step: Vec<f64> = theta
            .iter()
            .zip(gw.iter().zip(&gl))
            .map(|(t, (a, b))| t - 0.5 * (a + b))
            .collect();
        let before = ll(&theta, &winner) - ll(&theta, &loser);
        let after = ll(&step, &winner) - ll(&step, &loser);
        assert!(after > before);
        assert!(step[0] > theta[0] && step[1] < theta[1]);
    }

    fn mined_setup(seed: u64) -> (ModelParams, ModelParams, crate::synthdata::Scene, MinedInstance, BinaryMask) {
        let arch = ArchConfig {
            height: 32,
            width: 32,
            widths: [4, 6, 8],
            num_masks: 3,
            adapter_rank: Some(4),
        };
        let spec = SceneSpec {
            height: 32,
            width: 32,
            instances_per_class: (1, 3),
            radius_range: (3, 5),
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, seed).unwrap();
        let reference = init_params(&arch, seed).unwrap();
        let mut actor = reference.clone();
        let mut r = crate::rng::substream(seed, "perturb", &[]);
        for layer in AdaptedLayer::ALL {
            let (_, b) = layer.factors();
            for v in actor.get_mut(b).unwrap() {
                *v = r.random_range(-0.3..0.3);
            }
        }
        let target = build_task_target(&scene, TaskMode::T2, Some(scene.prompted_class))
            .unwrap()
            .composite_mask;
        let inst = scene.instances_of_class(scene.prompted_class).next().unwrap().clone();
        let sets: Vec<_> = synthesize_prompt_sets(&inst, &scene, &MiningConfig::default(), seed)
            .unwrap()
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let enc = encode(&actor, &scene.image).unwrap();
        let pa = Prepared::new(&actor);
        let outs: Vec<_> = sets.iter().map(|s| pa.decode(&enc, s).unwrap().0).collect();
        let grid = candidates_from_outputs(&sets, &outs, &target).unwrap();
        let mined = mine_from_grid(vec![], sets, grid).unwrap();
        (actor, reference, scene, mined, target)
    }

    fn outputs(p: &ModelParams, scene: &crate::synthdata::Scene, mined: &MinedInstance) -> Vec<ForwardOutput> {
        let enc = encode(p, &scene.image).unwrap();
        let pp = Prepared::new(p);
        mined.sets.iter().map(|s| pp.decode(&enc, s).unwrap().0).collect()
    }

    #[test]
    fn fused_objective_matches_recomputed_loss() {
        for seed in [1, 2, 3] {
            let (actor, reference, scene, mined, target) = mined_setup(seed);
            let cfg = LossConfig {
                beta: 1.3,
                lambda_intra: 0.7,
                ..LossConfig::default()
            };
            let (fused, _) = instance_objective(
                &outputs(&actor, &scene, &mined),
                &outputs(&reference, &scene, &mined),
                &mined,
                &target,
                &cfg,
            )
            .unwrap();
            let direct = instance_loss(&actor, &reference, &scene.image, &mined, &target, &cfg).unwrap();
            assert!((fused.total - direct.total).abs() < 1e-12 * direct.total.abs().max(1.0));
            assert!((fused.po1 - direct.po1).abs() < 1e-12);
            assert!((fused.po2 - direct.po2).abs() < 1e-12);
        }
    }

    #[test]
    fn anchored_actor_gives_ln2() {
        let (actor, _, scene, mined, target) = mined_setup(4);
        let reference = clone_frozen(&actor);
        let out = outputs(&actor, &scene, &mined);
        let reference_out = outputs(&reference, &scene, &mined);
        let (b, _) = instance_objective(&out, &reference_out, &mined, &target, &LossConfig::default()).unwrap();
        if !mined.inter.is_empty() {
            assert_eq!(b.po1, LN2);
        }
        if !mined.intra.is_empty() {
            assert_eq!(b.po2, LN2);
        }
        assert_eq!(loss_po1(&[], &actor, &reference, &scene.image, &LossConfig::default()).unwrap(), 0.0);
    }
}
