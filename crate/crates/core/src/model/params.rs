use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Low-rank adapter ranks that may be configured.
pub const ALLOWED_RANKS: [usize; 4] = [4, 8, 32, 64];

/// Network shape. The encoder downsamples by 8, so image sides must be
/// multiples of 8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Channel widths of the three encoder stages; the last is the embedding width.
    pub widths: [usize; 3],
    /// Number of mask hypotheses.
    pub num_masks: usize,
    /// Rank of the adapters on the mixing and decoder layers, if any.
    pub adapter_rank: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            widths: [16, 32, 64],
            num_masks: 3,
            adapter_rank: Some(64),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be >= 16 and a multiple of 8",
                self.height, self.width
            )));
        }
        if self.widths.iter().any(|w| *w == 0) || self.widths[2] % 4 != 0 {
            return Err(Error::Config(format!(
                "channel widths {:?} invalid (embedding width must be a positive multiple of 4)",
                self.widths
            )));
        }
        if self.num_masks < 1 {
            return Err(Error::Config("need at least one mask head".into()));
        }
        if let Some(r) = self.adapter_rank {
            if !ALLOWED_RANKS.contains(&r) {
                return Err(Error::Config(format!(
                    "adapter rank {r} not in {ALLOWED_RANKS:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }
}

/// The four linear maps that carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptedLayer {
    Mix,
    Up1,
    Up2,
    Head,
}

impl AdaptedLayer {
    pub const ALL: [AdaptedLayer; 4] = [
        AdaptedLayer::Mix,
        AdaptedLayer::Up1,
        AdaptedLayer::Up2,
        AdaptedLayer::Head,
    ];

    pub fn weight(self) -> ParamId {
        match self {
            AdaptedLayer::Mix => ParamId::MixW,
            AdaptedLayer::Up1 => ParamId::Up1W,
            AdaptedLayer::Up2 => ParamId::Up2W,
            AdaptedLayer::Head => ParamId::HeadW,
        }
    }

    /// The `(A, B)` factor ids.
    pub fn factors(self) -> (ParamId, ParamId) {
        match self {
            AdaptedLayer::Mix => (ParamId::MixLoraA, ParamId::MixLoraB),
            AdaptedLayer::Up1 => (ParamId::Up1LoraA, ParamId::Up1LoraB),
            AdaptedLayer::Up2 => (ParamId::Up2LoraA, ParamId::Up2LoraB),
            AdaptedLayer::Head => (ParamId::HeadLoraA, ParamId::HeadLoraB),
        }
    }

    /// `(d_out, d_in)` of the underlying linear map.
    pub fn dims(self, arch: &ArchConfig) -> (usize, usize) {
        let [c1, c2, d] = arch.widths;
        match self {
            AdaptedLayer::Mix => (d, 4 * d),
            AdaptedLayer::Up1 => (4 * c2, d),
            AdaptedLayer::Up2 => (4 * c1, c2),
            AdaptedLayer::Head => (4 * arch.num_masks, c1),
        }
    }
}

macro_rules! param_ids {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Every named tensor of the model, in checkpoint order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum ParamId { $($variant),* }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(ParamId::$variant => $name),* }
            }
        }
    };
}

param_ids! {
    Enc1W => "encoder.conv1.weight",
    Enc1B => "encoder.conv1.bias",
    Enc2W => "encoder.conv2.weight",
    Enc2B => "encoder.conv2.bias",
    Enc3W => "encoder.conv3.weight",
    Enc3B => "encoder.conv3.bias",
    PolarityEmbed => "prompt.polarity_embedding",
    MixW => "fusion.mix.weight",
    MixB => "fusion.mix.bias",
    Up1W => "decoder.up1.weight",
    Up1B => "decoder.up1.bias",
    Up2W => "decoder.up2.weight",
    Up2B => "decoder.up2.bias",
    HeadW => "decoder.heads.weight",
    HeadB => "decoder.heads.bias",
    QualityW => "quality.weight",
    QualityB => "quality.bias",
    MixLoraA => "fusion.mix.adapter.a",
    MixLoraB => "fusion.mix.adapter.b",
    Up1LoraA => "decoder.up1.adapter.a",
    Up1LoraB => "decoder.up1.adapter.b",
    Up2LoraA => "decoder.up2.adapter.a",
    Up2LoraB => "decoder.up2.adapter.b",
    HeadLoraA => "decoder.heads.adapter.a",
    HeadLoraB => "decoder.heads.adapter.b",
}

impl ParamId {
    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn is_adapter(self) -> bool {
        self >= ParamId::MixLoraA
    }

    pub fn is_encoder(self) -> bool {
        self <= ParamId::Enc3B
    }

    /// Tensor shape, or `None` when the tensor is absent for this architecture.
    pub fn shape(self, arch: &ArchConfig) -> Option<Vec<usize>> {
        let [c1, c2, d] = arch.widths;
        let m = arch.num_masks;
        let shape = match self {
            ParamId::Enc1W => vec![c1, 3, 3, 1],
            ParamId::Enc1B => vec![c1],
            ParamId::Enc2W => vec![c2, 3, 3, c1],
            ParamId::Enc2B => vec![c2],
            ParamId::Enc3W => vec![d, 3, 3, c2],
            ParamId::Enc3B => vec![d],
            ParamId::PolarityEmbed => vec![2, d],
            ParamId::MixW => vec![d, 4 * d],
            ParamId::MixB => vec![d],
            ParamId::Up1W => vec![4 * c2, d],
            ParamId::Up1B => vec![c2],
            ParamId::Up2W => vec![4 * c1, c2],
            ParamId::Up2B => vec![c1],
            ParamId::HeadW => vec![4 * m, c1],
            ParamId::HeadB => vec![m],
            ParamId::QualityW => vec![m, d],
            ParamId::QualityB => vec![m],
            adapter => {
                let r = arch.adapter_rank?;
                let layer = AdaptedLayer::ALL
                    .into_iter()
                    .find(|l| {
                        let (a, b) = l.factors();
                        a == adapter || b == adapter
                    })
                    .expect("adapter id belongs to a layer");
                let (d_out, d_in) = layer.dims(arch);
                if layer.factors().0 == adapter {
                    vec![d_out, r]
                } else {
                    vec![r, d_in]
                }
            }
        };
        Some(shape)
    }
}

/// All model tensors plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    tensors: Vec<Vec<f64>>,
    frozen: bool,
}

/// Which tensors an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AdaptersOnly,
    Full,
}

fn normal(rng: &mut rng::Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Deterministic initialization. Adapter `B` factors start at zero, so a
/// fresh adapter leaves every layer unchanged.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut tensors = Vec::with_capacity(ParamId::ALL.len());
    for &id in ParamId::ALL {
        let Some(shape) = id.shape(arch) else {
            tensors.push(Vec::new());
            continue;
        };
        let n: usize = shape.iter().product();
        let mut rng = rng::substream(seed, streams::INIT, &[id as u64]);
        let values = match id {
            ParamId::Enc1W | ParamId::Enc2W | ParamId::Enc3W => {
                let fan_in = shape[1] * shape[2] * shape[3];
                normal(&mut rng, (2.0 / fan_in as f64).sqrt(), n)
            }
            ParamId::MixW | ParamId::Up1W | ParamId::Up2W => {
                normal(&mut rng, (2.0 / shape[1] as f64).sqrt(), n)
            }
            ParamId::HeadW => normal(&mut rng, (1.0 / shape[1] as f64).sqrt(), n),
            ParamId::PolarityEmbed => normal(&mut rng, 0.5, n),
            ParamId::MixLoraA | ParamId::Up1LoraA | ParamId::Up2LoraA | ParamId::HeadLoraA => {
                normal(&mut rng, (1.0 / shape[1] as f64).sqrt(), n)
            }
            _ => vec![0.0; n],
        };
        tensors.push(values);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        tensors,
        frozen: false,
    })
}

impl ModelParams {
    pub(crate) fn from_parts(arch: ArchConfig, tensors: Vec<Vec<f64>>, frozen: bool) -> Self {
        Self {
            arch,
            tensors,
            frozen,
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Vec<f64>> {
        if self.frozen {
            return Err(Error::Contract(format!(
                "cannot modify {}: parameters are frozen",
                id.name()
            )));
        }
        Ok(&mut self.tensors[id as usize])
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn has_adapters(&self) -> bool {
        self.arch.adapter_rank.is_some()
    }

    /// Present tensors in checkpoint order.
    pub fn named(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        ParamId::ALL
            .iter()
            .map(|id| (*id, self.tensors[*id as usize].as_slice()))
            .filter(|(id, _)| id.shape(&self.arch).is_some())
    }

    pub fn total_count(&self) -> usize {
        self.named().map(|(_, t)| t.len()).sum()
    }

    /// Replaces the adapters with fresh ones of the given rank (or removes them).
    pub fn with_adapters(&self, rank: Option<usize>, seed: u64) -> Result<ModelParams> {
        let arch = ArchConfig {
            adapter_rank: rank,
            ..self.arch.clone()
        };
        let fresh = init_params(&arch, seed)?;
        let tensors = ParamId::ALL
            .iter()
            .map(|id| {
                if id.is_adapter() {
                    fresh.tensors[*id as usize].clone()
                } else {
                    self.tensors[*id as usize].clone()
                }
            })
            .collect();
        Ok(ModelParams {
            arch,
            tensors,
            frozen: false,
        })
    }

    /// Adapted weight `W + (alpha / r) A B` with `alpha = r`.
    pub fn effective_weight(&self, layer: AdaptedLayer) -> Vec<f64> {
        let mut w = self.get(layer.weight()).to_vec();
        let Some(r) = self.arch.adapter_rank else {
            return w;
        };
        let (d_out, d_in) = layer.dims(&self.arch);
        let (a_id, b_id) = layer.factors();
        let (a, b) = (self.get(a_id), self.get(b_id));
        let scale = adapter_scale(r);
        for o in 0..d_out {
            let row = &mut w[o * d_in..(o + 1) * d_in];
            for k in 0..r {
                let coef = scale * a[o * r + k];
                if coef == 0.0 {
                    continue;
                }
                for (wv, bv) in row.iter_mut().zip(&b[k * d_in..(k + 1) * d_in]) {
                    *wv += coef * bv;
                }
            }
        }
        w
    }

    /// SHA-256 over every tensor's bytes, for immutability checks.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (id, t) in self.named() {
            h.update(id.name().as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Adapter scale `alpha / r`; alpha is tied to the rank.
pub fn adapter_scale(rank: usize) -> f64 {
    let alpha = rank as f64;
    alpha / rank as f64
}

/// Deep copy marked frozen; later updates to the source never reach it.
pub fn clone_frozen(params: &ModelParams) -> ModelParams {
    ModelParams {
        arch: params.arch.clone(),
        tensors: params.tensors.clone(),
        frozen: true,
    }
}

/// The tensors exposed to an optimizer under a training mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamView {
    pub mode: TrainMode,
    pub ids: Vec<ParamId>,
    pub count: usize,
}

impl ParamView {
    pub fn contains(&self, id: ParamId) -> bool {
        self.ids.contains(&id)
    }
}

pub fn trainable_parameters(params: &ModelParams, mode: TrainMode) -> ParamView {
    let ids: Vec<ParamId> = params
        .named()
        .map(|(id, _)| id)
        .filter(|id| mode == TrainMode::Full || id.is_adapter())
        .collect();
    let count = ids.iter().map(|id| params.get(*id).len()).sum();
    ParamView { mode, ids, count }
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id as usize]
    }

    /// Two distinct tensors at once; `a` must precede `b` in checkpoint order.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        let (ia, ib) = (a as usize, b as usize);
        assert!(ia < ib, "pair_mut needs {} before {}", a.name(), b.name());
        let (lo, hi) = self.tensors.split_at_mut(ib);
        (&mut lo[ia], &mut hi[0])
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.tensors.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Zeroes every tensor outside the view.
    pub fn restrict_to(&mut self, view: &ParamView) {
        for &id in ParamId::ALL {
            if !view.contains(id) {
                self.tensors[id as usize].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Converts accumulated gradients of the adapted (effective) weights into
    /// gradients of the adapter factors: `dA = s dW B^T`, `dB = s A^T dW`.
    pub(crate) fn project_adapters(&mut self, params: &ModelParams) {
        let Some(r) = params.arch.adapter_rank else {
            return;
        };
        let scale = adapter_scale(r);
        for layer in AdaptedLayer::ALL {
            let (d_out, d_in) = layer.dims(&params.arch);
            let (a_id, b_id) = layer.factors();
            let (a, b) = (params.get(a_id), params.get(b_id));
            let dw = self.tensors[layer.weight() as usize].clone();
            let da = &mut self.tensors[a_id as usize];
            for o in 0..d_out {
                let g = &dw[o * d_in..(o + 1) * d_in];
                for k in 0..r {
                    da[o * r + k] += scale * crate::model::ops::dot(g, &b[k * d_in..(k + 1) * d_in]);
                }
            }
            let db = &mut self.tensors[b_id as usize];
            for o in 0..d_out {
                let g = &dw[o * d_in..(o + 1) * d_in];
                for k in 0..r {
                    let coef = scale * a[o * r + k];
                    if coef == 0.0 {
                        continue;
                    }
                    for (d, gv) in db[k * d_in..(k + 1) * d_in].iter_mut().zip(g) {
                        *d += coef * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(rank: Option<usize>) -> ArchConfig {
        ArchConfig {
            adapter_rank: rank,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&arch(Some(8)), 1).unwrap();
        let b = init_params(&arch(Some(8)), 1).unwrap();
        let c = init_params(&arch(Some(8)), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rank_whitelist() {
        assert!(matches!(init_params(&arch(Some(7)), 1), Err(Error::Config(_))));
        for r in ALLOWED_RANKS {
            assert!(init_params(&arch(Some(r)), 1).is_ok());
        }
    }

    #[test]
    fn fresh_adapters_leave_weights_unchanged() {
        let p = init_params(&arch(Some(64)), 3).unwrap();
        for layer in AdaptedLayer::ALL {
            assert_eq!(p.effective_weight(layer), p.get(layer.weight()));
        }
    }

    #[test]
    fn adapter_factor_counts() {
        let p = init_params(&arch(Some(64)), 3).unwrap();
        let view = trainable_parameters(&p, TrainMode::AdaptersOnly);
        let expected: usize = AdaptedLayer::ALL
            .iter()
            .map(|l| {
                let (o, i) = l.dims(&p.arch);
                64 * (o + i)
            })
            .sum();
        assert_eq!(view.count, expected);
        // The mixing layer is d x 4d; a square d x d layer would give 2 * 64 * d.
        let (o, i) = AdaptedLayer::Mix.dims(&p.arch);
        assert_eq!(p.get(ParamId::MixLoraA).len() + p.get(ParamId::MixLoraB).len(), 64 * (o + i));
        assert_eq!(trainable_parameters(&p, TrainMode::Full).count, p.total_count());
    }

    #[test]
    fn frozen_copy_rejects_writes() {
        let p = init_params(&arch(None), 3).unwrap();
        let mut f = clone_frozen(&p);
        assert!(f.is_frozen());
        assert!(f.get_mut(ParamId::MixW).is_err());
    }
}
