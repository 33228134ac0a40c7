//! Forward and reverse passes of the promptable segmenter.
//!
//! ```text
//! image ─ conv s2 ─ conv s2 ─ conv s2 ─► features (H/8 x W/8 x D) + dense position
//! points ─ polarity embedding + sinusoidal position ─► tokens, summed into their cells
//! mix:   m_g = relu(W [f_g, c_pos, c_neg, f_g * c_pos] + b)
//!        c_pos / c_neg = mean fused feature under positive / negative points
//! decode: m ─ up 2x2 ─ up 2x2 ─ heads 2x2 ─► M logit maps (H x W)
//! quality: W_q mean_g(m_g) + b_q (not back-propagated into the trunk)
//! ```

use serde::{Deserialize, Serialize};

use super::ops::{self, FeatureMap};
use super::params::{AdaptedLayer, Gradients, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::mask::{Image, LogitMap, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

impl PointPrompt {
    pub fn positive(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Positive,
        }
    }

    pub fn negative(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Negative,
        }
    }
}

/// Points aimed at one ground-truth instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
    pub target_instance_id: u16,
}

impl PromptSet {
    pub fn new(points: Vec<PointPrompt>, target_instance_id: u16) -> Result<Self> {
        if !points.iter().any(|p| p.polarity == Polarity::Positive) {
            return Err(Error::Contract("prompt set needs a positive point".into()));
        }
        Ok(Self {
            points,
            target_instance_id,
        })
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.points.iter().filter(|p| p.polarity == polarity).count()
    }

    /// Checks the training-time budget of 1-3 positive and 0-3 negative points.
    pub fn check_training_budget(&self) -> Result<()> {
        let (pos, neg) = (self.count(Polarity::Positive), self.count(Polarity::Negative));
        if !(1..=3).contains(&pos) || neg > 3 {
            return Err(Error::Contract(format!(
                "prompt set has {pos} positive / {neg} negative points; expected 1-3 / 0-3"
            )));
        }
        Ok(())
    }

    fn check_bounds(&self, shape: Shape) -> Result<()> {
        for p in &self.points {
            if p.row >= shape.height || p.col >= shape.width {
                return Err(Error::Contract(format!(
                    "point ({}, {}) outside {}x{} image",
                    p.row, p.col, shape.height, shape.width
                )));
            }
        }
        Ok(())
    }
}

/// The `M` mask hypotheses and their self-estimated quality.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mask_logits: Vec<LogitMap>,
    pub quality_scores: Vec<f64>,
}

/// Encoder activations; the last one is the feature grid.
#[derive(Debug, Clone)]
pub struct Encoded {
    input: FeatureMap,
    act1: FeatureMap,
    act2: FeatureMap,
    pub features: FeatureMap,
}

pub fn encode(params: &ModelParams, image: &Image) -> Result<Encoded> {
    let arch = &params.arch;
    let shape = image.shape();
    if (shape.height, shape.width) != (arch.height, arch.width) {
        return Err(Error::Contract(format!(
            "image is {}x{} but the model expects {}x{}",
            shape.height, shape.width, arch.height, arch.width
        )));
    }
    let [c1, c2, d] = arch.widths;
    let input = FeatureMap {
        height: shape.height,
        width: shape.width,
        channels: 1,
        data: image.pixels().to_vec(),
    };
    let mut act1 = ops::conv3x3_s2(&input, params.get(ParamId::Enc1W), params.get(ParamId::Enc1B), c1);
    ops::relu_inplace(&mut act1.data);
    let mut act2 = ops::conv3x3_s2(&act1, params.get(ParamId::Enc2W), params.get(ParamId::Enc2B), c2);
    ops::relu_inplace(&mut act2.data);
    let mut features =
        ops::conv3x3_s2(&act2, params.get(ParamId::Enc3W), params.get(ParamId::Enc3B), d);
    ops::relu_inplace(&mut features.data);
    Ok(Encoded {
        input,
        act1,
        act2,
        features,
    })
}

/// Accumulates encoder weight gradients given the gradient of the feature grid.
pub fn encode_backward(
    params: &ModelParams,
    enc: &Encoded,
    mut d_features: FeatureMap,
    grads: &mut Gradients,
) {
    ops::relu_backward_inplace(&mut d_features.data, &enc.features.data);
    let mut d_act2 = FeatureMap::zeros(enc.act2.height, enc.act2.width, enc.act2.channels);
    {
        let (w, b) = grads.pair_mut(ParamId::Enc3W, ParamId::Enc3B);
        ops::conv3x3_s2_backward(&enc.act2, params.get(ParamId::Enc3W), &d_features, w, b, Some(&mut d_act2));
    }
    ops::relu_backward_inplace(&mut d_act2.data, &enc.act2.data);
    let mut d_act1 = FeatureMap::zeros(enc.act1.height, enc.act1.width, enc.act1.channels);
    {
        let (w, b) = grads.pair_mut(ParamId::Enc2W, ParamId::Enc2B);
        ops::conv3x3_s2_backward(&enc.act1, params.get(ParamId::Enc2W), &d_act2, w, b, Some(&mut d_act1));
    }
    ops::relu_backward_inplace(&mut d_act1.data, &enc.act1.data);
    let (w, b) = grads.pair_mut(ParamId::Enc1W, ParamId::Enc1B);
    ops::conv3x3_s2_backward(&enc.input, params.get(ParamId::Enc1W), &d_act1, w, b, None);
}

/// Sinusoidal encoding of a pixel position, `dim` values in `[-1, 1]`.
pub fn positional_encoding(row: usize, col: usize, shape: Shape, dim: usize) -> Vec<f64> {
    let nf = dim / 4;
    let max_ratio = (shape.height.max(shape.width) as f64 / 2.0).max(1.0);
    let mut pe = Vec::with_capacity(dim);
    let u = (row as f64 + 0.5) / shape.height as f64;
    let v = (col as f64 + 0.5) / shape.width as f64;
    for coord in [u, v] {
        for k in 0..nf {
            let t = if nf > 1 { k as f64 / (nf - 1) as f64 } else { 0.0 };
            let omega = std::f64::consts::PI * max_ratio.powf(t);
            pe.push((omega * coord).sin());
            pe.push((omega * coord).cos());
        }
    }
    pe
}

/// Per-cell encoding of the grid cells' center pixels, laid out like the
/// feature grid.
fn dense_positional_encoding(arch: &super::params::ArchConfig) -> Vec<f64> {
    let shape = Shape::new(arch.height, arch.width);
    let (gh, gw) = arch.grid();
    let (sh, sw) = (arch.height / gh, arch.width / gw);
    let mut out = Vec::with_capacity(gh * gw * arch.embed_dim());
    for r in 0..gh {
        for c in 0..gw {
            out.extend(positional_encoding(r * sh + sh / 2, c * sw + sw / 2, shape, arch.embed_dim()));
        }
    }
    out
}

/// Parameters with adapters folded into effective weights.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub params: &'a ModelParams,
    mix_w: Vec<f64>,
    up1_w: Vec<f64>,
    up2_w: Vec<f64>,
    head_w: Vec<f64>,
    /// Positional encoding of every grid cell's center pixel.
    dense_pe: Vec<f64>,
}

/// Activations of one decode call, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    points: Vec<(usize, Polarity)>,
    fused: FeatureMap,
    c_pos: Vec<f64>,
    n_pos: usize,
    n_neg: usize,
    mix_in: Vec<f64>,
    mixed: FeatureMap,
    up1: FeatureMap,
    up2: FeatureMap,
}

impl<'a> Prepared<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            mix_w: params.effective_weight(AdaptedLayer::Mix),
            up1_w: params.effective_weight(AdaptedLayer::Up1),
            up2_w: params.effective_weight(AdaptedLayer::Up2),
            head_w: params.effective_weight(AdaptedLayer::Head),
            dense_pe: dense_positional_encoding(&params.arch),
        }
    }

    pub fn decode(&self, enc: &Encoded, prompts: &PromptSet) -> Result<(ForwardOutput, DecodeCache)> {
        let p = self.params;
        let arch = &p.arch;
        let shape = Shape::new(arch.height, arch.width);
        prompts.check_bounds(shape)?;
        let [c1, c2, d] = arch.widths;
        let m_heads = arch.num_masks;
        let (gh, gw) = arch.grid();

        // Canonical order makes the aggregation independent of point order.
        let mut pts = prompts.points.clone();
        pts.sort_by_key(|q| (q.polarity, q.row, q.col));

        let mut fused = enc.features.clone();
        for (f, pe) in fused.data.iter_mut().zip(&self.dense_pe) {
            *f += pe;
        }
        let pol = p.get(ParamId::PolarityEmbed);
        let mut points = Vec::with_capacity(pts.len());
        for q in &pts {
            let cell = (q.row * gh / arch.height) * gw + q.col * gw / arch.width;
            let pe = positional_encoding(q.row, q.col, shape, d);
            let emb = &pol[q.polarity as usize * d..][..d];
            for ((f, e), s) in fused.cell_mut(cell).iter_mut().zip(emb).zip(&pe) {
                *f += e + s;
            }
            points.push((cell, q.polarity));
        }

        let mut c_pos = vec![0.0; d];
        let mut c_neg = vec![0.0; d];
        let (mut n_pos, mut n_neg) = (0, 0);
        for &(cell, polarity) in &points {
            let (acc, n) = match polarity {
                Polarity::Positive => (&mut c_pos, &mut n_pos),
                Polarity::Negative => (&mut c_neg, &mut n_neg),
            };
            for (a, f) in acc.iter_mut().zip(fused.cell(cell)) {
                *a += f;
            }
            *n += 1;
        }
        if n_pos > 0 {
            c_pos.iter_mut().for_each(|v| *v /= n_pos as f64);
        }
        if n_neg > 0 {
            c_neg.iter_mut().for_each(|v| *v /= n_neg as f64);
        }

        let cells = gh * gw;
        let mut mix_in = vec![0.0; cells * 4 * d];
        let mut mixed = FeatureMap::zeros(gh, gw, d);
        for g in 0..cells {
            let x = &mut mix_in[g * 4 * d..(g + 1) * 4 * d];
            let f = fused.cell(g);
            x[..d].copy_from_slice(f);
            x[d..2 * d].copy_from_slice(&c_pos);
            x[2 * d..3 * d].copy_from_slice(&c_neg);
            for k in 0..d {
                x[3 * d + k] = f[k] * c_pos[k];
            }
            ops::linear(&self.mix_w, p.get(ParamId::MixB), x, mixed.cell_mut(g));
        }
        ops::relu_inplace(&mut mixed.data);

        let mut up1 = ops::upconv2x2(&mixed, &self.up1_w, p.get(ParamId::Up1B), c2);
        ops::relu_inplace(&mut up1.data);
        let mut up2 = ops::upconv2x2(&up1, &self.up2_w, p.get(ParamId::Up2B), c1);
        ops::relu_inplace(&mut up2.data);
        let out = ops::upconv2x2(&up2, &self.head_w, p.get(ParamId::HeadB), m_heads);

        let mut mask_logits = Vec::with_capacity(m_heads);
        for j in 0..m_heads {
            let values: Vec<f64> = (0..shape.len()).map(|i| out.data[i * m_heads + j]).collect();
            mask_logits.push(LogitMap::new(shape, values)?);
        }

        let mut pooled = vec![0.0; d];
        for g in 0..cells {
            for (a, v) in pooled.iter_mut().zip(mixed.cell(g)) {
                *a += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= cells as f64);
        let mut quality_scores = vec![0.0; m_heads];
        ops::linear(
            p.get(ParamId::QualityW),
            p.get(ParamId::QualityB),
            &pooled,
            &mut quality_scores,
        );

        let cache = DecodeCache {
            points,
            fused,
            c_pos,
            n_pos,
            n_neg,
            mix_in,
            mixed,
            up1,
            up2,
        };
        Ok((
            ForwardOutput {
                mask_logits,
                quality_scores,
            },
            cache,
        ))
    }

    /// Reverse pass of [`Prepared::decode`].
    ///
    /// `d_logits[j]` is the gradient w.r.t. mask slot `j` (an empty vector
    /// means zero). `d_quality` trains the quality head only. Gradients of the
    /// adapted layers land in their base-weight slots; call
    /// [`super::finish_gradients`] to project them onto the adapters.
    pub fn decode_backward(
        &self,
        cache: &DecodeCache,
        d_logits: &[Vec<f64>],
        d_quality: Option<&[f64]>,
        grads: &mut Gradients,
        d_features: Option<&mut FeatureMap>,
    ) {
        let p = self.params;
        let arch = &p.arch;
        let [c1, c2, d] = arch.widths;
        let m_heads = arch.num_masks;
        let (gh, gw) = arch.grid();
        let cells = gh * gw;

        if let Some(dq) = d_quality {
            let mut pooled = vec![0.0; d];
            for g in 0..cells {
                for (a, v) in pooled.iter_mut().zip(cache.mixed.cell(g)) {
                    *a += v;
                }
            }
            pooled.iter_mut().for_each(|v| *v /= cells as f64);
            let (w, b) = grads.pair_mut(ParamId::QualityW, ParamId::QualityB);
            ops::linear_backward(p.get(ParamId::QualityW), &pooled, dq, w, b, None);
        }

        let mut d_out = FeatureMap::zeros(arch.height, arch.width, m_heads);
        let mut any = false;
        for (j, dl) in d_logits.iter().enumerate() {
            if dl.is_empty() {
                continue;
            }
            any = true;
            for (i, v) in dl.iter().enumerate() {
                d_out.data[i * m_heads + j] = *v;
            }
        }
        if !any {
            return;
        }

        let mut d_up2 = FeatureMap::zeros(cache.up2.height, cache.up2.width, c1);
        {
            let (w, b) = grads.pair_mut(ParamId::HeadW, ParamId::HeadB);
            ops::upconv2x2_backward(&cache.up2, &self.head_w, &d_out, w, b, Some(&mut d_up2));
        }
        ops::relu_backward_inplace(&mut d_up2.data, &cache.up2.data);
        let mut d_up1 = FeatureMap::zeros(cache.up1.height, cache.up1.width, c2);
        {
            let (w, b) = grads.pair_mut(ParamId::Up2W, ParamId::Up2B);
            ops::upconv2x2_backward(&cache.up1, &self.up2_w, &d_up2, w, b, Some(&mut d_up1));
        }
        ops::relu_backward_inplace(&mut d_up1.data, &cache.up1.data);
        let mut d_mixed = FeatureMap::zeros(gh, gw, d);
        {
            let (w, b) = grads.pair_mut(ParamId::Up1W, ParamId::Up1B);
            ops::upconv2x2_backward(&cache.mixed, &self.up1_w, &d_up1, w, b, Some(&mut d_mixed));
        }
        ops::relu_backward_inplace(&mut d_mixed.data, &cache.mixed.data);

        let mut d_fused = FeatureMap::zeros(gh, gw, d);
        let mut d_cpos = vec![0.0; d];
        let mut d_cneg = vec![0.0; d];
        let mut dx = vec![0.0; 4 * d];
        {
            let (w, b) = grads.pair_mut(ParamId::MixW, ParamId::MixB);
            for g in 0..cells {
                let dy = d_mixed.cell(g);
                if dy.iter().all(|v| *v == 0.0) {
                    continue;
                }
                dx.iter_mut().for_each(|v| *v = 0.0);
                let x = &cache.mix_in[g * 4 * d..(g + 1) * 4 * d];
                ops::linear_backward(&self.mix_w, x, dy, w, b, Some(&mut dx));
                let f = cache.fused.cell(g);
                let df = d_fused.cell_mut(g);
                for k in 0..d {
                    df[k] += dx[k] + dx[3 * d + k] * cache.c_pos[k];
                    d_cpos[k] += dx[d + k] + dx[3 * d + k] * f[k];
                    d_cneg[k] += dx[2 * d + k];
                }
            }
        }
        for &(cell, polarity) in &cache.points {
            let (dc, n) = match polarity {
                Polarity::Positive => (&d_cpos, cache.n_pos),
                Polarity::Negative => (&d_cneg, cache.n_neg),
            };
            for (a, v) in d_fused.cell_mut(cell).iter_mut().zip(dc) {
                *a += v / n as f64;
            }
        }
        {
            let dpol = grads.get_mut(ParamId::PolarityEmbed);
            for &(cell, polarity) in &cache.points {
                let row = &mut dpol[polarity as usize * d..][..d];
                for (a, v) in row.iter_mut().zip(d_fused.cell(cell)) {
                    *a += v;
                }
            }
        }
        if let Some(df) = d_features {
            for (a, v) in df.data.iter_mut().zip(&d_fused.data) {
                *a += v;
            }
        }
    }
}

/// Full forward pass: encode then decode.
pub fn forward(params: &ModelParams, image: &Image, prompts: &PromptSet) -> Result<ForwardOutput> {
    prompts.check_bounds(image.shape())?;
    let enc = encode(params, image)?;
    Ok(Prepared::new(params).decode(&enc, prompts)?.0)
}
