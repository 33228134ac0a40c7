//! Dense kernels on height-width-channel (HWC) feature maps, with their
//! reverse-mode counterparts. Every backward function accumulates into its
//! gradient buffers.

/// A feature map stored cell-major: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = W x + b` with row-major `W` of shape `(out, in)`.
pub fn linear(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let d_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * d_in..(o + 1) * d_in];
        *yo = b[o] + dot(row, x);
    }
}

/// Accumulates `dW += dy x^T`, `db += dy`, `dx += W^T dy`.
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let d_in = x.len();
    for (o, g) in dy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &mut dw[o * d_in..(o + 1) * d_in];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, g) in dy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &w[o * d_in..(o + 1) * d_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 3x3 convolution, stride 2, zero padding 1. Weight layout `(out, ky, kx, in)`.
pub fn conv3x3_s2(input: &FeatureMap, w: &[f64], b: &[f64], out_channels: usize) -> FeatureMap {
    let (h, wd, cin) = (input.height, input.width, input.channels);
    let (ho, wo) = (h.div_ceil(2), wd.div_ceil(2));
    let mut out = FeatureMap::zeros(ho, wo, out_channels);
    for y in 0..ho {
        for x in 0..wo {
            let oc = (y * wo + x) * out_channels;
            out.data[oc..oc + out_channels].copy_from_slice(b);
            for ky in 0..3 {
                let iy = (2 * y + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * x + kx) as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let ic = (iy as usize * wd + ix as usize) * cin;
                    let xin = &input.data[ic..ic + cin];
                    for o in 0..out_channels {
                        let wk = &w[((o * 3 + ky) * 3 + kx) * cin..][..cin];
                        out.data[oc + o] += dot(wk, xin);
                    }
                }
            }
        }
    }
    out
}

/// Reverse pass of [`conv3x3_s2`].
pub fn conv3x3_s2_backward(
    input: &FeatureMap,
    w: &[f64],
    dout: &FeatureMap,
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut FeatureMap>,
) {
    let (h, wd, cin) = (input.height, input.width, input.channels);
    let (ho, wo, cout) = (dout.height, dout.width, dout.channels);
    for y in 0..ho {
        for x in 0..wo {
            let oc = (y * wo + x) * cout;
            let g = &dout.data[oc..oc + cout];
            for (d, gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..3 {
                let iy = (2 * y + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * x + kx) as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let ic = (iy as usize * wd + ix as usize) * cin;
                    for (o, gv) in g.iter().enumerate() {
                        if *gv == 0.0 {
                            continue;
                        }
                        let base = ((o * 3 + ky) * 3 + kx) * cin;
                        let dwk = &mut dw[base..base + cin];
                        for (d, xv) in dwk.iter_mut().zip(&input.data[ic..ic + cin]) {
                            *d += gv * xv;
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            let wk = &w[base..base + cin];
                            for (d, wv) in di.data[ic..ic + cin].iter_mut().zip(wk) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 transposed convolution with stride 2 (no overlap). Every input cell is
/// mapped by a linear layer of shape `(out * 4, in)` to a 2x2 output block;
/// row `o * 4 + dy * 2 + dx` writes channel `o` at offset `(dy, dx)`.
pub fn upconv2x2(input: &FeatureMap, w: &[f64], b: &[f64], out_channels: usize) -> FeatureMap {
    let (h, wd, cin) = (input.height, input.width, input.channels);
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = FeatureMap::zeros(ho, wo, out_channels);
    for y in 0..h {
        for x in 0..wd {
            let xin = input.cell(y * wd + x);
            for o in 0..out_channels {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = &w[(o * 4 + dy * 2 + dx) * cin..][..cin];
                        let oi = ((2 * y + dy) * wo + 2 * x + dx) * out_channels + o;
                        out.data[oi] = b[o] + dot(row, xin);
                    }
                }
            }
        }
    }
    out
}

/// Reverse pass of [`upconv2x2`].
pub fn upconv2x2_backward(
    input: &FeatureMap,
    w: &[f64],
    dout: &FeatureMap,
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut FeatureMap>,
) {
    let (h, wd, cin) = (input.height, input.width, input.channels);
    let (wo, cout) = (dout.width, dout.channels);
    for y in 0..h {
        for x in 0..wd {
            let ci = (y * wd + x) * cin;
            for o in 0..cout {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let g = dout.data[((2 * y + dy) * wo + 2 * x + dx) * cout + o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        let r = (o * 4 + dy * 2 + dx) * cin;
                        for (d, xv) in dw[r..r + cin].iter_mut().zip(&input.data[ci..ci + cin]) {
                            *d += g * xv;
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            for (d, wv) in di.data[ci..ci + cin].iter_mut().zip(&w[r..r + cin]) {
                                *d += g * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    fn random_map(h: usize, w: usize, c: usize, seed: &mut u64) -> FeatureMap {
        let mut m = FeatureMap::zeros(h, w, c);
        for v in &mut m.data {
            *v = lcg(seed);
        }
        m
    }

    /// Central-difference check of `sum(out * probe)` for a kernel.
    fn check<F, B>(fwd: F, bwd: B, input: &FeatureMap, w: &[f64], b: &[f64], probe: &FeatureMap)
    where
        F: Fn(&FeatureMap, &[f64], &[f64]) -> FeatureMap,
        B: Fn(&FeatureMap, &[f64], &FeatureMap, &mut [f64], &mut [f64], Option<&mut FeatureMap>),
    {
        let objective = |i: &FeatureMap, w: &[f64], b: &[f64]| dot(&fwd(i, w, b).data, &probe.data);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let mut di = FeatureMap::zeros(input.height, input.width, input.channels);
        bwd(input, w, probe, &mut dw, &mut db, Some(&mut di));
        let h = 1e-6;
        for k in (0..w.len()).step_by(7) {
            let (mut wp, mut wm) = (w.to_vec(), w.to_vec());
            wp[k] += h;
            wm[k] -= h;
            let fd = (objective(input, &wp, b) - objective(input, &wm, b)) / (2.0 * h);
            assert!((fd - dw[k]).abs() < 1e-7, "dw[{k}] {fd} vs {}", dw[k]);
        }
        for k in 0..b.len() {
            let (mut bp, mut bm) = (b.to_vec(), b.to_vec());
            bp[k] += h;
            bm[k] -= h;
            let fd = (objective(input, w, &bp) - objective(input, w, &bm)) / (2.0 * h);
            assert!((fd - db[k]).abs() < 1e-7);
        }
        for k in (0..input.data.len()).step_by(5) {
            let (mut ip, mut im) = (input.clone(), input.clone());
            ip.data[k] += h;
            im.data[k] -= h;
            let fd = (objective(&ip, w, b) - objective(&im, w, b)) / (2.0 * h);
            assert!((fd - di.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut s = 11;
        let input = random_map(6, 5, 3, &mut s);
        let w: Vec<f64> = (0..4 * 9 * 3).map(|_| lcg(&mut s)).collect();
        let b: Vec<f64> = (0..4).map(|_| lcg(&mut s)).collect();
        let probe = random_map(3, 3, 4, &mut s);
        check(|i, w, b| conv3x3_s2(i, w, b, 4), conv3x3_s2_backward, &input, &w, &b, &probe);
    }

    #[test]
    fn upconv_gradients_match_finite_differences() {
        let mut s = 5;
        let input = random_map(3, 2, 4, &mut s);
        let w: Vec<f64> = (0..3 * 4 * 4).map(|_| lcg(&mut s)).collect();
        let b: Vec<f64> = (0..3).map(|_| lcg(&mut s)).collect();
        let probe = random_map(6, 4, 3, &mut s);
        check(|i, w, b| upconv2x2(i, w, b, 3), upconv2x2_backward, &input, &w, &b, &probe);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut s = 3;
        let input = random_map(4, 4, 2, &mut s);
        let w: Vec<f64> = (0..9 * 2).map(|_| lcg(&mut s)).collect();
        let out = conv3x3_s2(&input, &w, &[0.25], 1);
        // Output (1,1) reads input rows/cols 1..=3.
        let mut expect = 0.25;
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..2 {
                    expect += w[(ky * 3 + kx) * 2 + c] * input.data[((1 + ky) * 4 + 1 + kx) * 2 + c];
                }
            }
        }
        assert!((out.data[3] - expect).abs() < 1e-14);
    }
}
