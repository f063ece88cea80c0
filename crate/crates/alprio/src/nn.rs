//! Hand-rolled neural-net primitives with explicit backward passes.
//!
//! Everything operates on flat `f64` slices with explicit dims, caller-owned
//! caches, and no hidden state, which keeps the gradient path auditable
//! against finite differences.

/// y = conv2d(x) with square kernel `k`, stride `s`, zero padding `p`.
/// x: (ci, h, w), w: (co, ci, k, k), b: (co), out: (co, oh, ow).
pub fn conv2d_forward(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, k): (usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * wt[((o * ci + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, (co, oh, ow))
}

/// Gradients of conv2d w.r.t. input, weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, k): (usize, usize),
    stride: usize,
    pad: usize,
    d_out: &[f64],
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_x = vec![0.0; ci * h * w];
    let mut d_w = vec![0.0; co * ci * k * k];
    let mut d_b = vec![0.0; co];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                d_b[o] += g;
                for c in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + ix as usize;
                            let wi = ((o * ci + c) * k + ky) * k + kx;
                            d_x[xi] += g * wt[wi];
                            d_w[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (d_x, d_w, d_b)
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], d_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(d_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// d/dx given the forward output y = sigmoid(x).
pub fn sigmoid_backward(y: &[f64], d_out: &[f64]) -> Vec<f64> {
    y.iter().zip(d_out).map(|(&y, &g)| g * y * (1.0 - y)).collect()
}

/// 2x2 max pooling, stride 2. Returns the pooled map and argmax indices
/// into the input, per output element.
pub fn maxpool2_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
) -> (Vec<f64>, Vec<usize>, (usize, usize, usize)) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
                arg[(ch * oh + oy) * ow + ox] = bi;
            }
        }
    }
    (out, arg, (c, oh, ow))
}

pub fn maxpool2_backward(d_out: &[f64], arg: &[usize], in_len: usize) -> Vec<f64> {
    let mut d_x = vec![0.0; in_len];
    for (g, &i) in d_out.iter().zip(arg) {
        d_x[i] += g;
    }
    d_x
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = h * 2;
    let ow = w * 2;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * oh + oy) * ow + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
    (out, (c, oh, ow))
}

pub fn upsample2_backward(d_out: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    // (c, h, w) are the *input* dims of the forward pass
    let oh = h * 2;
    let ow = w * 2;
    let mut d_x = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                d_x[(ch * h + oy / 2) * w + ox / 2] += d_out[(ch * oh + oy) * ow + ox];
            }
        }
    }
    d_x
}

/// Channel-wise concat of two maps with equal spatial dims.
pub fn concat_channels(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn split_channels(d_out: &[f64], a_len: usize) -> (Vec<f64>, Vec<f64>) {
    (d_out[..a_len].to_vec(), d_out[a_len..].to_vec())
}

/// Dense layer y = W x + b; W is (n_out, n_in) row-major.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += w[o * n_in + i] * x[i];
            }
            acc
        })
        .collect()
}

pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    n_out: usize,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = x.len();
    let mut d_x = vec![0.0; n_in];
    let mut d_w = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let g = d_out[o];
        for i in 0..n_in {
            d_x[i] += g * w[o * n_in + i];
            d_w[o * n_in + i] = g * x[i];
        }
    }
    (d_x, d_w, d_out.to_vec())
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

/// GRU parameters. Gate matrices act on the concatenation [x, h].
///
/// z = sigmoid(Wz [x,h] + bz); r = sigmoid(Wr [x,h] + br)
/// n = tanh(Wn x + Un (r * h) + bn); h' = (1 - z) * n + z * h
pub struct GruParams<'a> {
    pub wz: &'a [f64],
    pub bz: &'a [f64],
    pub wr: &'a [f64],
    pub br: &'a [f64],
    pub wn: &'a [f64],
    pub un: &'a [f64],
    pub bn: &'a [f64],
}

#[derive(Default, Debug, Clone)]
pub struct GruGrads {
    pub wz: Vec<f64>,
    pub bz: Vec<f64>,
    pub wr: Vec<f64>,
    pub br: Vec<f64>,
    pub wn: Vec<f64>,
    pub un: Vec<f64>,
    pub bn: Vec<f64>,
}

impl GruGrads {
    pub fn zeros(n_in: usize, n_h: usize) -> Self {
        GruGrads {
            wz: vec![0.0; n_h * (n_in + n_h)],
            bz: vec![0.0; n_h],
            wr: vec![0.0; n_h * (n_in + n_h)],
            br: vec![0.0; n_h],
            wn: vec![0.0; n_h * n_in],
            un: vec![0.0; n_h * n_h],
            bn: vec![0.0; n_h],
        }
    }
}

/// Forward-pass intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub un_h: Vec<f64>,
}

pub fn gru_forward(x: &[f64], h_prev: &[f64], p: &GruParams) -> (Vec<f64>, GruCache) {
    let n_in = x.len();
    let n_h = h_prev.len();
    let xh: Vec<f64> = x.iter().chain(h_prev).copied().collect();
    let z: Vec<f64> = dense_forward(&xh, p.wz, p.bz, n_h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = dense_forward(&xh, p.wr, p.br, n_h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let un_h = dense_forward(h_prev, p.un, &vec![0.0; n_h], n_h);
    let mut pre_n = dense_forward(x, p.wn, p.bn, n_h);
    for i in 0..n_h {
        pre_n[i] += r[i] * un_h[i];
    }
    let n: Vec<f64> = pre_n.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..n_h).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
    let _ = n_in;
    (
        h_new,
        GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            un_h,
        },
    )
}

/// Backward through one GRU step. Accumulates parameter gradients into
/// `grads`; returns (d_x, d_h_prev).
pub fn gru_backward(
    d_h_new: &[f64],
    cache: &GruCache,
    p: &GruParams,
    grads: &mut GruGrads,
) -> (Vec<f64>, Vec<f64>) {
    let n_h = cache.h_prev.len();
    let n_in = cache.x.len();
    let (z, r, n, h_prev) = (&cache.z, &cache.r, &cache.n, &cache.h_prev);

    // h' = (1-z) n + z h_prev
    let d_z: Vec<f64> = (0..n_h)
        .map(|i| d_h_new[i] * (h_prev[i] - n[i]) * z[i] * (1.0 - z[i]))
        .collect();
    let d_n_pre: Vec<f64> = (0..n_h)
        .map(|i| d_h_new[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i]))
        .collect();
    let d_r: Vec<f64> = (0..n_h)
        .map(|i| d_n_pre[i] * cache.un_h[i] * r[i] * (1.0 - r[i]))
        .collect();

    let mut d_x = vec![0.0; n_in];
    let mut d_h = vec![0.0; n_h];
    // h' = ... + z h_prev direct path
    for i in 0..n_h {
        d_h[i] += d_h_new[i] * z[i];
    }

    // n pre-activation: Wn x + bn + r * (Un h_prev)
    for o in 0..n_h {
        let g = d_n_pre[o];
        grads.bn[o] += g;
        for i in 0..n_in {
            grads.wn[o * n_in + i] += g * cache.x[i];
            d_x[i] += g * p.wn[o * n_in + i];
        }
        let gr = g * r[o];
        for i in 0..n_h {
            grads.un[o * n_h + i] += gr * h_prev[i];
            d_h[i] += gr * p.un[o * n_h + i];
        }
    }

    // gates on [x, h]
    let xh: Vec<f64> = cache.x.iter().chain(h_prev).copied().collect();
    let n_xh = n_in + n_h;
    for o in 0..n_h {
        let gz = d_z[o];
        let gr = d_r[o];
        grads.bz[o] += gz;
        grads.br[o] += gr;
        for i in 0..n_xh {
            grads.wz[o * n_xh + i] += gz * xh[i];
            grads.wr[o * n_xh + i] += gr * xh[i];
            let back = gz * p.wz[o * n_xh + i] + gr * p.wr[o * n_xh + i];
            if i < n_in {
                d_x[i] += back;
            } else {
                d_h[i - n_in] += back;
            }
        }
    }
    (d_x, d_h)
}
