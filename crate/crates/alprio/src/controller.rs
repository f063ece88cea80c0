//! The prioritisation controller h(.;theta): a strided conv encoder feeding
//! a dense layer, a GRU, and sigmoid policy / linear value heads. The
//! encoder, dense stack and GRU are shared between actor and critic.
//!
//! Scoring threads the recurrent state through the inputs in order, so the
//! controller is a function of its input history; adaptation at deployment
//! time comes entirely from that state, never from weight updates.

use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Clamp bound applied to scores before logarithms.
pub const SCORE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerArch {
    pub image_h: usize,
    pub image_w: usize,
    /// Channels of the three stride-2 encoder convolutions.
    pub conv_channels: [usize; 3],
    pub fc_size: usize,
    pub hidden_size: usize,
}

impl Default for ControllerArch {
    fn default() -> Self {
        ControllerArch {
            image_h: 32,
            image_w: 32,
            conv_channels: [4, 8, 8],
            fc_size: 32,
            hidden_size: 32,
        }
    }
}

impl ControllerArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_h % 8 != 0 || self.image_w % 8 != 0 {
            return Err(Error::Config(
                "controller image dims must be divisible by 8".into(),
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0)
            || self.fc_size == 0
            || self.hidden_size == 0
        {
            return Err(Error::Config("controller sizes must be positive".into()));
        }
        Ok(())
    }

    /// Flattened encoder output length.
    pub fn flat_len(&self) -> usize {
        self.conv_channels[2] * (self.image_h / 8) * (self.image_w / 8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerWeights {
    pub arch: ControllerArch,
    pub named_tensors: IndexMap<String, Tensor>,
    pub step_counter: u64,
    pub moment1: IndexMap<String, Tensor>,
    pub moment2: IndexMap<String, Tensor>,
}

fn he_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect(),
    )
    .unwrap()
}

impl ControllerWeights {
    pub fn init(arch: &ControllerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [k1, k2, k3] = arch.conv_channels;
        let (fc, nh) = (arch.fc_size, arch.hidden_size);
        let flat = arch.flat_len();
        let mut r = rng::stream(seed, "controller-init");
        let mut t: IndexMap<String, Tensor> = IndexMap::new();
        t.insert("c1.w".into(), he_init(&[k1, 1, 3, 3], 9, &mut r));
        t.insert("c1.b".into(), Tensor::zeros(&[k1]));
        t.insert("c2.w".into(), he_init(&[k2, k1, 3, 3], k1 * 9, &mut r));
        t.insert("c2.b".into(), Tensor::zeros(&[k2]));
        t.insert("c3.w".into(), he_init(&[k3, k2, 3, 3], k2 * 9, &mut r));
        t.insert("c3.b".into(), Tensor::zeros(&[k3]));
        t.insert("fc.w".into(), he_init(&[fc, flat + 3], flat + 3, &mut r));
        t.insert("fc.b".into(), Tensor::zeros(&[fc]));
        t.insert("gru.wz".into(), he_init(&[nh, fc + nh], fc + nh, &mut r));
        t.insert("gru.bz".into(), Tensor::zeros(&[nh]));
        t.insert("gru.wr".into(), he_init(&[nh, fc + nh], fc + nh, &mut r));
        t.insert("gru.br".into(), Tensor::zeros(&[nh]));
        t.insert("gru.wn".into(), he_init(&[nh, fc], fc, &mut r));
        t.insert("gru.un".into(), he_init(&[nh, nh], nh, &mut r));
        t.insert("gru.bn".into(), Tensor::zeros(&[nh]));
        t.insert("pol.w".into(), he_init(&[1, nh], nh, &mut r));
        t.insert("pol.b".into(), Tensor::zeros(&[1]));
        t.insert("val.w".into(), he_init(&[1, nh], nh, &mut r));
        t.insert("val.b".into(), Tensor::zeros(&[1]));
        let zeros: IndexMap<String, Tensor> = t
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        Ok(ControllerWeights {
            arch: arch.clone(),
            named_tensors: t,
            step_counter: 0,
            moment1: zeros.clone(),
            moment2: zeros,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.named_tensors[name]
    }

    fn gru_params(&self) -> nn::GruParams<'_> {
        nn::GruParams {
            wz: &self.get("gru.wz").data,
            bz: &self.get("gru.bz").data,
            wr: &self.get("gru.wr").data,
            br: &self.get("gru.br").data,
            wn: &self.get("gru.wn").data,
            un: &self.get("gru.un").data,
            bn: &self.get("gru.bn").data,
        }
    }
}

/// Recurrent memory; reset to zeros at each trial start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub hidden: Vec<f64>,
    pub trial_id: u64,
}

impl ControllerState {
    pub fn new(hidden_size: usize) -> Self {
        ControllerState {
            hidden: vec![0.0; hidden_size],
            trial_id: 0,
        }
    }

    /// Zero the memory and bump the trial counter.
    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|v| *v = 0.0);
        self.trial_id += 1;
    }
}

/// One controller observation: the image plus the tau extras from the
/// previous time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerInput {
    pub image: Tensor,
    pub prev_action: f64,
    pub prev_raw_reward: f64,
    pub prev_done: f64,
}

/// Forward intermediates for one sample, kept for BPTT.
pub struct StepCache {
    x: Vec<f64>,
    c1_pre: Vec<f64>,
    c1: Vec<f64>,
    c2_pre: Vec<f64>,
    c2: Vec<f64>,
    c3_pre: Vec<f64>,
    feat: Vec<f64>,
    f1_pre: Vec<f64>,
    gru: nn::GruCache,
    pub h_new: Vec<f64>,
    pub score: f64,
    pub value: f64,
}

/// Run one input through the controller, threading the hidden state.
pub fn forward_step(
    w: &ControllerWeights,
    input: &ControllerInput,
    hidden: &[f64],
) -> Result<StepCache> {
    let a = &w.arch;
    let (h, wd) = input.image.hw();
    if (h, wd) != (a.image_h, a.image_w) {
        return Err(Error::Shape(format!(
            "controller input dims ({h},{wd}) != configured ({},{})",
            a.image_h, a.image_w
        )));
    }
    let [k1, k2, k3] = a.conv_channels;
    let x = input.image.data.clone();
    let (c1_pre, d1) = nn::conv2d_forward(&x, (1, h, wd), &w.get("c1.w").data, (k1, 3), &w.get("c1.b").data, 2, 1);
    let c1 = nn::relu_forward(&c1_pre);
    let (c2_pre, d2) = nn::conv2d_forward(&c1, d1, &w.get("c2.w").data, (k2, 3), &w.get("c2.b").data, 2, 1);
    let c2 = nn::relu_forward(&c2_pre);
    let (c3_pre, _) = nn::conv2d_forward(&c2, d2, &w.get("c3.w").data, (k3, 3), &w.get("c3.b").data, 2, 1);
    let c3 = nn::relu_forward(&c3_pre);
    let mut feat = c3;
    feat.push(input.prev_action);
    feat.push(input.prev_raw_reward);
    feat.push(input.prev_done);
    let f1_pre = nn::dense_forward(&feat, &w.get("fc.w").data, &w.get("fc.b").data, a.fc_size);
    let f1 = nn::relu_forward(&f1_pre);
    let (h_new, gru) = nn::gru_forward(&f1, hidden, &w.gru_params());
    let score_pre = nn::dense_forward(&h_new, &w.get("pol.w").data, &w.get("pol.b").data, 1)[0];
    let score = nn::sigmoid(score_pre);
    let value = nn::dense_forward(&h_new, &w.get("val.w").data, &w.get("val.b").data, 1)[0];
    Ok(StepCache {
        x,
        c1_pre,
        c1,
        c2_pre,
        c2,
        c3_pre,
        feat,
        f1_pre,
        gru,
        h_new,
        score,
        value,
    })
}

pub type ControllerGrads = IndexMap<String, Tensor>;

pub fn zero_grads(w: &ControllerWeights) -> ControllerGrads {
    w.named_tensors
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
        .collect()
}

/// Backward through one sample. `d_score` is the loss gradient w.r.t. the
/// sigmoid score, `d_value` w.r.t. the value output, `d_h_next` w.r.t.
/// `h_new` flowing back from later samples. Returns d(h_prev).
pub fn backward_step(
    w: &ControllerWeights,
    cache: &StepCache,
    d_score: f64,
    d_value: f64,
    d_h_next: &[f64],
    grads: &mut ControllerGrads,
) -> Vec<f64> {
    let a = &w.arch;
    let [k1, k2, k3] = a.conv_channels;
    let (h, wd) = (a.image_h, a.image_w);
    let nh = a.hidden_size;

    // heads
    let d_score_pre = d_score * cache.score * (1.0 - cache.score);
    let mut d_h = d_h_next.to_vec();
    {
        let (dh, dw, db) =
            nn::dense_backward(&cache.h_new, &w.get("pol.w").data, 1, &[d_score_pre]);
        for i in 0..nh {
            d_h[i] += dh[i];
        }
        for (g, v) in grads["pol.w"].data.iter_mut().zip(&dw) {
            *g += v;
        }
        grads["pol.b"].data[0] += db[0];
    }
    if d_value != 0.0 {
        let (dh, dw, db) = nn::dense_backward(&cache.h_new, &w.get("val.w").data, 1, &[d_value]);
        for i in 0..nh {
            d_h[i] += dh[i];
        }
        for (g, v) in grads["val.w"].data.iter_mut().zip(&dw) {
            *g += v;
        }
        grads["val.b"].data[0] += db[0];
    }

    // GRU
    let mut gg = nn::GruGrads::zeros(a.fc_size, nh);
    let (d_f1, d_h_prev) = nn::gru_backward(&d_h, &cache.gru, &w.gru_params(), &mut gg);
    for (name, src) in [
        ("gru.wz", &gg.wz),
        ("gru.bz", &gg.bz),
        ("gru.wr", &gg.wr),
        ("gru.br", &gg.br),
        ("gru.wn", &gg.wn),
        ("gru.un", &gg.un),
        ("gru.bn", &gg.bn),
    ] {
        for (g, v) in grads[name].data.iter_mut().zip(src.iter()) {
            *g += v;
        }
    }

    // dense stack
    let d_f1_pre = nn::relu_backward(&cache.f1_pre, &d_f1);
    let (d_feat, dw, db) = nn::dense_backward(&cache.feat, &w.get("fc.w").data, a.fc_size, &d_f1_pre);
    for (g, v) in grads["fc.w"].data.iter_mut().zip(&dw) {
        *g += v;
    }
    for (g, v) in grads["fc.b"].data.iter_mut().zip(&db) {
        *g += v;
    }

    // encoder (the tau extras at the tail of feat have no upstream params)
    let flat = a.flat_len();
    let d_c3 = &d_feat[..flat];
    let d_c3_pre = nn::relu_backward(&cache.c3_pre, d_c3);
    let (h2, w2) = (h / 2, wd / 2);
    let (h4, w4) = (h / 4, wd / 4);
    let (h8, w8) = (h / 8, wd / 8);
    let (d_c2, dw, db) = nn::conv2d_backward(
        &cache.c2,
        (k2, h4, w4),
        &w.get("c3.w").data,
        (k3, 3),
        2,
        1,
        &d_c3_pre,
        (h8, w8),
    );
    for (g, v) in grads["c3.w"].data.iter_mut().zip(&dw) {
        *g += v;
    }
    for (g, v) in grads["c3.b"].data.iter_mut().zip(&db) {
        *g += v;
    }
    let d_c2_pre = nn::relu_backward(&cache.c2_pre, &d_c2);
    let (d_c1, dw, db) = nn::conv2d_backward(
        &cache.c1,
        (k1, h2, w2),
        &w.get("c2.w").data,
        (k2, 3),
        2,
        1,
        &d_c2_pre,
        (h4, w4),
    );
    for (g, v) in grads["c2.w"].data.iter_mut().zip(&dw) {
        *g += v;
    }
    for (g, v) in grads["c2.b"].data.iter_mut().zip(&db) {
        *g += v;
    }
    let d_c1_pre = nn::relu_backward(&cache.c1_pre, &d_c1);
    let (_, dw, db) = nn::conv2d_backward(
        &cache.x,
        (1, h, wd),
        &w.get("c1.w").data,
        (k1, 3),
        2,
        1,
        &d_c1_pre,
        (h2, w2),
    );
    for (g, v) in grads["c1.w"].data.iter_mut().zip(&dw) {
        *g += v;
    }
    for (g, v) in grads["c1.b"].data.iter_mut().zip(&db) {
        *g += v;
    }

    d_h_prev
}

/// Score an ordered batch, threading the recurrent state through it.
/// Returns one score per input plus the advanced state.
pub fn score_batch(
    w: &ControllerWeights,
    state: &ControllerState,
    inputs: &[ControllerInput],
) -> Result<(Vec<f64>, ControllerState)> {
    if inputs.is_empty() {
        return Err(Error::Shape("score_batch: empty input list".into()));
    }
    let mut hidden = state.hidden.clone();
    let mut scores = Vec::with_capacity(inputs.len());
    for input in inputs {
        let cache = forward_step(w, input, &hidden)?;
        scores.push(cache.score);
        hidden = cache.h_new;
    }
    Ok((
        scores,
        ControllerState {
            hidden,
            trial_id: state.trial_id,
        },
    ))
}

/// As `score_batch`, but also returns the critic's value estimate after the
/// last input, as needed when collecting training episodes.
pub fn evaluate_step(
    w: &ControllerWeights,
    state: &ControllerState,
    inputs: &[ControllerInput],
) -> Result<(Vec<f64>, f64, ControllerState)> {
    if inputs.is_empty() {
        return Err(Error::Shape("evaluate_step: empty input list".into()));
    }
    let mut hidden = state.hidden.clone();
    let mut scores = Vec::with_capacity(inputs.len());
    let mut value = 0.0;
    for input in inputs {
        let cache = forward_step(w, input, &hidden)?;
        scores.push(cache.score);
        value = cache.value;
        hidden = cache.h_new;
    }
    Ok((
        scores,
        value,
        ControllerState {
            hidden,
            trial_id: state.trial_id,
        },
    ))
}

/// Independent Bernoulli draws from the scores.
pub fn sample_actions(scores: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let mut actions = Vec::with_capacity(scores.len());
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("score {s} outside [0,1]")));
        }
        let u: f64 = rng.random_range(0.0..1.0);
        actions.push(u8::from(u < s));
    }
    Ok(actions)
}

/// Bernoulli log-likelihood sum over the batch, with scores clamped to
/// [SCORE_CLAMP, 1 - SCORE_CLAMP] before the logs.
pub fn log_policy(scores: &[f64], actions: &[u8]) -> Result<f64> {
    if scores.len() != actions.len() {
        return Err(Error::Shape(format!(
            "log_policy: {} scores vs {} actions",
            scores.len(),
            actions.len()
        )));
    }
    let mut total = 0.0;
    for (&s, &a) in scores.iter().zip(actions) {
        let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        total += if a == 1 { s.ln() } else { (1.0 - s).ln() };
    }
    Ok(total)
}

/// Indices of the k largest scores; ties broken by lowest index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Domain(format!(
            "select_top_k: k={k} exceeds {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}
