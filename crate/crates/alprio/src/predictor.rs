//! The task predictor: a small 2-down/2-up encoder-decoder with skip
//! connections, soft-Dice loss, Adam, and the Reptile interpolation that
//! syncs it across environments.

use crate::error::{Error, Result};
use crate::nn;
use crate::par;
use crate::rng;
use crate::synth::LabeledDataset;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DICE_SMOOTH: f64 = 1.0;
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Channel widths for the two encoder stages and the bottleneck.
    pub channel_widths: [usize; 3],
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub convergence_patience: usize,
    pub convergence_min_delta: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            channel_widths: [8, 16, 32],
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            convergence_patience: 5,
            convergence_min_delta: 1e-3,
            max_epochs: 200,
            batch_size: 4,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.convergence_patience < 1 {
            return Err(Error::Config("convergence_patience must be >= 1".into()));
        }
        if self.channel_widths.iter().any(|&c| c == 0) || self.batch_size == 0 {
            return Err(Error::Config("channel widths and batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Named weight tensors plus Adam shadow state.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub named_tensors: IndexMap<String, Tensor>,
    pub step_counter: u64,
    pub moment1: IndexMap<String, Tensor>,
    pub moment2: IndexMap<String, Tensor>,
}

pub type GradMap = IndexMap<String, Tensor>;

fn he_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

impl PredictorWeights {
    pub fn init(cfg: &PredictorConfig, seed: u64) -> Self {
        let [c1, c2, c3] = cfg.channel_widths;
        let mut r = rng::stream(seed, "predictor-init");
        let mut t = IndexMap::new();
        let mut conv = |name: &str, co: usize, ci: usize, k: usize, r: &mut ChaCha8Rng| {
            t.insert(format!("{name}.w"), he_init(&[co, ci, k, k], ci * k * k, r));
            t.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        conv("e1", c1, 1, 3, &mut r);
        conv("e2", c2, c1, 3, &mut r);
        conv("bt", c3, c2, 3, &mut r);
        conv("d2", c2, c3 + c2, 3, &mut r);
        conv("d1", c1, c2 + c1, 3, &mut r);
        conv("out", 1, c1, 1, &mut r);
        let zeros: IndexMap<String, Tensor> = t
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        PredictorWeights {
            named_tensors: t,
            step_counter: 0,
            moment1: zeros.clone(),
            moment2: zeros,
        }
    }

    fn get(&self, name: &str) -> &Tensor {
        &self.named_tensors[name]
    }
}

/// Per-pass dropout masks for the two encoder stages (MC dropout).
pub struct DropoutMasks {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
}

impl DropoutMasks {
    /// Inverted-dropout masks: 0 with probability `rate`, else 1/(1-rate).
    pub fn sample(rate: f64, e1_len: usize, e2_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let draw = |n: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < rate {
                        0.0
                    } else {
                        1.0 / (1.0 - rate)
                    }
                })
                .collect()
        };
        DropoutMasks {
            e1: draw(e1_len, rng),
            e2: draw(e2_len, rng),
        }
    }
}

struct ForwardCache {
    x: Vec<f64>,
    e1_pre: Vec<f64>,
    e1: Vec<f64>,
    arg1: Vec<usize>,
    p1: Vec<f64>,
    e2_pre: Vec<f64>,
    e2: Vec<f64>,
    arg2: Vec<usize>,
    p2: Vec<f64>,
    bt_pre: Vec<f64>,
    cat2: Vec<f64>,
    d2_pre: Vec<f64>,
    cat1: Vec<f64>,
    d1_pre: Vec<f64>,
    d1: Vec<f64>,
    probs: Vec<f64>,
    dims: Dims,
}

#[derive(Clone, Copy)]
struct Dims {
    c: [usize; 3],
    h: usize,
    w: usize,
}

fn forward_pass(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    image: &Tensor,
    dropout: Option<&DropoutMasks>,
) -> Result<ForwardCache> {
    let (h, wd) = image.hw();
    if h % 4 != 0 || wd % 4 != 0 {
        return Err(Error::Shape(format!(
            "image dims ({h},{wd}) must be divisible by 4"
        )));
    }
    let [c1, c2, c3] = cfg.channel_widths;
    let x = image.data.clone();
    let (e1_pre, _) = nn::conv2d_forward(&x, (1, h, wd), &w.get("e1.w").data, (c1, 3), &w.get("e1.b").data, 1, 1);
    let mut e1 = nn::relu_forward(&e1_pre);
    if let Some(m) = dropout {
        for (v, k) in e1.iter_mut().zip(&m.e1) {
            *v *= k;
        }
    }
    let (p1, arg1, p1d) = nn::maxpool2_forward(&e1, (c1, h, wd));
    let (e2_pre, _) = nn::conv2d_forward(&p1, p1d, &w.get("e2.w").data, (c2, 3), &w.get("e2.b").data, 1, 1);
    let mut e2 = nn::relu_forward(&e2_pre);
    if let Some(m) = dropout {
        for (v, k) in e2.iter_mut().zip(&m.e2) {
            *v *= k;
        }
    }
    let (p2, arg2, p2d) = nn::maxpool2_forward(&e2, (c2, h / 2, wd / 2));
    let (bt_pre, btd) = nn::conv2d_forward(&p2, p2d, &w.get("bt.w").data, (c3, 3), &w.get("bt.b").data, 1, 1);
    let bt = nn::relu_forward(&bt_pre);
    let (u2, _) = nn::upsample2_forward(&bt, btd);
    let cat2 = nn::concat_channels(&u2, &e2);
    let (d2_pre, d2d) = nn::conv2d_forward(
        &cat2,
        (c3 + c2, h / 2, wd / 2),
        &w.get("d2.w").data,
        (c2, 3),
        &w.get("d2.b").data,
        1,
        1,
    );
    let d2 = nn::relu_forward(&d2_pre);
    let (u1, _) = nn::upsample2_forward(&d2, d2d);
    let cat1 = nn::concat_channels(&u1, &e1);
    let (d1_pre, _) = nn::conv2d_forward(
        &cat1,
        (c2 + c1, h, wd),
        &w.get("d1.w").data,
        (c1, 3),
        &w.get("d1.b").data,
        1,
        1,
    );
    let d1 = nn::relu_forward(&d1_pre);
    let (logits, _) = nn::conv2d_forward(&d1, (c1, h, wd), &w.get("out.w").data, (1, 1), &w.get("out.b").data, 1, 0);
    let probs = nn::sigmoid_forward(&logits);
    Ok(ForwardCache {
        x,
        e1_pre,
        e1,
        arg1,
        p1,
        e2_pre,
        e2,
        arg2,
        p2,
        bt_pre,
        cat2,
        d2_pre,
        cat1,
        d1_pre,
        d1,
        probs,
        dims: Dims {
            c: [c1, c2, c3],
            h,
            w: wd,
        },
    })
}

/// Backprop from d(loss)/d(probs) to parameter gradients, accumulating into
/// `grads` (which must be zero-initialised or hold a running sum).
fn backward_pass(
    w: &PredictorWeights,
    cache: &ForwardCache,
    d_probs: &[f64],
    grads: &mut GradMap,
) {
    let Dims { c: [c1, c2, c3], h, w: wd } = cache.dims;
    let d_logits = nn::sigmoid_backward(&cache.probs, d_probs);
    let acc = |name: &str, dw: Vec<f64>, db: Vec<f64>, grads: &mut GradMap| {
        for (g, v) in grads[&format!("{name}.w")].data.iter_mut().zip(&dw) {
            *g += v;
        }
        for (g, v) in grads[&format!("{name}.b")].data.iter_mut().zip(&db) {
            *g += v;
        }
    };

    let (d_d1, dw, db) = nn::conv2d_backward(
        &cache.d1,
        (c1, h, wd),
        &w.get("out.w").data,
        (1, 1),
        1,
        0,
        &d_logits,
        (h, wd),
    );
    acc("out", dw, db, grads);

    let d_d1_pre = nn::relu_backward(&cache.d1_pre, &d_d1);
    let (d_cat1, dw, db) = nn::conv2d_backward(
        &cache.cat1,
        (c2 + c1, h, wd),
        &w.get("d1.w").data,
        (c1, 3),
        1,
        1,
        &d_d1_pre,
        (h, wd),
    );
    acc("d1", dw, db, grads);
    let (d_u1, d_e1_skip) = nn::split_channels(&d_cat1, c2 * h * wd);
    let d_d2 = nn::upsample2_backward(&d_u1, (c2, h / 2, wd / 2));

    let d_d2_pre = nn::relu_backward(&cache.d2_pre, &d_d2);
    let (d_cat2, dw, db) = nn::conv2d_backward(
        &cache.cat2,
        (c3 + c2, h / 2, wd / 2),
        &w.get("d2.w").data,
        (c2, 3),
        1,
        1,
        &d_d2_pre,
        (h / 2, wd / 2),
    );
    acc("d2", dw, db, grads);
    let (d_u2, d_e2_skip) = nn::split_channels(&d_cat2, c3 * (h / 2) * (wd / 2));
    let d_bt = nn::upsample2_backward(&d_u2, (c3, h / 4, wd / 4));

    let d_bt_pre = nn::relu_backward(&cache.bt_pre, &d_bt);
    let (d_p2, dw, db) = nn::conv2d_backward(
        &cache.p2,
        (c2, h / 4, wd / 4),
        &w.get("bt.w").data,
        (c3, 3),
        1,
        1,
        &d_bt_pre,
        (h / 4, wd / 4),
    );
    acc("bt", dw, db, grads);

    let mut d_e2 = nn::maxpool2_backward(&d_p2, &cache.arg2, cache.e2.len());
    for (a, b) in d_e2.iter_mut().zip(&d_e2_skip) {
        *a += b;
    }
    let d_e2_pre = nn::relu_backward(&cache.e2_pre, &d_e2);
    let (d_p1, dw, db) = nn::conv2d_backward(
        &cache.p1,
        (c1, h / 2, wd / 2),
        &w.get("e2.w").data,
        (c2, 3),
        1,
        1,
        &d_e2_pre,
        (h / 2, wd / 2),
    );
    acc("e2", dw, db, grads);

    let mut d_e1 = nn::maxpool2_backward(&d_p1, &cache.arg1, cache.e1.len());
    for (a, b) in d_e1.iter_mut().zip(&d_e1_skip) {
        *a += b;
    }
    let d_e1_pre = nn::relu_backward(&cache.e1_pre, &d_e1);
    let (_, dw, db) = nn::conv2d_backward(
        &cache.x,
        (1, h, wd),
        &w.get("e1.w").data,
        (c1, 3),
        1,
        1,
        &d_e1_pre,
        (h, wd),
    );
    acc("e1", dw, db, grads);
}

/// Probability mask for one image; deterministic (no stochastic layers).
pub fn predict(w: &PredictorWeights, cfg: &PredictorConfig, image: &Tensor) -> Result<Tensor> {
    let cache = forward_pass(w, cfg, image, None)?;
    let (h, wd) = image.hw();
    Tensor::from_vec(&[h, wd], cache.probs)
}

/// One stochastic forward pass with the given dropout masks active.
pub fn predict_with_dropout(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    image: &Tensor,
    masks: &DropoutMasks,
) -> Result<Tensor> {
    let cache = forward_pass(w, cfg, image, Some(masks))?;
    let (h, wd) = image.hw();
    Tensor::from_vec(&[h, wd], cache.probs)
}

/// Activation sizes of the two dropout sites for images of (h, w).
pub fn dropout_site_sizes(cfg: &PredictorConfig, h: usize, w: usize) -> (usize, usize) {
    let [c1, c2, _] = cfg.channel_widths;
    (c1 * h * w, c2 * (h / 2) * (w / 2))
}

pub fn threshold(probs: &Tensor) -> Tensor {
    Tensor::from_vec(
        &probs.shape,
        probs
            .data
            .iter()
            .map(|&p| if p >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

/// 2|A∩B| / (|A|+|B|); both-empty returns 1.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!(
            "dice_score shapes {:?} vs {:?}",
            pred.shape, truth.shape
        )));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        inter += a * b;
        total += a + b;
    }
    if total == 0.0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter / total)
    }
}

/// 1 - soft-Dice with additive smoothing in numerator and denominator.
pub fn dice_loss(pred_probs: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred_probs.shape != truth.shape {
        return Err(Error::Shape(format!(
            "dice_loss shapes {:?} vs {:?}",
            pred_probs.shape, truth.shape
        )));
    }
    let (num, den) = soft_dice_terms(&pred_probs.data, &truth.data);
    Ok(1.0 - num / den)
}

fn soft_dice_terms(p: &[f64], y: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(y) {
        inter += a * b;
        total += a + b;
    }
    (2.0 * inter + DICE_SMOOTH, total + DICE_SMOOTH)
}

/// d(dice_loss)/d(pred_probs).
pub fn dice_loss_grad(pred_probs: &[f64], truth: &[f64]) -> Vec<f64> {
    let (num, den) = soft_dice_terms(pred_probs, truth);
    pred_probs
        .iter()
        .zip(truth)
        .map(|(_, &y)| -((2.0 * y * den - num) / (den * den)))
        .collect()
}

/// Standard Adam with bias correction; increments `step_counter` once.
pub fn adam_step(w: &mut PredictorWeights, grads: &GradMap, cfg: &PredictorConfig, lr: f64) -> Result<()> {
    w.step_counter += 1;
    let t = w.step_counter as i32;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
        let m = &mut w.moment1[name].data;
        let v = &mut w.moment2[name].data;
        let p = &mut w.named_tensors[name].data;
        for i in 0..g.data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g.data[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g.data[i] * g.data[i];
            let m_hat = m[i] / (1.0 - b1.powi(t));
            let v_hat = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// w_t + epsilon * (w_new - w_t), element-wise; Adam moments reset.
pub fn reptile_sync(
    w_t: &PredictorWeights,
    w_new: &PredictorWeights,
    epsilon: f64,
) -> Result<PredictorWeights> {
    let mut out = w_t.clone();
    for (name, t_old) in &w_t.named_tensors {
        let t_new = w_new
            .named_tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("reptile_sync: missing tensor {name}")))?;
        if t_new.shape != t_old.shape {
            return Err(Error::Shape(format!("reptile_sync: shape mismatch in {name}")));
        }
        let dst = &mut out.named_tensors[name].data;
        // (1-e)*old + e*new keeps both endpoints exact in floating point
        for i in 0..dst.len() {
            dst[i] = (1.0 - epsilon) * t_old.data[i] + epsilon * t_new.data[i];
        }
    }
    for t in out.moment1.values_mut().chain(out.moment2.values_mut()) {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    out.step_counter = 0;
    Ok(out)
}

/// Linear anneal 1 -> 0 over `total_trials` trials.
pub fn anneal_epsilon(trial_index: usize, total_trials: usize) -> Result<f64> {
    if total_trials == 0 || trial_index >= total_trials {
        return Err(Error::Config(format!(
            "trial_index {trial_index} out of range for {total_trials} trials"
        )));
    }
    if total_trials == 1 {
        return Ok(1.0);
    }
    Ok(1.0 - trial_index as f64 / (total_trials - 1) as f64)
}

/// Mean dice-loss gradient step on a minibatch of (image, mask) pairs.
pub fn train_step(
    w: &mut PredictorWeights,
    cfg: &PredictorConfig,
    batch: &[(&Tensor, &Tensor)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("train_step: empty batch".into()));
    }
    let mut grads: GradMap = w
        .named_tensors
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    // forward passes are independent per sample; the reduce stays sequential
    let caches: Vec<Result<(ForwardCache, f64, Vec<f64>)>> = par::map_indexed(batch, |(img, msk)| {
        let cache = forward_pass(w, cfg, img, None)?;
        let (num, den) = soft_dice_terms(&cache.probs, &msk.data);
        let loss = 1.0 - num / den;
        let d_probs: Vec<f64> = dice_loss_grad(&cache.probs, &msk.data)
            .into_iter()
            .map(|g| g * scale)
            .collect();
        Ok((cache, loss, d_probs))
    });
    for r in caches {
        let (cache, loss, d_probs) = r?;
        loss_sum += loss;
        backward_pass(w, &cache, &d_probs, &mut grads);
    }
    adam_step(w, &grads, cfg, cfg.learning_rate)?;
    Ok(loss_sum * scale)
}

/// Mean binary Dice of the predictor over a dataset.
pub fn mean_val_dice(w: &PredictorWeights, cfg: &PredictorConfig, ds: &LabeledDataset) -> Result<f64> {
    let scores: Vec<Result<f64>> = par::map_indexed(&ds.pairs, |p| {
        let probs = predict(w, cfg, &p.image)?;
        dice_score(&threshold(&probs), &p.mask)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / ds.len() as f64)
}

pub struct TrainOutcome {
    pub weights: PredictorWeights,
    pub best_val_dice: f64,
    /// Validation Dice after each completed epoch.
    pub epoch_log: Vec<f64>,
}

/// Train until `convergence_patience` epochs pass without a
/// `convergence_min_delta` improvement in validation Dice, or `max_epochs`.
/// Returns the weights that achieved the best validation Dice.
pub fn train_until_converged(
    w: PredictorWeights,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &PredictorConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train_until_converged: empty dataset".into()));
    }
    cfg.validate()?;
    let mut current = w;
    let mut best = current.clone();
    let mut best_dice = mean_val_dice(&current, cfg, val)?;
    let mut epochs_since_improve = 0;
    let mut log = Vec::new();
    for _epoch in 0..cfg.max_epochs {
        for chunk in train.pairs.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor, &Tensor)> =
                chunk.iter().map(|p| (&p.image, &p.mask)).collect();
            train_step(&mut current, cfg, &batch)?;
        }
        let dice = mean_val_dice(&current, cfg, val)?;
        log.push(dice);
        if dice > best_dice {
            best = current.clone();
        }
        if dice > best_dice + cfg.convergence_min_delta {
            best_dice = dice;
            epochs_since_improve = 0;
        } else {
            best_dice = best_dice.max(dice);
            epochs_since_improve += 1;
            if epochs_since_improve >= cfg.convergence_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        weights: best,
        best_val_dice: best_dice,
        epoch_log: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, InstituteShift, ShapeClass, TaskSpec};

    fn cfg() -> PredictorConfig {
        PredictorConfig::default()
    }

    fn small_cfg() -> PredictorConfig {
        PredictorConfig {
            channel_widths: [2, 3, 4],
            ..PredictorConfig::default()
        }
    }

    fn spec(size: usize) -> TaskSpec {
        TaskSpec {
            shape_class: ShapeClass::Disk,
            institute_shift: InstituteShift::default(),
            distractor_classes: vec![],
            image_size: (size, size),
            corrupt_fraction: 0.0,
            task_tag: None,
            institute_tag: None,
        }
    }

    #[test]
    fn predict_contract_shape_and_range() {
        let c = cfg();
        let w = PredictorWeights::init(&c, 0);
        let ds = generate_dataset(&spec(16), 3, 1, "p").unwrap();
        for p in &ds.pairs {
            let out = predict(&w, &c, &p.image).unwrap();
            assert_eq!(out.shape, vec![16, 16]);
            assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let c = cfg();
        let w = PredictorWeights::init(&c, 0);
        let ds = generate_dataset(&spec(16), 1, 1, "d").unwrap();
        let a = predict(&w, &c, &ds.pairs[0].image).unwrap();
        let b = predict(&w, &c, &ds.pairs[0].image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_init_mean_output_is_moderate() {
        let c = cfg();
        let w = PredictorWeights::init(&c, 3);
        let ds = generate_dataset(&spec(16), 100, 2, "m").unwrap();
        let mut total = 0.0;
        for p in &ds.pairs {
            let out = predict(&w, &c, &p.image).unwrap();
            total += out.data.iter().sum::<f64>() / out.len() as f64;
        }
        let mean = total / 100.0;
        assert!((0.05..0.95).contains(&mean), "mean output {mean}");
    }

    #[test]
    fn dice_score_cases() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        // |A|=4, |B|=6, |A∩B|=3 -> 0.6
        let a4 = Tensor::from_vec(&[3, 3], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b6 = Tensor::from_vec(&[3, 3], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((dice_score(&a4, &b6).unwrap() - 0.6).abs() < 1e-12);
        // both empty -> 1
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        // symmetry
        assert_eq!(
            dice_score(&a4, &b6).unwrap(),
            dice_score(&b6, &a4).unwrap()
        );
    }

    #[test]
    fn dice_loss_endpoints() {
        let y = Tensor::from_vec(&[32, 32], {
            let mut v = vec![0.0; 1024];
            v[..512].iter_mut().for_each(|x| *x = 1.0);
            v
        })
        .unwrap();
        assert!(dice_loss(&y, &y).unwrap() <= 1e-3);
        let inv = Tensor::from_vec(&[32, 32], y.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(dice_loss(&inv, &y).unwrap() >= 0.99);
    }

    #[test]
    fn dice_loss_grad_matches_finite_differences() {
        let mut r = rng::stream(5, "dice-fd");
        let p: Vec<f64> = (0..16).map(|_| r.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..16).map(|_| f64::from(r.random_range(0.0..1.0) > 0.5)).collect();
        let grad = dice_loss_grad(&p, &y);
        let eps = 1e-6;
        for i in 0..16 {
            let mut pp = p.clone();
            pp[i] += eps;
            let mut pm = p.clone();
            pm[i] -= eps;
            let lp = {
                let (n, d) = soft_dice_terms(&pp, &y);
                1.0 - n / d
            };
            let lm = {
                let (n, d) = soft_dice_terms(&pm, &y);
                1.0 - n / d
            };
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-10);
            assert!(rel < 1e-4, "grad[{i}]: fd={fd} an={}", grad[i]);
        }
    }

    #[test]
    fn dice_loss_plus_soft_dice_is_one() {
        let mut r = rng::stream(6, "ident");
        for _ in 0..20 {
            let p: Vec<f64> = (0..9).map(|_| r.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..9).map(|_| f64::from(r.random_range(0.0..1.0) > 0.5)).collect();
            let (num, den) = soft_dice_terms(&p, &y);
            let pt = Tensor::from_vec(&[3, 3], p.clone()).unwrap();
            let yt = Tensor::from_vec(&[3, 3], y.clone()).unwrap();
            let loss = dice_loss(&pt, &yt).unwrap();
            assert!((loss + num / den - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let c = small_cfg();
        let mut w = PredictorWeights::init(&c, 1);
        let before = w.named_tensors.clone();
        let grads: GradMap = before
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        adam_step(&mut w, &grads, &c, 0.1).unwrap();
        assert_eq!(w.named_tensors, before);
        assert_eq!(w.step_counter, 1);
    }

    #[test]
    fn adam_first_step_is_bias_corrected_unit_step() {
        let c = cfg();
        let mut w = PredictorWeights::init(&c, 1);
        let name = "out.b".to_string();
        let start = w.named_tensors[&name].data[0];
        let mut grads: GradMap = w
            .named_tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        grads[&name].data[0] = 1.0;
        adam_step(&mut w, &grads, &c, 0.1).unwrap();
        let step = w.named_tensors[&name].data[0] - start;
        assert!((step + 0.1).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimise f(x) = x^2 via the out.b scalar
        let c = cfg();
        let mut w = PredictorWeights::init(&c, 1);
        let name = "out.b".to_string();
        w.named_tensors[&name].data[0] = 2.0;
        let f = |w: &PredictorWeights| w.named_tensors[&name].data[0].powi(2);
        let before = f(&w);
        for _ in 0..2 {
            let mut grads: GradMap = w
                .named_tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
                .collect();
            grads[&name].data[0] = 2.0 * w.named_tensors[&name].data[0];
            adam_step(&mut w, &grads, &c, 0.1).unwrap();
        }
        assert!(f(&w) < before);
    }

    #[test]
    fn adam_rejects_nonfinite_gradients() {
        let c = small_cfg();
        let mut w = PredictorWeights::init(&c, 1);
        let mut grads: GradMap = w
            .named_tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        grads["e1.w"].data[0] = f64::NAN;
        let err = adam_step(&mut w, &grads, &c, 0.1).unwrap_err();
        assert!(err.to_string().contains("e1.w"), "{err}");
    }

    #[test]
    fn reptile_endpoints_and_midpoint() {
        let c = small_cfg();
        let a = PredictorWeights::init(&c, 1);
        let b = PredictorWeights::init(&c, 2);
        let at1 = reptile_sync(&a, &b, 1.0).unwrap();
        assert_eq!(at1.named_tensors, b.named_tensors);
        let at0 = reptile_sync(&a, &b, 0.0).unwrap();
        assert_eq!(at0.named_tensors, a.named_tensors);
        // hand arithmetic on two elements
        let mut x = a.clone();
        let mut y = a.clone();
        x.named_tensors["out.b"].data[0] = 0.0;
        y.named_tensors["out.b"].data[0] = 2.0;
        let mid = reptile_sync(&x, &y, 0.5).unwrap();
        assert_eq!(mid.named_tensors["out.b"].data[0], 1.0);
        // moments reset
        assert!(at1.moment1.values().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn anneal_epsilon_schedule() {
        assert_eq!(anneal_epsilon(0, 100).unwrap(), 1.0);
        assert_eq!(anneal_epsilon(99, 100).unwrap(), 0.0);
        assert!((anneal_epsilon(50, 101).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(anneal_epsilon(0, 1).unwrap(), 1.0);
        assert!(anneal_epsilon(5, 5).is_err());
    }

    #[test]
    fn memorises_a_single_sample() {
        let c = PredictorConfig {
            max_epochs: 150,
            ..cfg()
        };
        let ds = generate_dataset(&spec(16), 1, 7, "mem").unwrap();
        let w = PredictorWeights::init(&c, 7);
        let out = train_until_converged(w, &ds, &ds, &c).unwrap();
        assert!(out.best_val_dice > 0.9, "dice {}", out.best_val_dice);
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let c = PredictorConfig {
            max_epochs: 0,
            ..cfg()
        };
        let ds = generate_dataset(&spec(16), 2, 7, "z").unwrap();
        let w = PredictorWeights::init(&c, 7);
        let before = w.named_tensors.clone();
        let initial = mean_val_dice(&w, &c, &ds).unwrap();
        let out = train_until_converged(w, &ds, &ds, &c).unwrap();
        assert_eq!(out.weights.named_tensors, before);
        assert_eq!(out.best_val_dice, initial);
    }

    #[test]
    fn best_dice_matches_epoch_log_max() {
        let c = PredictorConfig {
            max_epochs: 20,
            ..cfg()
        };
        let ds = generate_dataset(&spec(16), 4, 9, "log").unwrap();
        let w = PredictorWeights::init(&c, 9);
        let initial = mean_val_dice(&w, &c, &ds).unwrap();
        let out = train_until_converged(w, &ds, &ds, &c).unwrap();
        let log_max = out
            .epoch_log
            .iter()
            .fold(initial, |a, &b| a.max(b));
        assert_eq!(out.best_val_dice, log_max);
    }

    #[test]
    fn full_predictor_gradient_matches_finite_differences() {
        // 4x4 input, tiny channels, checked against central differences
        let c = PredictorConfig {
            channel_widths: [2, 3, 4],
            ..cfg()
        };
        let w = PredictorWeights::init(&c, 11);
        let mut r = rng::stream(11, "fd");
        let img = Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let msk = Tensor::from_vec(&[4, 4], (0..16).map(|_| f64::from(r.random_range(0.0..1.0) > 0.5)).collect()).unwrap();

        let loss_of = |w: &PredictorWeights| {
            let cache = forward_pass(w, &c, &img, None).unwrap();
            let (num, den) = soft_dice_terms(&cache.probs, &msk.data);
            1.0 - num / den
        };
        let cache = forward_pass(&w, &c, &img, None).unwrap();
        let d_probs = dice_loss_grad(&cache.probs, &msk.data);
        let mut grads: GradMap = w
            .named_tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
        backward_pass(&w, &cache, &d_probs, &mut grads);

        let eps = 1e-6;
        let mut checked = 0;
        for (name, tensor) in &w.named_tensors {
            for i in (0..tensor.data.len()).step_by(tensor.data.len().div_ceil(4).max(1)) {
                let mut wp = w.clone();
                wp.named_tensors[name].data[i] += eps;
                let mut wm = w.clone();
                wm.named_tensors[name].data[i] -= eps;
                let fd = (loss_of(&wp) - loss_of(&wm)) / (2.0 * eps);
                let an = grads[name].data[i];
                if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                    continue; // dead ReLU path
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-4, "{name}[{i}]: fd={fd} an={an} rel={rel}");
                checked += 1;
            }
        }
        assert!(checked >= 10, "too few gradient entries checked: {checked}");
    }
}
