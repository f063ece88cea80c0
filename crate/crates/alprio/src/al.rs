//! Batch-mode active learning with the frozen controller: initialise with
//! beta0 random labels, then iterate — score the pool in canonical id order
//! with the controller's recurrent state adapting through its tau inputs,
//! select the top-beta samples, label them through the oracle, grow the
//! support sets at ratio phi, retrain the predictor, and feed the
//! support-validation reward back as the next iteration's controller input.
//!
//! The controller weights are never updated here; all adaptation is carried
//! by the recurrent state.

use crate::controller::{self, ControllerInput, ControllerState, ControllerWeights};
use crate::error::{Error, Result};
use crate::predictor::{self, DropoutMasks, PredictorConfig, PredictorWeights};
use crate::reward;
use crate::synth::{LabeledDataset, LabeledPair};
use crate::tensor::Tensor;
use crate::{analysis, par, rng};
use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Proposed,
    Random,
    McDropout,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Proposed => "proposed",
            Strategy::Random => "random",
            Strategy::McDropout => "mc_dropout",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ALConfig {
    pub beta0: usize,
    pub beta: usize,
    /// Support-train fraction of the labelled budget.
    pub phi: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub mc_passes: usize,
    pub mc_dropout_rate: f64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            beta0: 24,
            beta: 4,
            phi: 0.75,
            max_iterations: 50,
            seed: 0,
            strategy: Strategy::Proposed,
            mc_passes: 10,
            mc_dropout_rate: 0.1,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta0 < 2 {
            return Err(Error::Config("beta0 must be >= 2".into()));
        }
        if self.beta < 1 {
            return Err(Error::Config("beta must be >= 1".into()));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::Config(format!("phi must lie in (0,1), got {}", self.phi)));
        }
        if self.mc_passes < 2 {
            return Err(Error::Config("mc_passes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.mc_dropout_rate) {
            return Err(Error::Config("mc_dropout_rate must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Simulated expert: dispenses ground-truth masks and counts every query.
#[derive(Debug, Clone)]
pub struct Oracle {
    ground_truth: IndexMap<String, Tensor>,
    pub query_count: usize,
}

impl Oracle {
    pub fn from_dataset(ds: &LabeledDataset) -> Self {
        Oracle {
            ground_truth: ds
                .pairs
                .iter()
                .map(|p| (p.id.clone(), p.mask.clone()))
                .collect(),
            query_count: 0,
        }
    }

    pub fn query(&mut self, id: &str) -> Result<Tensor> {
        let mask = self
            .ground_truth
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("oracle has no entry for id '{id}'")))?;
        self.query_count += 1;
        Ok(mask)
    }
}

#[derive(Debug, Clone)]
pub struct ALState {
    /// Remaining unlabelled sample ids, kept sorted ascending (the canonical
    /// scoring order).
    pub unlabelled_pool: Vec<String>,
    pub support_train: LabeledDataset,
    pub support_val: LabeledDataset,
    pub predictor: PredictorWeights,
    pub controller_state: ControllerState,
    /// Unweighted support-validation reward from the latest retrain; fed to
    /// the controller as `prev_raw_reward`.
    pub last_reward: f64,
    pub iteration: usize,
    /// Ids selected in the most recent iteration (drives `prev_action`).
    pub last_selected: HashSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ALIterationRecord {
    pub c: usize,
    pub labelled_count: usize,
    pub selected_ids: Vec<String>,
    pub mean_score_of_selected: f64,
    pub support_val_reward: f64,
    pub holdout_dice_mean: f64,
    pub holdout_dice_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ALRunRecord {
    pub strategy: Strategy,
    pub beta0: usize,
    pub beta: usize,
    pub phi: f64,
    pub seed: u64,
    pub entries: Vec<ALIterationRecord>,
}

/// One JSON line per iteration, preceded by a header line with the run
/// parameters.
pub fn write_run_record(path: &Path, record: &ALRunRecord) -> Result<()> {
    let mut out = String::new();
    let header = serde_json::json!({
        "strategy": record.strategy,
        "beta0": record.beta0,
        "beta": record.beta,
        "phi": record.phi,
        "seed": record.seed,
    });
    out.push_str(&header.to_string());
    out.push('\n');
    for e in &record.entries {
        let line =
            serde_json::to_string(e).map_err(|e| Error::Format(format!("record encode: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_run_record(path: &Path) -> Result<ALRunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty run record".into()))?;
    let head: serde_json::Value = serde_json::from_str(header)
        .map_err(|e| Error::Format(format!("record header: {e}")))?;
    let mut entries = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("record entry: {e}")))?,
        );
    }
    let field = |k: &str| {
        head.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("record header missing '{k}'")))
    };
    Ok(ALRunRecord {
        strategy: serde_json::from_value(field("strategy")?)
            .map_err(|e| Error::Format(format!("record strategy: {e}")))?,
        beta0: field("beta0")?.as_u64().unwrap_or(0) as usize,
        beta: field("beta")?.as_u64().unwrap_or(0) as usize,
        phi: field("phi")?.as_f64().unwrap_or(0.0),
        seed: field("seed")?.as_u64().unwrap_or(0),
        entries,
    })
}

fn pair_by_id<'a>(pool: &'a LabeledDataset, id: &str) -> Result<&'a LabeledPair> {
    pool.pairs
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::Domain(format!("id '{id}' not in pool dataset")))
}

/// Label `id` via the oracle and append the pair to `target`.
fn label_into(
    target: &mut LabeledDataset,
    pool: &LabeledDataset,
    oracle: &mut Oracle,
    id: &str,
) -> Result<()> {
    let src = pair_by_id(pool, id)?;
    let mask = oracle.query(id)?;
    target.pairs.push(LabeledPair {
        id: src.id.clone(),
        image: src.image.clone(),
        mask,
        task_tag: src.task_tag.clone(),
        institute_tag: src.institute_tag.clone(),
    });
    Ok(())
}

/// Uniform sample of beta ids without replacement.
pub fn strategy_random(pool_ids: &[String], beta: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if beta > pool_ids.len() {
        return Err(Error::Domain(format!(
            "strategy_random: beta={beta} exceeds pool of {}",
            pool_ids.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool_ids.len(), beta)
        .into_iter()
        .map(|i| pool_ids[i].clone())
        .collect())
}

/// MC-dropout uncertainty per image: the mean over pixels of the across-pass
/// variance of predicted probabilities.
pub fn mc_dropout_uncertainties(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    images: &[&Tensor],
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if passes < 2 {
        return Err(Error::Config("mc_dropout requires passes >= 2".into()));
    }
    par::map_indexed(images, |img| {
        let (h, wd) = img.hw();
        let (e1_len, e2_len) = predictor::dropout_site_sizes(cfg, h, wd);
        let mut per_pass: Vec<Vec<f64>> = Vec::with_capacity(passes);
        for pass in 0..passes {
            let mut r = rng::item_stream(seed, "mc-dropout", pass as u64);
            let masks = DropoutMasks::sample(dropout_rate, e1_len, e2_len, &mut r);
            per_pass.push(predictor::predict_with_dropout(w, cfg, img, &masks)?.data);
        }
        let n_pix = per_pass[0].len();
        let mut var_sum = 0.0;
        for p in 0..n_pix {
            // shift by the first pass so identical passes give exactly zero
            let base = per_pass[0][p];
            let mean: f64 =
                per_pass.iter().map(|v| v[p] - base).sum::<f64>() / passes as f64;
            var_sum += per_pass
                .iter()
                .map(|v| (v[p] - base - mean).powi(2))
                .sum::<f64>()
                / passes as f64;
        }
        Ok(var_sum / n_pix as f64)
    })
    .into_iter()
    .collect()
}

/// MC-dropout strategy: beta highest-uncertainty ids, ties to lowest id.
pub fn strategy_mc_dropout(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    pool: &LabeledDataset,
    pool_ids: &[String],
    beta: usize,
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<f64>)> {
    let images: Vec<&Tensor> = pool_ids
        .iter()
        .map(|id| pair_by_id(pool, id).map(|p| &p.image))
        .collect::<Result<_>>()?;
    let unc = mc_dropout_uncertainties(w, cfg, &images, passes, dropout_rate, seed)?;
    let picked = controller::select_top_k(&unc, beta)?;
    let selected_unc: Vec<f64> = picked.iter().map(|&i| unc[i]).collect();
    Ok((
        picked.into_iter().map(|i| pool_ids[i].clone()).collect(),
        selected_unc,
    ))
}

/// Unweighted support-validation reward (all weights 1).
fn support_val_reward(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    val: &LabeledDataset,
) -> Result<f64> {
    let losses = reward::validation_losses(w, cfg, val)?;
    let ones = vec![1.0; losses.len()];
    reward::raw_reward(&losses, &ones)
}

/// Algorithm-2 initialisation: beta0 uniform-random labels, phi split,
/// predictor trained to convergence, initial reward stored as `last_reward`.
pub fn init_al(
    pool: &LabeledDataset,
    cfg: &ALConfig,
    oracle: &mut Oracle,
    ctrl: &ControllerWeights,
    pcfg: &PredictorConfig,
) -> Result<ALState> {
    cfg.validate()?;
    pool.validate()?;
    if cfg.beta0 >= pool.pairs.len() {
        return Err(Error::Config(format!(
            "beta0={} must be smaller than the pool ({})",
            cfg.beta0,
            pool.pairs.len()
        )));
    }
    let mut ids: Vec<String> = pool.pairs.iter().map(|p| p.id.clone()).collect();
    ids.sort();

    let mut rng = rng::stream(cfg.seed, "al-init");
    let picked = rand::seq::index::sample(&mut rng, ids.len(), cfg.beta0);
    let mut initial: Vec<String> = picked.iter().map(|i| ids[i].clone()).collect();
    initial.sort();
    let initial_set: HashSet<&String> = initial.iter().collect();
    let unlabelled_pool: Vec<String> = ids
        .iter()
        .filter(|id| !initial_set.contains(id))
        .cloned()
        .collect();

    let n_train = ((cfg.beta0 as f64) * cfg.phi).floor() as usize;
    let n_train = n_train.clamp(1, cfg.beta0 - 1);
    let mut support_train = LabeledDataset {
        pairs: vec![],
        source: format!("{}-support-train", pool.source),
    };
    let mut support_val = LabeledDataset {
        pairs: vec![],
        source: format!("{}-support-val", pool.source),
    };
    for (i, id) in initial.iter().enumerate() {
        let target = if i < n_train {
            &mut support_train
        } else {
            &mut support_val
        };
        label_into(target, pool, oracle, id)?;
    }

    let init_weights = PredictorWeights::init(pcfg, cfg.seed);
    let outcome = predictor::train_until_converged(init_weights, &support_train, &support_val, pcfg)?;
    let last_reward = support_val_reward(&outcome.weights, pcfg, &support_val)?;

    let mut controller_state = ControllerState::new(ctrl.arch.hidden_size);
    controller_state.reset();

    Ok(ALState {
        unlabelled_pool,
        support_train,
        support_val,
        predictor: outcome.weights,
        controller_state,
        last_reward,
        iteration: 0,
        last_selected: HashSet::new(),
    })
}

/// Score every pool sample with the frozen controller in canonical order,
/// advancing the recurrent state.
fn score_pool(
    state: &mut ALState,
    pool: &LabeledDataset,
    ctrl: &ControllerWeights,
) -> Result<Vec<f64>> {
    let inputs: Vec<ControllerInput> = state
        .unlabelled_pool
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let p = pair_by_id(pool, id)?;
            Ok(ControllerInput {
                image: p.image.clone(),
                prev_action: f64::from(state.last_selected.contains(id)),
                prev_raw_reward: state.last_reward,
                // the previous iteration ended just before this scan
                prev_done: f64::from(i == 0 && state.iteration > 0),
            })
        })
        .collect::<Result<_>>()?;
    let (scores, new_state) = controller::score_batch(ctrl, &state.controller_state, &inputs)?;
    state.controller_state = new_state;
    Ok(scores)
}

/// One Algorithm-2 iteration. Returns `None` when the pool has fewer than
/// beta samples left (terminal, not an error).
pub fn al_iteration(
    state: &mut ALState,
    pool: &LabeledDataset,
    holdout: &LabeledDataset,
    cfg: &ALConfig,
    oracle: &mut Oracle,
    ctrl: &ControllerWeights,
    pcfg: &PredictorConfig,
) -> Result<Option<ALIterationRecord>> {
    if state.unlabelled_pool.len() < cfg.beta {
        return Ok(None);
    }
    let c = state.iteration + 1;

    let (selected, mean_score) = match cfg.strategy {
        Strategy::Proposed => {
            let scores = score_pool(state, pool, ctrl)?;
            let picked = controller::select_top_k(&scores, cfg.beta)?;
            let mean = picked.iter().map(|&i| scores[i]).sum::<f64>() / cfg.beta as f64;
            let ids = picked
                .into_iter()
                .map(|i| state.unlabelled_pool[i].clone())
                .collect();
            (ids, mean)
        }
        Strategy::Random => {
            let mut r = rng::item_stream(cfg.seed, "al-random", c as u64);
            (strategy_random(&state.unlabelled_pool, cfg.beta, &mut r)?, 0.0)
        }
        Strategy::McDropout => {
            let (ids, unc) = strategy_mc_dropout(
                &state.predictor,
                pcfg,
                pool,
                &state.unlabelled_pool,
                cfg.beta,
                cfg.mc_passes,
                cfg.mc_dropout_rate,
                cfg.seed ^ (c as u64),
            )?;
            let mean = unc.iter().sum::<f64>() / unc.len() as f64;
            (ids, mean)
        }
    };

    // label and distribute: support-val only receives samples when the
    // cumulative target floor((beta0 + beta*c)*(1-phi)) exceeds its size
    let labelled_count = cfg.beta0 + cfg.beta * c;
    let val_target = ((labelled_count as f64) * (1.0 - cfg.phi)).floor() as usize;
    let mut val_deficit = val_target.saturating_sub(state.support_val.pairs.len());
    let mut ordered = selected.clone();
    ordered.sort();
    for id in ordered.iter().rev() {
        if val_deficit > 0 {
            label_into(&mut state.support_val, pool, oracle, id)?;
            val_deficit -= 1;
        } else {
            label_into(&mut state.support_train, pool, oracle, id)?;
        }
    }
    let selected_set: HashSet<&String> = selected.iter().collect();
    state.unlabelled_pool.retain(|id| !selected_set.contains(id));

    // retrain from a fresh (seeded) initialisation on the cumulative support
    // sets; warm-starting can trap the predictor in a collapsed optimum from
    // an unlucky early split. The incumbent predictor is kept when the
    // retrain does not beat it on the current support-validation set, so the
    // deployed model never regresses on the data it is validated against.
    let outcome = predictor::train_until_converged(
        PredictorWeights::init(pcfg, cfg.seed),
        &state.support_train,
        &state.support_val,
        pcfg,
    )?;
    let incumbent_val = predictor::mean_val_dice(&state.predictor, pcfg, &state.support_val)?;
    let retrained_val = predictor::mean_val_dice(&outcome.weights, pcfg, &state.support_val)?;
    if retrained_val > incumbent_val {
        state.predictor = outcome.weights;
    }
    state.last_reward = support_val_reward(&state.predictor, pcfg, &state.support_val)?;
    state.last_selected = selected.iter().cloned().collect();
    state.iteration = c;

    let (dice_mean, dice_std, _) = analysis::evaluate_holdout(&state.predictor, pcfg, holdout)?;
    let mut selected_sorted = selected;
    selected_sorted.sort();
    Ok(Some(ALIterationRecord {
        c,
        labelled_count,
        selected_ids: selected_sorted,
        mean_score_of_selected: mean_score,
        support_val_reward: state.last_reward,
        holdout_dice_mean: dice_mean,
        holdout_dice_std: dice_std,
    }))
}

/// Full AL run: init, then iterate to pool exhaustion or `max_iterations`.
pub fn run_al(
    pool: &LabeledDataset,
    holdout: &LabeledDataset,
    cfg: &ALConfig,
    ctrl: &ControllerWeights,
    pcfg: &PredictorConfig,
) -> Result<(ALRunRecord, ALState)> {
    let holdout_ids: HashSet<&String> = holdout.pairs.iter().map(|p| &p.id).collect();
    if pool.pairs.iter().any(|p| holdout_ids.contains(&p.id)) {
        return Err(Error::Config("pool and holdout share sample ids".into()));
    }
    let mut oracle = Oracle::from_dataset(pool);
    let mut state = init_al(pool, cfg, &mut oracle, ctrl, pcfg)?;
    // baseline entry: state after initialisation, before any selection;
    // selected_ids carries the beta0 initial ids for post-hoc analysis
    let (dice_mean, dice_std, _) = analysis::evaluate_holdout(&state.predictor, pcfg, holdout)?;
    let mut initial_ids: Vec<String> = state
        .support_train
        .pairs
        .iter()
        .chain(state.support_val.pairs.iter())
        .map(|p| p.id.clone())
        .collect();
    initial_ids.sort();
    let mut entries = vec![ALIterationRecord {
        c: 0,
        labelled_count: cfg.beta0,
        selected_ids: initial_ids,
        mean_score_of_selected: 0.0,
        support_val_reward: state.last_reward,
        holdout_dice_mean: dice_mean,
        holdout_dice_std: dice_std,
    }];
    while state.iteration < cfg.max_iterations {
        match al_iteration(&mut state, pool, holdout, cfg, &mut oracle, ctrl, pcfg)? {
            Some(entry) => entries.push(entry),
            None => break,
        }
    }
    Ok((
        ALRunRecord {
            strategy: cfg.strategy,
            beta0: cfg.beta0,
            beta: cfg.beta,
            phi: cfg.phi,
            seed: cfg.seed,
            entries,
        },
        state,
    ))
}
