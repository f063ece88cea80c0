//! Evaluation analytics: holdout Dice summaries, Welch t-tests, kernel MMD
//! between image sets, convergence extraction from AL run records, and CSV
//! report emission.

use crate::al::ALRunRecord;
use crate::error::{Error, Result};
use crate::par;
use crate::predictor::{self, PredictorConfig, PredictorWeights};
use crate::synth::LabeledDataset;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-sample binary Dice over the holdout, with mean and population std.
pub fn evaluate_holdout(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    holdout: &LabeledDataset,
) -> Result<(f64, f64, Vec<f64>)> {
    if holdout.is_empty() {
        return Err(Error::Config("evaluate_holdout: empty dataset".into()));
    }
    let per_sample: Vec<f64> = par::map_indexed(&holdout.pairs, |p| {
        let probs = predictor::predict(w, cfg, &p.image)?;
        predictor::dice_score(&predictor::threshold(&probs), &p.mask)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = per_sample.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt(), per_sample))
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MMDConfig {
    /// Explicit RBF bandwidth; `None` selects the median heuristic (median
    /// pairwise Euclidean distance over the pooled set).
    pub bandwidth: Option<f64>,
    pub estimator: MmdEstimator,
    /// Images are average-pooled to at most this size before flattening.
    pub downsample_to: (usize, usize),
}

impl Default for MMDConfig {
    fn default() -> Self {
        MMDConfig {
            bandwidth: None,
            estimator: MmdEstimator::Biased,
            downsample_to: (16, 16),
        }
    }
}

/// Average-pool an image down to at most (th, tw); smaller images pass
/// through unchanged.
fn downsample(img: &Tensor, (th, tw): (usize, usize)) -> Vec<f64> {
    let (h, w) = img.hw();
    if h <= th && w <= tw {
        return img.data.clone();
    }
    let (oh, ow) = (h.min(th), w.min(tw));
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let r0 = i * h / oh;
        let r1 = (i + 1) * h / oh;
        for j in 0..ow {
            let c0 = j * w / ow;
            let c1 = (j + 1) * w / ow;
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += img.data[r * w + c];
                }
            }
            out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Squared MMD with an RBF kernel over flattened, downsampled pixel vectors.
pub fn mmd(set_a: &[&Tensor], set_b: &[&Tensor], cfg: &MMDConfig) -> Result<f64> {
    let min_n = match cfg.estimator {
        MmdEstimator::Biased => 1,
        MmdEstimator::Unbiased => 2,
    };
    if set_a.len() < min_n || set_b.len() < min_n {
        return Err(Error::Domain(format!(
            "mmd: need at least {min_n} images per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    if let Some(bw) = cfg.bandwidth {
        if bw <= 0.0 {
            return Err(Error::Config(format!("mmd bandwidth must be > 0, got {bw}")));
        }
    }
    let mut xa: Vec<Vec<f64>> =
        set_a.iter().map(|t| downsample(t, cfg.downsample_to)).collect();
    let mut xb: Vec<Vec<f64>> =
        set_b.iter().map(|t| downsample(t, cfg.downsample_to)).collect();
    // canonical argument order: the cross-kernel accumulation order then no
    // longer depends on which set came first, so mmd(a, b) == mmd(b, a)
    // bit-for-bit
    let key = |x: &[Vec<f64>]| {
        (
            x.len(),
            x.iter()
                .flat_map(|v| v.iter().map(|f| f.to_bits()))
                .collect::<Vec<u64>>(),
        )
    };
    if key(&xb) < key(&xa) {
        std::mem::swap(&mut xa, &mut xb);
    }
    if xa.iter().chain(&xb).any(|v| v.len() != xa[0].len()) {
        return Err(Error::Shape("mmd: inconsistent image sizes".into()));
    }

    let sigma = match cfg.bandwidth {
        Some(bw) => bw,
        None => {
            let pooled: Vec<&Vec<f64>> = xa.iter().chain(&xb).collect();
            let mut dists = Vec::new();
            for i in 0..pooled.len() {
                for j in (i + 1)..pooled.len() {
                    dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
                }
            }
            let m = median(dists);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp();

    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let mut kaa = 0.0;
    let mut kbb = 0.0;
    let mut kab = 0.0;
    for (i, xi) in xa.iter().enumerate() {
        for (j, xj) in xa.iter().enumerate() {
            if i != j || cfg.estimator == MmdEstimator::Biased {
                kaa += k(xi, xj);
            }
        }
    }
    for (i, yi) in xb.iter().enumerate() {
        for (j, yj) in xb.iter().enumerate() {
            if i != j || cfg.estimator == MmdEstimator::Biased {
                kbb += k(yi, yj);
            }
        }
    }
    for xi in &xa {
        for yj in &xb {
            kab += k(xi, yj);
        }
    }
    let value = match cfg.estimator {
        MmdEstimator::Biased => {
            (kaa / (na * na) + kbb / (nb * nb) - 2.0 * kab / (na * nb)).max(0.0)
        }
        MmdEstimator::Unbiased => {
            kaa / (na * (na - 1.0)) + kbb / (nb * (nb - 1.0)) - 2.0 * kab / (na * nb)
        }
    };
    Ok(value)
}

// ---------------------------------------------------------------------------
// Welch t-test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub group_a: GroupStats,
    pub group_b: GroupStats,
    pub t_statistic: f64,
    pub p_value: f64,
}

fn group_stats(v: &[f64]) -> GroupStats {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    GroupStats {
        mean,
        std: var.sqrt(),
        n: v.len(),
    }
}

/// Two-sided Welch (unequal-variance) t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<ComparisonResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain(format!(
            "welch_ttest: each group needs >= 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sa = group_stats(a);
    let sb = group_stats(b);
    let (va, vb) = (sa.std * sa.std, sb.std * sb.std);
    let (na, nb) = (sa.n as f64, sb.n as f64);
    let se2 = va / na + vb / nb;

    let (t, p) = if se2 == 0.0 {
        if sa.mean == sb.mean {
            // degenerate identical zero-variance groups
            (0.0, 1.0)
        } else {
            (f64::INFINITY * (sa.mean - sb.mean).signum(), 0.0)
        }
    } else {
        let t = (sa.mean - sb.mean) / se2.sqrt();
        let df = se2 * se2
            / (va * va / (na * na * (na - 1.0)) + vb * vb / (nb * nb * (nb - 1.0)));
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Numeric(format!("t-distribution: {e}")))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(ComparisonResult {
        group_a: sa,
        group_b: sb,
        t_statistic: t,
        p_value: p,
    })
}

// ---------------------------------------------------------------------------
// Convergence extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauRule {
    /// Minimum holdout-Dice gain (on the record's own Dice scale) below
    /// which an iteration counts toward the plateau.
    pub min_gain: f64,
    pub consecutive: usize,
}

impl Default for PlateauRule {
    fn default() -> Self {
        // Dice is recorded in [0, 1]; 0.005 is half a Dice point
        PlateauRule {
            min_gain: 0.005,
            consecutive: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub reached: bool,
    /// First iteration of the qualifying low-gain streak, or the last
    /// recorded iteration when the rule never fires.
    pub c_star: usize,
    pub labelled: usize,
}

/// First iteration where holdout Dice improved by less than `min_gain` for
/// `consecutive` iterations in a row.
pub fn labels_to_convergence(record: &ALRunRecord, rule: &PlateauRule) -> Result<ConvergenceResult> {
    if record.entries.is_empty() {
        return Err(Error::Domain("labels_to_convergence: empty record".into()));
    }
    let dice: Vec<f64> = record.entries.iter().map(|e| e.holdout_dice_mean).collect();
    // gains[i] is the improvement achieved by entry i (i >= 1)
    let mut streak = 0usize;
    for i in 1..dice.len() {
        if dice[i] - dice[i - 1] < rule.min_gain {
            streak += 1;
            if streak >= rule.consecutive {
                let first = i + 1 - rule.consecutive;
                let entry = &record.entries[first];
                return Ok(ConvergenceResult {
                    reached: true,
                    c_star: entry.c,
                    labelled: entry.labelled_count,
                });
            }
        } else {
            streak = 0;
        }
    }
    let last = record.entries.last().unwrap();
    Ok(ConvergenceResult {
        reached: false,
        c_star: last.c,
        labelled: last.labelled_count,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// One row of the MMD-vs-iteration series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmdSeriesRow {
    pub iteration: usize,
    pub mmd_support_vs_pool: f64,
    pub mmd_support_vs_holdout: f64,
    pub mmd_random_vs_proposed: f64,
}

pub fn write_mmd_series(path: &Path, rows: &[MmdSeriesRow]) -> Result<()> {
    let mut out =
        String::from("iteration,mmd_support_vs_pool,mmd_support_vs_holdout,mmd_random_vs_proposed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            r.iteration, r.mmd_support_vs_pool, r.mmd_support_vs_holdout, r.mmd_random_vs_proposed
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Emit the CSV tables: per-strategy Dice vs iteration (mean and std across
/// records), and per-record labels-to-convergence. Output is deterministic.
pub fn emit_report(records: &[ALRunRecord], out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Domain("emit_report: no records".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // strategy -> c -> dice values across records
    let mut by_strategy: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut labelled_at: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for rec in records {
        let key = rec.strategy.to_string();
        for e in &rec.entries {
            by_strategy
                .entry(key.clone())
                .or_default()
                .entry(e.c)
                .or_default()
                .push(e.holdout_dice_mean);
            labelled_at.insert((key.clone(), e.c), e.labelled_count);
        }
    }
    let mut dice_csv = String::from("strategy,c,labelled_count,dice_mean,dice_std,n_runs\n");
    for (strategy, per_c) in &by_strategy {
        for (c, values) in per_c {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let labelled = labelled_at[&(strategy.clone(), *c)];
            dice_csv.push_str(&format!(
                "{strategy},{c},{labelled},{mean:.6},{:.6},{}\n",
                var.sqrt(),
                values.len()
            ));
        }
    }
    let dice_path = out_dir.join("dice_vs_c.csv");
    std::fs::write(&dice_path, dice_csv).map_err(|e| Error::io(&dice_path, e))?;

    let rule = PlateauRule::default();
    let mut conv_csv = String::from("strategy,seed,beta0,beta,c_star,labelled,reached\n");
    for rec in records {
        let conv = labels_to_convergence(rec, &rule)?;
        conv_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.strategy, rec.seed, rec.beta0, rec.beta, conv.c_star, conv.labelled, conv.reached
        ));
    }
    let conv_path = out_dir.join("convergence.csv");
    std::fs::write(&conv_path, conv_csv).map_err(|e| Error::io(&conv_path, e))?;

    let readme = "\
# Report files

- `dice_vs_c.csv`: holdout Dice per strategy and AL iteration.
  Columns: strategy, c (iteration, 0 = after initialisation),
  labelled_count, dice_mean and dice_std (across runs), n_runs.
- `convergence.csv`: labels-to-convergence per run under the plateau rule
  (gain < 0.005 Dice for 3 consecutive iterations).
  Columns: strategy, seed, beta0, beta, c_star, labelled, reached.
- `mmd_series.csv` (when emitted): squared MMD against iteration.
  Columns: iteration, mmd_support_vs_pool, mmd_support_vs_holdout,
  mmd_random_vs_proposed.
";
    let readme_path = out_dir.join("README.md");
    std::fs::write(&readme_path, readme).map_err(|e| Error::io(&readme_path, e))
}
