//! Command-line entry point for the annotation-prioritisation pipeline.
//!
//! Subcommands cover the full workflow: `synth` renders task families and
//! evaluation pools to disk, `meta-train` trains the controller across an
//! environment distribution, `al-run` executes active-learning runs with a
//! frozen controller (or a baseline strategy), and `analyze` turns run
//! records into CSV reports.
//!
//! Exit codes: 0 on success, 2 for configuration/domain errors, 3 for I/O
//! and format errors, 4 for numeric failures. `ALPRIO_THREADS` caps the
//! worker-thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use alprio::al::{self, ALConfig, ALRunRecord, Strategy};
use alprio::analysis::{self, MMDConfig, MmdSeriesRow, PlateauRule};
use alprio::checkpoint;
use alprio::controller::{ControllerArch, ControllerWeights};
use alprio::error::{Error, Result};
use alprio::meta_train::{self, MetaTrainConfig};
use alprio::ppo::PPOConfig;
use alprio::predictor::PredictorConfig;
use alprio::synth::{
    self, EnvironmentDistribution, LabeledDataset, MdpEnvironment, TaskSpec,
};
use alprio::par;
use alprio::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

/// Top-level TOML configuration. Every section is optional and falls back to
/// defaults; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: u64,
    family: Option<FamilySection>,
    pool: Option<PoolSection>,
    meta: MetaTrainConfig,
    controller: ControllerArch,
    predictor: PredictorConfig,
    ppo: PPOConfig,
    al: ALConfig,
    plateau: PlateauRule,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilySection {
    samples_per_task: usize,
    tasks: Vec<TaskSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolSection {
    task: TaskSpec,
    pool_size: usize,
    holdout_size: usize,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------------------
// CLI grammar
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "alprio", version, about = "Adaptable task-based annotation prioritisation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic datasets (environment family and/or pool + holdout).
    Synth(SynthArgs),
    /// Meta-train the controller across an environment family.
    MetaTrain(MetaTrainArgs),
    /// Run active-learning episodes and write per-seed run records.
    AlRun(AlRunArgs),
    /// Aggregate run records into CSV reports.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML config; needs a [family] and/or [pool] section.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetaTrainArgs {
    /// Environment directory produced by `synth` (contains family.json).
    #[arg(long)]
    envs: PathBuf,
    /// Path for the trained controller checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Path for the shared predictor checkpoint (default: predictor.ckpt
    /// next to the controller).
    #[arg(long)]
    predictor_out: Option<PathBuf>,
    /// Path for the JSON-lines trial log (default: meta_train_log.jsonl
    /// next to the controller).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for periodic checkpoints (used when checkpoint_every > 0).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// TOML config ([meta], [controller], [predictor], [ppo] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Proceed with fewer than two environments (warns instead of failing).
    #[arg(long)]
    allow_single_env: bool,
}

#[derive(Args)]
struct AlRunArgs {
    /// Pool dataset: directory with manifest.json, or the manifest itself.
    #[arg(long)]
    pool: PathBuf,
    /// Holdout dataset, same layout as --pool.
    #[arg(long)]
    holdout: PathBuf,
    /// Output directory for run records.
    #[arg(long)]
    out: PathBuf,
    /// Controller checkpoint; required for the proposed strategy.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// proposed | random | mc_dropout (default from the [al] section).
    #[arg(long)]
    strategy: Option<String>,
    /// TOML config ([al], [predictor] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta0: Option<usize>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Single-run seed (ignored when --seeds is given).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list; one record file is written per seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent runs when fanning out over --seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run-record files, or directories scanned for *.jsonl.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Output directory for the CSV reports.
    #[arg(long)]
    out: PathBuf,
    /// Pool dataset; with --holdout, enables the MMD series report.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Holdout dataset for the MMD series report.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// TOML config ([plateau] section).
    #[arg(long)]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Per-environment metadata written next to the environment directories so
/// `meta-train` can rebuild the distribution without guessing.
#[derive(Debug, serde::Serialize, Deserialize)]
struct FamilyManifest {
    seed: u64,
    environments: Vec<FamilyEnvEntry>,
}

#[derive(Debug, serde::Serialize, Deserialize)]
struct FamilyEnvEntry {
    env_id: String,
    task_tag: String,
    institute_tag: String,
    weight: f64,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let seed = a.seed.unwrap_or(cfg.seed);
    if cfg.family.is_none() && cfg.pool.is_none() {
        return Err(Error::Config(
            "synth config needs a [family] and/or [pool] section".into(),
        ));
    }
    // validate everything before touching the filesystem
    if let Some(fam) = &cfg.family {
        if fam.tasks.is_empty() {
            return Err(Error::Config("[family] tasks must be non-empty".into()));
        }
        for t in &fam.tasks {
            t.validate()?;
        }
    }
    if let Some(pool) = &cfg.pool {
        pool.task.validate()?;
        if pool.pool_size < 4 || pool.holdout_size < 1 {
            return Err(Error::Config(
                "[pool] needs pool_size >= 4 and holdout_size >= 1".into(),
            ));
        }
    }

    if let Some(fam) = &cfg.family {
        let dist = synth::generate_task_family(&fam.tasks, fam.samples_per_task, seed)?;
        let envs_dir = a.out.join("envs");
        let mut entries = Vec::with_capacity(dist.environments.len());
        for (env, w) in dist.environments.iter().zip(&dist.sampling_weights) {
            let dir = envs_dir.join(&env.env_id);
            synth::save_dataset(&env.controller_train, &dir.join("train"))?;
            synth::save_dataset(&env.controller_val, &dir.join("val"))?;
            entries.push(FamilyEnvEntry {
                env_id: env.env_id.clone(),
                task_tag: env.task_tag.clone(),
                institute_tag: env.institute_tag.clone(),
                weight: *w,
            });
        }
        let manifest = FamilyManifest {
            seed,
            environments: entries,
        };
        let path = envs_dir.join("family.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        println!(
            "wrote {} environments to {}",
            dist.environments.len(),
            envs_dir.display()
        );
    }

    if let Some(pool) = &cfg.pool {
        let ds = synth::generate_dataset(&pool.task, pool.pool_size, seed, "pool")?;
        synth::save_dataset(&ds, &a.out.join("pool"))?;
        let holdout =
            synth::generate_dataset(&pool.task, pool.holdout_size, seed, "holdout")?;
        synth::save_dataset(&holdout, &a.out.join("holdout"))?;
        println!(
            "wrote pool ({} samples) and holdout ({} samples) to {}",
            ds.len(),
            holdout.len(),
            a.out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

fn load_family(envs_dir: &Path) -> Result<EnvironmentDistribution> {
    let manifest_path = envs_dir.join("family.json");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FamilyManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.environments.is_empty() {
        return Err(Error::Config("family.json lists no environments".into()));
    }
    let mut environments = Vec::with_capacity(manifest.environments.len());
    let mut weights = Vec::with_capacity(manifest.environments.len());
    for e in &manifest.environments {
        let dir = envs_dir.join(&e.env_id);
        let train = synth::load_dataset(&dir.join("train").join("manifest.json"))?;
        let val = synth::load_dataset(&dir.join("val").join("manifest.json"))?;
        environments.push(MdpEnvironment {
            env_id: e.env_id.clone(),
            controller_train: train,
            controller_val: val,
            task_tag: e.task_tag.clone(),
            institute_tag: e.institute_tag.clone(),
        });
        weights.push(e.weight);
    }
    Ok(EnvironmentDistribution {
        environments,
        sampling_weights: weights,
    })
}

fn cmd_meta_train(a: &MetaTrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.meta.seed = seed;
    }
    cfg.meta.validate()?;
    cfg.controller.validate()?;
    cfg.predictor.validate()?;
    cfg.ppo.validate()?;

    let dist = load_family(&a.envs)?;
    if dist.environments.len() < 2 {
        if a.allow_single_env {
            eprintln!(
                "warning: only {} environment(s); the controller will not see \
                 task variety",
                dist.environments.len()
            );
        } else {
            return Err(Error::Config(format!(
                "meta-training needs at least 2 environments, found {} \
                 (pass --allow-single-env to proceed anyway)",
                dist.environments.len()
            )));
        }
    }
    let (h, w) = dist.environments[0].controller_train.dims();
    if (cfg.controller.image_h, cfg.controller.image_w) != (h, w) {
        return Err(Error::Config(format!(
            "controller expects {}x{} images but environments hold {h}x{w}",
            cfg.controller.image_h, cfg.controller.image_w
        )));
    }

    let outcome = meta_train::meta_train(
        &dist,
        &cfg.meta,
        &cfg.controller,
        &cfg.predictor,
        &cfg.ppo,
        a.checkpoint_dir.as_deref(),
    )?;

    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    checkpoint::save_controller(&a.out, &outcome.controller, &cfg.ppo)?;
    let sibling = |name: &str| match a.out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.join(name),
        _ => PathBuf::from(name),
    };
    let predictor_path = a
        .predictor_out
        .clone()
        .unwrap_or_else(|| sibling("predictor.ckpt"));
    checkpoint::save_predictor(&predictor_path, &outcome.predictor, &cfg.predictor)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| sibling("meta_train_log.jsonl"));
    meta_train::write_log(&log_path, &outcome.log)?;

    let last = outcome.log.last();
    println!(
        "meta-trained {} trials; final mean reward {:.6}; controller -> {}",
        outcome.log.len(),
        last.map_or(f64::NAN, |e| e.mean_final_reward),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// al-run
// ---------------------------------------------------------------------------

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "proposed" => Ok(Strategy::Proposed),
        "random" => Ok(Strategy::Random),
        "mc_dropout" => Ok(Strategy::McDropout),
        other => Err(Error::Config(format!(
            "unknown strategy '{other}' (expected proposed, random, or mc_dropout)"
        ))),
    }
}

fn dataset_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}' in --seeds")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("--seeds is empty".into()));
    }
    Ok(seeds)
}

fn cmd_al_run(a: &AlRunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut al_cfg = cfg.al.clone();
    if let Some(s) = &a.strategy {
        al_cfg.strategy = parse_strategy(s)?;
    }
    if let Some(v) = a.beta0 {
        al_cfg.beta0 = v;
    }
    if let Some(v) = a.beta {
        al_cfg.beta = v;
    }
    if let Some(v) = a.phi {
        al_cfg.phi = v;
    }
    if let Some(v) = a.max_iterations {
        al_cfg.max_iterations = v;
    }
    if let Some(v) = a.seed {
        al_cfg.seed = v;
    }
    al_cfg.validate()?;
    cfg.predictor.validate()?;
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }

    let pool = synth::load_dataset(&dataset_manifest(&a.pool))?;
    let holdout = synth::load_dataset(&dataset_manifest(&a.holdout))?;

    let ctrl: ControllerWeights = match (&a.controller, al_cfg.strategy) {
        (Some(path), _) => checkpoint::load_controller(path)?.0,
        (None, Strategy::Proposed) => {
            return Err(Error::Config(
                "--controller is required for the proposed strategy".into(),
            ));
        }
        // baseline strategies never consult the controller; a fresh one
        // sized to the pool only carries the recurrent-state dimensions
        (None, _) => {
            let (h, w) = pool.dims();
            let arch = ControllerArch {
                image_h: h,
                image_w: w,
                ..ControllerArch::default()
            };
            arch.validate()?;
            ControllerWeights::init(&arch, al_cfg.seed)?
        }
    };
    let (h, w) = pool.dims();
    if (ctrl.arch.image_h, ctrl.arch.image_w) != (h, w) {
        return Err(Error::Config(format!(
            "controller expects {}x{} images but the pool holds {h}x{w}",
            ctrl.arch.image_h, ctrl.arch.image_w
        )));
    }

    let seeds = match &a.seeds {
        Some(list) => parse_seeds(list)?,
        None => vec![al_cfg.seed],
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let run_one = |seed: u64| -> Result<PathBuf> {
        let mut c = al_cfg.clone();
        c.seed = seed;
        let (record, _) = al::run_al(&pool, &holdout, &c, &ctrl, &cfg.predictor)?;
        let path = a
            .out
            .join(format!("run_{}_{seed:04}.jsonl", al_cfg.strategy));
        al::write_run_record(&path, &record)?;
        Ok(path)
    };

    let mut written = Vec::with_capacity(seeds.len());
    if a.jobs == 1 || seeds.len() == 1 {
        for &s in &seeds {
            written.push(run_one(s)?);
        }
    } else {
        for chunk in seeds.chunks(a.jobs) {
            let results = std::thread::scope(|scope| {
                let handles: Vec<_> =
                    chunk.iter().map(|&s| scope.spawn(move || run_one(s))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("al-run worker panicked"))
                    .collect::<Vec<_>>()
            });
            for r in results {
                written.push(r?);
            }
        }
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn collect_record_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|q| q.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(p.clone());
        }
    }
    if paths.is_empty() {
        return Err(Error::Config("no record files found".into()));
    }
    Ok(paths)
}

/// Welch comparisons of holdout Dice between strategies at each shared
/// iteration; needs at least two runs per strategy at that iteration.
fn write_comparisons(records: &[ALRunRecord], out: &Path) -> Result<usize> {
    let mut by_strategy: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let per_c = by_strategy.entry(r.strategy.to_string()).or_default();
        for e in &r.entries {
            per_c.entry(e.c).or_default().push(e.holdout_dice_mean);
        }
    }
    let mut body = String::from(
        "strategy_a,strategy_b,c,mean_a,mean_b,t_statistic,p_value\n",
    );
    let names: Vec<&String> = by_strategy.keys().collect();
    let mut rows = 0usize;
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            let (sa, sb) = (&by_strategy[names[i]], &by_strategy[names[j]]);
            for (c, va) in sa {
                let Some(vb) = sb.get(c) else { continue };
                if va.len() < 2 || vb.len() < 2 {
                    continue;
                }
                let cmp = analysis::welch_ttest(va, vb)?;
                body.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                    names[i], names[j], c, cmp.group_a.mean, cmp.group_b.mean,
                    cmp.t_statistic, cmp.p_value
                ));
                rows += 1;
            }
        }
    }
    let path = out.join("comparisons.csv");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Cumulative labelled support ids after each recorded iteration.
fn support_at_each_c(record: &ALRunRecord) -> Vec<(usize, Vec<String>)> {
    let mut acc: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(record.entries.len());
    for e in &record.entries {
        acc.extend(e.selected_ids.iter().cloned());
        out.push((e.c, acc.clone()));
    }
    out
}

fn images_for<'d>(
    ds: &'d LabeledDataset,
    ids: &[String],
) -> Result<Vec<&'d Tensor>> {
    let by_id: BTreeMap<&str, &Tensor> =
        ds.pairs.iter().map(|p| (p.id.as_str(), &p.image)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Domain(format!("record id '{id}' not in pool")))
        })
        .collect()
}

fn write_mmd_report(
    records: &[ALRunRecord],
    pool: &LabeledDataset,
    holdout: &LabeledDataset,
    out: &Path,
) -> Result<()> {
    let primary = records
        .iter()
        .find(|r| r.strategy == Strategy::Proposed)
        .or_else(|| records.first())
        .expect("caller checks records is non-empty");
    let random = records.iter().find(|r| r.strategy == Strategy::Random);

    let pool_imgs: Vec<&Tensor> = pool.pairs.iter().map(|p| &p.image).collect();
    let holdout_imgs: Vec<&Tensor> = holdout.pairs.iter().map(|p| &p.image).collect();
    let mmd_cfg = MMDConfig::default();

    let random_support: BTreeMap<usize, Vec<String>> = random
        .map(|r| support_at_each_c(r).into_iter().collect())
        .unwrap_or_default();

    let mut rows = Vec::new();
    for (c, support) in support_at_each_c(primary) {
        let support_imgs = images_for(pool, &support)?;
        let vs_pool = analysis::mmd(&support_imgs, &pool_imgs, &mmd_cfg)?;
        let vs_holdout = analysis::mmd(&support_imgs, &holdout_imgs, &mmd_cfg)?;
        // 0.0 when no random-strategy record covers this iteration
        let rand_vs_prop = match random_support.get(&c) {
            Some(ids) => {
                let rand_imgs = images_for(pool, ids)?;
                analysis::mmd(&rand_imgs, &support_imgs, &mmd_cfg)?
            }
            None => 0.0,
        };
        rows.push(MmdSeriesRow {
            iteration: c,
            mmd_support_vs_pool: vs_pool,
            mmd_support_vs_holdout: vs_holdout,
            mmd_random_vs_proposed: rand_vs_prop,
        });
    }
    analysis::write_mmd_series(&out.join("mmd_series.csv"), &rows)?;

    if rows.len() >= 2 {
        let first = rows.first().unwrap().mmd_support_vs_holdout;
        let last = rows.last().unwrap().mmd_support_vs_holdout;
        println!(
            "mmd(support, holdout): {:.6} at c={} -> {:.6} at c={}",
            first,
            rows.first().unwrap().iteration,
            last,
            rows.last().unwrap().iteration
        );
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.pool.is_some() != a.holdout.is_some() {
        return Err(Error::Config(
            "--pool and --holdout must be given together".into(),
        ));
    }
    let paths = collect_record_paths(&a.records)?;
    let records: Vec<ALRunRecord> = paths
        .iter()
        .map(|p| al::read_run_record(p))
        .collect::<Result<_>>()?;

    analysis::emit_report(&records, &a.out)?;
    for r in &records {
        let conv = analysis::labels_to_convergence(r, &cfg.plateau)?;
        println!(
            "{} seed {}: c*={} labelled={} reached={}",
            r.strategy, r.seed, conv.c_star, conv.labelled, conv.reached
        );
    }
    let rows = write_comparisons(&records, &a.out)?;
    if rows == 0 {
        eprintln!(
            "comparisons absent: need >= 2 runs per strategy at a shared iteration"
        );
    }

    if let (Some(pool_path), Some(holdout_path)) = (&a.pool, &a.holdout) {
        let pool = synth::load_dataset(&dataset_manifest(pool_path))?;
        let holdout = synth::load_dataset(&dataset_manifest(holdout_path))?;
        write_mmd_report(&records, &pool, &holdout, &a.out)?;
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn thread_cap_from_env() -> Result<usize> {
    match std::env::var("ALPRIO_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("ALPRIO_THREADS='{v}' is not a number"))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    par::configure_threads(thread_cap_from_env()?);
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::MetaTrain(a) => cmd_meta_train(a),
        Cmd::AlRun(a) => cmd_al_run(a),
        Cmd::Analyze(a) => cmd_analyze(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
