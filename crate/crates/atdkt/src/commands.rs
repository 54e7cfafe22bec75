//! The subcommands. Each writes one output directory holding a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use atdkt_core::data::{
    expand_kc_level, filter_and_truncate, group_by_student, kfold_split, FoldAssignment, Vocab,
};
use atdkt_core::eval::{
    embeddings_csv, export_fused_embeddings, export_states, multistep_eval, one_step_eval,
    records_csv, score, states_csv, MultiStepConfig,
};
use atdkt_core::model::{AtDkt, Variant};
use atdkt_core::synth::{generate, oracle_auc_bound, SynthSpec, SynthTruth};
use atdkt_core::train::{
    finish_fold_with_records, fit, hyperparam_search, FoldResult, MetricsReport, Summary,
};
use serde::{Deserialize, Serialize};

use crate::cli::*;
use crate::config::{overlay, RunConfig};
use crate::csvio::{load_interactions, save_interactions};
use crate::error::{CliError, CliResult, Stage};
use crate::manifest::{hash_file, prepare_output, sha256_hex, RunManifest};
use crate::parallel_map;
use crate::store::*;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_FOLDS_FILE: &str = "ablation_folds.csv";

pub fn run(command: Command) -> CliResult<PathBuf> {
    match command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Synth(a) => synth(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Export(ExportCommand::States(a)) => export_state_trajectory(&a),
        Command::Export(ExportCommand::Embeddings(a)) => export_embeddings(&a),
    }
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold{fold}"))
}

#[derive(Debug, Serialize)]
struct PrepareSettings<'a> {
    input: &'a Path,
    max_len: usize,
    min_len: usize,
    folds: usize,
    seed: u64,
}

pub fn prepare(a: &PrepareArgs) -> CliResult<PathBuf> {
    let settings = PrepareSettings {
        input: &a.input,
        max_len: a.max_len,
        min_len: a.min_len,
        folds: a.folds,
        seed: a.seed,
    };
    let data_hash = hash_file(&a.input).data()?;
    let manifest = RunManifest::begin("prepare", &settings, data_hash, a.seed).usage()?;
    let raw = load_interactions(&a.input).data()?;
    if raw.is_empty() {
        return Err(CliError::Data(anyhow!(
            "{} holds no interactions",
            a.input.display()
        )));
    }
    let raw_interactions = raw.len();
    let avg_kcs_per_question = atdkt_core::data::avg_kcs_per_question(&raw);
    let logs = group_by_student(raw).data()?;
    let students = logs.len();
    let (sequences, stats) =
        filter_and_truncate(expand_kc_level(&logs), a.min_len, a.max_len).data()?;
    let folds = kfold_split(&sequences, a.folds, a.seed).data()?;
    let prepared = PreparedData {
        min_len: a.min_len,
        max_len: a.max_len,
        vocab: Vocab::covering(&sequences),
        raw_interactions,
        students,
        avg_kcs_per_question,
        stats,
        sequences,
    };
    log::info!(
        "{raw_interactions} interactions from {students} students -> {} chunks, {} steps; dropped {} short sequences and {} short tail chunks",
        prepared.sequences.len(),
        prepared.expanded_steps(),
        stats.dropped_sequences,
        stats.dropped_tail_chunks
    );
    prepare_output(&a.out, a.output.force).usage()?;
    write_json(&a.out.join(DATASET_FILE), &prepared).data()?;
    save_folds(&a.out.join(FOLDS_FILE), &folds).data()?;
    manifest.finish(&a.out).data()?;
    Ok(a.out.clone())
}

/// Prepared data and its fold file, as a command input.
struct Prepared {
    dir: PathBuf,
    data: PreparedData,
    folds: FoldAssignment,
    hash: String,
}

fn load_prepared(dir: &Path) -> anyhow::Result<Prepared> {
    let data_path = dir.join(DATASET_FILE);
    let folds_path = dir.join(FOLDS_FILE);
    let data: PreparedData = read_json(&data_path)?;
    let folds = load_folds(&folds_path)?;
    data.vocab.validate(&data.sequences)?;
    let hash =
        sha256_hex(format!("{}{}", hash_file(&data_path)?, hash_file(&folds_path)?).as_bytes());
    Ok(Prepared {
        dir: dir.to_path_buf(),
        data,
        folds,
        hash,
    })
}

/// What `train` records about its inputs next to the configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSettings {
    data: PathBuf,
    folds: Vec<usize>,
    run: RunConfig,
}

/// Trains one fold, with a random search when the config asks for one.
/// With `out` set the fold directory is written.
fn train_round(
    p: &Prepared,
    cfg: &RunConfig,
    round: usize,
    out: Option<&Path>,
) -> anyhow::Result<FoldResult> {
    let data = p.folds.fold_data(round, &p.data.sequences)?;
    let started = Instant::now();
    let (mut result, model, records, trials) = match cfg.search_budget {
        Some(budget) => {
            let s = hyperparam_search(&data, &cfg.model, &cfg.train, budget, round)?;
            if let Some(asked) = s.clipped_budget {
                log::warn!(
                    "fold {round}: search budget {asked} exceeds the grid; searching all {} points",
                    s.trials.len()
                );
            }
            (s.result, s.model, s.records, Some(s.trials))
        }
        None => {
            let fitted = fit(&data.train, &data.valid, &cfg.model, &cfg.train, round)?;
            let (r, m, rec) = finish_fold_with_records(fitted, &data.test, &cfg.train, round)?;
            (r, m, rec, None)
        }
    };
    result.wall_time_secs = Some(started.elapsed().as_secs_f64());
    log::info!(
        "fold {round} {}: test auc {:.4} acc {:.4} (best epoch {} of {}, {:.1}s)",
        model.config.variant,
        result.test_auc,
        result.test_accuracy,
        result.best_epoch,
        result.epochs_run,
        result.wall_time_secs.unwrap_or(0.0)
    );
    if let Some(out) = out {
        let dir = fold_dir(out, round);
        fs::create_dir_all(&dir)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
        write_json(&dir.join(METRICS_FILE), &result)?;
        fs::write(dir.join(RECORDS_FILE), records_csv(&records))?;
        if let Some(trials) = trials {
            let mut f = fs::File::create(dir.join(TRIALS_FILE))?;
            for t in &trials {
                writeln!(f, "{}", serde_json::to_string(t)?)?;
            }
        }
    }
    Ok(result)
}

fn load_run_config(
    path: Option<&Path>,
    seed: Option<u64>,
    variant: Option<Variant>,
    p: &Prepared,
) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path).usage()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    cfg.resolve(p.data.vocab, p.data.max_len).usage()
}

pub fn train(a: &TrainArgs) -> CliResult<PathBuf> {
    let p = load_prepared(&a.data).data()?;
    let cfg = load_run_config(a.config.as_deref(), a.seed, a.variant, &p)?;
    let k = p.folds.k();
    let rounds: Vec<usize> = match a.fold {
        Some(f) if f >= k => {
            return Err(CliError::Usage(anyhow!(
                "fold {f} out of range for {k} folds"
            )))
        }
        Some(f) => vec![f],
        None => (0..k).collect(),
    };
    let out = a.out.clone().unwrap_or_else(|| {
        let name = a
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", cfg.model.variant, cfg.train.seed));
        a.runs_dir.join(name)
    });
    let settings = TrainSettings {
        data: fs::canonicalize(&p.dir).unwrap_or_else(|_| p.dir.clone()),
        folds: rounds.clone(),
        run: cfg.clone(),
    };
    let manifest =
        RunManifest::begin("train", &settings, p.hash.clone(), cfg.train.seed).usage()?;
    prepare_output(&out, a.output.force).usage()?;
    write_json(&out.join(CONFIG_FILE), &cfg).usage()?;

    let outcomes = parallel_map(rounds, a.jobs, |round| {
        let r = train_round(&p, &cfg, round, Some(&out));
        (round, r)
    });
    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("fold {i}: {e:#}")))
        .collect();
    let report = MetricsReport::from_folds(
        outcomes
            .into_iter()
            .map(|(i, r)| {
                (
                    i,
                    r.map_err(|e| atdkt_core::Error::Training(format!("{e:#}"))),
                )
            })
            .collect(),
    );
    write_json(&out.join(METRICS_FILE), &report).training()?;
    manifest.finish(&out).training()?;
    if let Some(text) = &report.auc_text {
        log::info!(
            "test auc {text}, accuracy {}",
            report.accuracy_text.as_deref().unwrap_or("-")
        );
    }
    if !failures.is_empty() {
        return Err(CliError::Training(anyhow!("{}", failures.join("; "))));
    }
    Ok(out)
}

/// A trained run reopened for evaluation or export.
struct Run {
    prepared: Prepared,
    config: RunConfig,
}

fn open_run(dir: &Path) -> anyhow::Result<Run> {
    let manifest = RunManifest::load(dir)
        .with_context(|| format!("{} is not a run directory", dir.display()))?;
    if manifest.command != "train" {
        bail!(
            "{} was written by `{}`, not `train`",
            dir.display(),
            manifest.command
        );
    }
    let settings: TrainSettings = serde_json::from_value(manifest.config)?;
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    if config != settings.run {
        bail!("{} disagrees with the run manifest", CONFIG_FILE);
    }
    let prepared = load_prepared(&settings.data)?;
    if prepared.hash != manifest.data_hash {
        bail!(
            "prepared data at {} changed since training",
            settings.data.display()
        );
    }
    Ok(Run { prepared, config })
}

fn load_fold_model(run: &Path, fold: usize) -> anyhow::Result<AtDkt> {
    let path = fold_dir(run, fold).join(CHECKPOINT_FILE);
    if !path.exists() {
        bail!("missing checkpoint {}", path.display());
    }
    load_checkpoint(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub records: usize,
    pub oracle_auc_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub observed_fraction: Option<f64>,
    pub feedback: Option<String>,
    pub folds: Vec<FoldScore>,
    pub auc: Option<Summary>,
    pub accuracy: Option<Summary>,
    pub auc_text: Option<String>,
    pub accuracy_text: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvaluateSettings<'a> {
    run: &'a Path,
    mode: String,
    observed_fraction: Option<f64>,
    feedback: Option<String>,
    folds: &'a [usize],
    truth: Option<&'a Path>,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<PathBuf> {
    let run = open_run(&a.run).evaluation()?;
    let multi = match (a.mode, a.fraction) {
        (EvalMode::Onestep, None) => None,
        (EvalMode::Onestep, Some(_)) => {
            return Err(CliError::Usage(anyhow!(
                "--fraction only applies to multistep evaluation"
            )));
        }
        (EvalMode::Multistep, None) => {
            return Err(CliError::Usage(anyhow!(
                "multistep evaluation needs --fraction"
            )))
        }
        (EvalMode::Multistep, Some(f)) => {
            Some(MultiStepConfig::new(f, a.feedback.into()).evaluation()?)
        }
    };
    let k = run.prepared.folds.k();
    let folds: Vec<usize> = match a.fold {
        Some(f) => vec![f],
        None => (0..k)
            .filter(|&f| fold_dir(&a.run, f).join(CHECKPOINT_FILE).exists())
            .collect(),
    };
    if folds.is_empty() {
        return Err(CliError::Evaluation(anyhow!(
            "no checkpoints under {}",
            a.run.display()
        )));
    }
    let truth: Option<SynthTruth> = a.truth.as_deref().map(read_json).transpose().data()?;
    let feedback_name = multi.map(|m| format!("{:?}", m.mode).to_lowercase());
    let mode_name = format!("{:?}", a.mode).to_lowercase();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| match (&multi, &feedback_name) {
            (Some(m), Some(fb)) => a
                .run
                .join(format!("eval-multistep-{}-{fb}", m.observed_fraction)),
            _ => a.run.join("eval-onestep"),
        });
    let settings = EvaluateSettings {
        run: &a.run,
        mode: mode_name.clone(),
        observed_fraction: multi.map(|m| m.observed_fraction),
        feedback: feedback_name.clone(),
        folds: &folds,
        truth: a.truth.as_deref(),
    };
    let manifest = RunManifest::begin(
        "evaluate",
        &settings,
        run.prepared.hash.clone(),
        run.config.train.seed,
    )
    .usage()?;
    prepare_output(&out, a.output.force).usage()?;

    let mut scores = Vec::new();
    for &fold in &folds {
        let model = load_fold_model(&a.run, fold).evaluation()?;
        let data = run
            .prepared
            .folds
            .fold_data(fold, &run.prepared.data.sequences)
            .evaluation()?;
        let batch = run.config.train.batch_size;
        let records = match &multi {
            None => one_step_eval(&model, &data.test, batch),
            Some(m) => multistep_eval(&model, &data.test, m, batch).map(|o| o.records),
        }
        .evaluation()?;
        let (auc, accuracy) = score(&records).evaluation()?;
        let oracle = truth
            .as_ref()
            .map(|t| oracle_auc_bound(t, &records, run.prepared.data.max_len))
            .transpose()
            .evaluation()?;
        fs::write(
            out.join(format!("fold{fold}_{RECORDS_FILE}")),
            records_csv(&records),
        )
        .evaluation()?;
        log::info!(
            "fold {fold}: auc {auc:.4} acc {accuracy:.4} over {} records",
            records.len()
        );
        scores.push(FoldScore {
            fold,
            auc,
            accuracy,
            records: records.len(),
            oracle_auc_bound: oracle,
        });
    }
    let auc = Summary::of(&scores.iter().map(|s| s.auc).collect::<Vec<_>>());
    let accuracy = Summary::of(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>());
    let report = EvalReport {
        mode: mode_name,
        observed_fraction: multi.map(|m| m.observed_fraction),
        feedback: feedback_name,
        folds: scores,
        auc_text: auc.map(|s| s.formatted()),
        accuracy_text: accuracy.map(|s| s.formatted()),
        auc,
        accuracy,
    };
    write_json(&out.join(METRICS_FILE), &report).evaluation()?;
    manifest.finish(&out).evaluation()?;
    Ok(out)
}

pub fn synth(a: &SynthArgs) -> CliResult<PathBuf> {
    let mut spec: SynthSpec = match &a.spec {
        None => SynthSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .usage()?;
            overlay(&SynthSpec::default(), &text)
                .with_context(|| format!("in {}", p.display()))
                .usage()?
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (raws, truth) = generate(&spec).usage()?;
    prepare_output(&a.out, a.output.force).usage()?;
    let csv_path = a.out.join(INTERACTIONS_FILE);
    save_interactions(&csv_path, &raws).data()?;
    write_json(&a.out.join(TRUTH_FILE), &truth).data()?;
    let manifest =
        RunManifest::begin("synth", &spec, hash_file(&csv_path).data()?, spec.seed).usage()?;
    log::info!(
        "{} interactions from {} students",
        raws.len(),
        truth.students.len()
    );
    manifest.finish(&a.out).data()?;
    Ok(a.out.clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AblateSettings {
    data: PathBuf,
    run: RunConfig,
}

pub fn ablate(a: &AblateArgs) -> CliResult<PathBuf> {
    let p = load_prepared(&a.data).data()?;
    let base = load_run_config(a.config.as_deref(), a.seed, None, &p)?;
    let settings = AblateSettings {
        data: fs::canonicalize(&p.dir).unwrap_or_else(|_| p.dir.clone()),
        run: base.clone(),
    };
    let manifest =
        RunManifest::begin("ablate", &settings, p.hash.clone(), base.train.seed).usage()?;
    prepare_output(&a.out, a.output.force).usage()?;

    let k = p.folds.k();
    let jobs: Vec<(Variant, usize)> = Variant::ALL
        .iter()
        .flat_map(|&v| (0..k).map(move |f| (v, f)))
        .collect();
    let results = parallel_map(jobs, a.jobs, |(variant, round)| {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        (variant, round, train_round(&p, &cfg, round, None))
    });
    let mut failures = Vec::new();
    let mut table = csv::Writer::from_path(a.out.join(ABLATION_FILE)).training()?;
    table
        .write_record([
            "variant",
            "auc_mean",
            "auc_std",
            "accuracy_mean",
            "accuracy_std",
            "auc",
            "accuracy",
            "folds",
        ])
        .training()?;
    let mut per_fold = csv::Writer::from_path(a.out.join(ABLATION_FOLDS_FILE)).training()?;
    per_fold
        .write_record([
            "variant",
            "fold",
            "test_auc",
            "test_accuracy",
            "best_epoch",
            "epochs_run",
        ])
        .training()?;
    for variant in Variant::ALL {
        let mut folds = Vec::new();
        for (v, round, r) in &results {
            if *v != variant {
                continue;
            }
            match r {
                Ok(res) => {
                    per_fold
                        .write_record([
                            variant.to_string(),
                            round.to_string(),
                            res.test_auc.to_string(),
                            res.test_accuracy.to_string(),
                            res.best_epoch.to_string(),
                            res.epochs_run.to_string(),
                        ])
                        .training()?;
                    folds.push(res.clone());
                }
                Err(e) => failures.push(format!("{variant} fold {round}: {e:#}")),
            }
        }
        let auc = Summary::of(&folds.iter().map(|f| f.test_auc).collect::<Vec<_>>());
        let acc = Summary::of(&folds.iter().map(|f| f.test_accuracy).collect::<Vec<_>>());
        let num = |s: Option<Summary>, f: fn(&Summary) -> f64| {
            s.map(|s| f(&s).to_string()).unwrap_or_default()
        };
        table
            .write_record([
                variant.to_string(),
                num(auc, |s| s.mean),
                num(auc, |s| s.std),
                num(acc, |s| s.mean),
                num(acc, |s| s.std),
                auc.map(|s| s.formatted()).unwrap_or_default(),
                acc.map(|s| s.formatted()).unwrap_or_default(),
                folds.len().to_string(),
            ])
            .training()?;
    }
    table.flush().training()?;
    per_fold.flush().training()?;
    manifest.finish(&a.out).training()?;
    if !failures.is_empty() {
        return Err(CliError::Training(anyhow!("{}", failures.join("; "))));
    }
    Ok(a.out.clone())
}

#[derive(Debug, Serialize)]
struct StatesSettings<'a> {
    run: &'a Path,
    fold: usize,
    student: &'a str,
    chunk: usize,
    kcs: &'a [usize],
}

pub fn export_state_trajectory(a: &StatesArgs) -> CliResult<PathBuf> {
    let run = open_run(&a.run).evaluation()?;
    let model = load_fold_model(&a.run, a.fold).evaluation()?;
    let seq = run
        .prepared
        .data
        .sequences
        .iter()
        .find(|s| s.student_id == a.student && s.chunk == a.chunk)
        .ok_or_else(|| {
            CliError::Data(anyhow!(
                "no sequence for student {} chunk {}",
                a.student,
                a.chunk
            ))
        })?;
    let rows = export_states(&model, seq, &a.kcs).usage()?;
    let settings = StatesSettings {
        run: &a.run,
        fold: a.fold,
        student: &a.student,
        chunk: a.chunk,
        kcs: &a.kcs,
    };
    let manifest =
        RunManifest::begin("export-states", &settings, run.prepared.hash.clone(), 0).usage()?;
    prepare_output(&a.out, a.output.force).usage()?;
    fs::write(a.out.join("states.csv"), states_csv(&a.kcs, &rows)).evaluation()?;
    manifest.finish(&a.out).evaluation()?;
    Ok(a.out.clone())
}

#[derive(Debug, Serialize)]
struct EmbeddingSettings<'a> {
    run: &'a Path,
    fold: usize,
    top_k: usize,
    per_class: usize,
    seed: u64,
}

pub fn export_embeddings(a: &EmbeddingsArgs) -> CliResult<PathBuf> {
    let run = open_run(&a.run).evaluation()?;
    let model = load_fold_model(&a.run, a.fold).evaluation()?;
    let data = run
        .prepared
        .folds
        .fold_data(a.fold, &run.prepared.data.sequences)
        .evaluation()?;
    let export =
        export_fused_embeddings(&model, &data.test, a.top_k, a.per_class, a.seed).evaluation()?;
    for (kc, response, n) in &export.short_classes {
        log::warn!(
            "kc {kc} response {} has only {n} samples, all kept",
            *response as u8
        );
    }
    let settings = EmbeddingSettings {
        run: &a.run,
        fold: a.fold,
        top_k: a.top_k,
        per_class: a.per_class,
        seed: a.seed,
    };
    let manifest = RunManifest::begin(
        "export-embeddings",
        &settings,
        run.prepared.hash.clone(),
        a.seed,
    )
    .usage()?;
    prepare_output(&a.out, a.output.force).usage()?;
    fs::write(
        a.out.join("embeddings.csv"),
        embeddings_csv(&export.rows, model.config.dim),
    )
    .evaluation()?;
    manifest.finish(&a.out).evaluation()?;
    Ok(a.out.clone())
}
