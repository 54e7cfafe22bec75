//! Per-fold training with Adam and early stopping, cross-validation and
//! seeded random search over the hyperparameter grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, FoldData, InteractionSequence, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::metrics::{self, format_mean_std};
use crate::model::{AtDkt, ForwardOptions, LossValues, ModelConfig};
use crate::optim::{Adam, AdamConfig, ParamSlot};
use crate::tape::Tape;

pub const GRID_DIMS: [usize; 2] = [64, 256];
pub const GRID_LAYERS: [usize; 3] = [1, 2, 4];
pub const GRID_HEADS: [usize; 2] = [4, 8];
pub const GRID_LRS: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const GRID_DELAYS: [usize; 8] = [0, 10, 30, 50, 70, 100, 120, 150];
pub const GRID_LOSS_WEIGHTS: [f64; 6] = [0.01, 0.1, 0.3, 0.5, 0.7, 1.0];

/// Hyperparameter search space. Every axis must be a non-empty subset of
/// the canonical values in the `GRID_*` constants.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperGrid {
    pub dims: Vec<usize>,
    pub enc_layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub lrs: Vec<f64>,
    pub ik_delays: Vec<usize>,
    pub qt_weights: Vec<f64>,
    pub ik_weights: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            dims: GRID_DIMS.to_vec(),
            enc_layers: GRID_LAYERS.to_vec(),
            heads: GRID_HEADS.to_vec(),
            lrs: GRID_LRS.to_vec(),
            ik_delays: GRID_DELAYS.to_vec(),
            qt_weights: GRID_LOSS_WEIGHTS.to_vec(),
            ik_weights: GRID_LOSS_WEIGHTS.to_vec(),
        }
    }
}

fn check_axis<T: PartialEq + core::fmt::Debug>(
    name: &str,
    values: &[T],
    allowed: &[T],
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis `{name}` is empty")));
    }
    if let Some(v) = values.iter().find(|v| !allowed.contains(v)) {
        return Err(Error::Config(format!(
            "grid axis `{name}` has {v:?}, allowed values are {allowed:?}"
        )));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::Config(format!("grid axis `{name}` repeats {v:?}")));
        }
    }
    Ok(())
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        check_axis("dims", &self.dims, &GRID_DIMS)?;
        check_axis("enc_layers", &self.enc_layers, &GRID_LAYERS)?;
        check_axis("heads", &self.heads, &GRID_HEADS)?;
        check_axis("lrs", &self.lrs, &GRID_LRS)?;
        check_axis("ik_delays", &self.ik_delays, &GRID_DELAYS)?;
        check_axis("qt_weights", &self.qt_weights, &GRID_LOSS_WEIGHTS)?;
        check_axis("ik_weights", &self.ik_weights, &GRID_LOSS_WEIGHTS)
    }

    pub fn size(&self) -> usize {
        self.dims.len()
            * self.enc_layers.len()
            * self.heads.len()
            * self.lrs.len()
            * self.ik_delays.len()
            * self.qt_weights.len()
            * self.ik_weights.len()
    }

    /// Grid point `index` in mixed-radix order, last axis fastest.
    pub fn point(&self, index: usize) -> HyperParams {
        let mut i = index;
        let mut take = |len: usize| {
            let v = i % len;
            i /= len;
            v
        };
        let ik_weight = self.ik_weights[take(self.ik_weights.len())];
        let qt_weight = self.qt_weights[take(self.qt_weights.len())];
        let ik_delay = self.ik_delays[take(self.ik_delays.len())];
        let lr = self.lrs[take(self.lrs.len())];
        let heads = self.heads[take(self.heads.len())];
        let enc_layers = self.enc_layers[take(self.enc_layers.len())];
        let dim = self.dims[take(self.dims.len())];
        HyperParams {
            dim,
            enc_layers,
            heads,
            lr,
            ik_delay,
            qt_weight,
            ik_weight,
        }
    }

    pub fn contains(&self, p: &HyperParams) -> bool {
        self.dims.contains(&p.dim)
            && self.enc_layers.contains(&p.enc_layers)
            && self.heads.contains(&p.heads)
            && self.lrs.contains(&p.lr)
            && self.ik_delays.contains(&p.ik_delay)
            && self.qt_weights.contains(&p.qt_weight)
            && self.ik_weights.contains(&p.ik_weight)
    }
}

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperParams {
    pub dim: usize,
    pub enc_layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub ik_delay: usize,
    pub qt_weight: f64,
    pub ik_weight: f64,
}

impl HyperParams {
    pub fn of(model: &ModelConfig, lr: f64) -> Self {
        HyperParams {
            dim: model.dim,
            enc_layers: model.enc_layers,
            heads: model.heads,
            lr,
            ik_delay: model.ik_delay,
            qt_weight: model.qt_weight,
            ik_weight: model.ik_weight,
        }
    }

    pub fn apply(&self, model: &mut ModelConfig) {
        model.dim = self.dim;
        model.enc_layers = self.enc_layers;
        model.heads = self.heads;
        model.ik_delay = self.ik_delay;
        model.qt_weight = self.qt_weight;
        model.ik_weight = self.ik_weight;
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grid: HyperGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            grid: HyperGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 || self.max_epochs > 200 {
            return Err(Error::Config(format!(
                "max_epochs {} must be in 1..=200",
                self.max_epochs
            )));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be positive and below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        self.grid.validate()
    }
}

/// Stops after `patience` consecutive epochs without a strictly better
/// validation AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    /// Records the next epoch's score (epochs count from 1).
    pub fn observe(&mut self, score: f64) -> Progress {
        self.epoch += 1;
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = self.epoch;
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stale
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Which phase read which split during training. `digest` is an FNV-1a
/// hash of the split's sorted student ids.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitRead {
    pub phase: Phase,
    pub split: Split,
    pub epoch: usize,
    pub digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Fit,
    Select,
    Test,
}

pub fn split_digest(seqs: &[InteractionSequence]) -> String {
    let mut ids: Vec<&str> = seqs.iter().map(|s| s.student_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.bytes().chain([0u8]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: LossValues,
    pub valid_auc: f64,
    pub valid_accuracy: f64,
}

/// Outcome of training on the train split with validation-based selection.
#[derive(Debug, Clone)]
pub struct Fitted {
    /// Parameters of the best validation epoch.
    pub model: AtDkt,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub epochs: Vec<EpochLog>,
    pub reads: Vec<SplitRead>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid_auc: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub best_valid_auc: f64,
    pub test_auc: f64,
    pub test_accuracy: f64,
    pub test_records: usize,
    pub hyperparams: HyperParams,
    pub reads: Vec<SplitRead>,
    /// Filled in by callers that can read a clock; excluded from equality
    /// of reruns.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub wall_time_secs: Option<f64>,
}

/// Derives an independent stream seed.
pub fn derive_seed(seed: u64, fold: usize, stream: u64) -> u64 {
    let mut z = seed
        ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled batches of similar lengths: sequences are shuffled, sorted by
/// length within windows of eight batches, and the batch order shuffled.
fn epoch_batches(
    n: usize,
    lengths: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let window = batch_size * 8;
    for w in order.chunks_mut(window) {
        w.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

/// Trains on `train`, evaluating validation AUC after every epoch and
/// keeping the parameters of the best one.
pub fn fit(
    train: &[InteractionSequence],
    valid: &[InteractionSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<Fitted> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be non-empty".into(),
        ));
    }
    let mut model = AtDkt::new(model_cfg.clone(), derive_seed(cfg.seed, fold, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, 2));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let train_digest = split_digest(train);
    let valid_digest = split_digest(valid);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut reads = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        reads.push(SplitRead {
            phase: Phase::Fit,
            split: Split::Train,
            epoch,
            digest: train_digest.clone(),
        });
        let mut sum = LossValues {
            kt: 0.0,
            qt: 0.0,
            ik: 0.0,
            total: 0.0,
        };
        let batches = epoch_batches(train.len(), &lengths, cfg.batch_size, &mut rng);
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&InteractionSequence> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs, model_cfg.num_kcs)?;
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                dropout_rng: Some(&mut dropout_rng),
                ..ForwardOptions::default()
            };
            let (vars, graph) = model.forward(&mut tape, &batch, opts)?;
            let losses = graph.losses(&tape);
            if !losses.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {losses:?} in epoch {epoch}, batch {bi}"
                )));
            }
            tape.backward(graph.loss)?;
            let names = vars.entries();
            let grads: Vec<&[f64]> = names
                .iter()
                .map(|(_, v)| tape.grad(**v).unwrap_or(&[]))
                .collect();
            let mut slots: Vec<ParamSlot<'_>> = model
                .params
                .entries_mut()
                .into_iter()
                .zip(&names)
                .zip(&grads)
                .map(|(((_, value), (name, _)), g)| ParamSlot {
                    name: name.as_str(),
                    value: value.data_mut(),
                    grad: g,
                })
                .collect();
            adam.step(&mut slots)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            sum.kt += losses.kt;
            sum.qt += losses.qt;
            sum.ik += losses.ik;
            sum.total += losses.total;
        }
        let nb = batches.len() as f64;
        let train_loss = LossValues {
            kt: sum.kt / nb,
            qt: sum.qt / nb,
            ik: sum.ik / nb,
            total: sum.total / nb,
        };

        reads.push(SplitRead {
            phase: Phase::Select,
            split: Split::Valid,
            epoch,
            digest: valid_digest.clone(),
        });
        let records = eval::one_step_eval(&model, valid, cfg.batch_size)?;
        let (valid_auc, valid_accuracy) = eval::score(&records)?;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            valid_auc,
            valid_accuracy,
        });
        log_epoch(fold, epoch, &train_loss, valid_auc);
        match stopper.observe(valid_auc) {
            Progress::Improved => best.clone_from(&model.params),
            Progress::Stale => {}
            Progress::Stop => break,
        }
    }
    model.params = best;
    Ok(Fitted {
        model,
        best_epoch: stopper.best_epoch(),
        best_valid_auc: stopper.best().unwrap_or(f64::NAN),
        epochs,
        reads,
    })
}

#[cfg(feature = "std")]
fn log_epoch(fold: usize, epoch: usize, loss: &LossValues, auc: f64) {
    if std::env::var_os("ATDKT_TRACE").is_some() {
        std::eprintln!(
            "fold {fold} epoch {epoch}: loss {:.5} (kt {:.5} qt {:.5} ik {:.5}) valid auc {auc:.5}",
            loss.total,
            loss.kt,
            loss.qt,
            loss.ik
        );
    }
}

#[cfg(not(feature = "std"))]
fn log_epoch(_: usize, _: usize, _: &LossValues, _: f64) {}

/// Evaluates a fitted model once on the test split.
pub fn finish_fold(
    fitted: Fitted,
    test: &[InteractionSequence],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(FoldResult, AtDkt)> {
    finish_fold_with_records(fitted, test, cfg, fold).map(|(r, m, _)| (r, m))
}

/// [`finish_fold`] that also hands back the scored test records.
pub fn finish_fold_with_records(
    fitted: Fitted,
    test: &[InteractionSequence],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(FoldResult, AtDkt, Vec<eval::PredictionRecord>)> {
    let mut reads = fitted.reads;
    reads.push(SplitRead {
        phase: Phase::Test,
        split: Split::Test,
        epoch: fitted.best_epoch,
        digest: split_digest(test),
    });
    let records = eval::one_step_eval(&fitted.model, test, cfg.batch_size)?;
    let (test_auc, test_accuracy) = eval::score(&records)?;
    let result = FoldResult {
        fold,
        best_epoch: fitted.best_epoch,
        epochs_run: fitted.epochs.len(),
        valid_auc: fitted.epochs.iter().map(|e| e.valid_auc).collect(),
        train_loss: fitted.epochs.iter().map(|e| e.train_loss.total).collect(),
        best_valid_auc: fitted.best_valid_auc,
        test_auc,
        test_accuracy,
        test_records: records.len(),
        hyperparams: HyperParams::of(&fitted.model.config, cfg.lr),
        reads,
        wall_time_secs: None,
    };
    Ok((result, fitted.model, records))
}

/// Trains one cross-validation round and scores the best checkpoint on its
/// test split.
pub fn train_fold(
    data: &FoldData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(FoldResult, AtDkt)> {
    let fitted = fit(&data.train, &data.valid, model_cfg, cfg, fold)?;
    finish_fold(fitted, &data.test, cfg, fold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        metrics::mean_std(values).map(|(mean, std)| Summary { mean, std })
    }

    pub fn formatted(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

/// Test metrics across folds. `complete` is false when any fold aborted;
/// summaries then cover the successful folds only.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub folds: Vec<FoldResult>,
    pub failures: Vec<(usize, String)>,
    pub complete: bool,
    pub auc: Option<Summary>,
    pub accuracy: Option<Summary>,
    pub auc_text: Option<String>,
    pub accuracy_text: Option<String>,
}

impl MetricsReport {
    pub fn from_folds(outcomes: Vec<(usize, Result<FoldResult>)>) -> Self {
        let mut folds = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in outcomes {
            match r {
                Ok(f) => folds.push(f),
                Err(e) => failures.push((i, format!("{e}"))),
            }
        }
        let aucs: Vec<f64> = folds.iter().map(|f| f.test_auc).collect();
        let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
        let auc = Summary::of(&aucs);
        let accuracy = Summary::of(&accs);
        MetricsReport {
            complete: failures.is_empty() && !folds.is_empty(),
            folds,
            failures,
            auc_text: auc.map(|s| s.formatted()),
            accuracy_text: accuracy.map(|s| s.formatted()),
            auc,
            accuracy,
        }
    }
}

/// Trains every fold in sequence.
pub fn run_cv(
    seqs: &[InteractionSequence],
    folds: &crate::data::FoldAssignment,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let mut outcomes = Vec::new();
    for round in 0..folds.k() {
        let data = folds.fold_data(round, seqs)?;
        outcomes.push((round, train_fold(&data, model_cfg, cfg, round).map(|r| r.0)));
    }
    Ok(MetricsReport::from_folds(outcomes))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trial {
    pub trial: usize,
    pub grid_index: usize,
    pub params: HyperParams,
    pub best_epoch: usize,
    pub valid_auc: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    /// Index into `trials` of the highest validation AUC (first on ties).
    pub best: usize,
    /// Set when the budget exceeded the grid size.
    pub clipped_budget: Option<usize>,
    pub result: FoldResult,
    pub model: AtDkt,
    /// Test records of the selected model.
    pub records: Vec<eval::PredictionRecord>,
}

/// Distinct grid indices drawn for a search.
pub fn sample_grid(
    grid: &HyperGrid,
    budget: usize,
    seed: u64,
) -> Result<(Vec<usize>, Option<usize>)> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    grid.validate()?;
    let size = grid.size();
    let clipped = (budget > size).then_some(budget);
    let take = budget.min(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, size, take).into_vec();
    Ok((picks, clipped))
}

/// Seeded random search on one fold: each sampled grid point is fitted on
/// the train split and scored on validation; the best is tested once.
pub fn hyperparam_search(
    data: &FoldData,
    base: &ModelConfig,
    cfg: &TrainConfig,
    budget: usize,
    fold: usize,
) -> Result<SearchOutcome> {
    let (picks, clipped_budget) = sample_grid(&cfg.grid, budget, derive_seed(cfg.seed, fold, 3))?;
    let mut trials = Vec::new();
    let mut best: Option<(usize, Fitted, TrainConfig)> = None;
    for (t, &gi) in picks.iter().enumerate() {
        let params = cfg.grid.point(gi);
        let mut mc = base.clone();
        params.apply(&mut mc);
        let mut tc = cfg.clone();
        tc.lr = params.lr;
        let fitted = fit(&data.train, &data.valid, &mc, &tc, fold)?;
        trials.push(Trial {
            trial: t,
            grid_index: gi,
            params,
            best_epoch: fitted.best_epoch,
            valid_auc: fitted.best_valid_auc,
        });
        if best
            .as_ref()
            .is_none_or(|b| fitted.best_valid_auc > b.1.best_valid_auc)
        {
            best = Some((t, fitted, tc));
        }
    }
    let (best, fitted, tc) = best.expect("budget >= 1");
    let (result, model, records) = finish_fold_with_records(fitted, &data.test, &tc, fold)?;
    Ok(SearchOutcome {
        trials,
        best,
        clipped_budget,
        result,
        model,
        records,
    })
}
