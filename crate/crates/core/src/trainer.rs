//! Stage-wise training: patch pre-training, patch fine-tuning and the
//! baseline/ablation regimes, with resumable checkpoints.

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{Case, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, BeamConfig, EvalConfig};
use crate::model::{bind, layout_loss, ModelConfig, ModelState};
use crate::optim::{LrSchedule, OptimizerState};
use crate::patch::{
    augment_dropout, augment_pretraining, build_layout, mix_seed, CompressionSchedule, LayoutConfig,
    LayoutMode, PromptLayout,
};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizedCatalog;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RUN_LOG: &str = "run.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
const PROGRESS_FILE: &str = "progress.toml";
const OPTIM_DIR: &str = "optimizer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainPatch,
    FinetunePftI,
    FinetunePftS,
    BaselineText,
    PureItem,
    PureSession,
    DropoutAblation,
}

impl Stage {
    /// Layout used for the examples before any augmentation.
    pub fn layout_mode(self) -> LayoutMode {
        match self {
            Stage::PretrainPatch | Stage::DropoutAblation | Stage::BaselineText => LayoutMode::Text,
            Stage::FinetunePftI => LayoutMode::PftI,
            Stage::FinetunePftS => LayoutMode::PftS,
            Stage::PureItem => LayoutMode::PureItem,
            Stage::PureSession => LayoutMode::PureSession,
        }
    }

    /// Stages that pair every example with a scheduled copy.
    pub fn is_pretraining(self) -> bool {
        matches!(self, Stage::PretrainPatch | Stage::DropoutAblation)
    }
}

fn one() -> usize {
    1
}
fn default_warmup() -> f64 {
    0.05
}
fn default_validation_cases() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub name: String,
    pub stage: Stage,
    #[serde(default = "one")]
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    pub k: usize,
    /// Recent items kept as text under PFT-I.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "one")]
    pub l: usize,
    /// Earlier plan name or checkpoint directory to start from.
    #[serde(default)]
    pub init_checkpoint: Option<String>,
    /// Keep only each user's latest targets.
    #[serde(default)]
    pub max_targets_per_user: Option<usize>,
    /// Validation HR@10 every this many steps; 0 disables.
    #[serde(default)]
    pub validate_every: u64,
    #[serde(default = "default_validation_cases")]
    pub validation_cases: usize,
    /// Save a resumable checkpoint every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainPlan {
    pub fn new(name: &str, stage: Stage, k: usize) -> Self {
        Self {
            name: name.into(),
            stage,
            epochs: 1,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: default_warmup(),
            seed: 0,
            k,
            m: None,
            l: 1,
            init_checkpoint: None,
            max_targets_per_user: None,
            validate_every: 0,
            validation_cases: default_validation_cases(),
            checkpoint_every: 0,
        }
    }

    pub fn layout(&self) -> Result<LayoutConfig> {
        LayoutConfig::new(self.stage.layout_mode(), self.k, self.m.unwrap_or(self.k), self.l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("plan name `{}` is not a plain name", self.name)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("plan `{}`: epochs and batch_size must be positive", self.name)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("plan `{}`: bad lr or warmup_ratio", self.name)));
        }
        if self.stage == Stage::FinetunePftI && self.m.is_none() {
            return Err(Error::Config(format!("plan `{}`: PFT-I needs `m`", self.name)));
        }
        self.layout().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total_steps: u64,
    pub loss: f64,
    /// Compression probability of the pre-training copies.
    pub p: Option<f64>,
    pub lr: f64,
    pub examples: usize,
    /// Model positions processed in this step.
    pub tokens: usize,
    pub wall_ms: u64,
    pub val_hr_10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan: String,
    pub steps: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read_jsonl(plan: &str, path: &Path) -> Result<Self> {
        let steps = fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            plan: plan.into(),
            steps,
            checkpoint: None,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub record: RunRecord,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint directory for this plan.
    pub out_dir: Option<PathBuf>,
    /// Stop (as if interrupted) after this many steps in total.
    pub stop_after: Option<u64>,
    /// Continue from the progress saved in `out_dir`, if any.
    pub resume: bool,
}

/// One training example: stable id, source case and its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub case: Case,
    pub layout: PromptLayout,
}

/// Builds the layouts of every training case; errors name the longest one
/// when it does not fit the model.
pub fn training_examples(
    plan: &TrainPlan,
    catalog: &TokenizedCatalog,
    dataset: &SplitDataset,
    max_positions: usize,
) -> Result<Vec<Example>> {
    let cfg = plan.layout()?;
    let cases = dataset.cases_capped(Split::Train, plan.max_targets_per_user.unwrap_or(usize::MAX));
    let mut out = Vec::with_capacity(cases.len());
    for (i, case) in cases.into_iter().enumerate() {
        let history = dataset.truncate_history(case.user_id, case.timestamp, cfg.k)?;
        let layout = build_layout(catalog, &history, Some(case.item_id), &cfg)?;
        out.push(Example {
            id: i as u64,
            case,
            layout,
        });
    }
    if let Some(worst) = out.iter().max_by_key(|e| e.layout.model_positions()) {
        let positions = worst.layout.model_positions();
        if positions > max_positions {
            return Err(Error::LayoutOffender {
                user: worst.case.user_id,
                item: worst.case.item_id,
                positions,
                max: max_positions,
            });
        }
    }
    Ok(out)
}

/// Fresh weights, or the checkpoint in `init` after a compatibility check.
pub fn initial_state(config: &ModelConfig, seed: u64, init: Option<&Path>) -> Result<ModelState> {
    match init {
        None => ModelState::init(config.clone(), mix_seed(&[seed, 0x1417])),
        Some(dir) => {
            let s = ModelState::load(dir)?;
            if s.config != *config {
                return Err(Error::Config(format!(
                    "checkpoint {} has model config {:?}, expected {:?}",
                    dir.display(),
                    s.config,
                    config
                )));
            }
            Ok(s)
        }
    }
}

/// Mean loss over `layouts`, accumulating `1/n`-scaled gradients into the
/// parameters. Returns the loss and the positions processed.
pub fn accumulate_batch(state: &mut ModelState, layouts: &[&PromptLayout]) -> Result<(f64, usize)> {
    state.zero_grads();
    let scale = 1.0 / layouts.len() as f64;
    let mut total = 0.0;
    let mut tokens = 0;
    for layout in layouts {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, state);
        let (loss, _) = layout_loss(&mut tape, state, &vars, layout)?;
        total += tape.scalar(loss);
        tokens += layout.model_positions();
        let grads = tape.backward(loss);
        for (p, v) in state.params.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(*v) {
                let acc = p.grad.as_mut().expect("zeroed");
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }
    Ok((total * scale, tokens))
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xE90C, epoch])));
    order
}

#[derive(Serialize, Deserialize)]
struct Progress {
    step: u64,
    total_steps: u64,
}

fn save_progress(
    dir: &Path,
    state: &ModelState,
    opt: &OptimizerState,
    record: &RunRecord,
    catalog: &TokenizedCatalog,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    state.save(dir)?;
    catalog.vocab.save(&dir.join(VOCAB_FILE))?;
    let mut moments: Vec<(String, Tensor)> = Vec::new();
    for (i, name) in state.names.iter().enumerate() {
        let shape = state.params[i].shape.clone();
        moments.push((format!("m.{name}"), Tensor::new(shape.clone(), opt.first_moment[i].clone())?));
        moments.push((format!("v.{name}"), Tensor::new(shape, opt.second_moment[i].clone())?));
    }
    let refs: Vec<(&str, &Tensor)> = moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let odir = dir.join(OPTIM_DIR);
    fs::create_dir_all(&odir)?;
    checkpoint::save_tensors(&odir, &refs)?;
    fs::write(
        dir.join(PROGRESS_FILE),
        toml::to_string(&Progress {
            step: opt.step,
            total_steps: opt.schedule.total_steps,
        })?,
    )?;
    let mut f = fs::File::create(dir.join(RUN_LOG))?;
    f.write_all(record.to_jsonl()?.as_bytes())?;
    Ok(())
}

fn load_progress(dir: &Path, plan: &str, opt: &mut OptimizerState) -> Result<Option<(ModelState, RunRecord)>> {
    let path = dir.join(PROGRESS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let progress: Progress = toml::from_str(&fs::read_to_string(path)?)?;
    if progress.total_steps != opt.schedule.total_steps {
        return Err(Error::Corrupt(format!(
            "saved run has {} total steps, plan has {}",
            progress.total_steps, opt.schedule.total_steps
        )));
    }
    let state = ModelState::load(dir)?;
    let moments = checkpoint::load_tensors(&dir.join(OPTIM_DIR))?;
    if moments.len() != 2 * state.params.len() {
        return Err(Error::Corrupt("optimizer moments do not match the model".into()));
    }
    for (i, pair) in moments.chunks(2).enumerate() {
        opt.first_moment[i] = pair[0].1.data.clone();
        opt.second_moment[i] = pair[1].1.data.clone();
    }
    opt.step = progress.step;
    let mut record = RunRecord::read_jsonl(plan, &dir.join(RUN_LOG))?;
    record.steps.truncate(progress.step as usize);
    Ok(Some((state, record)))
}

pub fn run_pretrain(
    plan: &TrainPlan,
    init: ModelState,
    catalog: &TokenizedCatalog,
    dataset: &SplitDataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if !plan.stage.is_pretraining() {
        return Err(Error::Config(format!("plan `{}` is not a pre-training stage", plan.name)));
    }
    run(plan, init, catalog, dataset, opts)
}

pub fn run_finetune(
    plan: &TrainPlan,
    init: ModelState,
    catalog: &TokenizedCatalog,
    dataset: &SplitDataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if plan.stage.is_pretraining() {
        return Err(Error::Config(format!("plan `{}` is not a fine-tuning stage", plan.name)));
    }
    run(plan, init, catalog, dataset, opts)
}

/// Runs any stage.
pub fn run(
    plan: &TrainPlan,
    init: ModelState,
    catalog: &TokenizedCatalog,
    dataset: &SplitDataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if init.config.vocab_size != catalog.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model has {} tokens, catalog vocabulary {}",
            init.config.vocab_size,
            catalog.vocab.len()
        )));
    }
    let examples = training_examples(plan, catalog, dataset, init.config.max_positions)?;
    let n = examples.len();
    if n < plan.batch_size {
        return Err(Error::TooSmall(format!(
            "{n} training examples for batch size {}",
            plan.batch_size
        )));
    }
    let per_epoch = n.div_ceil(plan.batch_size) as u64;
    let total = per_epoch * plan.epochs as u64;
    let schedule = LrSchedule {
        peak_lr: plan.lr,
        warmup_ratio: plan.warmup_ratio,
        total_steps: total,
        cosine: true,
    };
    let mut state = init;
    let mut opt = OptimizerState::new(schedule, &state.params);
    let mut record = RunRecord {
        plan: plan.name.clone(),
        ..Default::default()
    };
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        if let Some((s, r)) = load_progress(dir, &plan.name, &mut opt)? {
            log::info!("{}: resuming at step {}/{total}", plan.name, opt.step);
            state = s;
            record = r;
        }
    }
    log::info!(
        "{}: {n} examples, {total} steps, {} parameters",
        plan.name,
        state.num_parameters()
    );
    let val_cfg = EvalConfig {
        split: Split::Validation,
        max_cases: Some(plan.validation_cases),
        beam: BeamConfig::default(),
        ..EvalConfig::new(plan.layout()?)
    };
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while opt.step < total {
        if opts.stop_after.is_some_and(|s| opt.step >= s) {
            break;
        }
        let started = Instant::now();
        let step = opt.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(n, plan.seed, epoch);
            order_epoch = epoch;
        }
        let b = (step % per_epoch) as usize * plan.batch_size;
        let batch: Vec<(u64, PromptLayout)> = order[b..(b + plan.batch_size).min(n)]
            .iter()
            .map(|&i| (examples[i].id, examples[i].layout.clone()))
            .collect();
        let (p, layouts) = if plan.stage.is_pretraining() {
            let sched = CompressionSchedule::new(total, step)?;
            let aug = if plan.stage == Stage::PretrainPatch {
                augment_pretraining(&batch, &sched, plan.seed)
            } else {
                augment_dropout(&batch, &sched, plan.seed)
            };
            (Some(sched.p()), aug.all().cloned().collect::<Vec<_>>())
        } else {
            (None, batch.into_iter().map(|(_, l)| l).collect())
        };
        let refs: Vec<&PromptLayout> = layouts.iter().collect();
        let (loss, tokens) = accumulate_batch(&mut state, &refs)?;
        let lr = opt.current_lr();
        opt.step(&state.names, &mut state.params)?;
        let val_hr_10 = if plan.validate_every > 0 && opt.step % plan.validate_every == 0 {
            match evaluate(&state, catalog, dataset, &val_cfg) {
                Ok((r, _)) => Some(r.hr_10),
                Err(Error::TooSmall(msg)) => {
                    log::warn!("validation skipped: {msg}");
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        record.steps.push(StepRecord {
            step,
            total_steps: total,
            loss,
            p,
            lr,
            examples: layouts.len(),
            tokens,
            wall_ms: started.elapsed().as_millis() as u64,
            val_hr_10,
        });
        log::debug!("{} step {step}/{total} loss {loss:.4}", plan.name);
        if let Some(dir) = &opts.out_dir {
            if plan.checkpoint_every > 0 && opt.step % plan.checkpoint_every == 0 && opt.step < total {
                save_progress(dir, &state, &opt, &record, catalog)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_progress(dir, &state, &opt, &record, catalog)?;
        record.checkpoint = Some(dir.clone());
    }
    if let Some(last) = record.steps.last() {
        log::info!("{}: final loss {:.4}", plan.name, last.loss);
    }
    Ok(TrainOutcome { state, record })
}
