//! Declarative experiment files and the pipeline behind the command line.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs"
//!
//! [dataset]
//! dir = "data"
//! [dataset.synthetic]        # optional; used by gen-data
//! users = 500
//! [dataset.filter]
//! min_rating = 3
//!
//! [model]
//! d = 32
//! n_layers = 1
//! n_heads = 2
//! max_positions = 320
//! mlp_hidden = 64
//!
//! [[plan]]
//! name = "pretrain"
//! stage = "pretrain_patch"
//! batch_size = 16
//! lr = 0.005
//! k = 40
//!
//! [[plan]]
//! name = "pft_i"
//! stage = "finetune_pft_i"
//! batch_size = 16
//! lr = 0.005
//! k = 40
//! m = 5
//! init_checkpoint = "pretrain"
//!
//! [eval]
//! width = 20
//! [[eval.run]]
//! checkpoint = "pft_i"
//! mode = "pft_i"
//! k = [40]
//! m = [3, 5, 10]
//! ```

use crate::data::{
    generate_synthetic, read_catalog, read_interactions, write_catalog, write_interactions, FilterConfig,
    Split, SplitDataset, SplitRatio, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_case_csv, BeamConfig, EvalConfig, EvalReport};
use crate::model::{ModelConfig, CONFIG_VERSION};
use crate::patch::{LayoutConfig, LayoutMode};
use crate::tokenizer::{TokenizedCatalog, Vocabulary};
use crate::trainer::{self, RunOptions, RunRecord, Stage, TrainPlan, RUN_LOG, VOCAB_FILE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const PROVENANCE_FILE: &str = "provenance.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const PAIRS_FILE: &str = "equal_tokens.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub split: SplitRatio,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub mlp_hidden: usize,
}

impl ModelBlock {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            version: CONFIG_VERSION,
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_positions: self.max_positions,
            vocab_size,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

/// One sweep: a checkpoint evaluated over every (K, M, L) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    /// Plan name or checkpoint directory.
    pub checkpoint: String,
    pub mode: LayoutMode,
    pub k: Vec<usize>,
    /// Defaults to `[K]`.
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default)]
    pub l: Vec<usize>,
}

fn default_width() -> usize {
    20
}
fn yes() -> bool {
    true
}
fn test_split() -> Split {
    Split::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "yes")]
    pub length_normalize: bool,
    #[serde(default = "test_split")]
    pub split: Split,
    #[serde(default)]
    pub max_cases: Option<usize>,
    #[serde(default)]
    pub min_history: usize,
    #[serde(default)]
    pub cohorts: Vec<usize>,
    #[serde(default, rename = "run")]
    pub runs: Vec<EvalRun>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            width: default_width(),
            length_normalize: true,
            split: Split::Test,
            max_cases: None,
            min_history: 0,
            cohorts: Vec::new(),
            runs: Vec::new(),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelBlock,
    #[serde(default, rename = "plan")]
    pub plans: Vec<TrainPlan>,
    #[serde(default)]
    pub eval: EvalBlock,
}

impl ExperimentConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.dir = base.join(&cfg.dataset.dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.resolve();
        Ok(cfg)
    }

    /// Propagates the experiment seed into every plan and the generator.
    pub fn resolve(&mut self) {
        for p in &mut self.plans {
            p.seed = self.seed;
        }
        if let Some(s) = &mut self.dataset.synthetic {
            s.seed = self.seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn checkpoint_dir(&self, plan: &str) -> PathBuf {
        self.out_dir.join("checkpoints").join(plan)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    /// Resolves a plan name or directory to a checkpoint directory.
    pub fn locate(&self, reference: &str) -> PathBuf {
        if self.plans.iter().any(|p| p.name == reference) {
            self.checkpoint_dir(reference)
        } else {
            PathBuf::from(reference)
        }
    }

    /// Checks plan names, plan ordering and referenced checkpoints before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.plans {
            p.validate()?;
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Config(format!("duplicate plan name `{}`", p.name)));
            }
        }
        let mut earlier = BTreeSet::new();
        for p in &self.plans {
            if let Some(init) = &p.init_checkpoint {
                if !earlier.contains(init.as_str()) {
                    if self.plans.iter().any(|q| &q.name == init) {
                        return Err(Error::Config(format!(
                            "plan `{}` starts from `{init}`, which runs later",
                            p.name
                        )));
                    }
                    if !Path::new(init).join(crate::model::CONFIG_FILE).exists() {
                        return Err(Error::Config(format!(
                            "plan `{}` starts from `{init}`: no such plan or checkpoint",
                            p.name
                        )));
                    }
                }
            }
            earlier.insert(p.name.as_str());
        }
        self.model.config(1).validate()?;
        for r in &self.eval.runs {
            if r.k.is_empty() {
                return Err(Error::Config(format!("eval run on `{}` lists no K", r.checkpoint)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_sequence_length: f64,
    pub avg_title_tokens: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl DatasetStats {
    pub fn of(dataset: &SplitDataset, catalog: &TokenizedCatalog) -> Self {
        let users = dataset.users().count();
        let interactions = dataset.num_interactions();
        Self {
            users,
            items: dataset.catalog.len(),
            interactions,
            avg_sequence_length: interactions as f64 / users.max(1) as f64,
            avg_title_tokens: catalog.mean_title_tokens(),
            train: dataset.train.len(),
            validation: dataset.validation.len(),
            test: dataset.test.len(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "users                {}\nitems                {}\ninteractions         {}\navg sequence length  {:.2}\navg title tokens     {:.2}\nsplit                {} / {} / {}\n",
            self.users,
            self.items,
            self.interactions,
            self.avg_sequence_length,
            self.avg_title_tokens,
            self.train,
            self.validation,
            self.test
        )
    }
}

/// Writes the synthetic dataset and a provenance sidecar.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DatasetStats> {
    let syn = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("gen-data needs a [dataset.synthetic] block".into()))?;
    let data = generate_synthetic(syn)?;
    let dir = &cfg.dataset.dir;
    fs::create_dir_all(dir)?;
    write_catalog(&dir.join(CATALOG_FILE), &data.catalog)?;
    write_interactions(&dir.join(INTERACTIONS_FILE), &data.interactions)?;
    #[derive(Serialize)]
    struct Provenance<'a> {
        generator: &'a str,
        version: &'a str,
        synthetic: &'a SyntheticConfig,
    }
    fs::write(
        dir.join(PROVENANCE_FILE),
        toml::to_string(&Provenance {
            generator: "patchrec synthetic",
            version: env!("CARGO_PKG_VERSION"),
            synthetic: syn,
        })?,
    )?;
    let (ds, cat) = load_dataset(cfg)?;
    Ok(DatasetStats::of(&ds, &cat))
}

/// Reads, filters and splits the dataset files.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(SplitDataset, TokenizedCatalog)> {
    let dir = &cfg.dataset.dir;
    let (cat_path, int_path) = (dir.join(CATALOG_FILE), dir.join(INTERACTIONS_FILE));
    if !cat_path.exists() || !int_path.exists() {
        return Err(Error::Config(format!(
            "{} lacks {CATALOG_FILE} / {INTERACTIONS_FILE} (run gen-data or point dataset.dir at them)",
            dir.display()
        )));
    }
    let ds = SplitDataset::build(
        read_catalog(&cat_path)?,
        read_interactions(&int_path)?,
        &cfg.dataset.filter,
        cfg.dataset.split,
    )?;
    let cat = TokenizedCatalog::new(&ds.catalog)?;
    Ok((ds, cat))
}

/// Filters and splits the raw files, writing one TSV per split under `out_dir/split`.
pub fn ingest(cfg: &ExperimentConfig) -> Result<DatasetStats> {
    let (ds, cat) = load_dataset(cfg)?;
    let dir = cfg.out_dir.join("split");
    fs::create_dir_all(&dir)?;
    write_catalog(&dir.join(CATALOG_FILE), &ds.catalog)?;
    write_interactions(&dir.join("train.tsv"), &ds.train)?;
    write_interactions(&dir.join("validation.tsv"), &ds.validation)?;
    write_interactions(&dir.join("test.tsv"), &ds.test)?;
    cat.vocab.save(&dir.join(VOCAB_FILE))?;
    let stats = DatasetStats::of(&ds, &cat);
    fs::write(dir.join("stats.toml"), toml::to_string(&stats)?)?;
    Ok(stats)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Skip pre-training plans; dependants start from scratch.
    pub no_pretrain: bool,
    /// Continue interrupted plans and skip finished ones.
    pub resume: bool,
    /// Interrupt after this many steps of the given plan (testing aid).
    pub stop: Option<(String, u64)>,
}

fn finished(dir: &Path) -> bool {
    let Ok(text) = fs::read_to_string(dir.join("progress.toml")) else {
        return false;
    };
    #[derive(Deserialize)]
    struct P {
        step: u64,
        total_steps: u64,
    }
    toml::from_str::<P>(&text).is_ok_and(|p| p.step == p.total_steps)
}

/// Runs the plans in order. Returns one record per executed plan.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let (ds, cat) = load_dataset(cfg)?;
    let model = cfg.model.config(cat.vocab.len());
    let skipped: BTreeSet<&str> = cfg
        .plans
        .iter()
        .filter(|p| opts.no_pretrain && p.stage == Stage::PretrainPatch)
        .map(|p| p.name.as_str())
        .collect();
    let mut records = Vec::new();
    for plan in &cfg.plans {
        if skipped.contains(plan.name.as_str()) {
            log::info!("{}: skipped (--no-pretrain)", plan.name);
            continue;
        }
        let dir = cfg.checkpoint_dir(&plan.name);
        if opts.resume && finished(&dir) {
            log::info!("{}: already finished", plan.name);
            records.push(RunRecord::read_jsonl(&plan.name, &dir.join(RUN_LOG))?);
            continue;
        }
        let init = plan
            .init_checkpoint
            .as_deref()
            .filter(|i| !skipped.contains(i))
            .map(|i| cfg.locate(i));
        if let Some(i) = &init {
            check_vocab(i, &cat.vocab)?;
        }
        let state = trainer::initial_state(&model, plan.seed, init.as_deref())?;
        let run_opts = RunOptions {
            out_dir: Some(dir),
            stop_after: opts.stop.as_ref().filter(|(n, _)| n == &plan.name).map(|(_, s)| *s),
            resume: opts.resume,
        };
        let out = trainer::run(plan, state, &cat, &ds, &run_opts)?;
        let interrupted = run_opts.stop_after.is_some();
        records.push(out.record);
        if interrupted {
            log::warn!("{}: interrupted on request", plan.name);
            break;
        }
    }
    Ok(records)
}

/// Errors unless the checkpoint's vocabulary equals `vocab`.
pub fn check_vocab(dir: &Path, vocab: &Vocabulary) -> Result<()> {
    let path = dir.join(VOCAB_FILE);
    if !path.exists() {
        return Err(Error::VocabMismatch(format!("{} has no {VOCAB_FILE}", dir.display())));
    }
    if Vocabulary::load(&path)? != *vocab {
        return Err(Error::VocabMismatch(format!(
            "{} was trained on a different catalog vocabulary",
            dir.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub checkpoint: String,
    pub mode: LayoutMode,
    pub k: usize,
    pub m: usize,
    pub l: usize,
    pub cases: usize,
    pub cr: f64,
    pub cr_mean_of_ratios: f64,
    pub history_tokens: usize,
    pub prompt_positions: usize,
    pub hr_10: f64,
    pub ndcg_10: f64,
    pub hr_20: f64,
    pub ndcg_20: f64,
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("{}:{}:k{}_m{}_l{}", self.checkpoint, self.mode.name(), self.k, self.m, self.l)
    }

    fn from_report(checkpoint: &str, r: &EvalReport) -> Self {
        let l = &r.config.layout;
        Self {
            checkpoint: checkpoint.into(),
            mode: l.mode,
            k: l.k,
            m: l.m,
            l: l.l,
            cases: r.cases,
            cr: r.cr,
            cr_mean_of_ratios: r.cr_mean_of_ratios,
            history_tokens: r.history_tokens,
            prompt_positions: r.prompt_positions,
            hr_10: r.hr_10,
            ndcg_10: r.ndcg_10,
            hr_20: r.hr_20,
            ndcg_20: r.ndcg_20,
        }
    }
}

/// Layout grid of one eval run; combinations with M > K are dropped.
pub fn sweep_layouts(run: &EvalRun) -> Vec<LayoutConfig> {
    let mut out = Vec::new();
    for &k in &run.k {
        let ms = match run.mode {
            LayoutMode::PftI if !run.m.is_empty() => run.m.clone(),
            _ => vec![k],
        };
        let ls = match run.mode {
            LayoutMode::PftS | LayoutMode::PureSession if !run.l.is_empty() => run.l.clone(),
            _ => vec![1],
        };
        for &m in &ms {
            for &l in &ls {
                match LayoutConfig::new(run.mode, k, m, l) {
                    Ok(c) => out.push(c),
                    Err(e) => log::warn!("skipping K={k} M={m} L={l}: {e}"),
                }
            }
        }
    }
    out
}

/// Pairs every compressed row with the text row whose prompt-token total is nearest.
pub fn equal_token_pairs(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "compressed,text,compressed_tokens,text_tokens,compressed_cr,hr_20_diff,ndcg_20_diff\n",
    );
    let texts: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == LayoutMode::Text).collect();
    for r in rows.iter().filter(|r| r.mode != LayoutMode::Text) {
        let Some(t) = texts
            .iter()
            .min_by_key(|t| (t.prompt_positions.abs_diff(r.prompt_positions), t.k))
        else {
            continue;
        };
        writeln!(
            out,
            "{},{},{},{},{:.4},{:.6},{:.6}",
            r.label(),
            t.label(),
            r.prompt_positions,
            t.prompt_positions,
            r.cr,
            r.hr_20 - t.hr_20,
            r.ndcg_20 - t.ndcg_20
        )
        .expect("string write");
    }
    out
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "checkpoint,mode,k,m,l,cases,cr,cr_mean_of_ratios,history_tokens,prompt_positions,hr_10,ndcg_10,hr_20,ndcg_20\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.checkpoint,
            r.mode.name(),
            r.k,
            r.m,
            r.l,
            r.cases,
            r.cr,
            r.cr_mean_of_ratios,
            r.history_tokens,
            r.prompt_positions,
            r.hr_10,
            r.ndcg_10,
            r.hr_20,
            r.ndcg_20
        )
        .expect("string write");
    }
    out
}

/// Evaluates every configured sweep point, writing a report and per-case CSV
/// for each, plus the sweep and equal-token tables.
pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.eval.runs.is_empty() {
        return Err(Error::Config("no [[eval.run]] entries".into()));
    }
    let (ds, cat) = load_dataset(cfg)?;
    let out_dir = cfg.eval_dir();
    fs::create_dir_all(&out_dir)?;
    let mut rows = Vec::new();
    for run in &cfg.eval.runs {
        let dir = cfg.locate(&run.checkpoint);
        check_vocab(&dir, &cat.vocab)?;
        let state = crate::model::ModelState::load(&dir)?;
        for layout in sweep_layouts(run) {
            let ec = EvalConfig {
                layout,
                beam: BeamConfig {
                    width: cfg.eval.width,
                    length_normalize: cfg.eval.length_normalize,
                },
                split: cfg.eval.split,
                max_cases: cfg.eval.max_cases,
                min_history: cfg.eval.min_history,
                cohorts: cfg.eval.cohorts.clone(),
            };
            let (report, cases) = evaluate(&state, &cat, &ds, &ec)?;
            let row = SweepRow::from_report(&run.checkpoint, &report);
            let stem = row.label().replace([':', '/'], "_");
            report.save(&out_dir.join(format!("{stem}.toml")))?;
            write_case_csv(&out_dir.join(format!("{stem}.csv")), &cases)?;
            log::info!("{}: HR@20 {:.4} CR {:.2}", row.label(), row.hr_20, row.cr);
            rows.push(row);
        }
    }
    fs::write(out_dir.join(SWEEP_FILE), sweep_csv(&rows))?;
    fs::write(out_dir.join(PAIRS_FILE), equal_token_pairs(&rows))?;
    Ok(rows)
}

/// Plain-text summary of training logs and evaluation reports found under `out_dir`.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "# training").expect("string write");
    let mut any = false;
    for plan in &cfg.plans {
        let path = cfg.checkpoint_dir(&plan.name).join(RUN_LOG);
        if !path.exists() {
            writeln!(out, "{:<16} not trained", plan.name).expect("string write");
            continue;
        }
        any = true;
        let rec = RunRecord::read_jsonl(&plan.name, &path)?;
        let n = rec.steps.len();
        let tail = &rec.steps[n.saturating_sub(10)..];
        let tail_loss = tail.iter().map(|s| s.loss).sum::<f64>() / tail.len().max(1) as f64;
        let tokens: usize = rec.steps.iter().map(|s| s.tokens).sum();
        let secs = rec.steps.iter().map(|s| s.wall_ms).sum::<u64>() as f64 / 1000.0;
        writeln!(
            out,
            "{:<16} {:<16} steps {:>6}  final loss {:.4}  tokens {:>10}  {:.1}s",
            plan.name,
            format!("{:?}", plan.stage),
            n,
            tail_loss,
            tokens,
            secs
        )
        .expect("string write");
    }
    let sweep = cfg.eval_dir().join(SWEEP_FILE);
    writeln!(out, "\n# evaluation").expect("string write");
    if sweep.exists() {
        any = true;
        out.push_str(&fs::read_to_string(&sweep)?);
        let pairs = cfg.eval_dir().join(PAIRS_FILE);
        if pairs.exists() {
            writeln!(out, "\n# equal-token comparison").expect("string write");
            out.push_str(&fs::read_to_string(pairs)?);
        }
    } else {
        writeln!(out, "no evaluation results").expect("string write");
    }
    if !any {
        return Err(Error::Config(format!("nothing to report under {}", cfg.out_dir.display())));
    }
    Ok(out)
}
