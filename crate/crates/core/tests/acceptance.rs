//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any failure.

use patchrec_core::autodiff::Tape;
use patchrec_core::data::{Catalog, Item, ItemId, SplitDataset, SplitRatio, SyntheticConfig};
use patchrec_core::eval::{beam_search, hit_ratio, ndcg, BeamConfig, EvalReport, RankedList};
use patchrec_core::experiment::{self, ExperimentConfig, SweepRow, TrainOptions};
use patchrec_core::model::{bind, embed_traced, layout_loss, loss, ModelConfig, ModelState, CONFIG_VERSION, POS_EMB, TOK_EMB};
use patchrec_core::patch::{
    augment_pretraining, build_layout, compression_ratio, layout_pft_s, layout_text, CompressionSchedule,
    LayoutConfig, LayoutMode, PromptLayout, Segment,
};
use patchrec_core::tokenizer::{TokenId, TokenizedCatalog};
use patchrec_core::trainer::{initial_state, run_pretrain, training_examples, RunOptions, Stage, TrainPlan};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn model_config(vocab: usize, d: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        version: CONFIG_VERSION,
        d,
        n_layers: 1,
        n_heads: 2,
        max_positions,
        vocab_size: vocab,
        mlp_hidden: 2 * d,
    }
}

/// `n` items whose titles draw 1..=max_words words from a pool of `pool` words.
fn random_catalog(rng: &mut ChaCha8Rng, n: usize, pool: usize, max_words: usize) -> TokenizedCatalog {
    let items = (1..=n as u64)
        .map(|id| {
            let len = rng.gen_range(1..=max_words);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..pool))).collect();
            Item {
                item_id: id,
                title: words.join(" "),
            }
        })
        .collect();
    TokenizedCatalog::new(&Catalog::new(items).unwrap()).unwrap()
}

fn random_history(rng: &mut ChaCha8Rng, items: usize, len: usize) -> Vec<ItemId> {
    (0..len).map(|_| rng.gen_range(1..=items as u64)).collect()
}

fn tok_row(state: &ModelState, t: TokenId) -> &[f64] {
    state.params[TOK_EMB].row(t as usize)
}

fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_fidelity() -> Check {
    // 15 items with three fresh words each: 45 words plus 5 specials
    let items = (0..15)
        .map(|i| Item {
            item_id: i + 1,
            title: format!("a{i} b{i} c{i}"),
        })
        .collect();
    let cat = TokenizedCatalog::new(&Catalog::new(items).map_err(err)?).map_err(err)?;
    ensure!(cat.vocab.len() == 50, "vocab {}", cat.vocab.len());
    let state = ModelState::init(model_config(50, 8, 32), 21).map_err(err)?;
    // groups of two from the recent end: session, item patches, text
    let layout = layout_pft_s(&cat, &[3, 7, 1, 9, 4, 12], Some(5), 6, 2).map_err(err)?;
    ensure!(layout.count_kind(|s| matches!(s, Segment::ItemPatch { .. })) > 0, "no item patch");
    ensure!(layout.count_kind(|s| matches!(s, Segment::SessionPatch { .. })) > 0, "no session patch");

    let mut tape = Tape::new();
    let vars = bind(&mut tape, &state);
    let (root, _) = layout_loss(&mut tape, &state, &vars, &layout).map_err(err)?;
    let g = tape.backward(root);
    let h = 1e-5;
    let mut probe = state.clone();
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (pi, &v) in vars.iter().enumerate() {
        let grad = g.get_or_zero(&tape, v);
        for i in 0..grad.len() {
            let orig = probe.params[pi].data[i];
            probe.params[pi].data[i] = orig + h;
            let up = loss(&probe, &layout).map_err(err)?;
            probe.params[pi].data[i] = orig - h;
            let down = loss(&probe, &layout).map_err(err)?;
            probe.params[pi].data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4));
            count += 1;
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:.3e} over {count} parameters");
    Ok(format!("max relative error {worst:.2e} over {count} parameters"))
}

fn pooling_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut worst, mut sessions, mut nested_differs) = (0.0f64, 0usize, 0usize);
    for case in 0..100 {
        let cat = random_catalog(&mut rng, 30, 40, 5);
        let state = ModelState::init(model_config(cat.vocab.len(), 8, 128), case).map_err(err)?;
        let len = rng.gen_range(2..=20);
        let hist = random_history(&mut rng, 30, len);
        let l = rng.gen_range(1..=4);
        let layout = layout_pft_s(&cat, &hist, None, hist.len(), l).map_err(err)?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &state);
        let trace = embed_traced(&mut tape, &state, &vars, &layout, false).map_err(err)?;
        let x = tape.value(trace.x).to_vec();
        let d = state.config.d;
        let history: Vec<&Segment> = layout.history_segments().collect();
        let patches: Vec<&&Segment> = history.iter().filter(|s| !matches!(s, Segment::Raw { .. })).collect();
        ensure!(patches.len() == trace.patches.len(), "patch count");
        for (seg, p) in patches.iter().zip(&trace.patches) {
            let titles: Vec<&Vec<TokenId>> = match seg {
                Segment::ItemPatch { tokens, .. } => vec![tokens],
                Segment::SessionPatch { items } => items.iter().map(|(_, t)| t).collect(),
                _ => unreachable!(),
            };
            let item_means: Vec<Vec<f64>> = titles
                .iter()
                .map(|t| mean_rows(&t.iter().map(|&id| tok_row(&state, id)).collect::<Vec<_>>()))
                .collect();
            for (pool, brute) in p.item_pools.iter().zip(&item_means) {
                worst = worst.max(max_abs_diff(tape.value(*pool), brute));
            }
            let brute = mean_rows(&item_means.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
            worst = worst.max(max_abs_diff(tape.value(p.pooled), &brute));
            // the model input at that position is the pooled vector plus its positional row
            let pe = state.params[POS_EMB].row(p.position);
            let placed: Vec<f64> = brute.iter().zip(pe).map(|(a, b)| a + b).collect();
            worst = worst.max(max_abs_diff(&x[p.position * d..(p.position + 1) * d], &placed));
            if let Segment::SessionPatch { items } = seg {
                sessions += 1;
                let lens: Vec<usize> = items.iter().map(|(_, t)| t.len()).collect();
                if lens.iter().any(|&n| n != lens[0]) {
                    let flat: Vec<&[f64]> = titles.iter().flat_map(|t| t.iter().map(|&id| tok_row(&state, id))).collect();
                    if max_abs_diff(tape.value(p.pooled), &mean_rows(&flat)) > 1e-9 {
                        nested_differs += 1;
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:.3e}");
    ensure!(nested_differs > 0, "no session with unequal title lengths was exercised");
    Ok(format!(
        "max deviation {worst:.1e}; {sessions} sessions, {nested_differs} with unequal titles where mean-of-means differs from the flat token mean"
    ))
}

fn patch_gradient_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut worst, mut rows_checked) = (0.0f64, 0usize);
    for case in 0..30 {
        let cat = random_catalog(&mut rng, 25, 30, 5);
        let state = ModelState::init(model_config(cat.vocab.len(), 8, 160), 100 + case).map_err(err)?;
        let len = rng.gen_range(3..=16);
        let hist = random_history(&mut rng, 25, len);
        let mode = [LayoutMode::PftI, LayoutMode::PftS, LayoutMode::PureItem, LayoutMode::PureSession][case as usize % 4];
        let cfg = LayoutConfig::new(mode, hist.len(), rng.gen_range(1..=2), rng.gen_range(1..=3)).map_err(err)?;
        let target = rng.gen_range(1..=25);
        let layout = build_layout(&cat, &hist, Some(target), &cfg).map_err(err)?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &state);
        let (root, trace) = layout_loss(&mut tape, &state, &vars, &layout).map_err(err)?;
        let g = tape.backward(root);
        let d = state.config.d;
        for p in &trace.patches {
            let pooled = g.get_or_zero(&tape, p.pooled);
            let k = p.item_pools.len() as f64;
            for (rows, pool) in p.token_rows.iter().zip(&p.item_pools) {
                let gz = g.get_or_zero(&tape, *pool);
                // a session spreads its gradient evenly over its items
                for j in 0..d {
                    worst = worst.max((gz[j] - pooled[j] / k).abs());
                }
                let gr = g.get_or_zero(&tape, *rows);
                let n = gr.len() / d;
                for r in 0..n {
                    for j in 0..d {
                        worst = worst.max((gr[r * d + j] - gz[j] / n as f64).abs());
                    }
                    rows_checked += 1;
                }
            }
        }
    }
    ensure!(rows_checked > 0, "no patches exercised");
    ensure!(worst <= 1e-10, "max deviation {worst:.3e}");
    Ok(format!("max deviation {worst:.1e} over {rows_checked} pooled token rows"))
}

fn decoding_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    // short shared word pool: many common prefixes and titles that prefix others
    let cat = random_catalog(&mut rng, 50, 12, 4);
    let valid: std::collections::BTreeSet<ItemId> = cat.titles().keys().copied().collect();
    let (mut outputs, mut bad) = (0usize, 0usize);
    for s in 0..1000u64 {
        let mut state = ModelState::init(model_config(cat.vocab.len(), 8, 96), 1000 + s).map_err(err)?;
        // sharpen the output distribution so unconstrained decoding would wander off the catalog
        let scale = rng.gen_range(0.5..20.0);
        state.params[TOK_EMB].data.iter_mut().for_each(|v| *v *= scale);
        let len = rng.gen_range(1..=8);
        let hist = random_history(&mut rng, 50, len);
        let layout = layout_text(&cat, &hist, None, 8).map_err(err)?;
        let width = rng.gen_range(1..=10);
        let ranked = beam_search(&state, &cat, &layout, &BeamConfig { width, length_normalize: s % 2 == 0 })
            .map_err(err)?;
        let ids = ranked.ids();
        let distinct: std::collections::BTreeSet<_> = ids.iter().collect();
        outputs += ids.len();
        bad += ids.iter().filter(|id| !valid.contains(id)).count();
        ensure!(!ids.is_empty() && ids.len() <= width, "state {s}: {} outputs for width {width}", ids.len());
        ensure!(distinct.len() == ids.len(), "state {s}: repeated item");
    }
    ensure!(bad == 0, "{bad} invalid outputs");
    Ok(format!("1000 states, {outputs} ranked outputs, all valid catalog titles"))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut lists = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..500 {
        let mut ids: Vec<ItemId> = (1..=80).collect();
        ids.shuffle(&mut rng);
        ids.truncate(rng.gen_range(0..=40));
        lists.push(ids);
        truths.push(rng.gen_range(1..=80));
    }
    let ranked: Vec<RankedList> = lists
        .iter()
        .map(|l| RankedList {
            items: l.iter().enumerate().map(|(i, &id)| (id, 1.0 / (i + 1) as f64)).collect(),
        })
        .collect();
    for k in [1, 3, 5, 10, 20, 40] {
        let (mut hits, mut gain) = (0usize, 0.0);
        for (l, t) in lists.iter().zip(&truths) {
            if let Some(pos) = l.iter().take(k).position(|x| x == t) {
                hits += 1;
                gain += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        let n = lists.len() as f64;
        let hr = hit_ratio(&ranked, &truths, k).map_err(err)?;
        let nd = ndcg(&ranked, &truths, k).map_err(err)?;
        ensure!(hr == hits as f64 / n, "HR@{k} {hr} vs {}", hits as f64 / n);
        ensure!(nd == gain / n, "NDCG@{k} {nd} vs {}", gain / n);
    }
    let spot = RankedList {
        items: vec![(7, 0.9), (8, 0.8), (9, 0.7)],
    };
    ensure!(ndcg(std::slice::from_ref(&spot), &[9], 10).map_err(err)? == 0.5, "rank 3 NDCG@10 != 0.5");
    ensure!(ndcg(std::slice::from_ref(&spot), &[7], 10).map_err(err)? == 1.0, "rank 1 NDCG@10 != 1");
    ensure!(hit_ratio(std::slice::from_ref(&spot), &[9], 2).map_err(err)? == 0.0, "rank 3 HR@2 != 0");
    Ok("500 lists at K in {1,3,5,10,20,40} exact; rank 3 at K=10 gives 0.5".into())
}

/// Independent position count from the history alone.
fn expected_counts(cat: &TokenizedCatalog, hist: &[ItemId], cfg: &LayoutConfig) -> (usize, usize, usize) {
    let kept = &hist[hist.len().saturating_sub(cfg.k)..];
    let lens: Vec<usize> = kept.iter().map(|&i| cat.title(i).unwrap().len()).collect();
    let n = lens.len();
    let tokens: usize = lens.iter().sum();
    let groups = n.div_ceil(cfg.l);
    let (positions, entries) = match cfg.mode {
        LayoutMode::Text => (tokens, n),
        LayoutMode::PureItem => (n, n),
        LayoutMode::PftI => {
            let patched = n.saturating_sub(cfg.m);
            (patched + lens[patched..].iter().sum::<usize>(), n)
        }
        LayoutMode::PureSession => (groups, groups),
        LayoutMode::PftS => {
            // full groups of L from the recent end; only the oldest may be short
            let text_items = n.min(cfg.l);
            let item_patches = (n - text_items).min(cfg.l);
            let rest = n - text_items - item_patches;
            let sessions = rest.div_ceil(cfg.l);
            let text_tokens: usize = lens[n - text_items..].iter().sum();
            (sessions + item_patches + text_tokens, sessions + item_patches + text_items)
        }
    };
    // BOS, one SEP between consecutive entries, ANS
    (tokens, positions, positions + entries + 1)
}

fn accounting_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let modes = [LayoutMode::Text, LayoutMode::PureItem, LayoutMode::PureSession, LayoutMode::PftI, LayoutMode::PftS];
    let mut text_cr = Vec::new();
    for case in 0..100 {
        let cat = random_catalog(&mut rng, 40, 60, 6);
        let len = rng.gen_range(1..=50);
        let hist = random_history(&mut rng, 40, len);
        let mode = modes[case % modes.len()];
        let k = rng.gen_range(1..=45);
        let m = rng.gen_range(0..=k.min(6));
        let cfg = LayoutConfig::new(mode, k, m, rng.gen_range(1..=5)).map_err(err)?;
        let target = rng.gen_range(1..=40);
        let layout = build_layout(&cat, &hist, Some(target), &cfg).map_err(err)?;
        let text = build_layout(&cat, &hist, Some(target), &LayoutConfig::text(cfg.k)).map_err(err)?;
        let (tokens, positions, prompt) = expected_counts(&cat, &hist, &cfg);
        ensure!(layout.history_title_tokens() == tokens, "case {case}: tokens {} vs {tokens}", layout.history_title_tokens());
        ensure!(layout.history_positions() == positions, "case {case} {mode:?}: positions {} vs {positions}", layout.history_positions());
        ensure!(layout.positions() == prompt, "case {case} {mode:?}: prompt {} vs {prompt}", layout.positions());
        let target_len = cat.title(target).unwrap().len() + 1;
        ensure!(layout.model_positions() == prompt + target_len - 1, "case {case}: model positions");
        let cr = compression_ratio(&text, &layout).map_err(err)?;
        ensure!(cr == tokens as f64 / positions as f64, "case {case}: CR {cr}");
        text_cr.push(compression_ratio(&text, &text).map_err(err)?);
    }
    ensure!(text_cr.iter().all(|&c| c == 1.0), "text CR differs from 1");
    Ok("100 layouts over all five modes match; text CR = 1.00 on all".into())
}

fn small_dataset(seed: u64) -> (SplitDataset, TokenizedCatalog) {
    let syn = SyntheticConfig {
        users: 40,
        items: 30,
        interactions_per_user: 20,
        genres: 5,
        seed,
        ..Default::default()
    };
    let data = patchrec_core::data::generate_synthetic(&syn).unwrap();
    let ds = SplitDataset::build(
        data.catalog,
        data.interactions,
        &Default::default(),
        SplitRatio { train: 8, validation: 1, test: 1 },
    )
    .unwrap();
    let cat = TokenizedCatalog::new(&ds.catalog).unwrap();
    (ds, cat)
}

fn schedule_fidelity() -> Check {
    let (ds, cat) = small_dataset(27);
    let mut plan = TrainPlan::new("sched", Stage::PretrainPatch, 5);
    plan.batch_size = 3;
    plan.epochs = 2;
    plan.max_targets_per_user = Some(4);
    let state = initial_state(&model_config(cat.vocab.len(), 8, 64), 1, None).map_err(err)?;
    let out = run_pretrain(&plan, state, &cat, &ds, &RunOptions::default()).map_err(err)?;
    let total = out.record.steps.len() as u64;
    ensure!(total > 0, "no steps");
    for (tau, s) in out.record.steps.iter().enumerate() {
        let p = s.p.ok_or("missing p")?;
        ensure!(s.total_steps == total && s.step == tau as u64, "step numbering at {tau}");
        ensure!(p == tau as f64 / total as f64, "step {tau}: p {p}");
    }

    let examples = training_examples(&plan, &cat, &ds, 64).map_err(err)?;
    let batch: Vec<(u64, PromptLayout)> = examples.iter().map(|e| (e.id, e.layout.clone())).collect();
    let zero = augment_pretraining(&batch, &CompressionSchedule::new(10, 0).map_err(err)?, 3);
    ensure!(zero.copies == zero.originals, "p=0 copies differ from raw");
    let one = augment_pretraining(&batch, &CompressionSchedule::new(10, 10).map_err(err)?, 3);
    for (c, o) in one.copies.iter().zip(&one.originals) {
        ensure!(c.history_segments().all(|s| matches!(s, Segment::ItemPatch { .. })), "p=1 copy keeps raw items");
        ensure!(c.source_items() == o.source_items() && c.target == o.target, "p=1 copy changed the example");
    }
    Ok(format!(
        "p = tau/T exact over {total} steps; {} copies checked at p=0 and p=1",
        batch.len()
    ))
}

const DETERMINISM: &str = r#"
seed = 31
out_dir = "out"

[dataset]
dir = "data"
[dataset.synthetic]
users = 80
items = 60
interactions_per_user = 30
genres = 6

[model]
d = 16
n_layers = 1
n_heads = 2
max_positions = 160
mlp_hidden = 32

[[plan]]
name = "pretrain"
stage = "pretrain_patch"
batch_size = 8
lr = 0.005
k = 20
max_targets_per_user = 3

[[plan]]
name = "pft_i"
stage = "finetune_pft_i"
batch_size = 8
lr = 0.005
k = 20
m = 5
max_targets_per_user = 3
init_checkpoint = "pretrain"

[eval]
[[eval.run]]
checkpoint = "pft_i"
mode = "pft_i"
k = [20]
m = [5]
"#;

fn run_pipeline(dir: &Path, text: &str, opts: &TrainOptions) -> Result<(ExperimentConfig, Vec<SweepRow>), String> {
    let path = dir.join("exp.toml");
    fs::write(&path, text).map_err(err)?;
    let cfg = ExperimentConfig::load(&path).map_err(err)?;
    experiment::gen_data(&cfg).map_err(err)?;
    experiment::train(&cfg, opts).map_err(err)?;
    let rows = experiment::eval(&cfg).map_err(err)?;
    Ok((cfg, rows))
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let (ca, _) = run_pipeline(a.path(), DETERMINISM, &TrainOptions::default())?;
    let (cb, _) = run_pipeline(b.path(), DETERMINISM, &TrainOptions::default())?;
    let mut compared = 0;
    for plan in ["pretrain", "pft_i"] {
        let fa = files_under(&ca.checkpoint_dir(plan));
        let fb = files_under(&cb.checkpoint_dir(plan));
        // the run log carries wall-clock timings; everything else must match byte for byte
        let strip = |f: Vec<(String, Vec<u8>)>| f.into_iter().filter(|(n, _)| n != "run.jsonl").collect::<Vec<_>>();
        let (fa, fb) = (strip(fa), strip(fb));
        ensure!(fa == fb, "checkpoint `{plan}` differs");
        compared += fa.len();
        let sa = ModelState::load(&ca.checkpoint_dir(plan)).map_err(err)?;
        let sb = ModelState::load(&cb.checkpoint_dir(plan)).map_err(err)?;
        ensure!(sa.bit_equal(&sb), "checkpoint `{plan}` parameters differ");
    }
    let ea = files_under(&ca.eval_dir());
    let eb = files_under(&cb.eval_dir());
    ensure!(ea == eb, "evaluation outputs differ");
    Ok(format!("{compared} checkpoint files and {} evaluation files identical", ea.len()))
}

fn desk_config(seed: u64) -> String {
    let plan = |name: &str, stage: &str, k: usize, extra: &str| {
        format!(
            "[[plan]]\nname = \"{name}\"\nstage = \"{stage}\"\nk = {k}\nepochs = 2\nbatch_size = 16\nlr = 0.005\nmax_targets_per_user = 8\n{extra}\n"
        )
    };
    let run = |ckpt: &str, mode: &str, k: usize, m: &str| {
        format!("[[eval.run]]\ncheckpoint = \"{ckpt}\"\nmode = \"{mode}\"\nk = [{k}]\n{m}\n")
    };
    [
        format!("seed = {seed}\nout_dir = \"out\"\n\n[dataset]\ndir = \"data\"\n[dataset.synthetic]\n\n"),
        "[model]\nd = 32\nn_layers = 1\nn_heads = 2\nmax_positions = 320\nmlp_hidden = 64\n\n".into(),
        plan("text40", "baseline_text", 40, ""),
        plan("pre40", "pretrain_patch", 40, ""),
        plan("pfti40", "finetune_pft_i", 40, "m = 5\ninit_checkpoint = \"pre40\""),
        plan("scratch40", "finetune_pft_i", 40, "m = 5"),
        plan("pre5", "pretrain_patch", 5, ""),
        plan("pfti5", "finetune_pft_i", 5, "m = 5\ninit_checkpoint = \"pre5\""),
        "[eval]\nwidth = 20\n".into(),
        run("text40", "text", 40, ""),
        run("pfti40", "pft_i", 40, "m = [5]"),
        run("scratch40", "pft_i", 40, "m = [5]"),
        run("pfti5", "pft_i", 5, "m = [5]"),
    ]
    .concat()
}

struct SeedRun {
    seed: u64,
    random: f64,
    text40: f64,
    pfti40: f64,
    pfti40_cr: f64,
    scratch40: f64,
    pfti5: f64,
    /// Per-case hit@20 difference, pre-trained minus from-scratch.
    paired: Vec<f64>,
    secs: f64,
}

fn hits(path: &Path) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(err)?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| {
            let rank = l.split(',').nth(3).unwrap_or("");
            match rank.parse::<usize>() {
                Ok(r) if r <= 20 => 1.0,
                _ => 0.0,
            }
        })
        .collect())
}

fn desk_run(seed: u64) -> Result<SeedRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (cfg, rows) = run_pipeline(dir.path(), &desk_config(seed), &TrainOptions::default())?;
    let find = |ckpt: &str| rows.iter().find(|r| r.checkpoint == ckpt).ok_or(format!("no row for {ckpt}"));
    let file = |r: &SweepRow, ext: &str| cfg.eval_dir().join(format!("{}.{ext}", r.label().replace([':', '/'], "_")));
    let report = EvalReport::load(&file(find("text40")?, "toml")).map_err(err)?;
    let with = hits(&file(find("pfti40")?, "csv"))?;
    let without = hits(&file(find("scratch40")?, "csv"))?;
    ensure!(with.len() == without.len(), "case counts differ");
    let run = SeedRun {
        seed,
        random: report.random_hr_20,
        text40: find("text40")?.hr_20,
        pfti40: find("pfti40")?.hr_20,
        pfti40_cr: find("pfti40")?.cr,
        scratch40: find("scratch40")?.hr_20,
        pfti5: find("pfti5")?.hr_20,
        paired: with.iter().zip(&without).map(|(a, b)| a - b).collect(),
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "  seed {}: text@40 {:.4}  pft_i@40 {:.4} (CR {:.2})  no-pretrain@40 {:.4}  pft_i@5 {:.4}  random {:.4}  [{:.0}s]",
        run.seed, run.text40, run.pfti40, run.pfti40_cr, run.scratch40, run.pfti5, run.random, run.secs
    );
    Ok(run)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn desk_learning(runs: &[SeedRun]) -> Check {
    let ratios: Vec<f64> = runs.iter().map(|r| r.text40 / r.random).collect();
    let text = median(runs.iter().map(|r| r.text40).collect());
    let pfti = median(runs.iter().map(|r| r.pfti40).collect());
    let min_cr = runs.iter().map(|r| r.pfti40_cr).fold(f64::INFINITY, f64::min);
    let detail = format!(
        "text HR@20 / random = {:?}; PatchRec-I median {pfti:.4} vs 0.9 x text median {:.4}; min CR {min_cr:.2}",
        ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
        0.9 * text
    );
    ensure!(ratios.iter().all(|&r| r >= 5.0), "{detail}");
    ensure!(min_cr >= 2.0, "{detail}");
    ensure!(pfti >= 0.9 * text, "{detail}");
    Ok(detail)
}

fn long_history(runs: &[SeedRun]) -> Check {
    let k40 = median(runs.iter().map(|r| r.pfti40).collect());
    let k5 = median(runs.iter().map(|r| r.pfti5).collect());
    let detail = format!("median HR@20 at K=40 {k40:.4} vs K=5 {k5:.4}");
    ensure!(k40 >= k5, "{detail}");
    Ok(detail)
}

fn pretraining_direction(runs: &[SeedRun]) -> Check {
    let with = median(runs.iter().map(|r| r.pfti40).collect());
    let without = median(runs.iter().map(|r| r.scratch40).collect());
    let diffs: Vec<f64> = runs.iter().flat_map(|r| r.paired.iter().copied()).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    let detail = format!(
        "median HR@20 with {with:.4} vs without {without:.4}; paired per-case difference {mean:+.4}, 95% CI [{:+.4}, {:+.4}] over {} cases",
        mean - half,
        mean + half,
        diffs.len()
    );
    ensure!(with >= without, "{detail}");
    Ok(detail)
}

fn report(id: usize, name: &str, result: Check, secs: f64, failed: &mut usize) {
    match result {
        Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({secs:.1}s)"),
        Err(detail) => {
            *failed += 1;
            println!("FAIL {id:>2} {name}: {detail} ({secs:.1}s)");
        }
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let quick: [(&str, fn() -> Check); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("pooling exactness", pooling_exactness),
        ("patch-gradient identity", patch_gradient_identity),
        ("constrained decoding soundness", decoding_soundness),
        ("metric oracles", metric_oracles),
        ("accounting oracle", accounting_oracle),
        ("schedule fidelity", schedule_fidelity),
        ("determinism", determinism),
    ];
    for (i, (name, f)) in quick.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        report(i + 1, name, r, t.elapsed().as_secs_f64(), &mut failed);
    }

    let t = Instant::now();
    println!("desk-scale runs (3 seeds):");
    let runs: Result<Vec<SeedRun>, String> = [1, 2, 3].into_iter().map(desk_run).collect();
    let secs = t.elapsed().as_secs_f64();
    match runs {
        Ok(runs) => {
            report(9, "desk-scale learning", desk_learning(&runs), secs, &mut failed);
            report(10, "long-history trend", long_history(&runs), 0.0, &mut failed);
            report(11, "pre-training ablation direction", pretraining_direction(&runs), 0.0, &mut failed);
        }
        Err(e) => {
            for (id, name) in [(9, "desk-scale learning"), (10, "long-history trend"), (11, "pre-training ablation direction")] {
                report(id, name, Err(e.clone()), secs, &mut failed);
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
