//! Differentiable forward pass on a [`Tape`].

use super::{layer_idx, ModelState, POS_EMB, TOK_EMB};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::patch::{PromptLayout, Segment};
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

/// Records every parameter as a leaf; returns their vars in parameter order.
pub fn bind(tape: &mut Tape, state: &ModelState) -> Vec<Var> {
    state.params.iter().map(|p| tape.leaf(p)).collect()
}

/// Intermediate vars of one patch, for gradient inspection.
#[derive(Clone, Debug)]
pub struct PatchTrace {
    pub position: usize,
    /// Gathered title-token rows per pooled item.
    pub token_rows: Vec<Var>,
    /// Item-level means (`z^i`), one per pooled item.
    pub item_pools: Vec<Var>,
    /// The vector placed at `position`: `z^i` for item patches, `z^s` for sessions.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct EmbedTrace {
    /// `[positions × d]` input embeddings before positional vectors are added.
    pub tokens: Var,
    /// Input embeddings with positions added.
    pub x: Var,
    pub patches: Vec<PatchTrace>,
}

fn flush(tape: &mut Tape, table: Var, pending: &mut Vec<usize>, parts: &mut Vec<Var>) -> Result<()> {
    if !pending.is_empty() {
        parts.push(tape.gather(table, pending)?);
        pending.clear();
    }
    Ok(())
}

fn pool_item(tape: &mut Tape, table: Var, tokens: &[TokenId]) -> Result<(Var, Var)> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let rows = tape.gather(table, &ids)?;
    Ok((rows, tape.mean_pool(rows)?))
}

/// Embeds the prompt (plus all target tokens but the last when
/// `with_target`). Raw tokens look up the table; an item patch is the mean of
/// its title-token rows; a session patch is the unweighted mean of its item
/// patches. Positional vectors are added after pooling, one per position.
pub fn embed_traced(
    tape: &mut Tape,
    state: &ModelState,
    vars: &[Var],
    layout: &PromptLayout,
    with_target: bool,
) -> Result<EmbedTrace> {
    let n = if with_target {
        layout.model_positions()
    } else {
        layout.positions()
    };
    if n > state.config.max_positions {
        return Err(Error::LayoutTooLong {
            positions: n,
            max: state.config.max_positions,
        });
    }
    let table = vars[TOK_EMB];
    let mut parts = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let mut patches = Vec::new();
    let mut pos = 0;
    for seg in &layout.segments {
        match seg {
            Segment::Special(t) => pending.push(*t as usize),
            Segment::Raw { tokens, .. } => pending.extend(tokens.iter().map(|&t| t as usize)),
            Segment::ItemPatch { tokens, .. } => {
                flush(tape, table, &mut pending, &mut parts)?;
                let (rows, pooled) = pool_item(tape, table, tokens)?;
                parts.push(pooled);
                patches.push(PatchTrace {
                    position: pos,
                    token_rows: vec![rows],
                    item_pools: vec![pooled],
                    pooled,
                });
            }
            Segment::SessionPatch { items } => {
                flush(tape, table, &mut pending, &mut parts)?;
                let mut token_rows = Vec::with_capacity(items.len());
                let mut item_pools = Vec::with_capacity(items.len());
                for (_, tokens) in items {
                    let (rows, pooled) = pool_item(tape, table, tokens)?;
                    token_rows.push(rows);
                    item_pools.push(pooled);
                }
                let stacked = tape.concat_rows(&item_pools)?;
                let pooled = tape.mean_pool(stacked)?;
                parts.push(pooled);
                patches.push(PatchTrace {
                    position: pos,
                    token_rows,
                    item_pools,
                    pooled,
                });
            }
        }
        pos += seg.positions();
    }
    if with_target {
        let t = &layout.target;
        pending.extend(t[..t.len().saturating_sub(1)].iter().map(|&x| x as usize));
    }
    flush(tape, table, &mut pending, &mut parts)?;
    let tokens = tape.concat_rows(&parts)?;
    let positions: Vec<usize> = (0..n).collect();
    let pe = tape.gather(vars[POS_EMB], &positions)?;
    let x = tape.add(tokens, pe)?;
    Ok(EmbedTrace { tokens, x, patches })
}

/// Final hidden states `[T × d]` from input embeddings.
pub(crate) fn blocks(tape: &mut Tape, state: &ModelState, vars: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for l in 0..state.config.n_layers {
        let ix = layer_idx(l);
        let a = tape.layer_norm(h, vars[ix.ln1_g], vars[ix.ln1_b])?;
        let qkv = tape.matmul(a, vars[ix.qkv_w])?;
        let qkv = tape.add_row(qkv, vars[ix.qkv_b])?;
        let att = tape.causal_attention(qkv, state.config.n_heads)?;
        let o = tape.matmul(att, vars[ix.out_w])?;
        let o = tape.add_row(o, vars[ix.out_b])?;
        h = tape.add(h, o)?;
        let m = tape.layer_norm(h, vars[ix.ln2_g], vars[ix.ln2_b])?;
        let f = tape.matmul(m, vars[ix.fc_w])?;
        let f = tape.add_row(f, vars[ix.fc_b])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[ix.proj_w])?;
        let f = tape.add_row(f, vars[ix.proj_b])?;
        h = tape.add(h, f)?;
    }
    Ok(h)
}

fn finite(tape: &Tape, v: Var, what: &'static str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Masked next-token loss over the target positions of `layout`.
pub fn layout_loss(
    tape: &mut Tape,
    state: &ModelState,
    vars: &[Var],
    layout: &PromptLayout,
) -> Result<(Var, EmbedTrace)> {
    if layout.target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let trace = embed_traced(tape, state, vars, layout, true)?;
    let h = blocks(tape, state, vars, trace.x)?;
    let first = layout.positions() - 1;
    let rows: Vec<usize> = (first..first + layout.target.len()).collect();
    let sel = tape.select_rows(h, &rows)?;
    let logits = tape.matmul_nt(sel, vars[TOK_EMB])?;
    finite(tape, logits, "forward")?;
    let targets: Vec<usize> = layout.target.iter().map(|&t| t as usize).collect();
    let mask = vec![true; targets.len()];
    let loss = tape.softmax_cross_entropy(logits, &targets, &mask)?;
    Ok((loss, trace))
}

/// Input embeddings of the prompt, `[positions × d]`.
pub fn embed_layout(state: &ModelState, layout: &PromptLayout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, state);
    let trace = embed_traced(&mut tape, state, &vars, layout, false)?;
    Ok(tape.to_tensor(trace.x))
}

/// Logits at every position of the training input (prompt and target prefix).
pub fn forward(state: &ModelState, layout: &PromptLayout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, state);
    let trace = embed_traced(&mut tape, state, &vars, layout, true)?;
    let h = blocks(&mut tape, state, &vars, trace.x)?;
    let logits = tape.matmul_nt(h, vars[TOK_EMB])?;
    finite(&tape, logits, "forward")?;
    Ok(tape.to_tensor(logits))
}

/// Logits from precomputed input embeddings `[T × d]` (positions included).
pub fn forward_from_embeddings(state: &ModelState, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, state);
    let xv = tape.leaf(x);
    let h = blocks(&mut tape, state, &vars, xv)?;
    let logits = tape.matmul_nt(h, vars[TOK_EMB])?;
    finite(&tape, logits, "forward")?;
    Ok(tape.to_tensor(logits))
}

/// Scalar loss value for one layout.
pub fn loss(state: &ModelState, layout: &PromptLayout) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, state);
    let (l, _) = layout_loss(&mut tape, state, &vars, layout)?;
    Ok(tape.scalar(l))
}
