//! Windowed-attention transformer encoder-decoder ("student2" and the
//! teacher).
//!
//! 4x4 patch embedding with a fixed sinusoidal position code, stages of
//! two pre-norm blocks (window self-attention + 2x MLP), patch merges
//! between encoder stages, and a mirrored decoder of token expansion /
//! skip concat / fuse / two blocks, closed by a per-patch linear head,
//! unpatchify, and channel softmax. The position code is a pure function
//! of the token grid, so the parameter inventory is independent of input
//! size. Dropout follows each encoder and decoder stage.

use super::{apply_dropout, Cursor, Mode, NetworkSpec, ParamInit, LAYER_NORM_EPS, PATCH};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn block_init(p: &mut ParamInit, d: usize) {
    p.gamma(d);
    p.beta(d);
    for _ in 0..4 {
        p.linear(d, d);
        p.bias(d);
    }
    p.gamma(d);
    p.beta(d);
    p.linear(2 * d, d);
    p.bias(2 * d);
    p.linear(d, 2 * d);
    p.bias(d);
}

pub(super) fn init(spec: &NetworkSpec, p: &mut ParamInit) {
    let d0 = spec.embed_dim();
    let patch_in = PATCH * PATCH;
    p.linear(d0, patch_in);
    p.bias(d0);
    let stages = spec.stages();
    for i in 0..stages {
        let d = d0 << i;
        block_init(p, d);
        block_init(p, d);
        if i + 1 < stages {
            p.gamma(4 * d);
            p.beta(4 * d);
            p.linear(2 * d, 4 * d);
            p.bias(2 * d);
        }
    }
    for i in (0..stages.saturating_sub(1)).rev() {
        let d_in = d0 << (i + 1);
        let d_out = d0 << i;
        p.linear(2 * d_in, d_in);
        p.bias(2 * d_in);
        p.linear(d_out, 2 * d_out);
        p.bias(d_out);
        block_init(p, d_out);
        block_init(p, d_out);
    }
    p.linear(patch_in * spec.num_classes, d0);
    p.bias(patch_in * spec.num_classes);
}

/// Grid-order token row for each window-order position.
fn window_rows(gh: usize, gw: usize, win: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(gh * gw);
    for wy in 0..gh / win {
        for wx in 0..gw / win {
            for iy in 0..win {
                for ix in 0..win {
                    rows.push((wy * win + iy) * gw + wx * win + ix);
                }
            }
        }
    }
    rows
}

fn invert_rows(rows: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; rows.len()];
    for (p, &r) in rows.iter().enumerate() {
        inv[r] = p;
    }
    inv
}

/// Expand a row permutation to a flat element gather over `[N, d]`.
fn row_elements(rows: &[usize], d: usize) -> Vec<usize> {
    rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect()
}

/// `[1, H, W]` pixels to `[N, PATCH^2]` patch rows.
fn patchify_index(h: usize, w: usize) -> Vec<usize> {
    let (gh, gw) = (h / PATCH, w / PATCH);
    let mut idx = Vec::with_capacity(h * w);
    for py in 0..gh {
        for px in 0..gw {
            for iy in 0..PATCH {
                for ix in 0..PATCH {
                    idx.push((py * PATCH + iy) * w + px * PATCH + ix);
                }
            }
        }
    }
    idx
}

/// `[N, PATCH^2 * C]` head rows back to a `[C, H, W]` logit grid.
fn unpatchify_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let gw = w / PATCH;
    let pp = PATCH * PATCH;
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = (y / PATCH) * gw + x / PATCH;
                let within = (y % PATCH) * PATCH + x % PATCH;
                idx.push(p * (pp * c) + ch * pp + within);
            }
        }
    }
    idx
}

/// Concatenate each 2x2 token neighborhood: `[N, d]` to `[N/4, 4d]`.
fn merge_index(gh: usize, gw: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(gh * gw * d);
    for y in 0..gh / 2 {
        for x in 0..gw / 2 {
            for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let row = (2 * y + qy) * gw + 2 * x + qx;
                idx.extend(row * d..(row + 1) * d);
            }
        }
    }
    idx
}

/// Split each token into a 2x2 neighborhood: `[N, two_d]` to
/// `[4N, two_d/4]`.
fn expand_index(gh: usize, gw: usize, two_d: usize) -> Vec<usize> {
    let quarter = two_d / 4;
    let mut idx = Vec::with_capacity(gh * gw * two_d);
    for y in 0..2 * gh {
        for x in 0..2 * gw {
            let parent = (y / 2) * gw + x / 2;
            let quad = (y % 2) * 2 + x % 2;
            idx.extend(parent * two_d + quad * quarter..parent * two_d + (quad + 1) * quarter);
        }
    }
    idx
}

/// Fixed sinusoidal position code over the token grid: the first half of
/// the embedding encodes the row, the second half the column.
fn position_code(gh: usize, gw: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for x in 0..gw {
            let r = y * gw + x;
            for j in 0..d {
                let (pos, jj) = if j < half { (y, j) } else { (x, j - half) };
                let freq = 10000f64.powf(-((2 * (jj / 2)) as f64) / half as f64);
                let angle = pos as f64 * freq;
                data[r * d + j] = if jj % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data)
}

/// Pre-norm transformer block; rows must already be in window order.
fn block(g: &mut Graph, cur: &mut Cursor, x: Var, heads: usize, win: usize) -> Result<Var> {
    let g1 = cur.next()?;
    let b1 = cur.next()?;
    let normed = g.layer_norm(x, g1, b1, LAYER_NORM_EPS);
    let wq = cur.next()?;
    let bq = cur.next()?;
    let q = g.linear(normed, wq, bq);
    let wk = cur.next()?;
    let bk = cur.next()?;
    let k = g.linear(normed, wk, bk);
    let wv = cur.next()?;
    let bv = cur.next()?;
    let v = g.linear(normed, wv, bv);
    let attended = g.window_attention(q, k, v, heads, win);
    let wo = cur.next()?;
    let bo = cur.next()?;
    let o = g.linear(attended, wo, bo);
    let x = g.add(x, o);

    let g2 = cur.next()?;
    let b2 = cur.next()?;
    let normed2 = g.layer_norm(x, g2, b2, LAYER_NORM_EPS);
    let w1 = cur.next()?;
    let bm1 = cur.next()?;
    let hidden = g.linear(normed2, w1, bm1);
    let hidden = g.gelu(hidden);
    let w2 = cur.next()?;
    let bm2 = cur.next()?;
    let mlp = g.linear(hidden, w2, bm2);
    Ok(g.add(x, mlp))
}

/// Two blocks over `[N, d]` tokens: gather to window order, attend, and
/// gather back to grid order.
fn stage(
    g: &mut Graph,
    cur: &mut Cursor,
    x: Var,
    gh: usize,
    gw: usize,
    win: usize,
    heads: usize,
    d: usize,
) -> Result<Var> {
    let rows = window_rows(gh, gw, win);
    let n = gh * gw;
    let to_win = row_elements(&rows, d);
    let mut x = g.gather_flat(x, to_win, vec![n, d]);
    for _ in 0..2 {
        x = block(g, cur, x, heads, win)?;
    }
    let back = row_elements(&invert_rows(&rows), d);
    Ok(g.gather_flat(x, back, vec![n, d]))
}

pub(super) fn forward(
    spec: &NetworkSpec,
    g: &mut Graph,
    cur: &mut Cursor,
    pixels: Var,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let shape = g.value(pixels).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let d0 = spec.embed_dim();
    let heads = spec.heads();
    let win = spec.window_size;
    let rate = spec.dropout_rate;
    let mut site = 0u64;
    let (gh0, gw0) = (h / PATCH, w / PATCH);
    let patch_in = PATCH * PATCH;

    let idx = patchify_index(h, w);
    let tokens = g.gather_flat(pixels, idx, vec![gh0 * gw0, patch_in]);
    let ew = cur.next()?;
    let eb = cur.next()?;
    let embedded = g.linear(tokens, ew, eb);
    let pos = g.constant(position_code(gh0, gw0, d0));
    let mut x = g.add(embedded, pos);

    let stages = spec.stages();
    let mut skips: Vec<Var> = Vec::new();
    let (mut gh, mut gw) = (gh0, gw0);
    for i in 0..stages {
        let d = d0 << i;
        x = stage(g, cur, x, gh, gw, win, heads, d)?;
        x = apply_dropout(g, x, rate, mode, dropout_seed, &mut site);
        if i + 1 < stages {
            skips.push(x);
            let idx = merge_index(gh, gw, d);
            let merged = g.gather_flat(x, idx, vec![gh * gw / 4, 4 * d]);
            let gm = cur.next()?;
            let bm = cur.next()?;
            let normed = g.layer_norm(merged, gm, bm, LAYER_NORM_EPS);
            let wm = cur.next()?;
            let bm2 = cur.next()?;
            x = g.linear(normed, wm, bm2);
            gh /= 2;
            gw /= 2;
        }
    }

    for i in (0..stages.saturating_sub(1)).rev() {
        let d_in = d0 << (i + 1);
        let d_out = d0 << i;
        let wex = cur.next()?;
        let bex = cur.next()?;
        let expanded = g.linear(x, wex, bex);
        let idx = expand_index(gh, gw, 2 * d_in);
        let up = g.gather_flat(expanded, idx, vec![gh * gw * 4, d_in / 2]);
        gh *= 2;
        gw *= 2;
        let skip = skips.pop().expect("one skip per decoder stage");
        let cat = g.concat_cols(up, skip);
        let wf = cur.next()?;
        let bf = cur.next()?;
        let fused = g.linear(cat, wf, bf);
        let staged = stage(g, cur, fused, gh, gw, win, heads, d_out)?;
        x = apply_dropout(g, staged, rate, mode, dropout_seed, &mut site);
    }

    let hw = cur.next()?;
    let hb = cur.next()?;
    let out_tokens = g.linear(x, hw, hb);
    let idx = unpatchify_index(h, w, spec.num_classes);
    let logits = g.gather_flat(out_tokens, idx, vec![spec.num_classes, h, w]);
    Ok(g.softmax_channels(logits))
}
