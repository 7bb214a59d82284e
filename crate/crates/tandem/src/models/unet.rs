//! Convolutional encoder-decoder ("student1").
//!
//! Stem of two conv blocks, `depth` pool-then-double stages, and a
//! mirrored decoder of upsample / 1x1 reduce / skip concat / 3x3 fuse
//! stages, closed by a 1x1 head and channel softmax. Every conv block is
//! conv + group norm + ReLU. Dropout follows each encoder and decoder
//! stage.

use super::{apply_dropout, Cursor, Mode, NetworkSpec, ParamInit, GROUP_NORM_EPS};
use crate::error::Result;
use crate::graph::{Graph, Var};

/// Largest of {8, 4, 2, 1} dividing the channel count.
fn gn_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap()
}

fn conv_block_init(p: &mut ParamInit, cin: usize, cout: usize) {
    p.conv(cout, cin, 3);
    p.bias(cout);
    p.gamma(cout);
    p.beta(cout);
}

pub(super) fn init(spec: &NetworkSpec, p: &mut ParamInit) {
    let b = spec.base_channels;
    conv_block_init(p, 1, b);
    conv_block_init(p, b, b);
    for i in 1..=spec.depth {
        let cin = b << (i - 1);
        let cout = b << i;
        conv_block_init(p, cin, cout);
        conv_block_init(p, cout, cout);
    }
    for i in (0..spec.depth).rev() {
        let cin = b << (i + 1);
        let cout = b << i;
        p.conv(cout, cin, 1);
        p.bias(cout);
        p.conv(cout, 2 * cout, 3);
        p.bias(cout);
        p.gamma(cout);
        p.beta(cout);
    }
    p.conv(spec.num_classes, b, 1);
    p.bias(spec.num_classes);
}

fn conv_block(g: &mut Graph, cur: &mut Cursor, x: Var) -> Result<Var> {
    let w = cur.next()?;
    let b = cur.next()?;
    let gamma = cur.next()?;
    let beta = cur.next()?;
    let y = g.conv2d(x, w, b, 1);
    let c = g.value(y).shape()[0];
    let y = g.group_norm(y, gamma, beta, gn_groups(c), GROUP_NORM_EPS);
    Ok(g.relu(y))
}

pub(super) fn forward(
    spec: &NetworkSpec,
    g: &mut Graph,
    cur: &mut Cursor,
    pixels: Var,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let rate = spec.dropout_rate;
    let mut site = 0u64;

    let x = conv_block(g, cur, pixels)?;
    let x = conv_block(g, cur, x)?;
    let mut skips = vec![x];
    let mut x = x;
    for _ in 1..=spec.depth {
        let pooled = g.max_pool2(x);
        let y = conv_block(g, cur, pooled)?;
        let y = conv_block(g, cur, y)?;
        let y = apply_dropout(g, y, rate, mode, dropout_seed, &mut site);
        skips.push(y);
        x = y;
    }
    // The deepest stage output is the decoder input, not a skip.
    skips.pop();

    for _ in 0..spec.depth {
        let skip = skips.pop().expect("one skip per decoder stage");
        let up = g.upsample2(x);
        let rw = cur.next()?;
        let rb = cur.next()?;
        let reduced = g.conv2d(up, rw, rb, 0);
        let cat = g.concat_channels(reduced, skip);
        let fw = cur.next()?;
        let fb = cur.next()?;
        let fgamma = cur.next()?;
        let fbeta = cur.next()?;
        let fused = g.conv2d(cat, fw, fb, 1);
        let c = g.value(fused).shape()[0];
        let normed = g.group_norm(fused, fgamma, fbeta, gn_groups(c), GROUP_NORM_EPS);
        let act = g.relu(normed);
        x = apply_dropout(g, act, rate, mode, dropout_seed, &mut site);
    }

    let hw = cur.next()?;
    let hb = cur.next()?;
    let logits = g.conv2d(x, hw, hb, 0);
    Ok(g.softmax_channels(logits))
}
