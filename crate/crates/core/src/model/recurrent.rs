//! Toy recurrent encoder-decoder: stacked bidirectional GRU encoder, stacked
//! GRU decoder, bilinear attention over the top encoder layer.

use super::{ArchConfig, Dropout, NetLayout};
use crate::autograd::{Init, Mat, NodeId, ParamId, ParamLayout, Tape};

#[derive(Debug, Clone)]
struct GruIds {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
    hidden: usize,
}

impl GruIds {
    fn new(l: &mut ParamLayout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: l.add(format!("{name}.wx"), input, 3 * hidden, Init::FanIn(1.0)),
            bx: l.add(format!("{name}.bx"), 1, 3 * hidden, Init::Zeros),
            wh: l.add(format!("{name}.wh"), hidden, 3 * hidden, Init::FanIn(1.0)),
            bh: l.add(format!("{name}.bh"), 1, 3 * hidden, Init::Zeros),
            hidden,
        }
    }

    /// Runs the cell over `inputs` rows in the given order and returns one
    /// state row per input, in that same order.
    fn run(&self, tape: &mut Tape, inputs: NodeId, order: &[usize], init: NodeId) -> Vec<NodeId> {
        let h = self.hidden;
        let (wx, bx, wh, bh) = (tape.param(self.wx), tape.param(self.bx), tape.param(self.wh), tape.param(self.bh));
        let gx_all = tape.matmul(inputs, wx);
        let gx_all = tape.add_row(gx_all, bx);
        let mut state = init;
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let gx = tape.row(gx_all, t);
            let gh = tape.matmul(state, wh);
            let gh = tape.add_row(gh, bh);
            let xr = tape.slice_cols(gx, 0, h);
            let hr = tape.slice_cols(gh, 0, h);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let xz = tape.slice_cols(gx, h, h);
            let hz = tape.slice_cols(gh, h, h);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let xn = tape.slice_cols(gx, 2 * h, h);
            let hn = tape.slice_cols(gh, 2 * h, h);
            let rn = tape.mul(r, hn);
            let n = tape.add(xn, rn);
            let n = tape.tanh(n);
            let diff = tape.sub(state, n);
            let zd = tape.mul(z, diff);
            state = tape.add(n, zd);
            out.push(state);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentNet {
    hidden: usize,
    enc_emb: ParamId,
    dec_emb: ParamId,
    enc_fwd: Vec<GruIds>,
    enc_bwd: Vec<GruIds>,
    bridge_w: ParamId,
    bridge_b: ParamId,
    dec: Vec<GruIds>,
    att_w: ParamId,
    comb_w: ParamId,
    comb_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl RecurrentNet {
    pub fn build(arch: &ArchConfig, vocab_size: usize, layout: &mut ParamLayout) -> Self {
        let (e, h) = (arch.embed_dim, arch.hidden_dim);
        let enc_emb = layout.add("enc.emb", vocab_size, e, Init::Uniform(0.5));
        let dec_emb = layout.add("dec.emb", vocab_size, e, Init::Uniform(0.5));
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        for i in 0..arch.layers {
            let input = if i == 0 { e } else { 2 * h };
            enc_fwd.push(GruIds::new(layout, &format!("enc.{i}.fwd"), input, h));
            enc_bwd.push(GruIds::new(layout, &format!("enc.{i}.bwd"), input, h));
        }
        let bridge_w = layout.add("bridge.w", 2 * h, h, Init::FanIn(1.0));
        let bridge_b = layout.add("bridge.b", 1, h, Init::Zeros);
        let dec = (0..arch.layers)
            .map(|i| GruIds::new(layout, &format!("dec.{i}"), if i == 0 { e } else { h }, h))
            .collect();
        let att_w = layout.add("att.w", 2 * h, h, Init::FanIn(1.0));
        let comb_w = layout.add("comb.w", 3 * h, h, Init::FanIn(1.0));
        let comb_b = layout.add("comb.b", 1, h, Init::Zeros);
        let out_w = layout.add("out.w", h, vocab_size, Init::FanIn(1.0));
        let out_b = layout.add("out.b", 1, vocab_size, Init::Zeros);
        Self { hidden: h, enc_emb, dec_emb, enc_fwd, enc_bwd, bridge_w, bridge_b, dec, att_w, comb_w, comb_b, out_w, out_b }
    }
}

/// Encoder output bundle: the annotation matrix and the decoder init state,
/// concatenated column-wise so `NetLayout` can pass a single node around.
impl NetLayout for RecurrentNet {
    fn encode(&self, tape: &mut Tape, source: &[usize], drop: &mut Dropout) -> NodeId {
        let n = source.len();
        let h = self.hidden;
        let emb = tape.param(self.enc_emb);
        let mut x = tape.gather(emb, source);
        x = drop.apply(tape, x);
        let zero = tape.input(Mat::zeros(1, h));
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        let mut first_bwd = zero;
        let mut last_fwd = zero;
        for (f, b) in self.enc_fwd.iter().zip(&self.enc_bwd) {
            let fs = f.run(tape, x, &fwd_order, zero);
            let mut bs = b.run(tape, x, &bwd_order, zero);
            last_fwd = *fs.last().expect("non-empty source");
            first_bwd = *bs.last().expect("non-empty source");
            bs.reverse();
            let fm = tape.stack_rows(&fs);
            let bm = tape.stack_rows(&bs);
            x = tape.concat_cols(fm, bm);
        }
        let summary = tape.concat_cols(last_fwd, first_bwd);
        let (bw, bb) = (tape.param(self.bridge_w), tape.param(self.bridge_b));
        let init = tape.matmul(summary, bw);
        let init = tape.add_row(init, bb);
        let init = tape.tanh(init);
        // Row 0 of the bundle holds the init state in its first h columns;
        // rows 1.. hold the annotations.
        let pad = tape.input(Mat::zeros(1, h));
        let init_row = tape.concat_cols(init, pad);
        let rows: Vec<NodeId> = std::iter::once(init_row)
            .chain((0..n).map(|i| tape.row(x, i)))
            .collect();
        tape.stack_rows(&rows)
    }

    fn decode(&self, tape: &mut Tape, memory: NodeId, target_in: &[usize], drop: &mut Dropout) -> NodeId {
        let h = self.hidden;
        let n = tape.value(memory).rows - 1;
        let bundle_init = tape.row(memory, 0);
        let init = tape.slice_cols(bundle_init, 0, h);
        let ann_rows: Vec<NodeId> = (1..=n).map(|i| tape.row(memory, i)).collect();
        let annotations = tape.stack_rows(&ann_rows);

        let emb = tape.param(self.dec_emb);
        let mut y = tape.gather(emb, target_in);
        y = drop.apply(tape, y);
        let order: Vec<usize> = (0..target_in.len()).collect();
        for cell in &self.dec {
            let states = cell.run(tape, y, &order, init);
            y = tape.stack_rows(&states);
        }
        let att_w = tape.param(self.att_w);
        let keys = tape.matmul(annotations, att_w);
        let scores = tape.matmul_t(y, keys);
        let weights = tape.softmax_rows(scores, false);
        let context = tape.matmul(weights, annotations);
        let joint = tape.concat_cols(y, context);
        let (cw, cb) = (tape.param(self.comb_w), tape.param(self.comb_b));
        let o = tape.matmul(joint, cw);
        let o = tape.add_row(o, cb);
        let o = tape.tanh(o);
        let o = drop.apply(tape, o);
        let (ow, ob) = (tape.param(self.out_w), tape.param(self.out_b));
        let logits = tape.matmul(o, ow);
        tape.add_row(logits, ob)
    }
}
