//! Toy encoder-decoder transformer: single-head attention, pre-norm residual
//! blocks, learned absolute positions. The encoder also sees each token's
//! distance from the end of the source, which lets one layer learn
//! order-reversing alignments.

use super::{ArchConfig, Dropout, NetLayout};
use crate::autograd::{Init, NodeId, ParamId, ParamLayout, Tape};

#[derive(Debug, Clone)]
struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln_attn: LayerNormIds,
    attn: AttnIds,
    ln_ffn: LayerNormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln_self: LayerNormIds,
    self_attn: AttnIds,
    ln_cross: LayerNormIds,
    cross: AttnIds,
    ln_ffn: LayerNormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub struct AttentionNet {
    d: usize,
    positions: usize,
    enc_tok: ParamId,
    enc_pos: ParamId,
    enc_rpos: ParamId,
    dec_tok: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    enc_ln: LayerNormIds,
    dec_ln: LayerNormIds,
    out_w: ParamId,
    out_b: ParamId,
}

fn ln(l: &mut ParamLayout, name: &str, d: usize) -> LayerNormIds {
    LayerNormIds {
        gain: l.add(format!("{name}.gain"), 1, d, Init::Ones),
        bias: l.add(format!("{name}.bias"), 1, d, Init::Zeros),
    }
}

fn attn(l: &mut ParamLayout, name: &str, d: usize) -> AttnIds {
    AttnIds {
        wq: l.add(format!("{name}.wq"), d, d, Init::FanIn(1.0)),
        wk: l.add(format!("{name}.wk"), d, d, Init::FanIn(1.0)),
        wv: l.add(format!("{name}.wv"), d, d, Init::FanIn(1.0)),
        wo: l.add(format!("{name}.wo"), d, d, Init::FanIn(1.0)),
    }
}

fn ffn(l: &mut ParamLayout, name: &str, d: usize, f: usize) -> FfnIds {
    FfnIds {
        w1: l.add(format!("{name}.w1"), d, f, Init::FanIn(1.0)),
        b1: l.add(format!("{name}.b1"), 1, f, Init::Zeros),
        w2: l.add(format!("{name}.w2"), f, d, Init::FanIn(1.0)),
        b2: l.add(format!("{name}.b2"), 1, d, Init::Zeros),
    }
}

impl AttentionNet {
    pub fn build(arch: &ArchConfig, vocab_size: usize, layout: &mut ParamLayout) -> Self {
        let d = arch.embed_dim;
        let f = arch.hidden_dim;
        let positions = arch.max_len + 2;
        let emb = Init::Uniform(0.5);
        let enc_tok = layout.add("enc.tok", vocab_size, d, emb);
        let enc_pos = layout.add("enc.pos", positions, d, emb);
        let enc_rpos = layout.add("enc.rpos", positions, d, emb);
        let dec_tok = layout.add("dec.tok", vocab_size, d, emb);
        let dec_pos = layout.add("dec.pos", positions, d, emb);
        let enc = (0..arch.layers)
            .map(|i| EncLayer {
                ln_attn: ln(layout, &format!("enc.{i}.ln_attn"), d),
                attn: attn(layout, &format!("enc.{i}.attn"), d),
                ln_ffn: ln(layout, &format!("enc.{i}.ln_ffn"), d),
                ffn: ffn(layout, &format!("enc.{i}.ffn"), d, f),
            })
            .collect();
        let dec = (0..arch.layers)
            .map(|i| DecLayer {
                ln_self: ln(layout, &format!("dec.{i}.ln_self"), d),
                self_attn: attn(layout, &format!("dec.{i}.self"), d),
                ln_cross: ln(layout, &format!("dec.{i}.ln_cross"), d),
                cross: attn(layout, &format!("dec.{i}.cross"), d),
                ln_ffn: ln(layout, &format!("dec.{i}.ln_ffn"), d),
                ffn: ffn(layout, &format!("dec.{i}.ffn"), d, f),
            })
            .collect();
        let enc_ln = ln(layout, "enc.ln", d);
        let dec_ln = ln(layout, "dec.ln", d);
        let out_w = layout.add("out.w", d, vocab_size, Init::FanIn(1.0));
        let out_b = layout.add("out.b", 1, vocab_size, Init::Zeros);
        Self { d, positions, enc_tok, enc_pos, enc_rpos, dec_tok, dec_pos, enc, dec, enc_ln, dec_ln, out_w, out_b }
    }

    fn layer_norm(tape: &mut Tape, x: NodeId, ids: &LayerNormIds) -> NodeId {
        let (g, b) = (tape.param(ids.gain), tape.param(ids.bias));
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, query: NodeId, memory: NodeId, ids: &AttnIds, causal: bool) -> NodeId {
        let (wq, wk, wv, wo) = (tape.param(ids.wq), tape.param(ids.wk), tape.param(ids.wv), tape.param(ids.wo));
        let q = tape.matmul(query, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let s = tape.matmul_t(q, k);
        let s = tape.scale(s, 1.0 / (self.d as f64).sqrt());
        let a = tape.softmax_rows(s, causal);
        let o = tape.matmul(a, v);
        tape.matmul(o, wo)
    }

    fn feed_forward(tape: &mut Tape, x: NodeId, ids: &FfnIds, drop: &mut Dropout) -> NodeId {
        let (w1, b1, w2, b2) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.w2), tape.param(ids.b2));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = drop.apply(tape, h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    fn pos(&self, i: usize) -> usize {
        i.min(self.positions - 1)
    }
}

impl NetLayout for AttentionNet {
    fn encode(&self, tape: &mut Tape, source: &[usize], drop: &mut Dropout) -> NodeId {
        let n = source.len();
        let tok = tape.param(self.enc_tok);
        let pos = tape.param(self.enc_pos);
        let rpos = tape.param(self.enc_rpos);
        let x = tape.gather(tok, source);
        let p: Vec<usize> = (0..n).map(|i| self.pos(i)).collect();
        let rp: Vec<usize> = (0..n).map(|i| self.pos(n - 1 - i)).collect();
        let p = tape.gather(pos, &p);
        let rp = tape.gather(rpos, &rp);
        let x = tape.add(x, p);
        let mut x = tape.add(x, rp);
        x = drop.apply(tape, x);
        for layer in &self.enc {
            let h = Self::layer_norm(tape, x, &layer.ln_attn);
            let a = self.attention(tape, h, h, &layer.attn, false);
            let a = drop.apply(tape, a);
            x = tape.add(x, a);
            let h = Self::layer_norm(tape, x, &layer.ln_ffn);
            let f = Self::feed_forward(tape, h, &layer.ffn, drop);
            let f = drop.apply(tape, f);
            x = tape.add(x, f);
        }
        Self::layer_norm(tape, x, &self.enc_ln)
    }

    fn decode(&self, tape: &mut Tape, memory: NodeId, target_in: &[usize], drop: &mut Dropout) -> NodeId {
        let tok = tape.param(self.dec_tok);
        let pos = tape.param(self.dec_pos);
        let y = tape.gather(tok, target_in);
        let p: Vec<usize> = (0..target_in.len()).map(|i| self.pos(i)).collect();
        let p = tape.gather(pos, &p);
        let mut y = tape.add(y, p);
        y = drop.apply(tape, y);
        for layer in &self.dec {
            let h = Self::layer_norm(tape, y, &layer.ln_self);
            let a = self.attention(tape, h, h, &layer.self_attn, true);
            let a = drop.apply(tape, a);
            y = tape.add(y, a);
            let h = Self::layer_norm(tape, y, &layer.ln_cross);
            let c = self.attention(tape, h, memory, &layer.cross, false);
            let c = drop.apply(tape, c);
            y = tape.add(y, c);
            let h = Self::layer_norm(tape, y, &layer.ln_ffn);
            let f = Self::feed_forward(tape, h, &layer.ffn, drop);
            let f = drop.apply(tape, f);
            y = tape.add(y, f);
        }
        let y = Self::layer_norm(tape, y, &self.dec_ln);
        let (w, b) = (tape.param(self.out_w), tape.param(self.out_b));
        let logits = tape.matmul(y, w);
        tape.add_row(logits, b)
    }
}
