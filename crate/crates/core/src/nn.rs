//! Shared network building blocks: initialization, sinusoidal positional
//! encoding, and pre-norm transformer layers expressed as tape ops.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Scaled uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(fan_in, fan_out);
    for v in &mut t.data {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

pub fn init_embedding(rng: &mut impl Rng, vocab: usize, dim: usize) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut t = Tensor::zeros(vocab, dim);
    for v in &mut t.data {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

/// The fixed sinusoidal positional encoding table for `n` positions.
pub fn sinusoidal_pe(n: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(n, dim);
    for pos in 0..n {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(pos, dim - 1, angle.sin());
        }
    }
    pe
}

/// Dropout mask source. `None` means eval mode (identity).
pub struct DropoutCtx<'a, R: Rng> {
    pub rng: &'a mut R,
    pub rate: f64,
}

fn apply_dropout<R: Rng>(tape: &mut Tape, x: Var, ctx: &mut Option<DropoutCtx<'_, R>>) -> Var {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let len = tape.value(x).data.len();
            let keep = 1.0 - c.rate;
            let mask: Vec<f64> =
                (0..len).map(|_| if c.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
            tape.dropout(x, mask)
        }
        _ => x,
    }
}

/// One linear projection with bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn alloc(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_linear(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionParams {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::alloc(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::alloc(store, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::alloc(store, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::alloc(store, &format!("{name}.o"), dim, dim, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.wq.forward(tape, store, queries);
        let k = self.wk.forward(tape, store, keys_values);
        let v = self.wv.forward(tape, store, keys_values);
        let attended = tape.attention(q, k, v, heads, causal);
        self.wo.forward(tape, store, attended)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForwardParams {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Linear::alloc(store, &format!("{name}.ff1"), dim, ff, rng),
            w2: Linear::alloc(store, &format!("{name}.ff2"), ff, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.w1.forward(tape, store, x);
        let h = tape.relu(h);
        self.w2.forward(tape, store, h)
    }
}

/// Pre-norm encoder layer: x + Attn(LN(x)), then x + FFN(LN(x)).
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl EncoderLayer {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::alloc(store, &format!("{name}.ln1"), dim),
            attn: AttentionParams::alloc(store, &format!("{name}.attn"), dim, rng),
            ln2: LayerNormParams::alloc(store, &format!("{name}.ln2"), dim),
            ffn: FeedForwardParams::alloc(store, &format!("{name}.ffn"), dim, ff, rng),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        heads: usize,
        dropout: &mut Option<DropoutCtx<'_, R>>,
    ) -> Var {
        let normed = self.ln1.forward(tape, store, x);
        let attended = self.attn.forward(tape, store, normed, normed, heads, false);
        let attended = apply_dropout(tape, attended, dropout);
        let x = tape.add(x, attended);
        let normed = self.ln2.forward(tape, store, x);
        let ff = self.ffn.forward(tape, store, normed);
        let ff = apply_dropout(tape, ff, dropout);
        tape.add(x, ff)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over the
/// encoder states, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl DecoderLayer {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::alloc(store, &format!("{name}.ln1"), dim),
            self_attn: AttentionParams::alloc(store, &format!("{name}.self"), dim, rng),
            ln2: LayerNormParams::alloc(store, &format!("{name}.ln2"), dim),
            cross_attn: AttentionParams::alloc(store, &format!("{name}.cross"), dim, rng),
            ln3: LayerNormParams::alloc(store, &format!("{name}.ln3"), dim),
            ffn: FeedForwardParams::alloc(store, &format!("{name}.ffn"), dim, ff, rng),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        heads: usize,
        dropout: &mut Option<DropoutCtx<'_, R>>,
    ) -> Var {
        let normed = self.ln1.forward(tape, store, x);
        let attended = self.self_attn.forward(tape, store, normed, normed, heads, true);
        let attended = apply_dropout(tape, attended, dropout);
        let x = tape.add(x, attended);
        let normed = self.ln2.forward(tape, store, x);
        let cross = self.cross_attn.forward(tape, store, normed, memory, heads, false);
        let cross = apply_dropout(tape, cross, dropout);
        let x = tape.add(x, cross);
        let normed = self.ln3.forward(tape, store, x);
        let ff = self.ffn.forward(tape, store, normed);
        let ff = apply_dropout(tape, ff, dropout);
        tape.add(x, ff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_rows_differ_by_position() {
        let pe = sinusoidal_pe(8, 10);
        assert_ne!(pe.row(0), pe.row(1));
        assert_ne!(pe.row(3), pe.row(7));
        // Position 0 is sin(0)/cos(0) pairs.
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
    }

    #[test]
    fn encoder_layer_rebuild_is_deterministic() {
        let mut rng = crate::rng::stream(3, "nn-test");
        let mut store = ParamStore::new();
        let layer = EncoderLayer::alloc(&mut store, "enc0", 8, 16, &mut rng);
        let x = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let run = || {
            let mut tape = Tape::new();
            let xin = tape.input(x.clone());
            let out = layer.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &store, xin, 2, &mut None);
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }
}
