//! Layer builders shared by the autoencoder, TTS encoder, and denoiser.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::params::{init_uniform, ParamStore};
use crate::nn::tape::{Grads, Tape, Var};
use crate::nn::tensor::Tensor;

/// Binds named parameters from a [`ParamStore`] onto a [`Tape`], caching the
/// leaf var per path so each parameter appears once per graph.
pub struct TapeCtx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> TapeCtx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        TapeCtx {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Var for the named parameter (leaf created on first use).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.tape.param(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Collect gradients keyed by parameter path.
    pub fn named_grads(&self, grads: &Grads) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

// ---- initializers ------------------------------------------------------

pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize) {
    store.insert(&format!("{prefix}.w"), init_uniform(rng, &[dout, din], din));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, din: usize, dout: usize) {
    store.insert(&format!("{prefix}.w"), Tensor::zeros(&[dout, din]));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    store.insert(
        &format!("{prefix}.w"),
        init_uniform(rng, &[cout, cin, k], cin * k),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_conv_zero(store: &mut ParamStore, prefix: &str, cout: usize, cin: usize, k: usize) {
    store.insert(&format!("{prefix}.w"), Tensor::zeros(&[cout, cin, k]));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_conv_transpose(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.insert(
        &format!("{prefix}.w"),
        init_uniform(rng, &[cin, cout, k], cin * k),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub fn init_embedding(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, vocab: usize, d: usize) {
    store.insert(&format!("{prefix}.table"), init_uniform(rng, &[vocab, d], d));
}

pub fn init_mha(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    // q/k/v projections are bias-free; a key bias in particular would be a
    // no-op under the softmax's row-shift invariance
    for proj in ["wq", "wk", "wv"] {
        store.insert(&format!("{prefix}.{proj}.w"), init_uniform(rng, &[d, d], d));
    }
    init_linear(store, rng, &format!("{prefix}.wo"), d, d);
}

pub fn init_fft_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    conv_kernel: usize,
) {
    init_mha(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_conv(store, rng, &format!("{prefix}.ff1"), d, d, conv_kernel);
    init_conv(store, rng, &format!("{prefix}.ff2"), d, d, 1);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
}

// ---- forward builders --------------------------------------------------

pub fn linear_fw(ctx: &mut TapeCtx, prefix: &str, x: Var) -> Var {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    ctx.tape.linear(x, w, b)
}

pub fn conv_fw(ctx: &mut TapeCtx, prefix: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    ctx.tape.conv1d(x, w, b, stride, dilation)
}

pub fn conv_transpose_fw(ctx: &mut TapeCtx, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    ctx.tape.conv_transpose1d(x, w, b, stride)
}

pub fn layer_norm_fw(ctx: &mut TapeCtx, prefix: &str, x: Var) -> Var {
    let g = ctx.p(&format!("{prefix}.g"));
    let b = ctx.p(&format!("{prefix}.b"));
    ctx.tape.layer_norm(x, g, b, 1e-5)
}

/// Multi-head self-attention over `x [L x D]`.
///
/// Returns the output and, when requested, the per-head attention matrices
/// for inspection.
pub fn mha_fw(
    ctx: &mut TapeCtx,
    prefix: &str,
    x: Var,
    heads: usize,
    capture_attention: Option<&mut Vec<Tensor>>,
) -> Var {
    let d = ctx.tape.value(x).shape[1];
    assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let proj = |ctx: &mut TapeCtx, name: &str| {
        let w = ctx.p(&format!("{prefix}.{name}.w"));
        let wt = ctx.tape.transpose(w);
        ctx.tape.matmul(x, wt)
    };
    let q = proj(ctx, "wq");
    let k = proj(ctx, "wk");
    let v = proj(ctx, "wv");
    let mut outs = Vec::with_capacity(heads);
    let mut captured = Vec::new();
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = ctx.tape.slice_cols(q, from, to);
        let kh = ctx.tape.slice_cols(k, from, to);
        let vh = ctx.tape.slice_cols(v, from, to);
        let kt = ctx.tape.transpose(kh);
        let scores = ctx.tape.matmul(qh, kt);
        let scaled = ctx.tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = ctx.tape.softmax_rows(scaled);
        captured.push(ctx.tape.value(attn).clone());
        let oh = ctx.tape.matmul(attn, vh);
        outs.push(oh);
    }
    if let Some(slot) = capture_attention {
        *slot = captured;
    }
    let concat = ctx.tape.concat_cols(&outs);
    linear_fw(ctx, &format!("{prefix}.wo"), concat)
}

/// Feed-Forward Transformer block: self-attention plus a 1-D convolutional
/// feed-forward, each with residual connection and layer norm.
pub fn fft_block_fw(ctx: &mut TapeCtx, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let attn = mha_fw(ctx, &format!("{prefix}.attn"), x, heads, None);
    let res1 = ctx.tape.add(x, attn);
    let n1 = layer_norm_fw(ctx, &format!("{prefix}.ln1"), res1);
    // conv feed-forward runs channel-major
    let tr = ctx.tape.transpose(n1);
    let c1 = conv_fw(ctx, &format!("{prefix}.ff1"), tr, 1, 1)?;
    let a1 = ctx.tape.relu(c1);
    let c2 = conv_fw(ctx, &format!("{prefix}.ff2"), a1, 1, 1)?;
    let back = ctx.tape.transpose(c2);
    let res2 = ctx.tape.add(n1, back);
    Ok(layer_norm_fw(ctx, &format!("{prefix}.ln2"), res2))
}

/// Standard interleaved sinusoidal position table `[n x d]`.
pub fn position_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = freq.sin() as f32;
            data[pos * d + 2 * i + 1] = freq.cos() as f32;
        }
    }
    Tensor {
        shape: vec![n, d],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_store(d: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_mha(&mut store, &mut rng, "attn", d);
        store
    }

    #[test]
    fn attention_single_key_is_one() {
        let store = toy_store(4);
        let mut ctx = TapeCtx::new(&store);
        let x = ctx.tape.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.1]).unwrap());
        let mut attn = Vec::new();
        let y = mha_fw(&mut ctx, "attn", x, 2, Some(&mut attn));
        assert_eq!(ctx.tape.value(y).shape, vec![1, 4]);
        for a in &attn {
            assert_eq!(a.shape, vec![1, 1]);
            assert!((a.data[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_preserved() {
        let store = toy_store(8);
        let mut ctx = TapeCtx::new(&store);
        let data: Vec<f32> = (0..5 * 8).map(|i| ((i as f32) * 0.37).sin()).collect();
        let x = ctx.tape.constant(Tensor::new(vec![5, 8], data).unwrap());
        let mut attn = Vec::new();
        let y = mha_fw(&mut ctx, "attn", x, 2, Some(&mut attn));
        assert_eq!(ctx.tape.value(y).shape, vec![5, 8]);
        for a in &attn {
            for r in 0..a.rows() {
                let s: f32 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        // two identical input rows must produce identical output rows
        let store = toy_store(4);
        let mut ctx = TapeCtx::new(&store);
        let row = [0.4f32, -0.1, 0.9, 0.2];
        let mut data = Vec::new();
        data.extend_from_slice(&row);
        data.extend_from_slice(&row);
        let x = ctx.tape.constant(Tensor::new(vec![2, 4], data).unwrap());
        let y = mha_fw(&mut ctx, "attn", x, 2, None);
        let v = ctx.tape.value(y);
        for j in 0..4 {
            assert!((v.row(0)[j] - v.row(1)[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn position_encoding_breaks_permutation_symmetry() {
        let pe = position_encoding(4, 8);
        assert_ne!(pe.row(0), pe.row(1));
        // row 0 is sin(0)=0, cos(0)=1 interleaved
        for i in 0..4 {
            assert_eq!(pe.row(0)[2 * i], 0.0);
            assert_eq!(pe.row(0)[2 * i + 1], 1.0);
        }
    }
}
