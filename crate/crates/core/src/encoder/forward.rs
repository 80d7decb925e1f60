//! Forward pass with full activation capture for backprop.

use crate::rng::Rng;
use crate::tensor::{
    dropout_mask, gemm_nn, layer_norm_forward, softmax_inplace, gelu, LayerNormCache, Tensor,
    LAYER_NORM_EPS,
};

use super::{EncodedInput, EncoderError, HiddenStateTrace, Model};

/// Activations of one block, kept for the backward pass.
pub struct BlockCache {
    /// Block input (after any dropout on the incoming stream).
    pub x: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention weights per head, each seq × seq.
    pub att: Vec<Tensor>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Tensor,
    pub att_drop: Option<Vec<f64>>,
    pub ln1: LayerNormCache,
    /// LN1 output: input to the feed-forward net and its residual.
    pub h1: Tensor,
    /// Pre-activation of the feed-forward hidden layer.
    pub ff_pre: Tensor,
    pub ff_act: Tensor,
    pub ff_drop: Option<Vec<f64>>,
    pub ln2: LayerNormCache,
}

/// Everything the backward pass needs, plus the per-layer outputs.
pub struct ForwardCache {
    /// N+1 captured layers; index 0 is the raw embedding sum.
    pub layers: Vec<Tensor>,
    pub blocks: Vec<BlockCache>,
    pub emb_drop: Option<Vec<f64>>,
    /// Copied from the input for mask handling in backward.
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl ForwardCache {
    pub fn final_layer(&self) -> &Tensor {
        self.layers.last().expect("at least the embedding layer")
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn into_trace(self, input: EncodedInput) -> HiddenStateTrace {
        HiddenStateTrace {
            layers: self.layers,
            input,
        }
    }
}

fn apply_mask(data: &mut [f64], mask: &[f64]) {
    for (v, m) in data.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// scores_h = Q_h · K_hᵀ / √dk with masked key columns at −∞.
fn head_scores(
    q: &Tensor,
    k: &Tensor,
    head: usize,
    dk: usize,
    seq: usize,
    d: usize,
    att_mask: &[u8],
) -> Tensor {
    let mut scores = Tensor::zeros(vec![seq, seq]);
    let off = head * dk;
    unsafe {
        matrixmultiply::dgemm(
            seq, dk, seq,
            1.0 / (dk as f64).sqrt(),
            q.data().as_ptr().add(off), d as isize, 1,
            k.data().as_ptr().add(off), 1, d as isize,
            0.0,
            scores.data_mut().as_mut_ptr(), seq as isize, 1,
        );
    }
    for row in 0..seq {
        let r = scores.row_mut(row);
        for (col, &m) in att_mask.iter().enumerate() {
            if m == 0 {
                r[col] = f64::NEG_INFINITY;
            }
        }
    }
    scores
}

/// ctx slice for one head: A_h(S×S) · V_h(S×dk), written into ctx[:, off..off+dk].
fn head_context(att: &Tensor, v: &Tensor, ctx: &mut Tensor, head: usize, dk: usize, seq: usize, d: usize) {
    let off = head * dk;
    unsafe {
        matrixmultiply::dgemm(
            seq, seq, dk,
            1.0,
            att.data().as_ptr(), seq as isize, 1,
            v.data().as_ptr().add(off), d as isize, 1,
            0.0,
            ctx.data_mut().as_mut_ptr().add(off), d as isize, 1,
        );
    }
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (x.rows(), x.cols());
    let n = w.cols();
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_nn(m, k, n, x.data(), w.data(), out.data_mut());
    for row in 0..m {
        for (o, bv) in out.row_mut(row).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

/// Full forward pass; `rng` enables dropout (ignored when the rate is 0).
pub fn forward_with_cache(
    model: &Model,
    input: &EncodedInput,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardCache, EncoderError> {
    input.validate()?;
    let cfg = &model.config;
    let seq = input.len();
    if seq > cfg.max_len {
        return Err(EncoderError::OverLength {
            len: seq,
            max_len: cfg.max_len,
        });
    }
    for &id in &input.token_ids {
        if id >= cfg.vocab_size {
            return Err(EncoderError::UnknownToken {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    let d = cfg.d_model;
    let dk = d / cfg.n_heads;
    let rate = cfg.dropout_rate;

    // Layer 0: token + positional + segment embedding, captured pre-dropout.
    let mut emb = Tensor::zeros(vec![seq, d]);
    for (pos, (&tid, &sid)) in input.token_ids.iter().zip(&input.segment_ids).enumerate() {
        let row = emb.row_mut(pos);
        let te = model.tok_emb.row(tid);
        let pe = model.pos_emb.row(pos);
        let se = model.seg_emb.row(sid as usize);
        for i in 0..d {
            row[i] = te[i] + pe[i] + se[i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers + 1);
    layers.push(emb.clone());

    let mut next_mask = |len: usize, rng: &mut Option<&mut Rng>| -> Option<Vec<f64>> {
        if rate == 0.0 {
            return None;
        }
        rng.as_deref_mut().map(|r| dropout_mask(len, rate, r))
    };

    let emb_drop = next_mask(seq * d, &mut rng);
    let mut x = emb;
    if let Some(mask) = &emb_drop {
        apply_mask(x.data_mut(), mask);
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for block in &model.blocks {
        let q = linear(&x, &block.wq, &block.bq);
        let k = linear(&x, &block.wk, &block.bk);
        let v = linear(&x, &block.wv, &block.bv);

        let mut att = Vec::with_capacity(cfg.n_heads);
        let mut ctx = Tensor::zeros(vec![seq, d]);
        for h in 0..cfg.n_heads {
            let mut scores = head_scores(&q, &k, h, dk, seq, d, &input.attention_mask);
            for row in 0..seq {
                softmax_inplace(scores.row_mut(row));
            }
            head_context(&scores, &v, &mut ctx, h, dk, seq, d);
            att.push(scores);
        }

        let mut att_out = linear(&ctx, &block.wo, &block.bo);
        let att_drop = next_mask(seq * d, &mut rng);
        if let Some(mask) = &att_drop {
            apply_mask(att_out.data_mut(), mask);
        }
        att_out.add_assign(&x);
        let (h1, ln1) = layer_norm_forward(
            &att_out,
            block.ln1_gain.data(),
            block.ln1_bias.data(),
            LAYER_NORM_EPS,
        );

        let ff_pre = linear(&h1, &block.w1, &block.b1);
        let mut ff_act = ff_pre.clone();
        for vv in ff_act.data_mut() {
            *vv = gelu(*vv);
        }
        let mut ff_out = linear(&ff_act, &block.w2, &block.b2);
        let ff_drop = next_mask(seq * d, &mut rng);
        if let Some(mask) = &ff_drop {
            apply_mask(ff_out.data_mut(), mask);
        }
        ff_out.add_assign(&h1);
        let (out, ln2) = layer_norm_forward(
            &ff_out,
            block.ln2_gain.data(),
            block.ln2_bias.data(),
            LAYER_NORM_EPS,
        );

        blocks.push(BlockCache {
            x,
            q,
            k,
            v,
            att,
            ctx,
            att_drop,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ff_drop,
            ln2,
        });
        layers.push(out.clone());
        x = out;
    }

    Ok(ForwardCache {
        layers,
        blocks,
        emb_drop,
        token_ids: input.token_ids.clone(),
        segment_ids: input.segment_ids.clone(),
        attention_mask: input.attention_mask.clone(),
    })
}
