//! Hand-derived backpropagation through the encoder stack.

use crate::tensor::{
    gelu_grad, gemm_nn, gemm_nt, gemm_tn_acc, layer_norm_backward, softmax_backward_row, Tensor,
};

use super::forward::ForwardCache;
use super::Model;

/// Gradient tensors mirroring [`Model::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub seg_emb: Tensor,
    pub blocks: Vec<BlockGrads>,
    pub span_head_w: Tensor,
    pub span_head_b: Tensor,
    pub class_head_w: Tensor,
    pub class_head_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let d = model.config.d_model;
        let d_ff = model.config.d_ff;
        let zero_block = || BlockGrads {
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            bk: Tensor::zeros(vec![d]),
            bv: Tensor::zeros(vec![d]),
            bo: Tensor::zeros(vec![d]),
            ln1_gain: Tensor::zeros(vec![d]),
            ln1_bias: Tensor::zeros(vec![d]),
            w1: Tensor::zeros(vec![d, d_ff]),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::zeros(vec![d_ff, d]),
            b2: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::zeros(vec![d]),
            ln2_bias: Tensor::zeros(vec![d]),
        };
        ModelGrads {
            tok_emb: Tensor::zeros(vec![model.config.vocab_size, d]),
            pos_emb: Tensor::zeros(vec![model.config.max_len, d]),
            seg_emb: Tensor::zeros(vec![2, d]),
            blocks: (0..model.config.n_layers).map(|_| zero_block()).collect(),
            span_head_w: Tensor::zeros(vec![d, 2]),
            span_head_b: Tensor::zeros(vec![2]),
            class_head_w: Tensor::zeros(vec![d, model.n_classes()]),
            class_head_b: Tensor::zeros(vec![model.n_classes()]),
        }
    }

    /// Flat view in the same order as [`Model::named_tensors`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.tok_emb, &self.pos_emb, &self.seg_emb];
        for b in &self.blocks {
            out.extend([
                &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk, &b.bv, &b.bo, &b.ln1_gain, &b.ln1_bias,
                &b.w1, &b.b1, &b.w2, &b.b2, &b.ln2_gain, &b.ln2_bias,
            ]);
        }
        out.extend([
            &self.span_head_w,
            &self.span_head_b,
            &self.class_head_w,
            &self.class_head_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.seg_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.bq,
                &mut b.bk,
                &mut b.bv,
                &mut b.bo,
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
            ]);
        }
        out.extend([
            &mut self.span_head_w,
            &mut self.span_head_b,
            &mut self.class_head_w,
            &mut self.class_head_b,
        ]);
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        for (a, b) in mine.iter_mut().zip(theirs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn col_sums_into(x: &Tensor, out: &mut Tensor) {
    let cols = x.cols();
    for row in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(row)) {
            *o += v;
        }
    }
}

fn apply_mask(data: &mut [f64], mask: &[f64]) {
    for (v, m) in data.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// dW += Xᵀ · dY, db += column sums of dY, dX += dY · Wᵀ for one linear.
fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    d_out: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    dx: &mut Tensor,
) {
    let (s, m) = (x.rows(), x.cols());
    let n = w.cols();
    gemm_tn_acc(m, s, n, x.data(), d_out.data(), dw.data_mut());
    col_sums_into(d_out, db);
    let mut dx_add = Tensor::zeros(vec![s, m]);
    gemm_nt(s, n, m, d_out.data(), w.data(), dx_add.data_mut());
    dx.add_assign(&dx_add);
}

/// Backprop from a gradient on the final layer down to every parameter,
/// accumulating into `grads`. Head gradients are handled by the callers.
pub fn backward(model: &Model, cache: &ForwardCache, d_final: &Tensor, grads: &mut ModelGrads) {
    let cfg = &model.config;
    let seq = cache.token_ids.len();
    let d = cfg.d_model;
    let dk = d / cfg.n_heads;

    let mut d_out = d_final.clone();
    for (idx, block) in model.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[idx];
        let bg = &mut grads.blocks[idx];

        // LN2
        let (mut d_res2, dg2, db2) = layer_norm_backward(&d_out, &bc.ln2, block.ln2_gain.data());
        add_slice(bg.ln2_gain.data_mut(), &dg2);
        add_slice(bg.ln2_bias.data_mut(), &db2);

        // Feed-forward branch: res2 = h1 + dropout(ff_out)
        let mut d_ff_out = d_res2.clone();
        if let Some(mask) = &bc.ff_drop {
            apply_mask(d_ff_out.data_mut(), mask);
        }
        let mut d_h1 = d_res2.clone();
        {
            // second linear: ff_out = ff_act · w2 + b2
            let mut d_ff_act = Tensor::zeros(vec![seq, cfg.d_ff]);
            gemm_tn_acc(
                cfg.d_ff,
                seq,
                d,
                bc.ff_act.data(),
                d_ff_out.data(),
                bg.w2.data_mut(),
            );
            col_sums_into(&d_ff_out, &mut bg.b2);
            gemm_nt(
                seq,
                d,
                cfg.d_ff,
                d_ff_out.data(),
                block.w2.data(),
                d_ff_act.data_mut(),
            );
            // activation
            for (g, &pre) in d_ff_act.data_mut().iter_mut().zip(bc.ff_pre.data()) {
                *g *= gelu_grad(pre);
            }
            // first linear: ff_pre = h1 · w1 + b1
            linear_backward(&bc.h1, &block.w1, &d_ff_act, &mut bg.w1, &mut bg.b1, &mut d_h1);
        }

        // LN1
        let (d_res1, dg1, db1) = layer_norm_backward(&d_h1, &bc.ln1, block.ln1_gain.data());
        add_slice(bg.ln1_gain.data_mut(), &dg1);
        add_slice(bg.ln1_bias.data_mut(), &db1);

        // Attention branch: res1 = x + dropout(att_out)
        let mut d_att_out = d_res1.clone();
        if let Some(mask) = &bc.att_drop {
            apply_mask(d_att_out.data_mut(), mask);
        }
        let mut d_x = d_res1;

        // output projection: att_out = ctx · wo + bo
        let mut d_ctx = Tensor::zeros(vec![seq, d]);
        gemm_tn_acc(d, seq, d, bc.ctx.data(), d_att_out.data(), bg.wo.data_mut());
        col_sums_into(&d_att_out, &mut bg.bo);
        gemm_nt(seq, d, d, d_att_out.data(), block.wo.data(), d_ctx.data_mut());

        // heads
        let mut d_q = Tensor::zeros(vec![seq, d]);
        let mut d_k = Tensor::zeros(vec![seq, d]);
        let mut d_v = Tensor::zeros(vec![seq, d]);
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        for h in 0..cfg.n_heads {
            let off = h * dk;
            let att = &bc.att[h];
            // d_att = d_ctx_h · V_hᵀ
            let mut d_att = Tensor::zeros(vec![seq, seq]);
            unsafe {
                matrixmultiply::dgemm(
                    seq, dk, seq, 1.0,
                    d_ctx.data().as_ptr().add(off), d as isize, 1,
                    bc.v.data().as_ptr().add(off), 1, d as isize,
                    0.0,
                    d_att.data_mut().as_mut_ptr(), seq as isize, 1,
                );
                // d_V_h += attᵀ · d_ctx_h
                matrixmultiply::dgemm(
                    seq, seq, dk, 1.0,
                    att.data().as_ptr(), 1, seq as isize,
                    d_ctx.data().as_ptr().add(off), d as isize, 1,
                    1.0,
                    d_v.data_mut().as_mut_ptr().add(off), d as isize, 1,
                );
            }
            // softmax rows, then fold in the 1/√dk score scaling
            let mut d_scores = Tensor::zeros(vec![seq, seq]);
            for r in 0..seq {
                softmax_backward_row(att.row(r), d_att.row(r), d_scores.row_mut(r));
            }
            d_scores.scale(inv_sqrt);
            unsafe {
                // d_Q_h += d_scores · K_h
                matrixmultiply::dgemm(
                    seq, seq, dk, 1.0,
                    d_scores.data().as_ptr(), seq as isize, 1,
                    bc.k.data().as_ptr().add(off), d as isize, 1,
                    1.0,
                    d_q.data_mut().as_mut_ptr().add(off), d as isize, 1,
                );
                // d_K_h += d_scoresᵀ · Q_h
                matrixmultiply::dgemm(
                    seq, seq, dk, 1.0,
                    d_scores.data().as_ptr(), 1, seq as isize,
                    bc.q.data().as_ptr().add(off), d as isize, 1,
                    1.0,
                    d_k.data_mut().as_mut_ptr().add(off), d as isize, 1,
                );
            }
        }

        // input projections
        linear_backward(&bc.x, &block.wq, &d_q, &mut bg.wq, &mut bg.bq, &mut d_x);
        linear_backward(&bc.x, &block.wk, &d_k, &mut bg.wk, &mut bg.bk, &mut d_x);
        linear_backward(&bc.x, &block.wv, &d_v, &mut bg.wv, &mut bg.bv, &mut d_x);

        d_out = d_x;
    }

    // Embedding gradients
    if let Some(mask) = &cache.emb_drop {
        apply_mask(d_out.data_mut(), mask);
    }
    for pos in 0..seq {
        let g = d_out.row(pos);
        let tid = cache.token_ids[pos];
        let sid = cache.segment_ids[pos] as usize;
        add_slice(&mut grads.tok_emb.row_mut(tid)[..], g);
        add_slice(&mut grads.pos_emb.row_mut(pos)[..], g);
        add_slice(&mut grads.seg_emb.row_mut(sid)[..], g);
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
