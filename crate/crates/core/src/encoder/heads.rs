//! Task heads on the final layer: span prediction and sequence
//! classification, with their loss gradients.

use crate::tensor::{cross_entropy, softmax_inplace, Tensor, TensorError};

use super::forward::ForwardCache;
use super::{HiddenStateTrace, Model, SPAN_CAP};

/// Start/end distributions over positions plus the constrained argmax span.
#[derive(Debug, Clone)]
pub struct SpanPrediction {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    /// Inclusive (start, end), start ≤ end, end − start ≤ span cap.
    pub span: (usize, usize),
}

fn masked_softmax(logits: &[f64], real_len: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    probs[..real_len].copy_from_slice(&logits[..real_len]);
    softmax_inplace(&mut probs[..real_len]);
    probs
}

/// Argmax of start·end probability over pairs with s ≤ e ≤ s + cap,
/// both within the non-pad range. Ties resolve to the earliest pair.
pub fn select_span(
    start_probs: &[f64],
    end_probs: &[f64],
    real_len: usize,
    span_cap: usize,
) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..real_len {
        for e in s..(s + span_cap + 1).min(real_len) {
            let score = start_probs[s] * end_probs[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

fn span_logits(model: &Model, final_layer: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let seq = final_layer.rows();
    let mut start = Vec::with_capacity(seq);
    let mut end = Vec::with_capacity(seq);
    let w = &model.span_head.w;
    let b = model.span_head.b.data();
    for pos in 0..seq {
        let row = final_layer.row(pos);
        let mut s = b[0];
        let mut e = b[1];
        for (i, &x) in row.iter().enumerate() {
            s += x * w.at(i, 0);
            e += x * w.at(i, 1);
        }
        start.push(s);
        end.push(e);
    }
    (start, end)
}

/// Span head: linear d_model→2 on the final layer, softmax over non-pad
/// positions, constrained argmax for the predicted span.
pub fn span_head(model: &Model, trace: &HiddenStateTrace) -> SpanPrediction {
    let final_layer = trace.layers.last().expect("trace has layers");
    let real_len = trace.input.real_len();
    let (start_logits, end_logits) = span_logits(model, final_layer);
    let start_probs = masked_softmax(&start_logits, real_len);
    let end_probs = masked_softmax(&end_logits, real_len);
    let span = select_span(&start_probs, &end_probs, real_len, SPAN_CAP);
    SpanPrediction {
        start_probs,
        end_probs,
        span,
    }
}

/// Classification head: linear + softmax over the `[CLS]` vector.
pub fn seqclass_head(model: &Model, trace: &HiddenStateTrace) -> Vec<f64> {
    let final_layer = trace.layers.last().expect("trace has layers");
    let cls = final_layer.row(0);
    let w = &model.class_head.w;
    let b = model.class_head.b.data();
    let n = model.n_classes();
    let mut logits = b.to_vec();
    for (i, &x) in cls.iter().enumerate() {
        for (c, logit) in logits.iter_mut().enumerate().take(n) {
            *logit += x * w.at(i, c);
        }
    }
    softmax_inplace(&mut logits);
    logits
}

/// Loss + gradient of the span objective. Returns (loss, d_final) and
/// accumulates head gradients.
pub fn span_loss_backward(
    model: &Model,
    cache: &ForwardCache,
    gold: (usize, usize),
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Result<(f64, Tensor), TensorError> {
    let final_layer = cache.final_layer();
    let seq = final_layer.rows();
    let real_len = cache.real_len();
    let (start_logits, end_logits) = span_logits(model, final_layer);
    let start_probs = masked_softmax(&start_logits, real_len);
    let end_probs = masked_softmax(&end_logits, real_len);
    let loss = 0.5 * (cross_entropy(&start_probs[..real_len], gold.0)?
        + cross_entropy(&end_probs[..real_len], gold.1)?);

    // d logits: 0.5 (p − onehot), zero on pads.
    let mut d_start = start_probs;
    let mut d_end = end_probs;
    d_start[gold.0] -= 1.0;
    d_end[gold.1] -= 1.0;
    for v in d_start.iter_mut().chain(d_end.iter_mut()) {
        *v *= 0.5;
    }

    let w = &model.span_head.w;
    let d = final_layer.cols();
    let mut d_final = Tensor::zeros(vec![seq, d]);
    for pos in 0..real_len {
        let row = final_layer.row(pos);
        let (ds, de) = (d_start[pos], d_end[pos]);
        db.data_mut()[0] += ds;
        db.data_mut()[1] += de;
        let dfr = d_final.row_mut(pos);
        for i in 0..d {
            dw.data_mut()[i * 2] += row[i] * ds;
            dw.data_mut()[i * 2 + 1] += row[i] * de;
            dfr[i] = ds * w.at(i, 0) + de * w.at(i, 1);
        }
    }
    Ok((loss, d_final))
}

/// Loss + gradient of the classification objective on the `[CLS]` vector.
pub fn class_loss_backward(
    model: &Model,
    cache: &ForwardCache,
    gold: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Result<(f64, Tensor), TensorError> {
    let final_layer = cache.final_layer();
    let seq = final_layer.rows();
    let d = final_layer.cols();
    let n = model.n_classes();
    let cls = final_layer.row(0);
    let w = &model.class_head.w;
    let mut probs = model.class_head.b.data().to_vec();
    for (i, &x) in cls.iter().enumerate() {
        for (c, p) in probs.iter_mut().enumerate().take(n) {
            *p += x * w.at(i, c);
        }
    }
    softmax_inplace(&mut probs);
    let loss = cross_entropy(&probs, gold)?;

    let mut d_logits = probs;
    d_logits[gold] -= 1.0;
    let mut d_final = Tensor::zeros(vec![seq, d]);
    let d_cls = d_final.row_mut(0);
    for (c, &dl) in d_logits.iter().enumerate() {
        db.data_mut()[c] += dl;
        for i in 0..d {
            dw.data_mut()[i * n + c] += cls[i] * dl;
            d_cls[i] += dl * w.at(i, c);
        }
    }
    Ok((loss, d_final))
}
