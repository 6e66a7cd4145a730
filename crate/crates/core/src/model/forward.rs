//! Forward pass with cached activations, and its exact backward pass.

use rand::Rng;
use rayon::prelude::*;

use super::mask::{build_mask, AttentionMask};
use super::params::{LayerNorm, ModelParams};
use super::{HeadKind, Model, ModelError, PredictionOutput};
use crate::encoding::ObservationTriplet;
use crate::etl::ShiftRecord;
use crate::linalg::{add_assign, axpy, dot, softmax_in_place, Matrix};

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn ln_forward(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let d = x.cols;
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = ln.gain[j] * xhat.data[i * d + j] + ln.bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(dy: &Matrix, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            grad.gain[j] += g[j] * xh[j];
            grad.bias[j] += g[j];
            dxhat[j] = g[j] * ln.gain[j];
        }
        let sum: f64 = dxhat.iter().sum();
        let sum_xh = dot(&dxhat, xh);
        let scale = cache.inv_std[i] / d as f64;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, `n × n` attention weights; disallowed entries are exactly 0.
    attn: Vec<Matrix>,
    ctx: Matrix,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Matrix,
    f1: Matrix,
    g: Matrix,
    drop2: Option<Vec<f64>>,
}

/// Activations of one forward pass, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<ObservationTriplet>,
    hidden_t: Vec<Vec<f64>>,
    hidden_v: Vec<Vec<f64>>,
    placeholder: bool,
    mask: AttentionMask,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    c: Matrix,
    u: Matrix,
    pub alpha: Vec<f64>,
    static_in: Vec<f64>,
    z1: Vec<f64>,
    z: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardCache {
    /// Attention weights of layer `layer`, head `head`.
    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.blocks[layer].attn[head]
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }
}

fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn check_inputs(model: &Model, window: &[ObservationTriplet], static_vector: &[f64]) -> Result<(), ModelError> {
    let p = &model.params;
    if static_vector.len() != p.static_dim() {
        return Err(ModelError::Shape(format!(
            "static vector has {} entries, model expects {}",
            static_vector.len(),
            p.static_dim()
        )));
    }
    if let Some(bad) = window.iter().find(|o| o.f >= p.vocab_size()) {
        return Err(ModelError::Shape(format!(
            "variable code {} outside vocabulary of {}",
            bad.f,
            p.vocab_size()
        )));
    }
    if let Some(pos) = &model.positions {
        if window.len() > pos.capacity() {
            return Err(ModelError::Shape(format!(
                "window of {} exceeds position capacity {}",
                window.len(),
                pos.capacity()
            )));
        }
    }
    Ok(())
}

/// Runs the model on one window; `dropout` enables training-mode dropout.
pub fn forward_cached<R: Rng>(
    model: &Model,
    window: &[ObservationTriplet],
    static_vector: &[f64],
    mut dropout: Option<&mut R>,
) -> Result<ForwardCache, ModelError> {
    check_inputs(model, window, static_vector)?;
    let p = &model.params;
    let cfg = &model.config;
    let d = cfg.d;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rate = cfg.dropout;

    let placeholder = window.is_empty();
    let n = window.len().max(1);
    let mut x = Matrix::zeros(n, d);
    let mut hidden_t = Vec::with_capacity(window.len());
    let mut hidden_v = Vec::with_capacity(window.len());
    if placeholder {
        x.row_mut(0).copy_from_slice(&p.placeholder);
    } else {
        for (i, obs) in window.iter().enumerate() {
            if !obs.t.is_finite() || !obs.v.is_finite() {
                return Err(ModelError::NonFinite { layer: 0 });
            }
            let ht = p.cve_t.hidden(obs.t);
            let hv = p.cve_v.hidden(obs.v);
            let row = x.row_mut(i);
            row.copy_from_slice(p.feature_table.row(obs.f));
            p.cve_t.accumulate(&ht, row);
            p.cve_v.accumulate(&hv, row);
            hidden_t.push(ht);
            hidden_v.push(hv);
        }
    }
    if let Some(pos) = &model.positions {
        for i in 0..n {
            add_assign(x.row_mut(i), pos.table.row(i));
        }
    }

    let mask = build_mask(n, cfg.attention);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for (layer, b) in p.blocks.iter().enumerate() {
        let (h1, ln1) = ln_forward(&x, &b.ln1);
        let q = b.wq.apply_rows(&h1);
        let k = b.wk.apply_rows(&h1);
        let v = b.wv.apply_rows(&h1);
        let mut ctx = Matrix::zeros(n, d);
        let mut attn = Vec::with_capacity(heads);
        let mut allowed = Vec::with_capacity(n);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                allowed.clear();
                let mut scores = Vec::with_capacity(n);
                for j in 0..n {
                    if mask.allowed(i, j) {
                        allowed.push(j);
                        scores.push(dot(qi, &k.row(j)[cols.clone()]) * scale);
                    }
                }
                softmax_in_place(&mut scores);
                let arow = a.row_mut(i);
                for (&j, &w) in allowed.iter().zip(&scores) {
                    arow[j] = w;
                }
                let out = &mut ctx.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &w) in allowed.iter().zip(&scores) {
                    axpy(w, &v.row(j)[cols.clone()], out);
                }
            }
            attn.push(a);
        }
        let mut o = b.wo.apply_rows(&ctx);
        let drop1 = dropout.as_deref_mut().filter(|_| rate > 0.0).map(|rng| {
            let m = dropout_mask(n * d, rate, rng);
            for (x, s) in o.data.iter_mut().zip(&m) {
                *x *= s;
            }
            m
        });
        add_assign(&mut x.data, &o.data);

        let (h2, ln2) = ln_forward(&x, &b.ln2);
        let f1 = b.ff1.apply_rows(&h2);
        let mut g = f1.clone();
        g.data.iter_mut().for_each(|z| *z = gelu(*z));
        let mut f2 = b.ff2.apply_rows(&g);
        let drop2 = dropout.as_deref_mut().filter(|_| rate > 0.0).map(|rng| {
            let m = dropout_mask(n * d, rate, rng);
            for (x, s) in f2.data.iter_mut().zip(&m) {
                *x *= s;
            }
            m
        });
        add_assign(&mut x.data, &f2.data);
        if !x.is_finite() {
            return Err(ModelError::NonFinite { layer: layer + 1 });
        }
        blocks.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ctx,
            drop1,
            ln2,
            h2,
            f1,
            g,
            drop2,
        });
    }

    let (c, final_ln) = ln_forward(&x, &p.final_ln);
    let mut u = Matrix::zeros(n, d);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let ci = c.row(i);
        let ui = u.row_mut(i);
        for (o, slot) in ui.iter_mut().enumerate() {
            *slot = dot(p.fusion_w.row(o), ci).tanh();
        }
        scores.push(dot(&p.fusion_a, u.row(i)));
    }
    let mut alpha = scores;
    softmax_in_place(&mut alpha);
    let mut z = vec![0.0; d];
    for (i, &a) in alpha.iter().enumerate() {
        axpy(a, c.row(i), &mut z);
    }

    let mut z1 = p.static1.apply(static_vector);
    z1.iter_mut().for_each(|v| *v = v.tanh());
    let mut e_s = p.static2.apply(&z1);
    e_s.iter_mut().for_each(|v| *v = v.tanh());
    z.extend_from_slice(&e_s);

    let logits = p.classifier.apply(&z);
    let probabilities = match cfg.head {
        HeadKind::FourClass => {
            let mut pr = logits;
            softmax_in_place(&mut pr);
            pr
        }
        HeadKind::BinaryDelirium => vec![sigmoid(logits[0])],
    };
    if !probabilities.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite {
            layer: p.blocks.len() + 1,
        });
    }
    Ok(ForwardCache {
        tokens: window.to_vec(),
        hidden_t,
        hidden_v,
        placeholder,
        mask,
        blocks,
        final_ln,
        c,
        u,
        alpha,
        static_in: static_vector.to_vec(),
        z1,
        z,
        probabilities,
    })
}

/// Inference-mode forward pass.
pub fn forward(model: &Model, window: &[ObservationTriplet], static_vector: &[f64]) -> Result<PredictionOutput, ModelError> {
    let cache = forward_cached::<rand_chacha::ChaCha8Rng>(model, window, static_vector, None)?;
    Ok(PredictionOutput::from_probabilities(cache.probabilities))
}

/// Weighted negative log-likelihood of one sample and its logit gradient,
/// both scaled by `scale`.
pub fn sample_loss(head: HeadKind, probabilities: &[f64], target: usize, weight: f64, scale: f64) -> (f64, Vec<f64>) {
    match head {
        HeadKind::FourClass => {
            let loss = -weight * probabilities[target].max(f64::MIN_POSITIVE).ln() * scale;
            let grad = probabilities
                .iter()
                .enumerate()
                .map(|(c, &p)| weight * scale * (p - if c == target { 1.0 } else { 0.0 }))
                .collect();
            (loss, grad)
        }
        HeadKind::BinaryDelirium => {
            let p = probabilities[0];
            let y = target as f64;
            let lp = if target == 1 { p } else { 1.0 - p };
            let loss = -weight * lp.max(f64::MIN_POSITIVE).ln() * scale;
            (loss, vec![weight * scale * (p - y)])
        }
    }
}

/// Mean weighted cross-entropy over a batch.
pub fn loss(head: HeadKind, predictions: &[PredictionOutput], targets: &[usize], class_weights: &[f64]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / predictions.len() as f64;
    predictions
        .iter()
        .zip(targets)
        .map(|(p, &t)| sample_loss(head, &p.probabilities, t, class_weights[t], scale).0)
        .sum()
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to the logits is `dlogits`.
pub fn backward(model: &Model, cache: &ForwardCache, dlogits: &[f64], grads: &mut Gradients) {
    let p = &model.params;
    let cfg = &model.config;
    let d = cfg.d;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = cache.c.rows;

    let mut dz = vec![0.0; p.classifier.input_dim()];
    p.classifier.backward(&cache.z, dlogits, &mut grads.classifier, Some(&mut dz));

    let e_s = &cache.z[d..];
    let mut dpre2: Vec<f64> = dz[d..]
        .iter()
        .zip(e_s)
        .map(|(g, y)| g * (1.0 - y * y))
        .collect();
    let mut dz1 = vec![0.0; cache.z1.len()];
    p.static2.backward(&cache.z1, &dpre2, &mut grads.static2, Some(&mut dz1));
    dpre2.clear();
    let dpre1: Vec<f64> = dz1.iter().zip(&cache.z1).map(|(g, y)| g * (1.0 - y * y)).collect();
    p.static1.backward(&cache.static_in, &dpre1, &mut grads.static1, None);

    let de_t = &dz[..d];
    let mut dc = Matrix::zeros(n, d);
    let dalpha: Vec<f64> = (0..n).map(|i| dot(de_t, cache.c.row(i))).collect();
    let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
    let mut dpre = vec![0.0; d];
    for i in 0..n {
        let a = cache.alpha[i];
        axpy(a, de_t, dc.row_mut(i));
        let ds = a * (dalpha[i] - mean);
        let ui = cache.u.row(i);
        axpy(ds, ui, &mut grads.fusion_a);
        for o in 0..d {
            dpre[o] = ds * p.fusion_a[o] * (1.0 - ui[o] * ui[o]);
        }
        let ci = cache.c.row(i);
        for (o, &g) in dpre.iter().enumerate() {
            if g != 0.0 {
                axpy(g, ci, grads.fusion_w.row_mut(o));
                axpy(g, p.fusion_w.row(o), &mut dc.data[i * d..(i + 1) * d]);
            }
        }
    }

    let mut dx = ln_backward(&dc, &cache.final_ln, &p.final_ln, &mut grads.final_ln);

    for (l, b) in p.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[l];
        let gb = &mut grads.blocks[l];

        let mut df2 = dx.clone();
        if let Some(m) = &bc.drop2 {
            for (g, s) in df2.data.iter_mut().zip(m) {
                *g *= s;
            }
        }
        let mut dg = b.ff2.backward_rows(&bc.g, &df2, &mut gb.ff2);
        for (g, &pre) in dg.data.iter_mut().zip(&bc.f1.data) {
            *g *= gelu_grad(pre);
        }
        let dh2 = b.ff1.backward_rows(&bc.h2, &dg, &mut gb.ff1);
        let dmid = ln_backward(&dh2, &bc.ln2, &b.ln2, &mut gb.ln2);
        add_assign(&mut dx.data, &dmid.data);

        let mut do_ = dx.clone();
        if let Some(m) = &bc.drop1 {
            for (g, s) in do_.data.iter_mut().zip(m) {
                *g *= s;
            }
        }
        let dctx = b.wo.backward_rows(&bc.ctx, &do_, &mut gb.wo);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut da = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &bc.attn[h];
            for i in 0..n {
                let dci = &dctx.row(i)[cols.clone()];
                let arow = a.row(i);
                let mut weighted = 0.0;
                for j in 0..n {
                    if cache.mask.allowed(i, j) {
                        da[j] = dot(dci, &bc.v.row(j)[cols.clone()]);
                        weighted += arow[j] * da[j];
                        axpy(arow[j], dci, &mut dv.data[j * d + h * dh..j * d + (h + 1) * dh]);
                    }
                }
                let qi: Vec<f64> = bc.q.row(i)[cols.clone()].to_vec();
                for j in 0..n {
                    if !cache.mask.allowed(i, j) {
                        continue;
                    }
                    let ds = arow[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &bc.k.row(j)[cols.clone()], &mut dq.data[i * d + h * dh..i * d + (h + 1) * dh]);
                    axpy(ds, &qi, &mut dk.data[j * d + h * dh..j * d + (h + 1) * dh]);
                }
            }
        }
        let mut dh1 = b.wq.backward_rows(&bc.h1, &dq, &mut gb.wq);
        add_assign(&mut dh1.data, &b.wk.backward_rows(&bc.h1, &dk, &mut gb.wk).data);
        add_assign(&mut dh1.data, &b.wv.backward_rows(&bc.h1, &dv, &mut gb.wv).data);
        let din = ln_backward(&dh1, &bc.ln1, &b.ln1, &mut gb.ln1);
        add_assign(&mut dx.data, &din.data);
    }

    if cache.placeholder {
        add_assign(&mut grads.placeholder, dx.row(0));
        return;
    }
    for (i, obs) in cache.tokens.iter().enumerate() {
        let de = dx.row(i);
        add_assign(grads.feature_table.row_mut(obs.f), de);
        p.cve_t.backward(obs.t, &cache.hidden_t[i], de, &mut grads.cve_t);
        p.cve_v.backward(obs.v, &cache.hidden_v[i], de, &mut grads.cve_v);
    }
}

/// One prediction per record, in order.
pub fn predict_batch(model: &Model, records: &[ShiftRecord]) -> Result<Vec<PredictionOutput>, ModelError> {
    records
        .par_iter()
        .map(|r| forward(model, &r.window, &r.static_vector))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, ModelConfig};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(attention: AttentionKind, positions: bool) -> Model {
        let config = ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            ffn_hidden: 12,
            static_hidden: 5,
            attention,
            positions,
            max_positions: 64,
            dropout: 0.0,
            seed: 3,
            ..ModelConfig::default()
        };
        Model::new(config, 6, 3).unwrap()
    }

    fn window(seed: u64, n: usize) -> Vec<ObservationTriplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ObservationTriplet {
                t: rng.random(),
                f: rng.random_range(0..6),
                v: rng.random_range(-2.0..2.0),
            })
            .collect()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = small_model(AttentionKind::Full, false);
        for n in [0, 1, 5, 9] {
            let out = forward(&m, &window(n as u64, n), &[0.1, -0.3, 1.0]).unwrap();
            assert_abs_diff_eq!(out.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(out.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn shape_errors() {
        let m = small_model(AttentionKind::Full, false);
        assert!(matches!(forward(&m, &[], &[0.0]), Err(ModelError::Shape(_))));
        let bad = [ObservationTriplet { t: 0.5, f: 6, v: 0.0 }];
        assert!(matches!(forward(&m, &bad, &[0.0; 3]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn masked_weights_are_zero() {
        let m = small_model(AttentionKind::SlidingWindowGlobal { window: 1, global: 1 }, true);
        let cache = forward_cached::<ChaCha8Rng>(&m, &window(4, 7), &[0.0; 3], None).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let a = cache.attention(l, h);
                for i in 0..7 {
                    for j in 0..7 {
                        if !cache.mask().allowed(i, j) {
                            assert_eq!(a.get(i, j), 0.0);
                        }
                    }
                    assert_abs_diff_eq!(a.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_examples() {
        let perfect = PredictionOutput::from_probabilities(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(loss(HeadKind::FourClass, &[perfect], &[1], &[1.0; 4]), 0.0);
        let uniform = PredictionOutput::from_probabilities(vec![0.25; 4]);
        assert_abs_diff_eq!(loss(HeadKind::FourClass, &[uniform], &[2], &[1.0; 4]), 4f64.ln(), epsilon = 1e-12);
        // Hand oracle: (-ln 0.7 * 1 + -ln 0.2 * 3) / 2.
        let a = PredictionOutput::from_probabilities(vec![0.7, 0.1, 0.1, 0.1]);
        let b = PredictionOutput::from_probabilities(vec![0.5, 0.2, 0.2, 0.1]);
        let w = [1.0, 3.0, 1.0, 1.0];
        let expected = (-(0.7f64).ln() - 3.0 * (0.2f64).ln()) / 2.0;
        assert_abs_diff_eq!(loss(HeadKind::FourClass, &[a, b], &[0, 1], &w), expected, epsilon = 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(PredictionOutput::from_probabilities(vec![0.4, 0.4, 0.1, 0.1]).predicted_class, 0);
        assert_eq!(PredictionOutput::from_probabilities(vec![0.1, 0.3, 0.3, 0.3]).predicted_class, 1);
    }
}
