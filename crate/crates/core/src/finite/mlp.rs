//! Batched MLP forward/backward. Inputs are columns of `d x n` matrices.

use ndarray::{Array1, Array2, ArrayView2, Zip};

use super::{Architecture, FiniteNetParams};
use crate::relu::C_SIGMA;

/// Activations `g⁽⁰⁾ … g⁽ᴸ⁾` and backprop vectors `b⁽¹⁾ … b⁽ᴸ⁺¹⁾` for a batch.
pub(super) struct BatchPass {
    pub gs: Vec<Array2<f64>>,
    pub bs: Vec<Array2<f64>>,
    pub outputs: Array1<f64>,
}

fn dims(params: &FiniteNetParams) -> Vec<usize> {
    match params.arch() {
        Architecture::Mlp { input_dim, hidden } => {
            let mut d = vec![*input_dim];
            d.extend(hidden);
            d
        }
        _ => unreachable!("mlp routine on a convolutional architecture"),
    }
}

fn weight(params: &FiniteNetParams, h: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), params.layer(h)).expect("layer block matches its shape")
}

fn columns<X: AsRef<[f64]>>(inputs: &[X], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((d, inputs.len()));
    for (k, x) in inputs.iter().enumerate() {
        m.column_mut(k).assign(&ndarray::aview1(x.as_ref()));
    }
    m
}

pub(super) fn batch_pass<X: AsRef<[f64]>>(params: &FiniteNetParams, inputs: &[X]) -> BatchPass {
    let d = dims(params);
    let l = d.len() - 1;
    let mut gs = vec![columns(inputs, d[0])];
    let mut masks = Vec::with_capacity(l);
    for h in 1..=l {
        let f = weight(params, h - 1, d[h], d[h - 1]).dot(&gs[h - 1]);
        let s = (C_SIGMA / d[h] as f64).sqrt();
        masks.push(f.mapv(|v| v > 0.0));
        gs.push(f.mapv(|v| s * v.max(0.0)));
    }
    let head = weight(params, l, 1, d[l]);
    let outputs = head.dot(&gs[l]).row(0).to_owned();

    let mut bs = vec![Array2::ones((1, inputs.len()))];
    for h in (1..=l).rev() {
        let s = (C_SIGMA / d[h] as f64).sqrt();
        let next = bs.last().unwrap();
        let mut b = weight(params, h, next.nrows(), d[h]).t().dot(next);
        Zip::from(&mut b).and(&masks[h - 1]).for_each(|v, &m| *v = if m { s * *v } else { 0.0 });
        bs.push(b);
    }
    bs.reverse();
    BatchPass { gs, bs, outputs }
}

pub(super) fn forward(params: &FiniteNetParams, x: &[f64]) -> f64 {
    let d = dims(params);
    let mut g = ndarray::aview1(x).to_owned();
    for h in 1..d.len() {
        let s = (C_SIGMA / d[h] as f64).sqrt();
        g = weight(params, h - 1, d[h], d[h - 1]).dot(&g).mapv(|v| s * v.max(0.0));
    }
    ndarray::aview1(params.layer(d.len() - 1)).dot(&g)
}

/// `Σᵢ rᵢ ∂f(xᵢ)/∂θ` from a completed batch pass.
pub(super) fn weighted_gradient(params: &FiniteNetParams, pass: &BatchPass, r: &[f64]) -> Vec<f64> {
    let r = ndarray::aview1(r);
    let mut out = vec![0.0; params.num_params()];
    for h in 0..pass.bs.len() {
        let br = &pass.bs[h] * &r.broadcast(pass.bs[h].raw_dim()).unwrap();
        let grad = br.dot(&pass.gs[h].t());
        let range = params.layer_range(h);
        for (o, v) in out[range].iter_mut().zip(grad.iter()) {
            *o = *v;
        }
    }
    out
}

pub(super) fn gradient(params: &FiniteNetParams, x: &[f64]) -> Vec<f64> {
    let pass = batch_pass(params, &[x]);
    weighted_gradient(params, &pass, &[1.0])
}

/// `Σ_h (B_hᵀ B'_h) ⊙ (G_{h-1}ᵀ G'_{h-1})` over trainable layers.
fn factored(params: &FiniteNetParams, a: &BatchPass, b: &BatchPass) -> Array2<f64> {
    let mut k = Array2::zeros((a.outputs.len(), b.outputs.len()));
    for (h, &t) in params.trainable().iter().enumerate() {
        if t {
            k += &(a.bs[h].t().dot(&b.bs[h]) * a.gs[h].t().dot(&b.gs[h]));
        }
    }
    k
}

pub(super) fn empirical_kernel(params: &FiniteNetParams, x: &[f64], x2: &[f64]) -> f64 {
    let pass = batch_pass(params, &[x, x2]);
    factored(params, &pass, &pass)[(0, 1)]
}

pub(super) fn gram<X: AsRef<[f64]>>(params: &FiniteNetParams, inputs: &[X]) -> Array2<f64> {
    let pass = batch_pass(params, inputs);
    factored(params, &pass, &pass)
}

pub(super) fn cross<X: AsRef<[f64]>>(params: &FiniteNetParams, queries: &[X], train: &[X]) -> Array2<f64> {
    let a = batch_pass(params, queries);
    let b = batch_pass(params, train);
    factored(params, &a, &b)
}
