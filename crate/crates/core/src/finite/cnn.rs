//! CNN forward/backward via im2col. Feature maps are `channels x (P·Q)`
//! matrices with column `i·Q + j`.

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;

use super::{Architecture, CnnHead, FiniteNetParams};
use crate::relu::C_SIGMA;

struct Dims {
    p: usize,
    q_img: usize,
    channels: Vec<usize>,
    q: usize,
    head: CnnHead,
}

fn dims(params: &FiniteNetParams) -> Dims {
    match params.arch() {
        Architecture::Cnn {
            width,
            height,
            in_channels,
            channels,
            geom,
            head,
        } => {
            let mut c = vec![*in_channels];
            c.extend(channels);
            Dims {
                p: *width,
                q_img: *height,
                channels: c,
                q: geom.filter_size(),
                head: *head,
            }
        }
        _ => unreachable!("cnn routine on a fully-connected architecture"),
    }
}

/// Rows `(c, a, b)`, columns `(i, j)`; zero outside the image.
fn im2col(x: &Array2<f64>, d: &Dims) -> Array2<f64> {
    let (p, qi, q) = (d.p, d.q_img, d.q);
    let r = (q / 2) as isize;
    let c = x.nrows();
    let mut out = Array2::zeros((c * q * q, p * qi));
    for ch in 0..c {
        for a in 0..q {
            for b in 0..q {
                let row = (ch * q + a) * q + b;
                for i in 0..p {
                    let si = i as isize + a as isize - r;
                    if si < 0 || si >= p as isize {
                        continue;
                    }
                    for j in 0..qi {
                        let sj = j as isize + b as isize - r;
                        if sj < 0 || sj >= qi as isize {
                            continue;
                        }
                        out[(row, i * qi + j)] = x[(ch, si as usize * qi + sj as usize)];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, channels: usize, d: &Dims) -> Array2<f64> {
    let (p, qi, q) = (d.p, d.q_img, d.q);
    let r = (q / 2) as isize;
    let mut out = Array2::zeros((channels, p * qi));
    for ch in 0..channels {
        for a in 0..q {
            for b in 0..q {
                let row = (ch * q + a) * q + b;
                for i in 0..p {
                    let si = i as isize + a as isize - r;
                    if si < 0 || si >= p as isize {
                        continue;
                    }
                    for j in 0..qi {
                        let sj = j as isize + b as isize - r;
                        if sj < 0 || sj >= qi as isize {
                            continue;
                        }
                        out[(ch, si as usize * qi + sj as usize)] += cols[(row, i * qi + j)];
                    }
                }
            }
        }
    }
    out
}

fn layer_scale(d: &Dims, h: usize) -> f64 {
    (C_SIGMA / (d.channels[h] * d.q * d.q) as f64).sqrt()
}

fn filters<'a>(params: &'a FiniteNetParams, d: &Dims, h: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((d.channels[h], d.channels[h - 1] * d.q * d.q), params.layer(h - 1))
        .expect("filter block matches its shape")
}

fn input_planes(x: &[f64], d: &Dims) -> Array2<f64> {
    let c0 = d.channels[0];
    let mut m = Array2::zeros((c0, d.p * d.q_img));
    for (pos, pixel) in x.chunks_exact(c0).enumerate() {
        for (c, v) in pixel.iter().enumerate() {
            m[(c, pos)] = *v;
        }
    }
    m
}

struct Pass {
    patches: Vec<Array2<f64>>,
    masks: Vec<Array2<bool>>,
    top: Array2<f64>,
    output: f64,
}

fn head_output(params: &FiniteNetParams, d: &Dims, top: &Array2<f64>) -> f64 {
    let w = params.layer(d.channels.len() - 1);
    match d.head {
        CnnHead::Dense => top.iter().zip(w).map(|(a, b)| a * b).sum(),
        CnnHead::GapScalar => {
            let n = top.ncols() as f64;
            top.rows().into_iter().zip(w).map(|(row, wa)| wa * row.sum() / n).sum()
        }
    }
}

fn run(params: &FiniteNetParams, x: &[f64]) -> Pass {
    let d = dims(params);
    let l = d.channels.len() - 1;
    let mut act = input_planes(x, &d);
    let mut patches = Vec::with_capacity(l);
    let mut masks = Vec::with_capacity(l);
    for h in 1..=l {
        let cols = im2col(&act, &d);
        let pre = filters(params, &d, h).dot(&cols);
        let s = layer_scale(&d, h);
        masks.push(pre.mapv(|v| v > 0.0));
        act = pre.mapv(|v| s * v.max(0.0));
        patches.push(cols);
    }
    let output = head_output(params, &d, &act);
    Pass {
        patches,
        masks,
        top: act,
        output,
    }
}

pub(super) fn forward(params: &FiniteNetParams, x: &[f64]) -> f64 {
    run(params, x).output
}

/// `(f, ∂f/∂θ)`.
pub(super) fn gradient(params: &FiniteNetParams, x: &[f64]) -> (f64, Vec<f64>) {
    let d = dims(params);
    let l = d.channels.len() - 1;
    let pass = run(params, x);
    let mut grad = vec![0.0; params.num_params()];
    let head = params.layer(l);
    let npos = pass.top.ncols();
    let mut delta = match d.head {
        CnnHead::Dense => {
            grad[params.layer_range(l)].copy_from_slice(pass.top.as_slice().expect("standard layout"));
            ArrayView2::from_shape(pass.top.raw_dim(), head).unwrap().to_owned()
        }
        CnnHead::GapScalar => {
            let n = npos as f64;
            for (g, row) in grad[params.layer_range(l)].iter_mut().zip(pass.top.rows()) {
                *g = row.sum() / n;
            }
            Array2::from_shape_fn(pass.top.raw_dim(), |(a, _)| head[a] / n)
        }
    };
    for h in (1..=l).rev() {
        let s = layer_scale(&d, h);
        Zip::from(&mut delta)
            .and(&pass.masks[h - 1])
            .for_each(|v, &m| *v = if m { s * *v } else { 0.0 });
        let dw = delta.dot(&pass.patches[h - 1].t());
        grad[params.layer_range(h - 1)].copy_from_slice(dw.as_slice().expect("standard layout"));
        if h > 1 {
            let dcols = filters(params, &d, h).t().dot(&delta);
            delta = col2im(&dcols, d.channels[h - 1], &d);
        }
    }
    (pass.output, grad)
}

/// One row per input holding the gradient restricted to trainable layers.
pub(super) fn trainable_features<X: AsRef<[f64]> + Sync>(params: &FiniteNetParams, inputs: &[X]) -> Array2<f64> {
    let ranges: Vec<_> = (0..params.num_layers())
        .filter(|&h| params.trainable()[h])
        .map(|h| params.layer_range(h))
        .collect();
    let width: usize = ranges.iter().map(|r| r.len()).sum();
    let rows: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|x| {
            let g = gradient(params, x.as_ref()).1;
            let mut row = Vec::with_capacity(width);
            for r in &ranges {
                row.extend_from_slice(&g[r.clone()]);
            }
            row
        })
        .collect();
    let mut m = Array2::zeros((inputs.len(), width));
    for (k, row) in rows.into_iter().enumerate() {
        m.row_mut(k).assign(&ndarray::Array1::from(row));
    }
    m
}
