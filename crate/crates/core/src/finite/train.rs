//! Full-batch gradient descent on `½ Σᵢ (κ f(θ, xᵢ) − yᵢ)²`.

use rayon::prelude::*;

use super::{cnn, mlp, Architecture, FiniteNetParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: FiniteNetParams,
    pub kappa: f64,
    pub step_size: f64,
    /// `u(t) = κ f(θ(t), xᵢ)` over the training set, at the current parameters.
    pub outputs: Vec<f64>,
    pub loss: f64,
    pub steps: usize,
    /// Outputs recorded before every step, plus the final ones.
    pub output_history: Vec<Vec<f64>>,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: FiniteNetParams, kappa: f64, step_size: f64) -> Self {
        Self {
            params,
            kappa,
            step_size,
            outputs: Vec::new(),
            loss: f64::NAN,
            steps: 0,
            output_history: Vec::new(),
            loss_history: Vec::new(),
        }
    }
}

fn check_data<X: AsRef<[f64]>>(params: &FiniteNetParams, inputs: &[X], targets: &[f64]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for x in inputs {
        params.check_input(x.as_ref())?;
    }
    Ok(())
}

/// Raw outputs `f(θ, xᵢ)` and `Σᵢ rᵢ(f) ∂f(xᵢ)/∂θ` where the weights are
/// computed from the outputs.
fn outputs_and_gradient<X, R>(params: &FiniteNetParams, inputs: &[X], weights: R) -> (Vec<f64>, Vec<f64>)
where
    X: AsRef<[f64]> + Sync,
    R: Fn(&[f64]) -> Vec<f64>,
{
    match params.arch() {
        Architecture::Mlp { .. } => {
            let pass = mlp::batch_pass(params, inputs);
            let f = pass.outputs.to_vec();
            let r = weights(&f);
            let g = mlp::weighted_gradient(params, &pass, &r);
            (f, g)
        }
        Architecture::Cnn { .. } => {
            let per: Vec<(f64, Vec<f64>)> = inputs.par_iter().map(|x| cnn::gradient(params, x.as_ref())).collect();
            let f: Vec<f64> = per.iter().map(|p| p.0).collect();
            let r = weights(&f);
            let mut g = vec![0.0; params.num_params()];
            for ((_, gi), ri) in per.iter().zip(&r) {
                for (a, b) in g.iter_mut().zip(gi) {
                    *a += ri * b;
                }
            }
            (f, g)
        }
    }
}

/// `u = κ f(θ, xᵢ)` at the given parameters.
pub fn network_outputs<X: AsRef<[f64]> + Sync>(params: &FiniteNetParams, kappa: f64, inputs: &[X]) -> Result<Vec<f64>> {
    for x in inputs {
        params.check_input(x.as_ref())?;
    }
    Ok(match params.arch() {
        Architecture::Mlp { .. } => mlp::batch_pass(params, inputs).outputs.iter().map(|f| kappa * f).collect(),
        Architecture::Cnn { .. } => inputs.par_iter().map(|x| kappa * cnn::forward(params, x.as_ref())).collect(),
    })
}

fn squared_loss(u: &[f64], y: &[f64]) -> f64 {
    0.5 * u.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

/// One update `θ ← θ − η ∇ℓ(θ)`, touching trainable layers only. Updates
/// `outputs`/`loss` to the pre-step values and returns the step's gradient.
fn step<X: AsRef<[f64]> + Sync>(state: &mut TrainState, inputs: &[X], targets: &[f64]) -> Result<Vec<f64>> {
    let kappa = state.kappa;
    let (f, grad) = outputs_and_gradient(&state.params, inputs, |f| {
        f.iter().zip(targets).map(|(fi, yi)| kappa * (kappa * fi - yi)).collect()
    });
    let u: Vec<f64> = f.iter().map(|v| kappa * v).collect();
    let loss = squared_loss(&u, targets);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: state.steps,
            loss,
        });
    }
    state.outputs = u.clone();
    state.loss = loss;
    state.output_history.push(u);
    state.loss_history.push(loss);
    let eta = state.step_size;
    for h in 0..state.params.num_layers() {
        if !state.params.trainable()[h] {
            continue;
        }
        let range = state.params.layer_range(h);
        for (w, g) in state.params.weights_mut()[range.clone()].iter_mut().zip(&grad[range]) {
            *w -= eta * g;
        }
    }
    state.steps += 1;
    Ok(grad)
}

fn refresh<X: AsRef<[f64]> + Sync>(state: &mut TrainState, inputs: &[X], targets: &[f64]) -> Result<()> {
    let u = network_outputs(&state.params, state.kappa, inputs)?;
    let loss = squared_loss(&u, targets);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: state.steps,
            loss,
        });
    }
    state.outputs = u.clone();
    state.loss = loss;
    state.output_history.push(u);
    state.loss_history.push(loss);
    Ok(())
}

/// Runs `steps` full-batch updates. On return `outputs` and `loss` describe
/// the final parameters, and the histories hold `steps + 1` entries more.
pub fn train_full_batch<X: AsRef<[f64]> + Sync>(
    mut state: TrainState,
    inputs: &[X],
    targets: &[f64],
    steps: usize,
) -> Result<TrainState> {
    check_data(&state.params, inputs, targets)?;
    for _ in 0..steps {
        step(&mut state, inputs, targets)?;
    }
    refresh(&mut state, inputs, targets)?;
    Ok(state)
}

/// Trains until `loss <= target_loss` or `max_steps` updates, whichever
/// comes first. Histories are not recorded to keep long runs lean.
pub fn train_until<X: AsRef<[f64]> + Sync>(
    mut state: TrainState,
    inputs: &[X],
    targets: &[f64],
    target_loss: f64,
    max_steps: usize,
) -> Result<TrainState> {
    check_data(&state.params, inputs, targets)?;
    loop {
        let u = network_outputs(&state.params, state.kappa, inputs)?;
        state.loss = squared_loss(&u, targets);
        state.outputs = u;
        if !state.loss.is_finite() {
            return Err(Error::Diverged {
                step: state.steps,
                loss: state.loss,
            });
        }
        if state.loss <= target_loss || state.steps >= max_steps {
            return Ok(state);
        }
        step(&mut state, inputs, targets)?;
        state.output_history.clear();
        state.loss_history.clear();
    }
}

/// Gradient of the loss at the current parameters (full vector, frozen
/// layers included).
pub fn loss_gradient<X: AsRef<[f64]> + Sync>(state: &TrainState, inputs: &[X], targets: &[f64]) -> Result<Vec<f64>> {
    check_data(&state.params, inputs, targets)?;
    let kappa = state.kappa;
    Ok(outputs_and_gradient(&state.params, inputs, |f| {
        f.iter().zip(targets).map(|(fi, yi)| kappa * (kappa * fi - yi)).collect()
    })
    .1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite::{empirical_kernel, init_net, param_gradient, CnnHead};
    use crate::tensor::PatchGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.into_iter().map(|a| a / n).collect()
            })
            .collect()
    }

    #[test]
    fn one_step_is_the_gradient_update() {
        let xs = unit_points(3, 4, 1);
        let ys = [0.5, -0.2, 0.1];
        let p = init_net(&Architecture::mlp(4, vec![16, 8]), 2).unwrap();
        let (kappa, eta) = (0.7, 0.05);
        let mut expected = p.weights().to_vec();
        for (x, y) in xs.iter().zip(&ys) {
            let f = crate::finite::forward(&p, x).unwrap();
            let g = param_gradient(&p, x).unwrap();
            for (w, gi) in expected.iter_mut().zip(&g.0) {
                *w -= eta * kappa * (kappa * f - y) * gi;
            }
        }
        let out = train_full_batch(TrainState::new(p, kappa, eta), &xs, &ys, 1).unwrap();
        for (a, b) in out.params.weights().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert_eq!(out.steps, 1);
        assert_eq!(out.loss_history.len(), 2);
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let arch = Architecture::Cnn {
            width: 3,
            height: 3,
            in_channels: 1,
            channels: vec![4, 4],
            geom: PatchGeometry::new(3).unwrap(),
            head: CnnHead::GapScalar,
        };
        let p = init_net(&arch, 3).unwrap();
        let xs = unit_points(2, 9, 4);
        let out = train_full_batch(TrainState::new(p.clone(), 1.0, 0.1), &xs, &[1.0, -1.0], 3).unwrap();
        assert_eq!(out.params.layer(0), p.layer(0));
        assert_eq!(out.params.layer(2), p.layer(2));
        assert_ne!(out.params.layer(1), p.layer(1));
    }

    #[test]
    fn single_point_loss_decreases() {
        let xs = unit_points(1, 3, 5);
        let p = init_net(&Architecture::mlp(3, vec![1024]), 6).unwrap();
        let out = train_full_batch(TrainState::new(p, 0.1, 0.1), &xs, &[1.0], 100).unwrap();
        for w in out.loss_history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn one_step_output_change_follows_kernel() {
        let xs = unit_points(4, 5, 7);
        let ys = [1.0, -1.0, 0.5, -0.5];
        let p = init_net(&Architecture::mlp(5, vec![256, 256]), 8).unwrap();
        let (kappa, eta) = (0.5, 0.01);
        let h: Vec<Vec<f64>> = xs
            .iter()
            .map(|a| xs.iter().map(|b| empirical_kernel(&p, a, b).unwrap()).collect())
            .collect();
        let out = train_full_batch(TrainState::new(p, kappa, eta), &xs, &ys, 1).unwrap();
        let (u0, u1) = (&out.output_history[0], &out.output_history[1]);
        let predicted: Vec<f64> = (0..4)
            .map(|i| -eta * kappa * kappa * (0..4).map(|j| h[i][j] * (u0[j] - ys[j])).sum::<f64>())
            .collect();
        let err: f64 = (0..4).map(|i| (u1[i] - u0[i] - predicted[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = predicted.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 5.0 * eta * norm, "{err} vs {norm}");
    }

    #[test]
    fn divergence_is_reported() {
        let xs = unit_points(2, 3, 9);
        let p = init_net(&Architecture::mlp(3, vec![64]), 10).unwrap();
        let res = train_full_batch(TrainState::new(p, 1.0, 0.1), &xs, &[1.0, f64::INFINITY], 5);
        assert!(matches!(res, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn train_until_reaches_target() {
        let xs = unit_points(3, 4, 11);
        let ys = [0.3, -0.4, 0.2];
        let p = init_net(&Architecture::mlp(4, vec![256]), 12).unwrap();
        let out = train_until(TrainState::new(p, 0.5, 0.5), &xs, &ys, 1e-8, 20_000).unwrap();
        assert!(out.loss <= 1e-8, "loss {}", out.loss);
        assert!(out.output_history.is_empty());
    }

    #[test]
    fn data_errors() {
        let p = init_net(&Architecture::mlp(2, vec![4]), 0).unwrap();
        let empty: Vec<Vec<f64>> = vec![];
        assert!(train_full_batch(TrainState::new(p.clone(), 1.0, 0.1), &empty, &[], 1).is_err());
        assert!(train_full_batch(TrainState::new(p, 1.0, 0.1), &[vec![1.0, 0.0]], &[1.0, 2.0], 1).is_err());
    }
}
