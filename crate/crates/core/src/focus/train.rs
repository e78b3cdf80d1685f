//! Desk-scale trainer for the sharpness predictor. The loss is `1 - PLCC`
//! between predicted and target scores over the whole dataset; gradients
//! flow through the min/max pooling by subgradient routing to the
//! extremal response location (ties break to the lowest linear index,
//! which the forward pass already guarantees).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{
    forward_window, FocusError, FocusNetWeights, ImageWindow, CONV_STRIDE, KERNEL_SIZE,
};
use crate::num::Real;

#[derive(Debug, Clone)]
pub struct FocusTrainConfig<R> {
    pub epochs: usize,
    pub learning_rate: R,
    pub n_filters: usize,
    /// Seed for the kernel initialization.
    pub seed: u64,
}

impl<R: Real> Default for FocusTrainConfig<R> {
    fn default() -> Self {
        FocusTrainConfig {
            epochs: 300,
            learning_rate: R::of(0.01),
            n_filters: super::DEFAULT_FILTERS,
            seed: 7,
        }
    }
}

/// Flat gradient with the same layout as the weight vector.
#[derive(Debug, Clone)]
pub struct FocusGradient<R> {
    pub kernels: Vec<R>,
    pub bias: Vec<R>,
    pub w1: Vec<R>,
    pub w2: Vec<R>,
    pub w3: R,
}

impl<R: Real> FocusGradient<R> {
    fn zeros(n_filters: usize) -> Self {
        FocusGradient {
            kernels: vec![R::zero(); n_filters * 3 * KERNEL_SIZE * KERNEL_SIZE],
            bias: vec![R::zero(); n_filters],
            w1: vec![R::zero(); n_filters],
            w2: vec![R::zero(); n_filters],
            w3: R::zero(),
        }
    }
}

/// `1 - PLCC` and its gradient over the dataset.
pub fn loss_and_gradient<R: Real>(
    weights: &FocusNetWeights<R>,
    dataset: &[(ImageWindow<R>, R)],
) -> Result<(R, FocusGradient<R>), FocusError> {
    assert!(dataset.len() >= 2, "PLCC needs at least two samples");
    let n = dataset.len();
    let forwards: Vec<_> = dataset
        .iter()
        .map(|(x, _)| forward_window(x, weights))
        .collect::<Result<_, _>>()?;
    let predictions: Vec<R> = forwards.iter().map(|f| f.y).collect();
    let targets: Vec<R> = dataset.iter().map(|(_, t)| *t).collect();

    let nn = R::of_usize(n);
    let mean = |v: &[R]| v.iter().fold(R::zero(), |a, &b| a + b) / nn;
    let (mp, mt) = (mean(&predictions), mean(&targets));
    let a: Vec<R> = predictions.iter().map(|&p| p - mp).collect();
    let c: Vec<R> = targets.iter().map(|&t| t - mt).collect();
    let s_ac = a.iter().zip(&c).fold(R::zero(), |acc, (&x, &y)| acc + x * y);
    let sa2 = a.iter().fold(R::zero(), |acc, &x| acc + x * x);
    let sc2 = c.iter().fold(R::zero(), |acc, &x| acc + x * x);
    let eps = R::of(1e-12);
    let sa = sa2.sqrt().max(eps);
    let sc = sc2.sqrt().max(eps);
    let rho = s_ac / (sa * sc);
    let loss = R::one() - rho;

    // dL/dy_i = -(c_i / (sa*sc) - rho * a_i / sa^2)
    let mut grad = FocusGradient::zeros(weights.n_filters);
    for (s, fwd) in forwards.iter().enumerate() {
        let dy = -(c[s] / (sa * sc) - rho * a[s] / (sa * sa));
        grad.w3 += dy;
        let (x, _) = &dataset[s];
        let (_, out_w) = x.response_shape();
        for filter in 0..weights.n_filters {
            let (min_val, min_pos) = fwd.mins[filter];
            let (max_val, max_pos) = fwd.maxs[filter];
            grad.w1[filter] += dy * min_val;
            grad.w2[filter] += dy * max_val;
            grad.bias[filter] += dy * (weights.w1[filter] + weights.w2[filter]);
            for (pos, pool_w) in [(min_pos, weights.w1[filter]), (max_pos, weights.w2[filter])] {
                let py = pos / out_w;
                let px = pos % out_w;
                let scale = dy * pool_w;
                for ch in 0..3 {
                    for u in 0..KERNEL_SIZE {
                        for v in 0..KERNEL_SIZE {
                            let idx = ((filter * 3 + ch) * KERNEL_SIZE + u) * KERNEL_SIZE + v;
                            grad.kernels[idx] +=
                                scale * x.at(px * CONV_STRIDE + v, py * CONV_STRIDE + u, ch);
                        }
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

struct Adam<R> {
    m: Vec<R>,
    v: Vec<R>,
    t: usize,
    lr: R,
}

impl<R: Real> Adam<R> {
    fn new(dim: usize, lr: R) -> Self {
        Adam { m: vec![R::zero(); dim], v: vec![R::zero(); dim], t: 0, lr }
    }

    fn step(&mut self, params: &mut [R], grads: &[R]) {
        let beta1 = R::of(0.9);
        let beta2 = R::of(0.999);
        let eps = R::of(1e-8);
        self.t += 1;
        let bc1 = R::one() - beta1.powi(self.t as i32);
        let bc2 = R::one() - beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (R::one() - beta1) * g;
            *v = beta2 * *v + (R::one() - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn flatten<R: Real>(w: &FocusNetWeights<R>) -> Vec<R> {
    let mut out = Vec::with_capacity(w.parameter_count());
    out.extend_from_slice(&w.kernels);
    out.extend_from_slice(&w.bias);
    out.extend_from_slice(&w.w1);
    out.extend_from_slice(&w.w2);
    out.push(w.w3);
    out
}

fn unflatten<R: Real>(flat: &[R], n_filters: usize) -> FocusNetWeights<R> {
    let nk = n_filters * 3 * KERNEL_SIZE * KERNEL_SIZE;
    FocusNetWeights {
        n_filters,
        kernels: flat[..nk].to_vec(),
        bias: flat[nk..nk + n_filters].to_vec(),
        w1: flat[nk + n_filters..nk + 2 * n_filters].to_vec(),
        w2: flat[nk + 2 * n_filters..nk + 3 * n_filters].to_vec(),
        w3: flat[nk + 3 * n_filters],
    }
}

fn flatten_grad<R: Real>(g: &FocusGradient<R>) -> Vec<R> {
    let mut out =
        Vec::with_capacity(g.kernels.len() + g.bias.len() + g.w1.len() + g.w2.len() + 1);
    out.extend_from_slice(&g.kernels);
    out.extend_from_slice(&g.bias);
    out.extend_from_slice(&g.w1);
    out.extend_from_slice(&g.w2);
    out.push(g.w3);
    out
}

/// Seeded starting point: small random kernels, symmetric pool weights.
pub fn initial_weights<R: Real>(n_filters: usize, seed: u64) -> FocusNetWeights<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FocusNetWeights::zeros(n_filters);
    for k in w.kernels.iter_mut() {
        *k = R::of(rng.random_range(-0.2..0.2));
    }
    for (a, b) in w.w1.iter_mut().zip(w.w2.iter_mut()) {
        *a = R::of(-0.5);
        *b = R::of(0.5);
    }
    w.w3 = R::of(6.0);
    w
}

#[derive(Debug)]
pub struct TrainedFocus<R> {
    pub weights: FocusNetWeights<R>,
    pub loss_history: Vec<R>,
    /// PLCC of the final weights on the training set.
    pub final_plcc: R,
}

/// Full-batch Adam on `1 - PLCC`.
pub fn train_focus<R: Real>(
    dataset: &[(ImageWindow<R>, R)],
    config: &FocusTrainConfig<R>,
) -> Result<TrainedFocus<R>, FocusError> {
    let mut distinct: Vec<R> = dataset.iter().map(|(_, t)| *t).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(FocusError::DegenerateTargets);
    }

    let mut weights = initial_weights(config.n_filters, config.seed);
    let mut flat = flatten(&weights);
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        let (loss, grad) = loss_and_gradient(&weights, dataset)?;
        loss_history.push(loss);
        adam.step(&mut flat, &flatten_grad(&grad));
        weights = unflatten(&flat, config.n_filters);
    }
    let (final_loss, _) = loss_and_gradient(&weights, dataset)?;
    Ok(TrainedFocus { weights, loss_history, final_plcc: R::one() - final_loss })
}

/// Synthetic defocus fixture: noise textures box-blurred at increasing
/// radii. Level 0 is sharp; the training target is `12 - level`, so
/// sharper windows carry higher scores.
pub fn synthetic_blur_ladder<R: Real>(
    seed: u64,
    levels: usize,
    textures_per_level: usize,
    window: usize,
) -> Vec<(ImageWindow<R>, R)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(levels * textures_per_level);
    for texture in 0..textures_per_level {
        let _ = texture;
        let base: Vec<[f64; 3]> = (0..window * window)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        for level in 0..levels {
            let blurred = box_blur(&base, window, window, level);
            let mut win = ImageWindow::new(window, window);
            for (k, px) in blurred.iter().enumerate() {
                win.data[k * 3] = R::of(px[0]);
                win.data[k * 3 + 1] = R::of(px[1]);
                win.data[k * 3 + 2] = R::of(px[2]);
            }
            out.push((win, R::of(12.0 - level as f64)));
        }
    }
    out
}

/// Separable box blur with edge clamping; radius 0 is the identity.
pub fn box_blur(data: &[[f64; 3]], width: usize, height: usize, radius: usize) -> Vec<[f64; 3]> {
    if radius == 0 {
        return data.to_vec();
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut horizontal = vec![[0.0f64; 3]; data.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = [0.0f64; 3];
            for dx in -r..=r {
                let sx = (x + dx).clamp(0, width as isize - 1) as usize;
                let px = data[y as usize * width + sx];
                for ch in 0..3 {
                    acc[ch] += px[ch];
                }
            }
            horizontal[y as usize * width + x as usize] = acc.map(|v| v * norm);
        }
    }
    let mut out = vec![[0.0f64; 3]; data.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = [0.0f64; 3];
            for dy in -r..=r {
                let sy = (y + dy).clamp(0, height as isize - 1) as usize;
                let px = horizontal[sy as usize * width + x as usize];
                for ch in 0..3 {
                    acc[ch] += px[ch];
                }
            }
            out[y as usize * width + x as usize] = acc.map(|v| v * norm);
        }
    }
    out
}
