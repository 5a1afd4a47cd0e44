//! Reference implementations shared by the integration tests: plain loop
//! versions of the layer kernels, a finite-difference gradient checker and
//! small data builders.
#![allow(dead_code)]

use soc_cnn::data::{NormalizedCycle, WindowSet, CHANNELS};
use soc_cnn::layers::LayerParams;
use soc_cnn::{ArchKind, ArchSpec, CnnModel, Rng, Tensor};

/// `out[t][f] = b[f] + sum_d sum_c x[t + d][c] * w[f][d][c]`.
pub fn naive_conv(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let width = w[0].len();
    let out_len = x.len() + 1 - width;
    let mut out = vec![vec![0.0; b.len()]; out_len];
    for t in 0..out_len {
        for f in 0..b.len() {
            let mut s = b[f];
            for d in 0..width {
                for c in 0..x[0].len() {
                    s += x[t + d][c] * w[f][d][c];
                }
            }
            out[t][f] = s;
        }
    }
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `g[t][f]`.
pub fn naive_conv_backward(
    x: &[Vec<f64>],
    w: &[Vec<Vec<f64>>],
    g: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let (filters, width, ch) = (w.len(), w[0].len(), x[0].len());
    let mut dx = vec![vec![0.0; ch]; x.len()];
    let mut dw = vec![vec![vec![0.0; ch]; width]; filters];
    let mut db = vec![0.0; filters];
    for t in 0..g.len() {
        for f in 0..filters {
            db[f] += g[t][f];
            for d in 0..width {
                for c in 0..ch {
                    dx[t + d][c] += g[t][f] * w[f][d][c];
                    dw[f][d][c] += g[t][f] * x[t + d][c];
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping mean over windows of `min(width, len)` steps; a trailing
/// partial window is dropped.
pub fn naive_pool(x: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let w = width.min(x.len());
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= x.len() {
        let mut row = vec![0.0; x[0].len()];
        for r in &x[start..start + w] {
            for (o, v) in row.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.push(row.into_iter().map(|s| s / w as f64).collect());
        start += w;
    }
    out
}

pub fn naive_dense(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

pub fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn kernels(data: &[f64], width: usize, ch: usize) -> Vec<Vec<Vec<f64>>> {
    data.chunks(width * ch).map(|k| rows(k, ch)).collect()
}

pub fn flatten2(x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

pub fn flatten3(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

pub fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, random_vec(rng, n)).unwrap()
}

pub fn random_params(rng: &mut Rng, weight_shape: &[usize], outputs: usize) -> LayerParams {
    LayerParams::new(random_tensor(rng, weight_shape), random_tensor(rng, &[outputs]))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a floor on the denominator so that parameters
/// whose true gradient is ~0 are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Result of a whole-model gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a rectifier kink.
    pub kinks: usize,
    pub worst: (usize, usize),
}

fn param_mut(m: &mut CnnModel, layer: usize, part: usize, j: usize) -> &mut f64 {
    let p = &mut m.params[layer];
    if part == 0 {
        &mut p.weights.data_mut()[j]
    } else {
        &mut p.biases.data_mut()[j]
    }
}

/// Compares the analytic gradient of
/// `(prediction - label)^2 + lambda * ||w_final||^2` with central finite
/// differences for every parameter of a freshly built model. Dropout is
/// active; each evaluation reuses the same dropout stream so the masks are
/// identical. Where a perturbation moves any rectifier input across its
/// kink the loss is not differentiable on the probed interval, so that
/// parameter is counted in `kinks` instead of compared.
pub fn model_gradient_check(arch: ArchKind, conv_layers: usize, t_w: usize, seed: u64, h: f64) -> GradCheck {
    let spec = ArchSpec::new(arch, conv_layers, t_w);
    let mut rng = Rng::new(seed);
    let mut model = CnnModel::build(spec, &mut rng).unwrap();
    let x = (0..t_w * CHANNELS).map(|_| rng.gaussian(0.0, 1.0)).collect::<Vec<_>>();
    let drop_seed = seed ^ 0xd20f;
    // keep the output ReLU in its linear region
    let (p, _) = model.forward_features(&x, &mut Rng::new(drop_seed), true).unwrap();
    if p == 0.0 {
        let fi = model.final_index();
        for w in model.params[fi].weights.data_mut() {
            *w = -*w;
        }
    }
    let (p, _) = model.forward_features(&x, &mut Rng::new(drop_seed), true).unwrap();
    // a small residual keeps round-off in the loss small next to its gradient
    let label = p - 0.1;
    let eval = |m: &CnnModel| {
        let (p, cache) = m.forward_features(&x, &mut Rng::new(drop_seed), true).unwrap();
        ((p - label).powi(2) + m.l2_penalty(), cache.rectifier_pattern())
    };
    let (p, cache) = model.forward_features(&x, &mut Rng::new(drop_seed), true).unwrap();
    assert!(p > 0.0, "output ReLU inactive");
    let pattern = cache.rectifier_pattern();
    let grads = model.backward(&cache, 2.0 * (p - label)).unwrap();

    let mut worst = (0, 0);
    let mut max_rel_err = 0.0;
    let mut checked = 0;
    let mut kinks = 0;
    for layer in 0..model.params.len() {
        for part in 0..2 {
            let n = if part == 0 {
                model.params[layer].weights.len()
            } else {
                model.params[layer].biases.len()
            };
            for j in 0..n {
                let orig = *param_mut(&mut model, layer, part, j);
                *param_mut(&mut model, layer, part, j) = orig + h;
                let (up, up_pattern) = eval(&model);
                *param_mut(&mut model, layer, part, j) = orig - h;
                let (down, down_pattern) = eval(&model);
                *param_mut(&mut model, layer, part, j) = orig;
                if up_pattern != pattern || down_pattern != pattern {
                    // a rectifier kink lies inside [orig - h, orig + h]
                    kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let analytic = if part == 0 {
                    grads.layers[layer].weights.data()[j]
                } else {
                    grads.layers[layer].biases.data()[j]
                };
                let e = rel_err(analytic, numeric);
                if e > max_rel_err {
                    max_rel_err = e;
                    worst = (layer, j);
                }
                checked += 1;
            }
        }
    }
    GradCheck {
        max_rel_err,
        checked,
        kinks,
        worst,
    }
}

/// A single normalized cycle with a smooth, learnable SoC trajectory.
pub fn toy_cycle(name: &str, ambient_c: i32, len: usize, seed: u64) -> NormalizedCycle {
    let mut rng = Rng::new(seed);
    let mut features = Vec::with_capacity(len * CHANNELS);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let soc = 1.0 - 0.8 * i as f64 / len as f64;
        features.extend([2.0 * soc - 1.0 + 0.05 * rng.standard_normal(), rng.uniform(-1.0, 1.0), 0.0]);
        labels.push(soc);
    }
    NormalizedCycle {
        cycle_id: name.to_string(),
        ambient_c,
        sampling_hz: 1.0,
        features,
        labels,
    }
}

pub fn toy_windows(t_w: usize, len: usize, seed: u64) -> WindowSet {
    WindowSet::new(vec![toy_cycle("toy", 25, len, seed)], t_w)
}
