//! The windowed CNN estimator: architecture descriptors, parameter layout,
//! forward/backward passes over a whole window, and the `CGM1` model file.
//!
//! Every architecture has three parallel convolution branches over the
//! `[t_w, 3]` (voltage, current, temperature) window. Branch kernels in the
//! first layer span `t_w/10`, `t_w/5` and `t_w/2` steps; an optional second
//! layer uses `t_w/5` for all branches. Each conv output goes through a
//! leaky rectifier and dropout, then the last conv output of each branch is
//! average pooled and flattened. The head is either
//!
//! * dense-first: one dense block per branch, the block outputs concatenated
//!   into the final neuron, or
//! * merge-first: the flattened branches concatenated into a single dense
//!   block feeding the final neuron.
//!
//! The final neuron uses a plain ReLU, so predictions are never negative.
//!
//! Parameters are stored in build order: first-layer convs (branch 0..3),
//! second-layer convs, dense blocks, final neuron.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::data::{FeatureWindow, NormStats, CHANNELS};
use crate::error::{Error, Result};
use crate::layers::{
    self, avgpool1d_backward_into, avgpool1d_forward_into, avgpool1d_out_len, conv1d_backward_into,
    conv1d_forward_into, dense_backward_into, dense_forward_into, DropoutSpec, LayerGrads, LayerParams,
};
use crate::numerics::{Rng, Tensor};

pub const BRANCHES: usize = 3;
pub const MODEL_MAGIC: &[u8; 4] = b"CGM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    MergeFirst,
    DenseFirst,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::MergeFirst => "merge-first",
            ArchKind::DenseFirst => "dense-first",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "merge-first" | "mf" => Ok(ArchKind::MergeFirst),
            "dense-first" | "df" => Ok(ArchKind::DenseFirst),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub arch: ArchKind,
    pub conv_layers: usize,
    pub t_w: usize,
    pub filters_l1: usize,
    pub filters_l2: usize,
    pub dense_units: usize,
    pub pool_width: usize,
    pub dropout_rate: f64,
    pub l2_coeff: f64,
    pub leaky_slope: f64,
}

/// What a parameter block is, by position in the build order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Conv { layer: usize, branch: usize },
    Dense { block: usize },
    Final,
}

impl LayerRole {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerRole::Conv { .. })
    }
}

/// Sequence lengths through one branch for a given spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchGeometry {
    pub widths: Vec<usize>,
    /// conv output length per conv layer
    pub conv_lens: Vec<usize>,
    pub pool_len: usize,
    pub channels: usize,
}

impl BranchGeometry {
    pub fn flat_len(&self) -> usize {
        self.pool_len * self.channels
    }
}

impl ArchSpec {
    /// The tuned hyperparameters: 16 then 8 filters per branch, 64-unit dense
    /// blocks, pool width 10, dropout 0.2, final-layer L2 of 1e-4.
    pub fn new(arch: ArchKind, conv_layers: usize, t_w: usize) -> Self {
        Self {
            arch,
            conv_layers,
            t_w,
            filters_l1: 16,
            filters_l2: 8,
            dense_units: 64,
            pool_width: 10,
            dropout_rate: 0.2,
            l2_coeff: 1e-4,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_w < 10 || self.t_w % 10 != 0 {
            return Err(Error::InvalidSpec(format!(
                "window length must be a positive multiple of 10, got {}",
                self.t_w
            )));
        }
        if !(1..=2).contains(&self.conv_layers) {
            return Err(Error::InvalidSpec(format!(
                "1 or 2 convolutional layers supported, got {}",
                self.conv_layers
            )));
        }
        if self.filters_l1 == 0 || self.filters_l2 == 0 || self.dense_units == 0 || self.pool_width == 0 {
            return Err(Error::InvalidSpec("filter, unit and pool counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!("dropout rate {}", self.dropout_rate)));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::InvalidSpec(format!("l2 coefficient {}", self.l2_coeff)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::InvalidSpec(format!("leaky slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Kernel widths of conv layer `layer` (0-based) for the three branches.
    pub fn kernel_widths(&self, layer: usize) -> [usize; BRANCHES] {
        match layer {
            0 => [self.t_w / 10, self.t_w / 5, self.t_w / 2],
            _ => [self.t_w / 5; BRANCHES],
        }
    }

    fn filters(&self, layer: usize) -> usize {
        if layer == 0 {
            self.filters_l1
        } else {
            self.filters_l2
        }
    }

    pub fn geometry(&self) -> Vec<BranchGeometry> {
        (0..BRANCHES)
            .map(|b| {
                let mut len = self.t_w;
                let mut widths = Vec::new();
                let mut conv_lens = Vec::new();
                for layer in 0..self.conv_layers {
                    let w = self.kernel_widths(layer)[b];
                    len = len + 1 - w;
                    widths.push(w);
                    conv_lens.push(len);
                }
                BranchGeometry {
                    widths,
                    conv_lens,
                    pool_len: avgpool1d_out_len(len, self.pool_width),
                    channels: self.filters(self.conv_layers - 1),
                }
            })
            .collect()
    }

    pub fn roles(&self) -> Vec<LayerRole> {
        let mut roles = Vec::new();
        for layer in 0..self.conv_layers {
            roles.extend((0..BRANCHES).map(|branch| LayerRole::Conv { layer, branch }));
        }
        let blocks = match self.arch {
            ArchKind::DenseFirst => BRANCHES,
            ArchKind::MergeFirst => 1,
        };
        roles.extend((0..blocks).map(|block| LayerRole::Dense { block }));
        roles.push(LayerRole::Final);
        roles
    }

    /// `(weight shape, fan-in)` for every parameter block, in build order.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        let geom = self.geometry();
        self.roles()
            .into_iter()
            .map(|role| match role {
                LayerRole::Conv { layer, branch } => {
                    let in_ch = if layer == 0 { CHANNELS } else { self.filters_l1 };
                    let w = self.kernel_widths(layer)[branch];
                    (vec![self.filters(layer), w, in_ch], w * in_ch)
                }
                LayerRole::Dense { block } => {
                    let n = match self.arch {
                        ArchKind::DenseFirst => geom[block].flat_len(),
                        ArchKind::MergeFirst => geom.iter().map(BranchGeometry::flat_len).sum(),
                    };
                    (vec![self.dense_units, n], n)
                }
                LayerRole::Final => {
                    let n = self.hidden_len();
                    (vec![1, n], n)
                }
            })
            .collect()
    }

    /// Width of the vector entering the final neuron.
    pub fn hidden_len(&self) -> usize {
        match self.arch {
            ArchKind::DenseFirst => BRANCHES * self.dense_units,
            ArchKind::MergeFirst => self.dense_units,
        }
    }

    /// Whether `other` describes the same network structure.
    pub fn same_structure(&self, other: &ArchSpec) -> bool {
        self.arch == other.arch
            && self.conv_layers == other.conv_layers
            && self.t_w == other.t_w
            && self.filters_l1 == other.filters_l1
            && self.filters_l2 == other.filters_l2
            && self.dense_units == other.dense_units
            && self.pool_width == other.pool_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub spec: ArchSpec,
    pub params: Vec<LayerParams>,
    pub norm_stats: NormStats,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    roles: Vec<LayerRole>,
    geometry: Vec<BranchGeometry>,
}

/// Per-parameter gradients, in build order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
}

impl GradientSet {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Self {
            layers: model.params.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(LayerGrads::clear);
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.biases.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|g| g.weights.all_finite() && g.biases.all_finite())
    }
}

#[derive(Debug, Clone, Default)]
struct BranchCache {
    /// pre-activation of each conv layer
    z: Vec<Vec<f64>>,
    /// post-activation, post-dropout output of each conv layer
    a: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pooled: Vec<f64>,
}

/// Activations recorded by [`CnnModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    spec: ArchSpec,
    input: Vec<f64>,
    branches: Vec<BranchCache>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    final_pre: f64,
    pub output: f64,
    pub training: bool,
}

impl ForwardCache {
    /// Which side of its kink every rectifier input lies on (conv layers,
    /// dense layer, output neuron, in a fixed order). Two passes with equal
    /// patterns lie on the same linear piece of the network.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        let conv = self.branches.iter().flat_map(|b| b.z.iter().flatten().map(|&v| v >= 0.0));
        let dense = self.hidden_pre.iter().map(|&v| v >= 0.0);
        conv.chain(dense).chain(std::iter::once(self.final_pre > 0.0)).collect()
    }
}

impl CnnModel {
    pub fn build(spec: ArchSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(shape, fan_in)| LayerParams::init_uniform(&shape, shape[0], fan_in, rng))
            .collect();
        Ok(Self::assemble(spec, params, NormStats::identity(), rng.seed()))
    }

    fn assemble(spec: ArchSpec, params: Vec<LayerParams>, norm_stats: NormStats, seed: u64) -> Self {
        Self {
            roles: spec.roles(),
            geometry: spec.geometry(),
            spec,
            params,
            norm_stats,
            seed,
        }
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_parts(spec: ArchSpec, params: Vec<LayerParams>, norm_stats: NormStats, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::SpecMismatch(format!(
                "spec needs {} parameter blocks, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, ((shape, _), p)) in shapes.iter().zip(&params).enumerate() {
            if p.weights.shape() != shape.as_slice() || p.biases.shape() != [shape[0]] {
                return Err(Error::SpecMismatch(format!(
                    "block {i}: weights {:?} / biases {:?}, spec expects {shape:?}",
                    p.weights.shape(),
                    p.biases.shape()
                )));
            }
        }
        Ok(Self::assemble(spec, params, norm_stats, seed))
    }

    pub fn roles(&self) -> &[LayerRole] {
        &self.roles
    }

    pub fn geometry(&self) -> &[BranchGeometry] {
        &self.geometry
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(LayerParams::num_params).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.roles.iter().filter(|r| r.is_conv()).count() / BRANCHES
    }

    pub fn final_index(&self) -> usize {
        self.params.len() - 1
    }

    fn param_index(&self, role: LayerRole) -> usize {
        self.roles.iter().position(|&r| r == role).expect("role present in spec")
    }

    /// Marks dense blocks and the final neuron as frozen, convs trainable.
    pub fn freeze_dense(&mut self) {
        for (p, role) in self.params.iter_mut().zip(&self.roles) {
            p.trainable = role.is_conv();
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
    }

    /// `lambda * ||w_final||^2`.
    pub fn l2_penalty(&self) -> f64 {
        let w = self.params[self.final_index()].weights.data();
        self.spec.l2_coeff * w.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn add_l2_gradient(&self, grads: &mut GradientSet) {
        let idx = self.final_index();
        let lambda2 = 2.0 * self.spec.l2_coeff;
        for (g, &w) in grads.layers[idx].weights.data_mut().iter_mut().zip(self.params[idx].weights.data()) {
            *g += lambda2 * w;
        }
    }

    pub fn forward(&self, window: &FeatureWindow<'_>, rng: &mut Rng, training: bool) -> Result<(f64, ForwardCache)> {
        self.forward_features(window.features, rng, training)
    }

    /// Forward pass over a normalized `[t_w, 3]` row-major window.
    pub fn forward_features(&self, features: &[f64], rng: &mut Rng, training: bool) -> Result<(f64, ForwardCache)> {
        let spec = &self.spec;
        if features.len() != spec.t_w * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "window has {} values, model expects {} x {CHANNELS}",
                features.len(),
                spec.t_w
            )));
        }
        let dropout = DropoutSpec::new(spec.dropout_rate)?;
        let apply_dropout = training && dropout.rate > 0.0;
        let slope = spec.leaky_slope;

        let mut branches = Vec::with_capacity(BRANCHES);
        for (b, geom) in self.geometry.iter().enumerate() {
            let mut cache = BranchCache::default();
            let mut ch = CHANNELS;
            for layer in 0..spec.conv_layers {
                let p = &self.params[self.param_index(LayerRole::Conv { layer, branch: b })];
                let filters = p.biases.len();
                let mut z = vec![0.0; geom.conv_lens[layer] * filters];
                {
                    let input: &[f64] = if layer == 0 { features } else { &cache.a[layer - 1] };
                    conv1d_forward_into(input, ch, p.weights.data(), p.biases.data(), geom.widths[layer], &mut z);
                }
                let mut a: Vec<f64> = z.iter().map(|&v| layers::leaky_relu_scalar(v, slope)).collect();
                let mask = apply_dropout.then(|| layers::dropout_mask(a.len(), dropout, rng));
                if let Some(m) = &mask {
                    a.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
                }
                cache.z.push(z);
                cache.a.push(a);
                cache.masks.push(mask);
                ch = filters;
            }
            let mut pooled = vec![0.0; geom.flat_len()];
            avgpool1d_forward_into(cache.a.last().unwrap(), ch, spec.pool_width, &mut pooled);
            cache.pooled = pooled;
            branches.push(cache);
        }

        let units = spec.dense_units;
        let mut hidden_pre = vec![0.0; spec.hidden_len()];
        match spec.arch {
            ArchKind::DenseFirst => {
                for (b, cache) in branches.iter().enumerate() {
                    let p = &self.params[self.param_index(LayerRole::Dense { block: b })];
                    dense_forward_into(
                        &cache.pooled,
                        p.weights.data(),
                        p.biases.data(),
                        &mut hidden_pre[b * units..(b + 1) * units],
                    );
                }
            }
            ArchKind::MergeFirst => {
                let concat: Vec<f64> = branches.iter().flat_map(|c| c.pooled.iter().copied()).collect();
                let p = &self.params[self.param_index(LayerRole::Dense { block: 0 })];
                dense_forward_into(&concat, p.weights.data(), p.biases.data(), &mut hidden_pre);
            }
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| layers::leaky_relu_scalar(v, slope)).collect();
        let fin = &self.params[self.final_index()];
        let final_pre = fin.biases.data()[0] + layers::dot(fin.weights.data(), &hidden);
        let output = layers::relu_scalar(final_pre);

        Ok((
            output,
            ForwardCache {
                spec: spec.clone(),
                input: features.to_vec(),
                branches,
                hidden_pre,
                hidden,
                final_pre,
                output,
                training,
            },
        ))
    }

    /// Inference-mode prediction (no dropout, no randomness consumed).
    pub fn predict(&self, window: &FeatureWindow<'_>) -> Result<f64> {
        self.predict_features(window.features)
    }

    pub fn predict_features(&self, features: &[f64]) -> Result<f64> {
        // inference never draws from the generator
        let mut rng = Rng::new(0);
        Ok(self.forward_features(features, &mut rng, false)?.0)
    }

    /// Gradient of `loss_grad * prediction + lambda * ||w_final||^2` with
    /// respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: f64) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.accumulate_gradients(cache, loss_grad, &mut grads)?;
        self.add_l2_gradient(&mut grads);
        Ok(grads)
    }

    /// Adds `loss_grad * d(prediction)/d(params)` into `grads`. The L2
    /// penalty is not included.
    pub fn accumulate_gradients(&self, cache: &ForwardCache, loss_grad: f64, grads: &mut GradientSet) -> Result<()> {
        let spec = &self.spec;
        if !cache.spec.same_structure(spec) || cache.branches.len() != BRANCHES {
            return Err(Error::StaleCache("cache was produced by a different architecture".into()));
        }
        if grads.layers.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient set does not match model".into()));
        }
        let d_final_pre = loss_grad * layers::relu_grad(cache.final_pre);
        if d_final_pre == 0.0 {
            return Ok(());
        }
        let slope = spec.leaky_slope;
        let fi = self.final_index();
        let mut d_hidden = vec![0.0; cache.hidden.len()];
        {
            let g = &mut grads.layers[fi];
            let (gw, gb) = (g.weights.data_mut(), g.biases.data_mut());
            dense_backward_into(
                &cache.hidden,
                self.params[fi].weights.data(),
                &[d_final_pre],
                gw,
                gb,
                Some(&mut d_hidden),
            );
        }
        for (d, &pre) in d_hidden.iter_mut().zip(&cache.hidden_pre) {
            *d *= layers::leaky_relu_grad(pre, slope);
        }

        let units = spec.dense_units;
        let mut d_pooled: Vec<Vec<f64>> = cache.branches.iter().map(|c| vec![0.0; c.pooled.len()]).collect();
        match spec.arch {
            ArchKind::DenseFirst => {
                for (b, c) in cache.branches.iter().enumerate() {
                    let idx = self.param_index(LayerRole::Dense { block: b });
                    let g = &mut grads.layers[idx];
                    dense_backward_into(
                        &c.pooled,
                        self.params[idx].weights.data(),
                        &d_hidden[b * units..(b + 1) * units],
                        g.weights.data_mut(),
                        g.biases.data_mut(),
                        Some(&mut d_pooled[b]),
                    );
                }
            }
            ArchKind::MergeFirst => {
                let concat: Vec<f64> = cache.branches.iter().flat_map(|c| c.pooled.iter().copied()).collect();
                let idx = self.param_index(LayerRole::Dense { block: 0 });
                let mut d_concat = vec![0.0; concat.len()];
                let g = &mut grads.layers[idx];
                dense_backward_into(
                    &concat,
                    self.params[idx].weights.data(),
                    &d_hidden,
                    g.weights.data_mut(),
                    g.biases.data_mut(),
                    Some(&mut d_concat),
                );
                let mut offset = 0;
                for d in &mut d_pooled {
                    let n = d.len();
                    d.copy_from_slice(&d_concat[offset..offset + n]);
                    offset += n;
                }
            }
        }

        for (b, (c, geom)) in cache.branches.iter().zip(&self.geometry).enumerate() {
            let last = spec.conv_layers - 1;
            let channels = geom.channels;
            let mut upstream = vec![0.0; geom.conv_lens[last] * channels];
            avgpool1d_backward_into(&d_pooled[b], channels, geom.conv_lens[last], spec.pool_width, &mut upstream);
            for layer in (0..spec.conv_layers).rev() {
                // through dropout and the leaky rectifier
                if let Some(mask) = &c.masks[layer] {
                    upstream.iter_mut().zip(mask).for_each(|(u, &m)| *u *= m);
                }
                for (u, &z) in upstream.iter_mut().zip(&c.z[layer]) {
                    *u *= layers::leaky_relu_grad(z, slope);
                }
                let idx = self.param_index(LayerRole::Conv { layer, branch: b });
                let (input, in_ch): (&[f64], usize) = if layer == 0 {
                    (&cache.input, CHANNELS)
                } else {
                    (&c.a[layer - 1], spec.filters_l1)
                };
                let g = &mut grads.layers[idx];
                let (gw, gb) = (g.weights.data_mut(), g.biases.data_mut());
                if layer == 0 {
                    conv1d_backward_into(input, in_ch, self.params[idx].weights.data(), geom.widths[layer], &upstream, gw, gb, None);
                } else {
                    let mut d_input = vec![0.0; input.len()];
                    conv1d_backward_into(
                        input,
                        in_ch,
                        self.params[idx].weights.data(),
                        geom.widths[layer],
                        &upstream,
                        gw,
                        gb,
                        Some(&mut d_input),
                    );
                    upstream = d_input;
                }
            }
        }
        Ok(())
    }

    /// Flattened copy of every parameter in build order (weights then
    /// biases per block).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.params {
            out.extend_from_slice(p.weights.data());
            out.extend_from_slice(p.biases.data());
        }
        out
    }

    fn header(&self) -> String {
        let list = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let s = &self.spec;
        let trainable: Vec<&str> = self.params.iter().map(|p| if p.trainable { "1" } else { "0" }).collect();
        format!(
            "version={MODEL_FORMAT_VERSION}\n\
             arch={}\nconv_layers={}\nt_w={}\nfilters_l1={}\nfilters_l2={}\n\
             dense_units={}\npool_width={}\ndropout_rate={:?}\nl2_coeff={:?}\nleaky_slope={:?}\n\
             seed={}\nnorm_mean={}\nnorm_std={}\ntrainable={}\nblocks={}\nparams={}\n",
            s.arch,
            s.conv_layers,
            s.t_w,
            s.filters_l1,
            s.filters_l2,
            s.dense_units,
            s.pool_width,
            s.dropout_rate,
            s.l2_coeff,
            s.leaky_slope,
            self.seed,
            list(&self.norm_stats.mean),
            list(&self.norm_stats.std),
            trainable.join(","),
            self.params.len(),
            self.num_params(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.num_params());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in self.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::ModelFormat("truncated header".into()))?;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        let fields = Header::parse(header)?;

        let version: u32 = fields.get("version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let spec = ArchSpec {
            arch: fields.get_str("arch")?.parse()?,
            conv_layers: fields.get("conv_layers")?,
            t_w: fields.get("t_w")?,
            filters_l1: fields.get("filters_l1")?,
            filters_l2: fields.get("filters_l2")?,
            dense_units: fields.get("dense_units")?,
            pool_width: fields.get("pool_width")?,
            dropout_rate: fields.get("dropout_rate")?,
            l2_coeff: fields.get("l2_coeff")?,
            leaky_slope: fields.get("leaky_slope")?,
        };
        spec.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;
        let norm_stats = NormStats::new(fields.get_triple("norm_mean")?, fields.get_triple("norm_std")?)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let seed: u64 = fields.get("seed")?;
        let shapes = spec.param_shapes();
        let blocks: usize = fields.get("blocks")?;
        let declared: usize = fields.get("params")?;
        let expected: usize = shapes.iter().map(|(s, _)| s.iter().product::<usize>() + s[0]).sum();
        if blocks != shapes.len() || declared != expected {
            return Err(Error::ModelFormat(format!(
                "header declares {blocks} blocks / {declared} params, spec implies {} / {expected}",
                shapes.len()
            )));
        }
        let trainable: Vec<bool> = fields
            .get_str("trainable")?
            .split(',')
            .map(|t| match t {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::ModelFormat(format!("bad trainable flag {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if trainable.len() != shapes.len() {
            return Err(Error::ModelFormat("trainable flag count".into()));
        }
        let payload = &bytes[header_end..];
        if payload.len() != expected * 8 {
            return Err(Error::ModelFormat(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut params = Vec::with_capacity(shapes.len());
        for ((shape, _), trainable) in shapes.iter().zip(trainable) {
            let nw = shape.iter().product();
            let w: Vec<f64> = values.by_ref().take(nw).collect();
            let b: Vec<f64> = values.by_ref().take(shape[0]).collect();
            let mut p = LayerParams::new(Tensor::from_vec(shape, w)?, Tensor::from_vec(&[shape[0]], b)?);
            p.trainable = trainable;
            params.push(p);
        }
        Self::from_parts(spec, params, norm_stats, seed)
    }

    /// Writes the model atomically: a failed write leaves no file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_model(model: &CnnModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<CnnModel> {
    CnnModel::load(path)
}

/// Writes through a `.partial` sibling and renames, so `path` is either
/// absent or complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let res = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

struct Header<'a> {
    entries: Vec<(&'a str, &'a str)>,
}

impl<'a> Header<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::ModelFormat(format!("bad header line {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    fn get_str(&self, key: &str) -> Result<&'a str> {
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::ModelFormat(format!("missing header key {key}")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get_str(key)?;
        v.parse()
            .map_err(|_| Error::ModelFormat(format!("bad value {v:?} for {key}")))
    }

    fn get_triple(&self, key: &str) -> Result<[f64; CHANNELS]> {
        let parts: Vec<f64> = self
            .get_str(key)?
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::ModelFormat(format!("bad number in {key}"))))
            .collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| Error::ModelFormat(format!("{key} needs {CHANNELS} values")))
    }
}
