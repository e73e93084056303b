//! The hypernetwork: a small ConvNet reads the support images, pools their
//! codes, mixes in the current decoder weights, and a fully connected head
//! emits an additive update for selected decoder layers.
//!
//! ```text
//! planes [k,3,H,W] → (conv3x3/2 → BN → ReLU)×L → spatial mean → [k,C]
//!                  → ⊕ view dir → mean over k → [1,C(+3)]
//! θ (masked layers, flattened) → linear → [1,P]
//! [code, θ-proj] → fusion MLP → per-layer heads → Δθ
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{batch_channel_stats, Conv2dSpec, Eager, Graph, ParamSet, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::planes::ImagePlane;
use crate::target::{bias_name, weight_name, TargetConfig, TargetNodes, TargetParams};

/// How the encoder's batch norm layers normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Statistics of the current task's k planes.
    Task,
    /// Running averages accumulated during meta-training.
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypernetConfig {
    /// Output channels of each stride-2 conv block.
    pub conv_channels: Vec<usize>,
    pub fusion_depth: usize,
    pub fusion_width: usize,
    /// Width of the linear projection of θ.
    pub theta_proj: usize,
    /// Feed each plane's viewing direction.
    pub use_dirs: bool,
    /// Feed the current decoder weights.
    pub use_weights: bool,
    /// Feed every decoder layer instead of only the masked ones.
    pub weights_from_all_layers: bool,
    /// Let gradients flow from the hypernetwork into θ.
    pub theta_gradient: bool,
    pub norm: NormMode,
    pub bn_momentum: f64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig {
            conv_channels: vec![16, 32, 64, 64],
            fusion_depth: 3,
            fusion_width: 256,
            theta_proj: 256,
            use_dirs: true,
            use_weights: true,
            weights_from_all_layers: false,
            theta_gradient: false,
            norm: NormMode::Task,
            bn_momentum: 0.1,
        }
    }
}

/// Decoder layers that receive a nonzero update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UpdateMask(Vec<String>);

impl UpdateMask {
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut names: Vec<String> = layers.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        if names.is_empty() {
            return Err(Error::contract("update mask must name at least one layer"));
        }
        Ok(UpdateMask(names))
    }

    /// The opacity and color heads.
    pub fn last_layers() -> Self {
        UpdateMask(vec!["color_head".into(), "sigma_head".into()])
    }

    pub fn all_layers(cfg: &TargetConfig) -> Self {
        UpdateMask::new(cfg.layer_names()).expect("a decoder always has layers")
    }

    /// `last`, `all`, or a comma-separated list of layer names.
    pub fn parse(spec: &str, cfg: &TargetConfig) -> Result<Self> {
        let mask = match spec.trim() {
            "last" | "last-layers" => UpdateMask::last_layers(),
            "all" | "all-layers" => UpdateMask::all_layers(cfg),
            list => UpdateMask::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))?,
        };
        mask.validate(cfg)?;
        Ok(mask)
    }

    pub fn validate(&self, cfg: &TargetConfig) -> Result<()> {
        let known = cfg.layer_names();
        match self.0.iter().find(|n| !known.contains(n)) {
            Some(bad) => Err(Error::contract(format!("update mask names unknown layer {bad:?}"))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.0.iter().any(|n| n == layer)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    /// Masked layers as `(layout index, name, fan_in, fan_out)`, in decoder
    /// layout order.
    fn resolve(&self, cfg: &TargetConfig) -> Vec<(usize, String, usize, usize)> {
        cfg.layer_shapes()
            .into_iter()
            .enumerate()
            .filter(|(_, (name, _, _))| self.contains(name))
            .map(|(i, (name, fi, fo))| (i, name, fi, fo))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDelta {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Additive decoder update. Layers not present are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightDelta {
    pub layers: BTreeMap<String, LayerDelta>,
}

impl WeightDelta {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .values()
            .map(|d| d.weight.max_abs().max(d.bias.max_abs()))
            .fold(0.0, f64::max)
    }
}

/// `θ + Δθ` on the layers present in `delta`; other layers are copied as is.
pub fn apply_delta(theta: &TargetParams, delta: &WeightDelta) -> Result<TargetParams> {
    let mut out = theta.clone();
    for (layer, d) in &delta.layers {
        for (name, add) in [(weight_name(layer), &d.weight), (bias_name(layer), &d.bias)] {
            let slot = out
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("delta for unknown layer {layer:?}")))?;
            if slot.shape() != add.shape() {
                return Err(Error::contract(format!(
                    "delta for {name} has shape {:?}, layer has {:?}",
                    add.shape(),
                    slot.shape()
                )));
            }
            slot.add_assign(add)?;
        }
    }
    Ok(out)
}

/// Graph form of `θ + Δθ` for the layers in `delta`.
pub fn apply_delta_nodes<G: Graph>(
    g: &mut G,
    theta: &TargetNodes<G::Node>,
    delta: &DeltaNodes<G::Node>,
) -> Result<TargetNodes<G::Node>> {
    let mut nodes = theta.nodes.clone();
    for (layer, w, b) in &delta.layers {
        nodes[2 * layer] = g.add(&theta.nodes[2 * layer], w)?;
        nodes[2 * layer + 1] = g.add(&theta.nodes[2 * layer + 1], b)?;
    }
    Ok(TargetNodes { nodes })
}

/// Δθ as graph nodes: `(layout index, weight, bias)` per masked layer.
#[derive(Debug, Clone)]
pub struct DeltaNodes<N> {
    pub layers: Vec<(usize, N, N)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetParams {
    pub config: HypernetConfig,
    pub target: TargetConfig,
    pub mask: UpdateMask,
    pub params: ParamSet,
    /// One entry per conv block.
    pub running: Vec<RunningStats>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl HypernetParams {
    pub fn init(config: HypernetConfig, target: TargetConfig, mask: UpdateMask, rng: &mut ChaCha8Rng) -> Result<Self> {
        mask.validate(&target)?;
        if config.conv_channels.is_empty() || config.fusion_width == 0 {
            return Err(Error::contract("hypernetwork needs conv blocks and a fusion width"));
        }
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            params.push(
                format!("encoder.{i}.conv.weight"),
                uniform(rng, vec![cout, cin, 3, 3], bound),
            );
            params.push(format!("encoder.{i}.bn.gamma"), Tensor::ones(vec![cout]));
            params.push(format!("encoder.{i}.bn.beta"), Tensor::zeros(vec![cout]));
            cin = cout;
        }
        let mut latent = cin + if config.use_dirs { 3 } else { 0 };
        if config.use_weights {
            let p = theta_input_len(&config, &target, &mask);
            let bound = 1.0 / (p as f64).sqrt();
            params.push("theta_proj.weight", uniform(rng, vec![p, config.theta_proj], bound));
            params.push("theta_proj.bias", uniform(rng, vec![1, config.theta_proj], bound));
            latent += config.theta_proj;
        }
        let mut fan_in = latent;
        for i in 0..config.fusion_depth {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(
                format!("fusion.{i}.weight"),
                uniform(rng, vec![fan_in, config.fusion_width], bound),
            );
            params.push(
                format!("fusion.{i}.bias"),
                uniform(rng, vec![1, config.fusion_width], bound),
            );
            fan_in = config.fusion_width;
        }
        for (_, name, fi, fo) in mask.resolve(&target) {
            params.push(format!("head.{name}.weight"), Tensor::zeros(vec![fan_in, fi * fo + fo]));
            params.push(format!("head.{name}.bias"), Tensor::zeros(vec![1, fi * fo + fo]));
        }
        let running = config
            .conv_channels
            .iter()
            .map(|&c| RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(HypernetParams {
            config,
            target,
            mask,
            params,
            running,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.conv_channels.last().copied().unwrap_or(0)
            + if self.config.use_dirs { 3 } else { 0 }
            + if self.config.use_weights {
                self.config.theta_proj
            } else {
                0
            }
    }

    pub fn to_nodes<G: Graph>(&self, g: &mut G, requires_grad: bool) -> Vec<G::Node> {
        self.params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("hypernetwork parameter {name} missing"))
    }

    /// Moves running statistics towards one task's batch statistics.
    pub fn update_running(&mut self, batch: &[RunningStats]) {
        let m = self.config.bn_momentum;
        for (run, b) in self.running.iter_mut().zip(batch) {
            for (r, v) in run.mean.iter_mut().zip(&b.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in run.var.iter_mut().zip(&b.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Eager encoder pass.
    pub fn encode_support(&self, planes: &[ImagePlane], theta: &TargetParams) -> Result<Tensor> {
        let mut g = Eager;
        let nodes = self.to_nodes(&mut g, false);
        let theta_nodes = theta.to_nodes(&mut g, false);
        Ok(encode_support(&mut g, self, &nodes, planes, theta, &theta_nodes)?.latent)
    }

    /// Eager head pass.
    pub fn predict_delta(&self, latent: &Tensor) -> Result<WeightDelta> {
        let mut g = Eager;
        let nodes = self.to_nodes(&mut g, false);
        let latent = g.constant(latent.clone());
        let delta = predict_delta(&mut g, self, &nodes, &latent)?;
        let names = self.target.layer_names();
        let layers = delta
            .layers
            .into_iter()
            .map(|(i, w, b)| (names[i].clone(), LayerDelta { weight: w, bias: b }))
            .collect();
        Ok(WeightDelta { layers })
    }

    /// One encode → predict → apply pass.
    pub fn adapt(&self, theta: &TargetParams, hyperplanes: &[ImagePlane]) -> Result<TargetParams> {
        let latent = self.encode_support(hyperplanes, theta)?;
        let delta = self.predict_delta(&latent)?;
        apply_delta(theta, &delta)
    }
}

fn theta_input_len(config: &HypernetConfig, target: &TargetConfig, mask: &UpdateMask) -> usize {
    target
        .layer_shapes()
        .into_iter()
        .filter(|(n, _, _)| config.weights_from_all_layers || mask.contains(n))
        .map(|(_, fi, fo)| fi * fo + fo)
        .sum()
}

/// Layout indices of the decoder layers fed to the hypernetwork.
fn theta_input_layers(hp: &HypernetParams) -> Vec<usize> {
    hp.target
        .layer_names()
        .iter()
        .enumerate()
        .filter(|(_, n)| hp.config.weights_from_all_layers || hp.mask.contains(n))
        .map(|(i, _)| i)
        .collect()
}

/// Stacks planes as `[k, 3, H, W]`.
pub fn plane_batch(planes: &[ImagePlane]) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| Error::contract("hypernetwork needs at least one plane"))?;
    let (w, h) = (first.pixels.width(), first.pixels.height());
    let mut data = Vec::with_capacity(planes.len() * 3 * w * h);
    for p in planes {
        if p.pixels.width() != w || p.pixels.height() != h {
            return Err(Error::contract(format!(
                "hyperplane {} is {}x{}, expected {w}x{h}",
                p.view_id,
                p.pixels.width(),
                p.pixels.height()
            )));
        }
        for ch in 0..3 {
            data.extend(p.pixels.data().iter().skip(ch).step_by(3));
        }
    }
    Tensor::new(vec![planes.len(), 3, h, w], data)
}

pub struct Encoded<N> {
    pub latent: N,
    /// Pre-normalization batch statistics of each conv block.
    pub batch_stats: Vec<RunningStats>,
}

/// Encoder pass. `hyper` holds the hypernetwork parameter nodes in
/// [`ParamSet`] order; `theta_nodes` is used only when θ gradients are on.
pub fn encode_support<G: Graph>(
    g: &mut G,
    hp: &HypernetParams,
    hyper: &[G::Node],
    planes: &[ImagePlane],
    theta: &TargetParams,
    theta_nodes: &TargetNodes<G::Node>,
) -> Result<Encoded<G::Node>> {
    let cfg = &hp.config;
    let x = plane_batch(planes)?;
    let k = planes.len();
    let mut h = g.constant(x);
    let mut batch_stats = Vec::with_capacity(cfg.conv_channels.len());
    let spec = Conv2dSpec { stride: 2, pad: 1 };
    for i in 0..cfg.conv_channels.len() {
        let w = &hyper[hp.index(&format!("encoder.{i}.conv.weight"))];
        // batch norm removes any per-channel offset, so the conv has no bias
        let b = g.constant(Tensor::zeros(vec![g.value(w).shape()[0]]));
        let conv = g.conv2d(&h, w, &b, spec)?;
        batch_stats.push(batch_channel_stats(g.value(&conv))?);
        let running = match cfg.norm {
            NormMode::Task => None,
            NormMode::Running => Some(Arc::new(hp.running[i].clone())),
        };
        let gamma = &hyper[hp.index(&format!("encoder.{i}.bn.gamma"))];
        let beta = &hyper[hp.index(&format!("encoder.{i}.bn.beta"))];
        let normed = g.batchnorm2d(&conv, gamma, beta, running)?;
        h = g.relu(&normed)?;
    }
    let shape = g.value(&h).shape().to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let flat = g.reshape(&h, &[k, c, hw])?;
    let pooled = g.mean(&flat, Some(2))?;
    let mut code = g.reshape(&pooled, &[k, c])?;
    if cfg.use_dirs {
        let dirs: Vec<f64> = planes
            .iter()
            .flat_map(|p| {
                let d = p.view_direction();
                [d.x, d.y, d.z]
            })
            .collect();
        let dirs = g.constant(Tensor::new(vec![k, 3], dirs)?);
        code = g.concat(&[&code, &dirs], 1)?;
    }
    let mut latent = g.mean(&code, Some(0))?;
    if cfg.use_weights {
        let layers = theta_input_layers(hp);
        let flat_theta = if cfg.theta_gradient {
            let mut parts = Vec::with_capacity(2 * layers.len());
            for &l in &layers {
                for node in [&theta_nodes.nodes[2 * l], &theta_nodes.nodes[2 * l + 1]] {
                    let n = g.value(node).len();
                    parts.push(g.reshape(node, &[1, n])?);
                }
            }
            let refs: Vec<&G::Node> = parts.iter().collect();
            g.concat(&refs, 1)?
        } else {
            let mut data = Vec::new();
            for &l in &layers {
                data.extend_from_slice(theta.params.tensors()[2 * l].data());
                data.extend_from_slice(theta.params.tensors()[2 * l + 1].data());
            }
            g.constant(Tensor::row(data))
        };
        let w = &hyper[hp.index("theta_proj.weight")];
        let b = &hyper[hp.index("theta_proj.bias")];
        let proj = g.matmul(&flat_theta, w)?;
        let proj = g.add(&proj, b)?;
        latent = g.concat(&[&latent, &proj], 1)?;
    }
    Ok(Encoded { latent, batch_stats })
}

/// Fusion MLP and per-layer heads.
pub fn predict_delta<G: Graph>(
    g: &mut G,
    hp: &HypernetParams,
    hyper: &[G::Node],
    latent: &G::Node,
) -> Result<DeltaNodes<G::Node>> {
    if g.value(latent).shape() != [1, hp.latent_dim()] {
        return Err(Error::contract(format!(
            "latent has shape {:?}, hypernetwork expects [1, {}]",
            g.value(latent).shape(),
            hp.latent_dim()
        )));
    }
    let mut h = latent.clone();
    for i in 0..hp.config.fusion_depth {
        let w = &hyper[hp.index(&format!("fusion.{i}.weight"))];
        let b = &hyper[hp.index(&format!("fusion.{i}.bias"))];
        let pre = g.matmul(&h, w)?;
        let pre = g.add(&pre, b)?;
        h = g.relu(&pre)?;
    }
    let mut layers = Vec::new();
    for (index, name, fi, fo) in hp.mask.resolve(&hp.target) {
        let w = &hyper[hp.index(&format!("head.{name}.weight"))];
        let b = &hyper[hp.index(&format!("head.{name}.bias"))];
        let out = g.matmul(&h, w)?;
        let out = g.add(&out, b)?;
        let dw = g.slice(&out, 1, 0, fi * fo)?;
        let dw = g.reshape(&dw, &[fi, fo])?;
        let db = g.slice(&out, 1, fi * fo, fi * fo + fo)?;
        layers.push((index, dw, db));
    }
    Ok(DeltaNodes { layers })
}
