//! Radiance-field decoders whose weights the hypernetwork adapts.
//!
//! All three families share one layer layout:
//!
//! ```text
//! trunk.0 .. trunk.{D-1}   ReLU MLP over the family-specific trunk input
//! sigma_head               trunk → 1, softplus
//! feature                  trunk → width, linear
//! color_head               [feature, enc(d)] → 3, sigmoid
//! ```
//!
//! The trunk input is `enc(x)` for `nerf`, the plane features `z` for
//! `multiplane` and `[enc(x), z]` for `pointmultiplane`. Layer names are part
//! of the public contract: update masks refer to them.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::planes::{feature_matrix, feature_width, ImagePlane, PlaneFeatures};
use crate::render::{RadianceField, RadianceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Nerf,
    Multiplane,
    Pointmultiplane,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::Nerf,
        Architecture::Multiplane,
        Architecture::Pointmultiplane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Nerf => "nerf",
            Architecture::Multiplane => "multiplane",
            Architecture::Pointmultiplane => "pointmultiplane",
        }
    }

    pub fn uses_position(self) -> bool {
        matches!(self, Architecture::Nerf | Architecture::Pointmultiplane)
    }

    pub fn uses_planes(self) -> bool {
        matches!(self, Architecture::Multiplane | Architecture::Pointmultiplane)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub frequencies: usize,
    pub include_input: bool,
}

impl EncodingConfig {
    pub fn new(frequencies: usize) -> Self {
        EncodingConfig {
            frequencies,
            include_input: true,
        }
    }

    pub fn encoded_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.frequencies + usize::from(self.include_input))
    }
}

/// `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv)]`.
pub fn positional_encoding(v: &[f64], cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.encoded_dim(v.len()));
    if cfg.include_input {
        out.extend_from_slice(v);
    }
    for l in 0..cfg.frequencies {
        let freq = std::f64::consts::PI * (1u64 << l) as f64;
        out.extend(v.iter().map(|x| (freq * x).sin()));
        out.extend(v.iter().map(|x| (freq * x).cos()));
    }
    out
}

fn encode_rows(rows: &[Vector3<f64>], cfg: &EncodingConfig) -> Result<Tensor> {
    let dim = cfg.encoded_dim(3);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend(positional_encoding(r.as_slice(), cfg));
    }
    Tensor::new(vec![rows.len(), dim], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub arch: Architecture,
    /// Number of trunk layers.
    pub depth: usize,
    pub width: usize,
    pub position_encoding: EncodingConfig,
    pub direction_encoding: EncodingConfig,
    /// Conditioning planes per task, taken from the front of the support set.
    pub n_planes: usize,
    /// Append one validity bit per plane after the 5n feature slots.
    pub plane_mask: bool,
    /// Trunk layer that re-reads the trunk input (nerf only).
    pub skip_layer: Option<usize>,
}

impl TargetConfig {
    pub fn new(arch: Architecture, depth: usize, width: usize, n_planes: usize) -> Self {
        TargetConfig {
            arch,
            depth,
            width,
            position_encoding: EncodingConfig::new(10),
            direction_encoding: EncodingConfig::new(4),
            n_planes,
            plane_mask: true,
            skip_layer: (arch == Architecture::Nerf).then_some(4),
        }
    }

    pub fn feature_dim(&self) -> usize {
        if self.arch.uses_planes() {
            feature_width(self.n_planes, self.plane_mask)
        } else {
            0
        }
    }

    pub fn position_dim(&self) -> usize {
        if self.arch.uses_position() {
            self.position_encoding.encoded_dim(3)
        } else {
            0
        }
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.position_dim() + self.feature_dim()
    }

    pub fn direction_dim(&self) -> usize {
        self.direction_encoding.encoded_dim(3)
    }

    fn skip_at(&self, layer: usize) -> bool {
        self.arch == Architecture::Nerf && self.skip_layer == Some(layer) && layer > 0
    }

    /// `(name, fan_in, fan_out)` for every layer, in layout order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let input = self.trunk_input_dim();
        let mut layers = Vec::with_capacity(self.depth + 3);
        for i in 0..self.depth {
            let mut fan_in = if i == 0 { input } else { self.width };
            if self.skip_at(i) {
                fan_in += input;
            }
            layers.push((format!("trunk.{i}"), fan_in, self.width));
        }
        layers.push(("sigma_head".into(), self.width, 1));
        layers.push(("feature".into(), self.width, self.width));
        layers.push(("color_head".into(), self.width + self.direction_dim(), 3));
        layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layer_shapes().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::contract("target network needs depth and width > 0"));
        }
        if self.arch.uses_planes() && self.n_planes == 0 {
            return Err(Error::contract("plane-conditioned decoder needs n_planes > 0"));
        }
        Ok(())
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Decoder weights θ. Each layer stores `weight [fan_in, fan_out]` and
/// `bias [1, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetParams {
    pub config: TargetConfig,
    pub params: ParamSet,
}

impl TargetParams {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(config: TargetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, fan_in, fan_out) in config.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(weight_name(&name), Tensor::new(vec![fan_in, fan_out], w)?);
            params.push(bias_name(&name), Tensor::new(vec![1, fan_out], b)?);
        }
        Ok(TargetParams { config, params })
    }

    pub fn zeros(config: TargetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, fan_in, fan_out) in config.layer_shapes() {
            params.push(weight_name(&name), Tensor::zeros(vec![fan_in, fan_out]));
            params.push(bias_name(&name), Tensor::zeros(vec![1, fan_out]));
        }
        Ok(TargetParams { config, params })
    }

    /// Checks that `params` holds exactly the layers `config` describes.
    pub fn from_parts(config: TargetConfig, params: ParamSet) -> Result<Self> {
        let expected = TargetParams::zeros(config.clone())?;
        let same_layout = expected.params.names() == params.names()
            && expected
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same_layout {
            return Err(Error::shape("target parameters do not match the configured layout"));
        }
        Ok(TargetParams { config, params })
    }

    pub fn layer(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.params.get(&weight_name(name))?, self.params.get(&bias_name(name))?))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.flatten()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<TargetParams> {
        Ok(TargetParams {
            config: self.config.clone(),
            params: self.params.unflatten(flat)?,
        })
    }

    /// Layer weights as graph nodes, in layout order.
    pub fn to_nodes<G: Graph>(&self, g: &mut G, requires_grad: bool) -> TargetNodes<G::Node> {
        let nodes = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect();
        TargetNodes { nodes }
    }
}

/// Graph handles for every target tensor, in [`ParamSet`] order
/// (`weight, bias` per layer).
#[derive(Debug, Clone)]
pub struct TargetNodes<N> {
    pub nodes: Vec<N>,
}

impl<N> TargetNodes<N> {
    pub fn layer(&self, index: usize) -> (&N, &N) {
        (&self.nodes[2 * index], &self.nodes[2 * index + 1])
    }
}

/// Constant (non-differentiable) per-sample inputs to a decoder.
#[derive(Debug, Clone)]
pub struct TargetInputs {
    pub positions: Option<Tensor>,
    pub features: Option<Tensor>,
    pub directions: Tensor,
}

impl TargetInputs {
    pub fn build(cfg: &TargetConfig, points: &[Point3], dirs: &[Vector3<f64>], planes: &[ImagePlane]) -> Result<Self> {
        if points.len() != dirs.len() {
            return Err(Error::contract("one direction per point required"));
        }
        let positions = if cfg.arch.uses_position() {
            Some(encode_rows(points, &cfg.position_encoding)?)
        } else {
            None
        };
        let features = if cfg.arch.uses_planes() {
            if planes.len() != cfg.n_planes {
                return Err(Error::contract(format!(
                    "decoder expects {} planes, got {}",
                    cfg.n_planes,
                    planes.len()
                )));
            }
            Some(feature_matrix(points, planes, cfg.plane_mask)?)
        } else {
            None
        };
        Ok(TargetInputs {
            positions,
            features,
            directions: encode_rows(dirs, &cfg.direction_encoding)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.directions.shape()[0]
    }
}

fn linear<G: Graph>(g: &mut G, x: &G::Node, w: &G::Node, b: &G::Node) -> Result<G::Node> {
    let xw = g.matmul(x, w)?;
    g.add(&xw, b)
}

/// Decoder forward pass. Returns `(sigma [N,1], rgb [N,3])` after the head
/// activations.
pub fn decode<G: Graph>(
    g: &mut G,
    cfg: &TargetConfig,
    theta: &TargetNodes<G::Node>,
    inputs: &TargetInputs,
) -> Result<(G::Node, G::Node)> {
    let trunk_in = match (cfg.arch, &inputs.positions, &inputs.features) {
        (Architecture::Nerf, Some(p), _) => g.constant(p.clone()),
        (Architecture::Multiplane, _, Some(f)) => g.constant(f.clone()),
        (Architecture::Pointmultiplane, Some(p), Some(f)) => {
            let joined = Tensor::new(
                vec![p.shape()[0], p.shape()[1] + f.shape()[1]],
                p.data()
                    .chunks_exact(p.shape()[1])
                    .zip(f.data().chunks_exact(f.shape()[1]))
                    .flat_map(|(a, b)| a.iter().chain(b).copied())
                    .collect(),
            )?;
            g.constant(joined)
        }
        _ => {
            return Err(Error::contract(format!(
                "inputs were not built for the {} decoder",
                cfg.arch.name()
            )))
        }
    };
    if g.value(&trunk_in).shape()[1] != cfg.trunk_input_dim() {
        return Err(Error::contract(format!(
            "trunk input has width {}, decoder expects {}",
            g.value(&trunk_in).shape()[1],
            cfg.trunk_input_dim()
        )));
    }
    let mut h = trunk_in.clone();
    for i in 0..cfg.depth {
        let x = if cfg.skip_at(i) {
            g.concat(&[&h, &trunk_in], 1)?
        } else {
            h
        };
        let (w, b) = theta.layer(i);
        let pre = linear(g, &x, w, b)?;
        h = g.relu(&pre)?;
    }
    let (w, b) = theta.layer(cfg.depth);
    let sigma_raw = linear(g, &h, w, b)?;
    let sigma = g.softplus(&sigma_raw)?;
    let (w, b) = theta.layer(cfg.depth + 1);
    let feature = linear(g, &h, w, b)?;
    let dirs = g.constant(inputs.directions.clone());
    let color_in = g.concat(&[&feature, &dirs], 1)?;
    let (w, b) = theta.layer(cfg.depth + 2);
    let rgb_raw = linear(g, &color_in, w, b)?;
    let rgb = g.sigmoid(&rgb_raw)?;
    Ok((sigma, rgb))
}

fn to_samples(sigma: &Tensor, rgb: &Tensor) -> Vec<RadianceSample> {
    sigma
        .data()
        .iter()
        .zip(rgb.data().chunks_exact(3))
        .map(|(&s, c)| RadianceSample {
            rgb: [c[0], c[1], c[2]],
            sigma: s,
        })
        .collect()
}

impl TargetParams {
    /// Batched eager evaluation.
    pub fn eval(&self, points: &[Point3], dirs: &[Vector3<f64>], planes: &[ImagePlane]) -> Result<Vec<RadianceSample>> {
        let inputs = TargetInputs::build(&self.config, points, dirs, planes)?;
        let mut g = Eager;
        let nodes = self.to_nodes(&mut g, false);
        let (sigma, rgb) = decode(&mut g, &self.config, &nodes, &inputs)?;
        Ok(to_samples(&sigma, &rgb))
    }

    fn eval_raw(
        &self,
        positions: Option<Tensor>,
        features: Option<Tensor>,
        d: &Vector3<f64>,
    ) -> Result<RadianceSample> {
        let inputs = TargetInputs {
            positions,
            features,
            directions: encode_rows(&[*d], &self.config.direction_encoding)?,
        };
        let mut g = Eager;
        let nodes = self.to_nodes(&mut g, false);
        let (sigma, rgb) = decode(&mut g, &self.config, &nodes, &inputs)?;
        Ok(to_samples(&sigma, &rgb)[0])
    }

    fn expect_arch(&self, arch: Architecture) -> Result<()> {
        if self.config.arch != arch {
            return Err(Error::contract(format!(
                "{} forward called on {} parameters",
                arch.name(),
                self.config.arch.name()
            )));
        }
        Ok(())
    }

    fn feature_row(&self, z: &PlaneFeatures) -> Result<Tensor> {
        if z.z.len() != 5 * self.config.n_planes || z.mask.len() != self.config.n_planes {
            return Err(Error::contract(format!(
                "plane features of length {} for a decoder over {} planes",
                z.z.len(),
                self.config.n_planes
            )));
        }
        let mut row = z.z.clone();
        if self.config.plane_mask {
            row.extend(z.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
        Ok(Tensor::row(row))
    }

    pub fn nerf_forward(&self, x: &Point3, d: &Vector3<f64>) -> Result<RadianceSample> {
        self.expect_arch(Architecture::Nerf)?;
        let pos = encode_rows(&[*x], &self.config.position_encoding)?;
        self.eval_raw(Some(pos), None, d)
    }

    pub fn multiplane_forward(&self, z: &PlaneFeatures, d: &Vector3<f64>) -> Result<RadianceSample> {
        self.expect_arch(Architecture::Multiplane)?;
        let f = self.feature_row(z)?;
        self.eval_raw(None, Some(f), d)
    }

    pub fn pointmultiplane_forward(&self, x: &Point3, z: &PlaneFeatures, d: &Vector3<f64>) -> Result<RadianceSample> {
        self.expect_arch(Architecture::Pointmultiplane)?;
        let pos = encode_rows(&[*x], &self.config.position_encoding)?;
        let f = self.feature_row(z)?;
        self.eval_raw(Some(pos), Some(f), d)
    }
}

/// A decoder bound to its conditioning planes.
pub struct ConditionedField<'a> {
    pub params: &'a TargetParams,
    pub planes: &'a [ImagePlane],
}

impl RadianceField for ConditionedField<'_> {
    fn query(&self, points: &[Point3], dirs: &[Vector3<f64>]) -> Result<Vec<RadianceSample>> {
        self.params.eval(points, dirs, self.planes)
    }
}
