//! Segmentation network with an explicit backbone / classifier split.
//!
//! The network is a desk-scale analog of a pyramid-pooling segmenter:
//!
//! * **backbone**: strided convolution blocks (conv, batch norm, ReLU, twice
//!   per block), downsampling by 2 per block, plus an optional auxiliary head
//!   tapped at the second-to-last block;
//! * **classifier body**: a pyramid pooling module followed by a 3x3
//!   convolution with `classifier_hidden` filters, batch norm and ReLU. Its
//!   output is the penultimate feature map;
//! * **classifier final**: a 1x1 convolution producing one logit per output
//!   class, bilinearly upsampled to the input size.
//!
//! Parameters live in a name-keyed store; the name prefix decides the
//! parameter group (`backbone.`, `classifier.body.`, `classifier.final.`).

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SegmentationSample;
use crate::error::{domain, Error, Result};
use crate::seed;
use layers::{adaptive_avg_pool, batch_norm, ones_var, upsample_bilinear, zeros_var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Spatial size the network is built for; pooling scales are checked
    /// against the resulting feature map.
    pub input_size: (usize, usize),
    /// Output channels of each stride-2 backbone block.
    pub backbone_channels: Vec<usize>,
    pub classifier_hidden: usize,
    pub num_outputs: usize,
    pub pooling_scales: Vec<usize>,
    pub aux_tap: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: (64, 64),
            backbone_channels: vec![16, 32, 64],
            classifier_hidden: 64,
            num_outputs: 2,
            pooling_scales: vec![1, 2, 4],
            aux_tap: true,
        }
    }
}

impl NetworkConfig {
    /// Spatial size of the backbone output for `input`.
    pub fn feature_size(&self, input: (usize, usize)) -> (usize, usize) {
        self.backbone_channels
            .iter()
            .fold(input, |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outputs < 2 {
            return Err(Error::Config("num_outputs must be at least 2".into()));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one non-empty block".into()));
        }
        if self.aux_tap && self.backbone_channels.len() < 2 {
            return Err(Error::Config("auxiliary tap needs at least two backbone blocks".into()));
        }
        if self.pooling_scales.is_empty() {
            return Err(Error::Config("pooling_scales must not be empty".into()));
        }
        let (fh, fw) = self.feature_size(self.input_size);
        for &s in &self.pooling_scales {
            if s == 0 || s > fh.min(fw) {
                return Err(Error::Config(format!(
                    "pooling scale {s} exceeds the {fh}x{fw} feature map"
                )));
            }
        }
        if self.classifier_hidden == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn pool_branch_channels(&self) -> usize {
        (self.backbone_channels.last().copied().unwrap_or(4) / 4).max(4)
    }
}

/// Parameter groups used by freezing policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    ClassifierBody,
    ClassifierFinal,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("backbone.") {
            Some(Self::Backbone)
        } else if name.starts_with("classifier.body.") {
            Some(Self::ClassifierBody)
        } else if name.starts_with("classifier.final.") {
            Some(Self::ClassifierFinal)
        } else {
            None
        }
    }
}

/// Which parameters stay trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trains.
    None,
    /// Backbone frozen; the whole classifier trains.
    FreezeBackbone,
    /// Only the final convolution trains.
    FreezeAllButLast,
}

impl FreezePolicy {
    pub fn is_trainable(self, group: ParamGroup) -> bool {
        match self {
            FreezePolicy::None => true,
            FreezePolicy::FreezeBackbone => group != ParamGroup::Backbone,
            FreezePolicy::FreezeAllButLast => group == ParamGroup::ClassifierFinal,
        }
    }
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics everywhere, no buffer updates.
    Eval,
    /// Batch statistics in trainable groups; frozen groups behave as in eval
    /// mode and their outputs are detached from the graph.
    Train(FreezePolicy),
}

impl Mode {
    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Mode::Eval => false,
            Mode::Train(p) => p.is_trainable(group),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `B x num_outputs x H x W`.
    pub logits: Tensor,
    /// `B x classifier_hidden x h x w`, the input of the final convolution.
    pub penultimate: Tensor,
    pub aux_logits: Option<Tensor>,
}

/// Output of the backbone.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub features: Tensor,
    pub aux_logits: Option<Tensor>,
}

/// Exact trainable/total parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFraction {
    pub trainable: u64,
    pub total: u64,
}

impl ParamFraction {
    pub fn value(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn percent(&self) -> String {
        format!("{:.4}%", 100.0 * self.value())
    }
}

pub struct Network {
    config: NetworkConfig,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

/// He-uniform weights for conv layers feeding a ReLU.
fn he_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    uniform(seed, name, shape, bound)
}

fn uniform(seed: u64, name: &str, shape: &[usize], bound: f32) -> Result<Var> {
    let mut rng = seed::rng(seed, name);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Var::from_vec(data, shape, &Device::Cpu)?)
}

/// Builds a network with deterministic initialization.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut add_bn = |params: &mut BTreeMap<String, Var>, prefix: &str, c: usize| -> Result<()> {
        params.insert(format!("{prefix}.weight"), ones_var(c)?);
        params.insert(format!("{prefix}.bias"), zeros_var(c)?);
        buffers.insert(format!("{prefix}.running_mean"), zeros_var(c)?);
        buffers.insert(format!("{prefix}.running_var"), ones_var(c)?);
        Ok(())
    };

    let mut c_in = config.in_channels;
    for (i, &c) in config.backbone_channels.iter().enumerate() {
        let p = format!("backbone.block{i}");
        let name = format!("{p}.conv1.weight");
        params.insert(name.clone(), he_uniform(seed, &name, &[c, c_in, 3, 3], c_in * 9)?);
        add_bn(&mut params, &format!("{p}.bn1"), c)?;
        let name = format!("{p}.conv2.weight");
        params.insert(name.clone(), he_uniform(seed, &name, &[c, c, 3, 3], c * 9)?);
        add_bn(&mut params, &format!("{p}.bn2"), c)?;
        c_in = c;
    }
    if config.aux_tap {
        let tap = config.backbone_channels[config.backbone_channels.len() - 2];
        let name = "backbone.aux.weight".to_string();
        let bound = 1.0 / (tap as f32).sqrt();
        params.insert(
            name.clone(),
            uniform(seed, &name, &[config.num_outputs, tap, 1, 1], bound)?,
        );
        params.insert("backbone.aux.bias".into(), zeros_var(config.num_outputs)?);
    }

    let feat = c_in;
    let branch = config.pool_branch_channels();
    for &s in &config.pooling_scales {
        let p = format!("classifier.body.ppm{s}");
        let name = format!("{p}.conv.weight");
        params.insert(name.clone(), he_uniform(seed, &name, &[branch, feat, 1, 1], feat)?);
        add_bn(&mut params, &format!("{p}.bn"), branch)?;
    }
    let fused = feat + branch * config.pooling_scales.len();
    let hidden = config.classifier_hidden;
    let name = "classifier.body.fuse.conv.weight".to_string();
    params.insert(
        name.clone(),
        he_uniform(seed, &name, &[hidden, fused, 3, 3], fused * 9)?,
    );
    add_bn(&mut params, "classifier.body.fuse.bn", hidden)?;

    let name = "classifier.final.weight".to_string();
    let bound = 1.0 / (hidden as f32).sqrt();
    params.insert(
        name.clone(),
        uniform(seed, &name, &[config.num_outputs, hidden, 1, 1], bound)?,
    );
    params.insert("classifier.final.bias".into(), zeros_var(config.num_outputs)?);

    Ok(Network {
        config: config.clone(),
        params,
        buffers,
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_outputs(&self) -> usize {
        self.config.num_outputs
    }

    /// All parameters by group-qualified name.
    pub fn parameters(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Batch-norm running statistics (not trainable, but checkpointed).
    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    fn param(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    fn bn(&self, x: &Tensor, prefix: &str, train: bool) -> Result<Tensor> {
        let buf = |n: &str| {
            self.buffers
                .get(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {prefix}.{n}")))
        };
        batch_norm(
            x,
            self.param(&format!("{prefix}.weight"))?,
            self.param(&format!("{prefix}.bias"))?,
            buf("running_mean")?,
            buf("running_var")?,
            train,
        )
    }

    fn conv(&self, x: &Tensor, name: &str, padding: usize, stride: usize) -> Result<Tensor> {
        Ok(x.conv2d(self.param(name)?.as_tensor(), padding, stride, 1, 1)?)
    }

    fn head(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = x.conv2d(w.as_tensor(), 0, 1, 1, 1)?;
        Ok(y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?)
    }

    /// Runs the backbone. Under a policy that freezes the backbone, the
    /// returned features are detached.
    pub fn backbone(&self, images: &Tensor, mode: Mode) -> Result<BackboneOutput> {
        check_finite(images)?;
        let (_, c, h, w) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(domain(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let train = mode.trains(ParamGroup::Backbone);
        let n = self.config.backbone_channels.len();
        let mut x = images.clone();
        let mut aux_logits = None;
        for i in 0..n {
            let p = format!("backbone.block{i}");
            x = self.conv(&x, &format!("{p}.conv1.weight"), 1, 2)?;
            x = self.bn(&x, &format!("{p}.bn1"), train)?.relu()?;
            x = self.conv(&x, &format!("{p}.conv2.weight"), 1, 1)?;
            x = self.bn(&x, &format!("{p}.bn2"), train)?.relu()?;
            if self.config.aux_tap && i + 2 == n {
                let a = self.head(&x, "backbone.aux")?;
                aux_logits = Some(upsample_bilinear(&a, (h, w))?);
            }
        }
        if matches!(mode, Mode::Train(_)) && !train {
            x = x.detach();
            aux_logits = aux_logits.map(|a| a.detach());
        }
        Ok(BackboneOutput {
            features: x,
            aux_logits,
        })
    }

    /// Runs the classifier on backbone features, returning
    /// `(penultimate, logits upsampled to out_size)`.
    pub fn classifier(&self, features: &Tensor, out_size: (usize, usize), mode: Mode) -> Result<(Tensor, Tensor)> {
        let train_body = mode.trains(ParamGroup::ClassifierBody);
        let (_, _, fh, fw) = features.dims4()?;
        let mut parts = vec![features.clone()];
        for &s in &self.config.pooling_scales {
            if s > fh.min(fw) {
                return Err(Error::Config(format!(
                    "pooling scale {s} exceeds the {fh}x{fw} feature map"
                )));
            }
            let p = format!("classifier.body.ppm{s}");
            let pooled = adaptive_avg_pool(features, s)?;
            let y = self.conv(&pooled, &format!("{p}.conv.weight"), 0, 1)?;
            let y = self.bn(&y, &format!("{p}.bn"), train_body)?.relu()?;
            parts.push(upsample_bilinear(&y, (fh, fw))?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        let y = self.conv(&cat, "classifier.body.fuse.conv.weight", 1, 1)?;
        let mut penultimate = self.bn(&y, "classifier.body.fuse.bn", train_body)?.relu()?;
        if matches!(mode, Mode::Train(_)) && !train_body {
            penultimate = penultimate.detach();
        }
        let logits = self.final_logits(&penultimate, out_size)?;
        Ok((penultimate, logits))
    }

    /// Final convolution on penultimate features, upsampled to `out_size`.
    pub fn final_logits(&self, penultimate: &Tensor, out_size: (usize, usize)) -> Result<Tensor> {
        let logits = self.head(penultimate, "classifier.final")?;
        upsample_bilinear(&logits, out_size)
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ForwardResult> {
        let (_, _, h, w) = images.dims4()?;
        let bb = self.backbone(images, mode)?;
        let (penultimate, logits) = self.classifier(&bb.features, (h, w), mode)?;
        Ok(ForwardResult {
            logits,
            penultimate,
            aux_logits: bb.aux_logits,
        })
    }

    /// Parameters left trainable by `policy`, in name order.
    pub fn apply_freeze(&self, policy: FreezePolicy) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(name, _)| ParamGroup::of(name).is_some_and(|g| policy.is_trainable(g)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> u64 {
        self.params.values().map(|v| v.elem_count() as u64).sum()
    }

    pub fn parameter_fraction(&self, policy: FreezePolicy) -> ParamFraction {
        let trainable = self
            .apply_freeze(policy)
            .iter()
            .map(|(_, v)| v.elem_count() as u64)
            .sum();
        ParamFraction {
            trainable,
            total: self.parameter_count(),
        }
    }

    /// Copies of every parameter and buffer.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters and buffers from `state`; every entry must match
    /// an existing tensor of the same shape.
    pub fn load_state(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        if state.len() != self.params.len() + self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "state has {} tensors, network has {}",
                state.len(),
                self.params.len() + self.buffers.len()
            )));
        }
        for (name, t) in state {
            let var = self
                .params
                .get(name)
                .or_else(|| self.buffers.get(name))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// A deep copy that shares no storage with `self`.
    pub fn try_clone(&self) -> Result<Network> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(n, v)| Ok((n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Network {
            config: self.config.clone(),
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
        })
    }

    /// SHA-256 over names and raw values of every parameter and buffer.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.params.iter().chain(&self.buffers) {
            h.update(name.as_bytes());
            let data: Vec<f32> = v.as_tensor().flatten_all()?.to_vec1()?;
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Grows the final layer from `old_classes` to `new_classes` outputs.
    ///
    /// Existing rows are copied; new rows are drawn from `seed` and new biases
    /// start at zero. The auxiliary head is dropped, since it only serves base
    /// training.
    pub fn expand_classifier_outputs(&self, old_classes: usize, new_classes: usize, seed: u64) -> Result<Network> {
        if old_classes != self.config.num_outputs {
            return Err(domain(format!(
                "network has {} outputs, not {old_classes}",
                self.config.num_outputs
            )));
        }
        if new_classes <= old_classes {
            return Err(domain(format!(
                "cannot expand from {old_classes} to {new_classes} outputs"
            )));
        }
        let mut config = self.config.clone();
        config.num_outputs = new_classes;
        config.aux_tap = false;
        let mut out = self.try_clone()?;
        out.config = config;
        out.params.retain(|n, _| !n.starts_with("backbone.aux."));

        let hidden = self.config.classifier_hidden;
        let extra = new_classes - old_classes;
        let fresh = uniform(
            seed,
            "classifier.final.weight.expand",
            &[extra, hidden, 1, 1],
            1.0 / (hidden as f32).sqrt(),
        )?;
        let old_w = self.param("classifier.final.weight")?.as_tensor().copy()?;
        let w = Tensor::cat(&[&old_w, fresh.as_tensor()], 0)?;
        let old_b = self.param("classifier.final.bias")?.as_tensor().copy()?;
        let b = Tensor::cat(&[old_b, Tensor::zeros(extra, DType::F32, &Device::Cpu)?], 0)?;
        out.params
            .insert("classifier.final.weight".into(), Var::from_tensor(&w)?);
        out.params.insert("classifier.final.bias".into(), Var::from_tensor(&b)?);
        Ok(out)
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        params: BTreeMap<String, Var>,
        buffers: BTreeMap<String, Var>,
    ) -> Network {
        Network {
            config,
            params,
            buffers,
        }
    }
}

/// Stacks sample images into a `B x C x H x W` tensor.
pub fn images_to_tensor<'a>(samples: impl IntoIterator<Item = &'a SegmentationSample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for s in samples {
        let d = s.image.dim();
        if *dims.get_or_insert(d) != d {
            return Err(domain(format!(
                "sample {} has shape {d:?}, batch has {:?}",
                s.id,
                dims.unwrap()
            )));
        }
        data.extend(s.image.iter().copied());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| domain("cannot stack an empty batch"))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?)
}

/// Trainable fraction of `network` under `policy`.
pub fn parameter_fraction(network: &Network, policy: FreezePolicy) -> ParamFraction {
    network.parameter_fraction(policy)
}

fn check_finite(t: &Tensor) -> Result<()> {
    let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in network input".into()))
    }
}
