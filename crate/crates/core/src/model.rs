//! Compact fully-convolutional segmentation model and its checkpoint format.
//!
//! # Checkpoint layout
//!
//! A checkpoint is a UTF-8 manifest of `key=value` lines terminated by the
//! line `end_manifest`, immediately followed by the parameter blocks as raw
//! little-endian IEEE-754 `f32` values, concatenated in manifest order:
//!
//! ```text
//! format=shapepu-checkpoint-v1
//! classes=4                       # output channels (m + 1)
//! layer.0=conv 1 16 3 relu        # in out kernel activation
//! layer.1=conv 16 32 3 relu
//! layer.2=conv 32 16 3 relu
//! layer.3=conv 16 4 1 softmax
//! epoch=37
//! config_hash=0123abcd...
//! adam_step=111                   # 0 when no optimizer state is stored
//! block.0=layer.0.weight 16,1,3,3
//! block.1=layer.0.bias 16
//! ...
//! block.8=adam.m.0 16,1,3,3       # optional first/second moments
//! ...
//! end_manifest
//! <f32 LE data for block.0><f32 LE data for block.1>...
//! ```

use std::io::{BufRead, Write};

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::phantom::stream;
use crate::tensor::{Image, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

impl ConvSpec {
    fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

/// Parameter tensors are kept exactly representable as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    layers: Vec<ConvSpec>,
    params: Vec<Tensor>,
}

/// Rounds every value to the nearest `f32`.
pub fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

impl SegModel {
    /// conv3x3(1→16), conv3x3(16→32), conv3x3(32→16) with ReLU, then
    /// conv1x1(16→classes) and a channel softmax.
    pub fn default_layers(classes: usize) -> Vec<ConvSpec> {
        let conv = |i, o, k, a| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: k,
            activation: a,
        };
        vec![
            conv(1, 16, 3, Activation::Relu),
            conv(16, 32, 3, Activation::Relu),
            conv(32, 16, 3, Activation::Relu),
            conv(16, classes, 1, Activation::Softmax),
        ]
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`) for the ReLU layers, a
    /// ten times smaller fan-in normal for the classifier so the initial
    /// prediction is close to uniform; zero biases.
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        Self::with_layers(Self::default_layers(classes), seed)
    }

    pub fn with_layers(layers: Vec<ConvSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = stream(seed, 0, 0x1417);
        let mut params = Vec::new();
        for spec in &layers {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let std = match spec.activation {
                Activation::Relu => (2.0 / fan_in).sqrt(),
                Activation::Softmax => 0.1 / fan_in.sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut w = Tensor::from_fn(&spec.weight_shape(), |_| normal.sample(&mut rng));
            round_f32(w.data_mut());
            params.push(w);
            params.push(Tensor::zeros(&[spec.out_channels]));
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Weight and bias tensors, alternating, layer by layer.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer.{i}.weight"), format!("layer.{i}.bias")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds the parameters to `graph` as differentiable leaves.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.clone())).collect()
    }

    /// Builds the forward pass on an `N x 1 x H x W` input node.
    pub fn forward_graph(&self, graph: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let mut x = input;
        for (i, spec) in self.layers.iter().enumerate() {
            let conv = graph
                .conv2d(x, params[2 * i], params[2 * i + 1])
                .map_err(|e| layer_error(i, e))?;
            x = match spec.activation {
                Activation::Relu => graph.relu(conv),
                Activation::Softmax => graph.softmax_channels(conv),
            }
            .map_err(|e| layer_error(i, e))?;
        }
        Ok(x)
    }

    /// Inference on one image: `1 x classes x H x W` probabilities.
    pub fn forward(&self, image: &Image) -> Result<Tensor> {
        let mut graph = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.constant(p.clone()))
            .collect();
        let input = graph.constant(image.to_tensor());
        let out = self.forward_graph(&mut graph, &params, input)?;
        Ok(graph.value(out).clone())
    }
}

fn layer_error(layer: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, context } => Error::NonFinite {
            op,
            context: format!("{context} in layer {layer}"),
        },
        other => other,
    }
}

fn validate_layers(layers: &[ConvSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Checkpoint("model has no layers".into()));
    }
    for pair in layers.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::Checkpoint(format!(
                "layer channel mismatch: {} -> {}",
                pair[0].out_channels, pair[1].in_channels
            )));
        }
    }
    if layers[0].in_channels != 1 {
        return Err(Error::Checkpoint(
            "first layer must take one input channel".into(),
        ));
    }
    Ok(())
}

/// Adam moments, stored at `f32` precision like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &SegModel) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub epoch: usize,
    pub config_hash: String,
    pub optimizer: Option<AdamState>,
}

const FORMAT: &str = "shapepu-checkpoint-v1";

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(&format!("format={FORMAT}\n"));
        manifest.push_str(&format!("classes={}\n", self.model.classes()));
        for (i, l) in self.model.layers.iter().enumerate() {
            let act = match l.activation {
                Activation::Relu => "relu",
                Activation::Softmax => "softmax",
            };
            manifest.push_str(&format!(
                "layer.{i}=conv {} {} {} {act}\n",
                l.in_channels, l.out_channels, l.kernel
            ));
        }
        manifest.push_str(&format!("epoch={}\n", self.epoch));
        manifest.push_str(&format!("config_hash={}\n", self.config_hash));
        manifest.push_str(&format!(
            "adam_step={}\n",
            self.optimizer.as_ref().map_or(0, |o| o.step)
        ));
        let mut blocks: Vec<(String, &Tensor)> = self
            .model
            .param_names()
            .into_iter()
            .zip(self.model.params.iter())
            .collect();
        if let Some(opt) = &self.optimizer {
            for (i, t) in opt.m.iter().enumerate() {
                blocks.push((format!("adam.m.{i}"), t));
            }
            for (i, t) in opt.v.iter().enumerate() {
                blocks.push((format!("adam.v.{i}"), t));
            }
        }
        for (i, (name, t)) in blocks.iter().enumerate() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("block.{i}={name} {}\n", dims.join(",")));
        }
        manifest.push_str("end_manifest\n");
        out.write_all(manifest.as_bytes())?;
        for (_, t) in &blocks {
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl BufRead) -> Result<Self> {
        let mut kv: Vec<(String, String)> = Vec::new();
        loop {
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("manifest not terminated".into()));
            }
            let line = line.trim_end_matches('\n');
            if line == "end_manifest" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line {line:?}")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing key {key}")))
        };
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer {s:?}")))
        };
        if get("format")? != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                get("format")?
            )));
        }
        let mut layers = Vec::new();
        for i in 0.. {
            let Ok(spec) = get(&format!("layer.{i}")) else {
                break;
            };
            let parts: Vec<&str> = spec.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "conv" {
                return Err(Error::Checkpoint(format!("bad layer spec {spec:?}")));
            }
            let activation = match parts[4] {
                "relu" => Activation::Relu,
                "softmax" => Activation::Softmax,
                other => return Err(Error::Checkpoint(format!("unknown activation {other:?}"))),
            };
            layers.push(ConvSpec {
                in_channels: parse_usize(parts[1])?,
                out_channels: parse_usize(parts[2])?,
                kernel: parse_usize(parts[3])?,
                activation,
            });
        }
        validate_layers(&layers)?;
        if parse_usize(get("classes")?)? != layers.last().map_or(0, |l| l.out_channels) {
            return Err(Error::Checkpoint(
                "classes disagrees with the last layer".into(),
            ));
        }
        let epoch = parse_usize(get("epoch")?)?;
        let config_hash = get("config_hash")?.to_string();
        let adam_step = parse_usize(get("adam_step")?)? as u64;

        let mut blocks = Vec::new();
        for i in 0.. {
            let Ok(spec) = get(&format!("block.{i}")) else {
                break;
            };
            let (name, dims) = spec
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad block spec {spec:?}")))?;
            let shape: Vec<usize> = dims.split(',').map(parse_usize).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            input
                .read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated data for block {name}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            blocks.push((name.to_string(), Tensor::new(&shape, data)?));
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint(
                "trailing bytes after parameter blocks".into(),
            ));
        }

        let n_params = 2 * layers.len();
        if blocks.len() != n_params && blocks.len() != 3 * n_params {
            return Err(Error::Checkpoint(format!(
                "{} blocks for {} parameters",
                blocks.len(),
                n_params
            )));
        }
        let mut model = SegModel {
            layers,
            params: Vec::new(),
        };
        let names = model.param_names();
        for (i, (name, t)) in blocks.iter().take(n_params).enumerate() {
            let expect = if i % 2 == 0 {
                model.layers[i / 2].weight_shape().to_vec()
            } else {
                vec![model.layers[i / 2].out_channels]
            };
            if *name != names[i] || t.shape() != expect.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "block {i} is {name} {:?}, expected {} {expect:?}",
                    t.shape(),
                    names[i]
                )));
            }
        }
        model.params = blocks
            .iter()
            .take(n_params)
            .map(|(_, t)| t.clone())
            .collect();
        let optimizer = if blocks.len() == 3 * n_params {
            let take = |range: std::ops::Range<usize>| {
                blocks[range].iter().map(|(_, t)| t.clone()).collect()
            };
            Some(AdamState {
                step: adam_step,
                m: take(n_params..2 * n_params),
                v: take(2 * n_params..3 * n_params),
            })
        } else {
            None
        };
        Ok(Self {
            model,
            epoch,
            config_hash,
            optimizer,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize) -> Image {
        Image::from_fn(n, n, |r, c| ((r * 13 + c * 7) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn output_is_simplex_and_deterministic() {
        let model = SegModel::new(4, 3).unwrap();
        let img = image(16);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 4, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..4).map(|c| a.data()[c * 256 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let model = SegModel::new(4, 11).unwrap();
        let out = model.forward(&image(24)).unwrap();
        let hw = 24 * 24;
        for c in 0..4 {
            let mean = out.plane(0, c).iter().sum::<f64>() / hw as f64;
            assert!((mean - 0.25).abs() < 0.15, "class {c} mean {mean}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = SegModel::new(4, 5).unwrap();
        let mut opt = AdamState::new(&model);
        opt.step = 3;
        opt.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint {
            model: model.clone(),
            epoch: 7,
            config_hash: "abc123".into(),
            optimizer: Some(opt),
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let img = image(12);
        assert_eq!(
            back.model.forward(&img).unwrap(),
            model.forward(&img).unwrap()
        );
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let ck = Checkpoint {
            model: SegModel::new(4, 5).unwrap(),
            epoch: 0,
            config_hash: String::new(),
            optimizer: None,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
