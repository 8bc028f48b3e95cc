//! The experiment networks and their checkpoint format.
//!
//! Every model shares one trunk: first layer, relu, 2x2 pool, convolution,
//! relu, 2x2 pool, hidden dense layer, relu, dropout, linear classifier. Only
//! the first layer differs between models. With `groups > 1` the first layer
//! emits one feature stack per group and each stack is classified
//! separately by the shared trunk, producing one prediction per group.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{parse_key_values, ByteReader};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::layers::{
    softmax_xent, Conv2d, Dense, Dropout, Local2d, LsnnLayer, LsnnLayerSpec, MaxPool2, Mode, Param, ParamGroup,
    ParamNet, ParameterNetSpec, Relu, SmootherMode,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::gradcheck::Differentiable;

pub const CHECKPOINT_HEADER: &str = "LSNN-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnn,
    Local,
    LsnnLocation,
    LsnnContent,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Cnn, ModelKind::Local, ModelKind::LsnnLocation, ModelKind::LsnnContent];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Local => "local",
            ModelKind::LsnnLocation => "lsnn-location",
            ModelKind::LsnnContent => "lsnn-content",
        }
    }

    pub fn is_lsnn(self) -> bool {
        matches!(self, ModelKind::LsnnLocation | ModelKind::LsnnContent)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (cnn, local, lsnn-location, lsnn-content)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub model: ModelKind,
    pub in_hw: (usize, usize),
    pub groups: usize,
    pub filters1: usize,
    pub filters2: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub factor_rank: usize,
    pub normalize: bool,
}

impl NetConfig {
    pub fn new(model: ModelKind) -> Self {
        NetConfig {
            model,
            in_hw: (42, 42),
            groups: 1,
            filters1: 16,
            filters2: 32,
            kernel: 3,
            hidden: 256,
            classes: 10,
            dropout: 0.5,
            factor_rank: 1,
            normalize: true,
        }
    }

    /// Defaults for a benchmark task: the sequence task reads three digits
    /// through three groups and doubles the hidden width.
    pub fn for_task(model: ModelKind, task: Task) -> Self {
        let mut c = NetConfig::new(model);
        if task == Task::Sequence {
            c.groups = 3;
            c.hidden = 512;
        }
        c
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("model", self.model.to_string()),
            ("in_h", self.in_hw.0.to_string()),
            ("in_w", self.in_hw.1.to_string()),
            ("groups", self.groups.to_string()),
            ("filters1", self.filters1.to_string()),
            ("filters2", self.filters2.to_string()),
            ("kernel", self.kernel.to_string()),
            ("hidden", self.hidden.to_string()),
            ("classes", self.classes.to_string()),
            ("dropout", self.dropout.to_string()),
            ("factor_rank", self.factor_rank.to_string()),
            ("normalize", self.normalize.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let model: ModelKind = pairs
            .iter()
            .find(|(k, _)| k == "model")
            .ok_or_else(|| Error::Config("network config lacks model".into()))?
            .1
            .parse()?;
        let mut c = NetConfig::new(model);
        for (k, v) in pairs {
            let bad = || Error::Config(format!("{k}: bad value {v:?}"));
            let num = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "model" => {}
                "in_h" => c.in_hw.0 = num()?,
                "in_w" => c.in_hw.1 = num()?,
                "groups" => c.groups = num()?,
                "filters1" => c.filters1 = num()?,
                "filters2" => c.filters2 = num()?,
                "kernel" => c.kernel = num()?,
                "hidden" => c.hidden = num()?,
                "classes" => c.classes = num()?,
                "dropout" => c.dropout = v.parse().map_err(|_| bad())?,
                "factor_rank" => c.factor_rank = num()?,
                "normalize" => c.normalize = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown network key {k:?}"))),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug)]
enum FirstLayer {
    Conv(Conv2d),
    Local(Local2d),
    Lsnn(LsnnLayer),
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetConfig,
    first: FirstLayer,
    param_net: Option<ParamNet>,
    relu1: Relu,
    pool1: MaxPool2,
    conv2: Conv2d,
    relu2: Relu,
    pool2: MaxPool2,
    fc1: Dense,
    relu3: Relu,
    dropout: Dropout,
    fc2: Dense,
    batch: usize,
    pooled_shape: Vec<usize>,
}

/// `[N, G * F, H, W]` to `[G * N, F, H, W]` with row `g * N + i`.
fn groups_to_batch(x: &Tensor, groups: usize) -> Tensor {
    let &[n, gf, h, w] = x.shape() else { unreachable!() };
    let f = gf / groups;
    let plane = f * h * w;
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for g in 0..groups {
            let src = &x.data()[(i * groups + g) * plane..(i * groups + g + 1) * plane];
            out[(g * n + i) * plane..(g * n + i + 1) * plane].copy_from_slice(src);
        }
    }
    Tensor::new(vec![groups * n, f, h, w], out).expect("finite activations")
}

fn batch_to_groups(x: &Tensor, groups: usize) -> Tensor {
    let &[gn, f, h, w] = x.shape() else { unreachable!() };
    let n = gn / groups;
    let plane = f * h * w;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        for i in 0..n {
            let src = &x.data()[(g * n + i) * plane..(g * n + i + 1) * plane];
            out[(i * groups + g) * plane..(i * groups + g + 1) * plane].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, groups * f, h, w], out).expect("finite gradients")
}

impl Network {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.groups == 0 || c.classes < 2 {
            return Err(Error::Config(format!("invalid network config {c:?}")));
        }
        let width = c.groups * c.filters1;
        let (first, param_net) = match c.model {
            ModelKind::Cnn => (
                FirstLayer::Conv(Conv2d::new("layer1", 1, width, c.kernel, c.in_hw, ParamGroup::Main, rng)?),
                None,
            ),
            ModelKind::Local => (FirstLayer::Local(Local2d::new("layer1", 1, width, c.kernel, c.in_hw, rng)?), None),
            ModelKind::LsnnLocation | ModelKind::LsnnContent => {
                let mode = if c.model == ModelKind::LsnnLocation {
                    SmootherMode::Location
                } else {
                    SmootherMode::Content
                };
                let spec = LsnnLayerSpec {
                    kernel: [c.kernel, c.kernel],
                    num_filters: c.filters1,
                    factor_rank: c.factor_rank,
                    groups: c.groups,
                    mode,
                    normalize: c.normalize,
                };
                let layer = LsnnLayer::new("layer1", spec.clone(), 1, c.in_hw, rng)?;
                let pn = (mode == SmootherMode::Content)
                    .then(|| ParamNet::new("paramnet", ParameterNetSpec::new(c.in_hw, spec.num_smoothers()), rng))
                    .transpose()?;
                (FirstLayer::Lsnn(layer), pn)
            }
        };
        let (h1, w1) = (c.in_hw.0 - c.kernel + 1, c.in_hw.1 - c.kernel + 1);
        if h1 % 2 != 0 || w1 % 2 != 0 {
            return Err(Error::Config(format!("first layer output {h1}x{w1} is not poolable")));
        }
        let conv2 = Conv2d::new("conv2", c.filters1, c.filters2, c.kernel, (h1 / 2, w1 / 2), ParamGroup::Main, rng)?;
        let (h2, w2) = conv2.out_hw();
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(Error::Config(format!("second layer output {h2}x{w2} is not poolable")));
        }
        let flat = c.filters2 * (h2 / 2) * (w2 / 2);
        let fc1 = Dense::new("fc1", flat, c.hidden, ParamGroup::Main, rng);
        let fc2 = Dense::new("fc2", c.hidden, c.classes, ParamGroup::Main, rng);
        Ok(Network {
            dropout: Dropout::new(c.dropout)?,
            config,
            first,
            param_net,
            relu1: Relu::new(),
            pool1: MaxPool2::new(),
            conv2,
            relu2: Relu::new(),
            pool2: MaxPool2::new(),
            fc1,
            relu3: Relu::new(),
            fc2,
            batch: 0,
            pooled_shape: Vec::new(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn lsnn_layer(&self) -> Option<&LsnnLayer> {
        match &self.first {
            FirstLayer::Lsnn(l) => Some(l),
            _ => None,
        }
    }

    pub fn param_net_mut(&mut self) -> Option<&mut ParamNet> {
        self.param_net.as_mut()
    }

    /// Gaussian parameters emitted by the parameter network, `[N, 5 * S]`.
    pub fn content_params(&mut self, x: &Tensor) -> Result<Option<Tensor>> {
        self.param_net.as_mut().map(|pn| pn.forward(x)).transpose()
    }

    /// `[N, 1, H, W]` images to `[G * N, classes]` logits; row `g * N + i`
    /// is group `g`'s prediction for image `i`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.batch = x.shape().first().copied().unwrap_or(0);
        let h = match &mut self.first {
            FirstLayer::Conv(l) => l.forward(x)?,
            FirstLayer::Local(l) => l.forward(x)?,
            FirstLayer::Lsnn(l) => {
                let content = self.param_net.as_mut().map(|pn| pn.forward(x)).transpose()?;
                l.forward(x, content.as_ref())?
            }
        };
        let h = groups_to_batch(&h, self.config.groups);
        let h = self.pool1.forward(&self.relu1.forward(&h))?;
        let h = self.conv2.forward(&h)?;
        let h = self.pool2.forward(&self.relu2.forward(&h))?;
        self.pooled_shape = h.shape().to_vec();
        let h = self.fc1.forward(&h)?;
        let h = self.dropout.forward(&self.relu3.forward(&h), mode, rng);
        self.fc2.forward(&h)
    }

    /// Accumulates parameter gradients from the logits gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let g = self.fc2.backward(grad_logits)?;
        let g = self.relu3.backward(&self.dropout.backward(&g)?)?;
        let g = self.fc1.backward(&g)?.reshape(&self.pooled_shape)?;
        let g = self.relu2.backward(&self.pool2.backward(&g)?)?;
        let g = self.conv2.backward(&g, true)?.expect("input gradient requested");
        let g = self.relu1.backward(&self.pool1.backward(&g)?)?;
        let g = batch_to_groups(&g, self.config.groups);
        match &mut self.first {
            FirstLayer::Conv(l) => {
                l.backward(&g, false)?;
            }
            FirstLayer::Local(l) => {
                l.backward(&g, false)?;
            }
            FirstLayer::Lsnn(l) => {
                let back = l.backward(&g, false)?;
                if let (Some(pn), Some(gc)) = (self.param_net.as_mut(), back.content) {
                    pn.backward(&gc)?;
                }
            }
        }
        Ok(())
    }

    /// Flattens per-image label lists into the `[G * N]` target order.
    pub fn targets(&self, labels: &[&[u8]]) -> Result<Vec<usize>> {
        let g = self.config.groups;
        let mut out = vec![0; g * labels.len()];
        for (i, l) in labels.iter().enumerate() {
            if l.len() != g {
                return Err(Error::dim(format!("image {i} has {} labels, network reads {g}", l.len())));
            }
            for (k, &v) in l.iter().enumerate() {
                out[k * labels.len() + i] = v as usize;
            }
        }
        Ok(out)
    }

    /// Mean loss and number of wrong predictions.
    pub fn loss_and_errors(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor, usize)> {
        let (loss, grad) = softmax_xent(logits, targets)?;
        let c = logits.shape()[1];
        let wrong = logits
            .data()
            .chunks_exact(c)
            .zip(targets)
            .filter(|(row, &t)| argmax(row) != t)
            .count();
        Ok((loss, grad, wrong))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn layer_params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut v: Vec<(&'static str, &mut Param)> = match &mut self.first {
            FirstLayer::Conv(l) => l.params_mut().into_iter().map(|p| ("conv", p)).collect(),
            FirstLayer::Local(l) => l.params_mut().into_iter().map(|p| ("local", p)).collect(),
            FirstLayer::Lsnn(l) => l.params_mut().into_iter().map(|p| ("lsnn", p)).collect(),
        };
        if let Some(pn) = self.param_net.as_mut() {
            let kinds = ["conv", "conv", "conv", "conv", "fc", "fc"];
            v.extend(kinds.into_iter().zip(pn.params_mut()));
        }
        v.extend(self.conv2.params_mut().into_iter().map(|p| ("conv", p)));
        v.extend(self.fc1.params_mut().into_iter().map(|p| ("fc", p)));
        v.extend(self.fc2.params_mut().into_iter().map(|p| ("fc", p)));
        v
    }

    /// All trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layer_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = match &self.first {
            FirstLayer::Conv(l) => l.params(),
            FirstLayer::Local(l) => l.params(),
            FirstLayer::Lsnn(l) => l.params(),
        };
        if let Some(pn) = &self.param_net {
            v.extend(pn.params());
        }
        v.extend(self.conv2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Relu masks and pooling winners of the last forward pass.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for relu in [&self.relu1, &self.relu2, &self.relu3] {
            out.extend(relu.mask().iter().map(|&b| b as u64));
        }
        for pool in [&self.pool1, &self.pool2] {
            out.extend(pool.argmax().iter().map(|&i| i as u64));
        }
        if let Some(pn) = &self.param_net {
            pn.fingerprint(&mut out);
        }
        out
    }

    pub fn write_checkpoint(&mut self, w: &mut impl Write, task: Option<Task>) -> Result<()> {
        let mut text = format!("{CHECKPOINT_HEADER}\n");
        if let Some(t) = task {
            text += &format!("task={t}\n");
        }
        for (k, v) in self.config.to_pairs() {
            text += &format!("{k}={v}\n");
        }
        let params = self.layer_params_mut();
        text += &format!("tensors {}\n", params.len());
        for (kind, p) in &params {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            text += &format!("tensor {} {} {}\n", p.name, kind, shape.join("x"));
        }
        w.write_all(text.as_bytes())?;
        for (_, p) in params {
            p.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&mut self, task: Option<Task>) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out, task).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&mut self, path: &Path, task: Option<Task>) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(task))?;
        Ok(())
    }

    /// Rebuilds a network from checkpoint bytes; returns it with the
    /// recorded task, if any.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Network, Option<Task>)> {
        let mut r = ByteReader::new(bytes);
        let at = r.offset();
        if r.line()? != CHECKPOINT_HEADER {
            return Err(Error::format(at, "not an LSNN checkpoint"));
        }
        let mut pairs = Vec::new();
        let count = loop {
            let at = r.offset();
            let line = r.line()?;
            if let Some(n) = line.strip_prefix("tensors ") {
                break n.parse::<usize>().map_err(|_| Error::format(at, "bad tensor count"))?;
            }
            pairs.extend(parse_key_values(line).map_err(|e| Error::format(at, e.to_string()))?);
        };
        let task = pairs
            .iter()
            .position(|(k, _)| k == "task")
            .map(|i| pairs.remove(i).1.parse::<Task>())
            .transpose()?;
        let config = NetConfig::from_pairs(&pairs)?;
        let mut net = Network::new(config, &mut Rng::new(0))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let line = r.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            let &["tensor", name, kind, shape] = parts.as_slice() else {
                return Err(Error::format(at, format!("bad manifest line {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::format(at, "bad shape")))
                .collect::<Result<_>>()?;
            entries.push((at, name.to_string(), kind.to_string(), shape));
        }
        let params = net.layer_params_mut();
        if params.len() != count {
            return Err(Error::format(0, format!("checkpoint has {count} tensors, model needs {}", params.len())));
        }
        for ((at, name, kind, shape), (want_kind, p)) in entries.into_iter().zip(params) {
            if name != p.name || kind != want_kind || shape != p.value.shape() {
                return Err(Error::format(at, format!("manifest entry {name} {kind} {shape:?} does not match model")));
            }
            let t = Tensor::read(&mut r)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(r.offset(), format!("tensor {name} has shape {:?}", t.shape())));
            }
            p.value = t;
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        Ok((net, task))
    }

    pub fn load(path: &Path) -> Result<(Network, Option<Task>)> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

/// Builds the network for `(model, task)`, initialized from stream 0 of `seed`.
pub fn init_network(model: ModelKind, task: Task, seed: u64) -> Result<Network> {
    Network::new(NetConfig::for_task(model, task), &mut Rng::new(seed).split(0))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A network with a fixed batch, in eval mode, as a [`Differentiable`]
/// objective for gradient checking.
pub struct NetworkObjective {
    pub net: Network,
    pub images: Tensor,
    pub targets: Vec<usize>,
}

impl Differentiable for NetworkObjective {
    fn param_tensors(&self) -> Vec<(String, usize)> {
        self.net.params().iter().map(|p| (p.name.clone(), p.len())).collect()
    }

    fn param_mut(&mut self, tensor: usize, index: usize) -> &mut f64 {
        &mut self.net.params_mut().swap_remove(tensor).value.data_mut()[index]
    }

    fn loss(&mut self) -> Result<f64> {
        let logits = self.net.forward(&self.images, Mode::Eval, &mut Rng::new(0))?;
        Ok(softmax_xent(&logits, &self.targets)?.0)
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        self.net.zero_grad();
        let logits = self.net.forward(&self.images, Mode::Eval, &mut Rng::new(0))?;
        let (loss, g) = softmax_xent(&logits, &self.targets)?;
        self.net.backward(&g)?;
        let grads = self.net.params().iter().map(|p| p.grad.data().to_vec()).collect();
        Ok((loss, grads))
    }

    fn activation_pattern(&self) -> Vec<u64> {
        self.net.activation_pattern()
    }
}
