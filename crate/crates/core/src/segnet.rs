//! Shared-encoder / multi-decoder U-Net. Every decoder sees the same encoder
//! features and differs from the others only in how it up-samples.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

use crate::autodiff::{Graph, UpsampleMode, Var};
use crate::autodiff::kernels::channel_moments;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
/// PCG32 stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0x6d6f_6465_6c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    Transposed,
    Bilinear,
    Nearest,
}

impl DecoderMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            DecoderMode::Transposed => 0,
            DecoderMode::Bilinear => 1,
            DecoderMode::Nearest => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DecoderMode::Transposed),
            1 => Some(DecoderMode::Bilinear),
            2 => Some(DecoderMode::Nearest),
            _ => None,
        }
    }

    /// Mode of decoder `i` in the default layout: transposed, bilinear,
    /// nearest, then transposed copies with fresh parameters.
    pub fn default_for(i: usize) -> Self {
        match i {
            1 => DecoderMode::Bilinear,
            2 => DecoderMode::Nearest,
            _ => DecoderMode::Transposed,
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::Transposed => "transposed",
            DecoderMode::Bilinear => "bilinear",
            DecoderMode::Nearest => "nearest",
        })
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transposed" => Ok(DecoderMode::Transposed),
            "bilinear" => Ok(DecoderMode::Bilinear),
            "nearest" => Ok(DecoderMode::Nearest),
            _ => Err(Error::Config(format!(
                "unknown decoder mode '{s}' (transposed|bilinear|nearest)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_decoders: usize,
    pub decoder_modes: Vec<DecoderMode>,
    pub in_channels: usize,
    /// 1 means a binary head with a sigmoid; otherwise a channel softmax.
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub norm_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_decoders(3)
    }
}

impl ModelConfig {
    pub fn with_decoders(n: usize) -> Self {
        Self {
            n_decoders: n,
            decoder_modes: (0..n).map(DecoderMode::default_for).collect(),
            in_channels: 1,
            num_classes: 1,
            base_width: 16,
            depth: 3,
            norm_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_modes.is_empty() || self.n_decoders == 0 {
            return Err(Error::Config("at least one decoder mode is required".into()));
        }
        if self.decoder_modes.len() != self.n_decoders {
            return Err(Error::Config(format!(
                "n_decoders = {} but {} decoder modes given",
                self.n_decoders,
                self.decoder_modes.len()
            )));
        }
        if self.depth < 1 || self.base_width < 1 || self.in_channels < 1 || self.num_classes < 1 {
            return Err(Error::Config(
                "depth, base_width, in_channels and num_classes must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter '{name}'")))?;
        if self.entries[idx].value.shape() != value.shape() {
            return Err(Error::Data(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                self.entries[idx].value.shape(),
                value.shape()
            )));
        }
        self.entries[idx].value = value;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    convs: [ConvLayer; 2],
    norms: Option<[NormLayer; 2]>,
}

#[derive(Clone, Debug)]
enum UpLayer {
    Transposed { kernel: usize, bias: usize },
    Interp { mode: UpsampleMode, conv: ConvLayer },
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: UpLayer,
    block: ConvBlock,
}

#[derive(Clone, Debug)]
struct Decoder {
    mode: DecoderMode,
    /// Ordered from the coarsest stage to full resolution.
    stages: Vec<DecoderStage>,
    head: ConvLayer,
    params: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<ConvBlock>,
    params: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; parameters require grad.
    Train,
    /// Running statistics; parameters are constants.
    Eval,
}

/// Result of one forward pass through the graph.
pub struct ForwardPass {
    /// One probability map per requested decoder.
    pub outputs: Vec<Var>,
    pub logits: Vec<Var>,
    /// Graph variable bound to each parameter index, if it was used.
    pub bound: Vec<Option<Var>>,
    norm_updates: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    decoders: Vec<Decoder>,
    encoder_passes: AtomicU64,
}

impl<T: Element> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            encoder_passes: AtomicU64::new(self.encoder_passes.load(Ordering::Relaxed)),
        }
    }
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut Pcg32,
    norm: bool,
    owned: Vec<usize>,
}

impl<T: Element> Builder<'_, T> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::of(z * std)
            })
            .collect();
        let idx = self.store.push(name, Tensor::new(shape, data).expect("shape"), true);
        self.owned.push(idx);
        idx
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64, trainable: bool) -> usize {
        let idx = self.store.push(name, Tensor::full(shape, T::of(v)), trainable);
        self.owned.push(idx);
        idx
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvLayer {
        let weight = self.kaiming(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k);
        let bias = self.constant(format!("{prefix}.bias"), &[cout], 0.0, true);
        ConvLayer {
            weight,
            bias,
            padding: k / 2,
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormLayer {
        NormLayer {
            gamma: self.constant(format!("{prefix}.gamma"), &[c], 1.0, true),
            beta: self.constant(format!("{prefix}.beta"), &[c], 0.0, true),
            running_mean: self.constant(format!("{prefix}.running_mean"), &[c], 0.0, false),
            running_var: self.constant(format!("{prefix}.running_var"), &[c], 1.0, false),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvBlock {
        let c1 = self.conv(&format!("{prefix}.conv1"), cin, cout, 3);
        let n1 = self.norm.then(|| self.norm(&format!("{prefix}.norm1"), cout));
        let c2 = self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        let n2 = self.norm.then(|| self.norm(&format!("{prefix}.norm2"), cout));
        ConvBlock {
            convs: [c1, c2],
            norms: n1.zip(n2).map(|(a, b)| [a, b]),
        }
    }

    fn take_owned(&mut self) -> Vec<usize> {
        std::mem::take(&mut self.owned)
    }
}

impl<T: Element> Model<T> {
    /// Build a model with Kaiming fan-in normal weights and zero biases drawn
    /// from PCG32 (state `seed`, stream [`INIT_STREAM`]).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::new(seed, INIT_STREAM);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
            norm: config.norm_enabled,
            owned: Vec::new(),
        };
        let w = config.base_width;
        let width = |s: usize| w << s;

        let mut blocks = Vec::with_capacity(config.depth + 1);
        blocks.push(b.block("enc.0", config.in_channels, width(0)));
        for s in 1..=config.depth {
            blocks.push(b.block(&format!("enc.{s}"), width(s - 1), width(s)));
        }
        let encoder = Encoder {
            blocks,
            params: b.take_owned(),
        };

        let mut decoders = Vec::with_capacity(config.n_decoders);
        for (i, &mode) in config.decoder_modes.iter().enumerate() {
            let mut stages = Vec::with_capacity(config.depth);
            for s in (1..=config.depth).rev() {
                let (cin, cout) = (width(s), width(s - 1));
                let prefix = format!("dec{i}.stage{s}");
                let up = match mode {
                    DecoderMode::Transposed => UpLayer::Transposed {
                        kernel: b.kaiming(format!("{prefix}.up.weight"), &[cin, cout, 2, 2], cin),
                        bias: b.constant(format!("{prefix}.up.bias"), &[cout], 0.0, true),
                    },
                    DecoderMode::Bilinear | DecoderMode::Nearest => UpLayer::Interp {
                        mode: if mode == DecoderMode::Bilinear {
                            UpsampleMode::Bilinear
                        } else {
                            UpsampleMode::Nearest
                        },
                        conv: b.conv(&format!("{prefix}.up"), cin, cout, 1),
                    },
                };
                let block = b.block(&prefix, 2 * cout, cout);
                stages.push(DecoderStage { up, block });
            }
            let head = b.conv(&format!("dec{i}.head"), width(0), config.num_classes, 1);
            decoders.push(Decoder {
                mode,
                stages,
                head,
                params: b.take_owned(),
            });
        }
        let params = b.store;
        Ok(Self {
            config,
            params,
            encoder,
            decoders,
            encoder_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn n_decoders(&self) -> usize {
        self.decoders.len()
    }

    pub fn decoder_mode(&self, i: usize) -> DecoderMode {
        self.decoders[i].mode
    }

    /// Parameter indices owned by the shared encoder.
    pub fn encoder_param_indices(&self) -> &[usize] {
        &self.encoder.params
    }

    pub fn decoder_param_indices(&self, i: usize) -> &[usize] {
        &self.decoders[i].params
    }

    fn count(&self, idx: &[usize]) -> usize {
        idx.iter()
            .filter(|&&i| self.params.entries[i].trainable)
            .map(|&i| self.params.entries[i].value.len())
            .sum()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.count(&self.encoder.params)
            + (0..self.decoders.len())
                .map(|i| self.count(&self.decoders[i].params))
                .sum::<usize>()
    }

    /// How many times the encoder has been evaluated.
    pub fn encoder_passes(&self) -> u64 {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    pub fn sub_model(&self, decoder: usize) -> Result<SubModel<'_, T>> {
        if decoder >= self.decoders.len() {
            return Err(Error::Config(format!(
                "decoder {decoder} out of range ({} decoders)",
                self.decoders.len()
            )));
        }
        Ok(SubModel { model: self, decoder })
    }

    pub fn sub_models(&self) -> Vec<SubModel<'_, T>> {
        (0..self.decoders.len())
            .map(|decoder| SubModel { model: self, decoder })
            .collect()
    }

    /// Check the input shape against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Input(format!("expected NCHW input, got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::Input(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
            return Err(Error::Input(format!(
                "spatial size {h}x{w} must be a non-zero multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Run the shared encoder once and then the selected decoders.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, decoders: &[usize], mode: Mode) -> Result<ForwardPass> {
        self.check_input(g.value(x).shape())?;
        let mut ctx = Ctx {
            store: &self.params,
            mode,
            bound: vec![None; self.params.len()],
            norm_updates: Vec::new(),
        };
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut skips = Vec::with_capacity(self.config.depth + 1);
        let mut h = ctx.block(g, &self.encoder.blocks[0], x)?;
        for block in &self.encoder.blocks[1..] {
            skips.push(h);
            let pooled = g.max_pool2(h)?;
            h = ctx.block(g, block, pooled)?;
        }
        let bottom = h;
        let mut outputs = Vec::with_capacity(decoders.len());
        let mut logits = Vec::with_capacity(decoders.len());
        for &d in decoders {
            let dec = self
                .decoders
                .get(d)
                .ok_or_else(|| Error::Config(format!("decoder {d} out of range")))?;
            let mut h = bottom;
            for (stage, skip) in dec.stages.iter().zip(skips.iter().rev()) {
                let up = ctx.up(g, &stage.up, h)?;
                let cat = g.concat_channels(up, *skip)?;
                h = ctx.block(g, &stage.block, cat)?;
            }
            let z = ctx.conv(g, &dec.head, h)?;
            let p = if self.config.num_classes == 1 {
                g.sigmoid(z)?
            } else {
                g.softmax(z)?
            };
            logits.push(z);
            outputs.push(p);
        }
        Ok(ForwardPass {
            outputs,
            logits,
            bound: ctx.bound,
            norm_updates: ctx.norm_updates,
        })
    }

    /// Fold the batch statistics observed in a training pass into the running
    /// estimates (`running = momentum * running + (1 - momentum) * batch`).
    pub fn commit_norm_stats(&mut self, pass: &ForwardPass) {
        for (mi, vi, mean, var) in &pass.norm_updates {
            for (idx, batch) in [(*mi, mean), (*vi, var)] {
                let running = self.params.entries[idx].value.data_mut();
                for (r, &b) in running.iter_mut().zip(batch) {
                    *r = T::of(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
                }
            }
        }
    }

    /// Eval-mode probabilities of every decoder for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let all: Vec<usize> = (0..self.decoders.len()).collect();
        let pass = self.forward_graph(&mut g, xv, &all, Mode::Eval)?;
        Ok(pass.outputs.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Copy every parameter of decoder `src` into decoder `dst`. Both must use
    /// the same up-sampling family.
    pub fn copy_decoder(&mut self, src: usize, dst: usize) -> Result<()> {
        let a = self.decoders[src].params.clone();
        let b = self.decoders[dst].params.clone();
        if a.len() != b.len() {
            return Err(Error::Config("decoders have different layouts".into()));
        }
        for (i, j) in a.into_iter().zip(b) {
            if self.params.entries[i].value.shape() != self.params.entries[j].value.shape() {
                return Err(Error::Config("decoders have different layouts".into()));
            }
            self.params.entries[j].value = self.params.entries[i].value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                entries: self
                    .params
                    .entries
                    .iter()
                    .map(|e| ParamEntry {
                        name: e.name.clone(),
                        value: e.value.cast(),
                        trainable: e.trainable,
                    })
                    .collect(),
            },
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            encoder_passes: AtomicU64::new(0),
        }
    }
}

struct Ctx<'a, T> {
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: Vec<Option<Var>>,
    norm_updates: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl<T: Element> Ctx<'_, T> {
    fn bind(&mut self, g: &mut Graph<T>, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let value = self.store.get(idx).clone();
        let v = match self.mode {
            Mode::Train => g.param(value),
            Mode::Eval => g.constant(value),
        };
        self.bound[idx] = Some(v);
        v
    }

    fn conv(&mut self, g: &mut Graph<T>, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.bind(g, layer.weight);
        let b = self.bind(g, layer.bias);
        g.conv2d(x, w, Some(b), 1, layer.padding)
    }

    fn norm(&mut self, g: &mut Graph<T>, layer: &NormLayer, x: Var) -> Result<Var> {
        let gamma = self.bind(g, layer.gamma);
        let beta = self.bind(g, layer.beta);
        match self.mode {
            Mode::Train => {
                let (b, c, h, w) = g.value(x).dims4()?;
                let (mean, var) = channel_moments(g.value(x).data(), b, c, h * w);
                let n = (b * h * w) as f64;
                let unbiased: Vec<f64> = if n > 1.0 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var
                };
                self.norm_updates
                    .push((layer.running_mean, layer.running_var, mean, unbiased));
                g.batch_norm(x, gamma, beta, BN_EPS)
            }
            Mode::Eval => {
                let mean = self.store.get(layer.running_mean).data().iter().map(|v| v.as_f64()).collect();
                let var = self.store.get(layer.running_var).data().iter().map(|v| v.as_f64()).collect();
                g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    fn block(&mut self, g: &mut Graph<T>, block: &ConvBlock, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..2 {
            h = self.conv(g, &block.convs[k], h)?;
            if let Some(norms) = &block.norms {
                h = self.norm(g, &norms[k], h)?;
            }
            h = g.relu(h)?;
        }
        Ok(h)
    }

    fn up(&mut self, g: &mut Graph<T>, layer: &UpLayer, x: Var) -> Result<Var> {
        match layer {
            UpLayer::Transposed { kernel, bias } => {
                let k = self.bind(g, *kernel);
                let b = self.bind(g, *bias);
                let y = g.conv_transpose2d(x, k, 2)?;
                g.bias_add(y, b)
            }
            UpLayer::Interp { mode, conv } => {
                let y = g.upsample(x, 2, *mode)?;
                self.conv(g, conv, y)
            }
        }
    }
}

/// The shared encoder composed with a single decoder.
#[derive(Clone, Copy)]
pub struct SubModel<'a, T> {
    model: &'a Model<T>,
    decoder: usize,
}

impl<'a, T: Element> SubModel<'a, T> {
    pub fn model(&self) -> &'a Model<T> {
        self.model
    }

    pub fn decoder_index(&self) -> usize {
        self.decoder
    }

    pub fn mode(&self) -> DecoderMode {
        self.model.decoders[self.decoder].mode
    }

    pub fn param_count(&self) -> usize {
        self.model.count(&self.model.encoder.params) + self.model.count(&self.model.decoders[self.decoder].params)
    }

    /// Eval-mode pre-activation scores.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = self.model.forward_graph(&mut g, xv, &[self.decoder], Mode::Eval)?;
        Ok(g.value(pass.logits[0]).clone())
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = self.model.forward_graph(&mut g, xv, &[self.decoder], Mode::Eval)?;
        Ok(g.value(pass.outputs[0]).clone())
    }

    /// Map scores to probabilities with the same head activation the model
    /// uses.
    pub fn activate(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let p = if self.model.config.num_classes == 1 {
            g.sigmoid(z)?
        } else {
            g.softmax(z)?
        };
        Ok(g.value(p).clone())
    }
}

/// The sub-model used at test time: shared encoder plus the first decoder.
pub fn select_inference_head<T: Element>(model: &Model<T>) -> SubModel<'_, T> {
    SubModel { model, decoder: 0 }
}
