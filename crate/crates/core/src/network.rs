//! Declarative layer graphs, parameter accounting, and forward/backward
//! evaluation.
//!
//! A [`NetworkSpec`] is a straight chain of layers where `Add` layers merge in
//! the output of an earlier layer. Parameters live in a [`WeightStore`] on disk
//! and in [`Params`] while a network is being evaluated or trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, ConvGeometry, Scalar, Tensor,
};
use crate::weights::{WeightEntry, WeightStore};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Hidden width shared by both reference architectures.
pub const HIDDEN_CHANNELS: usize = 64;

/// Dilation schedule of the dilated residual network.
pub const DRL_DILATIONS: [usize; 8] = [1, 2, 3, 4, 3, 2, 1, 1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        same_padding: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Adds the output of layer `source` to the running activation.
    Add {
        source: usize,
    },
    /// 2x2 max pooling with stride 2 (feature extractor only).
    MaxPool2,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        LayerSpec::Conv {
            kernel: 3,
            in_channels,
            out_channels,
            dilation,
            same_padding: true,
        }
    }

    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                dilation,
                ..
            } => Some(ConvGeometry {
                in_channels,
                out_channels,
                kernel,
                dilation,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Output = input + last layer.
    pub global_residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub layer: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkSpec {
    /// Checks kernel/dilation/channel/skip compatibility and returns the
    /// channel count after every layer.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let bad = |i: usize, msg: String| Error::Config(format!("{} layer {i}: {msg}", self.name));
        if self.input_channels == 0 {
            return Err(Error::Config(format!("{}: zero input channels", self.name)));
        }
        let mut channels = Vec::with_capacity(self.layers.len());
        // spatial downsampling factor after each layer, for skip checks
        let mut scales = Vec::with_capacity(self.layers.len());
        let (mut c, mut scale) = (self.input_channels, 1usize);
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    dilation,
                    same_padding,
                } => {
                    if kernel % 2 == 0 {
                        return Err(bad(i, format!("kernel {kernel} must be odd")));
                    }
                    if dilation == 0 {
                        return Err(bad(i, "dilation must be at least 1".into()));
                    }
                    if !same_padding {
                        return Err(bad(i, "only same-padded convolutions are supported".into()));
                    }
                    if in_channels != c {
                        return Err(bad(i, format!("expects {in_channels} channels, receives {c}")));
                    }
                    if out_channels == 0 {
                        return Err(bad(i, "zero output channels".into()));
                    }
                    c = out_channels;
                }
                LayerSpec::BatchNorm { channels: bc } => {
                    if bc != c {
                        return Err(bad(i, format!("normalizes {bc} channels, receives {c}")));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::Add { source } => {
                    if source >= i {
                        return Err(bad(i, format!("skip source {source} does not precede it")));
                    }
                    if channels[source] != c || scales[source] != scale {
                        return Err(bad(i, format!("skip source {source} shape differs")));
                    }
                }
                LayerSpec::MaxPool2 => scale *= 2,
            }
            channels.push(c);
            scales.push(scale);
        }
        if self.global_residual && (c != self.input_channels || scale != 1) {
            return Err(Error::Config(format!(
                "{}: global residual needs output shape equal to input",
                self.name
            )));
        }
        Ok(channels)
    }

    /// Validation for networks that map images to single-channel images.
    pub fn validate_image_network(&self) -> Result<()> {
        let channels = self.validate()?;
        if channels.last() != Some(&1) {
            return Err(Error::Config(format!(
                "{}: final output must have 1 channel",
                self.name
            )));
        }
        if self.layers.iter().any(|l| matches!(l, LayerSpec::MaxPool2)) {
            return Err(Error::Config(format!("{}: image networks cannot pool", self.name)));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Side length of the receptive field of one output pixel.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1usize, 1usize);
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { kernel, dilation, .. } => rf += (kernel - 1) * dilation * jump,
                LayerSpec::MaxPool2 => {
                    rf += jump;
                    jump *= 2;
                }
                _ => {}
            }
        }
        rf
    }

    /// Parameter slots in storage order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    slots.push(ParamSlot {
                        name: format!("layer{i:02}.conv.kernel"),
                        shape: vec![out_channels, in_channels, kernel, kernel],
                        trainable: true,
                        layer: i,
                    });
                    slots.push(ParamSlot {
                        name: format!("layer{i:02}.conv.bias"),
                        shape: vec![out_channels],
                        trainable: true,
                        layer: i,
                    });
                }
                LayerSpec::BatchNorm { channels } => {
                    for (suffix, trainable) in [
                        ("gamma", true),
                        ("beta", true),
                        ("moving_mean", false),
                        ("moving_var", false),
                    ] {
                        slots.push(ParamSlot {
                            name: format!("layer{i:02}.bn.{suffix}"),
                            shape: vec![channels],
                            trainable,
                            layer: i,
                        });
                    }
                }
                _ => {}
            }
        }
        slots
    }

    /// Glorot-uniform kernels, zero biases, identity batch norm.
    pub fn init_weights(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .param_slots()
            .into_iter()
            .map(|slot| {
                let n = slot.len();
                let data = if slot.name.ends_with("conv.kernel") {
                    let rf = slot.shape[2] * slot.shape[3];
                    let fan_in = slot.shape[1] * rf;
                    let fan_out = slot.shape[0] * rf;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect()
                } else if slot.name.ends_with("gamma") || slot.name.ends_with("moving_var") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                WeightEntry {
                    name: slot.name,
                    shape: slot.shape,
                    data,
                }
            })
            .collect();
        WeightStore::new(entries).expect("slot names are unique")
    }
}

pub fn param_count(spec: &NetworkSpec) -> ParamCount {
    let (mut trainable, mut non_trainable) = (0, 0);
    for slot in spec.param_slots() {
        if slot.trainable {
            trainable += slot.len();
        } else {
            non_trainable += slot.len();
        }
    }
    ParamCount {
        trainable,
        non_trainable,
        total: trainable + non_trainable,
    }
}

fn check_input_channels(input_channels: usize) {
    assert!(
        matches!(input_channels, 1 | 2),
        "reference networks take 1 or 2 input channels, got {input_channels}"
    );
}

fn conv_bn_relu(layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, dilation: usize) {
    layers.push(LayerSpec::conv(cin, cout, dilation));
    layers.push(LayerSpec::BatchNorm { channels: cout });
    layers.push(LayerSpec::Relu);
}

/// Ten Conv+BN+ReLU blocks of width 64 followed by a 1-channel output conv.
pub fn build_cnn10(input_channels: usize) -> NetworkSpec {
    check_input_channels(input_channels);
    let mut layers = Vec::new();
    let mut cin = input_channels;
    for _ in 0..10 {
        conv_bn_relu(&mut layers, cin, HIDDEN_CHANNELS, 1);
        cin = HIDDEN_CHANNELS;
    }
    layers.push(LayerSpec::conv(HIDDEN_CHANNELS, 1, 1));
    NetworkSpec {
        name: "cnn10".into(),
        input_channels,
        layers,
        global_residual: false,
    }
}

/// Dilated residual network: seven dilated Conv+BN+ReLU stages with symmetric
/// additive skips (1-7, 2-6, 3-5) and a 1-channel output conv.
pub fn build_drl(input_channels: usize) -> NetworkSpec {
    check_input_channels(input_channels);
    let mut layers = Vec::new();
    // index of the ReLU closing each stage, 1-based stage numbers
    let mut stage_out = [0usize; 8];
    let mut cin = input_channels;
    for (stage, &dilation) in DRL_DILATIONS[..7].iter().enumerate() {
        let stage = stage + 1;
        conv_bn_relu(&mut layers, cin, HIDDEN_CHANNELS, dilation);
        cin = HIDDEN_CHANNELS;
        let partner = 8 - stage;
        if stage > 4 && partner < stage {
            layers.push(LayerSpec::Add {
                source: stage_out[partner],
            });
        }
        stage_out[stage] = layers.len() - 1;
    }
    layers.push(LayerSpec::conv(HIDDEN_CHANNELS, 1, DRL_DILATIONS[7]));
    NetworkSpec {
        name: "drl".into(),
        input_channels,
        layers,
        global_residual: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Moving statistics.
    Inference,
    /// Batch statistics.
    Training,
}

/// Parameters in evaluation precision, one flat buffer per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub slots: Vec<ParamSlot>,
    pub values: Vec<Vec<T>>,
    /// Slot index of the first parameter of each layer.
    layer_offset: Vec<Option<usize>>,
}

impl<T: Scalar> Params<T> {
    /// Matches `store` against the network's parameter slots, naming the first mismatch.
    pub fn from_store(spec: &NetworkSpec, store: &WeightStore) -> Result<Self> {
        spec.validate()?;
        let slots = spec.param_slots();
        if store.entries().len() != slots.len() {
            let first = slots
                .iter()
                .zip(store.entries())
                .find(|(s, e)| s.name != e.name || s.shape != e.shape)
                .map(|(s, _)| s.name.clone())
                .or_else(|| slots.get(store.entries().len()).map(|s| s.name.clone()))
                .or_else(|| store.entries().get(slots.len()).map(|e| e.name.clone()))
                .unwrap_or_default();
            return Err(Error::WeightMismatch(format!(
                "{} expects {} entries, store has {} (first mismatch: {first})",
                spec.name,
                slots.len(),
                store.entries().len()
            )));
        }
        for (slot, entry) in slots.iter().zip(store.entries()) {
            if slot.name != entry.name || slot.shape != entry.shape {
                return Err(Error::WeightMismatch(format!(
                    "{}: expected {} {:?}, found {} {:?}",
                    spec.name, slot.name, slot.shape, entry.name, entry.shape
                )));
            }
        }
        let values = store
            .entries()
            .iter()
            .map(|e| e.data.iter().map(|&v| T::from_f32(v)).collect())
            .collect();
        Ok(Self::assemble(spec, slots, values))
    }

    fn assemble(spec: &NetworkSpec, slots: Vec<ParamSlot>, values: Vec<Vec<T>>) -> Self {
        let mut layer_offset = vec![None; spec.layers.len()];
        for (i, slot) in slots.iter().enumerate() {
            if layer_offset[slot.layer].is_none() {
                layer_offset[slot.layer] = Some(i);
            }
        }
        Params {
            slots,
            values,
            layer_offset,
        }
    }

    pub fn to_store(&self) -> WeightStore {
        let entries = self
            .slots
            .iter()
            .zip(&self.values)
            .map(|(slot, v)| WeightEntry {
                name: slot.name.clone(),
                shape: slot.shape.clone(),
                data: v.iter().map(|x| x.as_f32()).collect(),
            })
            .collect();
        WeightStore::new(entries).expect("slot names are unique")
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.len()]).collect()
    }

    fn layer(&self, layer: usize) -> usize {
        self.layer_offset[layer].expect("layer has parameters")
    }
}

/// Per-channel statistics of one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Cache {
    None,
    Bn { mean: Vec<f64>, inv_std: Vec<f64> },
    Pool(Vec<u32>),
}

/// Everything backward needs from a forward pass.
pub struct Trace<T> {
    input: Tensor<T>,
    activations: Vec<Tensor<T>>,
    caches: Vec<Cache>,
    mode: BnMode,
    pub batch_stats: Vec<BatchStats>,
}

impl<T: Scalar> Trace<T> {
    pub fn activation(&self, layer: usize) -> &Tensor<T> {
        &self.activations[layer]
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

pub struct Gradients<T> {
    /// One buffer per slot; non-trainable slots stay zero.
    pub params: Option<Vec<Vec<T>>>,
    pub input: Tensor<T>,
}

/// A spec bound to parameters.
pub struct Network<'a, T> {
    pub spec: &'a NetworkSpec,
    pub params: &'a Params<T>,
}

impl<'a, T: Scalar> Network<'a, T> {
    pub fn new(spec: &'a NetworkSpec, params: &'a Params<T>) -> Self {
        Network { spec, params }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "{} takes {} channels, input has {}",
                self.spec.name,
                self.spec.input_channels,
                input.channels()
            )));
        }
        if input.batch() == 0 || input.height() == 0 || input.width() == 0 {
            return Err(Error::Shape(format!("empty input {:?}", input.shape())));
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        i: usize,
        x: &Tensor<T>,
        acts: &[Option<Tensor<T>>],
        mode: BnMode,
    ) -> (Tensor<T>, Cache, Option<BatchStats>) {
        let p = &self.params.values;
        match self.spec.layers[i] {
            ref conv @ LayerSpec::Conv { .. } => {
                let g = conv.geometry().unwrap();
                let o = self.params.layer(i);
                (conv2d_forward(x, &p[o], &p[o + 1], &g), Cache::None, None)
            }
            LayerSpec::BatchNorm { channels } => {
                let o = self.params.layer(i);
                let (gamma, beta) = (&p[o], &p[o + 1]);
                let (mean, var) = match mode {
                    BnMode::Training => channel_moments(x),
                    BnMode::Inference => (
                        p[o + 2].iter().map(|v| v.as_f64()).collect(),
                        p[o + 3].iter().map(|v| v.as_f64()).collect(),
                    ),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                let mut out = x.clone();
                let plane = x.plane();
                for n in 0..x.batch() {
                    let s = out.sample_mut(n);
                    for c in 0..channels {
                        let scale = T::from_f64(gamma[c].as_f64() * inv_std[c]);
                        let shift = T::from_f64(beta[c].as_f64() - mean[c] * gamma[c].as_f64() * inv_std[c]);
                        for v in &mut s[c * plane..(c + 1) * plane] {
                            *v = *v * scale + shift;
                        }
                    }
                }
                let stats = (mode == BnMode::Training).then(|| BatchStats {
                    layer: i,
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (out, Cache::Bn { mean, inv_std }, stats)
            }
            LayerSpec::Relu => (x.map(|v| v.max(T::zero())), Cache::None, None),
            LayerSpec::Add { source } => {
                let mut out = x.clone();
                out.add_assign(acts[source].as_ref().expect("skip source kept alive"));
                (out, Cache::None, None)
            }
            LayerSpec::MaxPool2 => {
                let (out, arg) = maxpool2_forward(x);
                (out, Cache::Pool(arg), None)
            }
        }
    }

    /// Inference forward pass; intermediate activations are released as soon
    /// as no later layer needs them.
    pub fn forward(&self, input: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.forward_collect(input, mode, &[])?.0)
    }

    /// Like [`Network::forward`], additionally returning copies of the
    /// outputs of the `keep` layers.
    pub fn forward_collect(
        &self,
        input: &Tensor<T>,
        mode: BnMode,
        keep: &[usize],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut last_use: Vec<usize> = (0..n).map(|i| i + 1).collect();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::Add { source } = *layer {
                last_use[source] = last_use[source].max(i);
            }
        }
        let mut kept = vec![None; keep.len()];
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
        for i in 0..n {
            let out = {
                let x = if i == 0 { input } else { acts[i - 1].as_ref().unwrap() };
                self.layer_forward(i, x, &acts, mode).0
            };
            for (slot, _) in kept.iter_mut().zip(keep).filter(|(_, &k)| k == i) {
                *slot = Some(out.clone());
            }
            acts[i] = Some(out);
            for (j, slot) in acts.iter_mut().enumerate().take(i) {
                if last_use[j] <= i {
                    *slot = None;
                }
            }
        }
        let mut out = acts.pop().flatten().unwrap_or_else(|| input.clone());
        if self.spec.global_residual {
            out.add_assign(input);
        }
        let kept = kept
            .into_iter()
            .zip(keep)
            .map(|(t, k)| t.ok_or_else(|| Error::Config(format!("no layer {k} to keep"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, kept))
    }

    /// Forward pass that keeps every activation for [`Network::backward`].
    pub fn forward_traced(&self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut batch_stats = Vec::new();
        for i in 0..n {
            let x = if i == 0 { input } else { acts[i - 1].as_ref().unwrap() };
            let (out, cache, stats) = self.layer_forward(i, x, &acts, mode);
            acts.push(Some(out));
            caches.push(cache);
            batch_stats.extend(stats);
        }
        let activations: Vec<Tensor<T>> = acts.into_iter().map(Option::unwrap).collect();
        let mut out = activations.last().cloned().unwrap_or_else(|| input.clone());
        if self.spec.global_residual {
            out.add_assign(input);
        }
        Ok((
            out,
            Trace {
                input: input.clone(),
                activations,
                caches,
                mode,
                batch_stats,
            },
        ))
    }

    /// Back-propagates gradients seeded at the network output (`output_grad`)
    /// and/or at arbitrary layer outputs (`taps`).
    pub fn backward(
        &self,
        trace: Trace<T>,
        output_grad: Option<&Tensor<T>>,
        taps: Vec<(usize, Tensor<T>)>,
        want_param_grads: bool,
    ) -> Gradients<T> {
        let n = self.spec.layers.len();
        let p = &self.params.values;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut input_grad: Tensor<T> = Tensor::zeros(trace.input.shape());
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        };
        if let Some(g) = output_grad {
            if self.spec.global_residual {
                input_grad.add_assign(g);
            }
            if n == 0 {
                input_grad.add_assign(g);
            } else {
                accumulate(&mut grads[n - 1], g.clone());
            }
        }
        for (layer, g) in taps {
            accumulate(&mut grads[layer], g);
        }
        let mut param_grads = want_param_grads.then(|| self.params.zeros_like());
        let Trace {
            input,
            mut activations,
            caches,
            mode,
            ..
        } = trace;

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                activations.pop();
                continue;
            };
            let out_act = activations.pop().unwrap();
            let x = if i == 0 { &input } else { &activations[i - 1] };
            let gin = match (&self.spec.layers[i], &caches[i]) {
                (conv @ LayerSpec::Conv { .. }, _) => {
                    let g = conv.geometry().unwrap();
                    let o = self.params.layer(i);
                    let pg = param_grads.as_mut().map(|pg| {
                        let (head, tail) = pg.split_at_mut(o + 1);
                        (head[o].as_mut_slice(), tail[0].as_mut_slice())
                    });
                    conv2d_backward(x, &gout, &p[o], &g, pg, true).unwrap()
                }
                (LayerSpec::BatchNorm { channels }, Cache::Bn { mean, inv_std }) => {
                    let o = self.params.layer(i);
                    let gamma = &p[o];
                    let plane = x.plane();
                    let count = (x.batch() * plane) as f64;
                    let mut gin = Tensor::zeros(x.shape());
                    for c in 0..*channels {
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                        for s in 0..x.batch() {
                            let xs = &x.sample(s)[c * plane..(c + 1) * plane];
                            let gs = &gout.sample(s)[c * plane..(c + 1) * plane];
                            for (&xv, &gv) in xs.iter().zip(gs) {
                                let xhat = (xv.as_f64() - mean[c]) * inv_std[c];
                                sum_dy += gv.as_f64();
                                sum_dy_xhat += gv.as_f64() * xhat;
                            }
                        }
                        if let Some(pg) = param_grads.as_mut() {
                            pg[o][c] = pg[o][c] + T::from_f64(sum_dy_xhat);
                            pg[o + 1][c] = pg[o + 1][c] + T::from_f64(sum_dy);
                        }
                        let scale = gamma[c].as_f64() * inv_std[c];
                        for s in 0..x.batch() {
                            let xs = &x.sample(s)[c * plane..(c + 1) * plane];
                            let gs = &gout.sample(s)[c * plane..(c + 1) * plane];
                            let dst = &mut gin.sample_mut(s)[c * plane..(c + 1) * plane];
                            for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                                *d = T::from_f64(match mode {
                                    BnMode::Inference => scale * gv.as_f64(),
                                    BnMode::Training => {
                                        let xhat = (xv.as_f64() - mean[c]) * inv_std[c];
                                        scale / count * (count * gv.as_f64() - sum_dy - xhat * sum_dy_xhat)
                                    }
                                });
                            }
                        }
                    }
                    gin
                }
                (LayerSpec::Relu, _) => {
                    let mut gin = gout;
                    for (g, &a) in gin.data_mut().iter_mut().zip(out_act.data()) {
                        if a <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    gin
                }
                (LayerSpec::Add { source }, _) => {
                    accumulate(&mut grads[*source], gout.clone());
                    gout
                }
                (LayerSpec::MaxPool2, Cache::Pool(arg)) => maxpool2_backward(x.shape(), &gout, arg),
                _ => unreachable!("cache kind matches layer kind"),
            };
            if i == 0 {
                input_grad.add_assign(&gin);
            } else {
                accumulate(&mut grads[i - 1], gin);
            }
        }
        Gradients {
            params: param_grads,
            input: input_grad,
        }
    }
}

fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let plane = x.plane();
    let count = (x.batch() * plane) as f64;
    let mut mean = vec![0.0; x.channels()];
    let mut var = vec![0.0; x.channels()];
    for c in 0..x.channels() {
        let mut sum = 0.0;
        for n in 0..x.batch() {
            sum += x.sample(n)[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..x.batch() {
            sq += x.sample(n)[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Folds training-mode batch statistics into the moving averages.
pub fn update_moving_stats(params: &mut Params<f32>, stats: &[BatchStats], momentum: f64) {
    for s in stats {
        let o = params.layer(s.layer);
        for c in 0..s.mean.len() {
            let mm = &mut params.values[o + 2][c];
            *mm = (momentum * f64::from(*mm) + (1.0 - momentum) * s.mean[c]) as f32;
            let mv = &mut params.values[o + 3][c];
            *mv = (momentum * f64::from(*mv) + (1.0 - momentum) * s.var[c]) as f32;
        }
    }
}

/// Overwrites moving statistics with the given per-layer values.
pub fn set_moving_stats(params: &mut Params<f32>, stats: &[BatchStats]) {
    for s in stats {
        let o = params.layer(s.layer);
        params.values[o + 2] = s.mean.iter().map(|&v| v as f32).collect();
        params.values[o + 3] = s.var.iter().map(|&v| v as f32).collect();
    }
}

/// Single-channel image batch as a tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&crate::image::ImageSlice]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().map(|&v| T::from_f32(v)));
    }
    Ok(Tensor::from_vec([images.len(), 1, h, w], data))
}
