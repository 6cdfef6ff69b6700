//! Training objectives: pixel MSE, VGG-16 feature (perceptual) distance, and
//! their weighted sum.
//!
//! All losses take `[n, 1, h, w]` batches and return the scalar value together
//! with its gradient with respect to the prediction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BnMode, LayerSpec, Network, NetworkSpec, Params};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{load_weights, WeightStore};

pub const VGG_WEIGHTS_ENV: &str = "CASCADE_CT_VGG_WEIGHTS";
pub const DEFAULT_VGG_WEIGHTS: &str = "vgg16_conv.ctw1";

/// Per-channel means subtracted after scaling to `[0, 255]`.
pub const VGG_CHANNEL_MEANS: [f64; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Perceptual,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseReduction {
    /// Squared error averaged over every pixel of the batch.
    PerPixelMean,
    /// Squared Frobenius norm per image, averaged over the batch.
    Eq2Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the per-pixel MSE term in [`LossKind::Combined`].
    #[serde(default = "default_lambda")]
    pub lambda_mse: f64,
    #[serde(default = "default_reduction")]
    pub reduction: MseReduction,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_reduction() -> MseReduction {
    MseReduction::PerPixelMean
}

impl LossConfig {
    pub fn mse() -> Self {
        LossConfig {
            kind: LossKind::Mse,
            lambda_mse: default_lambda(),
            reduction: MseReduction::PerPixelMean,
        }
    }

    pub fn perceptual() -> Self {
        LossConfig {
            kind: LossKind::Perceptual,
            ..Self::mse()
        }
    }

    pub fn combined(lambda_mse: f64) -> Self {
        LossConfig {
            kind: LossKind::Combined,
            lambda_mse,
            ..Self::mse()
        }
    }

    pub fn needs_extractor(&self) -> bool {
        self.kind != LossKind::Mse
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0) {
            return Err(Error::Config(format!("lambda_mse {} must be >= 0", self.lambda_mse)));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.batch() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn mse_normalizer<T: Scalar>(pred: &Tensor<T>, reduction: MseReduction) -> f64 {
    match reduction {
        MseReduction::Eq2Literal => pred.batch() as f64,
        MseReduction::PerPixelMean => pred.data().len() as f64,
    }
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, reduction: MseReduction) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / mse_normalizer(pred, reduction))
}

pub fn mse_loss_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: MseReduction,
) -> Result<(f64, Tensor<T>)> {
    let value = mse_loss(pred, target, reduction)?;
    let scale = 2.0 / mse_normalizer(pred, reduction);
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| T::from_f64(scale * (a.as_f64() - b.as_f64())))
        .collect();
    Ok((value, Tensor::from_vec(pred.shape(), grad)))
}

/// Grayscale `[0, 1]` batch to mean-subtracted 3-channel `[0, 255]` batch.
pub fn vgg_preprocess<T: Scalar>(batch: &Tensor<T>) -> Result<Tensor<T>> {
    if batch.channels() != 1 {
        return Err(Error::Shape(format!("expected 1 channel, got {}", batch.channels())));
    }
    if let Some(i) = batch.data().iter().position(|v| !(0.0..=1.0).contains(&v.as_f64())) {
        return Err(Error::Domain(format!(
            "pixel {i} = {:?} outside [0, 1]",
            batch.data()[i]
        )));
    }
    Ok(preprocess_unchecked(batch))
}

/// Range-free preprocessing used inside the loss, where predictions may
/// overshoot `[0, 1]` during training.
fn preprocess_unchecked<T: Scalar>(batch: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = batch.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 3, h, w]);
    for i in 0..n {
        let src = batch.sample(i);
        let dst = out.sample_mut(i);
        for (c, mean) in VGG_CHANNEL_MEANS.iter().enumerate() {
            for (d, &s) in dst[c * plane..(c + 1) * plane].iter_mut().zip(src) {
                *d = T::from_f64(s.as_f64() * 255.0 - mean);
            }
        }
    }
    out
}

/// Gradient of [`preprocess_unchecked`]: sums channels and rescales.
fn preprocess_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = grad.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let src = grad.sample(i);
        let dst = out.sample_mut(i);
        for (p, d) in dst.iter_mut().enumerate() {
            let s = src[p].as_f64() + src[plane + p].as_f64() + src[2 * plane + p].as_f64();
            *d = T::from_f64(255.0 * s);
        }
    }
    out
}

/// VGG-16 convolutional trunk through block 4 (no pooling after block 4).
pub fn vgg16_block4_spec() -> NetworkSpec {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (block, (&width, &convs)) in [64usize, 128, 256, 512].iter().zip(&[2usize, 2, 3, 3]).enumerate() {
        for _ in 0..convs {
            layers.push(LayerSpec::conv(cin, width, 1));
            layers.push(LayerSpec::Relu);
            cin = width;
        }
        if block < 3 {
            layers.push(LayerSpec::MaxPool2);
        }
    }
    NetworkSpec {
        name: "vgg16_block4".into(),
        input_channels: 3,
        layers,
        global_residual: false,
    }
}

/// Frozen feature extractor exposing the (post-activation) outputs of the
/// last convolution of blocks 1 to 4.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: NetworkSpec,
    weights: WeightStore,
    params: Params<f32>,
    taps: [usize; 4],
}

impl FeatureExtractor {
    pub fn from_store(weights: WeightStore) -> Result<Self> {
        let spec = vgg16_block4_spec();
        let params = Params::from_store(&spec, &weights)?;
        let taps = Self::tap_points(&spec);
        Ok(FeatureExtractor {
            spec,
            weights,
            params,
            taps,
        })
    }

    /// Architecture-identical extractor with seeded Glorot weights, for hermetic tests.
    pub fn random(seed: u64) -> Self {
        Self::from_store(vgg16_block4_spec().init_weights(seed)).expect("spec-generated weights")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = load_weights(path).map_err(|e| Error::MissingExtractor {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_store(store).map_err(|e| Error::MissingExtractor {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Configured path, then `CASCADE_CT_VGG_WEIGHTS`, then `vgg16_conv.ctw1`.
    pub fn weights_path(configured: Option<&Path>) -> PathBuf {
        configured
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(VGG_WEIGHTS_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_VGG_WEIGHTS))
    }

    fn tap_points(spec: &NetworkSpec) -> [usize; 4] {
        // the activation that follows the last conv before each pool, and the final one
        let mut taps = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::MaxPool2) {
                taps.push(i - 1);
            }
        }
        taps.push(spec.layers.len() - 1);
        taps.try_into().expect("four blocks")
    }

    pub fn taps(&self) -> [usize; 4] {
        self.taps
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    fn params<T: Scalar>(&self) -> Result<Params<T>> {
        Params::from_store(&self.spec, &self.weights)
    }

    /// Features of an already preprocessed 3-channel batch.
    pub fn extract_features<T: Scalar>(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        check_extractor_input(batch)?;
        with_params::<T, _>(self, |net| {
            net.forward_collect(batch, BnMode::Inference, &self.taps)
                .map(|(_, f)| f)
        })?
    }
}

fn check_extractor_input<T: Scalar>(batch: &Tensor<T>) -> Result<()> {
    if batch.channels() != 3 {
        return Err(Error::Shape(format!(
            "feature extractor takes 3 channels, got {}",
            batch.channels()
        )));
    }
    if batch.height() < 16 || batch.width() < 16 {
        return Err(Error::Shape(format!(
            "feature extractor needs at least 16x16 inputs, got {}x{}",
            batch.height(),
            batch.width()
        )));
    }
    Ok(())
}

/// Runs `f` with the extractor parameters in precision `T`.
fn with_params<T: Scalar, R>(fx: &FeatureExtractor, f: impl FnOnce(&Network<'_, T>) -> R) -> Result<R> {
    if let Some(p) = (&fx.params as &dyn std::any::Any).downcast_ref::<Params<T>>() {
        return Ok(f(&Network::new(&fx.spec, p)));
    }
    let params = fx.params::<T>()?;
    Ok(f(&Network::new(&fx.spec, &params)))
}

fn feature_distance<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>], batch: usize) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let volume = fa.sample_len() as f64;
        let sq: f64 = fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        total += sq / volume;
    }
    total / batch as f64
}

/// Sum over blocks 1-4 of the squared feature distance divided by the
/// feature-map volume, averaged over the batch.
pub fn perceptual_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, fx: &FeatureExtractor) -> Result<f64> {
    check_pair(pred, target)?;
    let fp = fx.extract_features(&preprocess_unchecked(pred))?;
    let ft = fx.extract_features(&preprocess_unchecked(target))?;
    Ok(feature_distance(&fp, &ft, pred.batch()))
}

pub fn perceptual_loss_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fx: &FeatureExtractor,
) -> Result<(f64, Tensor<T>)> {
    check_pair(pred, target)?;
    let x = preprocess_unchecked(pred);
    check_extractor_input(&x)?;
    let ft = fx.extract_features(&preprocess_unchecked(target))?;
    with_params::<T, _>(fx, |net| -> Result<(f64, Tensor<T>)> {
        let (_, trace) = net.forward_traced(&x, BnMode::Inference)?;
        let fp: Vec<&Tensor<T>> = fx.taps.iter().map(|&t| trace.activation(t)).collect();
        let n = pred.batch() as f64;
        let mut value = 0.0;
        let mut seeds = Vec::with_capacity(4);
        for ((&tap, a), b) in fx.taps.iter().zip(&fp).zip(&ft) {
            let volume = a.sample_len() as f64;
            let scale = 2.0 / (volume * n);
            let mut sq = 0.0;
            let grad: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| {
                    let d = p.as_f64() - q.as_f64();
                    sq += d * d;
                    T::from_f64(scale * d)
                })
                .collect();
            value += sq / volume;
            seeds.push((tap, Tensor::from_vec(a.shape(), grad)));
        }
        let grads = net.backward(trace, None, seeds, false);
        Ok((value / n, preprocess_backward(&grads.input)))
    })?
}

/// Perceptual loss plus `lambda_mse` times the per-pixel MSE.
pub fn combined_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fx: &FeatureExtractor,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_value_and_grad(
        pred,
        target,
        Some(fx),
        &LossConfig {
            kind: LossKind::Combined,
            ..*cfg
        },
        false,
    )?
    .0)
}

fn loss_value_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fx: Option<&FeatureExtractor>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    cfg.validate()?;
    let need_fx = || fx.ok_or_else(|| Error::Config("loss needs a feature extractor".into()));
    match cfg.kind {
        LossKind::Mse => {
            if want_grad {
                let (v, g) = mse_loss_grad(pred, target, cfg.reduction)?;
                Ok((v, Some(g)))
            } else {
                Ok((mse_loss(pred, target, cfg.reduction)?, None))
            }
        }
        LossKind::Perceptual => {
            if want_grad {
                let (v, g) = perceptual_loss_grad(pred, target, need_fx()?)?;
                Ok((v, Some(g)))
            } else {
                Ok((perceptual_loss(pred, target, need_fx()?)?, None))
            }
        }
        LossKind::Combined => {
            let (p, pg) = if want_grad {
                let (v, g) = perceptual_loss_grad(pred, target, need_fx()?)?;
                (v, Some(g))
            } else {
                (perceptual_loss(pred, target, need_fx()?)?, None)
            };
            if cfg.lambda_mse == 0.0 {
                return Ok((p, pg));
            }
            let (m, mg) = mse_loss_grad(pred, target, MseReduction::PerPixelMean)?;
            let grad = pg.map(|mut g| {
                for (a, &b) in g.data_mut().iter_mut().zip(mg.data()) {
                    *a = T::from_f64(a.as_f64() + cfg.lambda_mse * b.as_f64());
                }
                g
            });
            Ok((p + cfg.lambda_mse * m, grad))
        }
    }
}

/// Loss value and prediction gradient for any configured loss.
pub fn loss_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fx: Option<&FeatureExtractor>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    let (v, g) = loss_value_and_grad(pred, target, fx, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

pub fn loss_value<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fx: Option<&FeatureExtractor>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_value_and_grad(pred, target, fx, cfg, false)?.0)
}
