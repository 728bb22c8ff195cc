use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv3d_valid_backward, conv3d_valid_forward, Activation, ConvLayer, LayerGrads};
use super::{Batch, Real, Tensor4};
use crate::error::{Error, Result};

/// Spatial margin consumed per side by the standard model.
pub const MARGIN: usize = 6;

/// Number of 3x3x3 feature layers in the standard model.
const FEATURE_LAYERS: usize = 6;

/// I.i.d. zero-mean Gaussian draws with variance `2 / fan_in`.
pub fn he_init<T: Real, R: Rng + ?Sized>(fan_in: usize, len: usize, rng: &mut R) -> Vec<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}

/// The shallow fully convolutional landmark model.
///
/// Six valid-mode 3x3x3 ReLU layers with `a * 2^L` filters (L = 0..5),
/// followed by a linear 1x1x1 regression layer with one output channel per
/// landmark. Inputs shrink by 12 voxels per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel<T> {
    pub in_channels: usize,
    pub n_landmarks: usize,
    pub base_filters: usize,
    pub layers: Vec<ConvLayer<T>>,
}

/// Parameter gradients, one entry per layer, plus the optional input
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    pub input: Option<Batch<T>>,
}

impl<T: Real> FcnModel<T> {
    /// Standard architecture with He-initialised weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        n_landmarks: usize,
        base_filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || n_landmarks == 0 || base_filters == 0 {
            return Err(Error::InvalidArgument(
                "channel counts and base filter count must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(FEATURE_LAYERS + 1);
        let mut prev = in_channels;
        for l in 0..FEATURE_LAYERS {
            let out = base_filters << l;
            let mut layer = ConvLayer::zeros(prev, out, 3, Activation::Relu);
            layer.weights = he_init(layer.fan_in(), layer.weights.len(), rng);
            layers.push(layer);
            prev = out;
        }
        let mut head = ConvLayer::zeros(prev, n_landmarks, 1, Activation::Linear);
        head.weights = he_init(head.fan_in(), head.weights.len(), rng);
        layers.push(head);
        Ok(Self {
            in_channels,
            n_landmarks,
            base_filters,
            layers,
        })
    }

    /// Arbitrary layer stack (used for reduced test models). Validates that
    /// channel counts chain.
    pub fn from_layers(layers: Vec<ConvLayer<T>>, base_filters: usize) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Shape("model has no layers".into()))?;
        let in_channels = first.in_channels;
        for l in &layers {
            l.validate()?;
        }
        for w in layers.windows(2) {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::Shape(format!(
                    "layer with {} outputs feeds layer with {} inputs",
                    w[0].out_channels, w[1].in_channels
                )));
            }
        }
        Ok(Self {
            in_channels,
            n_landmarks: layers.last().map(|l| l.out_channels).unwrap_or(0),
            base_filters,
            layers,
        })
    }

    /// Voxels removed per side by the whole stack.
    pub fn margin(&self) -> usize {
        self.layers.iter().map(|l| (l.kernel - 1) / 2).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let m = 2 * self.margin();
        if input.iter().any(|&d| d < m + 1) {
            return Err(Error::Shape(format!(
                "input {input:?} smaller than the minimum {} per axis",
                m + 1
            )));
        }
        Ok(input.map(|d| d - m))
    }

    pub fn forward(&self, patch: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_batch(&Batch::single(patch))?.member(0))
    }

    pub fn forward_batch(&self, input: &Batch<T>) -> Result<Batch<T>> {
        self.check_input(input)?;
        let mut x = conv3d_valid_forward(input, &self.layers[0])?;
        for layer in &self.layers[1..] {
            x = conv3d_valid_forward(&x, layer)?;
        }
        Ok(x)
    }

    /// Forward pass that keeps every layer output for backpropagation.
    pub fn forward_cached(&self, input: &Batch<T>) -> Result<Vec<Batch<T>>> {
        self.check_input(input)?;
        let mut acts: Vec<Batch<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let y = conv3d_valid_forward(x, layer)?;
            acts.push(y);
        }
        Ok(acts)
    }

    /// Exact gradients of a scalar loss whose gradient with respect to the
    /// model output is `loss_grad`.
    pub fn backward(
        &self,
        input: &Batch<T>,
        acts: &[Batch<T>],
        loss_grad: &Batch<T>,
        want_input_grad: bool,
    ) -> Result<Gradients<T>> {
        if acts.len() != self.layers.len() {
            return Err(Error::Shape("activation cache does not match the model".into()));
        }
        let out = acts.last().expect("non-empty");
        if loss_grad.dims != out.dims || loss_grad.channels != out.channels || loss_grad.batch != out.batch {
            return Err(Error::Shape(format!(
                "loss gradient {:?}x{} does not match model output {:?}x{}",
                loss_grad.dims, loss_grad.channels, out.dims, out.channels
            )));
        }
        let mut grads = vec![None; self.layers.len()];
        let mut upstream = loss_grad.clone();
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let need = i > 0 || want_input_grad;
            let (g, gin) = conv3d_valid_backward(x, &acts[i], &self.layers[i], &upstream, need)?;
            grads[i] = Some(g);
            match (i, gin) {
                (0, gin) => input_grad = gin,
                (_, Some(gin)) => upstream = gin,
                (_, None) => unreachable!("input gradient requested for inner layers"),
            }
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
            input: input_grad,
        })
    }

    pub fn cast<U: Real>(&self) -> FcnModel<U> {
        FcnModel {
            in_channels: self.in_channels,
            n_landmarks: self.n_landmarks,
            base_filters: self.base_filters,
            layers: self.layers.iter().map(ConvLayer::cast).collect(),
        }
    }

    fn check_input(&self, input: &Batch<T>) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        self.output_dims(input.dims).map(|_| ())
    }
}
