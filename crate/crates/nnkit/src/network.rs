use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layer::{self, LayerAux};
use crate::{LayerSpec, NnError, RandomStream, Real, Result, Tensor};

static NEXT_STATE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_state_id() -> u64 {
    NEXT_STATE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Weight and bias of one parametric layer. Also used as the container for
/// their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// A feed-forward stack of layers with per-sample shapes.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Param<T>>>,
    mode: Mode,
    /// Changes whenever parameters may have changed; ties caches to a parameter state.
    state_id: u64,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    state_id: u64,
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<Tensor<T>>,
    aux: Vec<LayerAux<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("cache holds at least the input")
    }

    /// Output of layer `index`.
    pub fn layer_output(&self, index: usize) -> Option<&Tensor<T>> {
        self.values.get(index + 1)
    }

    /// Number of layers the pass went through.
    pub fn depth(&self) -> usize {
        self.aux.len()
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.pop().expect("cache holds at least the input")
    }
}

/// Parameter gradients (aligned with [`Network::params`]) plus the gradient
/// with respect to the network input.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub layers: Vec<Option<Param<T>>>,
    pub input: Tensor<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weight: Tensor::zeros(p.weight.shape()).expect("valid shape"),
                    bias: Tensor::zeros(p.bias.shape()).expect("valid shape"),
                })
            })
            .collect();
        Self {
            layers,
            input: Tensor::zeros(net.input_shape()).expect("valid shape"),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.add_assign(&b.weight);
                a.bias.add_assign(&b.bias);
            }
        }
        self.input.add_assign(&other.input);
    }

    pub fn scale(&mut self, factor: T) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.scale(factor);
            p.bias.scale(factor);
        }
        self.input.scale(factor);
    }

    /// Adds `coefficient * sign(w)` for every weight (biases are not
    /// penalized). The subgradient at exactly zero is zero.
    pub fn add_l1_subgradient(&mut self, net: &Network<T>, coefficient: T) {
        if coefficient == T::zero() {
            return;
        }
        for (g, p) in self.layers.iter_mut().zip(&net.params) {
            if let (Some(g), Some(p)) = (g, p) {
                for (gv, &w) in g.weight.data_mut().iter_mut().zip(p.weight.data()) {
                    if w > T::zero() {
                        *gv += coefficient;
                    } else if w < T::zero() {
                        *gv = *gv - coefficient;
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }
}

impl<T: Real> Network<T> {
    /// Builds a network and initializes parameters from `seed`.
    ///
    /// Weights are He-uniform (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) drawn from
    /// a per-layer stream; biases start at zero.
    pub fn new(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        let init = RandomStream::new(seed).derive_named("init");
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (ws, bs) = (spec.weight_shape()?, spec.bias_shape()?);
                let limit = (6.0 / spec.fan_in() as f64).sqrt();
                let mut rng = init.derive(i as u64).rng();
                let n: usize = ws.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
                    .collect();
                Some(Param {
                    weight: Tensor::new(ws, data).expect("weight shape"),
                    bias: Tensor::zeros(&bs).expect("bias shape"),
                })
            })
            .collect();
        Ok(Self {
            layers,
            shapes,
            params,
            mode: Mode::Eval,
            state_id: fresh_state_id(),
        })
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        params: Vec<Option<Param<T>>>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        if params.len() != layers.len() {
            return Err(NnError::GradientShape {
                layer: params.len().min(layers.len()),
                reason: format!("{} parameter slots for {} layers", params.len(), layers.len()),
            });
        }
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            check_param_shape(i, spec, p.as_ref())?;
        }
        Ok(Self {
            layers,
            shapes,
            params,
            mode: Mode::Eval,
            state_id: fresh_state_id(),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shapes include the input")
    }

    /// Output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> Option<&[usize]> {
        self.shapes.get(index + 1).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[Option<Param<T>>] {
        &self.params
    }

    /// Mutable parameter access. Any cache taken before this call becomes stale.
    pub fn params_mut(&mut self) -> &mut [Option<Param<T>>] {
        self.state_id = fresh_state_id();
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Sum of absolute weight values (biases excluded).
    pub fn l1_norm(&self) -> T {
        self.params.iter().flatten().map(|p| p.weight.abs_sum()).sum()
    }

    /// Network made of the first `n_layers` layers, sharing parameter values.
    pub fn truncated(&self, n_layers: usize) -> Result<Self> {
        let n = n_layers.min(self.layers.len());
        Self::from_parts(
            self.layers[..n].to_vec(),
            self.input_shape(),
            self.params[..n].to_vec(),
        )
        .map(|mut net| {
            net.mode = self.mode;
            net
        })
    }

    /// Converts parameters to another scalar type, keeping the mode.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Param {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            mode: self.mode,
            state_id: fresh_state_id(),
        }
    }

    /// Full forward pass. `stream` is required only in train mode when the
    /// network contains a dropout layer; its per-layer children key the masks.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        stream: Option<RandomStream>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cache = self.forward_prefix(input, self.layers.len(), stream)?;
        Ok((cache.output().clone(), cache))
    }

    /// Forward pass through the first `end` layers only.
    pub fn forward_prefix(
        &self,
        input: &Tensor<T>,
        end: usize,
        stream: Option<RandomStream>,
    ) -> Result<ForwardCache<T>> {
        if input.shape() != self.input_shape() {
            return Err(NnError::InputShape {
                expected: self.input_shape().to_vec(),
                actual: input.shape().to_vec(),
            });
        }
        let end = end.min(self.layers.len());
        let mut values = Vec::with_capacity(end + 1);
        let mut aux = Vec::with_capacity(end);
        values.push(input.clone());
        for i in 0..end {
            let spec = &self.layers[i];
            let dropout_stream = match (spec, self.mode) {
                (LayerSpec::Dropout { rate }, Mode::Train) if *rate > 0.0 => {
                    Some(stream.ok_or(NnError::MissingRandomStream(i))?.derive(i as u64))
                }
                _ => None,
            };
            let p = self.params[i].as_ref();
            let (out, a) = layer::forward(
                spec,
                p.map(|p| &p.weight),
                p.map(|p| &p.bias),
                &values[i],
                &self.shapes[i + 1],
                dropout_stream,
            );
            values.push(out);
            aux.push(a);
        }
        Ok(ForwardCache {
            state_id: self.state_id,
            values,
            aux,
        })
    }

    /// Backpropagates `loss_gradient` (d loss / d output) through the cached
    /// pass. When `l1_coefficient > 0` the L1 subgradient of the weights is
    /// added to the result.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        loss_gradient: &Tensor<T>,
        l1_coefficient: T,
    ) -> Result<Gradients<T>> {
        if cache.state_id != self.state_id {
            return Err(NnError::StaleCache(
                "cache was produced by a different parameter state".into(),
            ));
        }
        if cache.depth() != self.layers.len() {
            return Err(NnError::StaleCache(format!(
                "cache covers {} of {} layers",
                cache.depth(),
                self.layers.len()
            )));
        }
        if loss_gradient.shape() != self.output_shape() {
            return Err(NnError::LossGradientShape {
                expected: self.output_shape().to_vec(),
                actual: loss_gradient.shape().to_vec(),
            });
        }
        let mut layers: Vec<Option<Param<T>>> = vec![None; self.layers.len()];
        let mut grad = loss_gradient.clone();
        for i in (0..self.layers.len()).rev() {
            let (gx, pg) = layer::backward(
                &self.layers[i],
                self.params[i].as_ref().map(|p| &p.weight),
                &cache.values[i],
                &cache.values[i + 1],
                &cache.aux[i],
                &grad,
            );
            layers[i] = pg.map(|(weight, bias)| Param { weight, bias });
            grad = gx;
        }
        let mut grads = Gradients {
            layers,
            input: grad,
        };
        grads.add_l1_subgradient(self, l1_coefficient);
        Ok(grads)
    }

    /// `w <- w - learning_rate * g` for every parameter.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, learning_rate: T) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(NnError::GradientShape {
                layer: grads.layers.len(),
                reason: "gradient layer count differs from network".into(),
            });
        }
        for (i, (p, g)) in self.params.iter().zip(&grads.layers).enumerate() {
            match (p, g) {
                (Some(p), Some(g)) => {
                    if !p.weight.same_shape(&g.weight) || !p.bias.same_shape(&g.bias) {
                        return Err(NnError::GradientShape {
                            layer: i,
                            reason: "gradient shape differs from parameter".into(),
                        });
                    }
                    if !g.weight.is_finite() {
                        return Err(NnError::NonFiniteGradient { layer: i, param: "weight" });
                    }
                    if !g.bias.is_finite() {
                        return Err(NnError::NonFiniteGradient { layer: i, param: "bias" });
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(NnError::GradientShape {
                        layer: i,
                        reason: "gradient presence differs from parameter".into(),
                    })
                }
            }
        }
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                for (w, &gv) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w = *w - learning_rate * gv;
                }
                for (b, &gv) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b = *b - learning_rate * gv;
                }
            }
        }
        self.state_id = fresh_state_id();
        Ok(())
    }
}

fn infer_shapes(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(NnError::InvalidShape(input_shape.to_vec()));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (index, spec) in layers.iter().enumerate() {
        let next = spec
            .output_shape(shapes.last().expect("nonempty"))
            .map_err(|reason| NnError::LayerShape {
                index,
                layer: spec.to_string(),
                reason,
            })?;
        shapes.push(next);
    }
    Ok(shapes)
}

fn check_param_shape<T: Real>(index: usize, spec: &LayerSpec, p: Option<&Param<T>>) -> Result<()> {
    let bad = |reason: String| NnError::GradientShape {
        layer: index,
        reason,
    };
    match (spec.weight_shape(), spec.bias_shape(), p) {
        (Some(ws), Some(bs), Some(p)) => {
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(bad(format!(
                    "{spec} expects weight {ws:?} and bias {bs:?}, got {:?} and {:?}",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
            Ok(())
        }
        (None, None, None) => Ok(()),
        _ => Err(bad(format!("parameter presence does not match {spec}"))),
    }
}
