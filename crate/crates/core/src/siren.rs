//! Sinusoidal coordinate networks.
//!
//! The network maps a normalized pixel coordinate `(x, y)` to an RGB triple:
//! every hidden layer is `sin(W a + b)` and the output layer is linear. The
//! first-layer frequency scale `omega` is folded into the initial weights,
//! which are drawn from `U(-omega/2, omega/2)`; all later layers use
//! `U(-sqrt(6/n), sqrt(6/n))` for fan-in `n`.
//!
//! Everything here is generic over the float type so that gradients can be
//! checked in `f64` against finite differences while training runs in `f32`.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics;
use crate::optim::{Adam, AdamConfig, Parameters};
use crate::sampler;

pub const IN_DIM: usize = 2;
pub const OUT_DIM: usize = 3;

/// Float types the network can be evaluated in.
pub trait Scalar: NdFloat + FromPrimitive {}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn lift<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 is representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InrConfig {
    /// Number of sine layers.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// First-layer frequency scale `w0`.
    pub first_layer_omega: f64,
    pub seed: u64,
}

impl Default for InrConfig {
    fn default() -> Self {
        InrConfig {
            hidden_layers: 3,
            hidden_width: 256,
            first_layer_omega: 30.0,
            seed: 0,
        }
    }
}

impl InrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config(format!(
                "network needs at least one hidden layer of width >= 1, got {}x{}",
                self.hidden_layers, self.hidden_width
            )));
        }
        if !(self.first_layer_omega > 0.0) || !self.first_layer_omega.is_finite() {
            return Err(Error::Config(format!(
                "first_layer_omega must be positive, got {}",
                self.first_layer_omega
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.hidden_width;
        let mut shapes = vec![(IN_DIM, w)];
        shapes.extend((1..self.hidden_layers).map(|_| (w, w)));
        shapes.push((w, OUT_DIM));
        shapes
    }
}

/// One affine layer; `weight` has shape `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn affine(&self, input: ArrayView2<T>) -> Array2<T> {
        let mut z = input.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Weights of a sinusoidal coordinate network.
#[derive(Debug, Clone, PartialEq)]
pub struct InrParams<T = f32> {
    config: InrConfig,
    layers: Vec<Dense<T>>,
}

/// Activations retained by [`InrParams::forward_tape`] for the backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    /// Input of every layer (coordinates first).
    inputs: Vec<Array2<T>>,
    /// `cos` of every sine layer's pre-activation.
    derivs: Vec<Array2<T>>,
}

/// Gradients with the same layout as [`InrParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct InrGrads<T = f32> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> InrGrads<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

pub fn init_siren(config: &InrConfig) -> Result<InrParams<f32>> {
    InrParams::init(config)
}

impl<T: Scalar> InrParams<T> {
    pub fn init(config: &InrConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let n = fan_in as f64;
                let bound = if i == 0 {
                    config.first_layer_omega / n
                } else {
                    (6.0 / n).sqrt()
                };
                let bias_bound = 1.0 / n.sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    lift(rng.random_range(-bound..=bound))
                });
                let bias = Array1::from_shape_simple_fn(fan_out, || {
                    lift(rng.random_range(-bias_bound..=bias_bound))
                });
                Dense { weight, bias }
            })
            .collect();
        Ok(InrParams {
            config: *config,
            layers,
        })
    }

    /// Builds parameters from explicit layers, checking the shape chain.
    pub fn from_layers(config: InrConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Contract(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.dim() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::Contract(format!(
                    "layer {i}: expected weight {fan_out}x{fan_in}, got {:?} with bias {}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("layer {i} has non-finite entries")));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
            })
            .collect();
        Ok(InrParams { config, layers })
    }

    pub fn config(&self) -> &InrConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn cast<U: Scalar>(&self) -> InrParams<U> {
        let conv = |v: &T| lift::<U>(v.to_f64().expect("finite float"));
        InrParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.map(conv),
                    bias: l.bias.map(conv),
                })
                .collect(),
        }
    }

    fn check_coords(&self, coords: &ArrayView2<T>) -> Result<()> {
        if coords.ncols() != IN_DIM {
            return Err(Error::Contract(format!(
                "coordinates must have {IN_DIM} columns, got {}",
                coords.ncols()
            )));
        }
        Ok(())
    }

    /// Evaluates the network on `k × 2` coordinates, returning `k × 3` colors.
    pub fn forward(&self, coords: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_coords(&coords)?;
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut act = coords.to_owned();
        for layer in hidden {
            act = layer.affine(act.view());
            act.mapv_inplace(T::sin);
        }
        Ok(last.affine(act.view()))
    }

    /// Like [`forward`](Self::forward) but keeps what the backward pass needs.
    pub fn forward_tape(&self, coords: ArrayView2<T>) -> Result<(Array2<T>, Tape<T>)> {
        self.check_coords(&coords)?;
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut derivs = Vec::with_capacity(hidden.len());
        let mut act = coords.to_owned();
        for layer in hidden {
            let mut z = layer.affine(act.view());
            let mut d = Array2::zeros(z.raw_dim());
            Zip::from(&mut z).and(&mut d).for_each(|z, d| {
                let (s, c) = z.sin_cos();
                *z = s;
                *d = c;
            });
            inputs.push(std::mem::replace(&mut act, z));
            derivs.push(d);
        }
        let out = last.affine(act.view());
        inputs.push(act);
        Ok((out, Tape { inputs, derivs }))
    }

    /// Back-propagates `d_out` (`k × 3`) and returns parameter gradients together
    /// with the gradient w.r.t. the input coordinates.
    pub fn backward(&self, tape: &Tape<T>, d_out: ArrayView2<T>) -> Result<(InrGrads<T>, Array2<T>)> {
        let k = tape.inputs[0].nrows();
        if d_out.dim() != (k, OUT_DIM) {
            return Err(Error::Contract(format!(
                "output gradient must be {k}x{OUT_DIM}, got {:?}",
                d_out.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i < self.layers.len() - 1 {
                upstream *= &tape.derivs[i];
            }
            let input = &tape.inputs[i];
            grads.push(Dense {
                weight: upstream.t().dot(input),
                bias: upstream.sum_axis(Axis(0)),
            });
            upstream = upstream.dot(&layer.weight);
        }
        grads.reverse();
        Ok((InrGrads { layers: grads }, upstream))
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl Parameters for InrParams<f32> {
    fn param_slices(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub adam: AdamConfig,
    pub steps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            adam: AdamConfig::with_lr(1e-4),
            steps: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub final_psnr: f64,
    pub steps: usize,
    pub wall_time: f64,
    /// `(step, loss)` recorded every [`LOSS_LOG_INTERVAL`] steps.
    pub loss_curve: Vec<(usize, f64)>,
}

pub const LOSS_LOG_INTERVAL: usize = 100;

/// Fits a fresh network to `image` by full-grid MSE regression.
pub fn fit_inr(image: &Image, config: &InrConfig, options: &FitOptions) -> Result<(InrParams, FitReport)> {
    let params = InrParams::init(config)?;
    fit_from(params, image, options)
}

/// Continues fitting from existing parameters.
pub fn fit_from(mut params: InrParams, image: &Image, options: &FitOptions) -> Result<(InrParams, FitReport)> {
    let started = Instant::now();
    let (h, w) = image.size();
    let grid = sampler::coordinate_grid(h, w)?;
    let coords = grid.as_array();
    let target = sampler::image_to_rows(image);
    let scale = 2.0 / target.len() as f32;
    let mut adam = Adam::new(options.adam);
    let mut loss_curve = Vec::new();

    for step in 0..options.steps {
        let (out, tape) = params.forward_tape(coords.view())?;
        let mut diff = out;
        diff -= &target;
        let loss = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / diff.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "fit",
                step,
                loss,
            });
        }
        if step % LOSS_LOG_INTERVAL == 0 {
            loss_curve.push((step, loss));
        }
        diff *= scale;
        let (grads, _) = params.backward(&tape, diff.view())?;
        adam.step(&mut params, &grads.slices());
    }

    let sampled = sampler::sample_image(&params, h, w)?;
    let final_loss = metrics::mse(&sampled, image)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            stage: "fit",
            step: options.steps,
            loss: final_loss,
        });
    }
    let report = FitReport {
        final_loss,
        final_psnr: metrics::psnr(image, &sampled)?,
        steps: options.steps,
        wall_time: started.elapsed().as_secs_f64(),
        loss_curve,
    };
    Ok((params, report))
}
