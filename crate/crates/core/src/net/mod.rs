//! Minimal differentiable feed-forward networks.
//!
//! Five layer kinds (dense, relu, stride-1 valid conv, flatten, softmax
//! head), forward passes with full traces, backprop to parameters (for
//! training) and to the input (for gradient-based input crafting), plus
//! Adam and a binary model format. Everything takes a leading batch
//! dimension; batch 1 is the crafting path.

mod adam;
mod format;

pub use adam::{adam_step, AdamState};
pub use format::{load_model, load_model_file, save_model, save_model_file};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Added inside the log of cross-entropy so that a zero probability yields a
/// large finite loss instead of infinity; bounds the minimum reportable loss.
pub const EPS_CE: f64 = 1e-12;

/// Batch-row block size for the dense kernels: each weight row is streamed
/// once per block, keeping the working set cache-resident.
const ROW_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Fully connected `input -> output` with bias.
    Dense { input: usize, output: usize },
    Relu,
    /// Valid-padding convolution; only `stride == 1` is supported.
    ConvLite {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Row-wise softmax over `classes` logits; must be the final layer.
    SoftmaxHead { classes: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::ConvLite { .. } => "conv_lite",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxHead { .. } => "softmax_head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Frozen layers keep their parameters through every optimizer step.
    pub frozen: bool,
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { input, output },
            frozen: false,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            frozen: false,
        }
    }

    pub fn conv_lite(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConvLite {
                filters,
                kernel,
                stride,
            },
            frozen: false,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            frozen: false,
        }
    }

    pub fn softmax_head(classes: usize) -> Self {
        LayerSpec {
            kind: LayerKind::SoftmaxHead { classes },
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

/// One layer: its spec plus `(weights, bias)` when the kind has parameters.
#[derive(Clone, Debug)]
pub struct Layer<S> {
    pub spec: LayerSpec,
    pub params: Option<(Tensor<S>, Tensor<S>)>,
}

/// Ordered layer stack with recorded creation seed.
#[derive(Clone, Debug)]
pub struct Network<S> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
    /// Per-sample output shape after each layer.
    shapes: Vec<Vec<usize>>,
    rng_seed: u64,
}

/// Per-layer activations of one forward call: `pre(i)` is the input to layer
/// `i`, `post(i)` its output. Owned by a single training or crafting step.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    input: Tensor<S>,
    outputs: Vec<Tensor<S>>,
}

impl<S: Real> ForwardTrace<S> {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn input(&self) -> &Tensor<S> {
        &self.input
    }

    pub fn pre(&self, layer: usize) -> &Tensor<S> {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }

    pub fn post(&self, layer: usize) -> &Tensor<S> {
        &self.outputs[layer]
    }

    pub fn output(&self) -> &Tensor<S> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

/// Per-layer parameter gradients; `skip_update` mirrors the frozen flags.
#[derive(Clone, Debug)]
pub struct GradientSet<S> {
    pub per_layer: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    pub skip_update: Vec<bool>,
}

impl<S: Real> Network<S> {
    /// Builds a network with seeded uniform init in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        let mut net = Network {
            input_shape,
            layers: Vec::new(),
            shapes: Vec::new(),
            rng_seed,
        };
        net.append_layers(specs, rng_seed)?;
        Ok(net)
    }

    /// Rebuilds a network from stored parts without re-initializing.
    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng_seed: u64,
        params: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    ) -> Result<Self> {
        let mut net = Network::new(input_shape, specs, rng_seed)?;
        if params.len() != net.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter list length {} does not match layer count {}",
                params.len(),
                net.layers.len()
            )));
        }
        for (i, p) in params.into_iter().enumerate() {
            match (&mut net.layers[i].params, p) {
                (Some(slot), Some((w, b))) => {
                    if slot.0.shape() != w.shape() || slot.1.shape() != b.shape() {
                        return Err(Error::shape(
                            format!("layer {i} stored parameters"),
                            slot.0.shape(),
                            w.shape(),
                        ));
                    }
                    *slot = (w, b);
                }
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: stored parameters do not match layer kind"
                    )))
                }
            }
        }
        Ok(net)
    }

    /// Appends layers (used by `new` and by student-head construction),
    /// extending shape inference from the current output.
    pub fn append_layers(&mut self, specs: Vec<LayerSpec>, init_seed: u64) -> Result<()> {
        for spec in specs {
            let idx = self.layers.len();
            let cur = self
                .shapes
                .last()
                .cloned()
                .unwrap_or_else(|| self.input_shape.clone());
            let (out_shape, params) = self.infer_layer(idx, &spec, &cur, init_seed)?;
            self.layers.push(Layer { spec, params });
            self.shapes.push(out_shape);
        }
        // A softmax head anywhere but last invalidates the stack.
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l.spec.kind, LayerKind::SoftmaxHead { .. }) && i + 1 != self.layers.len() {
                return Err(Error::InvalidArgument(
                    "softmax_head may appear only as the final layer".into(),
                ));
            }
        }
        Ok(())
    }

    fn infer_layer(
        &self,
        idx: usize,
        spec: &LayerSpec,
        cur: &[usize],
        init_seed: u64,
    ) -> Result<(Vec<usize>, Option<(Tensor<S>, Tensor<S>)>)> {
        let ctx = format!("layer {idx} ({})", spec.kind.name());
        match spec.kind {
            LayerKind::Dense { input, output } => {
                if cur != [input] {
                    return Err(Error::shape(ctx, &[input], cur));
                }
                let limit = (6.0 / (input + output) as f64).sqrt();
                let mut rng = rng_for(init_seed, &format!("init.layer{idx}"));
                let w = sample_uniform(&mut rng, vec![output, input], limit);
                let b = Tensor::zeros(vec![output]);
                Ok((vec![output], Some((w, b))))
            }
            LayerKind::Relu => Ok((cur.to_vec(), None)),
            LayerKind::ConvLite {
                filters,
                kernel,
                stride,
            } => {
                if stride != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "{ctx}: only stride 1 is supported"
                    )));
                }
                let [c, h, w] = match cur {
                    [c, h, w] => [*c, *h, *w],
                    _ => {
                        return Err(Error::shape(
                            format!("{ctx} expects [channels, height, width] input"),
                            &[0, 0, 0],
                            cur,
                        ))
                    }
                };
                if h < kernel || w < kernel || kernel == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{ctx}: kernel {kernel} does not fit input {h}x{w}"
                    )));
                }
                let fan_in = (c * kernel * kernel) as f64;
                let fan_out = (filters * kernel * kernel) as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                let mut rng = rng_for(init_seed, &format!("init.layer{idx}"));
                let wt = sample_uniform(&mut rng, vec![filters, c, kernel, kernel], limit);
                let bt = Tensor::zeros(vec![filters]);
                Ok((
                    vec![filters, h - kernel + 1, w - kernel + 1],
                    Some((wt, bt)),
                ))
            }
            LayerKind::Flatten => Ok((vec![cur.iter().product()], None)),
            LayerKind::SoftmaxHead { classes } => {
                if cur != [classes] {
                    return Err(Error::shape(ctx, &[classes], cur));
                }
                Ok((vec![classes], None))
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Per-sample output shape after layer `upto` (default: last layer).
    pub fn output_shape(&self, upto: Option<usize>) -> &[usize] {
        match upto {
            Some(i) => &self.shapes[i],
            None => self.shapes.last().map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    /// Flattened width of the final output; the activation-vector length `M`
    /// when the network is used as a feature extractor.
    pub fn output_width(&self) -> usize {
        self.output_shape(None).iter().product()
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.layers[layer].spec.frozen = frozen;
    }

    /// Overwrites one layer's parameters (shape-checked); test and
    /// hand-built-model helper.
    pub fn set_params(&mut self, layer: usize, w: Tensor<S>, b: Tensor<S>) -> Result<()> {
        let slot = self.layers[layer].params.as_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} has no parameters"))
        })?;
        if slot.0.shape() != w.shape() {
            return Err(Error::shape("set_params weights", slot.0.shape(), w.shape()));
        }
        if slot.1.shape() != b.shape() {
            return Err(Error::shape("set_params bias", slot.1.shape(), b.shape()));
        }
        *slot = (w, b);
        Ok(())
    }

    /// Clones the leading `count` layers as a stand-alone network.
    pub fn prefix(&self, count: usize) -> Result<Network<S>> {
        if count == 0 || count > self.layers.len() {
            return Err(Error::IndexOutOfRange {
                context: "network prefix".into(),
                index: count,
                len: self.layers.len(),
            });
        }
        Ok(Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..count].to_vec(),
            shapes: self.shapes[..count].to_vec(),
            rng_seed: self.rng_seed,
        })
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1
            || input.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::shape(
                "network input (leading batch extent expected)",
                &self.input_shape,
                input.shape(),
            ));
        }
        Ok(())
    }

    /// Runs the network on a `[batch, ...]` input up to and including layer
    /// `upto` (default: final layer). Returns the output and the full trace.
    pub fn forward(
        &self,
        input: &Tensor<S>,
        upto: Option<usize>,
    ) -> Result<(Tensor<S>, ForwardTrace<S>)> {
        self.check_input(input)?;
        let last = upto.unwrap_or(self.layers.len().saturating_sub(1));
        if last >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                context: "forward upto".into(),
                index: last,
                len: self.layers.len(),
            });
        }
        let batch = input.batch();
        let mut outputs = Vec::with_capacity(last + 1);
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().take(last + 1).enumerate() {
            let next = self.layer_forward(i, layer, &cur, batch)?;
            next.ensure_finite(&format!("layer {i} ({}) output", layer.spec.kind.name()))?;
            outputs.push(next.clone());
            cur = next;
        }
        Ok((
            cur,
            ForwardTrace {
                input: input.clone(),
                outputs,
            },
        ))
    }

    fn layer_forward(
        &self,
        idx: usize,
        layer: &Layer<S>,
        x: &Tensor<S>,
        batch: usize,
    ) -> Result<Tensor<S>> {
        match layer.spec.kind {
            LayerKind::Dense { input, output } => {
                let (w, b) = layer.params.as_ref().expect("dense has params");
                Ok(dense_forward(w.data(), b.data(), x, batch, input, output))
            }
            LayerKind::Relu => {
                let mut out = x.clone();
                out.map_inplace(|v| if v > S::zero() { v } else { S::zero() });
                Ok(out)
            }
            LayerKind::ConvLite {
                filters, kernel, ..
            } => {
                let (w, b) = layer.params.as_ref().expect("conv has params");
                let pre_shape = if idx == 0 {
                    &self.input_shape
                } else {
                    &self.shapes[idx - 1]
                };
                Ok(conv_forward(
                    w.data(),
                    b.data(),
                    x,
                    batch,
                    pre_shape,
                    filters,
                    kernel,
                ))
            }
            LayerKind::Flatten => x.clone().reshape(vec![batch, x.row_len()]),
            LayerKind::SoftmaxHead { .. } => softmax(x),
        }
    }

    /// Backpropagates `out_grad` (gradient at the output of the last traced
    /// layer) down to the network input.
    pub fn backward_input(&self, trace: &ForwardTrace<S>, out_grad: &Tensor<S>) -> Result<Tensor<S>> {
        let last = trace.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidArgument("backward_input: empty trace".into())
        })?;
        if out_grad.shape() != trace.post(last).shape() {
            return Err(Error::shape(
                "backward_input out_grad",
                trace.post(last).shape(),
                out_grad.shape(),
            ));
        }
        let mut g = out_grad.clone();
        for i in (0..=last).rev() {
            g = self.layer_backward_input(i, &g, trace)?;
        }
        g.ensure_finite("backward_input result")?;
        Ok(g)
    }

    fn layer_backward_input(
        &self,
        idx: usize,
        g: &Tensor<S>,
        trace: &ForwardTrace<S>,
    ) -> Result<Tensor<S>> {
        let layer = &self.layers[idx];
        let pre = trace.pre(idx);
        let batch = pre.batch();
        match layer.spec.kind {
            LayerKind::Dense { input, output } => {
                let (w, _) = layer.params.as_ref().expect("dense has params");
                Ok(dense_backward_input(w.data(), g, batch, input, output))
            }
            LayerKind::Relu => {
                let mut out = g.clone();
                for (dv, &p) in out.data_mut().iter_mut().zip(pre.data()) {
                    if p <= S::zero() {
                        *dv = S::zero();
                    }
                }
                Ok(out)
            }
            LayerKind::ConvLite {
                filters, kernel, ..
            } => {
                let (w, _) = layer.params.as_ref().expect("conv has params");
                let pre_shape = if idx == 0 {
                    self.input_shape.clone()
                } else {
                    self.shapes[idx - 1].clone()
                };
                Ok(conv_backward_input(
                    w.data(),
                    g,
                    batch,
                    &pre_shape,
                    filters,
                    kernel,
                ))
            }
            LayerKind::Flatten => {
                let mut shape = vec![batch];
                shape.extend_from_slice(if idx == 0 {
                    &self.input_shape
                } else {
                    &self.shapes[idx - 1]
                });
                g.clone().reshape(shape)
            }
            LayerKind::SoftmaxHead { .. } => {
                let probs = trace.post(idx);
                Ok(softmax_backward(probs, g))
            }
        }
    }

    /// Combined softmax + cross-entropy backward pass: gradients of the mean
    /// cross-entropy loss with respect to every layer's parameters. Frozen
    /// layers still get gradients, flagged `skip_update`.
    pub fn backward_params(
        &self,
        trace: &ForwardTrace<S>,
        labels: &[usize],
    ) -> Result<GradientSet<S>> {
        let n = self.layers.len();
        if trace.len() != n {
            return Err(Error::InvalidArgument(format!(
                "backward_params: trace covers {} of {} layers (run forward to the end)",
                trace.len(),
                n
            )));
        }
        let classes = match self.layers[n - 1].spec.kind {
            LayerKind::SoftmaxHead { classes } => classes,
            _ => {
                return Err(Error::InvalidArgument(
                    "backward_params requires a softmax_head final layer".into(),
                ))
            }
        };
        let probs = trace.post(n - 1);
        let batch = probs.batch();
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "backward_params: {} labels for batch {}",
                labels.len(),
                batch
            )));
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::IndexOutOfRange {
                    context: "backward_params label".into(),
                    index: l,
                    len: classes,
                });
            }
        }

        // d(mean CE)/d(logits) = (softmax - onehot) / batch
        let mut g = probs.clone();
        let inv_b = S::from_f64_c(1.0 / batch as f64);
        for (r, &l) in labels.iter().enumerate() {
            let row = g.row_mut(r);
            row[l] = row[l] - S::one();
            for v in row.iter_mut() {
                *v *= inv_b;
            }
        }

        let mut per_layer: Vec<Option<(Tensor<S>, Tensor<S>)>> = vec![None; n];
        let mut skip = vec![false; n];
        for i in (0..n - 1).rev() {
            let layer = &self.layers[i];
            skip[i] = layer.spec.frozen;
            if let Some((w, _)) = &layer.params {
                let pre = trace.pre(i);
                let grads = match layer.spec.kind {
                    LayerKind::Dense { input, output } => {
                        dense_backward_params(pre, &g, pre.batch(), input, output)
                    }
                    LayerKind::ConvLite {
                        filters, kernel, ..
                    } => {
                        let pre_shape = if i == 0 {
                            self.input_shape.clone()
                        } else {
                            self.shapes[i - 1].clone()
                        };
                        conv_backward_params(&g, pre, pre.batch(), &pre_shape, filters, kernel)
                    }
                    // Only dense/conv layers carry params.
                    _ => unreachable!("parameter-free layer holds params"),
                };
                debug_assert_eq!(grads.0.shape(), w.shape());
                per_layer[i] = Some(grads);
            }
            if i > 0 {
                g = self.layer_backward_input(i, &g, trace)?;
            }
        }
        skip[n - 1] = self.layers[n - 1].spec.frozen;
        Ok(GradientSet {
            per_layer,
            skip_update: skip,
        })
    }
}

fn sample_uniform<S: Real>(rng: &mut impl Rng, shape: Vec<usize>, limit: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_c(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::new(shape, data).expect("shape/data constructed consistently")
}

/// Numerically stable row-wise softmax.
pub fn softmax<S: Real>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.row_len() == 0 || logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.batch() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss through softmax given `d loss / d probs`.
fn softmax_backward<S: Real>(probs: &Tensor<S>, dprobs: &Tensor<S>) -> Tensor<S> {
    let mut out = dprobs.clone();
    for r in 0..out.batch() {
        let p = probs.row(r);
        let row = out.row_mut(r);
        let inner: S = row.iter().zip(p).map(|(&d, &pv)| d * pv).sum();
        for (dv, &pv) in row.iter_mut().zip(p) {
            *dv = pv * (*dv - inner);
        }
    }
    out
}

/// Mean cross-entropy `-ln(p[label] + eps)` over the batch.
pub fn cross_entropy<S: Real>(probs: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let batch = probs.batch();
    let classes = probs.row_len();
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: {} labels for batch {}",
            labels.len(),
            batch
        )));
    }
    let eps = S::from_f64_c(EPS_CE);
    let mut total = S::zero();
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::IndexOutOfRange {
                context: "cross_entropy label".into(),
                index: l,
                len: classes,
            });
        }
        total += -(probs.row(r)[l] + eps).ln();
    }
    Ok(total / S::from_f64_c(batch as f64))
}

// ---------------------------------------------------------------------------
// dense kernels
// ---------------------------------------------------------------------------

/// Four-lane dot product: fixed association for run-to-run determinism while
/// still giving the compiler independent accumulator chains.
#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc[0] = acc[0] + xa[0] * xb[0];
        acc[1] = acc[1] + xa[1] * xb[1];
        acc[2] = acc[2] + xa[2] * xb[2];
        acc[3] = acc[3] + xa[3] * xb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + xa * xb;
    }
    s
}

#[inline]
fn axpy<S: Real>(dst: &mut [S], src: &[S], scale: S) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += scale * x;
    }
}

fn dense_forward<S: Real>(
    w: &[S],
    b: &[S],
    x: &Tensor<S>,
    batch: usize,
    n_in: usize,
    n_out: usize,
) -> Tensor<S> {
    let mut out = Tensor::zeros(vec![batch, n_out]);
    let od = out.data_mut();
    for r0 in (0..batch).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(batch);
        for o in 0..n_out {
            let wrow = &w[o * n_in..(o + 1) * n_in];
            for r in r0..r1 {
                od[r * n_out + o] = dot(wrow, x.row(r)) + b[o];
            }
        }
    }
    out
}

/// `dx = dy . W` — gradient with respect to the dense layer's input.
fn dense_backward_input<S: Real>(
    w: &[S],
    dy: &Tensor<S>,
    batch: usize,
    n_in: usize,
    n_out: usize,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(vec![batch, n_in]);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for r0 in (0..batch).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(batch);
        for o in 0..n_out {
            let wrow = &w[o * n_in..(o + 1) * n_in];
            for r in r0..r1 {
                let g = dyd[r * n_out + o];
                if g != S::zero() {
                    axpy(&mut dxd[r * n_in..(r + 1) * n_in], wrow, g);
                }
            }
        }
    }
    dx
}

/// `dW[o,:] = sum_r dy[r,o] * x[r,:]`, `db[o] = sum_r dy[r,o]`.
fn dense_backward_params<S: Real>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    batch: usize,
    n_in: usize,
    n_out: usize,
) -> (Tensor<S>, Tensor<S>) {
    let mut dw = Tensor::zeros(vec![n_out, n_in]);
    let mut db = Tensor::zeros(vec![n_out]);
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let dyd = dy.data();
    for o in 0..n_out {
        let dwrow = &mut dwd[o * n_in..(o + 1) * n_in];
        let mut bsum = S::zero();
        for r in 0..batch {
            let g = dyd[r * n_out + o];
            bsum += g;
            if g != S::zero() {
                axpy(dwrow, x.row(r), g);
            }
        }
        dbd[o] = bsum;
    }
    (dw, db)
}

// ---------------------------------------------------------------------------
// conv_lite kernels (stride-1, valid padding; desk-scale, plain loops)
// ---------------------------------------------------------------------------

fn conv_forward<S: Real>(
    w: &[S],
    b: &[S],
    x: &Tensor<S>,
    batch: usize,
    in_shape: &[usize],
    filters: usize,
    k: usize,
) -> Tensor<S> {
    let (c_in, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = Tensor::zeros(vec![batch, filters, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    for r in 0..batch {
        for f in 0..filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[f];
                    for c in 0..c_in {
                        for ky in 0..k {
                            let wrow = &w[((f * c_in + c) * k + ky) * k..][..k];
                            let xrow = &xd[((r * c_in + c) * h + oy + ky) * wd + ox..][..k];
                            s = s + dot(wrow, xrow);
                        }
                    }
                    od[((r * filters + f) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

fn conv_backward_input<S: Real>(
    w: &[S],
    dy: &Tensor<S>,
    batch: usize,
    in_shape: &[usize],
    filters: usize,
    k: usize,
) -> Tensor<S> {
    let (c_in, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut dx = Tensor::zeros(vec![batch, c_in, h, wd]);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for r in 0..batch {
        for f in 0..filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyd[((r * filters + f) * oh + oy) * ow + ox];
                    if g == S::zero() {
                        continue;
                    }
                    for c in 0..c_in {
                        for ky in 0..k {
                            let wrow = &w[((f * c_in + c) * k + ky) * k..][..k];
                            let drow =
                                &mut dxd[((r * c_in + c) * h + oy + ky) * wd + ox..][..k];
                            axpy(drow, wrow, g);
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_params<S: Real>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    batch: usize,
    in_shape: &[usize],
    filters: usize,
    k: usize,
) -> (Tensor<S>, Tensor<S>) {
    let (c_in, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut dw = Tensor::zeros(vec![filters, c_in, k, k]);
    let mut db = Tensor::zeros(vec![filters]);
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let dyd = dy.data();
    let xd = x.data();
    for r in 0..batch {
        for f in 0..filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyd[((r * filters + f) * oh + oy) * ow + ox];
                    if g == S::zero() {
                        continue;
                    }
                    dbd[f] += g;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let wrow = &mut dwd[((f * c_in + c) * k + ky) * k..][..k];
                            let xrow = &xd[((r * c_in + c) * h + oy + ky) * wd + ox..][..k];
                            axpy(wrow, xrow, g);
                        }
                    }
                }
            }
        }
    }
    (dw, db)
}
