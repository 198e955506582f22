//! The MVCNN network: wide multi-size convolution over multichannel input,
//! dynamic k-max pooling, a fully connected sentence representation and a
//! softmax output layer, with a hand-written backward pass.
//!
//! Layer 1 filters span all `d` rows of each input channel, so every feature
//! map above the input is a single row of scalars. Every output map of layer
//! `i−1` feeds every filter of layer `i`.

use rand::Rng;

use crate::embedding::MultichannelTable;
use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::tensor::{Parameter, ParameterSet, RealArray};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub filter_sizes: Vec<usize>,
    pub kernels_per_size: usize,
    pub k_top: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub dropout_keep_prob: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            dim: 50,
            layers: 2,
            filter_sizes: vec![3, 5, 7, 9],
            kernels_per_size: 5,
            k_top: 4,
            hidden_dim: 50,
            num_classes: 2,
            dropout_keep_prob: 0.8,
        }
    }
}

impl NetworkConfig {
    /// Lists every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.channels == 0 {
            p.push("channels must be >= 1".to_string());
        }
        if self.dim == 0 {
            p.push("dim must be >= 1".to_string());
        }
        if self.layers == 0 {
            p.push("layers must be >= 1".to_string());
        }
        if self.filter_sizes.is_empty() {
            p.push("filter_sizes must not be empty".to_string());
        }
        if self.filter_sizes.contains(&0) {
            p.push("filter sizes must be >= 1".to_string());
        }
        if self.filter_sizes.windows(2).any(|w| w[0] >= w[1]) {
            p.push("filter_sizes must be strictly increasing".to_string());
        }
        if self.kernels_per_size == 0 {
            p.push("kernels_per_size must be >= 1".to_string());
        }
        if self.k_top == 0 {
            p.push("k_top must be >= 1".to_string());
        }
        if self.hidden_dim == 0 {
            p.push("hidden_dim must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            p.push("num_classes must be >= 2".to_string());
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            p.push(format!(
                "dropout_keep_prob must be in (0, 1], got {}",
                self.dropout_keep_prob
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }

    /// Feature maps produced by each convolution layer.
    pub fn maps_per_layer(&self) -> usize {
        self.filter_sizes.len() * self.kernels_per_size
    }

    /// Length of the flattened top-layer output.
    pub fn flat_len(&self) -> usize {
        self.maps_per_layer() * self.k_top
    }
}

/// `k_i = max(k_top, ⌈(L − i)/L · s⌉)` for layer `i` in `1..=L`.
pub fn dynamic_k(layer: usize, layers: usize, sentence_len: usize, k_top: usize) -> usize {
    debug_assert!(layer >= 1 && layer <= layers);
    let num = (layers - layer) * sentence_len;
    let ceil = num.div_ceil(layers);
    k_top.max(ceil)
}

/// Accumulates the wide convolution of one `rows × m` map with one `rows × l`
/// filter into `out` (length `m + l − 1`). Output position `p` sees input
/// columns `p−l+1 ..= p`; columns outside `0..m` are zero.
fn wide_conv_acc(x: &[f64], w: &[f64], rows: usize, m: usize, l: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m + l - 1);
    for r in 0..rows {
        let xr = &x[r * m..(r + 1) * m];
        let wr = &w[r * l..(r + 1) * l];
        for (t, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let base = t + l - 1;
            for (o, &wv) in wr.iter().enumerate() {
                out[base - o] += wv * xv;
            }
        }
    }
}

/// Backward of [`wide_conv_acc`]: accumulates filter and input gradients.
#[allow(clippy::too_many_arguments)]
fn wide_conv_backward(
    x: &[f64],
    w: &[f64],
    rows: usize,
    m: usize,
    l: usize,
    d_out: &[f64],
    d_w: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let xr = &x[r * m..(r + 1) * m];
        let dwr = &mut d_w[r * l..(r + 1) * l];
        for (t, &xv) in xr.iter().enumerate() {
            let base = t + l - 1;
            for (o, dw) in dwr.iter_mut().enumerate() {
                *dw += d_out[base - o] * xv;
            }
        }
    }
    if let Some(d_x) = d_x {
        for r in 0..rows {
            let wr = &w[r * l..(r + 1) * l];
            let dxr = &mut d_x[r * m..(r + 1) * m];
            for (t, dx) in dxr.iter_mut().enumerate() {
                let base = t + l - 1;
                *dx += wr
                    .iter()
                    .enumerate()
                    .map(|(o, &wv)| d_out[base - o] * wv)
                    .sum::<f64>();
            }
        }
    }
}

/// Wide convolution of a `rows × s` map with a `rows × l` filter; the result
/// has length `s + l − 1`. No activation is applied.
pub fn wide_conv(map: &RealArray, filter: &RealArray) -> Result<RealArray> {
    let (rows, m) = rank2(map, "map")?;
    let (frows, l) = rank2(filter, "filter")?;
    if rows != frows {
        return Err(Error::Shape(format!(
            "filter has {frows} rows, map has {rows}"
        )));
    }
    let mut out = vec![0.0; m + l - 1];
    wide_conv_acc(map.as_slice(), filter.as_slice(), rows, m, l, &mut out);
    Ok(RealArray::vector(out))
}

fn rank2(a: &RealArray, what: &str) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::Shape(format!("{what} must be rank 1 or 2, got {s:?}"))),
    }
}

/// Row-wise k-max pooling: the `k` largest values of each row in their
/// original order, earliest position winning ties. Rows shorter than `k`
/// are kept whole and right-padded with zeros.
pub fn kmax_pool(map: &RealArray, k: usize) -> Result<RealArray> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let (rows, m) = rank2(map, "map")?;
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let row = &map.as_slice()[r * m..(r + 1) * m];
        let (vals, _) = kmax_row(row, k);
        out.extend(vals);
    }
    RealArray::new(vec![rows, k], out)
}

/// Returns the pooled row and, per output slot, the source position
/// (`None` for zero padding).
pub(crate) fn kmax_row(row: &[f64], k: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if row.len() > k {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.sort_unstable();
    }
    let mut vals: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
    let mut src: Vec<Option<usize>> = idx.into_iter().map(Some).collect();
    vals.resize(k, 0.0);
    src.resize(k, None);
    (vals, src)
}

/// The feature maps at one layer; layer 0 is the multichannel input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub maps: Vec<RealArray>,
    pub layer_index: usize,
}

/// Convolution weights of one layer. For each filter size `l` the weights
/// form a `kernels × inputs × rows × l` tensor, plus one bias per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub sizes: Vec<usize>,
    pub kernels: usize,
    pub inputs: usize,
    pub rows: usize,
    pub weights: Vec<Parameter>,
    pub biases: Vec<Parameter>,
}

impl FilterBank {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        kernels: usize,
        inputs: usize,
        rows: usize,
        rng: &mut R,
    ) -> Self {
        let mut weights = Vec::with_capacity(sizes.len());
        let mut biases = Vec::with_capacity(sizes.len());
        for &l in sizes {
            let fan_in = (inputs * rows * l) as f64;
            let fan_out = (kernels * rows * l) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let mut w = RealArray::zeros(&[kernels, inputs, rows, l]);
            for x in w.as_mut_slice() {
                *x = rng.random_range(-bound..=bound);
            }
            weights.push(Parameter::new(w));
            biases.push(Parameter::zeros(&[kernels]));
        }
        Self {
            sizes: sizes.to_vec(),
            kernels,
            inputs,
            rows,
            weights,
            biases,
        }
    }

    pub fn output_maps(&self) -> usize {
        self.sizes.len() * self.kernels
    }

    pub fn weight_count(&self) -> usize {
        self.sizes.len() * self.kernels * self.inputs
    }

    /// The `rows × l` slice connecting input map `input` to kernel `kernel`
    /// of size index `size`.
    pub fn slice(&self, size: usize, kernel: usize, input: usize) -> &[f64] {
        let l = self.sizes[size];
        let len = self.rows * l;
        let start = (kernel * self.inputs + input) * len;
        &self.weights[size].value.as_slice()[start..start + len]
    }

    fn check_input(&self, maps: &[&[f64]], rows: usize) -> Result<()> {
        if maps.len() != self.inputs || rows != self.rows {
            return Err(Error::Shape(format!(
                "bank expects {} maps of {} rows, got {} maps of {rows} rows",
                self.inputs,
                self.rows,
                maps.len()
            )));
        }
        Ok(())
    }

    /// Pre-activation sums `Σ_k V^{j,k} * F_k + b_j` for every output map,
    /// ordered size-major then kernel.
    fn pre_activations(&self, maps: &[&[f64]], rows: usize, m: usize) -> Result<Vec<Vec<f64>>> {
        self.check_input(maps, rows)?;
        let mut out = Vec::with_capacity(self.output_maps());
        for (si, &l) in self.sizes.iter().enumerate() {
            let bias = self.biases[si].value.as_slice();
            for j in 0..self.kernels {
                let mut acc = vec![bias[j]; m + l - 1];
                for (k, x) in maps.iter().enumerate() {
                    wide_conv_acc(x, self.slice(si, j, k), rows, m, l, &mut acc);
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Backward through `tanh(pre)`: `d_act` is the gradient at the
    /// activations. Accumulates weight and bias gradients and, if requested,
    /// returns input-map gradients.
    fn backward(
        &mut self,
        maps: &[&[f64]],
        rows: usize,
        m: usize,
        acts: &[Vec<f64>],
        d_act: &[Vec<f64>],
        want_input_grad: bool,
    ) -> Vec<Vec<f64>> {
        let mut d_in: Vec<Vec<f64>> = if want_input_grad {
            vec![vec![0.0; rows * m]; self.inputs]
        } else {
            Vec::new()
        };
        let mut out_idx = 0;
        for si in 0..self.sizes.len() {
            let l = self.sizes[si];
            let slice_len = rows * l;
            for j in 0..self.kernels {
                let act = &acts[out_idx];
                let d_pre: Vec<f64> = act
                    .iter()
                    .zip(&d_act[out_idx])
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect();
                out_idx += 1;
                if d_pre.iter().all(|&g| g == 0.0) {
                    continue;
                }
                self.biases[si].grad.as_mut_slice()[j] += d_pre.iter().sum::<f64>();
                for (k, x) in maps.iter().enumerate() {
                    let start = (j * self.inputs + k) * slice_len;
                    let Parameter { value, grad, .. } = &mut self.weights[si];
                    let w = &value.as_slice()[start..start + slice_len];
                    let d_w = &mut grad.as_mut_slice()[start..start + slice_len];
                    let d_x = if want_input_grad {
                        Some(d_in[k].as_mut_slice())
                    } else {
                        None
                    };
                    wide_conv_backward(x, w, rows, m, l, &d_pre, d_w, d_x);
                }
            }
        }
        d_in
    }
}

impl ParameterSet for FilterBank {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for (si, l) in self.sizes.iter().enumerate() {
            f(&format!("w{l}"), &self.weights[si]);
            f(&format!("b{l}"), &self.biases[si]);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (si, l) in self.sizes.iter().enumerate() {
            f(&format!("w{l}"), &mut self.weights[si]);
            f(&format!("b{l}"), &mut self.biases[si]);
        }
    }
}

/// One convolution layer: for every filter size and kernel,
/// `tanh(Σ_k wide_conv(F_k, V^{j,k}) + b)`. Maps from size `l` have length
/// `m + l − 1`; all input maps must share one shape.
pub fn conv_layer_forward(stack: &FeatureMapStack, bank: &FilterBank) -> Result<FeatureMapStack> {
    let first = stack
        .maps
        .first()
        .ok_or_else(|| Error::Shape("empty feature map stack".into()))?;
    let (rows, m) = rank2(first, "map")?;
    if stack.maps.iter().any(|x| x.shape() != first.shape()) {
        return Err(Error::Shape("maps in a stack must share extents".into()));
    }
    let maps: Vec<&[f64]> = stack.maps.iter().map(|x| x.as_slice()).collect();
    let pre = bank.pre_activations(&maps, rows, m)?;
    let maps = pre
        .into_iter()
        .map(|p| {
            let n = p.len();
            RealArray::new(vec![1, n], p.into_iter().map(f64::tanh).collect())
        })
        .collect::<Result<_>>()?;
    Ok(FeatureMapStack {
        maps,
        layer_index: stack.layer_index + 1,
    })
}

/// A fully connected layer `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut w = RealArray::zeros(&[outputs, inputs]);
        for x in w.as_mut_slice() {
            *x = rng.random_range(-bound..=bound);
        }
        Self {
            weight: Parameter::new(w),
            bias: Parameter::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.value.as_slice().to_vec();
        ops::affine_into(
            self.weight.value.as_slice(),
            x,
            self.outputs(),
            self.inputs(),
            &mut out,
        );
        out
    }

    pub fn backward(&mut self, x: &[f64], d_out: &[f64]) -> Vec<f64> {
        let (m, n) = (self.outputs(), self.inputs());
        let mut d_x = vec![0.0; n];
        for (g, d) in self.bias.grad.as_mut_slice().iter_mut().zip(d_out) {
            *g += d;
        }
        ops::affine_backward_into(
            self.weight.value.as_slice(),
            x,
            d_out,
            m,
            n,
            self.weight.grad.as_mut_slice(),
            &mut d_x,
        );
        d_x
    }
}

/// What one convolution layer recorded during the forward pass.
#[derive(Debug, Clone)]
struct LayerTrace {
    /// Input maps, each `rows × len`.
    inputs: Vec<Vec<f64>>,
    rows: usize,
    len: usize,
    /// Post-tanh activations per output map (before pooling).
    acts: Vec<Vec<f64>>,
    /// Source position of each pooled slot per output map.
    selected: Vec<Vec<Option<usize>>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tokens: Vec<usize>,
    layers: Vec<LayerTrace>,
    flat: Vec<f64>,
    /// Sentence representation (hidden layer output, before dropout).
    pub hidden: Vec<f64>,
    dropout: Vec<f64>,
    dropped: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Pooling width used at each layer.
    pub pooled_k: Vec<usize>,
    /// Length of every feature map at each layer before pooling.
    pub conv_lengths: Vec<Vec<usize>>,
}

impl ForwardTrace {
    pub fn sentence_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn flattened(&self) -> &[f64] {
        &self.flat
    }
}

/// The full model: input table, one filter bank per layer, the hidden layer
/// and the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mvcnn {
    pub config: NetworkConfig,
    pub table: MultichannelTable,
    pub banks: Vec<FilterBank>,
    pub hidden: Dense,
    pub output: Dense,
}

impl Mvcnn {
    pub fn new<R: Rng + ?Sized>(
        config: NetworkConfig,
        table: MultichannelTable,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if table.num_channels() != config.channels || table.dim() != config.dim {
            return Err(Error::Shape(format!(
                "table has {} channels of dim {}, config wants {} of dim {}",
                table.num_channels(),
                table.dim(),
                config.channels,
                config.dim
            )));
        }
        let maps = config.maps_per_layer();
        let banks = (0..config.layers)
            .map(|i| {
                let (inputs, rows) = if i == 0 {
                    (config.channels, config.dim)
                } else {
                    (maps, 1)
                };
                FilterBank::new(&config.filter_sizes, config.kernels_per_size, inputs, rows, rng)
            })
            .collect();
        let hidden = Dense::new(config.flat_len(), config.hidden_dim, rng);
        let output = Dense::new(config.hidden_dim, config.num_classes, rng);
        Ok(Self {
            config,
            table,
            banks,
            hidden,
            output,
        })
    }

    /// Replaces the output layer with a fresh one for `num_classes` classes.
    pub fn reset_output<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        self.config.num_classes = num_classes;
        self.output = Dense::new(self.config.hidden_dim, num_classes, rng);
    }

    /// Layer-0 stack: one `d × s` map per channel.
    pub fn input_stack(&self, tokens: &[usize]) -> Result<FeatureMapStack> {
        let maps = self
            .input_maps(tokens)?
            .into_iter()
            .map(|m| RealArray::new(vec![self.config.dim, tokens.len()], m))
            .collect::<Result<_>>()?;
        Ok(FeatureMapStack { maps, layer_index: 0 })
    }

    fn input_maps(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence has no tokens".into()));
        }
        let vocab = self.table.vocab.len();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let (d, s) = (self.config.dim, tokens.len());
        Ok((0..self.config.channels)
            .map(|c| {
                let mut m = vec![0.0; d * s];
                for (t, &id) in tokens.iter().enumerate() {
                    for (r, &v) in self.table.row(c, id).iter().enumerate() {
                        m[r * s + t] = v;
                    }
                }
                m
            })
            .collect())
    }

    /// Forward pass through the hidden layer. No dropout is applied and the
    /// output layer is not evaluated.
    pub fn forward_hidden(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let s = tokens.len();
        let mut maps = self.input_maps(tokens)?;
        let mut rows = cfg.dim;
        let mut len = s;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut pooled_k = Vec::with_capacity(cfg.layers);
        let mut conv_lengths = Vec::with_capacity(cfg.layers);
        for (i, bank) in self.banks.iter().enumerate() {
            let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
            let pre = bank.pre_activations(&refs, rows, len)?;
            let acts: Vec<Vec<f64>> = pre
                .into_iter()
                .map(|p| p.into_iter().map(f64::tanh).collect())
                .collect();
            let k = dynamic_k(i + 1, cfg.layers, s, cfg.k_top);
            let mut pooled = Vec::with_capacity(acts.len());
            let mut selected = Vec::with_capacity(acts.len());
            for a in &acts {
                let (vals, src) = kmax_row(a, k);
                pooled.push(vals);
                selected.push(src);
            }
            conv_lengths.push(acts.iter().map(Vec::len).collect());
            pooled_k.push(k);
            layers.push(LayerTrace {
                inputs: std::mem::replace(&mut maps, pooled),
                rows,
                len,
                acts,
                selected,
            });
            rows = 1;
            len = k;
        }
        debug_assert_eq!(len, cfg.k_top);
        let flat: Vec<f64> = maps.concat();
        let hidden: Vec<f64> = self.hidden.forward(&flat).into_iter().map(f64::tanh).collect();
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers,
            flat,
            hidden,
            dropout: Vec::new(),
            dropped: Vec::new(),
            logits: Vec::new(),
            probs: Vec::new(),
            pooled_k,
            conv_lengths,
        })
    }

    /// Full forward pass. In [`Mode::Train`] an inverted-dropout mask drawn
    /// from `rng` is applied to the sentence representation.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tokens: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let mut trace = self.forward_hidden(tokens)?;
        let mask = ops::dropout_mask(
            &[self.config.hidden_dim],
            self.config.dropout_keep_prob,
            mode,
            rng,
        )?
        .into_vec();
        trace.dropped = trace.hidden.iter().zip(&mask).map(|(h, m)| h * m).collect();
        trace.dropout = mask;
        trace.logits = self.output.forward(&trace.dropped);
        trace.probs = ops::softmax(&trace.logits);
        Ok(trace)
    }

    /// Class probabilities with dropout disabled.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut trace = self.forward_hidden(tokens)?;
        trace.logits = self.output.forward(&trace.hidden);
        Ok(ops::softmax(&trace.logits))
    }

    /// Backpropagates a gradient at the logits through the whole network,
    /// accumulating into every parameter's gradient.
    pub fn backward_logits(&mut self, trace: &ForwardTrace, d_logits: &[f64]) -> Result<()> {
        if trace.logits.is_empty() {
            return Err(Error::InvalidArgument(
                "trace has no output layer; use backward_hidden".into(),
            ));
        }
        if d_logits.len() != self.output.outputs() {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, model has {} classes",
                d_logits.len(),
                self.output.outputs()
            )));
        }
        let d_dropped = self.output.backward(&trace.dropped, d_logits);
        let d_hidden: Vec<f64> = d_dropped
            .iter()
            .zip(&trace.dropout)
            .map(|(g, m)| g * m)
            .collect();
        self.backward_hidden(trace, &d_hidden)
    }

    /// Backpropagates a gradient at the sentence representation down to the
    /// input table.
    pub fn backward_hidden(&mut self, trace: &ForwardTrace, d_hidden: &[f64]) -> Result<()> {
        if d_hidden.len() != trace.hidden.len() {
            return Err(Error::Shape(format!(
                "hidden gradient has {} entries, expected {}",
                d_hidden.len(),
                trace.hidden.len()
            )));
        }
        let d_pre: Vec<f64> = trace
            .hidden
            .iter()
            .zip(d_hidden)
            .map(|(h, g)| g * (1.0 - h * h))
            .collect();
        let d_flat = self.hidden.backward(&trace.flat, &d_pre);
        let k_top = self.config.k_top;
        let mut d_pooled: Vec<Vec<f64>> = d_flat.chunks(k_top).map(<[f64]>::to_vec).collect();

        for (bank, layer) in self.banks.iter_mut().zip(&trace.layers).rev() {
            let mut d_act: Vec<Vec<f64>> = layer.acts.iter().map(|a| vec![0.0; a.len()]).collect();
            for ((da, sel), dp) in d_act.iter_mut().zip(&layer.selected).zip(&d_pooled) {
                for (src, g) in sel.iter().zip(dp) {
                    if let Some(p) = src {
                        da[*p] += g;
                    }
                }
            }
            let refs: Vec<&[f64]> = layer.inputs.iter().map(Vec::as_slice).collect();
            d_pooled = bank.backward(&refs, layer.rows, layer.len, &layer.acts, &d_act, true);
        }

        // d_pooled now holds gradients of the c input maps (d × s each).
        let (d, s) = (self.config.dim, trace.tokens.len());
        for (c, dm) in d_pooled.iter().enumerate() {
            let grad = &mut self.table.channels[c].grad;
            for (t, &id) in trace.tokens.iter().enumerate() {
                let row = grad.row_mut(id);
                for r in 0..d {
                    row[r] += dm[r * s + t];
                }
            }
        }
        self.table.mask_padding_grad();
        Ok(())
    }

    /// Forward in `mode`, cross-entropy against `label`, and backward with the
    /// loss scaled by `scale`. Returns the unscaled loss.
    pub fn loss_and_backward<R: Rng + ?Sized>(
        &mut self,
        tokens: &[usize],
        label: usize,
        mode: Mode,
        scale: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let trace = self.forward(tokens, mode, rng)?;
        let ce = ops::softmax_cross_entropy(&RealArray::vector(trace.logits.clone()), label)?;
        let d_logits: Vec<f64> = ce.logit_grad().as_slice().iter().map(|g| g * scale).collect();
        self.backward_logits(&trace, &d_logits)?;
        Ok(ce.loss)
    }

    /// Adds the L2 penalty gradient to the weight tensors (and embeddings when
    /// requested) and returns the penalty. Biases are not penalized.
    pub fn regularize(&mut self, lambda: f64, include_embeddings: bool) -> Result<f64> {
        let mut params: Vec<&mut Parameter> = Vec::new();
        if include_embeddings {
            params.extend(self.table.channels.iter_mut());
        }
        for bank in &mut self.banks {
            params.extend(bank.weights.iter_mut());
        }
        params.push(&mut self.hidden.weight);
        params.push(&mut self.output.weight);
        let term = ops::l2_regularize(params, lambda)?;
        self.table.mask_padding_grad();
        Ok(term)
    }
}

impl ParameterSet for Mvcnn {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.table.visit_params(f);
        for (i, bank) in self.banks.iter().enumerate() {
            bank.visit_params(&mut |name, p| f(&format!("conv{}.{name}", i + 1), p));
        }
        f("hidden.weight", &self.hidden.weight);
        f("hidden.bias", &self.hidden.bias);
        f("output.weight", &self.output.weight);
        f("output.bias", &self.output.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.table.visit_params_mut(f);
        for (i, bank) in self.banks.iter_mut().enumerate() {
            bank.visit_params_mut(&mut |name, p| f(&format!("conv{}.{name}", i + 1), p));
        }
        f("hidden.weight", &mut self.hidden.weight);
        f("hidden.bias", &mut self.hidden.bias);
        f("output.weight", &mut self.output.weight);
        f("output.bias", &mut self.output.bias);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::vocab::Vocabulary;

    fn arr(rows: usize, cols: usize, data: &[f64]) -> RealArray {
        RealArray::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn wide_conv_examples() {
        let out = wide_conv(&arr(1, 2, &[1.0, 2.0]), &arr(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0, 2.0]);
        let out = wide_conv(&arr(1, 3, &[1.0, 2.0, 3.0]), &arr(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 4]);
        let out = wide_conv(&arr(1, 3, &[4.0, -1.0, 2.0]), &arr(1, 1, &[1.0])).unwrap();
        assert_eq!(out.as_slice(), &[4.0, -1.0, 2.0]);
        assert!(wide_conv(&arr(2, 3, &[0.0; 6]), &arr(1, 2, &[0.0; 2])).is_err());
    }

    #[test]
    fn dynamic_k_examples() {
        assert_eq!(dynamic_k(1, 2, 12, 4), 6);
        assert_eq!(dynamic_k(2, 2, 12, 4), 4);
        assert_eq!(dynamic_k(1, 3, 7, 4), 5);
        assert_eq!(dynamic_k(3, 3, 100, 4), 4);
    }

    #[test]
    fn kmax_examples() {
        let p = kmax_pool(&arr(1, 5, &[3.0, 1.0, 4.0, 1.0, 5.0]), 3).unwrap();
        assert_eq!(p.as_slice(), &[3.0, 4.0, 5.0]);
        let p = kmax_pool(&arr(1, 2, &[7.0, -1.0]), 4).unwrap();
        assert_eq!(p.as_slice(), &[7.0, -1.0, 0.0, 0.0]);
        let (vals, src) = kmax_row(&[2.0, 2.0, 2.0, 1.0], 2);
        assert_eq!(vals, [2.0, 2.0]);
        assert_eq!(src, [Some(0), Some(1)]);
        assert!(kmax_pool(&arr(1, 2, &[1.0, 2.0]), 0).is_err());
    }

    fn bank_with(sizes: &[usize], kernels: usize, inputs: usize, rows: usize, fill: f64) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = FilterBank::new(sizes, kernels, inputs, rows, &mut rng);
        for w in &mut b.weights {
            w.value.fill(fill);
        }
        b
    }

    #[test]
    fn conv_layer_column_sums() {
        // n=1, l=1, weights all one: tanh of each column sum
        let bank = bank_with(&[1], 1, 1, 2, 1.0);
        let stack = FeatureMapStack {
            maps: vec![arr(2, 2, &[0.1, 0.2, 0.3, -0.4])],
            layer_index: 0,
        };
        let out = conv_layer_forward(&stack, &bank).unwrap();
        assert_eq!(out.layer_index, 1);
        let got = out.maps[0].as_slice();
        assert!((got[0] - 0.4f64.tanh()).abs() < 1e-15);
        assert!((got[1] - (-0.2f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn conv_layer_zero_weights() {
        let bank = bank_with(&[2, 3], 2, 1, 3, 0.0);
        let stack = FeatureMapStack {
            maps: vec![arr(3, 4, &[0.5; 12])],
            layer_index: 0,
        };
        let out = conv_layer_forward(&stack, &bank).unwrap();
        assert_eq!(out.maps.len(), 4);
        assert_eq!(out.maps[0].len(), 5);
        assert_eq!(out.maps[3].len(), 6);
        assert!(out.maps.iter().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn conv_layer_sum_over_identical_inputs() {
        let map = arr(2, 3, &[0.1, -0.3, 0.2, 0.4, 0.0, -0.1]);
        let mut one = bank_with(&[2], 1, 1, 2, 0.0);
        one.weights[0].value = RealArray::new(vec![1, 1, 2, 2], vec![0.2, -0.4, 0.6, 0.8]).unwrap();
        let mut two = bank_with(&[2], 1, 2, 2, 0.0);
        two.weights[0].value = RealArray::new(
            vec![1, 2, 2, 2],
            vec![0.1, -0.2, 0.3, 0.4, 0.1, -0.2, 0.3, 0.4],
        )
        .unwrap();
        let a = conv_layer_forward(&FeatureMapStack { maps: vec![map.clone()], layer_index: 0 }, &one).unwrap();
        let b = conv_layer_forward(&FeatureMapStack { maps: vec![map.clone(), map], layer_index: 0 }, &two).unwrap();
        for (x, y) in a.maps[0].as_slice().iter().zip(b.maps[0].as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn toy_model(cfg: NetworkConfig, vocab_words: usize, seed: u64) -> Mvcnn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::from_words((0..vocab_words).map(|i| format!("w{i}")));
        let table = MultichannelTable::random(vocab, cfg.channels, cfg.dim, 0.5, &mut rng).unwrap();
        Mvcnn::new(cfg, table, &mut rng).unwrap()
    }

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            channels: 2,
            dim: 3,
            layers: 2,
            filter_sizes: vec![3, 5],
            kernels_per_size: 2,
            k_top: 4,
            hidden_dim: 3,
            num_classes: 3,
            dropout_keep_prob: 1.0,
        }
    }

    #[test]
    fn single_token_shapes() {
        let m = toy_model(small_cfg(), 6, 1);
        let t = m.forward(&[3], Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.pooled_k, [4, 4]);
        assert_eq!(t.flattened().len(), 2 * 2 * 4);
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.conv_lengths[0], [3, 3, 5, 5]);
        assert_eq!(t.conv_lengths[1], [6, 6, 8, 8]);
    }

    #[test]
    fn rejects_bad_input() {
        let m = toy_model(small_cfg(), 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.forward(&[], Mode::Eval, &mut rng).is_err());
        assert!(m.forward(&[99], Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn absent_words_get_no_gradient() {
        let mut m = toy_model(small_cfg(), 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.loss_and_backward(&[2, 3, 2], 1, Mode::Eval, 1.0, &mut rng).unwrap();
        for c in 0..2 {
            let g = &m.table.channels[c].grad;
            for id in [0, 1, 4, 5, 6, 7] {
                assert!(g.row(id).iter().all(|&x| x == 0.0), "row {id}");
            }
            assert!(g.row(2).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let cfg = NetworkConfig {
            layers: 0,
            filter_sizes: vec![5, 3],
            k_top: 0,
            num_classes: 1,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.problems().len(), 4);
        assert!(NetworkConfig::default().validate().is_ok());
    }
}
