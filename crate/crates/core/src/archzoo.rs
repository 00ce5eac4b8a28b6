//! Linearized architectures as parametrizations `W ↦ A_W` of the coefficient
//! space, with analytic Jacobians.
//!
//! Coefficient vectors are laid out lag-major: the `d` input components of
//! lag 1 first, then lag 2, and so on. A layer stack is evaluated by composing
//! per-layer linear operators on a "response" (for every delay, a matrix from
//! input channels to the current layer's channels). Delay `δ` corresponds to
//! lag `δ + 1`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

/// One layer of a linear stack. Weights are never shared across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    DilatedConv {
        kernel_size: usize,
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Per-channel geometric recursion `h_t = r ⊙ h_{t-1} + x_t`, truncated
    /// at the stack's receptive field.
    RecurrentDiag { channels: usize },
    Pointwise {
        in_channels: usize,
        out_channels: usize,
    },
}

impl LayerSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            LayerSpec::DilatedConv { in_channels, .. } | LayerSpec::Pointwise { in_channels, .. } => {
                in_channels
            }
            LayerSpec::RecurrentDiag { channels } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerSpec::DilatedConv { out_channels, .. }
            | LayerSpec::Pointwise { out_channels, .. } => out_channels,
            LayerSpec::RecurrentDiag { channels } => channels,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::DilatedConv {
                kernel_size,
                in_channels,
                out_channels,
                ..
            } => kernel_size * in_channels * out_channels,
            LayerSpec::Pointwise {
                in_channels,
                out_channels,
            } => in_channels * out_channels,
            LayerSpec::RecurrentDiag { channels } => channels,
        }
    }

    /// Extra delay span contributed by the layer, `None` for recurrent layers.
    fn span(&self) -> Option<usize> {
        match *self {
            LayerSpec::DilatedConv {
                kernel_size,
                dilation,
                ..
            } => Some(dilation * (kernel_size - 1)),
            LayerSpec::Pointwise { .. } => Some(0),
            LayerSpec::RecurrentDiag { .. } => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::DilatedConv {
                kernel_size,
                in_channels,
                ..
            } => kernel_size * in_channels,
            LayerSpec::Pointwise { in_channels, .. } => in_channels,
            LayerSpec::RecurrentDiag { .. } => 1,
        }
    }
}

/// Dilation schedule for hierarchical stacks built from a base depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DilationPattern {
    /// `d_l = kernel^(l-1)` for `l = 1..=depth`.
    #[default]
    Exponential,
    /// The exponential block repeated `blocks` times: `{1,2,…,1,2,…}`.
    Tiled { blocks: usize },
    /// Every exponential dilation repeated `blocks` times: `{1,1,2,2,…}`.
    Repeated { blocks: usize },
}

impl DilationPattern {
    pub fn dilations(&self, depth: usize, kernel: usize) -> Vec<usize> {
        let base: Vec<usize> = (0..depth).map(|l| kernel.pow(l as u32)).collect();
        match *self {
            DilationPattern::Exponential => base,
            DilationPattern::Tiled { blocks } => {
                (0..blocks).flat_map(|_| base.iter().copied()).collect()
            }
            DilationPattern::Repeated { blocks } => base
                .iter()
                .flat_map(|&d| std::iter::repeat_n(d, blocks))
                .collect(),
        }
    }
}

/// A parametrized family of linear models `A_W ∈ R^{n·d}`.
pub trait Manifold: Send + Sync {
    fn param_count(&self) -> usize;
    fn receptive_field(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn coefficient_len(&self) -> usize {
        self.receptive_field() * self.input_dim()
    }

    fn coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>, ArchError>;

    /// `∂A/∂W`, shape `(n·d) × p`.
    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, ArchError>;

    /// Vector-Jacobian product `(∂A/∂W)ᵀ v`.
    fn vjp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        check_len(v.len(), self.coefficient_len())?;
        Ok(self.jacobian(w)?.tr_mul(v))
    }

    /// Random initial parameters.
    fn init_params(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Parameter indices grouped by layer, in forward order.
    fn layer_blocks(&self) -> Vec<Vec<usize>> {
        (0..self.param_count()).map(|j| vec![j]).collect()
    }
}

fn check_len(got: usize, expected: usize) -> Result<(), ArchError> {
    if got == expected {
        Ok(())
    } else {
        Err(ArchError::ShapeMismatch { expected, got })
    }
}

/// Dense per-delay response: `data[(δ·rows + r)·cols + c]`.
#[derive(Clone)]
struct Response {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Response {
    fn zeros(n: usize, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; n * rows * cols],
        }
    }

    fn identity(n: usize, dim: usize) -> Self {
        let mut r = Self::zeros(n, dim, dim);
        for a in 0..dim {
            *r.at_mut(0, a, a) = 1.0;
        }
        r
    }

    #[inline]
    fn at(&self, delay: usize, r: usize, c: usize) -> f64 {
        self.data[(delay * self.rows + r) * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, delay: usize, r: usize, c: usize) -> &mut f64 {
        &mut self.data[(delay * self.rows + r) * self.cols + c]
    }
}

/// A stack of linear layers: the parametrization behind hierarchical,
/// recurrent and fully connected models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifold {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    receptive_field: usize,
    offsets: Vec<usize>,
    param_count: usize,
}

impl ModelManifold {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_dim: usize,
        receptive_field: usize,
    ) -> Result<Self, ArchError> {
        let bad = |msg: String| Err(ArchError::InvalidArchitecture(msg));
        if layers.is_empty() {
            return bad("stack has no layers".into());
        }
        if input_dim == 0 || receptive_field == 0 {
            return bad("input_dim and receptive_field must be positive".into());
        }
        let mut channels = input_dim;
        let mut span = 0;
        let mut recurrent = false;
        for (l, layer) in layers.iter().enumerate() {
            if let LayerSpec::DilatedConv {
                kernel_size,
                dilation,
                ..
            } = *layer
            {
                if kernel_size == 0 || dilation == 0 {
                    return bad(format!("layer {l}: kernel_size and dilation must be >= 1"));
                }
            }
            if layer.in_channels() == 0 || layer.out_channels() == 0 {
                return bad(format!("layer {l}: channels must be >= 1"));
            }
            if layer.in_channels() != channels {
                return bad(format!(
                    "layer {l}: expects {} input channels, previous layer provides {channels}",
                    layer.in_channels()
                ));
            }
            channels = layer.out_channels();
            match layer.span() {
                Some(s) => span += s,
                None => recurrent = true,
            }
        }
        if channels != 1 {
            return bad(format!("last layer must output 1 channel, got {channels}"));
        }
        let computed = span + 1;
        if !recurrent && computed != receptive_field {
            return bad(format!(
                "declared receptive field {receptive_field} but layers span {computed}"
            ));
        }
        if recurrent && computed > receptive_field {
            return bad(format!(
                "declared receptive field {receptive_field} below the feed-forward span {computed}"
            ));
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        for layer in &layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        offsets.push(acc);
        Ok(Self {
            layers,
            input_dim,
            receptive_field,
            offsets,
            param_count: acc,
        })
    }

    /// Dilated stack with `c` channels in every hidden layer. The receptive
    /// field is `1 + Σ_l d_l (kernel − 1)`.
    pub fn hierarchical(
        depth: usize,
        kernel: usize,
        channels: usize,
        input_dim: usize,
        pattern: DilationPattern,
    ) -> Result<Self, ArchError> {
        let dilations = pattern.dilations(depth, kernel);
        Self::dilated_stack(&dilations, kernel, channels, input_dim)
    }

    pub fn dilated_stack(
        dilations: &[usize],
        kernel: usize,
        channels: usize,
        input_dim: usize,
    ) -> Result<Self, ArchError> {
        let depth = dilations.len();
        let layers: Vec<LayerSpec> = dilations
            .iter()
            .enumerate()
            .map(|(l, &dilation)| LayerSpec::DilatedConv {
                kernel_size: kernel,
                dilation,
                in_channels: if l == 0 { input_dim } else { channels },
                out_channels: if l + 1 == depth { 1 } else { channels },
            })
            .collect();
        let n = 1 + dilations.iter().map(|d| d * kernel.saturating_sub(1)).sum::<usize>();
        Self::new(layers, input_dim, n)
    }

    /// `pointwise(d→c) → recurrent_diag(c) → pointwise(c→1)`.
    pub fn recurrent(channels: usize, receptive_field: usize, input_dim: usize) -> Result<Self, ArchError> {
        Self::new(
            vec![
                LayerSpec::Pointwise {
                    in_channels: input_dim,
                    out_channels: channels,
                },
                LayerSpec::RecurrentDiag { channels },
                LayerSpec::Pointwise {
                    in_channels: channels,
                    out_channels: 1,
                },
            ],
            input_dim,
            receptive_field,
        )
    }

    /// One free coefficient per input: a single undilated kernel spanning the
    /// receptive field. Its Jacobian is the identity.
    pub fn fully_connected(receptive_field: usize, input_dim: usize) -> Result<Self, ArchError> {
        Self::new(
            vec![LayerSpec::DilatedConv {
                kernel_size: receptive_field,
                dilation: 1,
                in_channels: input_dim,
                out_channels: 1,
            }],
            input_dim,
            receptive_field,
        )
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    fn check_params(&self, w: &DVector<f64>) -> Result<(), ArchError> {
        check_len(w.len(), self.param_count)
    }

    /// Applies layer `l` to a response whose columns are the layer inputs.
    fn forward_layer(&self, l: usize, w: &[f64], prev: &Response) -> Response {
        let n = self.receptive_field;
        let layer = self.layers[l];
        let (cin, cout) = (layer.in_channels(), layer.out_channels());
        let mut out = Response::zeros(n, prev.rows, cout);
        match layer {
            LayerSpec::DilatedConv {
                kernel_size,
                dilation,
                ..
            } => {
                for k in 0..kernel_size {
                    let shift = k * dilation;
                    for delay in shift..n {
                        for a in 0..prev.rows {
                            for i in 0..cin {
                                let p = prev.at(delay - shift, a, i);
                                if p == 0.0 {
                                    continue;
                                }
                                let base = (k * cin + i) * cout;
                                for o in 0..cout {
                                    *out.at_mut(delay, a, o) += p * w[base + o];
                                }
                            }
                        }
                    }
                }
            }
            LayerSpec::Pointwise { .. } => {
                for delay in 0..n {
                    for a in 0..prev.rows {
                        for i in 0..cin {
                            let p = prev.at(delay, a, i);
                            for o in 0..cout {
                                *out.at_mut(delay, a, o) += p * w[i * cout + o];
                            }
                        }
                    }
                }
            }
            LayerSpec::RecurrentDiag { .. } => {
                for j in 0..cin {
                    let r = w[j];
                    for a in 0..prev.rows {
                        for delay in 0..n {
                            // h[δ] = Σ_k r^k x[δ − k] computed as a running recursion.
                            let carried = if delay == 0 { 0.0 } else { out.at(delay - 1, a, j) };
                            *out.at_mut(delay, a, j) = prev.at(delay, a, j) + r * carried;
                        }
                    }
                }
            }
        }
        out
    }

    /// Composes layer `l` in front of a suffix response (rows = layer outputs,
    /// cols = 1), producing the suffix seen from the layer inputs.
    fn backward_layer(&self, l: usize, w: &[f64], next: &Response) -> Response {
        let n = self.receptive_field;
        let layer = self.layers[l];
        let (cin, cout) = (layer.in_channels(), layer.out_channels());
        let mut out = Response::zeros(n, cin, 1);
        match layer {
            LayerSpec::DilatedConv {
                kernel_size,
                dilation,
                ..
            } => {
                for k in 0..kernel_size {
                    let shift = k * dilation;
                    for delay in shift..n {
                        for i in 0..cin {
                            let base = (k * cin + i) * cout;
                            let mut acc = 0.0;
                            for o in 0..cout {
                                acc += w[base + o] * next.at(delay - shift, o, 0);
                            }
                            *out.at_mut(delay, i, 0) += acc;
                        }
                    }
                }
            }
            LayerSpec::Pointwise { .. } => {
                for delay in 0..n {
                    for i in 0..cin {
                        let mut acc = 0.0;
                        for o in 0..cout {
                            acc += w[i * cout + o] * next.at(delay, o, 0);
                        }
                        *out.at_mut(delay, i, 0) = acc;
                    }
                }
            }
            LayerSpec::RecurrentDiag { .. } => {
                for j in 0..cin {
                    let r = w[j];
                    for delay in 0..n {
                        let carried = if delay == 0 { 0.0 } else { out.at(delay - 1, j, 0) };
                        *out.at_mut(delay, j, 0) = next.at(delay, j, 0) + r * carried;
                    }
                }
            }
        }
        out
    }

    /// Forward prefixes `P_0..P_L` and backward suffixes `S_0..S_L`, where
    /// `P_l` composes layers `1..=l` and `S_l` composes layers `l+1..=L`.
    fn prefixes_and_suffixes(&self, w: &DVector<f64>) -> (Vec<Response>, Vec<Response>) {
        let n = self.receptive_field;
        let depth = self.layers.len();
        let mut prefixes = Vec::with_capacity(depth + 1);
        prefixes.push(Response::identity(n, self.input_dim));
        for l in 0..depth {
            let next = self.forward_layer(l, &w.as_slice()[self.layer_range(l)], &prefixes[l]);
            prefixes.push(next);
        }
        let mut suffixes = vec![Response::identity(n, 1); depth + 1];
        for l in (0..depth).rev() {
            suffixes[l] = self.backward_layer(l, &w.as_slice()[self.layer_range(l)], &suffixes[l + 1]);
        }
        (prefixes, suffixes)
    }

    fn flatten(&self, resp: &Response) -> DVector<f64> {
        let d = self.input_dim;
        DVector::from_fn(self.receptive_field * d, |r, _| resp.at(r / d, r % d, 0))
    }

    /// `T_{i,o}[e][a] = Σ_{δ1+δ2=e} P[δ1][a,i] S[δ2][o]`, returned per `(i, o)`
    /// as flattened coefficient vectors.
    fn sandwich(&self, prefix: &Response, suffix: &Response, i: usize, o: usize) -> Vec<f64> {
        let n = self.receptive_field;
        let d = self.input_dim;
        let mut t = vec![0.0; n * d];
        for d1 in 0..n {
            for a in 0..d {
                let p = prefix.at(d1, a, i);
                if p == 0.0 {
                    continue;
                }
                for d2 in 0..n - d1 {
                    t[(d1 + d2) * d + a] += p * suffix.at(d2, o, 0);
                }
            }
        }
        t
    }
}

impl Manifold for ModelManifold {
    fn param_count(&self) -> usize {
        self.param_count
    }

    fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        self.check_params(w)?;
        let mut resp = Response::identity(self.receptive_field, self.input_dim);
        for l in 0..self.layers.len() {
            resp = self.forward_layer(l, &w.as_slice()[self.layer_range(l)], &resp);
        }
        Ok(self.flatten(&resp))
    }

    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, ArchError> {
        self.check_params(w)?;
        let n = self.receptive_field;
        let d = self.input_dim;
        let (prefixes, suffixes) = self.prefixes_and_suffixes(w);
        let mut jac = DMatrix::zeros(n * d, self.param_count);
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = &prefixes[l];
            let suffix = &suffixes[l + 1];
            let offset = self.offsets[l];
            let (cin, cout) = (layer.in_channels(), layer.out_channels());
            match *layer {
                LayerSpec::DilatedConv {
                    kernel_size,
                    dilation,
                    ..
                } => {
                    for i in 0..cin {
                        for o in 0..cout {
                            let t = self.sandwich(prefix, suffix, i, o);
                            for k in 0..kernel_size {
                                let col = offset + (k * cin + i) * cout + o;
                                let shift = k * dilation * d;
                                for r in shift..n * d {
                                    jac[(r, col)] = t[r - shift];
                                }
                            }
                        }
                    }
                }
                LayerSpec::Pointwise { .. } => {
                    for i in 0..cin {
                        for o in 0..cout {
                            let t = self.sandwich(prefix, suffix, i, o);
                            let col = offset + i * cout + o;
                            for (r, v) in t.iter().enumerate() {
                                jac[(r, col)] = *v;
                            }
                        }
                    }
                }
                LayerSpec::RecurrentDiag { .. } => {
                    for j in 0..cin {
                        let t = self.sandwich(prefix, suffix, j, j);
                        let r_j = w[offset + j];
                        let col = offset + j;
                        // ∂(r^k)/∂r = k r^(k-1), applied at delay shift k.
                        for k in 1..n {
                            let coef = k as f64 * r_j.powi(k as i32 - 1);
                            if coef == 0.0 {
                                continue;
                            }
                            for r in k * d..n * d {
                                jac[(r, col)] += coef * t[r - k * d];
                            }
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    fn vjp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        self.check_params(w)?;
        check_len(v.len(), self.coefficient_len())?;
        let n = self.receptive_field;
        let d = self.input_dim;
        let (prefixes, suffixes) = self.prefixes_and_suffixes(w);
        let mut grad = DVector::zeros(self.param_count);
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = &prefixes[l];
            let suffix = &suffixes[l + 1];
            let offset = self.offsets[l];
            let (cin, cout) = (layer.in_channels(), layer.out_channels());
            // U[e][i] = Σ_{δ1,a} v[δ1 + e, a] P[δ1][a, i]
            let mut u = vec![0.0; n * cin];
            for e in 0..n {
                for d1 in 0..n - e {
                    for a in 0..d {
                        let g = v[(d1 + e) * d + a];
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..cin {
                            u[e * cin + i] += g * prefix.at(d1, a, i);
                        }
                    }
                }
            }
            // V[s][i][o] = Σ_{δ2} U[s + δ2][i] S[δ2][o]
            let correlate = |shift: usize, i: usize, o: usize| -> f64 {
                (0..n.saturating_sub(shift))
                    .map(|d2| u[(shift + d2) * cin + i] * suffix.at(d2, o, 0))
                    .sum()
            };
            match *layer {
                LayerSpec::DilatedConv {
                    kernel_size,
                    dilation,
                    ..
                } => {
                    for k in 0..kernel_size {
                        for i in 0..cin {
                            for o in 0..cout {
                                grad[offset + (k * cin + i) * cout + o] = correlate(k * dilation, i, o);
                            }
                        }
                    }
                }
                LayerSpec::Pointwise { .. } => {
                    for i in 0..cin {
                        for o in 0..cout {
                            grad[offset + i * cout + o] = correlate(0, i, o);
                        }
                    }
                }
                LayerSpec::RecurrentDiag { .. } => {
                    for j in 0..cin {
                        let r_j = w[offset + j];
                        grad[offset + j] = (1..n)
                            .map(|k| k as f64 * r_j.powi(k as i32 - 1) * correlate(k, j, j))
                            .sum();
                    }
                }
            }
        }
        Ok(grad)
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let mut w = DVector::zeros(self.param_count);
        for (l, layer) in self.layers.iter().enumerate() {
            let range = self.layer_range(l);
            match layer {
                LayerSpec::RecurrentDiag { .. } => {
                    let dist = Uniform::new(-1.0, 1.0).expect("valid range");
                    for j in range {
                        w[j] = dist.sample(rng);
                    }
                }
                _ => {
                    let std = 1.0 / (layer.fan_in() as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for j in range {
                        w[j] = dist.sample(rng);
                    }
                }
            }
        }
        w
    }

    fn layer_blocks(&self) -> Vec<Vec<usize>> {
        (0..self.layers.len()).map(|l| self.layer_range(l).collect()).collect()
    }
}

/// `A = (Π_j w_j) · A₀`: one intrinsic direction reached through `factors`
/// multiplicative parameters. With one factor this is the linear 1-parameter
/// manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledDirection {
    pub direction: DVector<f64>,
    pub factors: usize,
    pub input_dim: usize,
}

impl ScaledDirection {
    pub fn new(direction: DVector<f64>, factors: usize) -> Self {
        Self {
            direction,
            factors,
            input_dim: 1,
        }
    }
}

impl Manifold for ScaledDirection {
    fn param_count(&self) -> usize {
        self.factors
    }

    fn receptive_field(&self) -> usize {
        self.direction.len() / self.input_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        check_len(w.len(), self.factors)?;
        Ok(&self.direction * w.iter().product::<f64>())
    }

    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, ArchError> {
        check_len(w.len(), self.factors)?;
        let mut jac = DMatrix::zeros(self.direction.len(), self.factors);
        for j in 0..self.factors {
            let others: f64 = w.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, v)| v).product();
            jac.set_column(j, &(&self.direction * others));
        }
        Ok(jac)
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let dist = Normal::new(0.0, 1.0).expect("finite std");
        DVector::from_fn(self.factors, |_, _| dist.sample(rng))
    }
}

/// `A = B w` for a fixed basis matrix `B` (columns need not be independent).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearManifold {
    pub basis: DMatrix<f64>,
    pub input_dim: usize,
}

impl LinearManifold {
    pub fn new(basis: DMatrix<f64>) -> Self {
        Self { basis, input_dim: 1 }
    }
}

impl Manifold for LinearManifold {
    fn param_count(&self) -> usize {
        self.basis.ncols()
    }

    fn receptive_field(&self) -> usize {
        self.basis.nrows() / self.input_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        check_len(w.len(), self.basis.ncols())?;
        Ok(&self.basis * w)
    }

    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, ArchError> {
        check_len(w.len(), self.basis.ncols())?;
        Ok(self.basis.clone())
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let std = 1.0 / (self.basis.ncols() as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        DVector::from_fn(self.basis.ncols(), |_, _| dist.sample(rng))
    }
}

/// A manifold with some parameters pinned; the remaining ones are free.
pub struct Frozen<'a> {
    inner: &'a dyn Manifold,
    base: DVector<f64>,
    free: Vec<usize>,
}

impl<'a> Frozen<'a> {
    /// Pins the parameters listed in `frozen` at the given values.
    pub fn new(inner: &'a dyn Manifold, frozen: &[(usize, f64)]) -> Result<Self, ArchError> {
        let p = inner.param_count();
        let mut base = DVector::zeros(p);
        let mut is_frozen = vec![false; p];
        for &(j, v) in frozen {
            if j >= p {
                return Err(ArchError::ShapeMismatch { expected: p, got: j + 1 });
            }
            is_frozen[j] = true;
            base[j] = v;
        }
        let free = (0..p).filter(|&j| !is_frozen[j]).collect();
        Ok(Self { inner, base, free })
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    /// Full parameter vector from the free ones.
    pub fn expand(&self, free: &DVector<f64>) -> DVector<f64> {
        let mut w = self.base.clone();
        for (k, &j) in self.free.iter().enumerate() {
            w[j] = free[k];
        }
        w
    }

    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&j| full[j]))
    }
}

impl Manifold for Frozen<'_> {
    fn param_count(&self) -> usize {
        self.free.len()
    }

    fn receptive_field(&self) -> usize {
        self.inner.receptive_field()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        check_len(w.len(), self.free.len())?;
        self.inner.coefficients(&self.expand(w))
    }

    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, ArchError> {
        check_len(w.len(), self.free.len())?;
        let full = self.inner.jacobian(&self.expand(w))?;
        Ok(full.select_columns(&self.free))
    }

    fn vjp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, ArchError> {
        check_len(w.len(), self.free.len())?;
        let full = self.inner.vjp(&self.expand(w), v)?;
        Ok(self.restrict(&full))
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.restrict(&self.inner.init_params(rng))
    }
}

/// Draws a value uniformly from `±[lo, hi]`, used for freezing parameters at
/// non-degenerate random values.
pub fn random_nonzero(rng: &mut dyn RngCore, lo: f64, hi: f64) -> f64 {
    let mag = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}
