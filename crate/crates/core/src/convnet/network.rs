use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar, View};
use super::ProbVector;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_side_px: usize,
    pub in_channels: usize,
    /// Filters per conv block; every block is conv → ReLU → 2×2/2 average pool.
    pub conv_filters: Vec<usize>,
    pub kernel_px: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub l2_factor: f64,
    pub classes: usize,
    /// Shift/scale inputs by per-channel statistics of the training set.
    pub standardize_inputs: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_side_px: 64,
            in_channels: 1,
            conv_filters: vec![16, 32, 64],
            kernel_px: 3,
            dense_units: 128,
            dropout_rate: 0.25,
            l2_factor: 0.001,
            classes: 4,
            standardize_inputs: true,
        }
    }
}

impl NetConfig {
    /// Smaller variant used for large ensembles on a single workstation.
    pub fn compact(input_side_px: usize) -> Self {
        NetConfig {
            input_side_px,
            conv_filters: vec![8, 16, 32],
            dense_units: 64,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() {
            return Err(Error::invalid("network needs at least one conv block"));
        }
        if self.conv_filters.contains(&0) || self.in_channels == 0 || self.dense_units == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let div = 1usize << self.conv_filters.len();
        if self.input_side_px == 0 || !self.input_side_px.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "input side {} is not divisible by 2^{} pooling layers",
                self.input_side_px,
                self.conv_filters.len()
            )));
        }
        if self.kernel_px.is_multiple_of(2) {
            return Err(Error::invalid("conv kernel size must be odd"));
        }
        if self.classes != 4 {
            return Err(Error::invalid("classifier must have exactly 4 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if !(self.l2_factor >= 0.0) {
            return Err(Error::invalid("l2 factor must be >= 0"));
        }
        Ok(())
    }

    /// Spatial side of each block's input.
    pub fn block_sides(&self) -> Vec<usize> {
        (0..self.conv_filters.len())
            .map(|i| self.input_side_px >> i)
            .collect()
    }

    pub fn flat_len(&self) -> usize {
        let side = self.input_side_px >> self.conv_filters.len();
        side * side * self.conv_filters.last().copied().unwrap_or(0)
    }

    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.conv_filters[i - 1]
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_side_px * self.input_side_px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub kind: LayerKind,
    pub is_weight: bool,
    /// Conv block index, or `None` for dense layers.
    pub block: Option<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub fn param_layout(config: &NetConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, dims: Vec<usize>, kind, is_weight, block| {
        let spec = TensorSpec {
            name,
            dims,
            offset,
            kind,
            is_weight,
            block,
        };
        offset += spec.len();
        specs.push(spec);
    };
    let k = config.kernel_px;
    for (i, &f) in config.conv_filters.iter().enumerate() {
        let c = config.block_in_channels(i);
        push(
            format!("conv{i}.weight"),
            vec![f, c, k, k],
            LayerKind::Conv,
            true,
            Some(i),
        );
        push(
            format!("conv{i}.bias"),
            vec![f],
            LayerKind::Conv,
            false,
            Some(i),
        );
    }
    let (flat, units) = (config.flat_len(), config.dense_units);
    push(
        "dense1.weight".into(),
        vec![units, flat],
        LayerKind::Dense,
        true,
        None,
    );
    push(
        "dense1.bias".into(),
        vec![units],
        LayerKind::Dense,
        false,
        None,
    );
    push(
        "dense2.weight".into(),
        vec![config.classes, units],
        LayerKind::Dense,
        true,
        None,
    );
    push(
        "dense2.bias".into(),
        vec![config.classes],
        LayerKind::Dense,
        false,
        None,
    );
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    pub config: NetConfig,
    pub params: Vec<T>,
    pub input_shift: Vec<T>,
    pub input_scale: Vec<T>,
    layout: Vec<TensorSpec>,
}

#[derive(Default)]
struct BlockCache<T> {
    input: Vec<T>,
    pre_act: Vec<T>,
}

/// Activations retained for the backward pass.
#[derive(Default)]
pub(crate) struct Cache<T> {
    blocks: Vec<BlockCache<T>>,
    flat_drop: Vec<T>,
    mask1: Vec<T>,
    z1: Vec<T>,
    a1_drop: Vec<T>,
    mask2: Vec<T>,
    probs: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    /// Sign pattern of every ReLU input, for detecting kink crossings.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = Vec::new();
        for b in &self.blocks {
            out.extend(b.pre_act.iter().map(|v| *v > T::zero()));
        }
        out.extend(self.z1.iter().map(|v| *v > T::zero()));
        out
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, side: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = side * side;
    let s = side as isize;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..s {
                    let sy = y + oy;
                    let drow = &mut dst[(y * s) as usize..((y + 1) * s) as usize];
                    if sy < 0 || sy >= s {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[(sy * s) as usize..((sy + 1) * s) as usize];
                    for x in 0..s {
                        let sx = x + ox;
                        drow[x as usize] = if sx < 0 || sx >= s {
                            T::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, side: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = side * side;
    let s = side as isize;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..s {
                    let sy = y + oy;
                    if sy < 0 || sy >= s {
                        continue;
                    }
                    for x in 0..s {
                        let sx = x + ox;
                        if sx >= 0 && sx < s {
                            plane[(sy * s + sx) as usize] += src[(y * s + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn avg_pool<T: Scalar>(x: &[T], planes: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * half * half];
    for p in 0..planes {
        let src = &x[p * side * side..(p + 1) * side * side];
        let dst = &mut out[p * half * half..(p + 1) * half * half];
        for y in 0..half {
            for xx in 0..half {
                let i = 2 * y * side + 2 * xx;
                dst[y * half + xx] =
                    (src[i] + src[i + 1] + src[i + side] + src[i + side + 1]) * quarter;
            }
        }
    }
    out
}

fn avg_pool_backward<T: Scalar>(d_out: &[T], planes: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64_lossy(0.25);
    let mut d_in = vec![T::zero(); planes * side * side];
    for p in 0..planes {
        let src = &d_out[p * half * half..(p + 1) * half * half];
        let dst = &mut d_in[p * side * side..(p + 1) * side * side];
        for y in 0..half {
            for x in 0..half {
                let g = src[y * half + x] * quarter;
                let i = 2 * y * side + 2 * x;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + side] = g;
                dst[i + side + 1] = g;
            }
        }
    }
    d_in
}

fn dropout_mask<T: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(1.0 / keep);
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect()
}

fn softmax_rows<T: Scalar>(logits: &mut [T], classes: usize) {
    for row in logits.chunks_exact_mut(classes) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<T: Scalar> Network<T> {
    /// He-scaled normal weights (fan-in), zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut params = vec![T::zero(); total];
        let mut rng = rng_for(seed, "init", 0);
        for spec in layout.iter().filter(|s| s.is_weight) {
            let fan_in: usize = spec.dims[1..].iter().product();
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for p in &mut params[spec.range()] {
                *p = T::from_f64_lossy(dist.sample(&mut rng));
            }
        }
        let c = config.in_channels;
        Ok(Network {
            config,
            params,
            input_shift: vec![T::zero(); c],
            input_scale: vec![T::one(); c],
            layout,
        })
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.iter().find(|s| s.name == name)?.range();
        Some(&mut self.params[range])
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Rebuild from parts, checking the parameter vector against the layout.
    pub fn from_parts(
        config: NetConfig,
        params: Vec<T>,
        input_shift: Vec<T>,
        input_scale: Vec<T>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        if params.len() != total
            || input_shift.len() != config.in_channels
            || input_scale.len() != config.in_channels
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{total} parameters, {} input channels", config.in_channels),
                actual: format!(
                    "{} parameters, {} shifts, {} scales",
                    params.len(),
                    input_shift.len(),
                    input_scale.len()
                ),
            });
        }
        Ok(Network {
            config,
            params,
            input_shift,
            input_scale,
            layout,
        })
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<()> {
        let expected = batch * self.config.input_len();
        if x.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{batch} x {} input values", self.config.input_len()),
                actual: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    fn standardized(&self, x: &[T], batch: usize) -> Vec<T> {
        let plane = self.config.input_side_px * self.config.input_side_px;
        let c = self.config.in_channels;
        let mut out = x.to_vec();
        for b in 0..batch {
            for ch in 0..c {
                let (shift, scale) = (self.input_shift[ch], self.input_scale[ch]);
                let start = (b * c + ch) * plane;
                for v in &mut out[start..start + plane] {
                    *v = (*v - shift) * scale;
                }
            }
        }
        out
    }

    /// Shared forward pass; with `rng` present dropout is active, with
    /// `cache` present activations are retained for backpropagation.
    pub(crate) fn forward_impl<R: Rng>(
        &self,
        x: &[T],
        batch: usize,
        mut rng: Option<&mut R>,
        mut cache: Option<&mut Cache<T>>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let k = cfg.kernel_px;
        let mut act = self.standardized(x, batch);
        if let Some(c) = cache.as_deref_mut() {
            c.blocks.clear();
        }
        for (i, side) in cfg.block_sides().into_iter().enumerate() {
            let c_in = cfg.block_in_channels(i);
            let f = cfg.conv_filters[i];
            let hw = side * side;
            let kk = c_in * k * k;
            let w = &self.params[self.layout[2 * i].range()];
            let bias = &self.params[self.layout[2 * i + 1].range()];
            let mut pre = vec![T::zero(); batch * f * hw];
            let mut cols = vec![T::zero(); kk * hw];
            for b in 0..batch {
                im2col(
                    &act[b * c_in * hw..(b + 1) * c_in * hw],
                    c_in,
                    side,
                    k,
                    &mut cols,
                );
                let out = &mut pre[b * f * hw..(b + 1) * f * hw];
                for (fi, row) in out.chunks_exact_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[fi]);
                }
                gemm(
                    f,
                    kk,
                    hw,
                    T::one(),
                    w,
                    View::row_major(kk),
                    &cols,
                    View::row_major(hw),
                    T::one(),
                    out,
                    View::row_major(hw),
                );
            }
            let relu: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
            let pooled = avg_pool(&relu, batch * f, side);
            if let Some(c) = cache.as_deref_mut() {
                c.blocks.push(BlockCache {
                    input: act,
                    pre_act: pre,
                });
            }
            act = pooled;
        }

        let flat = cfg.flat_len();
        let units = cfg.dense_units;
        let classes = cfg.classes;
        let mask1: Vec<T> = match rng.as_deref_mut() {
            Some(r) if cfg.dropout_rate > 0.0 => dropout_mask(batch * flat, cfg.dropout_rate, r),
            _ => Vec::new(),
        };
        if !mask1.is_empty() {
            act.iter_mut().zip(&mask1).for_each(|(a, m)| *a *= *m);
        }

        let w1 = &self.params[self.tensor_range("dense1.weight")];
        let b1 = &self.params[self.tensor_range("dense1.bias")];
        let mut z1 = vec![T::zero(); batch * units];
        for row in z1.chunks_exact_mut(units) {
            row.copy_from_slice(b1);
        }
        gemm(
            batch,
            flat,
            units,
            T::one(),
            &act,
            View::row_major(flat),
            w1,
            View::transposed(flat),
            T::one(),
            &mut z1,
            View::row_major(units),
        );
        let mut a1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
        let mask2: Vec<T> = match rng {
            Some(r) if cfg.dropout_rate > 0.0 => dropout_mask(batch * units, cfg.dropout_rate, r),
            _ => Vec::new(),
        };
        if !mask2.is_empty() {
            a1.iter_mut().zip(&mask2).for_each(|(a, m)| *a *= *m);
        }

        let w2 = &self.params[self.tensor_range("dense2.weight")];
        let b2 = &self.params[self.tensor_range("dense2.bias")];
        let mut logits = vec![T::zero(); batch * classes];
        for row in logits.chunks_exact_mut(classes) {
            row.copy_from_slice(b2);
        }
        gemm(
            batch,
            units,
            classes,
            T::one(),
            &a1,
            View::row_major(units),
            w2,
            View::transposed(units),
            T::one(),
            &mut logits,
            View::row_major(classes),
        );
        softmax_rows(&mut logits, classes);

        if let Some(c) = cache {
            c.flat_drop = act;
            c.mask1 = mask1;
            c.z1 = z1;
            c.a1_drop = a1;
            c.mask2 = mask2;
            c.probs = logits.clone();
        }
        logits
    }

    fn tensor_range(&self, name: &str) -> std::ops::Range<usize> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.range())
            .expect("tensor present in layout")
    }

    /// Batched forward pass returning one probability vector per sample.
    pub fn forward<R: Rng>(
        &self,
        x: &[T],
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<ProbVector>> {
        self.check_input(x, batch)?;
        let probs = match mode {
            Mode::Eval => self.forward_impl::<R>(x, batch, None, None),
            Mode::Train => self.forward_impl(x, batch, Some(rng), None),
        };
        Ok(to_prob_vectors(&probs))
    }

    /// Deterministic inference, processed in chunks to bound memory.
    pub fn predict(&self, x: &[T], batch: usize) -> Result<Vec<ProbVector>> {
        self.check_input(x, batch)?;
        let per = self.config.input_len();
        let mut out = Vec::with_capacity(batch);
        for chunk in x.chunks(per * 64) {
            let probs =
                self.forward_impl::<rand_chacha::ChaCha8Rng>(chunk, chunk.len() / per, None, None);
            out.extend(to_prob_vectors(&probs));
        }
        Ok(out)
    }

    pub fn l2_penalty(&self) -> T {
        let l2 = T::from_f64_lossy(self.config.l2_factor);
        let sq: T = ["dense1.weight", "dense2.weight"]
            .iter()
            .flat_map(|n| self.params[self.tensor_range(n)].iter())
            .map(|&w| w * w)
            .sum();
        l2 * sq
    }

    /// Mean cross-entropy plus the L2 penalty on dense weights. Labels are 1-based.
    pub fn loss<R: Rng>(&self, x: &[T], labels: &[u8], rng: Option<&mut R>) -> Result<T> {
        let batch = labels.len();
        self.check_input(x, batch)?;
        check_labels(labels, self.config.classes)?;
        let probs = self.forward_impl(x, batch, rng, None);
        Ok(cross_entropy(&probs, labels, self.config.classes) + self.l2_penalty())
    }

    /// Loss and its gradient with respect to every parameter.
    /// With `rng` present the pass runs in train mode (dropout active).
    pub fn loss_and_grads<R: Rng>(
        &self,
        x: &[T],
        labels: &[u8],
        rng: Option<&mut R>,
    ) -> Result<(T, Vec<T>)> {
        let mut cache = Cache::default();
        let (loss, grads) = self.loss_and_grads_cached(x, labels, rng, &mut cache)?;
        Ok((loss, grads))
    }

    pub(crate) fn loss_and_grads_cached<R: Rng>(
        &self,
        x: &[T],
        labels: &[u8],
        rng: Option<&mut R>,
        cache: &mut Cache<T>,
    ) -> Result<(T, Vec<T>)> {
        let batch = labels.len();
        self.check_input(x, batch)?;
        check_labels(labels, self.config.classes)?;
        let cfg = &self.config;
        let probs = self.forward_impl(x, batch, rng, Some(cache));
        let loss = cross_entropy(&probs, labels, cfg.classes) + self.l2_penalty();

        let mut grads = vec![T::zero(); self.params.len()];
        let (flat, units, classes) = (cfg.flat_len(), cfg.dense_units, cfg.classes);
        let inv_b = T::from_f64_lossy(1.0 / batch as f64);
        let two_l2 = T::from_f64_lossy(2.0 * cfg.l2_factor);

        let mut dlogits = probs;
        for (row, &label) in dlogits.chunks_exact_mut(classes).zip(labels) {
            row[usize::from(label - 1)] -= T::one();
            row.iter_mut().for_each(|v| *v *= inv_b);
        }

        // dense2
        let r_w2 = self.tensor_range("dense2.weight");
        let r_b2 = self.tensor_range("dense2.bias");
        gemm(
            classes,
            batch,
            units,
            T::one(),
            &dlogits,
            View::transposed(classes),
            &cache.a1_drop,
            View::row_major(units),
            T::zero(),
            &mut grads[r_w2.clone()],
            View::row_major(units),
        );
        for row in dlogits.chunks_exact(classes) {
            for (g, d) in grads[r_b2.clone()].iter_mut().zip(row) {
                *g += *d;
            }
        }
        let w2 = &self.params[r_w2.clone()];
        let mut da1 = vec![T::zero(); batch * units];
        gemm(
            batch,
            classes,
            units,
            T::one(),
            &dlogits,
            View::row_major(classes),
            w2,
            View::row_major(units),
            T::zero(),
            &mut da1,
            View::row_major(units),
        );
        if !cache.mask2.is_empty() {
            da1.iter_mut().zip(&cache.mask2).for_each(|(d, m)| *d *= *m);
        }
        let dz1: Vec<T> = da1
            .iter()
            .zip(&cache.z1)
            .map(|(&d, &z)| if z > T::zero() { d } else { T::zero() })
            .collect();

        // dense1
        let r_w1 = self.tensor_range("dense1.weight");
        let r_b1 = self.tensor_range("dense1.bias");
        gemm(
            units,
            batch,
            flat,
            T::one(),
            &dz1,
            View::transposed(units),
            &cache.flat_drop,
            View::row_major(flat),
            T::zero(),
            &mut grads[r_w1.clone()],
            View::row_major(flat),
        );
        for row in dz1.chunks_exact(units) {
            for (g, d) in grads[r_b1.clone()].iter_mut().zip(row) {
                *g += *d;
            }
        }
        let w1 = &self.params[r_w1.clone()];
        let mut dflat = vec![T::zero(); batch * flat];
        gemm(
            batch,
            units,
            flat,
            T::one(),
            &dz1,
            View::row_major(units),
            w1,
            View::row_major(flat),
            T::zero(),
            &mut dflat,
            View::row_major(flat),
        );
        if !cache.mask1.is_empty() {
            dflat
                .iter_mut()
                .zip(&cache.mask1)
                .for_each(|(d, m)| *d *= *m);
        }

        for r in [r_w1, r_w2] {
            for (g, &w) in grads[r.clone()].iter_mut().zip(&self.params[r]) {
                *g += two_l2 * w;
            }
        }

        // conv blocks, last to first
        let k = cfg.kernel_px;
        let sides = cfg.block_sides();
        let mut d_act = dflat;
        for i in (0..cfg.conv_filters.len()).rev() {
            let side = sides[i];
            let hw = side * side;
            let f = cfg.conv_filters[i];
            let c_in = cfg.block_in_channels(i);
            let kk = c_in * k * k;
            let bc = &cache.blocks[i];
            let mut dz = avg_pool_backward(&d_act, batch * f, side);
            dz.iter_mut().zip(&bc.pre_act).for_each(|(d, &z)| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
            let r_w = self.layout[2 * i].range();
            let r_b = self.layout[2 * i + 1].range();
            let w = &self.params[r_w.clone()];
            let mut cols = vec![T::zero(); kk * hw];
            let mut dcols = vec![T::zero(); kk * hw];
            let mut dx = if i > 0 {
                vec![T::zero(); batch * c_in * hw]
            } else {
                Vec::new()
            };
            for b in 0..batch {
                let dz_b = &dz[b * f * hw..(b + 1) * f * hw];
                im2col(
                    &bc.input[b * c_in * hw..(b + 1) * c_in * hw],
                    c_in,
                    side,
                    k,
                    &mut cols,
                );
                gemm(
                    f,
                    hw,
                    kk,
                    T::one(),
                    dz_b,
                    View::row_major(hw),
                    &cols,
                    View::transposed(hw),
                    T::one(),
                    &mut grads[r_w.clone()],
                    View::row_major(kk),
                );
                for (fi, row) in dz_b.chunks_exact(hw).enumerate() {
                    grads[r_b.start + fi] += row.iter().cloned().sum::<T>();
                }
                if i > 0 {
                    gemm(
                        kk,
                        f,
                        hw,
                        T::one(),
                        w,
                        View::transposed(kk),
                        dz_b,
                        View::row_major(hw),
                        T::zero(),
                        &mut dcols,
                        View::row_major(hw),
                    );
                    col2im(
                        &dcols,
                        c_in,
                        side,
                        k,
                        &mut dx[b * c_in * hw..(b + 1) * c_in * hw],
                    );
                }
            }
            d_act = dx;
        }
        Ok((loss, grads))
    }
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || usize::from(l) > classes) {
        return Err(Error::LabelOutOfRange(bad));
    }
    Ok(())
}

pub(crate) fn cross_entropy<T: Scalar>(probs: &[T], labels: &[u8], classes: usize) -> T {
    let tiny = T::min_positive_value();
    let total: T = probs
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &l)| -(row[usize::from(l - 1)].max(tiny)).ln())
        .sum();
    total / T::from_f64_lossy(labels.len() as f64)
}

pub(crate) fn to_prob_vectors<T: Scalar>(probs: &[T]) -> Vec<ProbVector> {
    probs
        .chunks_exact(4)
        .map(|row| {
            ProbVector([
                row[0].as_f64(),
                row[1].as_f64(),
                row[2].as_f64(),
                row[3].as_f64(),
            ])
        })
        .collect()
}
