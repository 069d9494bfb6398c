use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, BnCache};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which evidence the network sees besides the initial DSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// DSM only.
    None,
    /// DSM plus one ortho-image.
    Mono,
    /// DSM plus two ortho-images.
    Stereo,
}

impl Variant {
    pub fn ortho_count(self) -> usize {
        match self {
            Variant::None => 0,
            Variant::Mono => 1,
            Variant::Stereo => 2,
        }
    }

    pub fn input_channels(self) -> usize {
        1 + self.ortho_count()
    }

    pub fn from_channels(channels: usize) -> Result<Variant> {
        match channels {
            1 => Ok(Variant::None),
            2 => Ok(Variant::Mono),
            3 => Ok(Variant::Stereo),
            n => Err(Error::Config(format!("input_channels must be 1, 2 or 3, got {n}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::Mono => "mono",
            Variant::Stereo => "stereo",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "dsm" | "0" => Ok(Variant::None),
            "mono" => Ok(Variant::Mono),
            "stereo" => Ok(Variant::Stereo),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    pub tile: usize,
}

impl UNetConfig {
    /// Full-size network: 5 levels, 64 to 512 filters, 256 px tiles.
    pub fn full(variant: Variant) -> Self {
        UNetConfig {
            input_channels: variant.input_channels(),
            depth: 5,
            base_filters: 64,
            max_filters: 512,
            tile: 256,
        }
    }

    /// Desk-scale network used by the synthetic experiments.
    pub fn small(variant: Variant) -> Self {
        UNetConfig {
            input_channels: variant.input_channels(),
            depth: 4,
            base_filters: 16,
            max_filters: 512,
            tile: 64,
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::from_channels(self.input_channels)
    }

    /// Filters at encoder level `k`.
    pub fn filters(&self, k: usize) -> usize {
        let scaled = self.base_filters.saturating_mul(1usize.checked_shl(k as u32).unwrap_or(usize::MAX));
        scaled.min(self.max_filters)
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        Variant::from_channels(self.input_channels)?;
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::Config(format!("depth must be in 1..=12, got {}", self.depth)));
        }
        if self.base_filters == 0 || self.max_filters < self.base_filters {
            return Err(Error::Config(format!(
                "need 1 <= base_filters <= max_filters, got {} and {}",
                self.base_filters, self.max_filters
            )));
        }
        if self.tile == 0 || self.tile % self.stride() != 0 {
            return Err(Error::Config(format!(
                "tile {} is not divisible by 2^depth = {}",
                self.tile,
                self.stride()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

impl ConvSlot {
    fn weight_len(&self, taps: usize) -> usize {
        self.cin * self.cout * taps
    }
}

#[derive(Debug, Clone, Copy)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    ch: usize,
}

/// Offsets of every layer inside the flat parameter and running-stat arrays.
///
/// Order: encoder levels 0..depth as (conv, bn); decoder levels depth-1..0 as
/// (conv, bn, tconv, bn); then the output conv.
#[derive(Debug, Clone)]
struct Layout {
    enc_conv: Vec<ConvSlot>,
    enc_bn: Vec<BnSlot>,
    dec_conv: Vec<ConvSlot>,
    dec_bn1: Vec<BnSlot>,
    dec_tconv: Vec<ConvSlot>,
    dec_bn2: Vec<BnSlot>,
    head: ConvSlot,
    n_params: usize,
    n_running: usize,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Layout {
        let mut p = 0;
        let mut r = 0;
        let conv = |p: &mut usize, cin: usize, cout: usize, taps: usize| {
            let slot = ConvSlot { w: *p, b: *p + cin * cout * taps, cin, cout };
            *p = slot.b + cout;
            slot
        };
        let mut bn = |p: &mut usize, ch: usize| {
            let slot = BnSlot { gamma: *p, beta: *p + ch, mean: r, var: r + ch, ch };
            *p += 2 * ch;
            r += 2 * ch;
            slot
        };
        let d = cfg.depth;
        let mut enc_conv = Vec::with_capacity(d);
        let mut enc_bn = Vec::with_capacity(d);
        let mut cin = cfg.input_channels;
        for k in 0..d {
            let f = cfg.filters(k);
            enc_conv.push(conv(&mut p, cin, f, 9));
            enc_bn.push(bn(&mut p, f));
            cin = f;
        }
        let mut dec = vec![None; d];
        for k in (0..d).rev() {
            let f = cfg.filters(k);
            let cin = if k == d - 1 { f } else { 2 * cfg.filters(k + 1) };
            let c = conv(&mut p, cin, f, 9);
            let b1 = bn(&mut p, f);
            let t = conv(&mut p, f, f, 4);
            let b2 = bn(&mut p, f);
            dec[k] = Some((c, b1, t, b2));
        }
        let head = conv(&mut p, 2 * cfg.filters(0), 1, 9);
        let dec: Vec<_> = dec.into_iter().map(|v| v.expect("every level built")).collect();
        Layout {
            enc_conv,
            enc_bn,
            dec_conv: dec.iter().map(|v| v.0).collect(),
            dec_bn1: dec.iter().map(|v| v.1).collect(),
            dec_tconv: dec.iter().map(|v| v.2).collect(),
            dec_bn2: dec.iter().map(|v| v.3).collect(),
            head,
            n_params: p,
            n_running: r,
        }
    }
}

/// Total learnable scalars: conv kernels, biases and batch-norm affine terms.
pub fn count_parameters(config: &UNetConfig) -> usize {
    Layout::new(config).n_params
}

/// All network state: learnable parameters in one flat array plus the
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct WeightSet<T> {
    config: UNetConfig,
    layout: Layout,
    params: Vec<T>,
    running: Vec<T>,
}

impl<T: Scalar> PartialEq for WeightSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.running == other.running
    }
}

impl<T: Scalar> WeightSet<T> {
    /// Rebuilds a weight set from stored arrays.
    pub fn from_parts(config: UNetConfig, params: Vec<T>, running: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.n_params || running.len() != layout.n_running {
            return Err(Error::Dimension {
                layer: "weights".into(),
                msg: format!(
                    "expected {} parameters and {} running stats, got {} and {}",
                    layout.n_params,
                    layout.n_running,
                    params.len(),
                    running.len()
                ),
            });
        }
        if !params.iter().chain(&running).all(|v| v.is_finite()) {
            return Err(Error::Numerical("weight set contains non-finite values".into()));
        }
        Ok(WeightSet { config, layout, params, running })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn running(&self) -> &[T] {
        &self.running
    }

    /// Weights and bias of the output convolution.
    pub fn head(&self) -> &[T] {
        let h = &self.layout.head;
        &self.params[h.w..h.b + h.cout]
    }

    pub fn zero_head(&mut self) {
        let h = self.layout.head;
        self.params[h.w..h.b + h.cout].fill(T::ZERO);
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            running: self.running.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn conv(&self, s: &ConvSlot, taps: usize) -> (&[T], &[T]) {
        (&self.params[s.w..s.w + s.weight_len(taps)], &self.params[s.b..s.b + s.cout])
    }

    fn bn(&self, s: &BnSlot) -> (&[T], &[T], &[T], &[T]) {
        (
            &self.params[s.gamma..s.gamma + s.ch],
            &self.params[s.beta..s.beta + s.ch],
            &self.running[s.mean..s.mean + s.ch],
            &self.running[s.var..s.var + s.ch],
        )
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates: `r = (1 - momentum) * r + momentum * batch`.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>, momentum: f64) {
        let mut apply = |slot: &BnSlot, cache: &BnCache<T>| {
            if !cache.train {
                return;
            }
            for c in 0..slot.ch {
                let m = &mut self.running[slot.mean + c];
                *m = T::from_f64((1.0 - momentum) * m.to_f64() + momentum * cache.batch_mean[c]);
                let v = &mut self.running[slot.var + c];
                *v = T::from_f64((1.0 - momentum) * v.to_f64() + momentum * cache.batch_var_unbiased[c]);
            }
        };
        let layout = self.layout.clone();
        for (k, level) in pass.enc.iter().enumerate() {
            apply(&layout.enc_bn[k], &level.bn);
        }
        for (k, level) in pass.dec.iter().enumerate() {
            apply(&layout.dec_bn1[k], &level.bn1);
            apply(&layout.dec_bn2[k], &level.bn2);
        }
    }
}

/// Variance-scaled (He) normal initialization; batch norm starts at scale 1,
/// shift 0; the output convolution starts at exactly zero.
pub fn init_weights<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<WeightSet<T>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::ZERO; layout.n_params];
    let mut running = vec![T::ZERO; layout.n_running];
    let mut fill = |s: &ConvSlot, taps: usize, fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut params[s.w..s.w + s.weight_len(taps)] {
            *v = T::from_f64(normal.sample(&mut rng));
        }
    };
    for s in &layout.enc_conv {
        fill(s, 9, s.cin * 9);
    }
    for k in (0..config.depth).rev() {
        let s = &layout.dec_conv[k];
        fill(s, 9, s.cin * 9);
        let t = &layout.dec_tconv[k];
        fill(t, 4, t.cin);
    }
    let all_bn = layout.enc_bn.iter().chain(&layout.dec_bn1).chain(&layout.dec_bn2);
    for s in all_bn {
        params[s.gamma..s.gamma + s.ch].fill(T::ONE);
        running[s.var..s.var + s.ch].fill(T::ONE);
    }
    Ok(WeightSet { config: *config, layout, params, running })
}

/// Batch-norm behaviour during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct EncLevel<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
    argmax: Vec<u8>,
}

#[derive(Debug, Clone)]
struct DecLevel<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    act: Tensor<T>,
    bn2: BnCache<T>,
    up: Tensor<T>,
}

/// Output of [`forward`] plus everything [`backward`] needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub residual: Tensor<T>,
    pub refined: Tensor<T>,
    input_shape: [usize; 4],
    enc: Vec<EncLevel<T>>,
    dec: Vec<DecLevel<T>>,
    head_input: Tensor<T>,
}

fn dim_err(layer: &str, msg: String) -> Error {
    Error::Dimension { layer: layer.into(), msg }
}

/// Runs the network on a `(channels, batch, H, W)` tensor whose channel 0
/// is the normalized initial DSM. `H` and `W` must be divisible by
/// `2^depth`; the configured tile is the training size, not a requirement.
pub fn forward<T: Scalar>(weights: &WeightSet<T>, input: &Tensor<T>, mode: BnMode) -> Result<ForwardPass<T>> {
    let cfg = &weights.config;
    let l = &weights.layout;
    if input.channels != cfg.input_channels {
        return Err(dim_err(
            "input",
            format!("expected {} channels, got {}", cfg.input_channels, input.channels),
        ));
    }
    let s = cfg.stride();
    if input.batch == 0 || input.height == 0 || input.width == 0 || input.height % s != 0 || input.width % s != 0 {
        return Err(dim_err(
            "input",
            format!(
                "spatial size {}x{} (batch {}) is not a positive multiple of {s}",
                input.height, input.width, input.batch
            ),
        ));
    }
    let train = mode == BnMode::Train;
    if train && input.batch * (input.height >> cfg.depth) * (input.width >> cfg.depth) < 2 {
        return Err(dim_err(
            "batch_norm",
            "training mode needs at least two values per channel at the coarsest level".into(),
        ));
    }
    let mut scratch = Vec::new();
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut h = input.clone();
    for k in 0..cfg.depth {
        let (w, b) = weights.conv(&l.enc_conv[k], 9);
        let c = ops::conv3x3_forward(&h, w, b, l.enc_conv[k].cout, &mut scratch);
        let (g, be, rm, rv) = weights.bn(&l.enc_bn[k]);
        let (out, bn) = ops::bn_relu_forward(&c, g, be, rm, rv, train);
        let (pooled, argmax) = ops::maxpool2_forward(&out);
        enc.push(EncLevel { input: h, bn, out, argmax });
        h = pooled;
    }
    let mut dec: Vec<Option<DecLevel<T>>> = vec![None; cfg.depth];
    let mut z = h;
    for k in (0..cfg.depth).rev() {
        let (w, b) = weights.conv(&l.dec_conv[k], 9);
        let c = ops::conv3x3_forward(&z, w, b, l.dec_conv[k].cout, &mut scratch);
        let (g, be, rm, rv) = weights.bn(&l.dec_bn1[k]);
        let (act, bn1) = ops::bn_relu_forward(&c, g, be, rm, rv, train);
        let (w, b) = weights.conv(&l.dec_tconv[k], 4);
        let t = ops::tconv2_forward(&act, w, b, l.dec_tconv[k].cout, &mut scratch);
        let (g, be, rm, rv) = weights.bn(&l.dec_bn2[k]);
        let (up, bn2) = ops::bn_relu_forward(&t, g, be, rm, rv, train);
        let next = up.concat_channels(&enc[k].out);
        dec[k] = Some(DecLevel { input: z, bn1, act, bn2, up });
        z = next;
    }
    let (w, b) = weights.conv(&l.head, 9);
    let residual = ops::conv3x3_forward(&z, w, b, 1, &mut scratch);
    let mut refined = residual.clone();
    for (r, &x) in refined.data.iter_mut().zip(input.channel(0)) {
        *r = x + *r;
    }
    Ok(ForwardPass {
        residual,
        refined,
        input_shape: [input.channels, input.batch, input.height, input.width],
        enc,
        dec: dec.into_iter().map(|d| d.expect("every level visited")).collect(),
        head_input: z,
    })
}

/// Gradients of a scalar loss with respect to every parameter (same layout
/// as [`WeightSet::params`]) and the input tensor.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<T>,
    pub input: Tensor<T>,
}

/// Backpropagates `d_refined`, the loss gradient with respect to the refined
/// output, through a recorded forward pass.
pub fn backward<T: Scalar>(weights: &WeightSet<T>, pass: &ForwardPass<T>, d_refined: &Tensor<T>) -> Result<Gradients<T>> {
    if !d_refined.same_shape(&pass.refined) {
        return Err(dim_err(
            "output",
            format!(
                "gradient shape {}x{}x{}x{} does not match output {}x{}x{}x{}",
                d_refined.channels,
                d_refined.batch,
                d_refined.height,
                d_refined.width,
                pass.refined.channels,
                pass.refined.batch,
                pass.refined.height,
                pass.refined.width
            ),
        ));
    }
    let cfg = &weights.config;
    let l = &weights.layout;
    let mut grad = vec![T::ZERO; weights.params.len()];
    let mut scratch = Vec::new();

    let conv_back = |grad: &mut Vec<T>, slot: &ConvSlot, x: &Tensor<T>, dy: &Tensor<T>, scratch: &mut Vec<T>| {
        let (w, _) = weights.conv(slot, 9);
        let (gw, gb) = grad[slot.w..slot.b + slot.cout].split_at_mut(slot.weight_len(9));
        ops::conv3x3_backward(x, w, dy, gw, gb, scratch)
    };
    let bn_back = |grad: &mut Vec<T>, slot: &BnSlot, y: &Tensor<T>, dy: &Tensor<T>, cache: &BnCache<T>| {
        let (g, _, _, _) = weights.bn(slot);
        let (gg, gb) = grad[slot.gamma..slot.beta + slot.ch].split_at_mut(slot.ch);
        ops::bn_relu_backward(y, dy, cache, g, gg, gb)
    };

    let mut dz = conv_back(&mut grad, &l.head, &pass.head_input, d_refined, &mut scratch);
    let mut skip = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let lvl = &pass.dec[k];
        let (du, de) = dz.split_channels(lvl.up.channels);
        skip.push(de);
        let dt = bn_back(&mut grad, &l.dec_bn2[k], &lvl.up, &du, &lvl.bn2);
        let slot = &l.dec_tconv[k];
        let (w, _) = weights.conv(slot, 4);
        let (gw, gb) = grad[slot.w..slot.b + slot.cout].split_at_mut(slot.weight_len(4));
        let da = ops::tconv2_backward(&lvl.act, w, &dt, gw, gb, &mut scratch);
        let dc = bn_back(&mut grad, &l.dec_bn1[k], &lvl.act, &da, &lvl.bn1);
        dz = conv_back(&mut grad, &l.dec_conv[k], &lvl.input, &dc, &mut scratch);
    }
    for k in (0..cfg.depth).rev() {
        let lvl = &pass.enc[k];
        let mut de = ops::maxpool2_backward(&dz, &lvl.argmax, lvl.out.height, lvl.out.width);
        for (a, &b) in de.data.iter_mut().zip(&skip[k].data) {
            *a += b;
        }
        let dc = bn_back(&mut grad, &l.enc_bn[k], &lvl.out, &de, &lvl.bn);
        dz = conv_back(&mut grad, &l.enc_conv[k], &lvl.input, &dc, &mut scratch);
    }
    debug_assert_eq!(dz.shape_tuple(), pass.input_shape);
    for (a, &b) in dz.channel_mut(0).iter_mut().zip(&d_refined.data) {
        *a += b;
    }
    Ok(Gradients { params: grad, input: dz })
}

impl<T: Scalar> Tensor<T> {
    fn shape_tuple(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig { input_channels: 3, depth: 2, base_filters: 4, max_filters: 8, tile: 16 }
    }

    fn batch(cfg: &UNetConfig, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let len = cfg.input_channels * n * cfg.tile * cfg.tile;
        Tensor::from_vec(
            cfg.input_channels,
            n,
            cfg.tile,
            cfg.tile,
            (0..len).map(|_| normal.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn shapes_of_the_pipeline() {
        let cfg = tiny();
        let w = init_weights::<f64>(&cfg, 1).unwrap();
        let x = batch(&cfg, 2, 2);
        let out = forward(&w, &x, BnMode::Train).unwrap();
        assert_eq!(out.residual.shape_tuple(), [1, 2, 16, 16]);
        assert_eq!(out.refined.shape_tuple(), [1, 2, 16, 16]);
    }

    #[test]
    fn untrained_network_is_identity() {
        let cfg = tiny();
        let w = init_weights::<f32>(&cfg, 3).unwrap();
        assert!(w.head().iter().all(|&v| v == 0.0));
        let x = batch(&cfg, 2, 4).cast::<f32>();
        let out = forward(&w, &x, BnMode::Eval).unwrap();
        assert_eq!(out.refined.data, x.channel(0));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny();
        let a = init_weights::<f32>(&cfg, 9).unwrap();
        let b = init_weights::<f32>(&cfg, 9).unwrap();
        let c = init_weights::<f32>(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_size_config_builds() {
        let cfg = UNetConfig::full(Variant::Stereo);
        cfg.validate().unwrap();
        assert_eq!(cfg.filters(0), 64);
        assert_eq!(cfg.filters(3), 512);
        assert_eq!(cfg.filters(4), 512);
        assert!(count_parameters(&cfg) > 10_000_000);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = tiny();
        let w = init_weights::<f64>(&cfg, 1).unwrap();
        let x = Tensor::<f64>::zeros(2, 1, 16, 16);
        match forward(&w, &x, BnMode::Eval) {
            Err(Error::Dimension { layer, .. }) => assert_eq!(layer, "input"),
            other => panic!("unexpected {other:?}"),
        }
        let x = Tensor::<f64>::zeros(3, 1, 18, 16);
        assert!(forward(&w, &x, BnMode::Eval).is_err());
        let bad = UNetConfig { tile: 18, ..cfg };
        assert!(matches!(init_weights::<f32>(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let cfg = tiny();
        let mut w = init_weights::<f64>(&cfg, 1).unwrap();
        for v in w.params_mut() {
            if *v == 0.0 {
                *v = 0.1;
            }
        }
        let x = batch(&cfg, 2, 5);
        let out = forward(&w, &x, BnMode::Train).unwrap();
        let g = backward(&w, &out, &out.refined.zeros_like()).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let cfg = tiny();
        let mut w = init_weights::<f32>(&cfg, 1).unwrap();
        let x = batch(&cfg, 2, 6).cast::<f32>();
        let pass = forward(&w, &x, BnMode::Train).unwrap();
        w.update_running_stats(&pass, 0.1);
        let a = forward(&w, &x, BnMode::Eval).unwrap();
        let b = forward(&w, &x, BnMode::Eval).unwrap();
        assert_eq!(a.refined.data, b.refined.data);
    }
}
