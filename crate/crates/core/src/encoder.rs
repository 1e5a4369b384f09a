//! Small convolutional encoder with hand-written forward and backward passes.
//!
//! Convolutions use zero padding of `kernel / 2` and produce
//! `floor(n / stride)` outputs per axis; output cell `i` is centered on
//! input cell `i * stride`. The same parameters are applied to every
//! pyramid level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::ImagePyramid;
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn out_extent(&self, n: usize) -> usize {
        n / self.stride
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.kernel * self.kernel * self.in_channels
    }

    #[inline]
    fn w_index(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels
    }
}

/// The default stack: 3 -> 8 -> 16 -> `depth`, 3x3 kernels, stride 2 each,
/// ReLU between layers and none after the last.
pub fn default_layers(depth: usize) -> Vec<LayerSpec> {
    stride2_stack(&[3, 8, 16, depth])
}

/// Chain of 3x3 stride-2 convolutions through the given channel counts.
pub fn stride2_stack(channels: &[usize]) -> Vec<LayerSpec> {
    let n = channels.len() - 1;
    (0..n)
        .map(|i| LayerSpec {
            in_channels: channels[i],
            out_channels: channels[i + 1],
            kernel: 3,
            stride: 2,
            relu: i + 1 < n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// `[out][ky][kx][in]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

impl EncoderParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases. The last
    /// `trainable_last` layers are marked trainable.
    pub fn init(specs: &[LayerSpec], trainable_last: usize, seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = specs.len();
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let fan_in = (spec.kernel * spec.kernel * spec.in_channels) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let weights = (0..spec.weight_len())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                ConvLayer {
                    spec,
                    weights,
                    bias: vec![0.0; spec.out_channels],
                    trainable: i + trainable_last >= n,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.spec.stride).product()
    }

    /// Output extent of the whole stack for an input extent.
    pub fn out_extent(&self, n: usize) -> usize {
        self.layers.iter().fold(n, |n, l| l.spec.out_extent(n))
    }

    /// Smallest input extent that yields at least one output cell.
    pub fn min_input_extent(&self) -> usize {
        self.total_stride()
    }

    pub fn set_trainable_last(&mut self, k: usize) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.trainable = i + k >= n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn zero_grad(&self) -> EncoderGrad {
        EncoderGrad {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig(
            "encoder needs at least one layer".into(),
        ));
    }
    if specs[0].in_channels != crate::image::CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "first layer must take {} input channels",
            crate::image::CHANNELS
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.kernel == 0 || s.kernel % 2 == 0 || s.stride == 0 || s.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer {i}: kernel must be odd and stride/channels positive"
            )));
        }
        if i > 0 && specs[i - 1].out_channels != s.in_channels {
            return Err(Error::InvalidConfig(format!(
                "layer {i}: expects {} input channels but previous layer yields {}",
                s.in_channels,
                specs[i - 1].out_channels
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub layers: Vec<LayerGrad>,
}

impl EncoderGrad {
    pub fn add_assign(&mut self, other: &EncoderGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input of every layer.
    inputs: Vec<FeatureTensor>,
    /// Pre-activation output of every layer.
    pre: Vec<FeatureTensor>,
}

impl EncoderCache {
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let t = self.pre.last().expect("non-empty cache");
        (t.width, t.height, t.depth)
    }
}

fn conv_forward(layer: &ConvLayer, x: &FeatureTensor) -> FeatureTensor {
    let s = &layer.spec;
    let (ow, oh) = (s.out_extent(x.width), s.out_extent(x.height));
    let mut out = FeatureTensor::zeros(ow, oh, s.out_channels);
    let pad = (s.kernel / 2) as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * s.out_channels;
            let acc = &mut out.data[o_base..o_base + s.out_channels];
            acc.copy_from_slice(&layer.bias);
            for ky in 0..s.kernel {
                let iy = (oy * s.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= x.height as isize {
                    continue;
                }
                for kx in 0..s.kernel {
                    let ix = (ox * s.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= x.width as isize {
                        continue;
                    }
                    let xin = x.cell(ix as usize, iy as usize);
                    for (o, a) in acc.iter_mut().enumerate() {
                        let wi = s.w_index(o, ky, kx);
                        let w = &layer.weights[wi..wi + s.in_channels];
                        *a += w.iter().zip(xin).map(|(w, v)| w * v).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
fn conv_backward(
    layer: &ConvLayer,
    x: &FeatureTensor,
    g_out: &FeatureTensor,
    grad: Option<&mut LayerGrad>,
    want_input: bool,
) -> Option<FeatureTensor> {
    let s = &layer.spec;
    let pad = (s.kernel / 2) as isize;
    let mut g_in = want_input.then(|| FeatureTensor::zeros(x.width, x.height, x.depth));
    let mut grad = grad;
    for oy in 0..g_out.height {
        for ox in 0..g_out.width {
            let g = g_out.cell(ox, oy);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some(gr) = grad.as_deref_mut() {
                gr.bias.iter_mut().zip(g).for_each(|(b, v)| *b += v);
            }
            for ky in 0..s.kernel {
                let iy = (oy * s.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= x.height as isize {
                    continue;
                }
                for kx in 0..s.kernel {
                    let ix = (ox * s.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= x.width as isize {
                        continue;
                    }
                    let cell = (iy as usize * x.width + ix as usize) * x.depth;
                    let xin = &x.data[cell..cell + x.depth];
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let wi = s.w_index(o, ky, kx);
                        if let Some(gr) = grad.as_deref_mut() {
                            gr.weights[wi..wi + s.in_channels]
                                .iter_mut()
                                .zip(xin)
                                .for_each(|(gw, v)| *gw += go * v);
                        }
                        if let Some(gi) = g_in.as_mut() {
                            gi.data[cell..cell + x.depth]
                                .iter_mut()
                                .zip(&layer.weights[wi..wi + s.in_channels])
                                .for_each(|(gx, w)| *gx += go * w);
                        }
                    }
                }
            }
        }
    }
    g_in
}

fn check_input(params: &EncoderParams, width: usize, height: usize) -> Result<()> {
    if params.out_extent(width) == 0 || params.out_extent(height) == 0 {
        return Err(Error::InputTooSmall {
            width,
            height,
            min: params.min_input_extent(),
        });
    }
    Ok(())
}

/// Forward pass of one image.
pub fn encode(img: &Image, params: &EncoderParams) -> Result<FeatureTensor> {
    check_input(params, img.width(), img.height())?;
    let mut x = FeatureTensor::from_image(img);
    for layer in &params.layers {
        x = conv_forward(layer, &x);
        if layer.spec.relu {
            x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(x)
}

/// Forward pass that keeps the activations needed by [`encoder_backward`].
pub fn encode_with_cache(
    img: &Image,
    params: &EncoderParams,
) -> Result<(FeatureTensor, EncoderCache)> {
    check_input(params, img.width(), img.height())?;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut x = FeatureTensor::from_image(img);
    for layer in &params.layers {
        let z = conv_forward(layer, &x);
        inputs.push(x);
        x = z.clone();
        if layer.spec.relu {
            x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        pre.push(z);
    }
    Ok((x, EncoderCache { inputs, pre }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(f64, FeatureTensor)>,
}

impl FeaturePyramid {
    pub fn depth(&self) -> usize {
        self.levels.first().map_or(0, |(_, t)| t.depth)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &FeatureTensor> {
        self.levels.iter().map(|(_, t)| t)
    }
}

/// Encodes every level with the same parameters.
pub fn encode_pyramid(pyr: &ImagePyramid, params: &EncoderParams) -> Result<FeaturePyramid> {
    let levels = pyr
        .levels
        .iter()
        .enumerate()
        .map(|(i, lvl)| {
            encode(&lvl.image, params)
                .map(|t| (lvl.factor, t))
                .map_err(|e| e.at_level(i))
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

pub fn encode_pyramid_with_cache(
    pyr: &ImagePyramid,
    params: &EncoderParams,
) -> Result<(FeaturePyramid, Vec<EncoderCache>)> {
    let mut levels = Vec::with_capacity(pyr.len());
    let mut caches = Vec::with_capacity(pyr.len());
    for (i, lvl) in pyr.levels.iter().enumerate() {
        let (t, c) = encode_with_cache(&lvl.image, params).map_err(|e| e.at_level(i))?;
        levels.push((lvl.factor, t));
        caches.push(c);
    }
    Ok((FeaturePyramid { levels }, caches))
}

/// Backward pass over one or more levels. Parameter gradients of every
/// level accumulate into one [`EncoderGrad`]; frozen layers get zero
/// gradient. Input (image) gradients are returned per level when
/// `want_input` is set.
pub fn encoder_backward(
    params: &EncoderParams,
    caches: &[EncoderCache],
    grad_out: &[FeatureTensor],
    want_input: bool,
) -> Result<(EncoderGrad, Vec<Option<FeatureTensor>>)> {
    if caches.len() != grad_out.len() {
        return Err(Error::Contract(format!(
            "{} upstream gradients for {} cached levels",
            grad_out.len(),
            caches.len()
        )));
    }
    let mut grad = params.zero_grad();
    let lowest_trainable = params.layers.iter().position(|l| l.trainable);
    let mut input_grads = Vec::with_capacity(caches.len());
    for (cache, g) in caches.iter().zip(grad_out) {
        let out = cache.pre.last().expect("non-empty cache");
        if !out.same_shape(g) || cache.pre.len() != params.layers.len() {
            return Err(Error::Contract(format!(
                "upstream gradient {}x{}x{} does not match cached output {}x{}x{}",
                g.width, g.height, g.depth, out.width, out.height, out.depth
            )));
        }
        let stop = if want_input {
            0
        } else {
            match lowest_trainable {
                Some(i) => i,
                None => {
                    input_grads.push(None);
                    continue;
                }
            }
        };
        let mut g = g.clone();
        for i in (stop..params.layers.len()).rev() {
            let layer = &params.layers[i];
            if layer.spec.relu {
                for (gv, &z) in g.data.iter_mut().zip(&cache.pre[i].data) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let lg = layer.trainable.then(|| &mut grad.layers[i]);
            let need_in = i > stop || want_input;
            match conv_backward(layer, &cache.inputs[i], &g, lg, need_in) {
                Some(gi) => g = gi,
                None => break,
            }
        }
        input_grads.push(want_input.then_some(g));
    }
    Ok((grad, input_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{build_subsample_pyramid, PyramidConfig};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn all_trainable(specs: &[LayerSpec], seed: u64) -> EncoderParams {
        let mut p = EncoderParams::init(specs, specs.len(), seed).unwrap();
        // non-zero biases so the bias path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in &mut p.layers {
            l.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        p
    }

    /// Direct nested-loop convolution with explicit zero padding.
    fn naive_conv(x: &FeatureTensor, layer: &ConvLayer) -> FeatureTensor {
        let s = layer.spec;
        let p = s.kernel as isize / 2;
        let (ow, oh) = (x.width / s.stride, x.height / s.stride);
        let mut out = FeatureTensor::zeros(ow, oh, s.out_channels);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..s.out_channels {
                    let mut acc = layer.bias[o];
                    for ky in 0..s.kernel {
                        for kx in 0..s.kernel {
                            for i in 0..s.in_channels {
                                let iy = (oy * s.stride) as isize + ky as isize - p;
                                let ix = (ox * s.stride) as isize + kx as isize - p;
                                let v = if iy < 0
                                    || ix < 0
                                    || iy >= x.height as isize
                                    || ix >= x.width as isize
                                {
                                    0.0
                                } else {
                                    x.data[(iy as usize * x.width + ix as usize) * x.depth + i]
                                };
                                let w = layer.weights
                                    [((o * s.kernel + ky) * s.kernel + kx) * s.in_channels + i];
                                acc += w * v;
                            }
                        }
                    }
                    out.data[(oy * ow + ox) * s.out_channels + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let p = EncoderParams::init(&default_layers(16), 2, 1).unwrap();
        let t = encode(&Image::filled(32, 32, [0.0; 3]), &p).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_arithmetic() {
        let p = EncoderParams::init(&default_layers(16), 2, 1).unwrap();
        let t = encode(&random_image(32, 32, 3), &p).unwrap();
        assert_eq!((t.width, t.height, t.depth), (4, 4, 16));
        let t = encode(&random_image(37, 25, 3), &p).unwrap();
        assert_eq!((t.width, t.height), (37 / 8, 25 / 8));
    }

    #[test]
    fn too_small_input() {
        let p = EncoderParams::init(&default_layers(16), 2, 1).unwrap();
        let err = encode(&random_image(7, 32, 3), &p).unwrap_err();
        assert!(matches!(err, Error::InputTooSmall { min: 8, .. }));
    }

    #[test]
    fn single_layer_matches_naive_convolution() {
        for stride in [1, 2] {
            let spec = LayerSpec {
                in_channels: 3,
                out_channels: 5,
                kernel: 3,
                stride,
                relu: false,
            };
            let p = all_trainable(&[spec], 9);
            let img = random_image(8, 8, 4);
            let got = encode(&img, &p).unwrap();
            let want = naive_conv(&FeatureTensor::from_image(&img), &p.layers[0]);
            assert!(got.same_shape(&want));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_levels_share_weights() {
        let p = EncoderParams::init(&default_layers(16), 2, 1).unwrap();
        let img = random_image(64, 64, 5);
        let pyr = build_subsample_pyramid(&img, &PyramidConfig::subsample(&[1, 2, 4])).unwrap();
        let fp = encode_pyramid(&pyr, &p).unwrap();
        let dims: Vec<_> = fp.tensors().map(|t| (t.width, t.height, t.depth)).collect();
        assert_eq!(dims, vec![(8, 8, 16), (4, 4, 16), (2, 2, 16)]);

        let single = encode_pyramid(&ImagePyramid::single(img.clone()), &p).unwrap();
        assert_eq!(single.levels[0].1, encode(&img, &p).unwrap());

        let mut dup = ImagePyramid::single(img.clone());
        dup.levels.push(dup.levels[0].clone());
        let fp = encode_pyramid(&dup, &p).unwrap();
        assert_eq!(fp.levels[0].1, fp.levels[1].1);
    }

    #[test]
    fn pyramid_error_carries_level() {
        let p = EncoderParams::init(&default_layers(16), 2, 1).unwrap();
        let pyr =
            build_subsample_pyramid(&random_image(32, 32, 5), &PyramidConfig::subsample(&[1, 8]))
                .unwrap();
        match encode_pyramid(&pyr, &p).unwrap_err() {
            Error::Level { level, .. } => assert_eq!(level, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn perturbing_a_kernel_changes_every_level() {
        let p = all_trainable(&default_layers(8), 2);
        let img = random_image(32, 32, 6);
        let pyr = build_subsample_pyramid(&img, &PyramidConfig::subsample(&[1, 2])).unwrap();
        let before = encode_pyramid(&pyr, &p).unwrap();
        let mut q = p.clone();
        q.layers[2].weights.iter_mut().for_each(|w| *w += 0.01);
        let after = encode_pyramid(&pyr, &q).unwrap();
        for (a, b) in before.tensors().zip(after.tensors()) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let p = all_trainable(&default_layers(8), 3);
        let (out, cache) = encode_with_cache(&random_image(16, 16, 1), &p).unwrap();
        let g = FeatureTensor::zeros(out.width, out.height, out.depth);
        let (grad, _) = encoder_backward(&p, &[cache], &[g], false).unwrap();
        assert!(grad.is_zero());
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let p = all_trainable(&default_layers(8), 3);
        let (_, cache) = encode_with_cache(&random_image(16, 16, 1), &p).unwrap();
        let g = FeatureTensor::zeros(3, 3, 8);
        assert!(matches!(
            encoder_backward(&p, &[cache.clone()], &[g], false),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            encoder_backward(&p, &[cache], &[], false),
            Err(Error::Contract(_))
        ));
    }

    /// Objective: weighted sum of outputs with fixed random weights.
    fn objective(p: &EncoderParams, imgs: &[Image], weights: &[Vec<f64>]) -> f64 {
        imgs.iter()
            .zip(weights)
            .map(|(img, w)| {
                let t = encode(img, p).unwrap();
                t.data.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let specs = stride2_stack(&[3, 4, 5]);
        let p = all_trainable(&specs, 11);
        let imgs = vec![random_image(8, 8, 21), random_image(4, 4, 22)];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut caches = Vec::new();
        let mut ups = Vec::new();
        let mut weights = Vec::new();
        for img in &imgs {
            let (out, cache) = encode_with_cache(img, &p).unwrap();
            let w: Vec<f64> = (0..out.data.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            ups.push(
                FeatureTensor::from_data(out.width, out.height, out.depth, w.clone()).unwrap(),
            );
            weights.push(w);
            caches.push(cache);
        }
        let (grad, _) = encoder_backward(&p, &caches, &ups, false).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for li in 0..p.layers.len() {
            for wi in 0..p.layers[li].weights.len() + p.layers[li].bias.len() {
                let nw = p.layers[li].weights.len();
                let mut plus = p.clone();
                let mut minus = p.clone();
                if wi < nw {
                    plus.layers[li].weights[wi] += h;
                    minus.layers[li].weights[wi] -= h;
                } else {
                    plus.layers[li].bias[wi - nw] += h;
                    minus.layers[li].bias[wi - nw] -= h;
                }
                let fd = (objective(&plus, &imgs, &weights) - objective(&minus, &imgs, &weights))
                    / (2.0 * h);
                let an = if wi < nw {
                    grad.layers[li].weights[wi]
                } else {
                    grad.layers[li].bias[wi - nw]
                };
                worst = worst.max(rel_err(an, fd));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn multi_level_gradient_is_sum_of_single_levels() {
        let p = all_trainable(&stride2_stack(&[3, 4, 5]), 12);
        let img = random_image(16, 16, 2);
        let pyr = build_subsample_pyramid(&img, &PyramidConfig::subsample(&[1, 2])).unwrap();
        let (fp, caches) = encode_pyramid_with_cache(&pyr, &p).unwrap();
        let ups: Vec<FeatureTensor> = fp
            .tensors()
            .map(|t| {
                let data = (0..t.data.len())
                    .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                    .collect();
                FeatureTensor::from_data(t.width, t.height, t.depth, data).unwrap()
            })
            .collect();
        let (both, _) = encoder_backward(&p, &caches, &ups, false).unwrap();
        let mut sum = p.zero_grad();
        for i in 0..2 {
            let (g, _) = encoder_backward(&p, &caches[i..=i], &ups[i..=i], false).unwrap();
            sum.add_assign(&g);
        }
        for (a, b) in both.layers.iter().zip(&sum.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let p = EncoderParams::init(&default_layers(8), 2, 4).unwrap();
        assert!(!p.layers[0].trainable && p.layers[1].trainable && p.layers[2].trainable);
        let (out, cache) = encode_with_cache(&random_image(16, 16, 8), &p).unwrap();
        let g =
            FeatureTensor::from_data(out.width, out.height, out.depth, vec![1.0; out.data.len()])
                .unwrap();
        let (grad, inputs) = encoder_backward(&p, &[cache], &[g], false).unwrap();
        assert!(grad.layers[0].weights.iter().all(|&v| v == 0.0));
        assert!(grad.layers[2].weights.iter().any(|&v| v != 0.0));
        assert!(inputs[0].is_none());
    }
}
