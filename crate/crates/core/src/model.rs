//! Encoder + vocabulary, with the full descriptor forward/backward chain
//! `image pyramid -> encoder -> residual aggregation -> normalization`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    encode, encode_pyramid, encode_pyramid_with_cache, encoder_backward, EncoderCache, EncoderGrad,
    EncoderParams, FeaturePyramid,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::{self, ImagePyramid, PyramidConfig};
use crate::vlad::{
    aggregate_backward, aggregate_residuals, normalize, normalize_backward,
    spatial_pyramid_descriptor, Variant, VladDescriptor, VocabGrad, Vocabulary,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    EncoderWeights(usize),
    EncoderBias(usize),
    Centers,
    AssignWeights,
    AssignBiases,
}

impl ParamGroup {
    /// Cluster centers define the residual geometry and are not decayed.
    pub fn decays(self) -> bool {
        !matches!(self, ParamGroup::Centers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: EncoderGrad,
    pub vocab: VocabGrad,
}

impl ModelGrad {
    pub fn add_assign(&mut self, o: &ModelGrad) {
        self.encoder.add_assign(&o.encoder);
        self.vocab.add_assign(&o.vocab);
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.vocab.scale(s);
    }

    /// Gradient slices in the same order as [`Model::trainable_mut`].
    pub fn groups(&self, model: &Model) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (l, g) in model.encoder.layers.iter().zip(&self.encoder.layers) {
            if l.trainable {
                out.push(&g.weights);
                out.push(&g.bias);
            }
        }
        out.push(&self.vocab.centers);
        out.push(&self.vocab.weights);
        out.push(&self.vocab.biases);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.encoder.is_zero()
            && self
                .vocab
                .centers
                .iter()
                .chain(&self.vocab.weights)
                .chain(&self.vocab.biases)
                .all(|&v| v == 0.0)
    }
}

/// Everything the backward pass needs from one image's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: FeaturePyramid,
    encoder: Vec<EncoderCache>,
    raw: VladDescriptor,
}

impl Model {
    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            encoder: self.encoder.zero_grad(),
            vocab: self.vocab.zero_grad(),
        }
    }

    pub fn descriptor_len(&self) -> usize {
        self.vocab.descriptor_len()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.vocab.is_finite()
    }

    /// Trainable parameter groups (frozen encoder layers are skipped).
    pub fn trainable_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            if l.trainable {
                out.push((ParamGroup::EncoderWeights(i), &mut l.weights));
                out.push((ParamGroup::EncoderBias(i), &mut l.bias));
            }
        }
        out.push((ParamGroup::Centers, &mut self.vocab.centers));
        out.push((ParamGroup::AssignWeights, &mut self.vocab.assign_weights));
        out.push((ParamGroup::AssignBiases, &mut self.vocab.assign_biases));
        out
    }

    /// Normalized multi-resolution descriptor of a prepared pyramid.
    pub fn descriptor(&self, pyr: &ImagePyramid) -> Result<VladDescriptor> {
        let fp = encode_pyramid(pyr, &self.encoder)?;
        normalize(&aggregate_residuals(&fp, &self.vocab)?)
    }

    pub fn forward(&self, pyr: &ImagePyramid) -> Result<(VladDescriptor, ForwardCache)> {
        let (features, encoder) = encode_pyramid_with_cache(pyr, &self.encoder)?;
        let raw = aggregate_residuals(&features, &self.vocab)?;
        let desc = normalize(&raw)?;
        Ok((
            desc,
            ForwardCache {
                features,
                encoder,
                raw,
            },
        ))
    }

    /// Parameter gradients given `dL/d(normalized descriptor)`.
    pub fn backward(&self, cache: &ForwardCache, g_desc: &[f64]) -> Result<ModelGrad> {
        if g_desc.len() != cache.raw.len() {
            return Err(Error::Contract(format!(
                "descriptor gradient has length {}, expected {}",
                g_desc.len(),
                cache.raw.len()
            )));
        }
        let mut vocab = self.vocab.zero_grad();
        if g_desc.iter().all(|&g| g == 0.0) {
            return Ok(ModelGrad {
                encoder: self.encoder.zero_grad(),
                vocab,
            });
        }
        let g_raw = normalize_backward(&cache.raw.values, cache.raw.block_dim, g_desc);
        let g_feat = aggregate_backward(&cache.features, &self.vocab, &g_raw, &mut vocab)?;
        let (encoder, _) = encoder_backward(&self.encoder, &cache.encoder, &g_feat, false)?;
        Ok(ModelGrad { encoder, vocab })
    }
}

/// Test-time descriptor of one image.
///
/// `BR` uses the base image only, `BR_MLR` the whole configured pyramid
/// (same output size), and `BR_SPC` the 21-patch spatial pyramid over the
/// base resolution's feature map.
pub fn describe(
    img: &Image,
    model: &Model,
    variant: Variant,
    cfg: &PyramidConfig,
) -> Result<VladDescriptor> {
    let mut desc = match variant {
        Variant::Br => model.descriptor(&ImagePyramid::single(img.clone()))?,
        Variant::BrMlr => model.descriptor(&pyramid::build(img, cfg)?)?,
        Variant::BrSpc => {
            let t = encode(img, &model.encoder)?;
            spatial_pyramid_descriptor(&t, &model.vocab)?
        }
    };
    desc.variant = variant;
    Ok(desc)
}

/// Euclidean distance and its gradient with respect to `a`
/// (zero at coincident points).
pub(crate) fn dist_and_dir(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = crate::vlad::l2(&diff);
    if d == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    (d, diff.into_iter().map(|v| v / d).collect())
}

/// Objective of one triplet set and its gradients with respect to the query,
/// positive and negative descriptors.
///
/// Returns `(sum of hinge terms, active count, grads)` where the gradients
/// are of `sum / active` (zero when nothing is active).
pub fn triplet_objective(
    q: &[f64],
    p: &[f64],
    negs: &[&[f64]],
    margin: f64,
) -> (f64, usize, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let (dp, dir_p) = dist_and_dir(q, p);
    let mut gq = vec![0.0; q.len()];
    let mut gp = vec![0.0; q.len()];
    let mut gn = vec![vec![0.0; q.len()]; negs.len()];
    let mut loss = 0.0;
    let mut active = 0usize;
    for (n, g) in negs.iter().zip(gn.iter_mut()) {
        let (dn, dir_n) = dist_and_dir(q, n);
        let t = dp - dn + margin;
        if t > 0.0 {
            loss += t;
            active += 1;
            for k in 0..q.len() {
                gq[k] += dir_p[k] - dir_n[k];
                gp[k] -= dir_p[k];
                g[k] += dir_n[k];
            }
        }
    }
    if active > 0 {
        let s = 1.0 / active as f64;
        gq.iter_mut().chain(gp.iter_mut()).for_each(|v| *v *= s);
        gn.iter_mut().flatten().for_each(|v| *v *= s);
    }
    (loss, active, gq, gp, gn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckMode {
    /// Encoder frozen, only vocabulary parameters checked.
    VocabOnly,
    /// Every encoder layer and the vocabulary.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub loss: f64,
}

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding do not dominate.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Toy triplet instance used by [`gradient_check`]: 8x8 images, a two-level
/// `{1, 2}` pyramid, a 3 -> 4 -> 4 stride-2 encoder and 3 clusters.
pub fn gradcheck_instance(seed: u64, mode: GradCheckMode) -> (Model, Vec<ImagePyramid>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = crate::encoder::stride2_stack(&[3, 4, 4]);
    let trainable = match mode {
        GradCheckMode::VocabOnly => 0,
        GradCheckMode::Full => specs.len(),
    };
    let mut encoder = EncoderParams::init(&specs, trainable, rng.random()).expect("valid specs");
    for l in &mut encoder.layers {
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(0.0..0.2));
    }
    let dim = encoder.depth();
    let centers = (0..3 * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut vocab = Vocabulary::from_centers(centers, dim, 2.0).expect("valid centers");
    vocab
        .assign_weights
        .iter_mut()
        .for_each(|w| *w += rng.random_range(-0.2..0.2));
    vocab
        .assign_biases
        .iter_mut()
        .for_each(|b| *b += rng.random_range(-0.2..0.2));
    let cfg = PyramidConfig::subsample(&[1, 2]);
    let pyrs = (0..4)
        .map(|_| {
            // distinct color gradients plus noise keep the four descriptors
            // well apart, so the distances stay in their smooth regime
            let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let slope: [f32; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let img = Image::from_fn(8, 8, |x, y| {
                let t = (x + y) as f32 / 14.0;
                std::array::from_fn(|c| {
                    (base[c] + slope[c] * t + 0.2 * rng.random::<f32>()).clamp(0.0, 1.0)
                })
            });
            pyramid::build(&img, &cfg).expect("valid pyramid")
        })
        .collect();
    // margin large enough to keep every hinge active: distances between unit
    // vectors never exceed 2
    (Model { encoder, vocab }, pyrs, 2.5)
}

fn instance_objective(model: &Model, pyrs: &[ImagePyramid], margin: f64) -> Result<f64> {
    let descs: Vec<VladDescriptor> = pyrs
        .iter()
        .map(|p| model.descriptor(p))
        .collect::<Result<_>>()?;
    let negs: Vec<&[f64]> = descs[2..].iter().map(|d| d.values.as_slice()).collect();
    let (loss, active, ..) = triplet_objective(&descs[0].values, &descs[1].values, &negs, margin);
    Ok(if active == 0 {
        0.0
    } else {
        loss / active as f64
    })
}

/// Analytic gradient of the triplet objective (query, positive, two
/// negatives) against central finite differences with step `h = 1e-4`,
/// over every trainable parameter.
pub fn gradient_check(seed: u64, mode: GradCheckMode) -> Result<GradCheckReport> {
    let (model, pyrs, margin) = gradcheck_instance(seed, mode);
    gradient_check_instance(&model, &pyrs, margin)
}

pub fn gradient_check_instance(
    model: &Model,
    pyrs: &[ImagePyramid],
    margin: f64,
) -> Result<GradCheckReport> {
    const H: f64 = 1e-4;
    let mut caches = Vec::new();
    let mut descs = Vec::new();
    for p in pyrs {
        let (d, c) = model.forward(p)?;
        descs.push(d);
        caches.push(c);
    }
    let negs: Vec<&[f64]> = descs[2..].iter().map(|d| d.values.as_slice()).collect();
    let (loss, active, gq, gp, gn) =
        triplet_objective(&descs[0].values, &descs[1].values, &negs, margin);
    let mut grad = model.zero_grad();
    let mut ups = vec![gq, gp];
    ups.extend(gn);
    for (c, g) in caches.iter().zip(&ups) {
        grad.add_assign(&model.backward(c, g)?);
    }
    let objective = if active == 0 {
        0.0
    } else {
        loss / active as f64
    };

    let analytic: Vec<Vec<f64>> = grad.groups(model).into_iter().map(|g| g.to_vec()).collect();
    let mut probe = model.clone();
    let n_groups = analytic.len();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for gi in 0..n_groups {
        let len = analytic[gi].len();
        for i in 0..len {
            let orig = probe.trainable_mut()[gi].1[i];
            probe.trainable_mut()[gi].1[i] = orig + H;
            let plus = instance_objective(&probe, pyrs, margin)?;
            probe.trainable_mut()[gi].1[i] = orig - H;
            let minus = instance_objective(&probe, pyrs, margin)?;
            probe.trainable_mut()[gi].1[i] = orig;
            let fd = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_error(analytic[gi][i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        params_checked: checked,
        loss: objective,
    })
}
