//! Trainable VLAD pooling over multi-resolution feature pyramids.
//!
//! Every level's features are soft-assigned to a shared vocabulary and the
//! per-level residual sums are added into one `V x D` block matrix, so the
//! descriptor size does not depend on the number of pyramid levels. In the
//! scale-specific ablation each level owns a disjoint slice of the
//! clusters instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// Target ratio between the closest and second-closest soft-assignment
/// weights, on average over the initialization sample.
pub const ASSIGNMENT_RATIO: f64 = 100.0;

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Shared,
    /// Level `i` of the pyramid uses a contiguous block of `counts[i]` clusters.
    ScaleSpecific {
        counts: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub clusters: usize,
    pub dim: usize,
    /// `V x D`, cluster-major.
    pub centers: Vec<f64>,
    /// `V x D`; logits are `assign_weights[v] . p + assign_biases[v]`.
    pub assign_weights: Vec<f64>,
    pub assign_biases: Vec<f64>,
    pub mode: VocabMode,
}

impl Vocabulary {
    /// Builds the NetVLAD parametrization `w_v = 2 alpha c_v`,
    /// `b_v = -alpha |c_v|^2` from given centers.
    pub fn from_centers(centers: Vec<f64>, dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "{} center values do not form vectors of dimension {dim}",
                centers.len()
            )));
        }
        let clusters = centers.len() / dim;
        let assign_weights = centers.iter().map(|c| 2.0 * alpha * c).collect();
        let assign_biases = centers
            .chunks_exact(dim)
            .map(|c| -alpha * c.iter().map(|x| x * x).sum::<f64>())
            .collect();
        Ok(Self {
            clusters,
            dim,
            centers,
            assign_weights,
            assign_biases,
            mode: VocabMode::Shared,
        })
    }

    #[inline]
    pub fn center(&self, v: usize) -> &[f64] {
        &self.centers[v * self.dim..(v + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, v: usize) -> &[f64] {
        &self.assign_weights[v * self.dim..(v + 1) * self.dim]
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters * self.dim
    }

    /// Cluster range aggregated by pyramid level `level` out of `levels`.
    pub fn level_range(&self, level: usize, levels: usize) -> Result<std::ops::Range<usize>> {
        match &self.mode {
            VocabMode::Shared => Ok(0..self.clusters),
            VocabMode::ScaleSpecific { counts } => {
                if counts.len() != levels {
                    return Err(Error::Contract(format!(
                        "scale-specific vocabulary has {} partitions for {levels} levels",
                        counts.len()
                    )));
                }
                let start: usize = counts[..level].iter().sum();
                Ok(start..start + counts[level])
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.centers
            .iter()
            .chain(&self.assign_weights)
            .chain(&self.assign_biases)
            .all(|v| v.is_finite())
    }

    pub fn zero_grad(&self) -> VocabGrad {
        VocabGrad {
            centers: vec![0.0; self.centers.len()],
            weights: vec![0.0; self.assign_weights.len()],
            biases: vec![0.0; self.assign_biases.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabGrad {
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl VocabGrad {
    pub fn add_assign(&mut self, o: &VocabGrad) {
        self.centers
            .iter_mut()
            .zip(&o.centers)
            .for_each(|(a, b)| *a += b);
        self.weights
            .iter_mut()
            .zip(&o.weights)
            .for_each(|(a, b)| *a += b);
        self.biases
            .iter_mut()
            .zip(&o.biases)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.centers
            .iter_mut()
            .chain(self.weights.iter_mut())
            .chain(self.biases.iter_mut())
            .for_each(|v| *v *= s);
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns `k x D` centers.
pub fn kmeans(sample: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<f64>> {
    let dim = sample.first().map_or(0, |p| p.len());
    if k == 0 || dim == 0 {
        return Err(Error::Contract(
            "k-means needs k >= 1 and non-empty vectors".into(),
        ));
    }
    if sample.len() < k {
        return Err(Error::DegenerateVocabulary(format!(
            "{} sample vectors for {k} clusters",
            sample.len()
        )));
    }
    if sample.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("sample vectors differ in dimension".into()));
    }
    if sample.iter().all(|p| p == &sample[0]) {
        return Err(Error::DegenerateVocabulary(
            "all sample vectors are identical".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![sample[rng.random_range(0..sample.len())].clone()];
    let mut d2: Vec<f64> = sample.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateVocabulary(format!(
                "only {} distinct sample vectors for {k} clusters",
                centers.len()
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = sample[pick].clone();
        for (dv, p) in d2.iter_mut().zip(sample) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; sample.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, p) in assign.iter_mut().zip(sample) {
            *a = nearest(&centers, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(sample) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift = 0.0f64;
        for v in 0..k {
            let new = if counts[v] == 0 {
                // re-seed an empty cluster at the worst-fit point
                let far = sample
                    .iter()
                    .zip(&assign)
                    .map(|(p, &a)| sq_dist(p, &centers[a]))
                    .enumerate()
                    .fold(
                        (0, -1.0),
                        |best, (i, d)| if d > best.1 { (i, d) } else { best },
                    )
                    .0;
                sample[far].clone()
            } else {
                sums[v].iter().map(|s| s / counts[v] as f64).collect()
            };
            shift = shift.max(sq_dist(&new, &centers[v]));
            centers[v] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(centers.concat())
}

/// Index and squared distance of the nearest center (ties to the lower index).
fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    centers
        .iter()
        .map(|c| sq_dist(p, c))
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, d)| if d < best.1 { (i, d) } else { best },
        )
}

/// Softmax sharpness such that, on average over the sample, the log-ratio
/// of the two largest assignment weights equals `ln(ASSIGNMENT_RATIO)`.
pub fn calibrate_alpha(sample: &[Vec<f64>], centers: &[f64], dim: usize) -> Result<f64> {
    let k = centers.len() / dim;
    if k < 2 {
        return Ok(1.0);
    }
    let mut gap = 0.0;
    for p in sample {
        let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
        for c in centers.chunks_exact(dim) {
            let d = sq_dist(p, c);
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        gap += d2 - d1;
    }
    gap /= sample.len() as f64;
    if !(gap > 0.0) {
        return Err(Error::DegenerateVocabulary(
            "sample is equidistant from its two closest centers".into(),
        ));
    }
    Ok(ASSIGNMENT_RATIO.ln() / gap)
}

/// k-means vocabulary with calibrated soft-assignment parameters.
pub fn init_vocabulary(sample: &[Vec<f64>], clusters: usize, seed: u64) -> Result<Vocabulary> {
    let centers = kmeans(sample, clusters, seed)?;
    let dim = sample[0].len();
    let alpha = calibrate_alpha(sample, &centers, dim)?;
    Vocabulary::from_centers(centers, dim, alpha)
}

/// One vocabulary partition per pyramid level, each clustered on that
/// level's features only.
pub fn init_scale_specific(
    per_level: &[Vec<Vec<f64>>],
    counts: &[usize],
    seed: u64,
) -> Result<Vocabulary> {
    if per_level.len() != counts.len() {
        return Err(Error::Contract(format!(
            "{} level samples for {} partitions",
            per_level.len(),
            counts.len()
        )));
    }
    let dim = per_level
        .first()
        .and_then(|s| s.first())
        .map_or(0, |p| p.len());
    let mut centers = Vec::new();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (i, (sample, &k)) in per_level.iter().zip(counts).enumerate() {
        let part = init_vocabulary(sample, k, seed.wrapping_add(i as u64))?;
        centers.extend(part.centers);
        weights.extend(part.assign_weights);
        biases.extend(part.assign_biases);
    }
    Ok(Vocabulary {
        clusters: counts.iter().sum(),
        dim,
        centers,
        assign_weights: weights,
        assign_biases: biases,
        mode: VocabMode::ScaleSpecific {
            counts: counts.to_vec(),
        },
    })
}

/// Splits `clusters` proportionally to `reference` with largest-remainder
/// rounding (e.g. `{34, 18, 12}` of 64 scaled to 8 gives `{4, 2, 2}`).
pub fn proportional_partition(reference: &[usize], clusters: usize) -> Vec<usize> {
    let total: usize = reference.iter().sum();
    let exact: Vec<f64> = reference
        .iter()
        .map(|&r| r as f64 * clusters as f64 / total as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = clusters - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Softmax weights of `p` over the clusters in `range`, written to `out`.
fn softmax_into(p: &[f64], vocab: &Vocabulary, range: std::ops::Range<usize>, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(range) {
        *o = vocab
            .weight(v)
            .iter()
            .zip(p)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + vocab.assign_biases[v];
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Soft-assignment weights of one feature over all clusters.
pub fn soft_assign(p: &[f64], vocab: &Vocabulary) -> Vec<f64> {
    let mut out = vec![0.0; vocab.clusters];
    softmax_into(p, vocab, 0..vocab.clusters, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormState {
    Raw,
    IntraNormalized,
    FullyNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BR")]
    Br,
    #[serde(rename = "BR_MLR")]
    BrMlr,
    #[serde(rename = "BR_SPC")]
    BrSpc,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Br => 0,
            Variant::BrMlr => 1,
            Variant::BrSpc => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Variant::Br),
            1 => Some(Variant::BrMlr),
            2 => Some(Variant::BrSpc),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '+'], "_").as_str() {
            "BR" => Ok(Variant::Br),
            "BR_MLR" | "MLR" => Ok(Variant::BrMlr),
            "BR_SPC" | "SPC" => Ok(Variant::BrSpc),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Br => "BR",
            Variant::BrMlr => "BR_MLR",
            Variant::BrSpc => "BR_SPC",
        })
    }
}

impl NormState {
    pub fn tag(self) -> u8 {
        match self {
            NormState::Raw => 0,
            NormState::IntraNormalized => 1,
            NormState::FullyNormalized => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(NormState::Raw),
            1 => Some(NormState::IntraNormalized),
            2 => Some(NormState::FullyNormalized),
            _ => None,
        }
    }
}

/// Global descriptor, laid out as `blocks` consecutive blocks of `block_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    pub values: Vec<f64>,
    pub block_dim: usize,
    pub state: NormState,
    pub variant: Variant,
}

impl VladDescriptor {
    pub fn raw(values: Vec<f64>, block_dim: usize) -> Self {
        Self {
            values,
            block_dim,
            state: NormState::Raw,
            variant: Variant::Br,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.block_dim)
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

#[inline]
pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Raw residual sums of one feature map over the clusters in `range`,
/// added into `out` (which covers all clusters).
fn accumulate_level(
    t: &FeatureTensor,
    vocab: &Vocabulary,
    range: std::ops::Range<usize>,
    out: &mut [f64],
) {
    let d = vocab.dim;
    let mut s = vec![0.0; range.len()];
    let mut mass = vec![0.0; range.len()];
    let mut wsum = vec![0.0; range.len() * d];
    for p in t.features() {
        softmax_into(p, vocab, range.clone(), &mut s);
        for (j, &sv) in s.iter().enumerate() {
            mass[j] += sv;
            wsum[j * d..(j + 1) * d]
                .iter_mut()
                .zip(p)
                .for_each(|(a, x)| *a += sv * x);
        }
    }
    for (j, v) in range.enumerate() {
        let c = vocab.center(v);
        for k in 0..d {
            out[v * d + k] += wsum[j * d + k] - mass[j] * c[k];
        }
    }
}

/// Soft-assigned residuals summed over cells and then over levels. In
/// scale-specific mode, level `i` only contributes to its own clusters.
pub fn aggregate_residuals(fp: &FeaturePyramid, vocab: &Vocabulary) -> Result<VladDescriptor> {
    let mut out = vec![0.0; vocab.descriptor_len()];
    let levels = fp.levels.len();
    for (i, t) in fp.tensors().enumerate() {
        if t.depth != vocab.dim {
            return Err(Error::Contract(format!(
                "level {i} has depth {} but the vocabulary has dimension {}",
                t.depth, vocab.dim
            )));
        }
        let range = vocab.level_range(i, levels)?;
        accumulate_level(t, vocab, range, &mut out);
    }
    Ok(VladDescriptor::raw(out, vocab.dim))
}

/// L2-normalizes every block independently; all-zero blocks stay zero.
pub fn intra_normalize(desc: &VladDescriptor) -> VladDescriptor {
    let mut values = desc.values.clone();
    for block in values.chunks_exact_mut(desc.block_dim) {
        let n = l2(block);
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v /= n);
        }
    }
    VladDescriptor {
        values,
        state: NormState::IntraNormalized,
        ..desc.clone()
    }
}

/// Intra-normalization followed by global L2 normalization.
pub fn normalize(desc: &VladDescriptor) -> Result<VladDescriptor> {
    if desc.state == NormState::FullyNormalized {
        return Err(Error::Contract("descriptor is already normalized".into()));
    }
    let mut out = intra_normalize(desc);
    let n = out.norm();
    if n == 0.0 {
        return Err(Error::ZeroDescriptor);
    }
    out.values.iter_mut().for_each(|v| *v /= n);
    out.state = NormState::FullyNormalized;
    Ok(out)
}

/// Gradient of `normalize` with respect to the raw values, given the
/// gradient `g` with respect to the normalized output.
pub fn normalize_backward(raw: &[f64], block_dim: usize, g: &[f64]) -> Vec<f64> {
    let mut u = raw.to_vec();
    let mut block_norms = Vec::with_capacity(raw.len() / block_dim);
    for block in u.chunks_exact_mut(block_dim) {
        let n = l2(block);
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v /= n);
        }
        block_norms.push(n);
    }
    let r = l2(&u);
    if r == 0.0 {
        return vec![0.0; raw.len()];
    }
    let y: Vec<f64> = u.iter().map(|v| v / r).collect();
    let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    let gu: Vec<f64> = g
        .iter()
        .zip(&y)
        .map(|(gv, yv)| (gv - yv * yg) / r)
        .collect();
    let mut out = vec![0.0; raw.len()];
    for (b, &n) in block_norms.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        let span = b * block_dim..(b + 1) * block_dim;
        let ub = &u[span.clone()];
        let gb = &gu[span.clone()];
        let dot: f64 = ub.iter().zip(gb).map(|(a, c)| a * c).sum();
        for (o, (gv, uv)) in out[span].iter_mut().zip(gb.iter().zip(ub)) {
            *o = (gv - uv * dot) / n;
        }
    }
    out
}

/// Backward pass of [`aggregate_residuals`]: given `g_raw = dL/dm`
/// (`V x D`), accumulates vocabulary gradients into `vgrad` and returns the
/// gradient with respect to every level's features.
pub fn aggregate_backward(
    fp: &FeaturePyramid,
    vocab: &Vocabulary,
    g_raw: &[f64],
    vgrad: &mut VocabGrad,
) -> Result<Vec<FeatureTensor>> {
    let d = vocab.dim;
    let levels = fp.levels.len();
    let mut out = Vec::with_capacity(levels);
    for (i, t) in fp.tensors().enumerate() {
        if t.depth != d {
            return Err(Error::Contract(format!(
                "level {i} has depth {} but the vocabulary has dimension {d}",
                t.depth
            )));
        }
        let range = vocab.level_range(i, levels)?;
        let k = range.len();
        let mut gt = FeatureTensor::zeros(t.width, t.height, t.depth);
        let mut s = vec![0.0; k];
        let mut gs = vec![0.0; k];
        for (p, gp) in t.features().zip(gt.data.chunks_exact_mut(d)) {
            softmax_into(p, vocab, range.clone(), &mut s);
            for (j, v) in range.clone().enumerate() {
                let c = vocab.center(v);
                let gm = &g_raw[v * d..(v + 1) * d];
                let mut dot = 0.0;
                for q in 0..d {
                    dot += gm[q] * (p[q] - c[q]);
                    gp[q] += s[j] * gm[q];
                    vgrad.centers[v * d + q] -= s[j] * gm[q];
                }
                gs[j] = dot;
            }
            let sg: f64 = s.iter().zip(&gs).map(|(a, b)| a * b).sum();
            for (j, v) in range.clone().enumerate() {
                let ga = s[j] * (gs[j] - sg);
                if ga == 0.0 {
                    continue;
                }
                vgrad.biases[v] += ga;
                let w = vocab.weight(v);
                for q in 0..d {
                    vgrad.weights[v * d + q] += ga * p[q];
                    gp[q] += ga * w[q];
                }
            }
        }
        out.push(gt);
    }
    Ok(out)
}

/// Cell ranges of a `cells`-way split of `extent` (floor boundaries, so
/// some cells may be empty when `extent < cells`).
pub fn grid_bounds(extent: usize, cells: usize) -> Vec<std::ops::Range<usize>> {
    (0..cells)
        .map(|i| (i * extent / cells)..((i + 1) * extent / cells))
        .collect()
}

pub const SPC_GRIDS: [usize; 3] = [1, 2, 4];

/// Number of patches in the spatial pyramid (1 + 4 + 16).
pub fn spc_patches() -> usize {
    SPC_GRIDS.iter().map(|g| g * g).sum()
}

/// Spatial-pyramid concatenation over one feature map: each of the 21 grid
/// patches gets its own normalized VLAD, the patches are concatenated in
/// grid order (1x1, then 2x2 row-major, then 4x4 row-major) and the result
/// is L2-normalized once more. Empty or featureless patches contribute zeros.
pub fn spatial_pyramid_descriptor(t: &FeatureTensor, vocab: &Vocabulary) -> Result<VladDescriptor> {
    if t.depth != vocab.dim {
        return Err(Error::Contract(format!(
            "feature depth {} does not match vocabulary dimension {}",
            t.depth, vocab.dim
        )));
    }
    let range = vocab.level_range(0, 1)?;
    let block = vocab.descriptor_len();
    let mut values = Vec::with_capacity(block * spc_patches());
    for &g in &SPC_GRIDS {
        let xs = grid_bounds(t.width, g);
        let ys = grid_bounds(t.height, g);
        for yr in &ys {
            for xr in &xs {
                let mut patch = vec![0.0; block];
                if !xr.is_empty() && !yr.is_empty() {
                    let mut sub = Vec::with_capacity(xr.len() * yr.len() * t.depth);
                    for y in yr.clone() {
                        for x in xr.clone() {
                            sub.extend_from_slice(t.cell(x, y));
                        }
                    }
                    let sub = FeatureTensor::from_data(xr.len(), yr.len(), t.depth, sub)?;
                    accumulate_level(&sub, vocab, range.clone(), &mut patch);
                    if let Ok(n) = normalize(&VladDescriptor::raw(patch.clone(), vocab.dim)) {
                        patch = n.values;
                    }
                }
                values.extend(patch);
            }
        }
    }
    let n = l2(&values);
    if n == 0.0 {
        return Err(Error::ZeroDescriptor);
    }
    values.iter_mut().for_each(|v| *v /= n);
    Ok(VladDescriptor {
        values,
        block_dim: vocab.dim,
        state: NormState::FullyNormalized,
        variant: Variant::BrSpc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentHistogram {
    /// `counts[level][v]`: features of that level whose strongest
    /// assignment is cluster `v`.
    pub counts: Vec<Vec<usize>>,
    /// `shares[level][v]`: fraction of cluster `v`'s features that come
    /// from that level (zero for clusters no feature chose).
    pub shares: Vec<Vec<f64>>,
}

/// Hard (argmax) assignment counts per level and cluster.
pub fn assignment_histogram(fp: &FeaturePyramid, vocab: &Vocabulary) -> AssignmentHistogram {
    let counts: Vec<Vec<usize>> = fp
        .tensors()
        .map(|t| {
            let mut c = vec![0usize; vocab.clusters];
            for p in t.features() {
                let best = (0..vocab.clusters)
                    .map(|v| {
                        vocab
                            .weight(v)
                            .iter()
                            .zip(p)
                            .map(|(w, x)| w * x)
                            .sum::<f64>()
                            + vocab.assign_biases[v]
                    })
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, a)| if a > b.1 { (i, a) } else { b },
                    )
                    .0;
                c[best] += 1;
            }
            c
        })
        .collect();
    let totals: Vec<usize> = (0..vocab.clusters)
        .map(|v| counts.iter().map(|c| c[v]).sum())
        .collect();
    let shares = counts
        .iter()
        .map(|c| {
            c.iter()
                .zip(&totals)
                .map(|(&n, &t)| if t == 0 { 0.0 } else { n as f64 / t as f64 })
                .collect()
        })
        .collect();
    AssignmentHistogram { counts, shares }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng_vocab(v: usize, d: usize, seed: u64) -> Vocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut voc = Vocabulary::from_centers(
            (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d,
            1.5,
        )
        .unwrap();
        voc.assign_weights
            .iter_mut()
            .for_each(|w| *w += rng.random_range(-0.3..0.3));
        voc.assign_biases
            .iter_mut()
            .for_each(|b| *b += rng.random_range(-0.3..0.3));
        voc
    }

    fn rng_tensor(w: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
        FeatureTensor::from_data(
            w,
            h,
            d,
            (0..w * h * d)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kmeans_fixed_point_on_distinct_points() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0],
            vec![5.0, 5.0],
            vec![-3.0, 2.0],
            vec![9.0, -1.0],
        ];
        let c = kmeans(&pts, 4, 7).unwrap();
        let mut got: Vec<Vec<f64>> = c.chunks(2).map(|c| c.to_vec()).collect();
        let mut want = pts.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_means_on_a_line() {
        let xs = [0.0, 0.0, 10.0, 10.0];
        let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        // exhaustive oracle over every 2-partition
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << 4) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..4).map(|i| (mask >> i & 1 == 1, xs[i])).fold(
                (vec![], vec![]),
                |(mut a, mut b), (left, x)| {
                    if left {
                        a.push(x)
                    } else {
                        b.push(x)
                    }
                    (a, b)
                },
            );
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                let mut c = vec![ma, mb];
                c.sort_by(|x, y| x.total_cmp(y));
                best = (cost, c);
            }
        }
        for seed in 0..5 {
            let mut c = kmeans(&pts, 2, seed).unwrap();
            c.sort_by(|x, y| x.total_cmp(y));
            assert_eq!(c, best.1);
        }
    }

    #[test]
    fn degenerate_sample_rejected() {
        let pts = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(
            init_vocabulary(&pts, 3, 0),
            Err(Error::DegenerateVocabulary(_))
        ));
        let two = vec![vec![0.0], vec![0.0], vec![1.0]];
        assert!(matches!(
            init_vocabulary(&two, 3, 0),
            Err(Error::DegenerateVocabulary(_))
        ));
    }

    #[test]
    fn calibrated_alpha_reaches_target_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let vocab = init_vocabulary(&pts, 5, 1).unwrap();
        let mean_ratio: f64 = pts
            .iter()
            .map(|p| {
                let mut s = soft_assign(p, &vocab);
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                s[0] / s[1]
            })
            .sum::<f64>()
            / pts.len() as f64;
        assert!(mean_ratio >= ASSIGNMENT_RATIO, "{mean_ratio}");
    }

    #[test]
    fn doubling_alpha_sharpens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let centers = kmeans(&pts, 4, 2).unwrap();
        let a = calibrate_alpha(&pts, &centers, 2).unwrap();
        let v1 = Vocabulary::from_centers(centers.clone(), 2, a).unwrap();
        let v2 = Vocabulary::from_centers(centers, 2, 2.0 * a).unwrap();
        for p in &pts {
            let m1 = soft_assign(p, &v1).into_iter().fold(0.0, f64::max);
            let m2 = soft_assign(p, &v2).into_iter().fold(0.0, f64::max);
            assert!(m2 >= m1 - 1e-15);
        }
    }

    #[test]
    fn soft_assign_cases() {
        let v1 = Vocabulary::from_centers(vec![0.3, -0.2], 2, 3.0).unwrap();
        assert_eq!(soft_assign(&[5.0, 1.0], &v1), vec![1.0]);

        let sym = Vocabulary::from_centers(vec![1.0, 0.0, -1.0, 0.0], 2, 2.0).unwrap();
        let s = soft_assign(&[0.0, 0.7], &sym);
        assert_eq!(s, vec![0.5, 0.5]);

        let voc = rng_vocab(4, 3, 9);
        let p = [0.3, -0.8, 1.1];
        let logits: Vec<f64> = (0..4)
            .map(|v| {
                (0..3)
                    .map(|k| voc.assign_weights[v * 3 + k] * p[k])
                    .sum::<f64>()
                    + voc.assign_biases[v]
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (s, l) in soft_assign(&p, &voc).iter().zip(&logits) {
            assert!((s - l.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn residual_of_feature_at_center_is_zero() {
        let voc = Vocabulary::from_centers(vec![0.25, -1.5, 3.0], 3, 1.0).unwrap();
        let t = FeatureTensor::from_data(1, 1, 3, vec![0.25, -1.5, 3.0]).unwrap();
        let fp = FeaturePyramid {
            levels: vec![(1.0, t)],
        };
        assert!(aggregate_residuals(&fp, &voc)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    /// Direct triple loop over levels, cells and clusters.
    fn oracle(fp: &FeaturePyramid, voc: &Vocabulary) -> Vec<f64> {
        let (v, d) = (voc.clusters, voc.dim);
        let mut m = vec![0.0; v * d];
        for (_, t) in &fp.levels {
            for cell in 0..t.cells() {
                let p = &t.data[cell * d..(cell + 1) * d];
                let logits: Vec<f64> = (0..v)
                    .map(|j| {
                        (0..d)
                            .map(|k| voc.assign_weights[j * d + k] * p[k])
                            .sum::<f64>()
                            + voc.assign_biases[j]
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..v {
                    let s = logits[j].exp() / z;
                    for k in 0..d {
                        m[j * d + k] += s * (p[k] - voc.centers[j * d + k]);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn hand_written_two_level_instance() {
        let voc = Vocabulary {
            clusters: 2,
            dim: 2,
            centers: vec![0.0, 0.0, 1.0, 1.0],
            assign_weights: vec![0.5, -0.25, 1.0, 0.75],
            assign_biases: vec![0.1, -0.2],
            mode: VocabMode::Shared,
        };
        let fp = FeaturePyramid {
            levels: vec![
                (
                    1.0,
                    FeatureTensor::from_data(2, 1, 2, vec![0.2, 0.4, 1.5, 0.9]).unwrap(),
                ),
                (
                    2.0,
                    FeatureTensor::from_data(1, 1, 2, vec![-0.3, 0.8]).unwrap(),
                ),
            ],
        };
        let got = aggregate_residuals(&fp, &voc).unwrap();
        for (a, b) in got.values.iter().zip(oracle(&fp, &voc)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
        }
    }

    #[test]
    fn duplicate_levels_double_the_raw_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let voc = rng_vocab(3, 4, 5);
        let t = rng_tensor(3, 2, 4, &mut rng);
        let one = aggregate_residuals(
            &FeaturePyramid {
                levels: vec![(1.0, t.clone())],
            },
            &voc,
        )
        .unwrap();
        let two = aggregate_residuals(
            &FeaturePyramid {
                levels: vec![(1.0, t.clone()), (2.0, t)],
            },
            &voc,
        )
        .unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_mismatch() {
        let voc = rng_vocab(2, 3, 1);
        let fp = FeaturePyramid {
            levels: vec![(1.0, FeatureTensor::zeros(1, 1, 4))],
        };
        assert!(matches!(
            aggregate_residuals(&fp, &voc),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalize_cases() {
        let d = VladDescriptor::raw(vec![0.0, 0.0, 3.0, 4.0], 2);
        let n = normalize(&d).unwrap();
        assert_eq!(n.values, vec![0.0, 0.0, 0.6, 0.8]);

        let d = VladDescriptor::raw(vec![3.0, 4.0, 0.0, -5.0], 2);
        let n = normalize(&d).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let want = [0.6 * s, 0.8 * s, 0.0, -s];
        for (a, b) in n.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(matches!(
            normalize(&VladDescriptor::raw(vec![0.0; 4], 2)),
            Err(Error::ZeroDescriptor)
        ));
    }

    #[test]
    fn partition_scaling() {
        assert_eq!(proportional_partition(&[34, 18, 12], 64), vec![34, 18, 12]);
        assert_eq!(proportional_partition(&[34, 18, 12], 8), vec![4, 2, 2]);
        assert_eq!(
            proportional_partition(&[34, 18, 12], 16)
                .iter()
                .sum::<usize>(),
            16
        );
    }

    #[test]
    fn scale_specific_levels_use_their_own_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| {
                (0..40)
                    .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let voc = init_scale_specific(&samples, &[3, 1], 4).unwrap();
        assert_eq!(voc.clusters, 4);
        let t0 = rng_tensor(2, 2, 2, &mut rng);
        let t1 = rng_tensor(2, 2, 2, &mut rng);
        let only0 = aggregate_residuals(
            &FeaturePyramid {
                levels: vec![(1.0, t0.clone()), (2.0, FeatureTensor::zeros(0, 0, 2))],
            },
            &voc,
        )
        .unwrap();
        assert!(only0.values[6..].iter().all(|&v| v == 0.0));
        let both = aggregate_residuals(
            &FeaturePyramid {
                levels: vec![(1.0, t0), (2.0, t1)],
            },
            &voc,
        )
        .unwrap();
        assert_eq!(&both.values[..6], &only0.values[..6]);
        assert!(both.values[6..].iter().any(|&v| v != 0.0));
        // wrong number of levels
        let one = FeaturePyramid {
            levels: vec![(1.0, rng_tensor(1, 1, 2, &mut rng))],
        };
        assert!(aggregate_residuals(&one, &voc).is_err());
    }

    #[test]
    fn shared_center_receives_every_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let voc = rng_vocab(3, 3, 10);
        let levels: Vec<(f64, FeatureTensor)> = (0..3)
            .map(|i| (i as f64 + 1.0, rng_tensor(2, 2, 3, &mut rng)))
            .collect();
        for (_, t) in &levels {
            let single = aggregate_residuals(
                &FeaturePyramid {
                    levels: vec![(1.0, t.clone())],
                },
                &voc,
            )
            .unwrap();
            assert!(single.values[..3].iter().any(|&v| v.abs() > 1e-9));
        }
    }

    #[test]
    fn histogram_counts() {
        let voc = Vocabulary::from_centers(vec![0.0, 0.0, 10.0, 10.0], 2, 1.0).unwrap();
        let fp = FeaturePyramid {
            levels: vec![
                (
                    1.0,
                    FeatureTensor::from_data(2, 1, 2, vec![0.1, 0.0, -0.2, 0.3]).unwrap(),
                ),
                (
                    2.0,
                    FeatureTensor::from_data(1, 1, 2, vec![0.5, 0.5]).unwrap(),
                ),
            ],
        };
        let h = assignment_histogram(&fp, &voc);
        assert_eq!(h.counts, vec![vec![2, 0], vec![1, 0]]);
        assert_eq!(h.shares[0], vec![2.0 / 3.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let voc = Vocabulary::from_centers(
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            3,
            2.0,
        )
        .unwrap();
        let t = rng_tensor(5, 4, 3, &mut rng);
        let h = assignment_histogram(
            &FeaturePyramid {
                levels: vec![(1.0, t.clone())],
            },
            &voc,
        );
        assert_eq!(h.counts[0].iter().sum::<usize>(), 20);
        // nearest-center oracle (equivalent to logit argmax for this parametrization)
        let mut want = vec![0usize; 4];
        for p in t.features() {
            let best = (0..4)
                .min_by(|&a, &b| {
                    sq_dist(p, voc.center(a))
                        .partial_cmp(&sq_dist(p, voc.center(b)))
                        .unwrap()
                })
                .unwrap();
            want[best] += 1;
        }
        assert_eq!(h.counts[0], want);
    }

    #[test]
    fn spc_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let voc = rng_vocab(8, 16, 12);
        let t = rng_tensor(8, 8, 16, &mut rng);
        let d = spatial_pyramid_descriptor(&t, &voc).unwrap();
        assert_eq!(d.len(), 2688);
        assert!((d.norm() - 1.0).abs() < 1e-9);
        // tiny map: some 4x4 cells are empty and stay zero
        let t = rng_tensor(2, 3, 16, &mut rng);
        let d = spatial_pyramid_descriptor(&t, &voc).unwrap();
        assert_eq!(d.len(), 2688);
        assert!((d.norm() - 1.0).abs() < 1e-9);
        assert_eq!(spc_patches(), 21);
        assert_eq!(64 * 512 * spc_patches(), 32768 * 21);
    }

    #[test]
    fn grid_split_covers_extent() {
        for extent in 1..12 {
            for g in SPC_GRIDS {
                let b = grid_bounds(extent, g);
                assert_eq!(b.first().unwrap().start, 0);
                assert_eq!(b.last().unwrap().end, extent);
                assert!(b.windows(2).all(|w| w[0].end == w[1].start));
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn aggregate_and_normalize_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let voc = rng_vocab(3, 2, 13);
        let fp = FeaturePyramid {
            levels: vec![
                (1.0, rng_tensor(2, 2, 2, &mut rng)),
                (2.0, rng_tensor(1, 2, 2, &mut rng)),
            ],
        };
        let wts: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |fp: &FeaturePyramid, voc: &Vocabulary| -> f64 {
            let n = normalize(&aggregate_residuals(fp, voc).unwrap()).unwrap();
            n.values.iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let raw = aggregate_residuals(&fp, &voc).unwrap();
        let g_raw = normalize_backward(&raw.values, 2, &wts);
        let mut vg = voc.zero_grad();
        let gf = aggregate_backward(&fp, &voc, &g_raw, &mut vg).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for li in 0..2 {
            for i in 0..fp.levels[li].1.data.len() {
                let (mut a, mut b) = (fp.clone(), fp.clone());
                a.levels[li].1.data[i] += h;
                b.levels[li].1.data[i] -= h;
                worst = worst.max(rel_err(
                    gf[li].data[i],
                    (f(&a, &voc) - f(&b, &voc)) / (2.0 * h),
                ));
            }
        }
        for which in 0..3 {
            let n = [
                voc.centers.len(),
                voc.assign_weights.len(),
                voc.assign_biases.len(),
            ][which];
            for i in 0..n {
                let (mut a, mut b) = (voc.clone(), voc.clone());
                let (pa, pb, an) = match which {
                    0 => (&mut a.centers[i], &mut b.centers[i], vg.centers[i]),
                    1 => (
                        &mut a.assign_weights[i],
                        &mut b.assign_weights[i],
                        vg.weights[i],
                    ),
                    _ => (
                        &mut a.assign_biases[i],
                        &mut b.assign_biases[i],
                        vg.biases[i],
                    ),
                };
                *pa += h;
                *pb -= h;
                worst = worst.max(rel_err(an, (f(&fp, &a) - f(&fp, &b)) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    proptest! {
        #[test]
        fn soft_assign_rows_are_distributions(seed in 0u64..500, v in 1usize..8, d in 1usize..6) {
            let voc = rng_vocab(v, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let s = soft_assign(&p, &voc);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }

        #[test]
        fn normalized_blocks_and_norm(seed in 0u64..500, v in 1usize..6, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vals: Vec<f64> = (0..v * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            if v > 1 && seed % 3 == 0 {
                vals[..d].iter_mut().for_each(|x| *x = 0.0);
            }
            let raw = VladDescriptor::raw(vals, d);
            let intra = intra_normalize(&raw);
            for b in intra.blocks() {
                let n = l2(b);
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
            let full = normalize(&raw).unwrap();
            prop_assert!((full.norm() - 1.0).abs() < 1e-6);
            // every nonzero block carries the same share of the global norm
            let norms: Vec<f64> = full.blocks().map(l2).filter(|&n| n > 0.0).collect();
            for n in &norms {
                prop_assert!((n - norms[0]).abs() < 1e-6);
            }
        }
    }
}
