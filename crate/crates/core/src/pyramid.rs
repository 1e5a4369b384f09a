//! Multi-resolution image pyramids.
//!
//! Two constructions are provided. Subsample pyramids take every `l`-th
//! pixel of the base image for each integer reduction factor `l`, with no
//! filtering. Gaussian pyramids repeatedly blur with a 5x5 Gaussian and
//! shrink by a factor `F` with bilinear interpolation, tracking the
//! accumulated blur `sigma_eff` in base-image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const GAUSSIAN_TAPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidMode {
    Subsample,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Reduction factors for subsample mode. Must start at 1 and increase.
    pub factors: Vec<u32>,
    pub mode: PyramidMode,
    /// Per-level shrink factor `F` for gaussian mode.
    pub gaussian_factor: f64,
    pub gaussian_sigma: f64,
    /// Gaussian mode stops once the next level would be reduced by more
    /// than this much relative to the base.
    pub max_reduction: f64,
    /// Minimum encoder output extent (cells) in each dimension for a level
    /// to be accepted.
    pub min_feature_extent: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            factors: vec![1],
            mode: PyramidMode::Subsample,
            gaussian_factor: 2.0,
            gaussian_sigma: 1.0,
            max_reduction: 8.0,
            min_feature_extent: 4,
        }
    }
}

impl PyramidConfig {
    pub fn subsample(factors: &[u32]) -> Self {
        Self {
            factors: factors.to_vec(),
            ..Self::default()
        }
    }

    pub fn gaussian(factor: f64, sigma: f64) -> Self {
        Self {
            mode: PyramidMode::Gaussian,
            gaussian_factor: factor,
            gaussian_sigma: sigma,
            ..Self::default()
        }
    }

    /// Number of levels `L`.
    pub fn len(&self) -> usize {
        match self.mode {
            PyramidMode::Subsample => self.factors.len(),
            PyramidMode::Gaussian => self.gaussian_scales().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PyramidMode::Subsample => {
                if self.factors.first() != Some(&1) {
                    return Err(Error::InvalidConfig(
                        "the first reduction factor must be 1".into(),
                    ));
                }
                if self.factors.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig(format!(
                        "reduction factors must be strictly increasing: {:?}",
                        self.factors
                    )));
                }
            }
            PyramidMode::Gaussian => {
                let (f, s) = (self.gaussian_factor, self.gaussian_sigma);
                if !f.is_finite() || f <= 1.0 {
                    return Err(Error::InvalidConfig(format!(
                        "gaussian factor must be finite and > 1, got {f}"
                    )));
                }
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "gaussian sigma must be finite and >= 0, got {s}"
                    )));
                }
                if !self.max_reduction.is_finite() || self.max_reduction < 1.0 {
                    return Err(Error::InvalidConfig(format!(
                        "max reduction must be >= 1, got {}",
                        self.max_reduction
                    )));
                }
            }
        }
        Ok(())
    }

    /// Relative scales of every gaussian level, `F^i` up to `max_reduction`.
    pub fn gaussian_scales(&self) -> Vec<f64> {
        let f = self.gaussian_factor;
        if !(f > 1.0) || !f.is_finite() {
            return vec![1.0];
        }
        let mut scales = vec![1.0];
        loop {
            let next = f.powi(scales.len() as i32);
            if next > self.max_reduction * (1.0 + 1e-9) {
                break;
            }
            scales.push(next);
        }
        scales
    }

    /// Rejects pyramids whose smallest level would give the encoder an
    /// output smaller than `min_feature_extent`. `encoder_extent` maps an
    /// input extent (pixels) to the encoder output extent (cells).
    pub fn check_feature_extent(
        &self,
        width: usize,
        height: usize,
        encoder_extent: impl Fn(usize) -> usize,
    ) -> Result<()> {
        self.validate()?;
        let dims: Vec<(usize, usize)> = match self.mode {
            PyramidMode::Subsample => self
                .factors
                .iter()
                .map(|&l| (width / l as usize, height / l as usize))
                .collect(),
            PyramidMode::Gaussian => self
                .gaussian_scales()
                .iter()
                .map(|&s| (scaled_extent(width, s), scaled_extent(height, s)))
                .collect(),
        };
        for (i, (w, h)) in dims.into_iter().enumerate() {
            let (fw, fh) = (encoder_extent(w), encoder_extent(h));
            if fw < self.min_feature_extent || fh < self.min_feature_extent {
                return Err(Error::InvalidConfig(format!(
                    "level {i} of a {width}x{height} image gives a {fw}x{fh} feature map, \
                     below the minimum extent {}",
                    self.min_feature_extent
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// Reduction factor relative to the base image.
    pub factor: f64,
    pub image: Image,
    /// Accumulated blur in base coordinates; `None` for the base level and
    /// for subsample pyramids.
    pub sigma_eff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl ImagePyramid {
    pub fn single(img: Image) -> Self {
        Self {
            levels: vec![PyramidLevel {
                factor: 1.0,
                image: img,
                sigma_eff: None,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn base(&self) -> &Image {
        &self.levels[0].image
    }
}

pub fn build(img: &Image, cfg: &PyramidConfig) -> Result<ImagePyramid> {
    match cfg.mode {
        PyramidMode::Subsample => build_subsample_pyramid(img, cfg),
        PyramidMode::Gaussian => build_gaussian_pyramid(img, cfg),
    }
}

/// Nth-pixel subsampling: level `l` has size `(floor(W/l), floor(H/l))` and
/// pixel `(x, y)` is source pixel `(x*l, y*l)`.
pub fn build_subsample_pyramid(img: &Image, cfg: &PyramidConfig) -> Result<ImagePyramid> {
    if cfg.mode != PyramidMode::Subsample {
        return Err(Error::InvalidConfig("expected subsample mode".into()));
    }
    cfg.validate()?;
    let mut levels = Vec::with_capacity(cfg.factors.len());
    for &l in &cfg.factors {
        let image = if l == 1 {
            img.clone()
        } else {
            subsample(img, l as usize)?
        };
        levels.push(PyramidLevel {
            factor: l as f64,
            image,
            sigma_eff: None,
        });
    }
    Ok(ImagePyramid { levels })
}

pub fn subsample(img: &Image, l: usize) -> Result<Image> {
    let (w, h) = (img.width() / l, img.height() / l);
    if w == 0 || h == 0 {
        return Err(Error::InvalidConfig(format!(
            "factor {l} reduces a {}x{} image below one pixel",
            img.width(),
            img.height()
        )));
    }
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    let src = img.data();
    for y in 0..h {
        let row = y * l * img.width();
        for x in 0..w {
            let i = (row + x * l) * CHANNELS;
            data.extend_from_slice(&src[i..i + CHANNELS]);
        }
    }
    Image::new(w, h, data)
}

/// Blur-and-shrink pyramid down to `max_reduction` of the base resolution.
pub fn build_gaussian_pyramid(img: &Image, cfg: &PyramidConfig) -> Result<ImagePyramid> {
    if cfg.mode != PyramidMode::Gaussian {
        return Err(Error::InvalidConfig("expected gaussian mode".into()));
    }
    cfg.validate()?;
    let kernel = gaussian_kernel(cfg.gaussian_sigma);
    let scales = cfg.gaussian_scales();
    let mut levels = Vec::with_capacity(scales.len());
    levels.push(PyramidLevel {
        factor: 1.0,
        image: img.clone(),
        sigma_eff: None,
    });
    let mut sigma_eff = 0.0;
    for &scale in &scales[1..] {
        let prev = &levels.last().unwrap().image;
        let (w, h) = (
            scaled_extent(img.width(), scale),
            scaled_extent(img.height(), scale),
        );
        let blurred = blur(prev, &kernel);
        let image = resize_bilinear(&blurred, w, h);
        sigma_eff = sigma_step(sigma_eff, cfg.gaussian_factor, cfg.gaussian_sigma);
        levels.push(PyramidLevel {
            factor: scale,
            image,
            sigma_eff: Some(sigma_eff),
        });
    }
    Ok(ImagePyramid { levels })
}

fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 / scale).round() as usize).max(1)
}

#[inline]
fn sigma_step(prev: f64, f: f64, sigma: f64) -> f64 {
    f * (prev * prev + sigma * sigma).sqrt()
}

/// `sigma_eff` of pyramid level `level` (1-based past the base), from
/// `sigma_eff_i = F * sqrt(sigma_eff_{i-1}^2 + sigma^2)` with `sigma_eff_0 = 0`.
pub fn effective_sigma(f: f64, sigma: f64, level: usize) -> Result<f64> {
    if level == 0 {
        return Err(Error::BaseLevelSigma);
    }
    Ok((0..level).fold(0.0, |s, _| sigma_step(s, f, sigma)))
}

/// The first `levels` values of the `sigma_eff` ladder.
pub fn sigma_ladder(f: f64, sigma: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels);
    let mut s = 0.0;
    for _ in 0..levels {
        s = sigma_step(s, f, sigma);
        out.push(s);
    }
    out
}

/// Normalized 1-D Gaussian taps; the 5x5 filter is their outer product.
pub fn gaussian_kernel(sigma: f64) -> [f64; GAUSSIAN_TAPS] {
    let half = (GAUSSIAN_TAPS / 2) as i32;
    let mut k = [0.0; GAUSSIAN_TAPS];
    if sigma <= 0.0 {
        k[half as usize] = 1.0;
        return k;
    }
    for (i, v) in k.iter_mut().enumerate() {
        let x = (i as i32 - half) as f64;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Symmetric reflection (`-1 -> 0`, `n -> n-1`), valid for any offset.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable 5x5 Gaussian blur with reflected borders.
pub fn blur(img: &Image, kernel: &[f64; GAUSSIAN_TAPS]) -> Image {
    let (w, h) = (img.width(), img.height());
    let half = (GAUSSIAN_TAPS / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - half, w);
                    acc += kv * src[(y * w + sx) * CHANNELS + c] as f64;
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - half, h);
                    acc += kv * tmp[(sy * w + x) * CHANNELS + c];
                }
                out[(y * w + x) * CHANNELS + c] = acc as f32;
            }
        }
    }
    Image::new(w, h, out).expect("blur preserves shape")
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn resize_bilinear(img: &Image, w: usize, h: usize) -> Image {
    let (sw, sh) = (img.width(), img.height());
    let sx = sw as f64 / w as f64;
    let sy = sh as f64 / h as f64;
    Image::from_fn(w, h, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut px = [0.0f32; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let top = img.get(x0, y0, c) as f64 * (1.0 - ax) + img.get(x1, y0, c) as f64 * ax;
            let bot = img.get(x0, y1, c) as f64 * (1.0 - ax) + img.get(x1, y1, c) as f64 * ax;
            *p = (top * (1.0 - ay) + bot * ay) as f32;
        }
        px
    })
}
