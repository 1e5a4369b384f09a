//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Images cross the boundary as RGBA8 buffers so they can go straight into
//! canvas `ImageData`. Errors are plain strings, which become thrown JS
//! strings and keep the crate testable natively.

use wasm_bindgen::prelude::*;

use mrvlad::pyramid::{self, ImagePyramid, PyramidConfig, PyramidMode};
use mrvlad::vlad::{soft_assign, Vocabulary};
use mrvlad::Image;

/// Cluster colors for the assignment field, cycled past eight.
const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.30, 0.25],
    [0.20, 0.55, 0.90],
    [0.95, 0.75, 0.20],
    [0.30, 0.75, 0.40],
    [0.65, 0.40, 0.85],
    [0.95, 0.50, 0.70],
    [0.35, 0.80, 0.85],
    [0.60, 0.60, 0.60],
];

fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Image, String> {
    if rgba.len() != width * height * 4 {
        return Err(js_err(format!(
            "expected {} RGBA bytes for {width}x{height}, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let rgb: Vec<u8> = rgba
        .chunks_exact(4)
        .flat_map(|p| [p[0], p[1], p[2]])
        .collect();
    Image::from_rgb8(width, height, &rgb).map_err(js_err)
}

fn to_rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// An image pyramid whose levels can be drawn one by one.
#[wasm_bindgen]
pub struct PyramidView {
    pyr: ImagePyramid,
}

#[wasm_bindgen]
impl PyramidView {
    /// Subsample pyramid over integer `factors`.
    #[wasm_bindgen(js_name = subsample)]
    pub fn subsample(
        rgba: &[u8],
        width: usize,
        height: usize,
        factors: &[u32],
    ) -> Result<PyramidView, String> {
        let cfg = PyramidConfig {
            factors: factors.to_vec(),
            min_feature_extent: 1,
            ..PyramidConfig::default()
        };
        Self::build(rgba, width, height, &cfg)
    }

    /// Gaussian pyramid with per-level factor `factor` and blur `sigma`, down
    /// to `max_reduction` times smaller than the base.
    #[wasm_bindgen(js_name = gaussian)]
    pub fn gaussian(
        rgba: &[u8],
        width: usize,
        height: usize,
        factor: f64,
        sigma: f64,
        max_reduction: f64,
    ) -> Result<PyramidView, String> {
        let cfg = PyramidConfig {
            mode: PyramidMode::Gaussian,
            gaussian_factor: factor,
            gaussian_sigma: sigma,
            max_reduction,
            min_feature_extent: 1,
            ..PyramidConfig::default()
        };
        Self::build(rgba, width, height, &cfg)
    }

    fn build(
        rgba: &[u8],
        width: usize,
        height: usize,
        cfg: &PyramidConfig,
    ) -> Result<PyramidView, String> {
        let img = from_rgba(rgba, width, height)?;
        let pyr = pyramid::build(&img, cfg).map_err(js_err)?;
        Ok(PyramidView { pyr })
    }

    pub fn levels(&self) -> usize {
        self.pyr.levels.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.pyr.levels[level].image.width()
    }

    pub fn height(&self, level: usize) -> usize {
        self.pyr.levels[level].image.height()
    }

    pub fn factor(&self, level: usize) -> f64 {
        self.pyr.levels[level].factor
    }

    /// Accumulated blur of a level; NaN where it is undefined.
    #[wasm_bindgen(js_name = sigmaEff)]
    pub fn sigma_eff(&self, level: usize) -> f64 {
        self.pyr.levels[level].sigma_eff.unwrap_or(f64::NAN)
    }

    pub fn rgba(&self, level: usize) -> Vec<u8> {
        to_rgba(&self.pyr.levels[level].image)
    }
}

/// Effective blur of the first `levels` Gaussian pyramid levels.
#[wasm_bindgen(js_name = sigmaLadder)]
pub fn sigma_ladder(factor: f64, sigma: f64, levels: usize) -> Result<Vec<f64>, String> {
    if !(factor > 1.0) || !(sigma >= 0.0) {
        return Err(js_err(
            "factor must exceed 1 and sigma must be non-negative",
        ));
    }
    Ok(pyramid::sigma_ladder(factor, sigma, levels))
}

/// Soft assignment over a `size x size` grid covering `[-extent, extent]^2`
/// for 2-D cluster `centers` (flattened `x0, y0, x1, y1, ...`) at sharpness
/// `alpha`. Each pixel takes the color of its strongest cluster, faded
/// toward white as that weight drops to uniform.
#[wasm_bindgen(js_name = assignmentField)]
pub fn assignment_field(
    centers: &[f64],
    alpha: f64,
    size: usize,
    extent: f64,
) -> Result<Vec<u8>, String> {
    if size == 0 || !(extent > 0.0) || !(alpha > 0.0) {
        return Err(js_err("size, extent and alpha must be positive"));
    }
    let vocab = Vocabulary::from_centers(centers.to_vec(), 2, alpha).map_err(js_err)?;
    let uniform = 1.0 / vocab.clusters as f64;
    let mut out = Vec::with_capacity(size * size * 4);
    for row in 0..size {
        let y = extent - 2.0 * extent * (row as f64 + 0.5) / size as f64;
        for col in 0..size {
            let x = -extent + 2.0 * extent * (col as f64 + 0.5) / size as f64;
            let a = soft_assign(&[x, y], &vocab);
            let (best, w) = a
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, w)| if w > b.1 { (i, w) } else { b });
            let strength = if vocab.clusters > 1 {
                (w - uniform) / (1.0 - uniform)
            } else {
                1.0
            };
            let c = PALETTE[best % PALETTE.len()];
            for ch in c {
                let v = 1.0 - strength * (1.0 - ch);
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            out.push(255);
        }
    }
    Ok(out)
}
