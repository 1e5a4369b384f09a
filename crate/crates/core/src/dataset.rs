//! Geo-tagged image datasets: the JSON-lines manifest and a synthetic
//! place world rendered from simple landmarks.
//!
//! The synthetic world is a long strip with landmarks scattered around a
//! straight route. A camera looks straight down through a circular field of
//! view of radius `view_radius_m`, rotated by its heading; pixels outside the
//! circle are black. A landmark is visible when any part of it falls inside
//! the circle, so two cameras more than
//! `2 * (view_radius_m + MAX_LANDMARK_RADIUS_M)` apart never share a
//! landmark, while cameras a few meters apart share most of them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainDb,
    TrainQ,
    ValDb,
    ValQ,
    TestDb,
    TestQ,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::TrainDb,
        Split::TrainQ,
        Split::ValDb,
        Split::ValQ,
        Split::TestDb,
        Split::TestQ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainDb => "train_db",
            Split::TrainQ => "train_q",
            Split::ValDb => "val_db",
            Split::ValQ => "val_q",
            Split::TestDb => "test_db",
            Split::TestQ => "test_q",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceRecord {
    pub id: u64,
    /// Image path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub x_m: f64,
    pub y_m: f64,
    pub split: Split,
}

impl PlaceRecord {
    pub fn position(&self) -> (f64, f64) {
        (self.x_m, self.y_m)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<PlaceRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PlaceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            *out.entry(r.split).or_default() += 1;
        }
        out
    }

    pub fn image_path(&self, rec: &PlaceRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.root.join(&rec.path)
        }
    }

    pub fn get(&self, id: u64) -> Option<&PlaceRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Parses manifest lines; blank lines are skipped. `origin` only labels errors.
pub fn parse_manifest(reader: impl BufRead, origin: &Path) -> Result<Vec<PlaceRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: PlaceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !rec.x_m.is_finite() || !rec.y_m.is_finite() {
            return Err(parse_err(format!(
                "record {} has non-finite coordinates",
                rec.id
            )));
        }
        if !seen.insert(rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Loads and validates a manifest, including that every image file exists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let records = parse_manifest(BufReader::new(file), path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ds = Dataset { root, records };
    let missing: Vec<u64> = ds
        .records
        .iter()
        .filter(|r| !ds.image_path(r).is_file())
        .map(|r| r.id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::BrokenRecords(missing));
    }
    log::info!(
        "loaded {} records from {}: {:?}",
        ds.records.len(),
        path.display(),
        ds.counts()
    );
    Ok(ds)
}

pub fn write_manifest(path: &Path, records: &[PlaceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Images of one split held in memory, in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlaceSet {
    pub ids: Vec<u64>,
    pub positions: Vec<(f64, f64)>,
    pub images: Vec<Image>,
}

impl PlaceSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(ds: &Dataset, split: Split) -> Result<Self> {
        let recs = ds.split(split);
        let images = recs
            .par_iter()
            .map(|r| Image::load(&ds.image_path(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: recs.iter().map(|r| r.id).collect(),
            positions: recs.iter().map(|r| r.position()).collect(),
            images,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    /// Length of the world strip; all routes must fit in it.
    pub extent_m: f64,
    pub landmark_count: usize,
    pub camera_spacing_m: f64,
    pub view_radius_m: f64,
    /// Queries are displaced sideways by up to this much.
    pub lateral_jitter_m: f64,
    /// Queries are rotated by up to this many degrees either way.
    pub heading_jitter_deg: f64,
    /// Fraction of queries rendered with the night appearance.
    pub night_fraction: f64,
    /// Standard deviation of per-pixel noise on query images.
    pub noise_level: f64,
    pub image_size: usize,
    pub train_db: usize,
    pub train_q: usize,
    pub val_db: usize,
    pub val_q: usize,
    pub test_db: usize,
    pub test_q: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            extent_m: 6000.0,
            landmark_count: 4500,
            camera_spacing_m: 5.0,
            view_radius_m: 9.5,
            lateral_jitter_m: 3.0,
            heading_jitter_deg: 20.0,
            night_fraction: 0.5,
            noise_level: 0.03,
            image_size: 64,
            train_db: 500,
            train_q: 300,
            val_db: 100,
            val_q: 50,
            test_db: 500,
            test_q: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub radius_m: f64,
    pub rotation: f64,
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Appearance {
    Day,
    Night,
}

/// A camera pose plus rendering conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub appearance: Appearance,
    pub noise: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub view_radius_m: f64,
    pub image_size: usize,
    /// Sorted by `x_m` for range lookups.
    pub landmarks: Vec<Landmark>,
}

const SPLIT_GAP_EXTRA_M: f64 = 30.0;

pub const MIN_LANDMARK_RADIUS_M: f64 = 0.8;
pub const MAX_LANDMARK_RADIUS_M: f64 = 2.6;

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl World {
    pub fn generate(cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Self {
        let band = cfg.view_radius_m + cfg.lateral_jitter_m + MAX_LANDMARK_RADIUS_M;
        let mut landmarks: Vec<Landmark> = (0..cfg.landmark_count)
            .map(|_| {
                let shape = match rng.random_range(0..5) {
                    0 => Shape::Disc,
                    1 => Shape::Square,
                    2 => Shape::Triangle,
                    3 => Shape::Ring,
                    _ => Shape::Cross,
                };
                Landmark {
                    id: 0,
                    x_m: rng.random_range(0.0..cfg.extent_m),
                    y_m: rng.random_range(-band..band),
                    radius_m: rng.random_range(MIN_LANDMARK_RADIUS_M..MAX_LANDMARK_RADIUS_M),
                    rotation: rng.random_range(0.0..std::f64::consts::TAU),
                    shape,
                    color: hsv(
                        rng.random(),
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.45..1.0),
                    ),
                }
            })
            .collect();
        landmarks.sort_by(|a, b| a.x_m.total_cmp(&b.x_m));
        for (i, l) in landmarks.iter_mut().enumerate() {
            l.id = i;
        }
        Self {
            view_radius_m: cfg.view_radius_m,
            image_size: cfg.image_size,
            landmarks,
        }
    }

    fn near(&self, x: f64, reach: f64) -> &[Landmark] {
        let lo = self.landmarks.partition_point(|l| l.x_m < x - reach);
        let hi = self.landmarks.partition_point(|l| l.x_m <= x + reach);
        &self.landmarks[lo..hi]
    }

    fn visible_landmarks(&self, x: f64, y: f64) -> impl Iterator<Item = &Landmark> {
        let r = self.view_radius_m;
        self.near(x, r + MAX_LANDMARK_RADIUS_M)
            .iter()
            .filter(move |l| (l.x_m - x).powi(2) + (l.y_m - y).powi(2) < (r + l.radius_m).powi(2))
    }

    /// Ids of landmarks whose bounding circle overlaps the field of view.
    pub fn visible(&self, x: f64, y: f64) -> Vec<usize> {
        self.visible_landmarks(x, y).map(|l| l.id).collect()
    }

    pub fn render(&self, view: &View) -> Image {
        let n = self.image_size;
        let r = self.view_radius_m;
        let visible: Vec<&Landmark> = self.visible_landmarks(view.x_m, view.y_m).collect();
        let (sin, cos) = view.heading_rad.sin_cos();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(view.noise_seed);
        Image::from_fn(n, n, |px, py| {
            // image x runs along the heading, image y to its left
            let a = ((px as f64 + 0.5) / n as f64 * 2.0 - 1.0) * r;
            let b = ((py as f64 + 0.5) / n as f64 * 2.0 - 1.0) * r;
            if a * a + b * b > r * r {
                return [0.0; 3];
            }
            let wx = view.x_m + a * cos - b * sin;
            let wy = view.y_m + a * sin + b * cos;
            let mut c = if wy.abs() < 3.0 {
                [0.32, 0.32, 0.34]
            } else {
                [0.55, 0.58, 0.48]
            };
            for l in &visible {
                if l.covers(wx, wy) {
                    c = l.color;
                }
            }
            if view.appearance == Appearance::Night {
                c = [0.55 * c[0] + 0.02, 0.6 * c[1] + 0.03, 0.7 * c[2] + 0.12];
            }
            if view.noise > 0.0 {
                for v in c.iter_mut() {
                    let z: f64 =
                        noise_rng.random_range(-1.0..1.0) + noise_rng.random_range(-1.0..1.0);
                    *v += (view.noise * z * 1.2247) as f32;
                }
            }
            c.map(|v| v.clamp(0.0, 1.0))
        })
    }
}

impl Landmark {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.x_m, y - self.y_m);
        let (s, c) = self.rotation.sin_cos();
        let (u, v) = (
            (dx * c + dy * s) / self.radius_m,
            (-dx * s + dy * c) / self.radius_m,
        );
        match self.shape {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
            Shape::Triangle => v >= -0.5 && v <= 1.0 && u.abs() <= (1.0 - v) * 0.577,
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            Shape::Cross => {
                (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0)
            }
        }
    }
}

/// A generated record together with the pose it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub record: PlaceRecord,
    pub view: View,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub world: World,
    pub records: Vec<SyntheticRecord>,
}

impl SyntheticWorldConfig {
    fn region_sizes(&self) -> [(Split, usize, Split, usize); 3] {
        [
            (Split::TrainDb, self.train_db, Split::TrainQ, self.train_q),
            (Split::ValDb, self.val_db, Split::ValQ, self.val_q),
            (Split::TestDb, self.test_db, Split::TestQ, self.test_q),
        ]
    }

    pub fn split_gap_m(&self) -> f64 {
        2.0 * (self.view_radius_m + MAX_LANDMARK_RADIUS_M + self.lateral_jitter_m)
            + SPLIT_GAP_EXTRA_M
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive(self.camera_spacing_m, "camera_spacing_m")?;
        positive(self.view_radius_m, "view_radius_m")?;
        positive(self.extent_m, "extent_m")?;
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("image_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.night_fraction) {
            return Err(Error::InvalidConfig(
                "night_fraction must be in [0, 1]".into(),
            ));
        }
        if self.lateral_jitter_m < 0.0 || self.heading_jitter_deg < 0.0 || self.noise_level < 0.0 {
            return Err(Error::InvalidConfig(
                "jitter and noise must be non-negative".into(),
            ));
        }
        for (_, db, _, q) in self.region_sizes() {
            if q > 0 && db == 0 {
                return Err(Error::InvalidConfig(
                    "queries need a database in their region".into(),
                ));
            }
        }
        let needed = self.required_extent_m();
        if needed > self.extent_m {
            return Err(Error::InvalidConfig(format!(
                "extent {} m is too small for the requested counts (needs {needed:.0} m)",
                self.extent_m
            )));
        }
        Ok(())
    }

    pub fn required_extent_m(&self) -> f64 {
        let routes: f64 = self
            .region_sizes()
            .iter()
            .map(|r| r.1.saturating_sub(1) as f64 * self.camera_spacing_m)
            .sum();
        routes + 4.0 * self.split_gap_m()
    }
}

/// Builds the world and every record's pose; no pixels are rendered yet.
pub fn plan_synthetic(cfg: &SyntheticWorldConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::generate(cfg, &mut rng);
    let mut records = Vec::new();
    let mut next_id = 0u64;
    let mut x0 = cfg.split_gap_m();
    let heading_max = cfg.heading_jitter_deg.to_radians();
    for (db_split, n_db, q_split, n_q) in cfg.region_sizes() {
        let db_pos: Vec<(f64, f64)> = (0..n_db)
            .map(|i| (x0 + i as f64 * cfg.camera_spacing_m, 0.0))
            .collect();
        for &(x, y) in &db_pos {
            let id = next_id;
            next_id += 1;
            records.push(SyntheticRecord {
                record: PlaceRecord {
                    id,
                    path: PathBuf::from(format!("images/{}/{id:06}.png", db_split.name())),
                    x_m: x,
                    y_m: y,
                    split: db_split,
                },
                view: View {
                    x_m: x,
                    y_m: y,
                    heading_rad: 0.0,
                    appearance: Appearance::Day,
                    noise: 0.0,
                    noise_seed: 0,
                },
            });
        }
        for _ in 0..n_q {
            let id = next_id;
            next_id += 1;
            let (bx, by) = db_pos[rng.random_range(0..db_pos.len())];
            let lateral = if cfg.lateral_jitter_m > 0.0 {
                rng.random_range(-cfg.lateral_jitter_m..=cfg.lateral_jitter_m)
            } else {
                0.0
            };
            let heading = if heading_max > 0.0 {
                rng.random_range(-heading_max..=heading_max)
            } else {
                0.0
            };
            let appearance = if rng.random::<f64>() < cfg.night_fraction {
                Appearance::Night
            } else {
                Appearance::Day
            };
            let (x, y) = (bx, by + lateral);
            records.push(SyntheticRecord {
                record: PlaceRecord {
                    id,
                    path: PathBuf::from(format!("images/{}/{id:06}.png", q_split.name())),
                    x_m: x,
                    y_m: y,
                    split: q_split,
                },
                view: View {
                    x_m: x,
                    y_m: y,
                    heading_rad: heading,
                    appearance,
                    noise: cfg.noise_level,
                    noise_seed: cfg.seed ^ (id.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                },
            });
        }
        if n_db > 0 {
            x0 = db_pos.last().unwrap().0 + cfg.split_gap_m();
        }
    }
    Ok(SyntheticDataset { world, records })
}

/// Renders every record to `<out>/images/...` as PNG and writes
/// `<out>/manifest.jsonl`. Returns the manifest path.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig, out: &Path) -> Result<PathBuf> {
    let plan = plan_synthetic(cfg)?;
    for s in Split::ALL {
        fs::create_dir_all(out.join("images").join(s.name()))?;
    }
    plan.records
        .par_iter()
        .map(|r| {
            plan.world
                .render(&r.view)
                .save_png(&out.join(&r.record.path))
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = out.join("manifest.jsonl");
    let records: Vec<PlaceRecord> = plan.records.iter().map(|r| r.record.clone()).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
