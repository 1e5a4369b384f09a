//! End-to-end stages: descriptor extraction, evaluation, training runs with
//! their on-disk artifacts, and ablation sweeps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationRun, RunConfig};
use crate::dataset::{Dataset, PlaceRecord, PlaceSet, Split};
use crate::error::Result;
use crate::image::Image;
use crate::io::{save_checkpoint, DescriptorSet};
use crate::model::{describe, Model};
use crate::postproc::PcaModel;
use crate::pyramid::PyramidConfig;
use crate::retrieval::{evaluate_recall, DescriptorIndex, Query, RecallReport};
use crate::training::{
    init_model, train, Augmentation, TrainConfig, TrainData, TrainOutcome, Validation,
};
use crate::vlad::{NormState, Variant};

/// Maps `f` over `items`, on the rayon pool unless `sequential` is set.
/// Output order always follows input order.
pub fn map_items<T: Sync, U: Send>(
    items: &[T],
    sequential: bool,
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if sequential {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

pub fn describe_all(
    model: &Model,
    images: &[Image],
    variant: Variant,
    pyramid: &PyramidConfig,
    sequential: bool,
) -> Result<Vec<Vec<f64>>> {
    map_items(images, sequential, |img| {
        Ok(describe(img, model, variant, pyramid)?.values)
    })
}

/// Descriptors of a whole place set as a storable descriptor file, with
/// optional PCA compression.
pub fn extract_set(
    model: &Model,
    set: &PlaceSet,
    variant: Variant,
    pyramid: &PyramidConfig,
    pca: Option<&PcaModel>,
    sequential: bool,
) -> Result<DescriptorSet> {
    let mut rows = describe_all(model, &set.images, variant, pyramid, sequential)?;
    if let Some(p) = pca {
        rows = map_items(&rows, sequential, |r| p.apply(r))?;
    }
    let dim = rows.first().map_or_else(
        || {
            pca.map_or(model.descriptor_len() * variant_blocks(variant), |p| {
                p.out_dim
            })
        },
        Vec::len,
    );
    let mut out = DescriptorSet::new(variant, NormState::FullyNormalized, dim);
    for (id, r) in set.ids.iter().zip(&rows) {
        out.push(*id, &r.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
    }
    Ok(out)
}

fn variant_blocks(v: Variant) -> usize {
    match v {
        Variant::BrSpc => crate::vlad::spc_patches(),
        _ => 1,
    }
}

/// Recall of `queries` against `db` descriptors, rows aligned with the
/// positions given.
pub fn evaluate_sets(
    db: &DescriptorSet,
    db_positions: &[(f64, f64)],
    queries: &DescriptorSet,
    query_positions: &[(f64, f64)],
    radius_m: f64,
    ns: &[usize],
) -> Result<RecallReport> {
    let index = DescriptorIndex::build(&db.rows(), &db.ids)?;
    let qs: Vec<Query<'_>> = (0..queries.len())
        .map(|i| Query {
            id: queries.ids[i],
            descriptor: queries.row(i),
            position: query_positions[i],
        })
        .collect();
    evaluate_recall(&index, db_positions, &qs, radius_m, ns)
}

/// Test-time settings for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub variant: Variant,
    pub pyramid: PyramidConfig,
    pub radius_m: f64,
    pub ns: Vec<usize>,
}

pub fn evaluate_model(
    model: &Model,
    db: &PlaceSet,
    queries: &PlaceSet,
    spec: &EvalSpec,
    pca: Option<&PcaModel>,
    sequential: bool,
) -> Result<RecallReport> {
    let d = extract_set(model, db, spec.variant, &spec.pyramid, pca, sequential)?;
    let q = extract_set(model, queries, spec.variant, &spec.pyramid, pca, sequential)?;
    evaluate_sets(
        &d,
        &db.positions,
        &q,
        &queries.positions,
        spec.radius_m,
        &spec.ns,
    )
}

/// Per-record extraction straight from a manifest. Unreadable images are
/// reported and skipped; the rest are still extracted.
pub fn extract_records(
    model: &Model,
    ds: &Dataset,
    records: &[&PlaceRecord],
    variant: Variant,
    pyramid: &PyramidConfig,
    pca: Option<&PcaModel>,
    sequential: bool,
) -> Result<(DescriptorSet, Vec<(u64, String)>)> {
    let rows = map_items(
        records,
        sequential,
        |r| -> Result<std::result::Result<Vec<f64>, String>> {
            let one = || -> Result<Vec<f64>> {
                let img = Image::load(&ds.image_path(r))?;
                let d = describe(&img, model, variant, pyramid)?.values;
                match pca {
                    Some(p) => p.apply(&d),
                    None => Ok(d),
                }
            };
            Ok(one().map_err(|e| e.to_string()))
        },
    )?;
    let dim = pca.map_or(model.descriptor_len() * variant_blocks(variant), |p| {
        p.out_dim
    });
    let mut out = DescriptorSet::new(variant, NormState::FullyNormalized, dim);
    let mut failures = Vec::new();
    for (r, row) in records.iter().zip(rows) {
        match row {
            Ok(v) => out.push(r.id, &v.iter().map(|&x| x as f32).collect::<Vec<_>>())?,
            Err(e) => failures.push((r.id, e)),
        }
    }
    Ok((out, failures))
}

/// All six splits of a dataset, loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TrainData,
    pub val_db: PlaceSet,
    pub val_q: PlaceSet,
    pub test_db: PlaceSet,
    pub test_q: PlaceSet,
}

impl Splits {
    pub fn load(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            train: TrainData {
                db: PlaceSet::load(ds, Split::TrainDb)?,
                queries: PlaceSet::load(ds, Split::TrainQ)?,
            },
            val_db: PlaceSet::load(ds, Split::ValDb)?,
            val_q: PlaceSet::load(ds, Split::ValQ)?,
            test_db: PlaceSet::load(ds, Split::TestDb)?,
            test_q: PlaceSet::load(ds, Split::TestQ)?,
        })
    }

    /// Size of the first training database image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.train
            .db
            .images
            .first()
            .map(|i| (i.width(), i.height()))
    }
}

impl RunConfig {
    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            variant: self.eval.variant,
            pyramid: self.pyramid.clone(),
            radius_m: self.eval.radius_m,
            ns: self.eval.ns.clone(),
        }
    }

    /// Seeds for model initialization and the training state, both derived
    /// from the run seed.
    pub fn seeds(&self) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (rng.random(), rng.random())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub initial: Model,
    pub outcome: TrainOutcome,
}

/// Initializes and trains a model as configured. With `out`, writes the
/// config echo, the JSON-lines training log, periodic checkpoints,
/// `best.mrck` and `final.mrck` there.
pub fn run_training(cfg: &RunConfig, splits: &Splits, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    if let Some((w, h)) = splits.image_size() {
        cfg.check_image_size(w, h)?;
    }
    let (init_seed, train_seed) = cfg.seeds();
    let sequential = cfg.deterministic;
    let initial = init_model(&cfg.model, &splits.train.db.images, &cfg.train, init_seed)?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml())?;
            Some(BufWriter::new(fs::File::create(
                dir.join("train_log.jsonl"),
            )?))
        }
        None => None,
    };
    let val = (!splits.val_q.is_empty()).then(|| Validation {
        db: &splits.val_db,
        queries: &splits.val_q,
        spec: cfg.eval_spec(),
    });
    let every = cfg.train.checkpoint_every;
    let outcome = train(
        initial.clone(),
        &splits.train,
        val.as_ref(),
        &cfg.train,
        train_seed,
        sequential,
        |line, state, is_best| {
            if let (Some(w), Some(dir)) = (log.as_mut(), out) {
                serde_json::to_writer(&mut *w, line)?;
                w.write_all(b"\n")?;
                w.flush()?;
                if every > 0 && (line.stats.epoch + 1) % every == 0 {
                    save_checkpoint(
                        &state.model,
                        &dir.join(format!("epoch_{:03}.mrck", line.stats.epoch + 1)),
                    )?;
                }
                if is_best {
                    save_checkpoint(&state.model, &dir.join("best.mrck"))?;
                }
            }
            Ok(())
        },
    )?;
    if let Some(dir) = out {
        save_checkpoint(&outcome.state.model, &dir.join("final.mrck"))?;
        if outcome.best_epoch.is_none() {
            save_checkpoint(&outcome.best_model, &dir.join("best.mrck"))?;
        }
    }
    Ok(TrainRun { initial, outcome })
}

/// The training strategies compared by default: single resolutions, random
/// resizing and the multi-resolution pyramid.
pub fn default_ablation_grid() -> Vec<AblationRun> {
    let run = |name: &str, f: &[u32], aug: Augmentation| AblationRun {
        name: name.into(),
        train_factors: f.to_vec(),
        augmentation: aug,
        test_factors: None,
        variants: None,
    };
    vec![
        run("full-res", &[1], Augmentation::None),
        run("half-res", &[2], Augmentation::None),
        run("quarter-res", &[4], Augmentation::None),
        run("random-resize", &[1, 2, 4], Augmentation::RandomResize),
        run("multi-res", &[1, 2, 4], Augmentation::None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub train_factors: Vec<u32>,
    pub augmentation: Augmentation,
    pub test_factors: Vec<u32>,
    pub variant: Variant,
    pub ns: Vec<usize>,
    pub recall: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_table(&self) -> String {
        let ns: Vec<usize> = self
            .rows
            .iter()
            .find(|r| !r.ns.is_empty())
            .map(|r| r.ns.clone())
            .unwrap_or_default();
        let mut s = format!(
            "{:<16} {:<10} {:<8} {:<7}",
            "run", "train", "test", "variant"
        );
        for n in &ns {
            s.push_str(&format!(" {:>7}", format!("R@{n}")));
        }
        s.push('\n');
        let list = |f: &[u32]| f.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:<10} {:<8} {:<7}",
                r.name,
                list(&r.train_factors),
                list(&r.test_factors),
                r.variant.to_string()
            ));
            match &r.error {
                Some(e) => s.push_str(&format!(" failed: {e}")),
                None => r
                    .recall
                    .iter()
                    .for_each(|x| s.push_str(&format!(" {:>6.2}%", 100.0 * x))),
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("run,train_factors,augmentation,test_factors,variant,n,recall,error\n");
        let list = |f: &[u32]| f.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        for r in &self.rows {
            let aug = match r.augmentation {
                Augmentation::None => "none",
                Augmentation::RandomResize => "random_resize",
            };
            let head = format!(
                "{},{},{aug},{},{}",
                r.name,
                list(&r.train_factors),
                list(&r.test_factors),
                r.variant
            );
            match &r.error {
                Some(e) => s.push_str(&format!("{head},,,{}\n", e.replace([',', '\n'], " "))),
                None => {
                    for (n, x) in r.ns.iter().zip(&r.recall) {
                        s.push_str(&format!("{head},{n},{x},\n"));
                    }
                }
            }
        }
        s
    }
}

/// Trains and evaluates every grid entry (the default grid when the config
/// has none). A failed entry is recorded and the rest still run.
pub fn run_ablation(
    cfg: &RunConfig,
    splits: &Splits,
    out: Option<&Path>,
) -> Result<AblationReport> {
    cfg.validate()?;
    let grid = if cfg.ablation.is_empty() {
        default_ablation_grid()
    } else {
        cfg.ablation.clone()
    };
    let mut rows = Vec::new();
    for run in &grid {
        let sub = RunConfig {
            train: TrainConfig {
                factors: run.train_factors.clone(),
                augmentation: run.augmentation,
                ..cfg.train.clone()
            },
            pyramid: PyramidConfig {
                factors: run
                    .test_factors
                    .clone()
                    .unwrap_or_else(|| cfg.pyramid.factors.clone()),
                ..cfg.pyramid.clone()
            },
            ablation: Vec::new(),
            ..cfg.clone()
        };
        let variants = run
            .variants
            .clone()
            .unwrap_or_else(|| vec![cfg.eval.variant]);
        let row = |variant: Variant, recall: Vec<f64>, error: Option<String>| AblationRow {
            name: run.name.clone(),
            train_factors: run.train_factors.clone(),
            augmentation: run.augmentation,
            test_factors: sub.pyramid.factors.clone(),
            variant,
            ns: cfg.eval.ns.clone(),
            recall,
            error,
        };
        log::info!("ablation run {}", run.name);
        let dir = out.map(|o| o.join(&run.name));
        let result = run_training(&sub, splits, dir.as_deref()).and_then(|t| {
            variants
                .iter()
                .map(|&v| {
                    let spec = EvalSpec {
                        variant: v,
                        ..sub.eval_spec()
                    };
                    evaluate_model(
                        &t.outcome.best_model,
                        &splits.test_db,
                        &splits.test_q,
                        &spec,
                        None,
                        sub.deterministic,
                    )
                    .map(|r| (v, r.recall))
                })
                .collect::<Result<Vec<_>>>()
        });
        match result {
            Ok(rs) => rows.extend(rs.into_iter().map(|(v, r)| row(v, r, None))),
            Err(e) => {
                log::warn!("ablation run {} failed: {e}", run.name);
                rows.extend(
                    variants
                        .iter()
                        .map(|&v| row(v, Vec::new(), Some(e.to_string()))),
                );
            }
        }
    }
    Ok(AblationReport { rows })
}
