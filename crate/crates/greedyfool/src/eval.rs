//! Evaluation harness: dynamic/static sparsity metrics, target attacks,
//! the kappa transfer sweep, component ablation, and the direction
//! percentile sweep, plus JSONL/CSV report emission.

use crate::attack::{self, AttackConfig, AttackError, AttackResult};
use crate::data::LabeledImageSet;
use crate::distortion::{self, DistortionError, DistortionMap};
use crate::nn::Model;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty image set")]
    EmptyImageSet,
    #[error("target label equals true label for image {index}")]
    TargetIsLabel { index: usize },
    #[error("victim model input spec differs from source")]
    IncompatibleModels,
    #[error("attack invariant violated on image {index}: {detail}")]
    InvariantViolation { index: usize, detail: String },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

/// Where attacks obtain a distortion map per image.
#[derive(Clone, Copy)]
pub enum DistortionSource<'a> {
    None,
    Gan(&'a Model),
    Variance,
}

impl<'a> DistortionSource<'a> {
    fn map_for(&self, x: &Tensor) -> Result<Option<DistortionMap>, EvalError> {
        match self {
            DistortionSource::None => Ok(None),
            DistortionSource::Gan(g) => Ok(Some(distortion::generate_map(g, x)?)),
            DistortionSource::Variance => Ok(Some(distortion::variance_distortion(x))),
        }
    }
}

/// One per-image row of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: usize,
    pub target: Option<usize>,
    pub success: bool,
    pub pixel_count: usize,
    pub increase_iterations: usize,
    pub reduce_iterations: usize,
    pub final_class: usize,
    pub final_margin: f64,
    pub increase_ms: f64,
    pub reduce_ms: f64,
}

/// Aggregated outcome over an image set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<ImageRecord>,
    /// Mean pixels over successful attacks only.
    pub mean_pixels: Option<f64>,
    /// Median pixels over successful attacks only.
    pub median_pixels: Option<f64>,
    /// Percentage of attempted images successfully fooled.
    pub fooling_rate: f64,
    pub static_curve: Vec<(usize, f64)>,
    pub config: AttackConfig,
    pub total_ms: f64,
}

fn aggregate(records: Vec<ImageRecord>, config: &AttackConfig, total_ms: f64) -> EvaluationReport {
    let mut counts: Vec<usize> = records
        .iter()
        .filter(|r| r.success)
        .map(|r| r.pixel_count)
        .collect();
    counts.sort_unstable();
    let mean_pixels = if counts.is_empty() {
        None
    } else {
        Some(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
    };
    let median_pixels = if counts.is_empty() {
        None
    } else if counts.len() % 2 == 1 {
        Some(counts[counts.len() / 2] as f64)
    } else {
        Some((counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0)
    };
    let fooling_rate = 100.0 * counts.len() as f64 / records.len() as f64;
    EvaluationReport {
        records,
        mean_pixels,
        median_pixels,
        fooling_rate,
        static_curve: Vec::new(),
        config: config.clone(),
        total_ms,
    }
}

/// Indices of the first `limit` test images the model classifies correctly.
pub fn correctly_classified(
    model: &Model,
    set: &LabeledImageSet,
    limit: usize,
) -> Result<Vec<usize>, EvalError> {
    let mut out = Vec::new();
    for i in 0..set.len() {
        if out.len() == limit {
            break;
        }
        if model.predict(&set.images[i])? == set.labels[i] {
            out.push(i);
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    Ok(out)
}

fn run_indexed<F>(indices: &[usize], f: F) -> Result<Vec<ImageRecord>, EvalError>
where
    F: Fn(usize) -> Result<ImageRecord, EvalError> + Sync,
{
    // deterministic order regardless of scheduling: collect by position
    indices
        .par_iter()
        .map(|&i| f(i))
        .collect::<Result<Vec<_>, _>>()
}

fn attack_one(
    model: &Model,
    set: &LabeledImageSet,
    index: usize,
    config: &AttackConfig,
    source: DistortionSource<'_>,
) -> Result<ImageRecord, EvalError> {
    let x = &set.images[index];
    let y = set.labels[index];
    let rho = source.map_for(x)?;
    let res = attack::greedyfool(model, x, y, config, rho.as_ref())?;
    res.check_invariants(x, y, config)
        .map_err(|detail| EvalError::InvariantViolation { index, detail })?;
    if let Some(r) = &rho {
        verify_gating(&res, r, config, index)?;
    }
    Ok(record_of(index, y, config.target, &res))
}

/// p = 0 pixels must never be perturbed.
fn verify_gating(
    res: &AttackResult,
    rho: &DistortionMap,
    config: &AttackConfig,
    index: usize,
) -> Result<(), EvalError> {
    let pm = attack::weight_map(rho, config.tau_percentiles);
    if pm.degenerate {
        return Ok(());
    }
    let (h, w) = (rho.height(), rho.width());
    for p in 0..h * w {
        if pm.values.data()[p] == 0.0 && res.mask.get(p) {
            return Err(EvalError::InvariantViolation {
                index,
                detail: format!("pixel {p} gated by p=0 but perturbed"),
            });
        }
    }
    Ok(())
}

fn record_of(index: usize, label: usize, target: Option<usize>, res: &AttackResult) -> ImageRecord {
    ImageRecord {
        index,
        label,
        target,
        success: res.success,
        pixel_count: res.pixel_count,
        increase_iterations: res.increase_iterations,
        reduce_iterations: res.reduce_iterations,
        final_class: res.final_class,
        final_margin: res.final_margin,
        increase_ms: res.increase_ms,
        reduce_ms: res.reduce_ms,
    }
}

/// Attack every listed image until success or budget exhaustion; report
/// mean/median pixel counts and the fooling rate.
pub fn dynamic_evaluation(
    model: &Model,
    set: &LabeledImageSet,
    indices: &[usize],
    config: &AttackConfig,
    source: DistortionSource<'_>,
) -> Result<EvaluationReport, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let t0 = std::time::Instant::now();
    let records = run_indexed(indices, |i| attack_one(model, set, i, config, source))?;
    let mut report = aggregate(records, config, t0.elapsed().as_secs_f64() * 1e3);
    report.static_curve = static_evaluation(&report, &[10, 20, 50, 100, 200]);
    Ok(report)
}

/// Post-hoc hard-budget curve: for each m, the percentage of attempted
/// images whose successful attack used at most m pixels.
pub fn static_evaluation(report: &EvaluationReport, budgets: &[usize]) -> Vec<(usize, f64)> {
    let n = report.records.len() as f64;
    budgets
        .iter()
        .map(|&m| {
            let hit = report
                .records
                .iter()
                .filter(|r| r.success && r.pixel_count <= m)
                .count();
            (m, 100.0 * hit as f64 / n)
        })
        .collect()
}

/// Targeted variant: per image, a uniformly sampled target class distinct
/// from the true label (seeded); success means argmax == target.
pub fn target_evaluation(
    model: &Model,
    set: &LabeledImageSet,
    indices: &[usize],
    config: &AttackConfig,
    source: DistortionSource<'_>,
    seed: u64,
) -> Result<EvaluationReport, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_7267); // "targ"
    let classes = set.classes;
    let targets: Vec<usize> = indices
        .iter()
        .map(|&i| {
            let y = set.labels[i];
            let mut t = rng.gen_range(0..classes - 1);
            if t >= y {
                t += 1;
            }
            t
        })
        .collect();
    for (&i, &t) in indices.iter().zip(&targets) {
        if t == set.labels[i] {
            return Err(EvalError::TargetIsLabel { index: i });
        }
    }
    let t0 = std::time::Instant::now();
    let pairs: Vec<(usize, usize)> = indices.iter().copied().zip(targets).collect();
    let records = pairs
        .par_iter()
        .map(|&(i, target)| {
            let cfg = AttackConfig {
                target: Some(target),
                ..config.clone()
            };
            attack_one(model, set, i, &cfg, source)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(records, config, t0.elapsed().as_secs_f64() * 1e3))
}

/// One row of the kappa transfer sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRow {
    pub kappa: f64,
    pub mean_pixels: Option<f64>,
    pub median_pixels: Option<f64>,
    pub white_box_rate: f64,
    /// Fooling rate of the crafted samples on each victim, in input order.
    pub victim_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

/// Stage-1-only attacks on the source model across a kappa grid, with
/// each crafted sample replayed against every victim model.
pub fn transfer_study(
    source: &Model,
    victims: &[&Model],
    set: &LabeledImageSet,
    indices: &[usize],
    kappa_grid: &[f64],
    config: &AttackConfig,
    dist: DistortionSource<'_>,
) -> Result<TransferReport, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    for v in victims {
        if v.input != source.input {
            return Err(EvalError::IncompatibleModels);
        }
    }
    let mut rows = Vec::new();
    for &kappa in kappa_grid {
        let cfg = AttackConfig {
            kappa,
            reduce: false,
            ..config.clone()
        };
        let outcomes = indices
            .par_iter()
            .map(|&i| {
                let x = &set.images[i];
                let y = set.labels[i];
                let rho = dist.map_for(x)?;
                let res = attack::greedyfool(source, x, y, &cfg, rho.as_ref())?;
                res.check_invariants(x, y, &cfg)
                    .map_err(|detail| EvalError::InvariantViolation { index: i, detail })?;
                Ok::<_, EvalError>((y, res))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut counts: Vec<usize> = outcomes
            .iter()
            .filter(|(_, r)| r.success)
            .map(|(_, r)| r.pixel_count)
            .collect();
        counts.sort_unstable();
        let mean_pixels = (!counts.is_empty())
            .then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64);
        let median_pixels = (!counts.is_empty()).then(|| {
            if counts.len() % 2 == 1 {
                counts[counts.len() / 2] as f64
            } else {
                (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0
            }
        });
        let white_box_rate =
            100.0 * outcomes.iter().filter(|(_, r)| r.success).count() as f64
                / outcomes.len() as f64;
        let mut victim_rates = Vec::new();
        for v in victims {
            let fooled = outcomes
                .par_iter()
                .map(|(y, r)| Ok::<_, EvalError>((v.predict(&r.adversarial)? != *y) as usize))
                .collect::<Result<Vec<_>, _>>()?;
            victim_rates
                .push(100.0 * fooled.iter().sum::<usize>() as f64 / outcomes.len() as f64);
        }
        rows.push(TransferRow {
            kappa,
            mean_pixels,
            median_pixels,
            white_box_rate,
            victim_rates,
        });
    }
    Ok(TransferReport { rows })
}

/// One row of the component ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mean_pixels: Option<f64>,
    pub median_pixels: Option<f64>,
    pub fooling_rate: f64,
}

/// Four-variant component ablation: Incr, Incr+Reduce, Incr+Dis,
/// Incr+Reduce+Dis.
pub fn component_ablation(
    model: &Model,
    set: &LabeledImageSet,
    indices: &[usize],
    config: &AttackConfig,
    dist: DistortionSource<'_>,
) -> Result<Vec<AblationRow>, EvalError> {
    let variants: [(&str, bool, bool); 4] = [
        ("Incr", false, false),
        ("Incr+Reduce", true, false),
        ("Incr+Dis", false, true),
        ("Incr+Reduce+Dis", true, true),
    ];
    let mut rows = Vec::new();
    for (name, reduce, use_dist) in variants {
        let cfg = AttackConfig {
            reduce,
            ..config.clone()
        };
        let source = if use_dist { dist } else { DistortionSource::None };
        let rep = dynamic_evaluation(model, set, indices, &cfg, source)?;
        rows.push(AblationRow {
            name: name.to_string(),
            mean_pixels: rep.mean_pixels,
            median_pixels: rep.median_pixels,
            fooling_rate: rep.fooling_rate,
        });
    }
    Ok(rows)
}

/// One point of the direction-vs-sign sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionPoint {
    pub q: f64,
    /// Mean cosine similarity between the raw and remapped step direction.
    pub cosine: f64,
    pub mean_pixels: Option<f64>,
    pub fooling_rate: f64,
}

/// Sweep the direction percentile q, reporting mean pixel counts and the
/// mean cosine of the remapped direction against the raw gradient.
pub fn direction_sweep(
    model: &Model,
    set: &LabeledImageSet,
    indices: &[usize],
    config: &AttackConfig,
    q_grid: &[f64],
) -> Result<Vec<DirectionPoint>, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let mut points = Vec::new();
    for &q in q_grid {
        let cfg = AttackConfig {
            direction_percentile: q,
            reduce: false,
            ..config.clone()
        };
        let rep = dynamic_evaluation(model, set, indices, &cfg, DistortionSource::None)?;
        // cosine measured on the final perturbations against their
        // remapped form
        let cosines = indices
            .par_iter()
            .map(|&i| {
                let x = &set.images[i];
                let g = model.input_gradient(
                    x,
                    crate::loss::LossSpec::Margin {
                        label: set.labels[i],
                        kappa: 0.0,
                    },
                )?;
                let mapped = match attack::direction_ablation(&g, q) {
                    Ok(m) => m,
                    Err(_) => return Ok::<_, EvalError>(1.0),
                };
                Ok(cosine(&g, &mapped))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cosine = cosines.iter().sum::<f64>() / cosines.len() as f64;
        points.push(DirectionPoint {
            q,
            cosine,
            mean_pixels: rep.mean_pixels,
            fooling_rate: rep.fooling_rate,
        });
    }
    Ok(points)
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Write per-image records as JSON lines (one object per line).
pub fn write_jsonl(records: &[ImageRecord], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Flat CSV of the per-image records.
pub fn write_csv(records: &[ImageRecord], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "index,label,target,success,pixel_count,increase_iterations,reduce_iterations,final_class,final_margin"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.label,
            r.target.map(|t| t.to_string()).unwrap_or_default(),
            r.success,
            r.pixel_count,
            r.increase_iterations,
            r.reduce_iterations,
            r.final_class,
            r.final_margin
        )?;
    }
    Ok(())
}

/// Plot-data triples (q, cosine, mean pixels) as CSV.
pub fn write_plot_data(points: &[DirectionPoint], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "q,cosine,mean_pixels")?;
    for p in points {
        writeln!(
            f,
            "{},{},{}",
            p.q,
            p.cosine,
            p.mean_pixels.map(|m| m.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
