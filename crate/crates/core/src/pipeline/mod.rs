//! Calibrate, factorize every planned group, and emit the compressed container.

mod accounting;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::calibration::{
    calibrate, calibrate_from_layer, merge_grams, whitening_factor, CalibrationConfig, GramSet,
    GramStats,
};
use crate::container::{
    basis_name, coeff_name, site_name, Container, GroupLayout, MatrixType, Tensor,
};
use crate::decomposition::{
    factorize_group, rank_for_budget, BasisFactorization, CompressionRatioSpec,
};
use crate::linalg::{svd, Matrix};
use crate::planner::CompressionPlan;
use crate::runtime::{Gpt2Model, LinearWeight};
use crate::{Error, Result};

pub use accounting::{account_params, ParamCounts};
pub use report::{CompressionReport, GroupReport, StageTiming, TypeTotals, RATIO_TOLERANCE};

/// Metadata key for the plan (JSON).
pub const PLAN_KEY: &str = "plan";
/// Metadata key for the human-readable plan.
pub const PLAN_TEXT_KEY: &str = "plan_text";
/// Metadata key for the deterministic compression summary.
pub const REPORT_KEY: &str = "compression";

/// Where whitening statistics come from.
#[derive(Debug, Clone, Copy)]
pub enum GramSource<'a> {
    Precomputed(&'a GramSet),
    /// Forward `tokens` through the model; required for sequential update.
    Calibrate {
        tokens: &'a [u32],
        config: CalibrationConfig,
    },
}

#[derive(Debug, Clone)]
struct GroupJob {
    matrix_type: MatrixType,
    group: usize,
    layers: Vec<usize>,
    k: usize,
    over_budget: bool,
}

struct GroupOutcome {
    job: GroupJob,
    factors: BasisFactorization,
    jitter: f64,
}

fn group_gram(grams: &GramSet, t: MatrixType, layers: &[usize]) -> Result<GramStats> {
    let parts: Vec<&GramStats> = layers
        .iter()
        .map(|&l| grams.require(l, t))
        .collect::<Result<_>>()?;
    merge_grams(&parts)
}

fn factorize_job(
    job: GroupJob,
    weights: &BTreeMap<(usize, MatrixType), Matrix>,
    grams: &GramSet,
) -> Result<GroupOutcome> {
    let stats = group_gram(grams, job.matrix_type, &job.layers)?;
    let s = whitening_factor(&stats)?;
    let ws: Vec<&Matrix> = job
        .layers
        .iter()
        .map(|&l| &weights[&(l, job.matrix_type)])
        .collect();
    let factors = factorize_group(&ws, &s, job.k)?;
    Ok(GroupOutcome {
        jitter: s.jitter_used,
        job,
        factors,
    })
}

fn factorize_all(
    jobs: Vec<GroupJob>,
    weights: &BTreeMap<(usize, MatrixType), Matrix>,
    grams: &GramSet,
) -> Result<Vec<GroupOutcome>> {
    jobs.into_par_iter()
        .map(|job| factorize_job(job, weights, grams))
        .collect()
}

fn install(model: &mut Gpt2Model, out: &GroupOutcome) -> Result<()> {
    let basis = Arc::new(out.factors.basis.clone());
    for (i, &layer) in out.job.layers.iter().enumerate() {
        let site = model.site_mut(layer, out.job.matrix_type).ok_or_else(|| {
            Error::Runtime(format!(
                "runtime has no {} site at layer {layer}",
                out.job.matrix_type
            ))
        })?;
        site.weight = LinearWeight::Factorized {
            basis: basis.clone(),
            coeff: Arc::new(out.factors.coeffs[i].clone()),
        };
    }
    Ok(())
}

struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let seconds = start.elapsed().as_secs_f64();
        match self.0.iter_mut().find(|s| s.stage == stage) {
            Some(s) => s.seconds += seconds,
            None => self.0.push(StageTiming {
                stage: stage.to_string(),
                seconds,
            }),
        }
        out
    }
}

/// Compresses `model` according to `plan`.
///
/// Groups are factorized in parallel unless the plan asks for sequential
/// update; then groups are handled in ascending order of their first layer and
/// Grams for each new start layer are recomputed through the already
/// factorized prefix, which needs a [`GramSource::Calibrate`] source.
pub fn compress_model(
    model: &Container,
    grams: GramSource<'_>,
    plan: &CompressionPlan,
) -> Result<(Container, CompressionReport)> {
    if model.is_compressed() {
        return Err(Error::Plan("model is already compressed".into()));
    }
    plan.check_manifest(&model.manifest)?;
    let mut clock = Stopwatch(Vec::new());

    let jobs: Vec<GroupJob> = plan
        .groups()
        .map(|(t, group, g)| GroupJob {
            matrix_type: t,
            group,
            layers: g.layers.clone(),
            k: g.k,
            over_budget: g.over_budget,
        })
        .collect();
    let mut weights = BTreeMap::new();
    for job in &jobs {
        for &l in &job.layers {
            weights.insert(
                (l, job.matrix_type),
                model.matrix(&site_name(l, job.matrix_type))?,
            );
        }
    }

    let outcomes = if plan.sequential_update {
        let GramSource::Calibrate { tokens, config } = grams else {
            return Err(Error::InvalidArgument(
                "sequential update needs a calibration token stream, not precomputed Grams".into(),
            ));
        };
        let mut runtime = Gpt2Model::from_container(model)?;
        let starts: BTreeSet<usize> = jobs.iter().map(|j| j.layers[0]).collect();
        let mut outcomes = Vec::with_capacity(jobs.len());
        for start in starts {
            let grams = clock.time("calibrate", || {
                calibrate_from_layer(&runtime, tokens, &config, start)
            })?;
            let batch: Vec<GroupJob> = jobs
                .iter()
                .filter(|j| j.layers[0] == start)
                .cloned()
                .collect();
            let done = clock.time("factorize", || factorize_all(batch, &weights, &grams))?;
            for out in &done {
                install(&mut runtime, out)?;
            }
            outcomes.extend(done);
        }
        // restore plan order
        outcomes.sort_by_key(|o| {
            jobs.iter()
                .position(|j| j.matrix_type == o.job.matrix_type && j.group == o.job.group)
        });
        outcomes
    } else {
        let owned;
        let grams = match grams {
            GramSource::Precomputed(g) => g,
            GramSource::Calibrate { tokens, config } => {
                let runtime = Gpt2Model::from_container(model)?;
                owned = clock.time("calibrate", || calibrate(&runtime, tokens, &config))?;
                &owned
            }
        };
        clock.time("factorize", || factorize_all(jobs, &weights, grams))?
    };

    let (out, mut report) = clock.time("assemble", || assemble(model, plan, &outcomes));
    report.stages = clock.0;
    log::info!(
        "compressed scope {} -> {} params (removed {:.4})",
        report.scope_original,
        report.scope_stored,
        report.scope_removed()
    );
    Ok((out, report))
}

fn passthrough(model: &Container, replaced: &BTreeSet<String>) -> Container {
    let mut out = Container::new(model.manifest.clone());
    out.metadata = model.metadata.clone();
    for t in model.tensors.iter().filter(|t| !replaced.contains(&t.name)) {
        out.push(t.clone());
    }
    out
}

fn assemble(
    model: &Container,
    plan: &CompressionPlan,
    outcomes: &[GroupOutcome],
) -> (Container, CompressionReport) {
    let replaced: BTreeSet<String> = outcomes
        .iter()
        .flat_map(|o| {
            o.job
                .layers
                .iter()
                .map(|&l| site_name(l, o.job.matrix_type))
        })
        .collect();
    let mut out = passthrough(model, &replaced);
    let mut layout = GroupLayout::new();
    let mut groups = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let t = o.job.matrix_type;
        out.push(Tensor::from_matrix(
            basis_name(o.job.group, t),
            &o.factors.basis,
        ));
        for (i, &l) in o.job.layers.iter().enumerate() {
            out.push(Tensor::from_matrix(coeff_name(l, t), &o.factors.coeffs[i]));
        }
        layout.entry(t).or_default().push(o.job.layers.clone());
        groups.push(GroupReport {
            matrix_type: t,
            group: o.job.group,
            layers: o.job.layers.clone(),
            k: o.factors.k,
            whitened_loss: o.factors.whitened_loss,
            jitter: o.jitter,
            over_budget: o.job.over_budget,
        });
    }
    out.set_group_layout(&layout);

    let types: Vec<TypeTotals> = plan
        .types
        .iter()
        .map(|p| {
            let mine: Vec<&GroupOutcome> = outcomes
                .iter()
                .filter(|o| o.job.matrix_type == p.matrix_type)
                .collect();
            TypeTotals {
                matrix_type: p.matrix_type,
                policy: p.policy,
                groups: mine.len(),
                original_params: p.original_params(),
                stored_params: mine.iter().map(|o| o.factors.stored_params()).sum(),
                whitened_loss_sq: mine.iter().map(|o| o.factors.whitened_loss_sq()).sum(),
            }
        })
        .collect();

    let before = account_params(model);
    let params = account_params(&out);
    let report = CompressionReport {
        target_removed: plan.ratio.removed(),
        sequential_update: plan.sequential_update,
        groups,
        scope_original: types.iter().map(|t| t.original_params).sum(),
        scope_stored: types.iter().map(|t| t.stored_params).sum(),
        types,
        whole_original: before.total(),
        whole_stored: params.total(),
        params,
        warnings: plan.warnings.clone(),
        stages: Vec::new(),
    };
    out.metadata.insert(
        PLAN_KEY.into(),
        serde_json::to_value(plan).expect("plan serializes"),
    );
    out.metadata
        .insert(PLAN_TEXT_KEY.into(), plan.render_text().into());
    out.metadata.insert(REPORT_KEY.into(), report.to_json());
    (out, report)
}

/// Reference per-layer whitened SVD: every site of `types` factorized alone at
/// its single-layer budget rank, laid out like the pipeline's output tensors.
///
/// The result carries the group layout but none of the plan or report metadata.
pub fn per_layer_baseline(
    model: &Container,
    grams: &GramSet,
    types: &[MatrixType],
    spec: CompressionRatioSpec,
) -> Result<Container> {
    let m = &model.manifest;
    let mut replaced = BTreeSet::new();
    let mut factored = Vec::new();
    for &t in m.matrix_types.iter().filter(|t| types.contains(t)) {
        let (d1, d2) = m.matrix_shape(t);
        let k = rank_for_budget(d1, d2, 1, spec);
        for layer in 0..m.layers {
            let w = model.matrix(&site_name(layer, t))?;
            let s = whitening_factor(grams.require(layer, t)?)?;
            let top = svd(&s.apply(&w)?)?.truncate(k);
            let basis = s.solve(&top.u.scale_columns(&top.singular_values))?;
            replaced.insert(site_name(layer, t));
            factored.push((t, layer, basis, top.vt));
        }
    }
    let mut out = passthrough(model, &replaced);
    out.metadata.clear();
    let mut layout = GroupLayout::new();
    for (t, layer, basis, coeff) in factored {
        out.push(Tensor::from_matrix(basis_name(layer, t), &basis));
        out.push(Tensor::from_matrix(coeff_name(layer, t), &coeff));
        layout.entry(t).or_default().push(vec![layer]);
    }
    out.set_group_layout(&layout);
    Ok(out)
}
