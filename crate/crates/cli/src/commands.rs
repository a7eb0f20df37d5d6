use std::path::{Path, PathBuf};

use bshare_core::calibration::{calibrate as run_calibration, CalibrationConfig, GramSet};
use bshare_core::container::{Container, MatrixType};
use bshare_core::decomposition::CompressionRatioSpec;
use bshare_core::pipeline::{account_params, compress_model, GramSource, REPORT_KEY};
use bshare_core::planner::{
    build_plan, pairwise_loss_matrix, policies_sharing, type_shareability, CompressionPlan,
};
use bshare_core::runtime::{bench as run_bench, stream_nll, EvalConfig, Gpt2Model};
use bshare_core::synthetic::{gen_synthetic as generate, synthetic_tokens, SyntheticConfig};
use bshare_core::{Matrix, TokenStream};
use serde_json::json;

use crate::output::{input, write_atomic, write_json, CliError, CliResult};
use crate::{
    AnalyzeArgs, BenchArgs, CalibrateArgs, CalibrationArgs, CompressArgs, EvalArgs,
    GenSyntheticArgs, InfoArgs, PlanArgs, PlanOptions,
};

fn ratio(r: f64) -> CliResult<CompressionRatioSpec> {
    Ok(CompressionRatioSpec::new(r)?)
}

fn read_model(path: &Path) -> CliResult<Container> {
    Ok(Container::read(input(path)?)?)
}

fn read_tokens(path: &Path, model: &Container) -> CliResult<TokenStream> {
    let s = TokenStream::read(input(path)?)?;
    if s.vocab as usize > model.manifest.vocab {
        return Err(CliError::Core(bshare_core::Error::InvalidArgument(
            format!(
                "token stream vocabulary {} exceeds model vocabulary {}",
                s.vocab, model.manifest.vocab
            ),
        )));
    }
    Ok(s)
}

/// Calibration tokens and window config, clamping the window to the model context.
///
/// A synthetic model without `--tokens` is calibrated on a seeded synthetic stream.
fn calibration_input(
    model: &Container,
    args: &CalibrationArgs,
) -> CliResult<(Vec<u32>, CalibrationConfig)> {
    let context = model.manifest.context;
    let mut seq_len = args.seqlen;
    if seq_len > context {
        log::warn!("--seqlen {seq_len} exceeds model context {context}; using {context}");
        seq_len = context;
    }
    let config = CalibrationConfig {
        samples: args.samples,
        seq_len,
    };
    let tokens = match &args.tokens {
        Some(path) => read_tokens(path, model)?.tokens,
        None if model.metadata.contains_key("synthetic") => {
            log::warn!(
                "no --tokens given; calibrating the synthetic model on {} x {seq_len} synthetic tokens (seed {})",
                args.samples,
                args.seed
            );
            synthetic_tokens(model.manifest.vocab, args.samples * seq_len, args.seed).tokens
        }
        None => {
            return Err(CliError::Usage(
                "calibration needs --tokens (or --grams where accepted)".into(),
            ))
        }
    };
    Ok((tokens, config))
}

fn gram_set(
    model: &Container,
    grams: Option<&PathBuf>,
    calib: &CalibrationArgs,
) -> CliResult<GramSet> {
    match grams {
        Some(path) => Ok(GramSet::from_container(&Container::read(input(path)?)?)?),
        None => {
            let (tokens, config) = calibration_input(model, calib)?;
            let runtime = Gpt2Model::from_container(model)?;
            Ok(run_calibration(&runtime, &tokens, &config)?)
        }
    }
}

fn build(model: &Container, opts: &PlanOptions) -> CliResult<CompressionPlan> {
    let policies = policies_sharing(&model.manifest, &opts.types.0);
    Ok(build_plan(
        &model.manifest,
        &policies,
        opts.group_size,
        ratio(opts.ratio)?,
    )?
    .with_sequential(opts.sequential_update))
}

pub fn gen_synthetic(a: GenSyntheticArgs) -> CliResult {
    let cfg = SyntheticConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        mlp: a.mlp,
        vocab: a.vocab,
        context: a.context,
        seed: a.seed,
    };
    if cfg.layers == 0 || cfg.hidden == 0 || cfg.vocab == 0 || cfg.context == 0 {
        return Err(CliError::Usage(
            "layers, hidden, vocab and context must be positive".into(),
        ));
    }
    if cfg.heads == 0 || !cfg.hidden.is_multiple_of(cfg.heads) {
        return Err(CliError::Usage(format!(
            "--hidden {} is not divisible by --heads {}",
            cfg.hidden, cfg.heads
        )));
    }
    let c = generate(&cfg);
    write_atomic(&a.out, &c.to_bytes()?)?;
    println!(
        "wrote {} ({} tensors, {} params)",
        a.out.display(),
        c.tensors.len(),
        account_params(&c).total()
    );
    if let Some(path) = &a.out_tokens {
        let s = synthetic_tokens(cfg.vocab, a.token_count, cfg.seed);
        write_atomic(path, &s.to_bytes())?;
        println!("wrote {} ({} tokens)", path.display(), s.tokens.len());
    }
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let grams = gram_set(&model, None, &a.calib)?;
    let c = grams.to_container(&model.manifest);
    write_atomic(&a.out, &c.to_bytes()?)?;
    let tokens = grams.sites.values().next().map_or(0, |s| s.token_count);
    println!(
        "wrote {} ({} sites, {tokens} tokens per site)",
        a.out.display(),
        grams.sites.len()
    );
    Ok(())
}

fn heatmap_csv(path: &Path, m: &Matrix) -> CliResult {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut header = vec!["layer".to_string()];
    header.extend((0..m.cols()).map(|j| j.to_string()));
    w.write_record(&header).map_err(io)?;
    for i in 0..m.rows() {
        let mut row = vec![i.to_string()];
        row.extend(m.row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let spec = ratio(a.ratio)?;
    let grams = gram_set(&model, a.grams.as_ref(), &a.calib)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", a.out.display())))?;

    let types: Vec<MatrixType> = model
        .manifest
        .matrix_types
        .iter()
        .copied()
        .filter(|&t| grams.get(0, t).is_some())
        .collect();
    let mut heatmaps = Vec::with_capacity(types.len());
    for t in types {
        let h = pairwise_loss_matrix(&model, &grams, t, spec)?;
        heatmap_csv(&a.out.join(format!("heatmap_{t}.csv")), &h.loss)?;
        heatmap_csv(
            &a.out.join(format!("heatmap_{t}_squared.csv")),
            &h.squared(),
        )?;
        heatmaps.push(h);
    }
    let verdicts = type_shareability(&heatmaps);
    let mut table = serde_json::Map::new();
    for (t, v) in &verdicts {
        println!(
            "{:<4} {:<9} {}/{} adjacent pairs favour sharing",
            t.as_str(),
            v.policy.as_str(),
            v.favored_pairs,
            v.pairs
        );
        table.insert(
            t.to_string(),
            json!({
                "policy": v.policy,
                "favored_pairs": v.favored_pairs,
                "pairs": v.pairs,
                "fraction": v.fraction(),
            }),
        );
    }
    write_json(
        &a.out.join("shareability.json"),
        &json!({ "removed": spec.removed(), "layers": model.manifest.layers, "types": table }),
    )?;
    println!(
        "wrote heatmaps and shareability.json to {}",
        a.out.display()
    );
    Ok(())
}

pub fn plan(a: PlanArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let plan = build(&model, &a.plan)?;
    print!("{}", plan.render_text());
    println!(
        "compressed scope: {} -> {} params",
        plan.original_params(),
        plan.stored_params()
    );
    if let Some(path) = &a.out {
        write_json(path, &serde_json::to_value(&plan).expect("plan serializes"))?;
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn compress(a: CompressArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let plan = build(&model, &a.plan)?;
    let (out, report) = match &a.grams {
        Some(path) => {
            let grams = GramSet::from_container(&Container::read(input(path)?)?)?;
            compress_model(&model, GramSource::Precomputed(&grams), &plan)?
        }
        None => {
            let (tokens, config) = calibration_input(&model, &a.calib)?;
            compress_model(
                &model,
                GramSource::Calibrate {
                    tokens: &tokens,
                    config,
                },
                &plan,
            )?
        }
    };
    write_atomic(&a.out, &out.to_bytes()?)?;

    let text = report.render_text();
    let mut json = report.to_json();
    json["stages"] = serde_json::to_value(&report.stages).expect("timings serialize");
    let prefix = a.report.as_deref().unwrap_or(&a.out);
    write_atomic(&with_suffix(prefix, ".report.txt"), text.as_bytes())?;
    write_json(&with_suffix(prefix, ".report.json"), &json)?;

    print!("{text}");
    println!("scope removed {}", report.scope_removed());
    println!("scope retained {}", 1.0 - report.scope_removed());
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let tokens = read_tokens(&a.tokens, &model)?;
    let context = model.manifest.context;
    let mut seq_len = a.seqlen;
    if seq_len > context {
        log::warn!("--seqlen {seq_len} exceeds model context {context}; using {context}");
        seq_len = context;
    }
    let cfg = EvalConfig {
        seq_len,
        stride: a.stride.unwrap_or(seq_len),
        batch_size: a.batch_size,
    };
    let runtime = Gpt2Model::from_container(&model)?;
    let nll = stream_nll(&runtime, &tokens.tokens, &cfg)?;
    println!("scored tokens {}", nll.count);
    println!("mean nll {}", nll.total / nll.count as f64);
    println!("perplexity {}", nll.perplexity());
    Ok(())
}

pub fn bench(a: BenchArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let runtime = Gpt2Model::from_container(&model)?;
    let r = run_bench(&runtime, a.batch, a.seq, a.runs, a.seed)?;
    println!("batch {} x seq {}", r.batch, r.seq);
    println!(
        "flops linear {} (factorized {}) attention {} head {} total {}",
        r.flops.linear,
        r.flops.factorized,
        r.flops.attention,
        r.flops.head,
        r.flops.total()
    );
    println!(
        "median {:.6}s over {} runs",
        r.median_seconds,
        r.run_seconds.len()
    );
    println!("tokens/s {:.1}", r.tokens_per_sec);
    if let Some(path) = &a.out {
        write_json(
            path,
            &serde_json::to_value(&r).expect("bench result serializes"),
        )?;
    }
    Ok(())
}

fn describe_ratio(removed: f64) -> String {
    format!(
        "removed fraction {removed}, retained fraction {}",
        1.0 - removed
    )
}

pub fn info(a: InfoArgs) -> CliResult {
    let c = read_model(&a.model)?;
    let m = &c.manifest;
    println!("architecture {:?}", m.architecture);
    println!(
        "layers {} hidden {} mlp {} heads {} vocab {} context {}",
        m.layers, m.hidden, m.mlp, m.heads, m.vocab, m.context
    );
    let types: Vec<&str> = m.matrix_types.iter().map(|t| t.as_str()).collect();
    println!("matrix types {}", types.join(","));
    println!("tensors {}", c.tensors.len());

    let p = account_params(&c);
    println!(
        "params total {} (embeddings {}, norms {}, biases {}, head {}, other {})",
        p.total(),
        p.embeddings,
        p.norms,
        p.biases,
        p.head,
        p.other
    );
    println!(
        "matrix params {} (dense {}, bases {}, coefficients {}) of {} dense",
        p.matrix_params(),
        p.dense_sites,
        p.bases,
        p.coeffs,
        p.original_matrix_params
    );
    for (t, n) in &p.per_type {
        println!("  {:<4} {n}", t.as_str());
    }

    if c.is_compressed() {
        let layout = c.group_layout()?;
        for (t, groups) in &layout {
            println!("  {:<4} {} groups", t.as_str(), groups.len());
        }
        if let Some(r) = c.metadata.get(REPORT_KEY) {
            if let Some(x) = r.get("scope_removed").and_then(|v| v.as_f64()) {
                println!("compressed scope: {}", describe_ratio(x));
            }
            if let Some(x) = r.get("whole_removed").and_then(|v| v.as_f64()) {
                println!("whole model: {}", describe_ratio(x));
            }
        }
    } else {
        println!("dense (not compressed)");
    }
    if let Some(r) = a.ratio {
        let spec = ratio(r)?;
        println!("--ratio {}", describe_ratio(spec.removed()));
    }
    Ok(())
}
