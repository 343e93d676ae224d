use std::fs;
use std::path::{Path, PathBuf};

use grcvit::complexity::{CoarseDecision, EstimatorParams, Granularity};
use grcvit::estimator::{compute_quantile_targets, trace_csv, train_estimator};
use grcvit::image::{resize_rgb_bilinear, to_grayscale};
use grcvit::model::flops::{evaluate as evaluate_flops, reference_sweep};
use grcvit::model::train::{
    calibrate_coarse_stage, evaluate, train_fine_toy, FineTrainConfig, LabeledDataset, RoutingSource,
};
use grcvit::model::{classify, forward_fine, forward_logits, ForwardTrace, ModelError};
use grcvit::tensor::{grad_check_store, Graph, TensorError};
use grcvit::{CoarseStage, CoarseTrainConfig, ComplexityCorpus, ModelConfig, ModelParams, RgbImage, SyntheticSpec};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{fail, CliResult, Code, Tagged};
use crate::inputs::{collect, Input};

/// Create the output directory and record the resolved configuration.
fn prepare(command: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).tag(Code::Io, format!("creating {}", out.display()))?;
    let resolved = json!({ "command": command, "config": cfg });
    info!("resolved config: {resolved}");
    write(&out.join("resolved_config.json"), serde_json::to_string_pretty(&resolved).expect("config serializes"))?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).tag(Code::Io, format!("writing {}", path.display()))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let ctx = || format!("writing {}", path.display());
    w.write_record(header).tag(Code::Io, ctx())?;
    for r in rows {
        w.write_record(r).tag(Code::Io, ctx())?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error()).tag(Code::Io, ctx())?;
    write(path, bytes)
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn granularity(level: u8) -> CliResult<Granularity> {
    Ok(Granularity::from_level(level)?)
}

/// Estimator parameters from `--estimator` (or the defaults) with any
/// configured threshold overrides applied.
fn estimator_params(cfg: &RunConfig) -> CliResult<EstimatorParams> {
    let params = match &cfg.estimator {
        Some(p) => EstimatorParams::load(p)?,
        None => EstimatorParams::default(),
    };
    if cfg.alpha.is_none() && cfg.beta.is_none() {
        return Ok(params);
    }
    let th = params.thresholds();
    let (alpha, beta) = (cfg.alpha.unwrap_or(th.alpha), cfg.beta.unwrap_or(th.beta));
    if !(0.0 < alpha && alpha < beta && beta < 1.0) {
        return Err(fail(Code::Usage, format!("thresholds need 0 < alpha < beta < 1, got alpha={alpha} beta={beta}")));
    }
    Ok(params.with_thresholds(alpha, beta))
}

fn coarse_stage(cfg: &RunConfig, default_resize: usize) -> CliResult<CoarseStage> {
    Ok(CoarseStage {
        params: estimator_params(cfg)?,
        descriptors: cfg.descriptors.unwrap_or_default(),
        resize: Some(cfg.resize.unwrap_or(default_resize)).filter(|&s| s > 0),
    })
}

fn model_config(cfg: &RunConfig, classes: usize) -> CliResult<ModelConfig> {
    match cfg.model.as_deref().unwrap_or("tiny") {
        "tiny" => Ok(ModelConfig { classes, ..ModelConfig::tiny() }),
        "standard" => Ok(ModelConfig::standard(classes)),
        other => Err(fail(Code::Usage, format!("unknown model preset {other:?} (expected tiny or standard)"))),
    }
}

fn load_or_init_model(cfg: &RunConfig) -> CliResult<ModelParams> {
    match &cfg.checkpoint {
        Some(path) => Ok(ModelParams::load(path)?),
        None => Ok(ModelParams::init(model_config(cfg, 3)?, cfg.seed())?),
    }
}

fn fit_to_model(img: &RgbImage, config: &ModelConfig) -> CliResult<RgbImage> {
    let side = config.image_size;
    if img.width() == side && img.height() == side {
        Ok(img.clone())
    } else {
        Ok(resize_rgb_bilinear(img, side, side)?)
    }
}

fn decide_all(stage: &CoarseStage, inputs: &[Input]) -> CliResult<Vec<CoarseDecision>> {
    inputs.par_iter().map(|i| Ok(stage.decide(&to_grayscale(&i.image))?)).collect()
}

pub fn profile(cfg: &RunConfig) -> CliResult<()> {
    let stage = coarse_stage(cfg, 224)?;
    let inputs = collect(cfg.input.as_deref(), &cfg.synthetic)?;
    let out = prepare("profile", cfg)?;
    let decisions = decide_all(&stage, &inputs)?;
    let rows: Vec<Vec<String>> = inputs
        .iter()
        .zip(&decisions)
        .map(|(i, d)| {
            let f = d.features;
            vec![
                i.id.clone(),
                f.edge.to_string(),
                f.entropy.to_string(),
                f.freq.to_string(),
                d.score.to_string(),
                d.granularity.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("complexity.csv"), &strings(&["path", "edge", "entropy", "freq", "phi", "granularity"]), &rows)?;

    let n = decisions.len();
    let levels: Vec<_> = Granularity::ALL
        .iter()
        .map(|&g| {
            let phis: Vec<f64> = decisions.iter().filter(|d| d.granularity == g).map(|d| d.score).collect();
            let mean = (!phis.is_empty()).then(|| phis.iter().sum::<f64>() / phis.len() as f64);
            json!({
                "granularity": g.level(),
                "count": phis.len(),
                "fraction": phis.len() as f64 / n as f64,
                "mean_phi": mean,
            })
        })
        .collect();
    let th = stage.params.thresholds();
    let hist = json!({
        "images": n,
        "alpha": th.alpha,
        "beta": th.beta,
        "mean_phi": decisions.iter().map(|d| d.score).sum::<f64>() / n as f64,
        "levels": levels,
    });
    write(&out.join("histogram.json"), serde_json::to_string_pretty(&hist).expect("json"))?;
    for l in hist["levels"].as_array().expect("levels") {
        println!("granularity {}: {} images ({:.1}%)", l["granularity"], l["count"], 100.0 * l["fraction"].as_f64().unwrap_or(0.0));
    }
    Ok(())
}

pub fn train_estimator_cmd(cfg: &RunConfig) -> CliResult<()> {
    let mut train = CoarseTrainConfig { seed: cfg.seed(), ..CoarseTrainConfig::desk() };
    if let Some(e) = cfg.epochs {
        train.epochs = e;
    }
    if let Some(lr) = cfg.lr {
        train.lr = lr;
    }
    if let Some(b) = cfg.batch {
        train.batch = b;
    }
    train.validate()?;
    let probe = coarse_stage(cfg, 224)?;
    let inputs = collect(cfg.input.as_deref(), &cfg.synthetic)?;
    let out = prepare("train-estimator", cfg)?;
    let features: Vec<_> = inputs.par_iter().map(|i| Ok(probe.features(&to_grayscale(&i.image))?)).collect::<CliResult<_>>()?;
    let entries = inputs.iter().enumerate().zip(features).map(|((k, i), f)| (format!("{k}:{}", i.id), f)).collect();
    let corpus = ComplexityCorpus::new(entries)?;
    let targets = compute_quantile_targets(&corpus, &probe.params)?;
    let (params, trace) = train_estimator(&corpus, &targets, probe.params, &train)?;
    params.save(out.join("estimator.json")).tag(Code::Io, "writing estimator.json")?;
    write(&out.join("trace.csv"), trace_csv(&trace))?;
    let (first, last) = (trace[0], trace[trace.len() - 1]);
    println!(
        "loss {} -> {} over {} epochs; alpha={} beta={}",
        first.loss, last.loss, train.epochs, last.alpha, last.beta
    );
    Ok(())
}

pub fn flops(cfg: &RunConfig) -> CliResult<()> {
    let sweep = cfg.sweep.clone().unwrap_or_else(reference_sweep);
    let out = prepare("flops", cfg)?;
    let rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|e| {
            let r = evaluate_flops(e);
            println!("{}: swin={} grc={} ratio={:.4}", r.name, r.swin, r.grc, r.ratio);
            vec![r.name, r.swin.to_string(), r.grc.to_string(), r.ratio.to_string()]
        })
        .collect();
    write_csv(&out.join("flops.csv"), &strings(&["config", "swin", "grc", "ratio"]), &rows)
}

fn parse_routing(cfg: &RunConfig) -> CliResult<Option<RoutingSource>> {
    let spec = match (&cfg.routing, cfg.granularity) {
        (Some(r), _) => r.clone(),
        (None, Some(g)) => format!("fixed:{g}"),
        (None, None) => "adaptive".into(),
    };
    let bad = || fail(Code::Usage, format!("bad routing {spec:?} (expected adaptive, fixed:G or random[:SEED])"));
    match spec.split_once(':') {
        None if spec == "adaptive" => Ok(None),
        None if spec == "random" => Ok(Some(RoutingSource::Random { seed: cfg.seed() })),
        Some(("fixed", g)) => Ok(Some(RoutingSource::Fixed(granularity(g.parse().map_err(|_| bad())?)?))),
        Some(("random", s)) => Ok(Some(RoutingSource::Random { seed: s.parse().map_err(|_| bad())? })),
        _ => Err(bad()),
    }
}

fn labeled(dir: Option<&str>, n: usize, side: usize, seed: u64) -> CliResult<LabeledDataset> {
    match dir {
        Some(d) if d.starts_with("synth:") => {
            Err(fail(Code::Usage, "train-toy needs a labeled folder (one sub-directory per class)"))
        }
        Some(d) => {
            if !Path::new(d).is_dir() {
                return Err(fail(Code::Io, format!("dataset directory {d} does not exist")));
            }
            Ok(LabeledDataset::load_folder(d, side)?)
        }
        None => Ok(LabeledDataset::synthetic_textures(n, side, seed)?),
    }
}

pub fn train_toy(cfg: &RunConfig) -> CliResult<()> {
    let side = model_config(cfg, 1)?.image_size;
    let seed = cfg.seed();
    let fixed = parse_routing(cfg)?;
    let train_data = labeled(cfg.input.as_deref(), cfg.train_images.unwrap_or(600), side, seed)?;
    let test_data = labeled(cfg.test_input.as_deref(), cfg.test_images.unwrap_or(150), side, seed.wrapping_add(1))?;
    if train_data.is_empty() {
        return Err(fail(Code::Io, "training set is empty"));
    }
    let classes = train_data.classes().max(test_data.classes());
    let config = model_config(cfg, classes)?;
    let mut train = FineTrainConfig { seed, ..FineTrainConfig::desk() };
    train.epochs = cfg.epochs.unwrap_or(train.epochs);
    train.batch = cfg.batch.unwrap_or(train.batch);
    train.lr = cfg.lr.unwrap_or(train.lr);
    train.weight_decay = cfg.weight_decay.unwrap_or(train.weight_decay);
    train.flip = cfg.flip.unwrap_or(train.flip);
    train.validate()?;
    let out = prepare("train-toy", cfg)?;

    let routing = match fixed {
        Some(r) => r,
        None if cfg.estimator.is_some() => RoutingSource::Adaptive(coarse_stage(cfg, side)?),
        None => {
            let probe = coarse_stage(cfg, side)?;
            let est = CoarseTrainConfig { seed, ..CoarseTrainConfig::desk() };
            let (stage, trace) =
                calibrate_coarse_stage(train_data.images(), probe.descriptors, probe.resize, probe.params, &est)?;
            stage.params.save(out.join("estimator.json")).tag(Code::Io, "writing estimator.json")?;
            write(&out.join("estimator_trace.csv"), trace_csv(&trace))?;
            RoutingSource::Adaptive(stage)
        }
    };
    let routes = routing.assign(train_data.images())?;
    let mut counts = [0usize; 3];
    routes.iter().for_each(|g| counts[g.index()] += 1);
    info!("routing {} assigns {:?} training images to granularities 1/2/3", routing.name(), counts);

    let params = ModelParams::init(config, seed)?;
    let (params, metrics) = train_fine_toy(params, &train_data, &routing, &train)?;
    let test_accuracy = evaluate(&params, &test_data, &routing)?;
    params.save(out.join("model"))?;
    let rows: Vec<Vec<String>> =
        metrics.iter().map(|m| vec![m.epoch.to_string(), m.loss.to_string(), m.accuracy.to_string()]).collect();
    write_csv(&out.join("metrics.csv"), &strings(&["epoch", "loss", "accuracy"]), &rows)?;
    let summary = json!({
        "routing": routing.name(),
        "train_routes": counts,
        "final_train_loss": metrics.last().map(|m| m.loss),
        "final_train_accuracy": metrics.last().map(|m| m.accuracy),
        "test_accuracy": test_accuracy,
        "parameters": params.num_scalars(),
    });
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("routing {}: test accuracy {:.4}", routing.name(), test_accuracy);
    Ok(())
}

pub fn route(cfg: &RunConfig) -> CliResult<()> {
    let model = cfg.checkpoint.as_ref().map(ModelParams::load).transpose()?;
    let side = model.as_ref().map_or(224, |m| m.config.image_size);
    let stage = coarse_stage(cfg, side)?;
    let inputs = collect(cfg.input.as_deref(), &cfg.synthetic)?;
    let out = prepare("route", cfg)?;
    let decisions = decide_all(&stage, &inputs)?;
    let mut header = strings(&["path", "edge", "entropy", "freq", "phi", "granularity"]);
    let mut rows = Vec::new();
    if let Some(m) = &model {
        header.push("class".into());
        header.extend((0..m.config.classes).map(|c| format!("logit_{c}")));
    }
    for (input, d) in inputs.iter().zip(&decisions) {
        let f = d.features;
        let mut row = vec![
            input.id.clone(),
            f.edge.to_string(),
            f.entropy.to_string(),
            f.freq.to_string(),
            d.score.to_string(),
            d.granularity.to_string(),
        ];
        let mut line = format!("{} granularity={} phi={}", input.id, d.granularity, d.score);
        if let Some(m) = &model {
            let img = fit_to_model(&input.image, &m.config)?;
            let logits = forward_fine(m, &[&img], d.granularity)?;
            let class = classify(&logits)[0];
            row.push(class.to_string());
            row.extend(logits.data().iter().map(|v| v.to_string()));
            line.push_str(&format!(" class={class}"));
        }
        println!("{line}");
        rows.push(row);
    }
    write_csv(&out.join("route.csv"), &header, &rows)
}

fn as_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid { op: "forward", reason: other.to_string() },
    }
}

pub fn gradcheck(cfg: &RunConfig) -> CliResult<()> {
    let g = granularity(cfg.granularity.unwrap_or(2))?;
    let base = model_config(cfg, 3)?;
    let config = base.single(g).to_config();
    let threshold = cfg.threshold.unwrap_or(1e-3);
    let h = cfg.step.unwrap_or(1e-5);
    if !(h > 0.0 && threshold > 0.0) {
        return Err(fail(Code::Usage, "step and threshold must be > 0"));
    }
    let seed = cfg.seed();
    let images: Vec<RgbImage> = match (&cfg.input, cfg.synthetic.is_empty()) {
        (None, true) => (0..2)
            .map(|i| {
                let spec = SyntheticSpec::new(
                    grcvit::SyntheticKind::TexturedClass { class: 2 * i, seed: seed + i as u64 },
                    config.image_size,
                    config.image_size,
                )?;
                Ok(grcvit::image::generate(&spec).to_rgb())
            })
            .collect::<CliResult<_>>()?,
        _ => collect(cfg.input.as_deref(), &cfg.synthetic)?
            .iter()
            .map(|i| fit_to_model(&i.image, &config))
            .collect::<CliResult<_>>()?,
    };
    let out = prepare("gradcheck", cfg)?;
    let mut params = ModelParams::init(config.clone(), seed)?;
    params.perturb(seed.wrapping_add(1), cfg.perturb.unwrap_or(0.1));
    let refs: Vec<&RgbImage> = images.iter().collect();
    let labels: Vec<usize> = (0..refs.len()).map(|i| i % config.classes).collect();
    let report = grad_check_store(
        |graph, store| {
            let logits = forward_logits(graph, &config, store, &refs, g, None).map_err(as_tensor_error)?;
            graph.cross_entropy(logits, &labels)
        },
        &params.store,
        h,
    )?;
    let pass = report.max_rel_error < threshold;
    let summary = json!({
        "granularity": g.level(),
        "checked": report.checked,
        "max_rel_error": report.max_rel_error,
        "worst": report.worst,
        "threshold": threshold,
        "pass": pass,
    });
    write(&out.join("gradcheck.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("max_rel_error={:e} over {} coordinates (threshold {threshold:e})", report.max_rel_error, report.checked);
    if pass {
        Ok(())
    } else {
        Err(fail(Code::Numeric, format!("gradient check failed: {:e} >= {threshold:e}", report.max_rel_error)))
    }
}

pub fn attn_dump(cfg: &RunConfig) -> CliResult<()> {
    let model = load_or_init_model(cfg)?;
    let side = model.config.image_size;
    let stage = coarse_stage(cfg, side)?;
    let forced = cfg.granularity.map(granularity).transpose()?;
    let input = match (&cfg.input, cfg.synthetic.is_empty()) {
        (None, true) => Some(format!("synth:textured:1:{}@{side}x{side}", cfg.seed())),
        _ => cfg.input.clone(),
    };
    let inputs = collect(input.as_deref(), &cfg.synthetic)?;
    let out = prepare("attn-dump", cfg)?;
    let dir = out.join("attention");
    fs::create_dir_all(&dir).tag(Code::Io, format!("creating {}", dir.display()))?;
    let mut index = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let g = match forced {
            Some(g) => g,
            None => stage.decide(&to_grayscale(&input.image))?.granularity,
        };
        let img = fit_to_model(&input.image, &model.config)?;
        let mut trace = ForwardTrace::default();
        let mut graph = Graph::new();
        forward_logits(&mut graph, &model.config, &model.store, &[&img], g, Some(&mut trace))?;
        for rec in &trace.attention {
            let shape = rec.probs.shape().to_vec();
            let (heads, windows, mm) = (shape[0], shape[1], shape[2]);
            let mut header = strings(&["head", "window", "query"]);
            header.extend((0..mm).map(|j| format!("key_{j}")));
            let rows: Vec<Vec<String>> = rec
                .probs
                .data()
                .chunks(mm)
                .enumerate()
                .map(|(r, probs)| {
                    let (head, rest) = (r / (windows * mm), r % (windows * mm));
                    let mut row = vec![head.to_string(), (rest / mm).to_string(), (rest % mm).to_string()];
                    row.extend(probs.iter().map(|p| p.to_string()));
                    row
                })
                .collect();
            debug_assert_eq!(rows.len(), heads * windows * mm);
            let name = format!("image{k:03}_block{}.csv", rec.block);
            write_csv(&dir.join(&name), &header, &rows)?;
            index.push(vec![
                k.to_string(),
                input.id.clone(),
                g.to_string(),
                rec.block.to_string(),
                rec.window.to_string(),
                rec.shift.to_string(),
                format!("attention/{name}"),
            ]);
        }
        println!("{} granularity={} blocks={}", input.id, g, trace.attention.len());
    }
    let header = strings(&["image", "id", "granularity", "block", "window", "shift", "file"]);
    write_csv(&out.join("attention_index.csv"), &header, &index)
}
