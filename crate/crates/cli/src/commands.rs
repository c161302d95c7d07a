// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Map, Value};

use batchtopk_sae::activations::{ActivationVariant, ThresholdEstimate};
use batchtopk_sae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use batchtopk_sae::data::{
    read_activations, write_codes, ActivationDataset, ActivationWriter, PlantedDictConfig,
    PlantedDictionary,
};
use batchtopk_sae::metrics::{MetricsReport, NmseNormalization};
use batchtopk_sae::sae::ForwardMode;
use batchtopk_sae::trainer::{
    self, estimate_threshold, evaluate, EvalOptions, TrainConfig, TrainerState, VariantKind,
};
use batchtopk_sae::Matrix;

use crate::manifest::{sidecar, Manifest};
use crate::{
    Command, CompareArgs, DataArgs, EvalArgs, EvalFlags, GenerateArgs, InspectArgs, ModeArg,
    NormArg, ThresholdArgs, TrainArgs,
};

const GENERATE_CHUNK: u64 = 8192;

pub fn run(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Threshold(a) => threshold(a, argv),
        Command::Compare(a) => compare(a, argv),
        Command::Inspect(a) => inspect(a),
    }
}

fn read_json(path: &Path) -> Result<Map<String, Value>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => bail!("{}: expected a JSON object", path.display()),
    }
}

/// Overlays `top` onto `base`, key by key.
fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        base.insert(k, v);
    }
}

fn flags_map<T: Serialize>(flags: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(flags)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("flag structs serialize to objects"),
    }
}

fn planted_config(file: Option<&Path>, flags: &crate::PlantedFlags) -> Result<PlantedDictConfig> {
    let mut map = flags_map(&PlantedDictConfig::default())?;
    if let Some(p) = file {
        overlay(&mut map, read_json(p)?);
    }
    overlay(&mut map, flags_map(flags)?);
    let cfg: PlantedDictConfig = serde_json::from_value(Value::Object(map))?;
    cfg.validate()?;
    Ok(cfg)
}

fn generate(a: GenerateArgs, argv: &[String]) -> Result<()> {
    let cfg = planted_config(a.config.as_deref(), &a.planted)?;
    let planted = PlantedDictionary::new(cfg.clone())?;
    let dict_path = sidecar(&a.out, "dict.saeact");
    let codes_path = sidecar(&a.out, "codes");

    let mut writer = ActivationWriter::create(&a.out, cfg.d)?;
    let mut codes = Vec::with_capacity(a.n.min(1 << 24) as usize);
    let mut start = 0;
    while start < a.n {
        let n = GENERATE_CHUNK.min(a.n - start);
        let mut rows = Vec::with_capacity(n as usize * cfg.d);
        for i in start..start + n {
            let (clean, noise, code) = planted.sample(i);
            rows.extend(clean.iter().zip(&noise).map(|(c, e)| c + e));
            codes.push(code);
        }
        writer.append(&Matrix::new(n as usize, cfg.d, rows)?)?;
        start += n;
    }
    let written = writer.finish()?;
    batchtopk_sae::data::write_activations(&dict_path, planted.dictionary())?;
    write_codes(&codes_path, cfg.m_true, &codes)?;

    let mut manifest = Manifest::new(
        "generate",
        argv,
        Some(cfg.seed),
        json!({
            "planted": cfg,
            "n": a.n,
        }),
    );
    manifest.outputs = vec![a.out.clone(), dict_path, codes_path];
    manifest.write(&sidecar(&a.out, "manifest.json"))?;
    info!(
        "wrote {written} rows of width {} to {}",
        cfg.d,
        a.out.display()
    );
    Ok(())
}

fn dataset(
    a: &DataArgs,
    batch_size: usize,
    expected_d: Option<usize>,
) -> Result<ActivationDataset> {
    let ds = match (&a.data, &a.planted) {
        (Some(path), None) => {
            ensure!(
                a.n_samples.is_none(),
                "--n-samples applies to planted data only"
            );
            ActivationDataset::file(path, batch_size, expected_d)?.with_shuffle(a.shuffle_seed)
        }
        (None, Some(cfg_path)) => {
            let cfg: PlantedDictConfig =
                serde_json::from_value(Value::Object(read_json(cfg_path)?))?;
            if let Some(d) = expected_d {
                ensure!(cfg.d == d, "planted data has d={}, expected d={d}", cfg.d);
            }
            ActivationDataset::planted_range(cfg, batch_size, a.planted_start, a.n_samples)?
        }
        (None, None) => bail!("a data source is required: --data FILE or --planted CONFIG"),
        (Some(_), Some(_)) => bail!("--data and --planted are mutually exclusive"),
    };
    Ok(ds)
}

fn train_config(a: &TrainArgs, data_d: usize) -> Result<TrainConfig> {
    let mut user = Map::new();
    if let Some(p) = &a.config {
        overlay(&mut user, read_json(p)?);
    }
    overlay(&mut user, flags_map(&a.train)?);
    let variant: VariantKind = match user.get("variant") {
        Some(Value::String(s)) => s.parse()?,
        Some(other) => bail!("variant must be a string, got {other}"),
        None => bail!("--variant is required (relu, topk, batchtopk, jumprelu)"),
    };
    user.insert("variant".into(), serde_json::to_value(variant)?);
    let d = match user.get("d") {
        Some(v) => v.as_u64().context("d must be an integer")? as usize,
        None => data_d,
    };
    let m = user
        .get("m")
        .and_then(Value::as_u64)
        .context("--m (dictionary size) is required")? as usize;
    let mut map = flags_map(&TrainConfig::new(variant, d, m))?;
    overlay(&mut map, user);
    let cfg: TrainConfig =
        serde_json::from_value(Value::Object(map)).context("invalid training configuration")?;
    cfg.validate()?;
    ensure!(
        cfg.d == data_d,
        "config has d={}, but the data has width {data_d}",
        cfg.d
    );
    Ok(cfg)
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    // Width probe: batch size is fixed once the config is known.
    let data_d = dataset(&a.data, 1, None)?.d();
    let cfg = train_config(&a, data_d)?;
    let data = dataset(&a.data, cfg.batch_size, Some(cfg.d))?;
    let out = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let state = TrainerState::from_checkpoint(ck)?;
            info!(
                "resuming from {} at step {}",
                path.display(),
                state.progress.step
            );
            trainer::resume(&cfg, data, state)?
        }
        None => trainer::train(&cfg, data)?,
    };
    for w in &out.log.warnings {
        warn!("{w}");
    }
    let ck = out.state.to_checkpoint(&cfg);
    save_checkpoint(&a.out, &ck)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| sidecar(&a.out, "log.jsonl"));
    out.log.save_jsonl(&log_path)?;

    let last = out.log.steps.last();
    let summary = json!({
        "steps": out.state.progress.step,
        "tokens_seen": out.state.progress.tokens_seen,
        "loss": last.map(|s| &s.loss),
        "mean_l0": last.map(|s| s.mean_l0),
        "mean_active_l0": last.map(|s| s.mean_active_l0),
        "dead_count": out.state.progress.tracker.dead_count(),
        "theta_global": ck.theta_global(),
        "warnings": out.log.warnings,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let mut manifest = Manifest::new(
        "train",
        argv,
        Some(cfg.seed),
        json!({
            "train": cfg,
            "data": a.data,
            "resume": a.resume,
        }),
    );
    manifest.outputs = vec![a.out.clone(), log_path];
    manifest.write(&sidecar(&a.out, "manifest.json"))?;
    Ok(())
}

fn options(flags: &EvalFlags, ck: &Checkpoint) -> Result<EvalOptions> {
    let true_dict = match &flags.true_dict {
        Some(p) => {
            let dict = read_activations(p)?;
            ensure!(
                dict.cols() == ck.params.d(),
                "true dictionary has width {}, model has d={}",
                dict.cols(),
                ck.params.d()
            );
            Some(dict)
        }
        None => None,
    };
    Ok(EvalOptions {
        n_batches: flags.n_batches,
        mode: match flags.mode {
            ModeArg::Train => ForwardMode::Train,
            ModeArg::Inference => ForwardMode::Inference,
        },
        normalization: match flags.normalization {
            NormArg::MeanCentered => NmseNormalization::MeanCentered,
            NormArg::Raw => NmseNormalization::Raw,
        },
        input_scale: ck.input_scale,
        true_dict,
    })
}

fn evaluate_checkpoint(
    path: &Path,
    data_args: &DataArgs,
    flags: &EvalFlags,
) -> Result<(Checkpoint, MetricsReport)> {
    let ck = load_checkpoint(path)?;
    let data = dataset(data_args, flags.batch_size, Some(ck.params.d()))
        .with_context(|| format!("data for {}", path.display()))?;
    let opts = options(flags, &ck)?;
    let theta = flags.theta_global.or(ck.theta_global());
    let report = evaluate(&ck.params, theta, &data, &opts)
        .with_context(|| format!("evaluating {}", path.display()))?;
    Ok((ck, report))
}

fn metrics_csv(r: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "n_samples,nmse,nmse_normalization,l0_mean,l0_variance,l0_min,l0_max,dead_fraction,theta_global,mmcs,mode\n\
         {},{},{},{},{},{},{},{},{},{},{}\n",
        r.n_samples,
        r.nmse,
        norm_name(r.nmse_normalization),
        r.l0_mean,
        r.l0_variance,
        r.l0_min,
        r.l0_max,
        r.dead_fraction,
        opt(r.theta_global),
        opt(r.mmcs),
        r.mode
    )
}

fn norm_name(n: NmseNormalization) -> &'static str {
    match n {
        NmseNormalization::MeanCentered => "mean_centered",
        NmseNormalization::Raw => "raw",
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let (_, report) = evaluate_checkpoint(&a.checkpoint, &a.data, &a.eval)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(prefix) = &a.out {
        let outputs = vec![
            with_suffix(prefix, ".json"),
            with_suffix(prefix, ".csv"),
            with_suffix(prefix, ".l0_hist.csv"),
        ];
        std::fs::write(&outputs[0], text + "\n")?;
        std::fs::write(&outputs[1], metrics_csv(&report))?;
        std::fs::write(&outputs[2], report.hist_csv())?;
        let mut manifest = Manifest::new(
            "eval",
            argv,
            None,
            json!({
                "checkpoint": a.checkpoint,
                "data": a.data,
                "eval": a.eval,
            }),
        );
        manifest.outputs = outputs;
        manifest.write(&with_suffix(prefix, ".manifest.json"))?;
    }
    Ok(())
}

fn threshold(a: ThresholdArgs, argv: &[String]) -> Result<()> {
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let data = dataset(&a.data, a.batch_size, Some(ck.params.d()))?;
    let est: ThresholdEstimate =
        estimate_threshold(&ck.params, &data, a.n_batches, ck.input_scale)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "theta_global": est.theta_global(),
            "batches": est.batches_seen(),
        }))?
    );
    if let Some(out) = &a.out {
        ck.threshold = Some(est);
        save_checkpoint(out, &ck)?;
        let mut manifest = Manifest::new(
            "threshold",
            argv,
            None,
            json!({
                "checkpoint": a.checkpoint,
                "n_batches": a.n_batches,
                "batch_size": a.batch_size,
                "data": a.data,
            }),
        );
        manifest.outputs = vec![out.clone()];
        manifest.write(&sidecar(out, "manifest.json"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    checkpoint: PathBuf,
    variant: &'static str,
    d: usize,
    m: usize,
    k: Option<usize>,
    lambda: Option<f64>,
    #[serde(flatten)]
    report: MetricsReport,
}

fn compare(a: CompareArgs, argv: &[String]) -> Result<()> {
    ensure!(
        a.checkpoints.len() >= 2,
        "compare needs at least two checkpoints"
    );
    let mut rows = Vec::with_capacity(a.checkpoints.len());
    for path in &a.checkpoints {
        let (ck, report) = evaluate_checkpoint(path, &a.data, &a.eval)?;
        rows.push(CompareRow {
            checkpoint: path.clone(),
            variant: ck.params.variant.name(),
            d: ck.params.d(),
            m: ck.params.m(),
            k: ck.params.variant.k(),
            lambda: ck.lambda,
            report,
        });
    }
    let d0 = rows[0].d;
    if let Some(r) = rows.iter().find(|r| r.d != d0) {
        bail!(
            "checkpoint {} has d={}, expected {d0}",
            r.checkpoint.display(),
            r.d
        );
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "checkpoint,variant,m,k,lambda,mode,nmse,l0_mean,l0_variance,dead_fraction,mmcs,theta_global\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.checkpoint.display(),
            r.variant,
            r.m,
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            opt(r.lambda),
            r.report.mode,
            r.report.nmse,
            r.report.l0_mean,
            r.report.l0_variance,
            r.report.dead_fraction,
            opt(r.report.mmcs),
            opt(r.report.theta_global),
        );
    }
    print!("{csv}");
    if let Some(prefix) = &a.out {
        let outputs = vec![with_suffix(prefix, ".csv"), with_suffix(prefix, ".json")];
        std::fs::write(&outputs[0], &csv)?;
        std::fs::write(&outputs[1], serde_json::to_string_pretty(&rows)? + "\n")?;
        let mut manifest = Manifest::new(
            "compare",
            argv,
            None,
            json!({
                "checkpoints": a.checkpoints,
                "data": a.data,
                "eval": a.eval,
            }),
        );
        manifest.outputs = outputs;
        manifest.write(&with_suffix(prefix, ".manifest.json"))?;
    }
    Ok(())
}

fn stats(values: &[f64]) -> Value {
    if values.is_empty() {
        return Value::Null;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({ "min": min, "mean": mean, "max": max })
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let p = &ck.params;
    let bandwidth = match p.variant {
        ActivationVariant::JumpRelu { bandwidth } => Some(bandwidth),
        _ => None,
    };
    let summary = json!({
        "variant": p.variant.name(),
        "d": p.d(),
        "m": p.m(),
        "k": p.variant.k(),
        "lambda": ck.lambda,
        "bandwidth": bandwidth,
        "center_input": p.center_input,
        "input_scale": ck.input_scale,
        "theta_global": ck.theta_global(),
        "threshold_batches": ck.threshold.as_ref().map(|t| t.batches_seen()),
        "decoder_row_norms": stats(p.w_dec.row_norms().data()),
        "theta": p.theta.as_ref().map(|t| stats(t.data())),
        "has_optimizer_state": !ck.adam.is_empty(),
        "step": ck.progress.as_ref().map(|s| s.step),
        "tokens_seen": ck.progress.as_ref().map(|s| s.tokens_seen),
        "dead_count": ck.progress.as_ref().map(|s| s.tracker.dead_count()),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
