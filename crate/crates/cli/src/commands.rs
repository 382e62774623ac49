use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use log::info;
use serde::Serialize;
use ubna_core::adapt::{
    adabn_recompute, sequential_adapt, ubna_adapt, AdaptationProtocol, AdaptationSchedule, AdaptationTrace,
    SequentialSegment,
};
use ubna_core::datagen::{DatasetSpec, DomainDataset, ImageSource, CHANNELS};
use ubna_core::eval::{evaluate, miou, ClassSubset, EvalMode, IouReport};
use ubna_core::modelio::{self, config_hash, Checkpoint, Provenance};
use ubna_core::pretrain::pretrain;
use ubna_core::{Error, Method, Model};

use crate::config::{Baseline, ProtocolKind, RunConfig};
use crate::UsageError;

fn dataset(spec: &DatasetSpec) -> anyhow::Result<DomainDataset> {
    DomainDataset::new(spec.clone()).map_err(|e| UsageError(e.to_string()).into())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.require_checkpoint()?;
    modelio::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Labeled held-out set and class subset for traces, if configured.
fn eval_target(cfg: &RunConfig, classes: usize) -> anyhow::Result<Option<(DomainDataset, ClassSubset)>> {
    match &cfg.eval_set {
        Some(spec) if spec.labeled => {
            if spec.classes() != classes {
                return Err(UsageError(format!("eval set has {} classes, model {classes}", spec.classes())).into());
            }
            Ok(Some((dataset(spec)?, cfg.evaluation.subset(classes)?)))
        }
        _ => Ok(None),
    }
}

fn miou_percent(model: &Model, data: &dyn ImageSource, subset: &ClassSubset) -> ubna_core::Result<f64> {
    Ok(miou(&evaluate(model, data, EvalMode::Running)?, subset)?.miou * 100.0)
}

#[derive(Serialize)]
struct PretrainProvenance<'a> {
    seed: u64,
    model: &'a crate::config::ModelSection,
    pretrain: &'a crate::config::PretrainSection,
    source: &'a DatasetSpec,
}

pub fn cmd_pretrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let spec = cfg.require_source()?;
    if !spec.labeled {
        return Err(UsageError("the [source] dataset must be labeled".into()).into());
    }
    let source = dataset(spec)?;
    let arch = cfg.model.architecture(CHANNELS, spec.classes());
    arch.validate().map_err(|e| UsageError(e.to_string()))?;
    let pcfg = cfg.pretrain.with_seed(cfg.seed);
    pcfg.validate(spec.classes()).map_err(|e| UsageError(e.to_string()))?;

    let mut model = Model::init(arch, cfg.seed)?;
    let log = pretrain(&mut model, &source, &pcfg)?;
    let hash_input = toml::to_string(&PretrainProvenance {
        seed: cfg.seed,
        model: &cfg.model,
        pretrain: &cfg.pretrain,
        source: spec,
    })?;
    let ckpt = Checkpoint {
        model,
        provenance: Provenance { pretrain_config_hash: Some(config_hash(&hash_input)), adaptations: Vec::new() },
    };
    modelio::save(&ckpt, &cfg.out.join("model.ckpt"))?;
    write(&cfg.out, "train_log.csv", log.to_csv())?;
    if let Some(last) = log.records.last() {
        println!("pretrained {} steps: loss {:.4}, source accuracy {:.4}", last.step, last.loss, last.accuracy);
    }
    Ok(())
}

/// Whitespace-free provenance record of one adaptation.
fn record(method: Method, protocol: ProtocolKind, s: Option<&AdaptationSchedule>, cfg: &RunConfig) -> String {
    let mut r = format!(
        "method={method};protocol={};batch_size={};seed={}",
        protocol_name(protocol),
        cfg.adapt.batch_size,
        cfg.seed
    );
    if let Some(s) = s {
        let _ = write!(
            r,
            ";eta0={};alpha_batch={};alpha_layer={};steps={};first_step={}",
            s.eta0, s.alpha_batch, s.alpha_layer, s.num_steps, s.first_step_index
        );
    }
    r
}

fn protocol_name(p: ProtocolKind) -> &'static str {
    match p {
        ProtocolKind::Offline => "offline",
        ProtocolKind::Online => "online",
        ProtocolKind::Fewshot => "fewshot",
        ProtocolKind::Sequential => "sequential",
    }
}

fn protocol(cfg: &RunConfig, kind: ProtocolKind, seed: u64) -> anyhow::Result<AdaptationProtocol> {
    let b = cfg.adapt.batch_size;
    Ok(match kind {
        ProtocolKind::Offline | ProtocolKind::Sequential => AdaptationProtocol::Offline { seed, batch_size: b },
        ProtocolKind::Online => AdaptationProtocol::Online { batch_size: b, frame_period: cfg.adapt.frame_period },
        ProtocolKind::Fewshot => {
            let ids = if cfg.adapt.fewshot_ids.is_empty() { (0..b).collect() } else { cfg.adapt.fewshot_ids.clone() };
            AdaptationProtocol::FewShot { batch_ids: ids }
        }
    })
}

fn schedule_for(cfg: &RunConfig) -> anyhow::Result<AdaptationSchedule> {
    cfg.adapt
        .schedule()?
        .ok_or_else(|| UsageError(format!("method {} has no momentum schedule", cfg.adapt.method)).into())
}

pub fn cmd_adapt(cfg: &RunConfig) -> anyhow::Result<()> {
    let Checkpoint { mut model, mut provenance } = load_checkpoint(cfg)?;
    let classes = model.classes();
    let method = cfg.adapt.method;
    let kind = cfg.adapt.protocol;
    let eval = eval_target(cfg, classes)?;
    let mut hook = |m: &Model, _step: usize| match &eval {
        Some((data, subset)) => miou_percent(m, data, subset),
        None => Ok(f64::NAN),
    };

    let mut traces: Vec<AdaptationTrace> = Vec::new();
    match method {
        Method::None => {}
        Method::AdaBn => {
            let target = dataset(cfg.require_target()?)?;
            adabn_recompute(&mut model, &target, cfg.adapt.batch_size)?;
            provenance.adaptations.push(record(method, ProtocolKind::Offline, None, cfg));
        }
        Method::Ubna0 | Method::Ubna | Method::UbnaPlus => {
            let schedule = schedule_for(cfg)?;
            let hook_ref: Option<ubna_core::adapt::EvalHook<'_>> = if eval.is_some() { Some(&mut hook) } else { None };
            if kind == ProtocolKind::Sequential {
                if cfg.segments.is_empty() {
                    return Err(UsageError("sequential protocol needs [[segments]]".into()).into());
                }
                let sets = cfg.segments.iter().map(dataset).collect::<anyhow::Result<Vec<_>>>()?;
                let segments = sets
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        Ok(SequentialSegment {
                            data: d as &dyn ImageSource,
                            schedule: schedule.clone(),
                            protocol: protocol(cfg, kind, cfg.seed.wrapping_add(i as u64))?,
                        })
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                traces = sequential_adapt(&mut model, &segments, hook_ref)?;
            } else {
                let target = dataset(cfg.require_target()?)?;
                traces.push(ubna_adapt(&mut model, &target, &schedule, &protocol(cfg, kind, cfg.seed)?, hook_ref)?);
            }
            provenance.adaptations.push(record(method, kind, Some(&schedule), cfg));
        }
    }

    modelio::save(&Checkpoint { model: model.clone(), provenance }, &cfg.out.join("adapted.ckpt"))?;
    if traces.len() > 1 {
        for (i, t) in traces.iter().enumerate() {
            write(&cfg.out, &format!("trace_segment_{}.csv", i + 1), finite_csv(t))?;
        }
    } else {
        let t = traces.pop().unwrap_or(AdaptationTrace { bn_layers: model.bn_count(), records: Vec::new() });
        write(&cfg.out, "trace.csv", finite_csv(&t))?;
    }
    if let Some((data, subset)) = &eval {
        println!("{method}: target mIoU {:.2}", miou_percent(&model, data, subset)?);
    }
    Ok(())
}

/// Trace CSV with metric-less steps left empty.
fn finite_csv(t: &AdaptationTrace) -> String {
    let mut t = t.clone();
    for r in &mut t.records {
        r.metric = r.metric.filter(|m| m.is_finite());
    }
    t.to_csv()
}

fn fmt_alpha(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_sweep(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.sweep.alpha_batch.is_empty() && cfg.sweep.alpha_layer.is_empty() {
        return Err(UsageError("empty sweep grid: give --alpha-batch and/or --alpha-layer lists".into()).into());
    }
    if cfg.adapt.protocol == ProtocolKind::Sequential {
        return Err(UsageError("sweeps run a single target domain".into()).into());
    }
    let ckpt = load_checkpoint(cfg)?;
    let target = dataset(cfg.require_target()?)?;
    let eval = eval_target(cfg, ckpt.model.classes())?;
    let default_ab = cfg.adapt.alpha_batch.unwrap_or(ubna_core::adapt::DEFAULT_ALPHA_BATCH);
    let default_al = cfg.adapt.alpha_layer.unwrap_or(0.0);
    let abs = if cfg.sweep.alpha_batch.is_empty() { vec![default_ab] } else { cfg.sweep.alpha_batch.clone() };
    let als = if cfg.sweep.alpha_layer.is_empty() { vec![default_al] } else { cfg.sweep.alpha_layer.clone() };

    let mut summary = String::from("alpha_batch,alpha_layer,eta_sum,final_eta,final_metric\n");
    for &ab in &abs {
        for &al in &als {
            let schedule = cfg.adapt.schedule_with(ab, al)?;
            let mut model = ckpt.model.clone();
            let mut hook = |m: &Model, _: usize| match &eval {
                Some((data, subset)) => miou_percent(m, data, subset),
                None => Ok(f64::NAN),
            };
            let hook_ref: Option<ubna_core::adapt::EvalHook<'_>> = if eval.is_some() { Some(&mut hook) } else { None };
            let trace =
                ubna_adapt(&mut model, &target, &schedule, &protocol(cfg, cfg.adapt.protocol, cfg.seed)?, hook_ref)?;
            write(&cfg.out, &format!("trace_ab{}_al{}.csv", fmt_alpha(ab), fmt_alpha(al)), finite_csv(&trace))?;
            let final_eta = trace.records.last().map(|r| r.eta.to_string()).unwrap_or_default();
            let final_metric =
                trace.metrics().last().filter(|m| m.is_finite()).map(ToString::to_string).unwrap_or_default();
            let _ = writeln!(summary, "{ab},{al},{},{final_eta},{final_metric}", schedule.momentum_sum());
        }
    }
    write(&cfg.out, "summary.csv", summary)
}

fn eval_report(model: &Model, cfg: &RunConfig) -> anyhow::Result<IouReport> {
    let spec = cfg.require_eval()?;
    if !spec.labeled {
        return Err(Error::InvalidInput("evaluation set has no labels".into()).into());
    }
    if spec.classes() != model.classes() {
        return Err(UsageError(format!("eval set has {} classes, model {}", spec.classes(), model.classes())).into());
    }
    let data = dataset(spec)?;
    let subset = cfg.evaluation.subset(model.classes())?;
    let mode = match cfg.evaluation.baseline {
        Some(Baseline::Zhang) => EvalMode::BatchStats { batch_size: cfg.adapt.batch_size },
        None => EvalMode::Running,
    };
    Ok(miou(&evaluate(model, &data, mode)?, &subset)?)
}

pub fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(cfg)?;
    let report = eval_report(&ckpt.model, cfg)?;
    write(&cfg.out, "report.csv", report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

/// Every method from the same checkpoint on the same target and held-out
/// sets, plus the batch-statistics baseline.
pub fn cmd_report(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(cfg)?;
    let target = dataset(cfg.require_target()?)?;
    let classes = ckpt.model.classes();
    let (eval, subset) =
        eval_target(cfg, classes)?.ok_or_else(|| UsageError("report needs a labeled [eval] dataset".into()))?;
    if cfg.adapt.protocol == ProtocolKind::Sequential {
        return Err(UsageError("report runs a single target domain".into()).into());
    }
    let proto = protocol(cfg, cfg.adapt.protocol, cfg.seed)?;

    let mut comparison = String::from("method,miou,accuracy\n");
    let mut row = |name: &str, model: &Model, mode: EvalMode| -> anyhow::Result<()> {
        let r = miou(&evaluate(model, &eval, mode)?, &subset)?;
        let _ = writeln!(comparison, "{name},{},{}", r.miou * 100.0, r.accuracy);
        println!("{name:>8}: mIoU {:.2}", r.miou * 100.0);
        Ok(())
    };
    row("none", &ckpt.model, EvalMode::Running)?;
    row("zhang", &ckpt.model, EvalMode::BatchStats { batch_size: cfg.adapt.batch_size })?;
    let mut adabn = ckpt.model.clone();
    adabn_recompute(&mut adabn, &target, cfg.adapt.batch_size)?;
    row("adabn", &adabn, EvalMode::Running)?;

    let methods = [Method::Ubna0, Method::Ubna, Method::UbnaPlus];
    let mut curves = Vec::new();
    for method in methods {
        let (ab, al) = method.default_alphas().expect("schedule method");
        let al = if method == Method::UbnaPlus { cfg.adapt.alpha_layer.filter(|&a| a > 0.0).unwrap_or(al) } else { al };
        let schedule = cfg.adapt.schedule_with(ab, al)?;
        let mut model = ckpt.model.clone();
        let mut hook = |m: &Model, _: usize| miou_percent(m, &eval, &subset);
        let trace = ubna_adapt(&mut model, &target, &schedule, &proto, Some(&mut hook))?;
        row(method.name(), &model, EvalMode::Running)?;
        curves.push(trace);
    }
    write(&cfg.out, "comparison.csv", comparison)?;

    let mut csv = String::from("step");
    for m in methods {
        let _ = write!(csv, ",{m}");
    }
    csv.push('\n');
    for (i, r) in curves[0].records.iter().enumerate() {
        let _ = write!(csv, "{}", r.step);
        for t in &curves {
            let _ = write!(csv, ",{}", t.records[i].metric.unwrap_or(f64::NAN));
        }
        csv.push('\n');
    }
    write(&cfg.out, "curves.csv", csv)
}
