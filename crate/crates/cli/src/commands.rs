use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use unictr_core::autodiff::Tape;
use unictr_core::backbone::BackboneConfig;
use unictr_core::baseline::train_shared_bottom;
use unictr_core::batch::{Batch, EncodedSample};
use unictr_core::checkpoint::{self, Manifest};
use unictr_core::config::RunConfig;
use unictr_core::data::{generate, ingest_jsonl, Dataset, Split, SynthConfig};
use unictr_core::dsn::DsnConfig;
use unictr_core::general::GeneralConfig;
use unictr_core::gradcheck::{finite_diff_check, GradCheckConfig};
use unictr_core::metrics::MetricsReport;
use unictr_core::model::{MaskMode, ModelConfig, UniCtr};
use unictr_core::optim::Optimizer;
use unictr_core::reps::{dump_representations, Selector};
use unictr_core::trainer::{
    build_vocab, encode_dataset, evaluate, extend_domain, fit, masked_loss, predict_samples, train_step, Scoring,
    TrainConfig, TrainReport,
};
use unictr_core::{Error, Result, Scalar};

use crate::{Cli, Command, EvalArgs, Scale};

const CHECKPOINT_DIR: &str = "checkpoint";
const GRAD_TOLERANCE: f64 = 1e-3;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.global.resolve()?;
    let seed_flag = cli.global.seed;
    let wide = cfg.precision == 64;
    match cli.command {
        Command::Synth { out, probs } => synth(&cfg, &out, probs.as_deref()),
        Command::Train {
            data,
            out,
            epochs,
            baseline,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.validate()?;
            let ds = load_data(&data_path(data, &cfg)?, cfg.seed)?;
            cfg.check_domains(&ds.domains())?;
            mkdir(&out)?;
            write_file(&out.join("config.toml"), &toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?)?;
            if baseline.is_some() {
                train_baseline(&cfg, &ds, &out)
            } else if wide {
                train::<f64>(&cfg, &ds, &out)
            } else {
                train::<f32>(&cfg, &ds, &out)
            }
        }
        Command::Eval(args) => {
            if wide {
                eval::<f64>(&cfg, seed_flag, &args)
            } else {
                eval::<f32>(&cfg, seed_flag, &args)
            }
        }
        Command::ZeroShot {
            domain,
            checkpoint,
            data,
            split,
            report,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                split,
                domain: None,
                zero_shot: Some(domain),
                report,
            };
            if wide {
                eval::<f64>(&cfg, seed_flag, &args)
            } else {
                eval::<f32>(&cfg, seed_flag, &args)
            }
        }
        Command::AddDomain {
            checkpoint,
            data,
            out,
            domain,
            old_data,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let a = AddDomain {
                checkpoint,
                data,
                out,
                domain,
                old_data,
            };
            if wide {
                add_domain::<f64>(&cfg, seed_flag, &a)
            } else {
                add_domain::<f32>(&cfg, seed_flag, &a)
            }
        }
        Command::GradCheck {
            scale,
            report,
            corrupt_mask,
        } => grad_check(&cfg, scale, report.as_deref(), corrupt_mask),
        Command::DumpReps {
            checkpoint,
            data,
            select,
            out,
            split,
        } => {
            let sel: Selector = select.parse()?;
            if wide {
                dump_reps::<f64>(&cfg, seed_flag, &checkpoint, data, &sel, &out, &split)
            } else {
                dump_reps::<f32>(&cfg, seed_flag, &checkpoint, data, &sel, &out, &split)
            }
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(value)?)
}

fn data_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.path.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.path".into()))
}

fn load_data(path: &Path, seed: u64) -> Result<Dataset> {
    let (ds, malformed) = ingest_jsonl(path, seed)?;
    if !malformed.is_empty() {
        eprintln!("skipped {} malformed line(s) in {}", malformed.len(), path.display());
        for m in malformed.iter().take(10) {
            eprintln!("  line {}: {}", m.line, m.reason);
        }
    }
    Ok(ds)
}

/// `None` selects every record.
fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        _ => Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`; expected train, valid, test or all"))),
    }
}

fn split_indices(ds: &Dataset, split: Option<Split>, domain: Option<&str>) -> Vec<usize> {
    match split {
        Some(s) => ds.indices(s, domain),
        None => (0..ds.len())
            .filter(|&i| domain.is_none_or(|d| ds.records[i].domain_name == d))
            .collect(),
    }
}

fn print_metrics(title: &str, report: &MetricsReport) {
    println!("{title}");
    println!("  {:<24} {:>8} {:>8} {:>8}", "domain", "samples", "clicks", "auc");
    for d in &report.domains {
        let auc = d.auc.map_or_else(|| "undef".to_string(), |a| format!("{a:.4}"));
        println!("  {:<24} {:>8} {:>8} {:>8}", d.domain, d.count, d.positives, auc);
    }
}

fn synth(cfg: &RunConfig, out: &Path, probs: Option<&Path>) -> Result<()> {
    let data = generate(&cfg.synth)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    data.dataset.write_jsonl(out)?;
    if let Some(p) = probs {
        let text: String = data.true_probs.iter().map(|v| format!("{v}\n")).collect();
        write_file(p, &text)?;
    }
    let counts: Vec<String> = data
        .dataset
        .domains()
        .iter()
        .map(|d| format!("{d}={}", data.dataset.count(d)))
        .collect();
    println!("wrote {} records to {}", data.dataset.len(), out.display());
    println!("counts: {}", counts.join(", "));
    Ok(())
}

fn write_train_outputs(out: &Path, report: &TrainReport, test: &MetricsReport) -> Result<()> {
    report.write_jsonl(&out.join("report.jsonl"))?;
    write_json(
        &out.join("metrics.json"),
        &json!({"best_epoch": report.best_epoch, "best_valid_auc": report.best_valid_auc, "test": test}),
    )
}

fn train_baseline(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let (model, report) = train_shared_bottom(ds, &cfg.baseline, &cfg.train_config())?;
    let test = model.evaluate(ds, Split::Test)?;
    println!("shared-bottom baseline, best epoch {}", report.best_epoch);
    print_metrics("test", &test);
    write_train_outputs(out, &report, &test)
}

fn train<T: Scalar>(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let mc = cfg.model_config();
    let vocab = build_vocab(ds, mc.prompt_mode, mc.max_history, cfg.data.max_vocab)?;
    let dsns = ds.domains().iter().map(|d| cfg.dsn_config(d)).collect();
    let mut model: UniCtr<T> = UniCtr::new(mc, vocab, dsns, cfg.seed)?;
    println!(
        "{} domains, {} training samples, {} parameters, vocabulary {}",
        model.registry().len(),
        ds.indices(Split::Train, None).len(),
        model.num_params(),
        model.vocab.len()
    );
    let tc = cfg.train_config();
    let report = fit(&mut model, ds, &tc)?;
    for r in report.records.iter().filter(|r| r.split == "valid" && r.metric == "auc") {
        println!("epoch {:>3} valid auc {:<24} {:.4}", r.epoch, r.domain, r.value);
    }
    println!("kept epoch {}", report.best_epoch);
    checkpoint::save(&model, &out.join(CHECKPOINT_DIR))?;
    report.write_audit_jsonl(&out.join("audit.jsonl"))?;
    let test = evaluate(&model, ds, Split::Test, Scoring::Routed, tc.eval_batch_size)?;
    print_metrics("test", &test);
    write_train_outputs(out, &report, &test)
}

fn scores<T: Scalar>(
    model: &UniCtr<T>,
    ds: &Dataset,
    idx: &[usize],
    scoring: Scoring,
    batch_size: usize,
) -> Result<MetricsReport> {
    let enc: Vec<EncodedSample> = idx
        .iter()
        .map(|&i| model.encode(&ds.records[i], i as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<&EncodedSample> = enc.iter().collect();
    let p = predict_samples(model, &refs, batch_size, MaskMode::Dispatch)?;
    let src = match scoring {
        Scoring::Routed => &p.routed,
        Scoring::General => &p.general,
    };
    let s: Vec<f64> = src.iter().map(|v| v.as_f64()).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| ds.records[i].label).collect();
    let domains: Vec<&str> = idx.iter().map(|&i| ds.records[i].domain_name.as_str()).collect();
    Ok(MetricsReport::from_scores(&s, &labels, &domains))
}

fn eval<T: Scalar>(cfg: &RunConfig, seed_flag: Option<u64>, args: &EvalArgs) -> Result<()> {
    let model: UniCtr<T> = checkpoint::load(&args.checkpoint)?;
    let ds = load_data(&data_path(args.data.clone(), cfg)?, seed_flag.unwrap_or(model.seed()))?;
    let split = parse_split(&args.split)?;
    let (domain, scoring) = match (&args.domain, &args.zero_shot) {
        (_, Some(d)) => (Some(d.as_str()), Scoring::General),
        (Some(d), None) => (Some(d.as_str()), Scoring::Routed),
        (None, None) => (None, Scoring::Routed),
    };
    let idx = split_indices(&ds, split, domain);
    if idx.is_empty() {
        return Err(Error::Validation(format!(
            "no {} samples{}",
            args.split,
            domain.map_or(String::new(), |d| format!(" for domain `{d}`"))
        )));
    }
    let report = scores(&model, &ds, &idx, scoring, cfg.train.eval_batch_size)?;
    let label = match scoring {
        Scoring::General => "general head",
        Scoring::Routed => "routed",
    };
    print_metrics(&format!("{} split, {label}", args.split), &report);
    if let Some(d) = domain {
        if report.auc_of(d).is_none() {
            return Err(Error::UndefinedMetric(format!(
                "AUC of `{d}` on the {} split is undefined: only one label class",
                args.split
            )));
        }
    }
    if let Some(p) = &args.report {
        write_json(p, &json!({"split": args.split, "scoring": label, "metrics": report}))?;
    }
    Ok(())
}

struct AddDomain {
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    domain: Option<String>,
    old_data: Option<PathBuf>,
}

/// Bytes that differ between two checkpoints within the groups of `old`.
fn changed_bytes(old: &Manifest, old_blob: &[u8], new: &Manifest, new_blob: &[u8]) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for g in &old.groups {
        let ng = new
            .group(&g.name)
            .ok_or_else(|| Error::Audit(format!("group {} missing from the extended checkpoint", g.name)))?;
        let mut changed = 0;
        for (p, q) in g.params.iter().zip(&ng.params) {
            let n = 4 * p.shape.iter().product::<usize>();
            let a = &old_blob[p.offset..p.offset + n];
            let b = &new_blob[q.offset..q.offset + n];
            changed += a.iter().zip(b).filter(|(x, y)| x != y).count();
        }
        if g.params.len() != ng.params.len() {
            changed += 1;
        }
        out.push((g.name.clone(), changed));
    }
    Ok(out)
}

fn add_domain<T: Scalar>(cfg: &RunConfig, seed_flag: Option<u64>, a: &AddDomain) -> Result<()> {
    let mut model: UniCtr<T> = checkpoint::load(&a.checkpoint)?;
    let seed = seed_flag.unwrap_or(model.seed());
    let ds = load_data(&a.data, seed)?;
    let domain = match &a.domain {
        Some(d) => d.clone(),
        None => {
            let fresh: Vec<String> = ds
                .domains()
                .into_iter()
                .filter(|d| model.registry().position(d).is_none())
                .collect();
            match fresh.as_slice() {
                [d] => d.clone(),
                [] => {
                    return Err(Error::Registry(
                        "every domain in the data already has a domain network".into(),
                    ))
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "several new domains in the data ({}); choose one with --domain",
                        fresh.join(", ")
                    )))
                }
            }
        }
    };
    let eval_bs = cfg.train.eval_batch_size;
    let old = match &a.old_data {
        Some(p) => {
            let names: Vec<&str> = model.registry().names().iter().map(String::as_str).collect();
            let old_ds = load_data(p, seed)?.restrict(&names);
            let before = evaluate(&model, &old_ds, Split::Test, Scoring::Routed, eval_bs)?;
            Some((old_ds, before))
        }
        None => None,
    };
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let report = extend_domain(&mut model, &ds, cfg.dsn_config(&domain), &tc)?;

    let old_manifest = checkpoint::read_manifest(&a.checkpoint)?;
    let read = |dir: &Path| {
        let p = dir.join(checkpoint::PARAMS);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let ckpt = a.out.join(CHECKPOINT_DIR);
    let new_manifest = checkpoint::save(&model, &ckpt)?;
    let changes = changed_bytes(&old_manifest, &read(&a.checkpoint)?, &new_manifest, &read(&ckpt)?)?;
    println!("frozen-group audit:");
    for (g, n) in &changes {
        println!("  {g:<28} {n} changed bytes");
    }
    let total: usize = changes.iter().map(|(_, n)| n).sum();

    let mut drift = None;
    if let Some((old_ds, before)) = &old {
        let after = evaluate(&model, old_ds, Split::Test, Scoring::Routed, eval_bs)?;
        let mut worst = 0.0f64;
        for d in &before.domains {
            if let (Some(x), Some(y)) = (d.auc, after.auc_of(&d.domain)) {
                worst = worst.max((x - y).abs());
            }
        }
        println!("largest existing-domain test AUC change: {worst:e}");
        drift = Some(worst);
    }
    let new_test = evaluate(&model, &ds.restrict(&[domain.as_str()]), Split::Test, Scoring::Routed, eval_bs)?;
    print_metrics(&format!("new domain `{domain}`, test split"), &new_test);
    report.write_jsonl(&a.out.join("report.jsonl"))?;
    write_json(
        &a.out.join("audit.json"),
        &json!({
            "domain": domain,
            "frozen_checksums": report.frozen_checksums,
            "changed_bytes": changes.iter().map(|(g, n)| json!({"group": g, "changed_bytes": n})).collect::<Vec<_>>(),
            "old_domain_auc_drift": drift,
            "test": new_test,
        }),
    )?;
    if total > 0 {
        return Err(Error::Audit(format!("{total} bytes changed in frozen groups")));
    }
    Ok(())
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 64,
            ..Default::default()
        },
        general: GeneralConfig { tower_dims: vec![6] },
        ..Default::default()
    }
}

fn tiny_dsn(domain: &str) -> DsnConfig {
    DsnConfig {
        domain_name: domain.to_string(),
        tap_frequency: 1,
        ladder_dim: 4,
        ladder_heads: 2,
        tower_dims: vec![6],
        ..Default::default()
    }
}

fn grad_check(cfg: &RunConfig, scale: Scale, report_path: Option<&Path>, corrupt_mask: bool) -> Result<()> {
    let synth = SynthConfig {
        samples_per_domain: vec![40, 40, 40],
        domain_names: Vec::new(),
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&synth)?.dataset;
    let domains = ds.domains();
    let (mc, dsns, max_coords) = match scale {
        Scale::Tiny => (tiny_model_config(), domains.iter().map(|d| tiny_dsn(d)).collect(), None),
        Scale::Config => (
            cfg.model_config(),
            domains.iter().map(|d| cfg.dsn_config(d)).collect::<Vec<_>>(),
            Some(16),
        ),
    };
    let vocab = build_vocab(&ds, mc.prompt_mode, mc.max_history, cfg.data.max_vocab)?;
    let fresh: UniCtr<f64> = UniCtr::new(mc, vocab, dsns, cfg.seed)?;
    let enc = encode_dataset(&fresh, &ds)?;
    let batch_of = |idx: &[usize]| {
        let refs: Vec<&EncodedSample> = idx.iter().map(|&i| &enc[i]).collect();
        Batch::from_samples(&refs)
    };

    // Decoupling: batches that leave out one or two domains, every network
    // computed (strict mode) so absent ones are reachable from the loss.
    let mut model = fresh.clone();
    let tc = TrainConfig {
        mask_mode: MaskMode::Strict,
        dropout: cfg.train.dropout,
        seed: cfg.seed,
        corrupt_mask,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(tc.optimizer_config());
    let by_domain: Vec<Vec<usize>> = domains.iter().map(|d| ds.indices(Split::Train, Some(d))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut violations = BTreeSet::new();
    let batches = 30;
    for _ in 0..batches {
        let keep = rng.gen_range(0..by_domain.len());
        let mut idx: Vec<usize> = (0..4).map(|_| by_domain[keep][rng.gen_range(0..by_domain[keep].len())]).collect();
        if rng.gen_bool(0.5) {
            let other = (keep + 1) % by_domain.len();
            idx.push(by_domain[other][rng.gen_range(0..by_domain[other].len())]);
        }
        match train_step(&mut model, &batch_of(&idx), &tc, &mut opt, 1e-3, 1) {
            Ok(_) => {}
            Err(Error::Audit(msg)) => {
                let group = msg
                    .strip_prefix("domain network ")
                    .and_then(|m| m.split_once(" has no samples"))
                    .map_or(msg.as_str(), |(g, _)| g);
                violations.insert(group.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    println!(
        "decoupling: {batches} strict-mode batches, {} violating group(s)",
        violations.len()
    );

    // Finite differences on one sample per domain.
    let mut model = fresh;
    let idx: Vec<usize> = by_domain.iter().map(|v| v[0]).collect();
    let batch = batch_of(&idx);
    let loss_fn = |m: &UniCtr<f64>| -> Result<(Tape<f64>, unictr_core::autodiff::Var)> {
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let taps = m.taps(&mut tape, &vars, &batch)?;
        let pos = m.positions(&batch);
        let d = m
            .routed_domain_pred(&mut tape, &vars, &taps, &pos, MaskMode::Dispatch, None)?
            .ok_or_else(|| Error::Registry("model has no domain networks".into()))?;
        let g = m.general_out(&mut tape, &vars, &taps, None)?;
        let t = masked_loss(&mut tape, d, g.tower.prob, &batch.labels, cfg.train.general_loss_weight)?;
        Ok((tape, t.total))
    };
    let fd = finite_diff_check(
        &mut model,
        loss_fn,
        &GradCheckConfig {
            max_coords,
            seed: cfg.seed,
            ..GradCheckConfig::default()
        },
    )?;
    let per_group = fd.per_group();
    println!("finite differences: {} coordinates", fd.coords());
    for (g, e) in &per_group {
        let flag = if *e < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("  {g:<28} max rel. error {e:.3e} {flag}");
    }
    if let Some(p) = report_path {
        write_json(
            p,
            &json!({
                "decoupling": {"batches": batches, "violations": violations},
                "finite_differences": {"coords": fd.coords(), "max_rel_err": per_group, "entries": fd.entries},
            }),
        )?;
    }
    let bad: Vec<&String> = per_group.iter().filter(|(_, e)| **e >= GRAD_TOLERANCE).map(|(g, _)| g).collect();
    if !violations.is_empty() || !bad.is_empty() {
        let mut parts = Vec::new();
        if !violations.is_empty() {
            parts.push(format!(
                "gradient decoupling violated by {}",
                violations.into_iter().collect::<Vec<_>>().join(", ")
            ));
        }
        if !bad.is_empty() {
            parts.push(format!(
                "finite-difference error above {GRAD_TOLERANCE:e} in {}",
                bad.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        return Err(Error::Audit(parts.join("; ")));
    }
    println!("grad-check passed");
    Ok(())
}

fn dump_reps<T: Scalar>(
    cfg: &RunConfig,
    seed_flag: Option<u64>,
    checkpoint: &Path,
    data: Option<PathBuf>,
    sel: &Selector,
    out: &Path,
    split: &str,
) -> Result<()> {
    let model: UniCtr<T> = checkpoint::load(checkpoint)?;
    let ds = load_data(&data_path(data, cfg)?, seed_flag.unwrap_or(model.seed()))?;
    let idx = split_indices(&ds, parse_split(split)?, None);
    let enc: Vec<EncodedSample> = idx
        .iter()
        .map(|&i| model.encode(&ds.records[i], i as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<&EncodedSample> = enc.iter().collect();
    let n = dump_representations(&model, &refs, sel, out)?;
    println!("wrote {n} representations to {}", out.display());
    Ok(())
}
