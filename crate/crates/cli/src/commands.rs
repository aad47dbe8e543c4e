use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use plmap_core::dataset::{build_dataset, load_dataset};
use plmap_core::env::{self, write_scene};
use plmap_core::eval::{self, empirical_baseline_fit, make_cv_plan, metrics, CvReport, LogDistanceModel};
use plmap_core::nnet::{load_checkpoint, write_checkpoint, Network};
use plmap_core::oracle::{write_labels_csv, LabelRecord};
use plmap_core::preprocess::FeatureOptions;
use plmap_core::trainer::{self, EpochLog};
use plmap_core::{generate_scene, LabeledDataset, MetricReport, NetConfig, ParamStore, Split, TrainLog};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::provenance::{sha256_file, Formats, Invocation, OutputDir, Provenance, Seeds};
use crate::svg::loss_curve;

/// Ablation configurations in table order.
pub const ABLATIONS: [(&str, &str, FeatureOptions); 3] = [
    (
        "proposed",
        "proposed",
        FeatureOptions {
            use_distance: true,
            use_mask: true,
        },
    ),
    (
        "no_mask",
        "w/o mask",
        FeatureOptions {
            use_distance: true,
            use_mask: false,
        },
    ),
    (
        "no_dist",
        "w/o dist",
        FeatureOptions {
            use_distance: false,
            use_mask: true,
        },
    ),
];

/// Runs `inv` with `cfg` and writes its outputs plus provenance under `out`.
pub fn run(inv: &Invocation, cfg: &RunConfig, out: &Path) -> Result<Provenance, CliError> {
    let mut dir = OutputDir::create(out)?;
    let mut inputs = BTreeMap::new();
    for p in inv.inputs() {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let mut prov = Provenance {
        generator: concat!("plmap ", env!("CARGO_PKG_VERSION")).to_string(),
        invocation: inv.clone(),
        config: cfg.clone(),
        seeds: Seeds {
            scene: cfg.scene.seed,
            split: cfg.dataset.split_seed,
            train: cfg.train.seed,
            runs: BTreeMap::new(),
        },
        formats: Formats::default(),
        options: BTreeMap::new(),
        inputs,
        outputs: BTreeMap::new(),
    };
    dir.write("config.toml", cfg.to_toml())?;
    match inv {
        Invocation::Gen => gen(cfg, &mut dir)?,
        Invocation::Train { data, options } => {
            let ds = load_bundle(cfg, data)?;
            train(cfg, &ds, *options, &mut dir, &mut prov)?;
        }
        Invocation::Cv { data, options } => {
            let ds = load_bundle(cfg, data)?;
            let report = cv(cfg, &ds, *options, "cv", &mut prov)?;
            write_cv(&mut dir, "", &cfg.net, &report)?;
        }
        Invocation::Ablate { data } => {
            let ds = load_bundle(cfg, data)?;
            let mut reports = Vec::new();
            for (name, label, options) in ABLATIONS {
                let report = cv(cfg, &ds, options, name, &mut prov)?;
                write_cv(&mut dir, &format!("{name}/"), &cfg.net, &report)?;
                reports.push((label, report));
            }
            let (csv, table) = ablation_table(&reports);
            dir.write("ablation.csv", csv)?;
            dir.write("ablation.md", &table)?;
            print!("{table}");
        }
        Invocation::Eval { data, checkpoint, tx, options } => {
            let ds = load_bundle(cfg, data)?;
            let ds = with_options(&ds, *options);
            prov.options.insert("eval".into(), ds.manifest.provenance.options);
            evaluate(&ds, checkpoint, *tx, &mut dir)?;
        }
    }
    dir.finish(prov)
}

fn progress(run: &str) -> impl Fn(Option<usize>, &EpochLog) + '_ {
    move |fold, e| {
        let fold = fold.map(|k| format!(" fold {k}")).unwrap_or_default();
        eprintln!(
            "[{run}]{fold} epoch {} train_mse {:.6} val_mse {:.6} lr {:.3e} {:.1}s",
            e.epoch, e.train_mse, e.val_mse, e.lr, e.seconds
        );
    }
}

fn gen(cfg: &RunConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let start = Instant::now();
    let (field, sites) = generate_scene(&cfg.scene)?;
    dir.write("scene.txt", write_scene(&field, &sites))?;
    let mut ds = build_dataset(
        &field,
        &sites,
        &cfg.oracle,
        &cfg.features,
        FeatureOptions::default(),
        cfg.dataset.split_seed,
    )?;
    ds.manifest.provenance.scene = Some(cfg.scene.clone());
    let txs: BTreeMap<usize, _> = env::transmitters(&sites).into_iter().collect();
    let rxs: BTreeMap<usize, _> = env::receivers(&sites).into_iter().collect();
    let records: Vec<LabelRecord> = ds
        .samples
        .iter()
        .map(|s| LabelRecord {
            tx_id: s.tx_id,
            rx_id: s.rx_id,
            tx: txs[&s.tx_id],
            rx: rxs[&s.rx_id],
            frequency: s.frequency,
            pl_db: s.pl_db,
            los: s.los,
        })
        .collect();
    let mut csv = Vec::new();
    write_labels_csv(&records, &mut csv)?;
    dir.write("labels.csv", csv)?;
    dir.write("data.plds", ds.encode()?)?;
    eprintln!(
        "[gen] {} samples from {} Tx x {} Rx in {:.1}s",
        ds.len(),
        txs.len(),
        rxs.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn load_bundle(cfg: &RunConfig, path: &Path) -> Result<LabeledDataset, CliError> {
    let ds = load_dataset(path).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
    let f = &ds.manifest.provenance.features;
    if (f.h, f.w) != cfg.net.input_hw {
        return Err(CliError::config(format!(
            "{} holds {}x{} feature stacks but net.input_hw is {:?}",
            path.display(),
            f.h,
            f.w,
            cfg.net.input_hw
        )));
    }
    Ok(ds)
}

/// The bundle with `options` applied, copied only when something is ablated.
fn with_options(ds: &LabeledDataset, options: FeatureOptions) -> Cow<'_, LabeledDataset> {
    if options == FeatureOptions::default() {
        Cow::Borrowed(ds)
    } else {
        Cow::Owned(ds.ablated(options))
    }
}

fn checkpoint_bytes(net: &NetConfig, params: &ParamStore) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net, params)?;
    Ok(buf)
}

fn write_log(dir: &mut OutputDir, prefix: &str, log: &TrainLog, title: &str) -> Result<(), CliError> {
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    let mut stable = Vec::new();
    log.without_timing().write_csv(&mut stable)?;
    dir.write_timed(&format!("{prefix}train_log.csv"), csv, Some(&stable))?;
    dir.write(&format!("{prefix}loss.svg"), loss_curve(log, title))
}

fn metric_row(name: &str, m: &MetricReport) -> String {
    format!("{name},{},{},{},{},{}\n", m.rmse_db, m.mae_db, m.mape, m.r2, m.n)
}

const METRIC_HEADER: &str = "predictor,rmse_db,mae_db,mape,r2,n\n";

fn train(
    cfg: &RunConfig,
    ds: &LabeledDataset,
    options: FeatureOptions,
    dir: &mut OutputDir,
    prov: &mut Provenance,
) -> Result<(), CliError> {
    let ds = with_options(ds, options);
    prov.seeds.runs.insert("train".into(), vec![cfg.train.seed]);
    prov.options.insert("train".into(), ds.manifest.provenance.options);
    let report = progress("train");
    let (params, log) = trainer::train_with_progress(&ds, &cfg.train, &cfg.net, |e| report(None, e))?;
    dir.write("checkpoint.plnw", checkpoint_bytes(&cfg.net, &params)?)?;
    write_log(dir, "", &log, "training and validation loss")?;

    let net = Network::new(&cfg.net)?;
    let val = ds.indices(Split::Val);
    let fit = fit_on(&ds, &ds.indices(Split::Train))?;
    let truth: Vec<f64> = val.iter().map(|&i| ds.samples[i].pl_db).collect();
    let pred = trainer::predict_pl_batch(&net, &params, val.iter().map(|&i| &ds.samples[i].stack))?;
    let base: Vec<f64> = val.iter().map(|&i| fit.predict(ds.samples[i].stack.distance)).collect();
    let (model, baseline) = (metrics(&pred, &truth)?, metrics(&base, &truth)?);
    let summary = json!({
        "split": "val",
        "model": model,
        "baseline": baseline,
        "baseline_fit": fit,
        "best_epoch": log.best_epoch,
        "options": ds.manifest.provenance.options,
    });
    dir.write("metrics.json", serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    dir.write("metrics.csv", format!("{METRIC_HEADER}{}{}", metric_row("model", &model), metric_row("baseline", &baseline)))?;
    println!(
        "val RMSE {:.3} dB (baseline {:.3} dB), best epoch {}",
        model.rmse_db, baseline.rmse_db, log.best_epoch
    );
    Ok(())
}

fn cv(
    cfg: &RunConfig,
    ds: &LabeledDataset,
    options: FeatureOptions,
    run: &str,
    prov: &mut Provenance,
) -> Result<CvReport, CliError> {
    let ds = with_options(ds, options);
    let plan = make_cv_plan(&ds.tx_ids())?;
    let seeds = (0..plan.folds.len()).map(|k| eval::fold_seed(cfg.train.seed, k)).collect();
    prov.seeds.runs.insert(run.into(), seeds);
    prov.options.insert(run.into(), ds.manifest.provenance.options);
    let report = progress(run);
    let out = eval::run_cv(&ds, &plan, &cfg.train, &cfg.net, true, |k, e| report(Some(k + 1), e))?;
    for f in &out.folds {
        eprintln!(
            "[{run}] fold {} (test Tx {}) RMSE {:.3} dB, baseline {:.3} dB",
            f.fold, f.test_tx, f.model.rmse_db, f.baseline.rmse_db
        );
    }
    println!(
        "[{run}] average RMSE {:.3} dB, baseline {:.3} dB",
        out.avg.model.rmse_db, out.avg.baseline.rmse_db
    );
    Ok(out)
}

fn write_cv(dir: &mut OutputDir, prefix: &str, net: &NetConfig, report: &CvReport) -> Result<(), CliError> {
    for f in &report.folds {
        let p = format!("{prefix}fold_{}/", f.fold);
        if let Some(params) = &f.params {
            dir.write(&format!("{p}checkpoint.plnw"), checkpoint_bytes(net, params)?)?;
        }
        write_log(dir, &p, &f.train_log, &format!("fold {} (test Tx {})", f.fold, f.test_tx))?;
        dir.write(&format!("{p}metrics.json"), serde_json::to_string_pretty(f).unwrap() + "\n")?;
        dir.write(
            &format!("{p}metrics.csv"),
            format!("{METRIC_HEADER}{}{}", metric_row("model", &f.model), metric_row("baseline", &f.baseline)),
        )?;
    }
    dir.write(&format!("{prefix}avg.json"), serde_json::to_string_pretty(&report.avg).unwrap() + "\n")?;
    dir.write(&format!("{prefix}cv.json"), report.to_json() + "\n")?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    dir.write(&format!("{prefix}cv.csv"), csv)
}

fn fit_on(ds: &LabeledDataset, idx: &[usize]) -> Result<LogDistanceModel, CliError> {
    let d: Vec<f64> = idx.iter().map(|&i| ds.samples[i].stack.distance).collect();
    let pl: Vec<f64> = idx.iter().map(|&i| ds.samples[i].pl_db).collect();
    Ok(empirical_baseline_fit(&d, &pl)?)
}

/// CSV and markdown comparison of model RMSE per fold.
pub fn ablation_table(reports: &[(&str, CvReport)]) -> (String, String) {
    let k = reports.first().map_or(0, |r| r.1.folds.len());
    let mut csv = String::from("config");
    let mut md = String::from("| Method |");
    for i in 1..=k {
        csv += &format!(",cv{i}");
        md += &format!(" CV {i} |");
    }
    csv += ",avg\n";
    md += " Avg |\n|---|";
    md += &"---:|".repeat(k + 1);
    md.push('\n');
    for (label, r) in reports {
        csv += label;
        md += &format!("| {label} |");
        for f in &r.folds {
            csv += &format!(",{}", f.model.rmse_db);
            md += &format!(" {:.2} |", f.model.rmse_db);
        }
        csv += &format!(",{}\n", r.avg.model.rmse_db);
        md += &format!(" {:.2} |\n", r.avg.model.rmse_db);
    }
    (csv, md)
}

fn evaluate(ds: &LabeledDataset, checkpoint: &Path, tx: Option<usize>, dir: &mut OutputDir) -> Result<(), CliError> {
    let (net_cfg, params) = load_checkpoint(checkpoint).map_err(|e| CliError::from(e).context(&checkpoint.display().to_string()))?;
    let net = Network::new(&net_cfg)?;
    let (test, rest): (Vec<usize>, Vec<usize>) = match tx {
        Some(t) => (0..ds.len()).partition(|&i| ds.samples[i].tx_id == t),
        None => (ds.indices(Split::Val), ds.indices(Split::Train)),
    };
    if test.is_empty() {
        return Err(CliError::usage(match tx {
            Some(t) => format!("no samples for Tx {t}"),
            None => "the bundle has no validation samples".into(),
        }));
    }
    let truth: Vec<f64> = test.iter().map(|&i| ds.samples[i].pl_db).collect();
    let pred = trainer::predict_pl_batch(&net, &params, test.iter().map(|&i| &ds.samples[i].stack))?;
    let model = metrics(&pred, &truth)?;
    let fit = fit_on(ds, &rest)?;
    let base: Vec<f64> = test.iter().map(|&i| fit.predict(ds.samples[i].stack.distance)).collect();
    let baseline = metrics(&base, &truth)?;
    let summary = json!({
        "selection": tx.map_or("val".to_string(), |t| format!("tx {t}")),
        "model": model,
        "baseline": baseline,
        "baseline_fit": fit,
        "params": net.n_params(),
        "macs_per_sample": net.macs_per_sample(),
    });
    dir.write("metrics.json", serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    dir.write("metrics.csv", format!("{METRIC_HEADER}{}{}", metric_row("model", &model), metric_row("baseline", &baseline)))?;

    let stacks: Vec<_> = test.iter().map(|&i| ds.samples[i].stack.clone()).collect();
    let single = stacks.iter().take(32).cloned().collect::<Vec<_>>();
    let t0 = Instant::now();
    for s in &single {
        net.forward(&params, std::slice::from_ref(s))?;
    }
    let batch1_ms = 1e3 * t0.elapsed().as_secs_f64() / single.len() as f64;
    let batch: Vec<_> = stacks.iter().cycle().take(trainer::EVAL_BATCH).cloned().collect();
    let t0 = Instant::now();
    net.forward(&params, &batch)?;
    let batch64_ms = 1e3 * t0.elapsed().as_secs_f64() / batch.len() as f64;
    let timing = json!({
        "batch1_ms_per_sample": batch1_ms,
        "batch64_ms_per_sample": batch64_ms,
        "params": net.n_params(),
        "macs_per_sample": net.macs_per_sample(),
        "threads": rayon::current_num_threads(),
    });
    dir.write_timed("timing.json", serde_json::to_string_pretty(&timing).unwrap() + "\n", None)?;
    println!(
        "RMSE {:.3} dB (baseline {:.3} dB) on {} samples; {} params, {} MACs/sample; {:.3} ms/sample at batch 1, {:.3} at batch {}",
        model.rmse_db,
        baseline.rmse_db,
        model.n,
        net.n_params(),
        net.macs_per_sample(),
        batch1_ms,
        batch64_ms,
        trainer::EVAL_BATCH
    );
    Ok(())
}
