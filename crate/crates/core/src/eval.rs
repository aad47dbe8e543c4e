//! Error metrics, leave-one-transmitter-out cross-validation and the
//! log-distance baseline.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::nnet::{NetConfig, Network, ParamStore};
use crate::trainer::{self, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_db: f64,
    pub mae_db: f64,
    /// Percent.
    pub mape: f64,
    /// NaN when the truth is constant.
    pub r2: f64,
    pub n: usize,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Usage("metrics of an empty sample".into()));
    }
    if let Some(i) = truth.iter().position(|t| *t == 0.0) {
        return Err(Error::MapeUndefined(i));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
        ape += (d / t).abs();
    }
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    Ok(MetricReport {
        rmse_db: (se / n).sqrt(),
        mae_db: ae / n,
        mape: 100.0 * ape / n,
        r2: if ss_tot > 0.0 { 1.0 - se / ss_tot } else { f64::NAN },
        n: pred.len(),
    })
}

/// Unweighted mean of each metric; `n` is the total sample count.
pub fn average(reports: &[MetricReport]) -> MetricReport {
    let k = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    MetricReport {
        rmse_db: mean(|r| r.rmse_db),
        mae_db: mean(|r| r.mae_db),
        mape: mean(|r| r.mape),
        r2: mean(|r| r.r2),
        n: reports.iter().map(|r| r.n).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: Vec<Fold>,
}

/// One fold per transmitter, held out in ascending id order.
pub fn make_cv_plan(tx_ids: &[usize]) -> Result<CvPlan> {
    let mut seen = BTreeSet::new();
    for &id in tx_ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
    }
    if seen.len() < 2 {
        return Err(Error::Usage(format!("cross-validation needs at least 2 transmitters, got {}", seen.len())));
    }
    let folds = seen
        .iter()
        .map(|&test| Fold {
            train: seen.iter().copied().filter(|&t| t != test).collect(),
            test,
        })
        .collect();
    Ok(CvPlan { folds })
}

/// `PL = pl0 + 10 n_exp log10(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogDistanceModel {
    pub pl0: f64,
    pub n_exp: f64,
}

impl LogDistanceModel {
    pub fn predict(&self, distance: f64) -> f64 {
        self.pl0 + 10.0 * self.n_exp * distance.log10()
    }
}

/// Ordinary least squares of path loss on `log10(distance)`.
pub fn empirical_baseline_fit(distances: &[f64], pl_db: &[f64]) -> Result<LogDistanceModel> {
    if distances.len() != pl_db.len() {
        return Err(Error::LengthMismatch(distances.len(), pl_db.len()));
    }
    if distances.len() < 2 {
        return Err(Error::SingularFit(format!("{} samples", distances.len())));
    }
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::SingularFit(format!("non-positive distance {d}")));
    }
    let x: Vec<f64> = distances.iter().map(|d| d.log10()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = pl_db.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(pl_db).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= f64::EPSILON * n * mx.abs().max(1.0) {
        return Err(Error::SingularFit("all distances are equal".into()));
    }
    let slope = sxy / sxx;
    Ok(LogDistanceModel {
        pl0: my - slope * mx,
        n_exp: slope / 10.0,
    })
}

/// Baseline fitted on every sample of `data`.
pub fn fit_baseline(data: &LabeledDataset) -> Result<LogDistanceModel> {
    let d: Vec<f64> = data.samples.iter().map(|s| s.stack.distance).collect();
    let pl: Vec<f64> = data.samples.iter().map(|s| s.pl_db).collect();
    empirical_baseline_fit(&d, &pl)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_tx: usize,
    pub train_tx: Vec<usize>,
    pub model: MetricReport,
    pub baseline: MetricReport,
    pub baseline_fit: LogDistanceModel,
    pub best_epoch: usize,
    #[serde(skip)]
    pub train_log: TrainLog,
    #[serde(skip)]
    pub params: Option<ParamStore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub avg: AvgReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AvgReport {
    pub model: MetricReport,
    pub baseline: MetricReport,
}

/// Fails if any sample of `train` belongs to the held-out transmitter.
pub fn audit_fold(train: &LabeledDataset, fold: &Fold) -> Result<()> {
    if let Some(s) = train.samples.iter().find(|s| s.tx_id == fold.test || !fold.train.contains(&s.tx_id)) {
        return Err(Error::Usage(format!(
            "sample {} (Tx {}) leaked into the training set of held-out Tx {}",
            s.id, s.tx_id, fold.test
        )));
    }
    Ok(())
}

/// Seed of the fresh initialization used by fold `k`.
pub fn fold_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

/// Trains one model per fold from scratch and scores it and the baseline on
/// the held-out transmitter.
pub fn run_cv(
    data: &LabeledDataset,
    plan: &CvPlan,
    train_cfg: &TrainConfig,
    net_cfg: &NetConfig,
    keep_params: bool,
    mut on_epoch: impl FnMut(usize, &trainer::EpochLog),
) -> Result<CvReport> {
    let net = Network::new(net_cfg)?;
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (k, fold) in plan.folds.iter().enumerate() {
        let mut run = || -> Result<FoldReport> {
            let train_set = data.subset(|s| fold.train.contains(&s.tx_id));
            let test_set = data.subset(|s| s.tx_id == fold.test);
            if test_set.is_empty() {
                return Err(Error::Usage(format!("no samples for test Tx {}", fold.test)));
            }
            audit_fold(&train_set, fold)?;
            let cfg = TrainConfig {
                seed: fold_seed(train_cfg.seed, k),
                ..train_cfg.clone()
            };
            let (params, log) = trainer::train_with_progress(&train_set, &cfg, net_cfg, |e| on_epoch(k, e))?;
            let truth: Vec<f64> = test_set.samples.iter().map(|s| s.pl_db).collect();
            let pred = trainer::predict_pl_batch(&net, &params, test_set.samples.iter().map(|s| &s.stack))?;
            let fit = fit_baseline(&train_set)?;
            let base: Vec<f64> = test_set.samples.iter().map(|s| fit.predict(s.stack.distance)).collect();
            Ok(FoldReport {
                fold: k + 1,
                test_tx: fold.test,
                train_tx: fold.train.clone(),
                model: metrics(&pred, &truth)?,
                baseline: metrics(&base, &truth)?,
                baseline_fit: fit,
                best_epoch: log.best_epoch,
                train_log: log,
                params: keep_params.then_some(params),
            })
        };
        folds.push(run().map_err(|e| e.in_fold(k + 1))?);
    }
    let avg = AvgReport {
        model: average(&folds.iter().map(|f| f.model).collect::<Vec<_>>()),
        baseline: average(&folds.iter().map(|f| f.baseline).collect::<Vec<_>>()),
    };
    Ok(CvReport { folds, avg })
}

impl CvReport {
    pub const CSV_HEADER: &'static str =
        "fold,test_tx,model_rmse_db,model_mae_db,model_mape,model_r2,baseline_rmse_db,baseline_mae_db,baseline_mape,baseline_r2,n";

    /// One row per fold followed by an `avg` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let row = |out: &mut W, fold: &str, tx: &str, m: &MetricReport, b: &MetricReport| {
            writeln!(
                out,
                "{fold},{tx},{},{},{},{},{},{},{},{},{}",
                m.rmse_db, m.mae_db, m.mape, m.r2, b.rmse_db, b.mae_db, b.mape, b.r2, m.n
            )
        };
        for f in &self.folds {
            row(&mut out, &f.fold.to_string(), &f.test_tx.to_string(), &f.model, &f.baseline)?;
        }
        row(&mut out, "avg", "", &self.avg.model, &self.avg.baseline)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
