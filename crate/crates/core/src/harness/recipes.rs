//! Desk-scale experiment recipes: the policy comparison behind the tail
//! finding, and one-axis sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{AugmentTag, RunConfig};
use super::checkpoint::save_checkpoint;
use super::train::{
    fit, fit_options, load_data, pretrain_backbone, prepare_model, test_features, train_features, TrainRun,
};
use crate::data::{Group, LongTailDataset, ScheduleFn};
use crate::error::{Error, Result};
use crate::inference::{evaluate, intraclass_shift, EvalReport, ShiftReport};
use crate::model::Model;
use crate::peft::{count_policy_params, FineTunePolicy, ScaleMode};

/// Intra-class train/test shift of the model's features, per class.
pub fn feature_shift(model: &Model<f32>, ds: &LongTailDataset) -> Result<ShiftReport> {
    let train = train_features(model, ds)?;
    let test = test_features(model, ds)?;
    intraclass_shift(&train, &ds.train_labels, &test, &ds.test_labels, ds.classes)
}

pub fn tail_classes(ds: &LongTailDataset) -> Vec<usize> {
    (0..ds.classes).filter(|&k| ds.groups[k] == Group::Tail).collect()
}

pub struct PolicyRun {
    pub label: String,
    pub run: TrainRun,
    pub report: EvalReport,
    pub tail_shift: Option<f64>,
}

/// Trains `cfg` and measures the final report plus the mean tail-class shift.
pub fn run_and_measure(label: &str, cfg: &RunConfig, ds: &LongTailDataset) -> Result<PolicyRun> {
    cfg.validate()?;
    let mut model = prepare_model(cfg, ds)?;
    let run = fit(&mut model, ds, &fit_options(cfg, ds)?, None, |_| Ok(()))?;
    let report = run.last_eval.clone().expect("at least one epoch");
    let tail_shift = feature_shift(&run.model, ds)?.mean_shift(&tail_classes(ds));
    Ok(PolicyRun { label: label.to_string(), run, report, tail_shift })
}

/// The three arms compared for one seed. All share data, backbone, loss,
/// head initialization and augmentation; only the fine-tuning policy and
/// its learning rate differ.
pub struct ComparisonArms {
    pub lift: RunConfig,
    pub classifier_only: RunConfig,
    pub full: RunConfig,
}

/// Learning rates tried for full fine-tuning, which collapses at the rate
/// used for the lightweight arms.
pub const FULL_LR_GRID: [f64; 6] = [0.03, 0.02, 0.01, 0.005, 0.002, 0.001];

pub fn comparison_arms(base: &RunConfig, backbone: Option<PathBuf>, full_lr: f64) -> ComparisonArms {
    let mut lift = base.clone();
    lift.backbone = backbone;
    lift.policy = FineTunePolicy::adaptformer();
    let mut classifier_only = lift.clone();
    classifier_only.policy = FineTunePolicy::ClassifierOnly;
    let mut full = lift.clone();
    full.policy = FineTunePolicy::Full;
    full.schedule.lr = full_lr;
    ComparisonArms { lift, classifier_only, full }
}

#[derive(Clone, Debug)]
pub struct SeedComparison {
    pub seed: u64,
    pub lift: EvalReport,
    pub classifier_only: EvalReport,
    pub full: EvalReport,
    pub full_lr: f64,
    pub lift_tail_shift: Option<f64>,
    pub full_tail_shift: Option<f64>,
}

/// Runs the three arms on one dataset. Full fine-tuning gets the best
/// overall accuracy over [`FULL_LR_GRID`].
pub fn compare_for_seed(base: &RunConfig, backbone: Option<PathBuf>) -> Result<SeedComparison> {
    let ds = load_data(base)?;
    let arms = comparison_arms(base, backbone.clone(), FULL_LR_GRID[0]);
    let lift = run_and_measure("lift", &arms.lift, &ds)?;
    let clf = run_and_measure("classifier_only", &arms.classifier_only, &ds)?;
    let mut best: Option<(f64, PolicyRun)> = None;
    for lr in FULL_LR_GRID {
        let cfg = comparison_arms(base, backbone.clone(), lr).full;
        let r = run_and_measure("full", &cfg, &ds)?;
        if best.as_ref().is_none_or(|(_, b)| r.report.overall > b.report.overall) {
            best = Some((lr, r));
        }
    }
    let (full_lr, full) = best.expect("non-empty grid");
    Ok(SeedComparison {
        seed: base.seed,
        lift: lift.report,
        classifier_only: clf.report,
        full: full.report,
        full_lr,
        lift_tail_shift: lift.tail_shift,
        full_tail_shift: full.tail_shift,
    })
}

/// Target task of the comparison: K=10, ρ=100, noisier and less separated
/// than the defaults so that no arm saturates.
pub fn finding_base(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    for (k, v) in [
        ("data.seed", seed.to_string()),
        ("data.noise", "0.5".into()),
        ("data.separation", "0.6".into()),
        ("data.test_per_class", "50".into()),
        ("train.batch", "8".into()),
    ] {
        cfg.set(k, &v).expect("valid comparison setting");
    }
    cfg
}

/// Foundation pretraining for the comparison: 60 balanced source classes
/// with templates disjoint from the target's, drawn at the target noise.
pub fn finding_foundation() -> RunConfig {
    let mut cfg = finding_base(100);
    cfg.pretrain.classes = 60;
    cfg.pretrain.per_class = 60;
    cfg.pretrain.epochs = 15;
    cfg.pretrain.lr = 0.02;
    cfg
}

pub struct Finding {
    pub source_accuracy: f64,
    pub seeds: Vec<SeedComparison>,
}

#[derive(Clone, Copy, Debug)]
pub struct FindingMedians {
    pub lift_tail: f64,
    pub classifier_only_tail: f64,
    pub full_tail: f64,
    pub lift_shift: f64,
    pub full_shift: f64,
}

impl FindingMedians {
    /// LIFT at least as accurate on the tail as both baselines, and full
    /// fine-tuning shifting tail features more than LIFT.
    pub fn holds(&self) -> bool {
        self.lift_tail >= self.classifier_only_tail && self.lift_tail >= self.full_tail && self.full_shift > self.lift_shift
    }
}

impl Finding {
    pub fn medians(&self) -> FindingMedians {
        let m = |f: &dyn Fn(&SeedComparison) -> Option<f64>| median(self.seeds.iter().map(|s| f(s).unwrap_or(f64::NAN)).collect()).unwrap_or(f64::NAN);
        FindingMedians {
            lift_tail: m(&|s| s.lift.tail),
            classifier_only_tail: m(&|s| s.classifier_only.tail),
            full_tail: m(&|s| s.full.tail),
            lift_shift: m(&|s| s.lift_tail_shift),
            full_shift: m(&|s| s.full_tail_shift),
        }
    }
}

/// Pretrains one foundation into `dir/backbone.lfck` and runs the three-arm
/// comparison on a fresh target draw per seed.
pub fn reproduce_finding(seeds: &[u64], dir: &Path) -> Result<Finding> {
    let foundation = pretrain_backbone(&finding_foundation(), |_| Ok(()))?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join("backbone.lfck");
    save_checkpoint(&path, &foundation.checkpoint)?;
    let seeds = seeds.iter().map(|&s| compare_for_seed(&finding_base(s), Some(path.clone()))).collect::<Result<_>>()?;
    Ok(Finding { source_accuracy: foundation.source_accuracy, seeds })
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Axis of a one-dimensional sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Mask proportion of arbitrary lightweight fine-tuning.
    Alpha,
    /// Bottleneck width of the configured adapter-style policy.
    R,
    /// Cosine-classifier scale.
    Sigma,
    /// Expanded size of test-time ensembling (one training run).
    E,
    /// MDA scheduling function.
    G,
    /// Number of last blocks tuned by partial fine-tuning.
    K,
    /// Learning rate.
    Lr,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepAxis::Alpha,
            "r" => SweepAxis::R,
            "sigma" => SweepAxis::Sigma,
            "e" => SweepAxis::E,
            "g" => SweepAxis::G,
            "k" => SweepAxis::K,
            "lr" => SweepAxis::Lr,
            _ => return Err(Error::config(format!("unknown sweep axis {s:?}; expected alpha, r, sigma, e, g, k or lr"))),
        })
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::R => "r",
            SweepAxis::Sigma => "sigma",
            SweepAxis::E => "e",
            SweepAxis::G => "g",
            SweepAxis::K => "k",
            SweepAxis::Lr => "lr",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub learned_params: usize,
    pub report: EvalReport,
}

/// Config for one sweep point.
pub fn sweep_point(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let bad = || Error::config(format!("invalid {axis} value {value:?}"));
    match axis {
        SweepAxis::Alpha => {
            let alpha: f64 = value.parse().map_err(|_| bad())?;
            let seed = match base.policy {
                FineTunePolicy::Mask { seed, .. } => seed,
                _ => base.seed,
            };
            cfg.policy = FineTunePolicy::Mask { alpha, seed };
        }
        SweepAxis::R => {
            let r = Some(value.parse::<usize>().map_err(|_| bad())?);
            cfg.policy = match base.policy {
                FineTunePolicy::Adapter { .. } => FineTunePolicy::Adapter { r },
                FineTunePolicy::Lora { .. } => FineTunePolicy::Lora { r },
                FineTunePolicy::AdaptFormer { scale, .. } => FineTunePolicy::AdaptFormer { r, scale },
                _ => FineTunePolicy::AdaptFormer { r, scale: ScaleMode::Learnable },
            };
        }
        SweepAxis::Sigma => cfg.set("head.kind", &format!("cosine:{value}"))?,
        SweepAxis::E => {
            let e: usize = value.parse().map_err(|_| bad())?;
            cfg.tte = (e > 0).then_some(e);
        }
        SweepAxis::G => cfg.augment = AugmentTag::Mda(value.parse::<ScheduleFn>()?),
        SweepAxis::K => cfg.policy = FineTunePolicy::Partial { k: value.parse().map_err(|_| bad())? },
        SweepAxis::Lr => cfg.schedule.lr = value.parse().map_err(|_| bad())?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains once per value (once in total for `e`) and reports the final evaluation.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let ds = load_data(base)?;
    let mut rows = Vec::with_capacity(values.len());
    if axis == SweepAxis::E {
        base.validate()?;
        let mut model = prepare_model(base, &ds)?;
        let mut opts = fit_options(base, &ds)?;
        opts.tte = None;
        let run = fit(&mut model, &ds, &opts, None, |_| Ok(()))?;
        let learned = run.model.partition().total();
        for v in values {
            let cfg = sweep_point(base, axis, v)?;
            rows.push(SweepRow { value: v.clone(), learned_params: learned, report: evaluate(&run.model, &ds, cfg.tte)? });
        }
        return Ok(rows);
    }
    for v in values {
        let cfg = sweep_point(base, axis, v)?;
        let learned = count_policy_params(&cfg.policy, &cfg.spec, ds.classes)?;
        let r = run_and_measure(v, &cfg, &ds)?;
        rows.push(SweepRow { value: v.clone(), learned_params: learned, report: r.report });
    }
    Ok(rows)
}

/// CSV with one row per sweep value.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
    let mut out = format!("{axis},learned_params,overall,head,medium,tail\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{}\n",
            r.value,
            r.learned_params,
            r.report.overall,
            cell(r.report.head),
            cell(r.report.medium),
            cell(r.report.tail)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn sweep_points_set_the_axis() {
        let base = RunConfig::default();
        assert_eq!(sweep_point(&base, SweepAxis::Alpha, "0.2").unwrap().policy, FineTunePolicy::Mask { alpha: 0.2, seed: 0 });
        assert_eq!(
            sweep_point(&base, SweepAxis::R, "4").unwrap().policy,
            FineTunePolicy::AdaptFormer { r: Some(4), scale: ScaleMode::Learnable }
        );
        assert_eq!(sweep_point(&base, SweepAxis::K, "1").unwrap().policy, FineTunePolicy::Partial { k: 1 });
        assert_eq!(sweep_point(&base, SweepAxis::E, "0").unwrap().tte, None);
        assert!(sweep_point(&base, SweepAxis::K, "9").unwrap_err().is_config());
        assert!(sweep_point(&base, SweepAxis::G, "wavy").unwrap_err().is_config());
    }
}
