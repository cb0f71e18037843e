//! SGD training loop, foundation pretraining and per-epoch metrics.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, Checkpoint, NamedArray};
use super::config::{AugmentTag, DataSource, HeadInit, LossTag, RunConfig, Schedule};
use crate::data::{
    generate_longtail, load_dataset, mda_crop, rrc_crop, AugSchedule, Image, LongTailDataset, LongTailParams, RrcParams,
};
use crate::error::{Error, Result};
use crate::head::{init_class_mean, init_semantic, HeadKind, PrototypeSet};
use crate::inference::{evaluate, EvalReport};
use crate::model::Model;
use crate::numerics::{Gradients, Graph, ParamStore, Scalar, Trainable};
use crate::objective::estimate_prior;
use crate::peft::FineTunePolicy;
use crate::seed::{derive_seed, rng_for};

const MODEL_STREAM: u64 = 0x30de1;
const SHUFFLE_STREAM: u64 = 0x5f1e;
const AUGMENT_STREAM: u64 = 0xa06;
const SOURCE_STREAM: u64 = 0x50c;

/// SGD with heavy-ball momentum and L2 weight decay, `v ← μv + g + λw`,
/// `w ← w − ηv`. Only trainable entries move.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let w = p.value.data_mut();
            let mut update = |i: usize| {
                v[i] = mu * v[i] + g[i] + wd * w[i];
                w[i] = w[i] - lr * v[i];
            };
            match &p.trainable {
                Trainable::Frozen => {}
                Trainable::Full => (0..g.len()).for_each(&mut update),
                Trainable::Masked(m) => (0..g.len()).filter(|&i| m[i]).for_each(&mut update),
            }
        }
    }
}

impl Sgd<f32> {
    pub fn velocity_arrays(&self, store: &ParamStore<f32>) -> Vec<NamedArray> {
        store
            .iter()
            .filter_map(|(id, p)| {
                let v = self.velocity.get(id.index())?.as_ref()?;
                Some(NamedArray { name: p.name.clone(), shape: p.value.shape().to_vec(), data: v.clone() })
            })
            .collect()
    }

    pub fn restore_velocity(&mut self, store: &ParamStore<f32>, arrays: &[NamedArray]) -> Result<()> {
        self.velocity = vec![None; store.len()];
        for a in arrays {
            let id = store.id(&a.name).ok_or_else(|| Error::integrity(format!("momentum for unknown array {}", a.name)))?;
            if store.value(id).shape() != a.shape.as_slice() {
                return Err(Error::integrity(format!("momentum array {} has the wrong shape", a.name)));
            }
            self.velocity[id.index()] = Some(a.data.clone());
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub overall: f64,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
}

impl EpochMetrics {
    pub fn new(epoch: usize, train_loss: f64, r: &EvalReport) -> Self {
        Self { epoch, train_loss, overall: r.overall, head: r.head, medium: r.medium, tail: r.tail }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Everything the inner loop needs besides the model and data.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub seed: u64,
    pub threads: usize,
    pub schedule: Schedule,
    pub augment: AugmentTag,
    pub crop_scale: (f64, f64),
    /// Additive logit offsets (log prior for the adjusted loss, zeros for CE).
    pub offsets: Vec<f64>,
    pub tte: Option<usize>,
    /// Stop after this epoch; the schedule still spans `schedule.epochs`.
    pub until: Option<usize>,
}

pub struct TrainRun {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    pub last_eval: Option<EvalReport>,
}

fn augment(image: &Image, opts: &FitOptions, t: usize, side: usize, rng: &mut impl rand::Rng) -> Result<Image> {
    match opts.augment {
        AugmentTag::None => Ok(image.clone()),
        AugmentTag::Mda(g) => {
            let s = AugSchedule::new(opts.crop_scale.0, opts.crop_scale.1, g, opts.schedule.epochs)?;
            mda_crop(image, t, &s, side, rng)
        }
        AugmentTag::Rrc => {
            let p = RrcParams { scale: opts.crop_scale, ..RrcParams::default() };
            rrc_crop(image, &p, side, rng)
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} worker threads: {e}")))
}

/// Runs epochs `start+1..=T` (or up to `until`), evaluating after each one.
///
/// Per-sample augmentation seeds depend only on `(seed, epoch, sample)`, and
/// per-sample gradients are summed in batch order, so the result does not
/// depend on the thread count.
pub fn fit(
    model: &mut Model<f32>,
    ds: &LongTailDataset,
    opts: &FitOptions,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainRun> {
    if ds.train_len() == 0 {
        return Err(Error::config("training split is empty"));
    }
    let s = opts.schedule;
    let mut sgd = Sgd::<f32>::new(s.effective_lr(), s.momentum, s.weight_decay);
    let (mut start, mut step) = (0, 0u64);
    if let Some(ck) = resume {
        ck.apply_to(model)?;
        sgd.restore_velocity(&model.store, &ck.momentum)?;
        start = ck.epoch;
        step = ck.step;
    }
    let offsets: Vec<f32> = opts.offsets.iter().map(|&v| v as f32).collect();
    let side = model.spec().image_side;
    let pool = pool(opts.threads)?;
    let mut metrics = Vec::new();
    let mut last_eval = None;
    let end = opts.until.map_or(s.epochs, |u| u.min(s.epochs)).max(start);
    for t in start + 1..=end {
        let mut order: Vec<usize> = (0..ds.train_len()).collect();
        order.shuffle(&mut rng_for(opts.seed, &[SHUFFLE_STREAM, t as u64]));
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(s.batch) {
            step += 1;
            let m: &Model<f32> = model;
            let per_sample: Vec<(f32, Gradients<f32>)> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = rng_for(opts.seed, &[AUGMENT_STREAM, t as u64, i as u64]);
                        let im = augment(&ds.train_images[i], opts, t, side, &mut rng)?;
                        let mut g = Graph::new(&m.store);
                        let loss = m.loss_var(&mut g, &[&im], &[ds.train_labels[i]], &offsets)?;
                        Ok((g.scalar(loss), g.backward(loss)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut total = Gradients::empty(m.store.len());
            let mut batch_loss = 0.0f64;
            for (l, g) in &per_sample {
                batch_loss += *l as f64;
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f32);
            if !batch_loss.is_finite() || !total.all_finite() {
                return Err(Error::numeric(format!("non-finite loss or gradient at epoch {t}, step {step}")));
            }
            loss_sum += batch_loss;
            sgd.step(&mut model.store, &total);
        }
        let report = pool.install(|| evaluate(&*model, ds, opts.tte))?;
        let row = EpochMetrics::new(t, loss_sum / ds.train_len() as f64, &report);
        on_epoch(&row)?;
        metrics.push(row);
        last_eval = Some(report);
    }
    let checkpoint = Checkpoint::from_model(model, end, step, opts.seed, sgd.velocity_arrays(&model.store));
    Ok(TrainRun { model: model.clone(), metrics, checkpoint, last_eval })
}

/// Loads the configured dataset and checks it against the model input size.
pub fn load_data(cfg: &RunConfig) -> Result<LongTailDataset> {
    let ds = match &cfg.data {
        DataSource::File(p) => load_dataset(p, cfg.thresholds)?,
        DataSource::Synthetic(p) => {
            let mut ds = generate_longtail(p).map_err(|e| Error::config(e.to_string()))?;
            ds.regroup(cfg.thresholds)?;
            ds
        }
    };
    if ds.image_side != cfg.spec.image_side || ds.channels != cfg.spec.channels {
        return Err(Error::config(format!(
            "dataset images are {0}x{0}x{1}, the model expects {2}x{2}x{3}",
            ds.image_side, ds.channels, cfg.spec.image_side, cfg.spec.channels
        )));
    }
    Ok(ds)
}

pub fn loss_offsets(loss: LossTag, ds: &LongTailDataset) -> Result<Vec<f64>> {
    Ok(match loss {
        LossTag::Ce => vec![0.0; ds.classes],
        LossTag::La => estimate_prior(&ds.counts)?.log_prior(),
    })
}

pub fn fit_options(cfg: &RunConfig, ds: &LongTailDataset) -> Result<FitOptions> {
    Ok(FitOptions {
        seed: cfg.seed,
        threads: cfg.threads,
        schedule: cfg.schedule,
        augment: cfg.augment,
        crop_scale: cfg.crop_scale,
        offsets: loss_offsets(cfg.loss, ds)?,
        tte: cfg.tte,
        until: None,
    })
}

/// Single-view features of every training image, in dataset order.
pub fn train_features(model: &Model<f32>, ds: &LongTailDataset) -> Result<Vec<Vec<f64>>> {
    ds.train_images.par_iter().map(|im| model.feature(im)).collect()
}

pub fn test_features(model: &Model<f32>, ds: &LongTailDataset) -> Result<Vec<Vec<f64>>> {
    ds.test_images.par_iter().map(|im| model.feature(im)).collect()
}

/// Builds the model, loads the foundation backbone and initializes the head.
pub fn prepare_model(cfg: &RunConfig, ds: &LongTailDataset) -> Result<Model<f32>> {
    let mut model =
        Model::<f32>::new(cfg.spec, cfg.head, ds.classes, cfg.policy, derive_seed(cfg.seed, &[MODEL_STREAM]))
            .map_err(|e| match e {
                Error::Domain(m) | Error::Shape(m) => Error::Config(m),
                other => other,
            })?;
    if let Some(path) = &cfg.backbone {
        let ck = load_checkpoint(path)?;
        if ck.spec != cfg.spec {
            return Err(Error::config(format!("backbone checkpoint has spec {}, config has {}", ck.spec, cfg.spec)));
        }
        let backbone_names: Vec<String> =
            model.backbone.param_ids().into_iter().map(|id| model.store.get(id).name.clone()).collect();
        let mut only = ck.clone();
        only.arrays.retain(|a| backbone_names.contains(&a.name));
        only.head = None;
        only.apply_to(&mut model)?;
    }
    let init = match (cfg.head_init, &cfg.prototypes) {
        (HeadInit::Auto, Some(_)) => HeadInit::Semantic,
        (HeadInit::Auto, None) => HeadInit::ClassMean,
        (other, _) => other,
    };
    let w = match init {
        HeadInit::Random => None,
        HeadInit::Semantic => {
            let path = cfg.prototypes.as_ref().ok_or_else(|| Error::config("semantic init needs head.prototypes"))?;
            Some(init_semantic(&PrototypeSet::load(path)?, ds.classes, cfg.spec.dim)?)
        }
        HeadInit::ClassMean | HeadInit::Auto => {
            let pool = pool(cfg.threads)?;
            let feats = pool.install(|| train_features(&model, ds))?;
            Some(init_class_mean(&feats, &ds.train_labels, ds.classes)?)
        }
    };
    if let Some(w) = w {
        model.head.set_weights(&mut model.store, &w)?;
    }
    Ok(model)
}

/// Fine-tuning run as configured, optionally stopped after epoch `until`;
/// `on_epoch` sees each metrics row as it is produced.
pub fn train_with(
    cfg: &RunConfig,
    until: Option<usize>,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let mut model = prepare_model(cfg, &ds)?;
    let opts = FitOptions { until, ..fit_options(cfg, &ds)? };
    fit(&mut model, &ds, &opts, None, on_epoch)
}

pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    train_with(cfg, None, |_| Ok(()))
}

/// Continues a run from a checkpoint written by [`fit`].
pub fn resume(
    cfg: &RunConfig,
    ck: &Checkpoint,
    until: Option<usize>,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let mut model = ck.to_model()?;
    let opts = FitOptions { until, ..fit_options(cfg, &ds)? };
    fit(&mut model, &ds, &opts, Some(ck), on_epoch)
}

/// Balanced source data drawn from the `pretrain.*` generator settings.
pub fn source_dataset(cfg: &RunConfig) -> Result<LongTailDataset> {
    let p = &cfg.pretrain;
    let mut params = LongTailParams::new(
        p.classes,
        p.per_class,
        1.0,
        p.test_per_class,
        cfg.spec.image_side,
        derive_seed(cfg.seed, &[SOURCE_STREAM]),
    );
    params.channels = cfg.spec.channels;
    params.template_seed = p.template_seed;
    if let DataSource::Synthetic(t) = &cfg.data {
        params.noise_std = t.noise_std;
        params.separation = t.separation;
        params.grid = t.grid;
    }
    generate_longtail(&params).map_err(|e| Error::config(e.to_string()))
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Source test accuracy after the last epoch (at init for zero epochs).
    pub source_accuracy: f64,
}

/// Trains the whole mini-ViT with a linear head on balanced source data
/// and keeps the backbone.
pub fn pretrain_backbone(cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<PretrainRun> {
    let ds = source_dataset(cfg)?;
    let p = &cfg.pretrain;
    let mut model = Model::<f32>::new(
        cfg.spec,
        HeadKind::Linear,
        p.classes,
        FineTunePolicy::Full,
        derive_seed(cfg.seed, &[MODEL_STREAM]),
    )?;
    let opts = FitOptions {
        seed: derive_seed(cfg.seed, &[SOURCE_STREAM]),
        threads: cfg.threads,
        schedule: Schedule {
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
            base_epochs: p.epochs.max(1),
            momentum: cfg.schedule.momentum,
            weight_decay: cfg.schedule.weight_decay,
        },
        augment: p.augment,
        crop_scale: cfg.crop_scale,
        offsets: vec![0.0; p.classes],
        tte: None,
        until: None,
    };
    let run = fit(&mut model, &ds, &opts, None, on_epoch)?;
    let source_accuracy = match &run.last_eval {
        Some(r) => r.overall,
        None => pool(cfg.threads)?.install(|| evaluate(&run.model, &ds, None))?.overall,
    };
    Ok(PretrainRun {
        checkpoint: Checkpoint::backbone_only(&run.model, run.checkpoint.epoch, run.checkpoint.step, cfg.seed),
        metrics: run.metrics,
        source_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn one_hand_sgd_step() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        store.set_trainable(w, Trainable::Full);
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(w);
            let one = g.constant(1, 1, vec![-1.0]).unwrap();
            let d = g.add(v, one).unwrap();
            let sq = g.mul(d, d).unwrap();
            let out = g.sum(sq);
            g.backward(out).unwrap()
        };
        assert_eq!(grads.get(w).unwrap(), &[-2.0]);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0);
        sgd.step(&mut store, &grads);
        assert!((store.value(w).data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn masked_entries_and_decay() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.set_trainable(w, Trainable::Masked(vec![false, true]));
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(w);
            let out = g.sum(v);
            g.backward(out).unwrap()
        };
        let mut sgd = Sgd::new(0.5, 0.9, 0.1);
        sgd.step(&mut store, &grads);
        sgd.step(&mut store, &grads);
        let d = store.value(w).data();
        assert_eq!(d[0], 1.0);
        // v1 = 1.1, w1 = 0.45; v2 = 0.99 + 1 + 0.045, w2 = 0.45 − 0.5·2.035
        assert!((d[1] - (0.45 - 0.5 * 2.035)).abs() < 1e-12);
    }

    #[test]
    fn metrics_have_fixed_keys() {
        let m = EpochMetrics { epoch: 1, train_loss: 0.5, overall: 0.25, head: Some(0.5), medium: None, tail: Some(0.0) };
        assert_eq!(m.to_json(), r#"{"epoch":1,"train_loss":0.5,"overall":0.25,"head":0.5,"medium":null,"tail":0.0}"#);
        let back: EpochMetrics = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
