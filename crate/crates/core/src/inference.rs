//! Test-time ensembling, group-wise evaluation and representation diagnostics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Group, Image, LongTailDataset};
use crate::error::{Error, Result};
use crate::head::class_means;
use crate::numerics::{cosine, l2_norm, log_softmax, NORM_FLOOR};

pub const DEFAULT_EXPANDED_SIZE: usize = 24;

/// Anything that maps an image to class logits.
pub trait Classifier: Sync {
    fn logits(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Resize to `(a+e)²`, then the center crop followed by the top-left,
/// top-right, bottom-left and bottom-right corners.
pub fn five_crops(image: &Image, a: usize, e: usize) -> Result<[Image; 5]> {
    let s = a + e;
    let big = image.resize(s, s);
    let c = e / 2;
    Ok([
        big.crop(c, c, a, a)?,
        big.crop(0, 0, a, a)?,
        big.crop(0, e, a, a)?,
        big.crop(e, 0, a, a)?,
        big.crop(e, e, a, a)?,
    ])
}

pub fn crop_offsets(e: usize) -> [(usize, usize); 5] {
    let c = e / 2;
    [(c, c), (0, 0), (0, e), (e, 0), (e, e)]
}

/// Returns a warning when `e` is a multiple of the patch size.
pub fn expanded_size_warning(e: usize, patch: usize) -> Option<String> {
    (e > 0 && patch > 0 && e % patch == 0)
        .then(|| format!("expanded size {e} is a multiple of the patch size {patch}; crops will align with the patch grid"))
}

/// Mean of the per-crop log-probability vectors.
pub fn tte_predict(model: &dyn Classifier, image: &Image, a: usize, e: usize) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for crop in five_crops(image, a, e)? {
        let lp = log_softmax(&model.logits(&crop)?)?;
        match acc.as_mut() {
            None => acc = Some(lp),
            Some(v) => v.iter_mut().zip(&lp).for_each(|(x, y)| *x += y),
        }
    }
    let mut v = acc.expect("five crops");
    v.iter_mut().for_each(|x| *x /= 5.0);
    Ok(v)
}

/// Single-view log-probabilities.
pub fn predict(model: &dyn Classifier, image: &Image) -> Result<Vec<f64>> {
    log_softmax(&model.logits(image)?)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
    pub per_class: Vec<f64>,
    /// Test samples per group, in head/medium/tail order.
    pub group_samples: [usize; 3],
}

impl EvalReport {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Head => self.head,
            Group::Medium => self.medium,
            Group::Tail => self.tail,
        }
    }

    pub fn to_records(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"));
        let mut r = vec![
            ("overall".to_string(), format!("{:.6}", self.overall)),
            ("head".to_string(), opt(self.head)),
            ("medium".to_string(), opt(self.medium)),
            ("tail".to_string(), opt(self.tail)),
        ];
        for (g, n) in Group::ALL.iter().zip(self.group_samples) {
            r.push((format!("samples.{g}"), n.to_string()));
        }
        for (k, a) in self.per_class.iter().enumerate() {
            r.push((format!("class.{k}"), format!("{a:.6}")));
        }
        r
    }
}

/// Accuracy summary from predicted and true labels.
pub fn summarize(predictions: &[usize], labels: &[usize], groups: &[Group]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::domain("nothing to evaluate"));
    }
    let k = groups.len();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= k {
            return Err(Error::domain(format!("label {y} out of range for {k} classes")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let per_class: Vec<f64> =
        hits.iter().zip(&totals).map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect();
    let mut group_acc = [None; 3];
    let mut group_samples = [0; 3];
    for (gi, g) in Group::ALL.iter().enumerate() {
        let members: Vec<usize> = (0..k).filter(|&c| groups[c] == *g && totals[c] > 0).collect();
        group_samples[gi] = members.iter().map(|&c| totals[c]).sum();
        if !members.is_empty() {
            group_acc[gi] = Some(members.iter().map(|&c| per_class[c]).sum::<f64>() / members.len() as f64);
        }
    }
    Ok(EvalReport {
        overall: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        head: group_acc[0],
        medium: group_acc[1],
        tail: group_acc[2],
        per_class,
        group_samples,
    })
}

/// Argmax predictions over the test split, single-view or five-crop (`tte = Some(e)`).
pub fn test_predictions(model: &dyn Classifier, ds: &LongTailDataset, tte: Option<usize>) -> Result<Vec<usize>> {
    ds.test_images
        .par_iter()
        .map(|im| {
            let lp = match tte {
                Some(e) => tte_predict(model, im, ds.image_side, e)?,
                None => predict(model, im)?,
            };
            Ok(argmax(&lp))
        })
        .collect()
}

pub fn evaluate(model: &dyn Classifier, ds: &LongTailDataset, tte: Option<usize>) -> Result<EvalReport> {
    summarize(&test_predictions(model, ds, tte)?, &ds.test_labels, &ds.groups)
}

/// Cosine similarity between class-mean features.
pub fn interclass_similarity(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<Vec<f64>>> {
    let means = class_means(features, labels, classes)?;
    if let Some(k) = means.iter().position(|m| l2_norm(m) < NORM_FLOOR) {
        return Err(Error::numeric(format!("class {k} has a zero-norm mean feature")));
    }
    Ok((0..classes)
        .map(|i| (0..classes).map(|j| if i == j { 1.0 } else { cosine(&means[i], &means[j]).clamp(-1.0, 1.0) }).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassShift {
    pub class: usize,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    /// `|mean(train) − mean(test)|` of the similarities to the train class mean.
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub classes: Vec<ClassShift>,
    pub warnings: Vec<String>,
}

impl ShiftReport {
    pub fn shift_of(&self, class: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class).map(|c| c.shift)
    }

    /// Mean shift over the given classes that were present.
    pub fn mean_shift(&self, classes: &[usize]) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.shift_of(c)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-class similarity of each train and test sample to its train class mean.
pub fn intraclass_shift(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
) -> Result<ShiftReport> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::shape("feature and label counts differ"));
    }
    let mut out = ShiftReport { classes: Vec::new(), warnings: Vec::new() };
    for k in 0..classes {
        let tr: Vec<&Vec<f64>> = train.iter().zip(train_labels).filter(|(_, &y)| y == k).map(|(f, _)| f).collect();
        let te: Vec<&Vec<f64>> = test.iter().zip(test_labels).filter(|(_, &y)| y == k).map(|(f, _)| f).collect();
        if tr.is_empty() || te.is_empty() {
            out.warnings.push(format!("class {k} is missing from the {} split; skipped", if tr.is_empty() { "train" } else { "test" }));
            continue;
        }
        let d = tr[0].len();
        let mut m = vec![0.0; d];
        for f in &tr {
            m.iter_mut().zip(f.iter()).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= tr.len() as f64);
        let tr_s: Vec<f64> = tr.iter().map(|f| cosine(f, &m)).collect();
        let te_s: Vec<f64> = te.iter().map(|f| cosine(f, &m)).collect();
        let shift = (mean(&tr_s) - mean(&te_s)).abs();
        out.classes.push(ClassShift { class: k, train: tr_s, test: te_s, shift });
    }
    Ok(out)
}

pub fn format_records(records: &[(String, String)]) -> String {
    records.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut h = vec![0; bins];
    let w = (hi - lo) / bins as f64;
    for &v in values {
        let i = (((v - lo) / w).floor().max(0.0) as usize).min(bins - 1);
        h[i] += 1;
    }
    h
}

/// `class,split,bin_lo,bin_hi,count` rows over `[-1, 1]`.
pub fn shift_histogram_csv(report: &ShiftReport, bins: usize) -> String {
    let mut s = String::from("class,split,bin_lo,bin_hi,count\n");
    let w = 2.0 / bins as f64;
    for c in &report.classes {
        for (split, vals) in [("train", &c.train), ("test", &c.test)] {
            for (i, n) in histogram(vals, bins, -1.0, 1.0).into_iter().enumerate() {
                let lo = -1.0 + i as f64 * w;
                let _ = writeln!(s, "{},{split},{lo:.4},{:.4},{n}", c.class, lo + w);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupThresholds;

    struct Constant(Vec<f64>);

    impl Classifier for Constant {
        fn logits(&self, _: &Image) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Logits from the mean of channel values in the four quadrants.
    struct Quadrants;

    impl Classifier for Quadrants {
        fn logits(&self, im: &Image) -> Result<Vec<f64>> {
            let h = im.height / 2;
            let mut z = vec![0.0; 4];
            for y in 0..im.height {
                for x in 0..im.width {
                    z[(y / h.max(1)).min(1) * 2 + (x / h.max(1)).min(1)] += im.at(y, x, 0) as f64;
                }
            }
            Ok(z)
        }
    }

    fn ramp(side: usize) -> Image {
        Image::new(side, side, 1, (0..side * side).map(|i| (i as f32 * 0.13).sin()).collect()).unwrap()
    }

    #[test]
    fn crop_geometry() {
        assert_eq!(crop_offsets(2), [(1, 1), (0, 0), (0, 2), (2, 0), (2, 2)]);
        let im = ramp(4);
        for c in five_crops(&im, 4, 0).unwrap() {
            assert_eq!(c, im);
        }
        let crops = five_crops(&im, 4, 2).unwrap();
        let big = im.resize(6, 6);
        assert_eq!(crops[2], big.crop(0, 2, 4, 4).unwrap());
        assert_eq!(DEFAULT_EXPANDED_SIZE, 24);
        assert!(expanded_size_warning(16, 16).is_some());
        assert!(expanded_size_warning(24, 16).is_none());
    }

    #[test]
    fn tte_degenerate_cases() {
        let c = Constant(vec![0.5, -1.0, 2.0]);
        let lp = tte_predict(&c, &ramp(8), 8, 4).unwrap();
        let single = predict(&c, &ramp(8)).unwrap();
        for (a, b) in lp.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = tte_predict(&Quadrants, &ramp(8), 8, 0).unwrap();
        for (a, b) in q.iter().zip(predict(&Quadrants, &ramp(8)).unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_counted_report() {
        let groups = vec![Group::Head, Group::Medium, Group::Tail];
        let r = summarize(&[0, 0, 1, 0, 1, 0], &[0, 0, 1, 1, 2, 2], &groups).unwrap();
        assert_eq!(r.per_class, vec![1.0, 0.5, 0.0]);
        assert!((r.overall - 0.5).abs() < 1e-15);
        assert_eq!((r.head, r.medium, r.tail), (Some(1.0), Some(0.5), Some(0.0)));
        let r = summarize(&[0, 0, 0, 0], &[0, 0, 1, 1], &[Group::Head, Group::Head]).unwrap();
        assert_eq!((r.overall, r.medium, r.tail), (0.5, None, None));
    }

    #[test]
    fn constant_predictor_gets_chance() {
        let mut ds = crate::data::generate_longtail(&crate::data::LongTailParams::new(4, 4, 2.0, 3, 4, 1)).unwrap();
        ds.regroup(GroupThresholds { hi: 3, lo: 2 }).unwrap();
        let r = evaluate(&Constant(vec![0.0, 0.0, 3.0, 0.0]), &ds, None).unwrap();
        assert!((r.overall - 0.25).abs() < 1e-15);
        let mean: f64 = r.per_class.iter().sum::<f64>() / 4.0;
        assert!((mean - r.overall).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let s = 0.5f64.sqrt();
        let m = interclass_similarity(&[vec![1.0, 0.0], vec![s, s]], &[0, 1], 2).unwrap();
        assert!((m[0][1] - s).abs() < 1e-12 && m[0][1] == m[1][0] && m[0][0] == 1.0);
        let eye = interclass_similarity(&[vec![2.0, 0.0], vec![0.0, 3.0]], &[0, 1], 2).unwrap();
        assert_eq!(eye, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(interclass_similarity(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[0, 0], 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn shift_examples() {
        let m = vec![1.0, 0.0];
        let sixty = vec![0.5, 3f64.sqrt() / 2.0];
        let r = intraclass_shift(&[m.clone(), m.clone()], &[0, 0], &[sixty.clone()], &[0], 1).unwrap();
        assert!((r.classes[0].shift - 0.5).abs() < 1e-12);
        let same = intraclass_shift(&[m.clone(), sixty.clone()], &[0, 0], &[m.clone(), sixty], &[0, 0], 1).unwrap();
        assert_eq!(same.classes[0].shift, 0.0);
        let single = intraclass_shift(&[m.clone()], &[0], &[m], &[1], 2).unwrap();
        assert_eq!(single.warnings.len(), 2);
        assert!(single.classes.is_empty());
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(histogram(&[-1.0, -0.1, 0.0, 0.99, 1.0], 4, -1.0, 1.0), vec![1, 1, 1, 2]);
    }
}
