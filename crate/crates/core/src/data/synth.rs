//! Procedurally generated long-tail image classification data.
//!
//! Each class owns a smooth random template: a coarse `grid × grid × C`
//! field drawn uniformly from `[0, 1]`, mixed with a field shared by all
//! classes and upsampled bilinearly to `a × a`. Samples add i.i.d. Gaussian
//! pixel noise to their class template. The shared field controls how much
//! classes overlap.

use rand::Rng;
use rand_distr::StandardNormal;

use super::groups::{group_split, Group, GroupThresholds};
use super::image::Image;
use crate::error::{Error, Result};
use crate::seed::rng_for;

const TEMPLATE_STREAM: u64 = 0x7e3;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Generator parameters for [`generate_longtail`].
#[derive(Clone, Debug, PartialEq)]
pub struct LongTailParams {
    pub classes: usize,
    pub n_max: usize,
    pub imbalance: f64,
    pub test_per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Seed of the per-sample noise.
    pub seed: u64,
    /// Seed of the class templates; datasets sharing it share classes.
    pub template_seed: u64,
    pub noise_std: f32,
    /// Weight of the class-specific field against the shared one, in `(0, 1]`.
    pub separation: f32,
    /// Resolution of the coarse template field.
    pub grid: usize,
}

impl LongTailParams {
    pub fn new(classes: usize, n_max: usize, imbalance: f64, test_per_class: usize, image_side: usize, seed: u64) -> Self {
        Self {
            classes,
            n_max,
            imbalance,
            test_per_class,
            image_side,
            channels: 3,
            seed,
            template_seed: seed,
            noise_std: 0.3,
            separation: 1.0,
            grid: 4,
        }
    }
}

/// Train split with long-tail counts plus a class-balanced test split.
#[derive(Clone, Debug, PartialEq)]
pub struct LongTailDataset {
    pub image_side: usize,
    pub channels: usize,
    pub classes: usize,
    pub counts: Vec<usize>,
    pub train_images: Vec<Image>,
    pub train_labels: Vec<usize>,
    pub test_images: Vec<Image>,
    pub test_labels: Vec<usize>,
    pub groups: Vec<Group>,
}

impl LongTailDataset {
    pub fn regroup(&mut self, thresholds: GroupThresholds) -> Result<()> {
        self.groups = group_split(&self.counts, thresholds)?;
        Ok(())
    }

    pub fn train_len(&self) -> usize {
        self.train_images.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_images.len()
    }
}

/// `n_k = round(n_max · ρ^(−k/(K−1)))`.
pub fn longtail_counts(classes: usize, n_max: usize, imbalance: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
    }
    if !(imbalance >= 1.0) {
        return Err(Error::domain(format!("imbalance ratio {imbalance} must be >= 1")));
    }
    let counts: Vec<usize> = (0..classes)
        .map(|k| {
            let e = -(k as f64) / (classes - 1) as f64;
            (n_max as f64 * imbalance.powf(e)).round() as usize
        })
        .collect();
    if let Some(k) = counts.iter().position(|&n| n < 1) {
        return Err(Error::domain(format!("class {k} would get no training samples")));
    }
    Ok(counts)
}

fn coarse_field<R: Rng>(rng: &mut R, grid: usize, channels: usize) -> Vec<f32> {
    (0..grid * grid * channels).map(|_| rng.random::<f32>()).collect()
}

/// Per-class templates in `[0, 1]^{a×a×C}`.
pub fn class_templates(params: &LongTailParams) -> Result<Vec<Image>> {
    let (g, c, a) = (params.grid.max(1), params.channels, params.image_side);
    if a == 0 || c == 0 {
        return Err(Error::domain("image side and channels must be positive"));
    }
    if !(params.separation > 0.0 && params.separation <= 1.0) {
        return Err(Error::domain(format!("separation {} must lie in (0, 1]", params.separation)));
    }
    let mut shared_rng = rng_for(params.template_seed, &[TEMPLATE_STREAM, u64::MAX]);
    let shared = coarse_field(&mut shared_rng, g, c);
    (0..params.classes)
        .map(|k| {
            let mut rng = rng_for(params.template_seed, &[TEMPLATE_STREAM, k as u64]);
            let own = coarse_field(&mut rng, g, c);
            let beta = params.separation;
            let mixed = own.iter().zip(&shared).map(|(&o, &s)| beta * o + (1.0 - beta) * s).collect();
            Ok(Image::new(g, g, c, mixed)?.resize(a, a))
        })
        .collect()
}

fn noisy_sample(template: &Image, noise_std: f32, seed: u64, parts: &[u64]) -> Image {
    let mut rng = rng_for(seed, parts);
    let data = template
        .data
        .iter()
        .map(|&v| {
            let z: f32 = rng.sample(StandardNormal);
            v + noise_std * z
        })
        .collect();
    Image { data, ..template.clone() }
}

/// Builds the long-tail train split and balanced test split.
pub fn generate_longtail(params: &LongTailParams) -> Result<LongTailDataset> {
    if params.n_max < 1 || (params.n_max as f64) < params.imbalance {
        return Err(Error::domain(format!(
            "n_max {} must be at least the imbalance ratio {}",
            params.n_max, params.imbalance
        )));
    }
    if params.test_per_class == 0 {
        return Err(Error::domain("test split needs at least one sample per class"));
    }
    let counts = longtail_counts(params.classes, params.n_max, params.imbalance)?;
    let templates = class_templates(params)?;

    let mut train_images = Vec::with_capacity(counts.iter().sum());
    let mut train_labels = Vec::with_capacity(train_images.capacity());
    for (k, &n) in counts.iter().enumerate() {
        for i in 0..n {
            train_images.push(noisy_sample(&templates[k], params.noise_std, params.seed, &[TRAIN_STREAM, k as u64, i as u64]));
            train_labels.push(k);
        }
    }
    let mut test_images = Vec::with_capacity(params.classes * params.test_per_class);
    let mut test_labels = Vec::with_capacity(test_images.capacity());
    for (k, template) in templates.iter().enumerate() {
        for i in 0..params.test_per_class {
            test_images.push(noisy_sample(template, params.noise_std, params.seed, &[TEST_STREAM, k as u64, i as u64]));
            test_labels.push(k);
        }
    }
    let groups = group_split(&counts, GroupThresholds::default())?;
    Ok(LongTailDataset {
        image_side: params.image_side,
        channels: params.channels,
        classes: params.classes,
        counts,
        train_images,
        train_labels,
        test_images,
        test_labels,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_profiles() {
        assert_eq!(longtail_counts(5, 40, 1.0).unwrap(), vec![40; 5]);
        let c = longtail_counts(10, 500, 100.0).unwrap();
        assert_eq!((c[0], c[9]), (500, 5));
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(longtail_counts(2, 100, 4.0).unwrap(), vec![100, 25]);
        assert!(longtail_counts(1, 100, 4.0).is_err());
        assert!(longtail_counts(3, 100, 0.5).is_err());
    }

    fn small() -> LongTailParams {
        LongTailParams::new(3, 12, 4.0, 2, 8, 5)
    }

    #[test]
    fn generation_is_reproducible_and_balanced_on_test() {
        let a = generate_longtail(&small()).unwrap();
        let b = generate_longtail(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts, vec![12, 6, 3]);
        assert_eq!(a.train_len(), 21);
        for k in 0..3 {
            assert_eq!(a.test_labels.iter().filter(|&&l| l == k).count(), 2);
        }
        assert!(a.train_images.iter().all(|im| im.height == 8 && im.channels == 3));
    }

    #[test]
    fn train_and_test_draw_different_noise() {
        let d = generate_longtail(&small()).unwrap();
        assert_ne!(d.train_images[0], d.test_images[0]);
    }

    #[test]
    fn n_max_below_ratio_is_rejected() {
        let p = LongTailParams::new(3, 3, 4.0, 2, 8, 5);
        assert!(matches!(generate_longtail(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn templates_stay_in_unit_range() {
        for t in class_templates(&small()).unwrap() {
            assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn template_seed_selects_classes() {
        let mut p = small();
        let base = class_templates(&p).unwrap();
        p.seed = 99;
        assert_eq!(class_templates(&p).unwrap(), base);
        p.template_seed = 100;
        assert_ne!(class_templates(&p).unwrap(), base);
    }
}
