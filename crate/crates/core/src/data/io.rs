//! `LFDS` dataset container.
//!
//! Layout (little-endian): magic `LFDS`, version `u16`, then `a, C, K,
//! n_train, n_test` as `u32`, `K` per-class train counts as `u32`, all
//! train then test images as `f32` (`a·a·C` each, row-major HWC), and all
//! train then test labels as `u32`.

use std::fs;
use std::path::Path;

use super::groups::{group_split, GroupThresholds};
use super::image::Image;
use super::synth::LongTailDataset;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"LFDS";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(ds: &LongTailDataset) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    for v in [ds.image_side, ds.channels, ds.classes, ds.train_len(), ds.test_len()] {
        w.usize32(v)?;
    }
    for &n in &ds.counts {
        w.usize32(n)?;
    }
    for im in ds.train_images.iter().chain(&ds.test_images) {
        for &v in &im.data {
            w.f32(v);
        }
    }
    for &l in ds.train_labels.iter().chain(&ds.test_labels) {
        w.usize32(l)?;
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8], thresholds: GroupThresholds) -> Result<LongTailDataset> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let a = r.usize32()?;
    let c = r.usize32()?;
    let k = r.usize32()?;
    let n_train = r.usize32()?;
    let n_test = r.usize32()?;
    if a == 0 || c == 0 || k < 2 {
        return Err(Error::integrity(format!("invalid dataset header a={a} C={c} K={k}")));
    }
    let counts: Vec<usize> = (0..k).map(|_| r.usize32()).collect::<Result<_>>()?;
    if counts.iter().sum::<usize>() != n_train {
        return Err(Error::integrity("per-class counts do not sum to the train size"));
    }
    let px = a * a * c;
    let mut images = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        images.push(Image::new(a, a, c, r.f32s(px)?)?);
    }
    let labels: Vec<usize> = (0..n_train + n_test).map(|_| r.usize32()).collect::<Result<_>>()?;
    r.finish()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::integrity(format!("label {bad} out of range for {k} classes")));
    }
    let test_images = images.split_off(n_train);
    let mut train_labels = labels;
    let test_labels = train_labels.split_off(n_train);
    for (cls, &n) in counts.iter().enumerate() {
        if train_labels.iter().filter(|&&l| l == cls).count() != n {
            return Err(Error::integrity(format!("class {cls} label count differs from its header count")));
        }
    }
    let groups = group_split(&counts, thresholds)?;
    Ok(LongTailDataset {
        image_side: a,
        channels: c,
        classes: k,
        counts,
        train_images: images,
        train_labels,
        test_images,
        test_labels,
        groups,
    })
}

pub fn save_dataset(path: &Path, ds: &LongTailDataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path, thresholds: GroupThresholds) -> Result<LongTailDataset> {
    decode_dataset(&fs::read(path)?, thresholds)
}
