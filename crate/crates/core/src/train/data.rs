use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::domain::{GrayImage, SegMask};
use crate::error::{Error, Result};
use crate::ranking::{RankedList, Rankings};
use crate::synthdata::{DatasetIndex, Split};

/// A labeled record loaded into memory.
#[derive(Clone, Debug)]
pub struct LabeledItem {
    pub person: u64,
    pub img: String,
    pub image: GrayImage,
    pub mask: SegMask,
}

pub fn load_labeled(index: &DatasetIndex, root: &Path, split: Split) -> Result<Vec<LabeledItem>> {
    index
        .labeled(split)
        .into_iter()
        .map(|s| {
            Ok(LabeledItem {
                person: s.person,
                img: s.record.img.clone(),
                image: GrayImage::read_png(&root.join(&s.record.img))?,
                mask: SegMask::read_png(&root.join(s.record.mask.as_ref().expect("labeled")))?,
            })
        })
        .collect()
}

/// Images referenced by paths, loaded once.
#[derive(Default)]
pub struct ImageCache {
    root: PathBuf,
    images: BTreeMap<String, GrayImage>,
}

impl ImageCache {
    pub fn new(root: &Path) -> Self {
        ImageCache { root: root.to_path_buf(), images: BTreeMap::new() }
    }

    pub fn load(&mut self, rel: &str) -> Result<&GrayImage> {
        if !self.images.contains_key(rel) {
            let img = GrayImage::read_png(&self.root.join(rel))?;
            self.images.insert(rel.to_string(), img);
        }
        Ok(&self.images[rel])
    }

    pub fn get(&self, rel: &str) -> &GrayImage {
        &self.images[rel]
    }
}

/// The style pool of a target: its top `top_n` ranked candidates, without the
/// target itself.
pub fn style_pool(list: &RankedList, target: &str, top_n: usize) -> Vec<String> {
    list.0.iter().filter(|e| e.img != target).take(top_n).map(|e| e.img.clone()).collect()
}

/// `k` uniform picks from `pool`: without replacement when the pool is large
/// enough, with replacement otherwise.
pub fn sample_styles<'a>(pool: &'a [String], k: usize, rng: &mut impl Rng) -> Vec<&'a str> {
    if pool.len() >= k {
        sample(rng, pool.len(), k).into_iter().map(|i| pool[i].as_str()).collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect()
    }
}

pub fn load_rankings(path: Option<&Path>) -> Result<Rankings> {
    let path = path.ok_or_else(|| Error::Invalid("this stage needs `rankings` in the training config".into()))?;
    Rankings::load(path)
}

/// JSON-lines metrics file.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    /// Truncates unless `append` is set (used when resuming).
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Pooled intersection-over-union per class, averaged over classes that
/// occur in either the predictions or the ground truth.
pub fn mean_iou(pred: &[SegMask], truth: &[SegMask], num_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} masks", pred.len(), truth.len())));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, t) in pred.iter().zip(truth) {
        if p.height() != t.height() || p.width() != t.width() {
            return Err(Error::Shape("prediction and mask resolution differ".into()));
        }
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let present: Vec<f64> = (0..num_classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::RankedEntry;

    #[test]
    fn iou_examples() {
        let a = SegMask::from_rows(&[&[0, 0], &[1, 1]]).unwrap();
        assert_eq!(mean_iou(std::slice::from_ref(&a), std::slice::from_ref(&a), 4).unwrap(), 1.0);
        let b = SegMask::from_rows(&[&[0, 1], &[1, 1]]).unwrap();
        // class 0: 1/2, class 1: 2/3
        assert!((mean_iou(&[b], &[a], 4).unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn style_sampling() {
        let list = RankedList(
            ["t", "a", "b", "c"].iter().enumerate().map(|(i, s)| RankedEntry { img: s.to_string(), score: i as f64, rank: i + 1 }).collect(),
        );
        let pool = style_pool(&list, "t", 2);
        assert_eq!(pool, ["a", "b"]);
        let mut rng = crate::domain::RngSeed(1).rng();
        let picks = sample_styles(&pool, 2, &mut rng);
        assert_eq!(picks.len(), 2);
        assert_ne!(picks[0], picks[1]);
        assert_eq!(sample_styles(&pool, 5, &mut rng).len(), 5);
    }
}
