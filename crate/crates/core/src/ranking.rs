//! Retrieval of similar unlabeled images: pseudo-label with the segmenter,
//! color masks by per-class mean intensity, rank by mean squared error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{GrayImage, SegMask, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::networks::Segmenter;
use crate::synthdata::{DatasetIndex, Split};

pub const CACHE_ENV: &str = "SEG2EYE_CACHE_DIR";

/// Mean internal intensity of every class over a labeled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans(pub [f32; NUM_CLASSES]);

const FIXED_POINT: f64 = (1u64 << 60) as f64;

/// Pooled per-class mean over `(image, mask)` pairs. Sums are accumulated
/// in fixed point so the result does not depend on pair order.
pub fn compute_class_means<'a>(pairs: impl IntoIterator<Item = (&'a GrayImage, &'a SegMask)>) -> Result<ClassMeans> {
    let mut sums = [0i128; NUM_CLASSES];
    let mut counts = [0u64; NUM_CLASSES];
    for (img, mask) in pairs {
        if img.height() != mask.height() || img.width() != mask.width() {
            return Err(Error::Shape("image and mask resolution differ".into()));
        }
        for (&v, &c) in img.data().iter().zip(mask.data()) {
            sums[c as usize] += (v as f64 * FIXED_POINT).round() as i128;
            counts[c as usize] += 1;
        }
    }
    let mut means = [0f32; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] == 0 {
            return Err(Error::MissingClass(CLASS_NAMES[c]));
        }
        means[c] = (sums[c] as f64 / FIXED_POINT / counts[c] as f64) as f32;
    }
    Ok(ClassMeans(means))
}

/// Replace every pixel by the mean intensity of its class.
pub fn colorize_mask(mask: &SegMask, means: &ClassMeans) -> GrayImage {
    let data = mask.data().iter().map(|&c| means.0[c as usize]).collect();
    GrayImage::new(mask.height(), mask.width(), data).expect("mask dimensions are consistent")
}

/// Mean squared difference of two images.
pub fn mask_mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    let ss: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(ss / a.data().len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub img: String,
    pub score: f64,
    pub rank: usize,
}

/// Candidates ordered by ascending score, ties broken by ascending path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList(pub Vec<RankedEntry>);

impl RankedList {
    pub fn top(&self, n: usize) -> &[RankedEntry] {
        &self.0[..n.min(self.0.len())]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rank candidates whose pseudo-labels are already known.
pub fn rank_by_masks(target: &SegMask, candidates: &[(String, SegMask)], means: &ClassMeans) -> Result<RankedList> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let colored = colorize_mask(target, means);
    let mut scored = candidates
        .iter()
        .map(|(path, m)| Ok((path.clone(), mask_mse(&colored, &colorize_mask(m, means))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList(
        scored.into_iter().enumerate().map(|(i, (img, score))| RankedEntry { img, score, rank: i + 1 }).collect(),
    ))
}

/// Segmenter-backed pseudo-labels with an on-disk cache laid out as
/// `<cache_dir>/<checkpoint hash>/<image relpath>.png`.
pub struct PseudoLabeler<'a> {
    segmenter: &'a Segmenter<f32>,
    dataset_root: PathBuf,
    cache: Option<PathBuf>,
}

impl<'a> PseudoLabeler<'a> {
    pub fn new(segmenter: &'a Segmenter<f32>, checkpoint_hash: &str, dataset_root: &Path, cache_dir: Option<&Path>) -> Self {
        PseudoLabeler {
            segmenter,
            dataset_root: dataset_root.to_path_buf(),
            cache: cache_dir.map(|d| d.join(checkpoint_hash)),
        }
    }

    /// Cache directory from `SEG2EYE_CACHE_DIR`, falling back to `<dataset>/cache`.
    pub fn default_cache_dir(dataset_root: &Path) -> PathBuf {
        std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| dataset_root.join("cache"))
    }

    fn cache_path(&self, rel: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|d| d.join(format!("{rel}.png")))
    }

    /// Pseudo-labels for dataset-relative image paths, reading cached
    /// entries and segmenting the rest.
    pub fn labels(&self, rels: &[&str]) -> Result<Vec<SegMask>> {
        let mut out: Vec<Option<SegMask>> = Vec::with_capacity(rels.len());
        for rel in rels {
            out.push(match self.cache_path(rel) {
                Some(p) if p.exists() => Some(SegMask::read_png(&p)?),
                _ => None,
            });
        }
        let missing: Vec<usize> = (0..rels.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(16) {
            let images = chunk
                .iter()
                .map(|&i| GrayImage::read_png(&self.dataset_root.join(rels[i])))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&GrayImage> = images.iter().collect();
            for (&i, mask) in chunk.iter().zip(self.segmenter.predict(&refs)?) {
                if let Some(p) = self.cache_path(rels[i]) {
                    mask.write_png(&p)?;
                }
                out[i] = Some(mask);
            }
        }
        Ok(out.into_iter().map(|m| m.expect("filled")).collect())
    }

    /// Pseudo-label `pool` and rank it against `target`.
    pub fn rank(&self, target: &SegMask, pool: &[&str], means: &ClassMeans) -> Result<RankedList> {
        if pool.is_empty() {
            return Err(Error::Empty("candidate pool"));
        }
        let labels = self.labels(pool)?;
        let candidates: Vec<(String, SegMask)> = pool.iter().map(|s| s.to_string()).zip(labels).collect();
        rank_by_masks(target, &candidates, means)
    }
}

/// Class means over the labeled training split of a dataset.
pub fn dataset_class_means(index: &DatasetIndex, root: &Path) -> Result<ClassMeans> {
    let mut pairs = Vec::new();
    for s in index.labeled(Split::Train) {
        let mask = s.record.mask.as_ref().expect("labeled");
        pairs.push((GrayImage::read_png(&root.join(&s.record.img))?, SegMask::read_png(&root.join(mask))?));
    }
    compute_class_means(pairs.iter().map(|(i, m)| (i, m)))
}

/// Ranked same-person candidate lists for every labeled record, keyed by
/// the record's image path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rankings(pub BTreeMap<String, RankedList>);

impl Rankings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("rankings serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, img: &str) -> Option<&RankedList> {
        self.0.get(img)
    }
}

/// Rank every labeled record's person pool.
pub fn rank_dataset(index: &DatasetIndex, root: &Path, labeler: &PseudoLabeler<'_>, means: &ClassMeans) -> Result<Rankings> {
    let mut out = BTreeMap::new();
    for person in &index.persons {
        let pool: Vec<&str> = person.records.iter().filter(|r| r.mask.is_none()).map(|r| r.img.as_str()).collect();
        if pool.is_empty() {
            continue;
        }
        let labels = labeler.labels(&pool)?;
        let candidates: Vec<(String, SegMask)> = pool.iter().map(|s| s.to_string()).zip(labels).collect();
        for r in &person.records {
            if let Some(mask) = &r.mask {
                let target = SegMask::read_png(&root.join(mask))?;
                out.insert(r.img.clone(), rank_by_masks(&target, &candidates, means)?);
            }
        }
    }
    Ok(Rankings(out))
}
