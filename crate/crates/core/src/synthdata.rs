//! Procedural near-eye dataset: per-person appearance, per-image pose, a
//! renderer producing pixel-aligned (image, mask) pairs, and the on-disk
//! layout with its JSON index.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{GrayImage, RngSeed, SegMask, BACKGROUND, IRIS, PUPIL, SCLERA};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeMode {
    Left,
    Right,
}

impl EyeMode {
    fn sign(self) -> f64 {
        match self {
            EyeMode::Left => 1.0,
            EyeMode::Right => -1.0,
        }
    }
}

/// Appearance of one synthetic person.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonStyleParams {
    pub base_brightness: f64,
    pub iris_shade: f64,
    pub sclera_texture_amp: f64,
    pub skin_tone: f64,
    pub iris_radius_ratio: f64,
    pub mode: EyeMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyePose {
    /// Iris offset as a fraction of image width, in `[-0.3, 0.3]`.
    pub gaze_x: f64,
    /// Iris offset as a fraction of image height, in `[-0.3, 0.3]`.
    pub gaze_y: f64,
    pub eyelid_openness: f64,
}

impl EyePose {
    pub const CENTERED: EyePose = EyePose { gaze_x: 0.0, gaze_y: 0.0, eyelid_openness: 1.0 };

    /// Horizontal mirror image of this pose.
    pub fn mirrored(self) -> EyePose {
        EyePose { gaze_x: -self.gaze_x, ..self }
    }

    pub fn sample(rng: &mut impl Rng) -> EyePose {
        EyePose {
            gaze_x: rng.gen_range(-0.3..=0.3),
            gaze_y: rng.gen_range(-0.3..=0.3),
            eyelid_openness: rng.gen_range(0.3..=1.0),
        }
    }

    /// This pose moved by the given offsets, clipped to the valid ranges.
    pub fn perturbed(self, dx: f64, dy: f64, dopen: f64) -> EyePose {
        EyePose {
            gaze_x: (self.gaze_x + dx).clamp(-0.3, 0.3),
            gaze_y: (self.gaze_y + dy).clamp(-0.3, 0.3),
            eyelid_openness: (self.eyelid_openness + dopen).clamp(0.3, 1.0),
        }
    }
}

/// Deterministic appearance of person `person_id`; even ids are left eyes.
pub fn sample_person(person_id: u64, seed: RngSeed) -> PersonStyleParams {
    let mut rng = seed.derive(&[0x9E45, person_id]).rng();
    PersonStyleParams {
        base_brightness: rng.gen_range(0.2..=0.8),
        iris_shade: rng.gen_range(0.1..=0.9),
        sclera_texture_amp: rng.gen_range(0.0..=0.15),
        skin_tone: rng.gen_range(0.2..=0.9),
        iris_radius_ratio: rng.gen_range(0.35..=0.55),
        mode: if person_id.is_multiple_of(2) { EyeMode::Left } else { EyeMode::Right },
    }
}

const EYE_HALF_WIDTH: f64 = 0.85;
const UPPER_LID: f64 = 0.7;
const LOWER_LID: f64 = 0.5;
const LID_SKEW: f64 = 0.25;
const IRIS_SCALE: f64 = 0.6;
const PUPIL_RATIO: f64 = 0.45;

struct Geometry {
    skew: f64,
    open: f64,
    cx: f64,
    cy: f64,
    r_iris: f64,
    r_pupil: f64,
}

impl Geometry {
    fn new(style: &PersonStyleParams, pose: &EyePose) -> Self {
        let r_iris = style.iris_radius_ratio * IRIS_SCALE;
        Geometry {
            skew: LID_SKEW * style.mode.sign(),
            open: pose.eyelid_openness,
            cx: 2.0 * pose.gaze_x,
            cy: 2.0 * pose.gaze_y,
            r_iris,
            r_pupil: PUPIL_RATIO * r_iris,
        }
    }

    /// Whether `(u, v)` lies between the eyelids.
    fn visible(&self, u: f64, v: f64) -> bool {
        let t = u / EYE_HALF_WIDTH;
        if t.abs() >= 1.0 {
            return false;
        }
        let bulge = 1.0 - t * t;
        let top = -self.open * UPPER_LID * bulge * (1.0 + self.skew * u);
        let bottom = LOWER_LID * bulge * (1.0 - 0.5 * self.skew * u);
        v > top && v < bottom
    }

    fn iris_dist(&self, u: f64, v: f64) -> f64 {
        ((u - self.cx).powi(2) + (v - self.cy).powi(2)).sqrt()
    }

    fn class(&self, u: f64, v: f64) -> u8 {
        if !self.visible(u, v) {
            return BACKGROUND;
        }
        let d = self.iris_dist(u, v);
        if d < self.r_pupil {
            PUPIL
        } else if d < self.r_iris {
            IRIS
        } else {
            SCLERA
        }
    }
}

/// Pixel-center coordinate in `(-1, 1)`, symmetric under mirroring.
fn coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0 - n as f64) / n as f64
}

/// Sclera and iris texture patterns are fixed per person.
fn texture_seed(style: &PersonStyleParams) -> RngSeed {
    let bits = [
        style.base_brightness,
        style.iris_shade,
        style.sclera_texture_amp,
        style.skin_tone,
        style.iris_radius_ratio,
    ]
    .map(f64::to_bits);
    RngSeed(0x7E47).derive(&bits)
}

/// Render one eye. The mask is a function of `(style, pose)` alone; the
/// image adds sensor noise drawn from `noise`.
pub fn render_eye(style: &PersonStyleParams, pose: &EyePose, h: usize, w: usize, noise: RngSeed) -> Result<(GrayImage, SegMask)> {
    if h < 32 || w < 32 {
        return Err(Error::Invalid(format!("render size {h}x{w} below the 32x32 minimum")));
    }
    let geo = Geometry::new(style, pose);
    let mut pattern = texture_seed(style).rng();
    let phases: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (pattern.gen_range(2.0..6.0), pattern.gen_range(2.0..6.0), pattern.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let iris_spokes = pattern.gen_range(5..9) as f64;
    let mut rng = noise.rng();
    let gain = 0.5 + style.base_brightness;
    let mut mask = Vec::with_capacity(h * w);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = coord(y, h);
        for x in 0..w {
            let u = coord(x, w);
            let class = geo.class(u, v);
            let sensor = 0.02 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let base = match class {
                BACKGROUND => style.skin_tone * gain - 0.04 * v,
                SCLERA => {
                    let tex: f64 = phases.iter().map(|&(fu, fv, ph)| (fu * u + fv * v + ph).sin()).sum::<f64>() / 3.0;
                    0.72 + 0.15 * style.base_brightness + style.sclera_texture_amp * tex
                }
                IRIS => {
                    let angle = (v - geo.cy).atan2(u - geo.cx);
                    0.1 + 0.8 * style.iris_shade + 0.04 * (iris_spokes * angle).cos()
                }
                _ => 0.04 + 0.06 * style.base_brightness,
            };
            let shading = 0.05 * style.mode.sign() * u - 0.04 * (u * u + v * v);
            let value = (base + shading + sensor).clamp(0.0, 1.0);
            mask.push(class);
            pixels.push((2.0 * value - 1.0) as f32);
        }
    }
    Ok((GrayImage::new(h, w, pixels)?, SegMask::from_raw(h, w, mask)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub img: String,
    /// `None` for unlabeled records.
    pub mask: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonEntry {
    pub id: u64,
    pub mode: EyeMode,
    pub records: Vec<Record>,
}

/// Contents of `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub persons: Vec<PersonEntry>,
}

/// A record together with its owner, as handed to the training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<'a> {
    pub person: u64,
    pub record: &'a Record,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("index.json");
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn person(&self, id: u64) -> Option<&PersonEntry> {
        self.persons.iter().find(|p| p.id == id)
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> {
        self.persons.iter().flat_map(|p| p.records.iter().map(move |r| Sample { person: p.id, record: r }))
    }

    /// Labeled records of one split.
    pub fn labeled(&self, split: Split) -> Vec<Sample<'_>> {
        self.samples().filter(|s| s.record.mask.is_some() && s.record.split == split).collect()
    }

    /// Unlabeled images of one person, the retrieval pool for that person.
    pub fn unlabeled_pool(&self, person: u64) -> Vec<&Record> {
        self.person(person).map(|p| p.records.iter().filter(|r| r.mask.is_none()).collect()).unwrap_or_default()
    }

    pub fn owner_of(&self, img: &str) -> Option<u64> {
        self.samples().find(|s| s.record.img == img).map(|s| s.person)
    }
}

/// Path of the withheld mask for an unlabeled image `p<id>/img_<n>.png`.
pub fn groundtruth_path(img_rel: &str) -> String {
    format!("groundtruth/{}", img_rel.replace("img_", "mask_"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub out_dir: PathBuf,
    pub persons: usize,
    pub images_per_person: usize,
    pub labeled_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Put whole persons into val/test instead of splitting each person's records.
    pub identity_disjoint: bool,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            out_dir: PathBuf::from("data"),
            persons: 10,
            images_per_person: 20,
            labeled_fraction: 0.5,
            val_fraction: 0.15,
            test_fraction: 0.15,
            identity_disjoint: false,
            resolution: 64,
            seed: 0,
        }
    }
}

fn split_counts(n: usize, val: f64, test: f64) -> (usize, usize) {
    let v = (n as f64 * val).round() as usize;
    let t = ((n as f64 * test).round() as usize).min(n - v.min(n));
    (v.min(n), t)
}

/// Pose of image `n` of person `person`.
pub fn record_pose(seed: RngSeed, person: u64, n: u64) -> EyePose {
    EyePose::sample(&mut seed.derive(&[0x905E, person, n]).rng())
}

/// Render and write the dataset, returning its index.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetIndex> {
    if cfg.persons == 0 || cfg.images_per_person == 0 {
        return Err(Error::Invalid("persons and images_per_person must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.labeled_fraction) || cfg.val_fraction < 0.0 || cfg.test_fraction < 0.0 || cfg.val_fraction + cfg.test_fraction > 1.0 {
        return Err(Error::Invalid("fractions must lie in [0, 1] and val + test must not exceed 1".into()));
    }
    let seed = RngSeed(cfg.seed);
    let res = cfg.resolution;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let n_labeled = (cfg.images_per_person as f64 * cfg.labeled_fraction).round() as usize;
    let (val_persons, test_persons) = split_counts(cfg.persons, cfg.val_fraction, cfg.test_fraction);
    let mut persons = Vec::with_capacity(cfg.persons);
    for pid in 0..cfg.persons as u64 {
        let style = sample_person(pid, seed);
        let mut rng = seed.derive(&[0x5B1, pid]).rng();
        let mut order: Vec<usize> = (0..cfg.images_per_person).collect();
        order.shuffle(&mut rng);
        let mut labeled = vec![false; cfg.images_per_person];
        order[..n_labeled].iter().for_each(|&i| labeled[i] = true);
        let mut split = vec![Split::Train; cfg.images_per_person];
        if cfg.identity_disjoint {
            let rank = cfg.persons - 1 - pid as usize;
            let s = if rank < test_persons {
                Split::Test
            } else if rank < test_persons + val_persons {
                Split::Val
            } else {
                Split::Train
            };
            split.iter_mut().for_each(|x| *x = s);
        } else {
            for group in [true, false] {
                let idx: Vec<usize> = order.iter().copied().filter(|&i| labeled[i] == group).collect();
                let (v, t) = split_counts(idx.len(), cfg.val_fraction, cfg.test_fraction);
                idx[..v].iter().for_each(|&i| split[i] = Split::Val);
                idx[v..v + t].iter().for_each(|&i| split[i] = Split::Test);
            }
        }
        let mut records = Vec::with_capacity(cfg.images_per_person);
        for n in 0..cfg.images_per_person {
            let pose = record_pose(seed, pid, n as u64);
            let (img, mask) = render_eye(&style, &pose, res, res, seed.derive(&[0x7E47, pid, n as u64]))?;
            let img_rel = format!("p{pid}/img_{n}.png");
            img.write_png(&cfg.out_dir.join(&img_rel))?;
            let mask_rel = if labeled[n] {
                let rel = format!("p{pid}/mask_{n}.png");
                mask.write_png(&cfg.out_dir.join(&rel))?;
                Some(rel)
            } else {
                mask.write_png(&cfg.out_dir.join(groundtruth_path(&img_rel)))?;
                None
            };
            records.push(Record { img: img_rel, mask: mask_rel, split: split[n] });
        }
        persons.push(PersonEntry { id: pid, mode: style.mode, records });
    }
    let index = DatasetIndex { seed: cfg.seed, persons };
    index.save(&cfg.out_dir)?;
    Ok(index)
}
