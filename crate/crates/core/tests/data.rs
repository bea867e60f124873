mod support;

use std::collections::BTreeSet;

use seg2eye::ranking::{dataset_class_means, rank_dataset, PseudoLabeler, Rankings};
use seg2eye::synthdata::*;
use seg2eye::train::{load_segmenter, Checkpoint};
use seg2eye::{GrayImage, RngSeed, SegMask};

fn build(dir: &std::path::Path, identity_disjoint: bool) -> DatasetIndex {
    build_dataset(&DatasetConfig {
        out_dir: dir.to_path_buf(),
        persons: 6,
        images_per_person: 10,
        resolution: 32,
        identity_disjoint,
        seed: 3,
        ..DatasetConfig::default()
    })
    .unwrap()
}

#[test]
fn layout_matches_index_and_renderer() {
    let dir = tempfile::tempdir().unwrap();
    let index = build(dir.path(), false);
    assert_eq!(DatasetIndex::load(dir.path()).unwrap(), index);
    for person in &index.persons {
        let style = sample_person(person.id, RngSeed(3));
        assert_eq!(person.mode, style.mode);
        assert_eq!(person.records.iter().filter(|r| r.mask.is_some()).count(), 5);
        for (n, r) in person.records.iter().enumerate() {
            let (img, mask) = render_eye(&style, &record_pose(RngSeed(3), person.id, n as u64), 32, 32, RngSeed(3).derive(&[0x7E47, person.id, n as u64])).unwrap();
            assert_eq!(GrayImage::read_png(&dir.path().join(&r.img)).unwrap().to_u8(), img.to_u8());
            let mask_path = match &r.mask {
                Some(m) => m.clone(),
                None => groundtruth_path(&r.img),
            };
            assert_eq!(SegMask::read_png(&dir.path().join(mask_path)).unwrap(), mask);
        }
    }
}

#[test]
fn datasets_are_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let index = build(a.path(), false);
    build(b.path(), false);
    for r in index.persons.iter().flat_map(|p| &p.records) {
        assert_eq!(std::fs::read(a.path().join(&r.img)).unwrap(), std::fs::read(b.path().join(&r.img)).unwrap());
    }
    assert_eq!(std::fs::read(a.path().join("index.json")).unwrap(), std::fs::read(b.path().join("index.json")).unwrap());
}

#[test]
fn identity_disjoint_splits_whole_persons() {
    let dir = tempfile::tempdir().unwrap();
    let index = build(dir.path(), true);
    let mut seen = BTreeSet::new();
    for p in &index.persons {
        let splits: BTreeSet<_> = p.records.iter().map(|r| format!("{:?}", r.split)).collect();
        assert_eq!(splits.len(), 1, "person {} spans splits", p.id);
        seen.extend(splits);
    }
    assert_eq!(seen.len(), 3);
}

#[test]
fn rankings_stay_within_each_person() {
    let root = tempfile::tempdir().unwrap();
    let cfg = support::tiny_pipeline(root.path(), 1).unwrap();
    support::segment_and_rank(&cfg, root.path()).unwrap();
    let index = DatasetIndex::load(&cfg.dataset_root).unwrap();
    let rankings = Rankings::load(&root.path().join("rankings.json")).unwrap();
    let labeled: usize = index.persons.iter().map(|p| p.records.iter().filter(|r| r.mask.is_some()).count()).sum();
    assert_eq!(rankings.0.len(), labeled);
    for (img, list) in &rankings.0 {
        let owner = index.owner_of(img).unwrap();
        let pool: BTreeSet<&str> = index.unlabeled_pool(owner).iter().map(|r| r.img.as_str()).collect();
        assert_eq!(list.0.iter().map(|e| e.img.as_str()).collect::<BTreeSet<_>>(), pool);
    }

    let ck = Checkpoint::load(cfg.segmenter_checkpoint.as_ref().unwrap()).unwrap();
    let seg = load_segmenter(&ck).unwrap();
    let means = dataset_class_means(&index, &cfg.dataset_root).unwrap();
    let cache = root.path().join("cache");
    let cached = PseudoLabeler::new(&seg, &ck.content_hash(), &cfg.dataset_root, Some(&cache));
    let first = rank_dataset(&index, &cfg.dataset_root, &cached, &means).unwrap();
    assert!(cache.join(ck.content_hash()).is_dir());
    assert_eq!(rank_dataset(&index, &cfg.dataset_root, &cached, &means).unwrap(), first);
    assert_eq!(first, rankings);
}
