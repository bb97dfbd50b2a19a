use super::*;
use crate::metric::Thresholds;

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, rooms: 4, spacing: 0.2, ..SceneSpec::default() }
}

#[test]
fn labels_stay_inside_the_palette() {
    let spec = small_spec(3);
    let kfs = generate(&spec).unwrap();
    assert_eq!(kfs.len(), 4 * spec.keyframes_per_room);
    for kf in &kfs {
        kf.cloud.validate_labels(spec.classes()).unwrap();
        assert!(kf.cloud.labels().contains(&FLOOR));
    }
}

#[test]
fn generation_is_deterministic_to_the_byte() {
    let spec = small_spec(11);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            keyframe_to_bytes(&x.record.room, &x.cloud).unwrap(),
            keyframe_to_bytes(&y.record.room, &y.cloud).unwrap()
        );
        assert_eq!(x.record, y.record);
    }
    let c = generate(&small_spec(12)).unwrap();
    assert_ne!(a[0].cloud, c[0].cloud);
}

#[test]
fn every_keyframe_has_enough_positives_and_negatives() {
    let spec = SceneSpec { spacing: 0.25, ..SceneSpec::default() };
    let kfs = generate(&spec).unwrap();
    let th = Thresholds::default();
    for a in &kfs {
        let pos = kfs.iter().filter(|b| b.record.id != a.record.id && th.is_positive(&a.record, &b.record)).count();
        let neg = kfs.iter().filter(|b| th.is_negative(&a.record, &b.record)).count();
        assert!(pos >= 2, "keyframe {} has {pos} positives", a.record.id);
        assert!(neg >= 6, "keyframe {} has {neg} negatives", a.record.id);
    }
}

#[test]
fn splits_partition_rooms() {
    let spec = SceneSpec { spacing: 0.4, ..SceneSpec::default() };
    let kfs = generate(&spec).unwrap();
    let rooms_in = |s: Split| {
        let mut r: Vec<_> = kfs.iter().filter(|k| k.split == s).map(|k| k.record.room.clone()).collect();
        r.dedup();
        r.len()
    };
    assert_eq!((rooms_in(Split::Train), rooms_in(Split::Val), rooms_in(Split::Test)), (7, 1, 2));
}

#[test]
fn written_dataset_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let kfs = generate_to(&small_spec(5), dir.path()).unwrap();
    let back = load(dir.path(), None).unwrap();
    assert_eq!(kfs, back);
    let test = load(dir.path(), Some(Split::Test)).unwrap();
    assert!(test.iter().all(|k| k.split == Split::Test));
    assert_eq!(test.len(), 2 * 8);
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_to(&small_spec(5), dir.path()).unwrap();
    let path = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut f: Vec<String> = lines[1].split(' ').map(String::from).collect();
    f[3] = format!("{:?}", f[3].parse::<f64>().unwrap() + 0.01);
    lines[1] = f.join(" ");
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(load(dir.path(), None).is_err());
}

#[test]
fn degenerate_specs_are_rejected() {
    for spec in [
        SceneSpec { rooms: 2, ..SceneSpec::default() },
        SceneSpec { spacing: 0.0, ..SceneSpec::default() },
        SceneSpec { extent: (3.0, 2.0), ..SceneSpec::default() },
        SceneSpec { keyframes_per_room: 0, ..SceneSpec::default() },
    ] {
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }
}

#[test]
fn ply_import_builds_a_test_keyframe() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ply");
    let ply = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
               property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
               0 0 0 255 0 0\n2 0 0 0 255 0\n";
    std::fs::write(&path, ply).unwrap();
    let kf = import_ply(&path, "office", 7).unwrap();
    assert_eq!(kf.record.id, 7);
    assert_eq!(kf.record.centroid, [1.0, 0.0, 0.0]);
    assert_eq!(kf.split, Split::Test);
}
