use std::fs;
use std::path::{Path, PathBuf};

use tee_core::geometry::{scenery_change_with_motion, SceneryLabel};
use tee_core::synthgen::read_dataset;
use tee_core::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_frame")
}

#[test]
fn hand_written_dataset_parses_to_its_numbers() {
    let v = read_dataset(&fixture()).unwrap();
    assert_eq!(v.video_id, "two_frame");
    assert_eq!((v.width, v.height, v.len()), (8, 6, 2));
    assert!(v.config.is_none());

    let a0 = &v.frames[0].annotations[0];
    assert_eq!((a0.object_id.as_str(), a0.class_id), ("car", 0));
    assert_eq!(a0.bbox.to_array(), [1.0, 1.0, 4.0, 4.0]);
    assert_eq!(v.frames[1].annotations[0].bbox.to_array(), [3.0, 2.0, 6.0, 5.0]);

    // the box is painted red on a dark background
    let img = &v.frames[0].image;
    let px = |x: usize, y: usize| &img.data[(y * img.width + x) * 3..(y * img.width + x) * 3 + 3];
    assert_eq!(px(2, 2), [200, 30, 30]);
    assert_eq!(px(6, 4), [20, 40, 60]);

    // overlap 1x2 of two 3x3 boxes: IoU 2/16, motion 0.875
    let (m, label) =
        scenery_change_with_motion(&v.frames[0].annotations, &v.frames[1].annotations, 0.4).unwrap();
    assert_eq!(m, 0.875);
    assert_eq!(label, SceneryLabel::Changed);
}

fn copy_fixture(to: &Path) {
    fs::create_dir_all(to.join("frames")).unwrap();
    fs::copy(fixture().join("annotations.json"), to.join("annotations.json")).unwrap();
    for f in ["000000.png", "000001.png"] {
        fs::copy(fixture().join("frames").join(f), to.join("frames").join(f)).unwrap();
    }
}

#[test]
fn missing_frame_entry_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("annotations.json");
    let mut ann: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    ann["frames"].as_array_mut().unwrap().remove(0);
    fs::write(&path, ann.to_string()).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Schema { path: p, .. }) => assert!(p.ends_with("annotations.json")),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn malformed_box_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("annotations.json");
    let text = fs::read_to_string(&path).unwrap().replace("[1.0, 1.0, 4.0, 4.0]", "[4.0, 1.0, 1.0, 4.0]");
    fs::write(&path, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Schema { .. })));
}
