use std::path::Path;

use dimlight::dataset::{load_dataset, DatasetName, LoadOptions};
use dimlight::image_io::write_tensor;
use dimlight::{Shape, Tensor};

fn write_pairs(low: &Path, high: &Path, ids: impl Iterator<Item = usize>, side: usize) {
    for i in ids {
        let v = (i % 200) as f32 / 255.0;
        let t = Tensor::<f32>::from_fn(Shape::new(1, 3, side, side), |_, c, y, x| v + (c + y + x) as f32 / 255.0);
        write_tensor(&low.join(format!("{i:04}.png")), &t.map(|x| x * 0.3)).unwrap();
        write_tensor(&high.join(format!("{i:04}.png")), &t).unwrap();
    }
}

fn opts() -> LoadOptions {
    LoadOptions { train_size: 8 }
}

#[test]
fn lol_v1_split_layout_gives_485_and_15() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("our485/low"), &root.join("our485/high"), 0..485, 8);
    write_pairs(&root.join("eval15/low"), &root.join("eval15/high"), 485..500, 12);
    let split = load_dataset(root, DatasetName::LolV1, &opts()).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (485, 15));
    assert!(split.warnings.is_empty());
    assert_eq!(split.test[0].id, "0485");
    assert_eq!(split.test[0].valid, (12, 12));
}

#[test]
fn lol_v1_flat_layout_splits_by_sorted_stem() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("low"), &root.join("high"), (0..500).rev(), 8);
    let split = load_dataset(root, DatasetName::LolV1, &opts()).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (485, 15));
    assert_eq!(split.train[0].id, "0000");
    assert_eq!(split.test.last().unwrap().id, "0499");
}

#[test]
fn named_dataset_with_wrong_total_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("low"), &root.join("high"), 0..20, 8);
    let err = load_dataset(root, DatasetName::LolV1, &opts()).unwrap_err().to_string();
    assert!(err.contains("500") && err.contains("20"), "{err}");
    let custom = load_dataset(root, DatasetName::Custom, &opts()).unwrap();
    assert_eq!((custom.train.len(), custom.test.len()), (18, 2));
}
