//! CIFAR10 binary version: each batch file is a run of 3073-byte records,
//! one label byte followed by 1024 red, 1024 green and 1024 blue bytes.

use std::path::{Path, PathBuf};

use super::{make_validation_split, DatasetSplit, ImageSet};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn batch_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_records(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of {RECORD}-byte records", bytes.len()),
        });
    }
    for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = usize::from(rec[0]);
        if label >= CLASSES {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                reason: format!("record {r} has label {label}"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Reads the five train batches (in file order) and the test batch, then
/// carves the validation set out of the train batches.
pub fn load_cifar10(root: &Path) -> Result<DatasetSplit> {
    let dir = batch_dir(root);
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for name in TRAIN_FILES {
        read_records(&dir.join(name), &mut pixels, &mut labels)?;
    }
    let full = ImageSet::new([3, 32, 32], pixels, labels)?;
    let (train, validation) = make_validation_split(&full, CLASSES)?;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    read_records(&dir.join(TEST_FILE), &mut pixels, &mut labels)?;
    let test = ImageSet::new([3, 32, 32], pixels, labels)?;
    Ok(DatasetSplit {
        name: "cifar10".into(),
        train,
        validation,
        test,
        class_count: CLASSES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_batch(path: &Path, labels: impl Iterator<Item = u8>) {
        let mut bytes = Vec::new();
        for (i, l) in labels.enumerate() {
            bytes.push(l);
            bytes.extend(std::iter::repeat((i % 251) as u8).take(RECORD - 1));
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn reads_batches_and_carves_validation() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&nested).unwrap();
        // 5 files x 120 records, 60 per class for classes cycling 0..10
        for name in TRAIN_FILES {
            write_batch(&nested.join(name), (0..120).map(|i| (i % 10) as u8));
        }
        write_batch(&nested.join(TEST_FILE), (0..30).map(|i| (i % 10) as u8));
        let split = load_cifar10(dir.path()).unwrap();
        assert_eq!(split.class_count, 10);
        assert_eq!(split.validation.len(), 500);
        assert_eq!(split.train.len(), 100);
        assert_eq!(split.test.len(), 30);
        assert_eq!(split.image_shape(), [3, 32, 32]);
        assert_eq!(split.validation.class_counts(10), vec![50; 10]);
    }

    #[test]
    fn missing_files_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("data_batch_1.bin")),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_batch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; RECORD + 5]).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Ingest { .. })));
    }
}
