//! SVHN cropped digits (`train_32x32.mat`, `test_32x32.mat`). `X` is a
//! column-major `32 x 32 x 3 x N` uint8 array, `y` holds labels 1..=10 with
//! 10 standing for the digit zero.

use std::path::{Path, PathBuf};

use super::matfile::{read_mat, MatArray, MatData};
use super::{make_validation_split, DatasetSplit, ImageSet};
use crate::error::{Error, Result};

const CLASSES: usize = 10;

fn locate(root: &Path, name: &str) -> PathBuf {
    let nested = root.join("svhn").join(name);
    if nested.is_file() {
        nested
    } else {
        root.join(name)
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub(crate) fn images_from_mat(path: &Path, x: &MatArray, y: &MatArray) -> Result<ImageSet> {
    let [h, w, c, n] = x.dims[..] else {
        return Err(ingest(path, format!("X has dimensions {:?}, expected 4", x.dims)));
    };
    let MatData::U8(raw) = &x.data else {
        return Err(ingest(path, "X is not stored as uint8"));
    };
    let labels_raw = y.to_f64();
    if labels_raw.len() != n {
        return Err(ingest(path, format!("{} labels for {n} images", labels_raw.len())));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in labels_raw.iter().enumerate() {
        if l.fract() != 0.0 || !(1.0..=10.0).contains(&l) {
            return Err(ingest(path, format!("label {l} at position {i} outside 1..=10")));
        }
        labels.push(l as usize % 10);
    }
    let mut pixels = vec![0u8; n * c * h * w];
    for img in 0..n {
        for ch in 0..c {
            for col in 0..w {
                for row in 0..h {
                    pixels[((img * c + ch) * h + row) * w + col] = raw[row + h * (col + w * (ch + c * img))];
                }
            }
        }
    }
    ImageSet::new([c, h, w], pixels, labels)
}

fn read_split(path: &Path) -> Result<ImageSet> {
    let bytes = std::fs::read(path).map_err(|e| ingest(path, e.to_string()))?;
    let vars = read_mat(&bytes).map_err(|e| ingest(path, e))?;
    let x = vars.get("X").ok_or_else(|| ingest(path, "no variable X"))?;
    let y = vars.get("y").ok_or_else(|| ingest(path, "no variable y"))?;
    images_from_mat(path, x, y)
}

/// Standard train split only; the `extra` archive is not used.
pub fn load_svhn(root: &Path) -> Result<DatasetSplit> {
    let full = read_split(&locate(root, "train_32x32.mat"))?;
    let (train, validation) = make_validation_split(&full, CLASSES)?;
    let test = read_split(&locate(root, "test_32x32.mat"))?;
    Ok(DatasetSplit {
        name: "svhn".into(),
        train,
        validation,
        test,
        class_count: CLASSES,
    })
}
