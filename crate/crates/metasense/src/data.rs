//! Dataset ingestion (IDX images and labels), digit-to-scene mapping,
//! train/validation/test splits and results-table persistence.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em::{SceneGrid, SceneReflectivity};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Canonical split sizes at full scale.
pub const FULL_TRAIN: usize = 51_000;
pub const FULL_VALIDATION: usize = 9_000;
pub const FULL_TEST: usize = 10_000;

/// One digit image with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDigit {
    pub pixels: Vec<u8>,
    pub label: u8,
}

/// A parsed IDX image/label file pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDigits {
    pub rows: usize,
    pub cols: usize,
    pub items: Vec<LabeledDigit>,
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::IdxParse(format!("truncated file: missing {field}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parse an IDX3 image payload: magic 0x00000803, big-endian counts, then
/// row-major unsigned bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_be_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxParse(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(bytes, 12, "image cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::IdxParse(format!(
            "image dimensions {rows}x{cols} must be positive"
        )));
    }
    let expected = count
        .checked_mul(rows * cols)
        .ok_or_else(|| Error::IdxParse("image payload size overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::IdxParse(format!(
            "image payload holds {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

/// Parse an IDX1 label payload: magic 0x00000801, big-endian count, bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxParse(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::IdxParse(format!(
            "label payload holds {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Serialize images into the IDX3 byte format (exact inverse of
/// [`parse_idx_images`]).
pub fn write_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in images {
        debug_assert_eq!(image.len(), rows * cols);
        out.extend_from_slice(image);
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load a paired IDX image/label file into labeled digits. Image and label
/// counts must match; labels must be digit classes 0..=9.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<RawDigits> {
    let image_bytes = fs::read(image_path)?;
    let label_bytes = fs::read(label_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(Error::IdxParse(format!(
            "image count {count} does not match label count {}",
            labels.len()
        )));
    }
    let stride = rows * cols;
    let items = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            if label > 9 {
                return Err(Error::IdxParse(format!(
                    "label {label} at index {i} outside digit range 0..=9"
                )));
            }
            Ok(LabeledDigit {
                pixels: pixels[i * stride..(i + 1) * stride].to_vec(),
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawDigits { rows, cols, items })
}

/// How digit grayscale maps to reflectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SceneEncoding {
    /// sigma = pixel / 255.
    #[default]
    Grayscale,
    /// sigma = 1 if pixel / 255 > 0.5 else 0.
    Binarized,
}

/// Map digit pixels onto a scene grid as reflectivity in [0, 1].
pub fn scene_from_digit(pixels: &[u8], grid: &SceneGrid) -> Result<SceneReflectivity> {
    scene_from_digit_encoded(pixels, grid, SceneEncoding::Grayscale)
}

pub fn scene_from_digit_encoded(
    pixels: &[u8],
    grid: &SceneGrid,
    encoding: SceneEncoding,
) -> Result<SceneReflectivity> {
    if pixels.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {}x{} grid",
            pixels.len(),
            grid.n_rows,
            grid.n_cols
        )));
    }
    let values = Array2::from_shape_fn((grid.n_rows, grid.n_cols), |(r, c)| {
        let v = pixels[r * grid.n_cols + c] as f64 / 255.0;
        match encoding {
            SceneEncoding::Grayscale => v,
            SceneEncoding::Binarized => {
                if v > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    });
    SceneReflectivity::new(grid.clone(), values)
}

/// Train / validation / test digit splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<LabeledDigit>,
    pub validation: Vec<LabeledDigit>,
    pub test: Vec<LabeledDigit>,
}

/// Shuffle the training-file digits by seed and carve the 51000:9000 train /
/// validation split (scaled by `scale`, rounding each target). The test
/// split takes the canonical test file, truncated to 10000 * scale.
pub fn split(
    train_file: RawDigits,
    test_file: RawDigits,
    rng_seed: u64,
    scale: f64,
) -> Result<DatasetSplits> {
    if !(scale.is_finite() && scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must lie in (0, 1], got {scale}"
        )));
    }
    if train_file.rows != test_file.rows || train_file.cols != test_file.cols {
        return Err(Error::ShapeMismatch(
            "train and test files disagree on image dimensions".into(),
        ));
    }
    let n_train = (FULL_TRAIN as f64 * scale).round() as usize;
    let n_validation = (FULL_VALIDATION as f64 * scale).round() as usize;
    let n_test = (FULL_TEST as f64 * scale).round() as usize;
    if n_train == 0 || n_validation == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} yields an empty split"
        )));
    }
    if n_train + n_validation > train_file.items.len() {
        return Err(Error::InvalidArgument(format!(
            "training file holds {} digits, need {}",
            train_file.items.len(),
            n_train + n_validation
        )));
    }
    if n_test > test_file.items.len() {
        return Err(Error::InvalidArgument(format!(
            "test file holds {} digits, need {n_test}",
            test_file.items.len()
        )));
    }
    let mut shuffled = train_file.items;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    shuffled.shuffle(&mut rng);
    let validation = shuffled.split_off(n_train);
    let mut train = shuffled;
    let mut validation = validation;
    validation.truncate(n_validation);
    train.truncate(n_train);
    let mut test = test_file.items;
    test.truncate(n_test);
    Ok(DatasetSplits {
        rows: train_file.rows,
        cols: train_file.cols,
        train,
        validation,
        test,
    })
}

/// One results row per (experiment point, realization, test level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: String,
    pub m: usize,
    pub noise_kind: String,
    pub train_level: f64,
    pub test_level: f64,
    pub seed: u64,
    pub accuracy: f64,
    /// Undefined (empty field) for single-measurement sequences.
    pub overlap: Option<f64>,
    pub intensity_ratio: f64,
    pub on_ratio: f64,
    pub wall_time_s: f64,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "mode",
    "m",
    "noise_kind",
    "train_level",
    "test_level",
    "seed",
    "accuracy",
    "overlap",
    "intensity_ratio",
    "on_ratio",
    "wall_time_s",
];

/// Write a complete results table (header plus rows).
pub fn persist_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        writer.write_record(RESULT_COLUMNS)?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load a results table written by [`persist_results`] (or appended row by
/// row with the same schema).
pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: ResultRow =
            record.map_err(|e| Error::ResultsFormat(format!("malformed row: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fixture_images() -> (usize, usize, Vec<Vec<u8>>) {
        let rows = 3;
        let cols = 2;
        let images = vec![vec![0u8, 255, 7, 19, 128, 64], vec![1, 2, 3, 4, 5, 6]];
        (rows, cols, images)
    }

    #[test]
    fn idx_roundtrip_is_byte_exact() {
        let (rows, cols, images) = fixture_images();
        let bytes = write_idx_images(rows, cols, &images);
        let (count, r, c, pixels) = parse_idx_images(&bytes).unwrap();
        assert_eq!((count, r, c), (2, rows, cols));
        assert_eq!(pixels, images.concat());

        let labels = vec![3u8, 7];
        let lbytes = write_idx_labels(&labels);
        assert_eq!(parse_idx_labels(&lbytes).unwrap(), labels);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let (rows, cols, images) = fixture_images();
        let mut bytes = write_idx_images(rows, cols, &images);
        bytes[3] = 0x01; // flip magic to the label value
        assert!(matches!(parse_idx_images(&bytes), Err(Error::IdxParse(_))));
    }

    #[test]
    fn idx_rejects_truncated_payload() {
        let (rows, cols, images) = fixture_images();
        let mut bytes = write_idx_images(rows, cols, &images);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::IdxParse(_))));
    }

    #[test]
    fn idx_rejects_every_header_mutation() {
        let (rows, cols, images) = fixture_images();
        let reference = write_idx_images(rows, cols, &images);
        for byte in 0..16 {
            let mut mutated = reference.clone();
            mutated[byte] ^= 0xA5;
            let outcome = parse_idx_images(&mutated);
            assert!(
                outcome.is_err(),
                "header byte {byte} mutation was accepted"
            );
        }
    }

    #[test]
    fn load_mnist_reads_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (rows, cols, images) = fixture_images();
        let image_path = dir.path().join("images.idx");
        let label_path = dir.path().join("labels.idx");
        std::fs::write(&image_path, write_idx_images(rows, cols, &images)).unwrap();
        std::fs::write(&label_path, write_idx_labels(&[5, 9])).unwrap();
        let digits = load_mnist(&image_path, &label_path).unwrap();
        assert_eq!(digits.rows, rows);
        assert_eq!(digits.cols, cols);
        assert_eq!(digits.items[0].pixels, images[0]);
        assert_eq!(digits.items[0].label, 5);
        assert_eq!(digits.items[1].pixels, images[1]);
        assert_eq!(digits.items[1].label, 9);
    }

    #[test]
    fn load_mnist_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (rows, cols, images) = fixture_images();
        let image_path = dir.path().join("images.idx");
        let label_path = dir.path().join("labels.idx");
        std::fs::write(&image_path, write_idx_images(rows, cols, &images)).unwrap();
        std::fs::write(&label_path, write_idx_labels(&[5])).unwrap();
        assert!(matches!(
            load_mnist(&image_path, &label_path),
            Err(Error::IdxParse(_))
        ));
    }

    fn grid28() -> SceneGrid {
        SceneGrid::new(28, 28, 0.015, 0.6).unwrap()
    }

    #[test]
    fn scene_from_all_zero_image_is_zero() {
        let scene = scene_from_digit(&[0u8; 784], &grid28()).unwrap();
        assert!(scene.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scene_white_pixel_maps_to_one() {
        let mut pixels = [0u8; 784];
        pixels[100] = 255;
        let scene = scene_from_digit(&pixels, &grid28()).unwrap();
        assert_eq!(scene.values[[100 / 28, 100 % 28]], 1.0);
    }

    #[test]
    fn scene_roundtrips_pixel_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels: Vec<u8> = (0..784).map(|_| rng.random()).collect();
        let scene = scene_from_digit(&pixels, &grid28()).unwrap();
        for (i, &p) in pixels.iter().enumerate() {
            let back = (scene.values[[i / 28, i % 28]] * 255.0).round() as u8;
            assert_eq!(back, p);
        }
    }

    #[test]
    fn scene_binarized_thresholds_at_half() {
        let mut pixels = [0u8; 784];
        pixels[0] = 127; // 127/255 < 0.5
        pixels[1] = 128; // 128/255 > 0.5
        let scene =
            scene_from_digit_encoded(&pixels, &grid28(), SceneEncoding::Binarized).unwrap();
        assert_eq!(scene.values[[0, 0]], 0.0);
        assert_eq!(scene.values[[0, 1]], 1.0);
    }

    #[test]
    fn scene_rejects_shape_mismatch() {
        assert!(scene_from_digit(&[0u8; 100], &grid28()).is_err());
    }

    fn synthetic_raw(count: usize, tag: u8) -> RawDigits {
        RawDigits {
            rows: 2,
            cols: 2,
            items: (0..count)
                .map(|i| LabeledDigit {
                    pixels: vec![tag, (i % 251) as u8, (i / 251) as u8, ((i / 63001) % 256) as u8],
                    label: (i % 10) as u8,
                })
                .collect(),
        }
    }

    #[test]
    fn split_full_scale_sizes() {
        let splits = split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 7, 1.0).unwrap();
        assert_eq!(splits.train.len(), 51_000);
        assert_eq!(splits.validation.len(), 9_000);
        assert_eq!(splits.test.len(), 10_000);
    }

    #[test]
    fn split_scales_proportionally() {
        let splits = split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 7, 0.1).unwrap();
        assert_eq!(splits.train.len(), 5_100);
        assert_eq!(splits.validation.len(), 900);
        assert_eq!(splits.test.len(), 1_000);
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 42, 0.05).unwrap();
        let b = split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 42, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_train_validation_disjoint_and_exhaustive() {
        use std::collections::HashSet;
        let splits = split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 3, 1.0).unwrap();
        let key = |d: &LabeledDigit| d.pixels.clone();
        let train: HashSet<_> = splits.train.iter().map(key).collect();
        let val: HashSet<_> = splits.validation.iter().map(key).collect();
        assert_eq!(train.len(), 51_000);
        assert_eq!(val.len(), 9_000);
        assert!(train.is_disjoint(&val));
    }

    #[test]
    fn split_rejects_empty_result() {
        assert!(split(synthetic_raw(60_000, 0), synthetic_raw(10_000, 1), 0, 1e-6).is_err());
    }

    fn random_row(rng: &mut impl Rng) -> ResultRow {
        ResultRow {
            mode: if rng.random() { "learned" } else { "random" }.into(),
            m: rng.random_range(1..200),
            noise_kind: "signal_independent".into(),
            train_level: rng.random_range(0.001..100.0),
            test_level: rng.random_range(0.001..100.0),
            seed: rng.random(),
            accuracy: rng.random_range(0.0..1.0),
            overlap: if rng.random() {
                Some(rng.random_range(0.0..1.0))
            } else {
                None
            },
            intensity_ratio: rng.random_range(0.0..8.0),
            on_ratio: rng.random_range(0.0..1.0),
            wall_time_s: rng.random_range(0.0..1e4),
        }
    }

    #[test]
    fn results_empty_table_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        persist_results(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("mode,m,noise_kind,train_level,test_level,seed,accuracy"));
        assert_eq!(load_results(&path).unwrap(), vec![]);
    }

    #[test]
    fn results_roundtrip_thousand_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<ResultRow> = (0..1000).map(|_| random_row(&mut rng)).collect();
        persist_results(&rows, &path).unwrap();
        let loaded = load_results(&path).unwrap();
        assert_eq!(loaded, rows);
    }

    #[test]
    fn results_rejects_malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        std::fs::write(
            &path,
            "mode,m,noise_kind,train_level,test_level,seed,accuracy,overlap,intensity_ratio,on_ratio,wall_time_s\nlearned,notanumber,si,1,1,2,0.5,,1.0,0.5,1.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_results(&path),
            Err(Error::ResultsFormat(_))
        ));
    }
}
