//! Corpus ingestion, synthetic data, 8:1:1 splits and shuffled batches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const UNINFECTED: u8 = 0;
pub const PARASITIZED: u8 = 1;
pub const CLASS_NAMES: [&str; 2] = ["Uninfected", "Parasitized"];
pub const DATA_DIR_ENV: &str = "MALARIA_DATA_DIR";

const SPLIT_STREAM: u64 = 2;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;
const SUBSET_STREAM: u64 = 3;

/// One preprocessed cell image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: u8,
    pub source_id: String,
}

/// Images `[B, H, W, 3]` and one-hot labels `[B, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real = f32> {
    pub images: Tensor<T>,
    pub onehot: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Files that could not be decoded, with the reason.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<(String, String)>,
}

/// `data.root` if given, else `$MALARIA_DATA_DIR`.
pub fn resolve_data_root(configured: Option<&Path>) -> Option<PathBuf> {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Half-pixel-centered bilinear resize of interleaved RGB bytes, scaled to `[0, 1]`.
pub fn resize_bilinear(
    rgb: &[u8],
    width: usize,
    height: usize,
    target: [usize; 2],
) -> Result<Tensor<f32>> {
    let [th, tw] = target;
    if width == 0 || height == 0 || th == 0 || tw == 0 || rgb.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "cannot resize {width}x{height} ({} bytes) to {tw}x{th}",
            rgb.len()
        )));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..tw).map(|x| axis(x, width, tw)).collect();
    let mut out = Vec::with_capacity(th * tw * 3);
    for y in 0..th {
        let (y0, y1, fy) = axis(y, height, th);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |yy: usize, xx: usize| rgb[(yy * width + xx) * 3 + c] as f32 / 255.0;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(&[th, tw, 3], out)
}

/// Decodes a PNG (alpha dropped) and resizes it to `target` (`[H, W]`).
pub fn load_png(path: &Path, target: [usize; 2]) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            message: format!("{}: {other}", path.display()),
        },
    })?;
    let rgb = img.to_rgb8();
    resize_bilinear(
        rgb.as_raw(),
        rgb.width() as usize,
        rgb.height() as usize,
        target,
    )
}

/// A corpus file found by [`scan_image_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub source_id: String,
    pub path: PathBuf,
    pub label: u8,
}

/// Lists `<root>/Parasitized/*.png` and `<root>/Uninfected/*.png`, sorted by
/// source id (`<Class>/<file>`).
pub fn scan_image_dataset(root: &Path) -> Result<Vec<SourceFile>> {
    let mut files = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "missing subdirectory {}",
                dir.display()
            )));
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png && path.is_file() {
                files.push(SourceFile {
                    source_id: format!("{class}/{}", entry.file_name().to_string_lossy()),
                    path,
                    label: label as u8,
                });
            }
        }
    }
    files.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(files)
}

/// Decodes files in parallel, keeping their order. Undecodable files are
/// skipped and listed in the report.
pub fn decode_files(files: &[SourceFile], target: [usize; 2]) -> (Vec<LabeledImage>, SkipReport) {
    let decoded: Vec<_> = files
        .par_iter()
        .map(|f| load_png(&f.path, target))
        .collect();
    let mut records = Vec::with_capacity(decoded.len());
    let mut report = SkipReport::default();
    for (result, f) in decoded.into_iter().zip(files) {
        match result {
            Ok(pixels) => records.push(LabeledImage {
                pixels,
                label: f.label,
                source_id: f.source_id.clone(),
            }),
            Err(e) => report.skipped.push((f.source_id.clone(), e.to_string())),
        }
    }
    if !report.skipped.is_empty() {
        log::warn!("skipped {} undecodable files", report.skipped.len());
    }
    (records, report)
}

/// Scans and decodes the whole corpus under `root`.
pub fn load_image_dataset(
    root: &Path,
    target: [usize; 2],
) -> Result<(Vec<LabeledImage>, SkipReport)> {
    Ok(decode_files(&scan_image_dataset(root)?, target))
}

/// Scans the corpus and decodes only a seeded `fraction` of it.
pub fn load_image_subset(
    root: &Path,
    target: [usize; 2],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, SkipReport)> {
    let files = scan_image_dataset(root)?;
    let chosen: Vec<SourceFile> = subset_indices(files.len(), fraction, seed)?
        .into_iter()
        .map(|i| files[i].clone())
        .collect();
    Ok(decode_files(&chosen, target))
}

/// Index lists into the master record list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Seeded permutation; test takes the first `round(n/10)`, validation the next
/// `round(n/10)`, train the rest.
pub fn split_811(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::config(format!(
            "need at least 10 records to split, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let tenth = tenth_of(n);
    let train = perm.split_off(2 * tenth);
    let validation = perm.split_off(tenth);
    Ok(DatasetSplit {
        train,
        validation,
        test: perm,
        seed,
    })
}

/// `n / 10` rounded half up.
pub fn tenth_of(n: usize) -> usize {
    (n + 5) / 10
}

/// `[uninfected, parasitized]` counts over `indices`.
pub fn class_counts(records: &[LabeledImage], indices: &[usize]) -> [usize; 2] {
    let mut counts = [0; 2];
    for &i in indices {
        counts[records[i].label as usize] += 1;
    }
    counts
}

/// Seeded subset of `ceil(fraction * n)` record indices, in ascending order.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "subset fraction {fraction} must lie in (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBSET_STREAM);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm.truncate((fraction * n as f64).ceil() as usize);
    perm.sort_unstable();
    Ok(perm)
}

/// The epoch's visiting order of `indices`, keyed on `(seed, epoch)`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM_BASE.wrapping_add(epoch));
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Stacks the given records into one batch.
pub fn make_batch<T: Real>(records: &[LabeledImage], indices: &[usize]) -> Result<Batch<T>> {
    let first = indices
        .first()
        .ok_or_else(|| Error::Argument("empty batch".to_string()))?;
    let shape = records
        .get(*first)
        .ok_or_else(|| Error::Argument(format!("record index {first} out of range")))?
        .pixels
        .shape()
        .to_vec();
    let mut images = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
    let mut onehot = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        let r = records
            .get(i)
            .ok_or_else(|| Error::Argument(format!("record index {i} out of range")))?;
        if r.pixels.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "{}: {:?} differs from {:?}",
                r.source_id,
                r.pixels.shape(),
                shape
            )));
        }
        if r.label > PARASITIZED {
            return Err(Error::Label(format!("{}: label {}", r.source_id, r.label)));
        }
        images.extend(r.pixels.data().iter().map(|&v| T::from_f64(v as f64)));
        onehot.extend(if r.label == UNINFECTED {
            [T::one(), T::zero()]
        } else {
            [T::zero(), T::one()]
        });
    }
    let mut batch_shape = vec![indices.len()];
    batch_shape.extend(&shape);
    Ok(Batch {
        images: Tensor::from_vec(&batch_shape, images)?,
        onehot: Tensor::from_vec(&[indices.len(), 2], onehot)?,
    })
}

/// Batches over `indices`, reshuffled per `(seed, epoch)`; the last batch may be short.
pub fn batch_iter<'a, T: Real>(
    records: &'a [LabeledImage],
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch<T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= records.len()) {
        return Err(Error::Argument(format!("record index {bad} out of range")));
    }
    let order = epoch_order(indices, seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks
        .into_iter()
        .map(move |c| make_batch(records, &c).expect("indices validated above")))
}

/// Batches over `indices` in the given order, for evaluation.
pub fn ordered_batches<'a, T: Real>(
    records: &'a [LabeledImage],
    indices: &'a [usize],
    batch_size: usize,
) -> Result<impl Iterator<Item = Batch<T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= records.len()) {
        return Err(Error::Argument(format!("record index {bad} out of range")));
    }
    Ok(indices
        .chunks(batch_size)
        .map(move |c| make_batch(records, c).expect("indices validated above")))
}

/// Synthetic cell images.
///
/// Every image is a pale textured background with a pink cell disc centered
/// near the middle. Background and cell carry low-frequency sinusoidal texture
/// plus mild noise. Odd indices (parasitized) add 1 to 3 dark purple blobs
/// inside the inner half of the cell. Even indices are uninfected.
pub fn synthetic_dataset(n: usize, size: [usize; 2], seed: u64) -> Result<Vec<LabeledImage>> {
    let [h, w] = size;
    if !n.is_multiple_of(2) {
        return Err(Error::config(format!(
            "synthetic dataset size {n} must be even"
        )));
    }
    if h < 16 || w < 16 {
        return Err(Error::config(format!(
            "synthetic images must be at least 16x16, got {h}x{w}"
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 16);
            let label = (i % 2) as u8;
            Ok(LabeledImage {
                pixels: synthetic_cell(&mut rng, h, w, label == PARASITIZED)?,
                label,
                source_id: format!("synthetic/{i:06}"),
            })
        })
        .collect()
}

fn smoothstep(edge: f64, softness: f64, d: f64) -> f64 {
    // 1 inside, 0 outside, linear ramp of width `softness` at the edge
    ((edge - d) / softness + 0.5).clamp(0.0, 1.0)
}

fn synthetic_cell(rng: &mut ChaCha8Rng, h: usize, w: usize, infected: bool) -> Result<Tensor<f32>> {
    let side = h.min(w) as f64;
    let background = [0.93, 0.90, 0.91].map(|c: f64| c + rng.gen_range(-0.03..0.03));
    let cell = [0.86, 0.58, 0.62].map(|c: f64| c + rng.gen_range(-0.05..0.05));
    let blob_color = [0.38, 0.18, 0.48];
    let cy = h as f64 / 2.0 + rng.gen_range(-0.05..0.05) * side;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.05..0.05) * side;
    let radius = side * rng.gen_range(0.36..0.44);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / side;
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64)> = if infected {
        (0..rng.gen_range(1..=3))
            .map(|_| {
                let r = rng.gen_range(0.0..radius * 0.45);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    cy + r * a.sin(),
                    cx + r * a.cos(),
                    side * rng.gen_range(0.07..0.12),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * py + fx * px + ph).sin())
                .sum();
            let d_cell = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
            let in_cell = smoothstep(radius, 1.5, d_cell);
            let in_blob = blobs
                .iter()
                .map(|&(by, bx, br)| {
                    smoothstep(br, 1.0, ((py - by).powi(2) + (px - bx).powi(2)).sqrt())
                })
                .fold(0.0, f64::max);
            let noise = rng.gen_range(-0.015..0.015);
            for c in 0..3 {
                let base = background[c] * (1.0 - in_cell) + cell[c] * in_cell;
                let v = base * (1.0 - in_blob) + blob_color[c] * in_blob + texture + noise;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        img.save(path).unwrap();
    }

    #[test]
    fn white_png_stays_white() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_png(&p, 2, 2, |_, _| [255, 255, 255]);
        let t = load_png(&p, [2, 2]).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_downsamples_to_half() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_png(
            &p,
            4,
            4,
            |x, y| if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] },
        );
        let t = load_png(&p, [2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        for &v in t.data() {
            assert!((v - 0.5).abs() <= 1.0 / 255.0, "{v}");
        }
    }

    #[test]
    fn rgba_alpha_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::RgbaImage::from_pixel(3, 3, image::Rgba([255, 0, 0, 0]))
            .save(&p)
            .unwrap();
        let t = load_png(&p, [3, 3]).unwrap();
        assert_eq!(&t.data()[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dataset_scan_sorts_labels_and_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in CLASS_NAMES {
            fs::create_dir(dir.path().join(class)).unwrap();
        }
        write_png(&dir.path().join("Parasitized/b.png"), 5, 5, |_, _| {
            [10, 20, 30]
        });
        write_png(&dir.path().join("Parasitized/a.png"), 6, 4, |_, _| {
            [10, 20, 30]
        });
        write_png(&dir.path().join("Uninfected/z.png"), 3, 3, |_, _| [0, 0, 0]);
        fs::write(dir.path().join("Uninfected/broken.png"), b"not a png").unwrap();
        fs::write(dir.path().join("Uninfected/notes.txt"), b"ignored").unwrap();
        let (records, report) = load_image_dataset(dir.path(), [4, 4]).unwrap();
        let ids: Vec<_> = records.iter().map(|r| r.source_id.as_str()).collect();
        assert_eq!(
            ids,
            ["Parasitized/a.png", "Parasitized/b.png", "Uninfected/z.png"]
        );
        assert_eq!(
            records.iter().map(|r| r.label).collect::<Vec<_>>(),
            [1, 1, 0]
        );
        assert!(records.iter().all(|r| r.pixels.shape() == [4, 4, 3]));
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "Uninfected/broken.png");
        let (again, _) = load_image_dataset(dir.path(), [4, 4]).unwrap();
        assert_eq!(again, records);
    }

    #[test]
    fn missing_class_directory_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("Parasitized")).unwrap();
        assert!(matches!(
            load_image_dataset(dir.path(), [4, 4]),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(
            split_811(27_558, 7).unwrap().sizes(),
            (22_046, 2_756, 2_756)
        );
        assert_eq!(split_811(10, 7).unwrap().sizes(), (8, 1, 1));
        assert!(matches!(split_811(9, 7), Err(Error::Config(_))));
        assert_eq!(split_811(500, 3).unwrap(), split_811(500, 3).unwrap());
        let (a, b) = (split_811(500, 3).unwrap(), split_811(500, 4).unwrap());
        assert_ne!(a.train, b.train);
        assert_eq!(a.sizes(), b.sizes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn split_is_a_partition(n in 10usize..30_000, seed in any::<u64>()) {
            let s = split_811(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.test.len(), tenth_of(n));
            prop_assert_eq!(s.validation.len(), tenth_of(n));
            prop_assert!(s.train.len() >= 8 * n / 10 - 1);
        }
    }

    #[test]
    fn batches_cover_the_epoch_and_reshuffle() {
        let records = synthetic_dataset(100, [16, 16], 1).unwrap();
        let idx: Vec<usize> = (0..100).collect();
        let batches: Vec<Batch<f32>> = batch_iter(&records, &idx, 32, 5, 0).unwrap().collect();
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            [32, 32, 32, 4]
        );
        for b in &batches {
            for row in b.onehot.data().chunks(2) {
                assert_eq!(row.iter().sum::<f32>(), 1.0);
                assert!(row.contains(&0.0));
            }
        }
        let mut seen = epoch_order(&idx, 5, 0);
        seen.sort_unstable();
        assert_eq!(seen, idx);

        let big: Vec<usize> = (0..1000).collect();
        let e0 = epoch_order(&big, 5, 0);
        let e1 = epoch_order(&big, 5, 1);
        let same = e0.iter().zip(&e1).filter(|(a, b)| a == b).count();
        assert!(same <= 10, "{same} positions unchanged");
        assert_eq!(e0, epoch_order(&big, 5, 0));
    }

    #[test]
    fn onehot_encoding_order() {
        let records = synthetic_dataset(2, [16, 16], 1).unwrap();
        let b: Batch<f64> = make_batch(&records, &[0, 1]).unwrap();
        assert_eq!(b.onehot.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.images.shape(), &[2, 16, 16, 3]);
        assert!(matches!(
            make_batch::<f32>(&records, &[2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn synthetic_is_balanced_bounded_and_seeded() {
        let d = synthetic_dataset(2000, [16, 16], 9).unwrap();
        assert_eq!(d.iter().filter(|r| r.label == 1).count(), 1000);
        assert!(d
            .iter()
            .all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(
            synthetic_dataset(4, [20, 18], 3).unwrap(),
            synthetic_dataset(4, [20, 18], 3).unwrap()
        );
        assert!(synthetic_dataset(3, [16, 16], 0).is_err());
        assert!(synthetic_dataset(4, [15, 16], 0).is_err());
    }

    #[test]
    fn synthetic_task_is_learnable_by_three_nearest_neighbors() {
        let d = synthetic_dataset(1000, [32, 32], 11).unwrap();
        let (train, test) = d.split_at(800);
        let dist = |a: &LabeledImage, b: &LabeledImage| -> f32 {
            a.pixels
                .data()
                .iter()
                .zip(b.pixels.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        let correct = test
            .iter()
            .filter(|q| {
                let mut ds: Vec<(f32, u8)> = train.iter().map(|r| (dist(q, r), r.label)).collect();
                ds.sort_by(|a, b| a.0.total_cmp(&b.0));
                let votes = ds[..3].iter().filter(|(_, l)| *l == 1).count();
                (votes >= 2) as u8 == q.label
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.70, "3-NN accuracy {acc}");
    }

    #[test]
    fn subset_is_seeded_and_sized() {
        let s = subset_indices(1000, 0.1, 4).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s, subset_indices(1000, 0.1, 4).unwrap());
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(subset_indices(10, 0.0, 1).is_err());
    }
}
