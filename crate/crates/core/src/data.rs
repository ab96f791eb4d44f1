//! Datasets and batching.
//!
//! Three sources, one in-memory format: a procedural synthetic task family
//! (deterministic, dependency-free stand-in for small benchmark tasks),
//! the standard CIFAR binary archives, and class-per-subdirectory image
//! folders. A seeded batcher makes training order reproducible.

use crate::{Error, Result};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// An in-memory labelled image set, normalized to roughly [-1, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// (N, C, H, W)
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: &str,
        images: Array4<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self { name: name.to_string(), images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.images.dim();
        (h, w)
    }

    /// Gather a batch by index.
    pub fn batch(&self, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut x = Array4::<f32>::zeros((idx.len(), c, h, w));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

/// A procedural classification task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_hw: (usize, usize),
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(name: &str, classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            classes,
            train_per_class,
            test_per_class,
            image_hw: (32, 32),
            seed,
        }
    }
}

/// The standard 64-bit finalizer used to spread structured indices into
/// independent stream seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded random RGB field, box-blurred twice so its spatial structure
/// sits at frequencies a small conv stack can match.
fn smooth_field(seed: u64, h: usize, w: usize) -> ndarray::Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f =
        ndarray::Array3::<f32>::from_shape_fn((3, h, w), |_| rng.random_range(-1.0f32..1.0));
    for _ in 0..2 {
        for (along_x, dims) in [(true, (h, w)), (false, (w, h))] {
            let src = f.clone();
            let (outer, inner) = dims;
            for c in 0..3 {
                for a in 0..outer {
                    for b in 0..inner {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for d in -2i64..=2 {
                            let bb = b as i64 + d;
                            if bb < 0 || bb as usize >= inner {
                                continue;
                            }
                            let (y, x) =
                                if along_x { (a, bb as usize) } else { (bb as usize, a) };
                            acc += src[[c, y, x]];
                            n += 1.0;
                        }
                        let (y, x) = if along_x { (a, b) } else { (b, a) };
                        f[[c, y, x]] = acc / n;
                    }
                }
            }
        }
    }
    f
}

/// Build one synthetic task: every class template is a signed combination of
/// a shared dictionary of smooth random atoms, observed under per-sample
/// brightness shifts and Gaussian pixel noise whose level ramps with the
/// class index. The atoms are task-independent (so features transfer across
/// tasks); the task seed draws the sign matrix, so two seeds give
/// related-but-distinct tasks — the setting the transfer utilities exercise.
pub fn make_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 {
        return Err(Error::Data("a task needs at least one class".into()));
    }
    let (h, w) = spec.image_hw;
    const ATOMS: usize = 48;
    let atoms: Vec<ndarray::Array3<f32>> = (0..ATOMS)
        .map(|j| {
            let mut a = smooth_field(mix64(0xA70A ^ ((j as u64) << 8)), h, w);
            a -= a.mean().unwrap_or(0.0);
            let rms = a.mapv(|v| v * v).mean().unwrap_or(1.0).sqrt().max(1e-6);
            a.mapv_inplace(|v| v / rms);
            a
        })
        .collect();
    let mut sign_rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed) ^ 0x5167);
    let scale = 0.15 / (ATOMS as f32).sqrt();
    let templates: Vec<ndarray::Array3<f32>> = (0..spec.classes)
        .map(|_| {
            let mut t = ndarray::Array3::<f32>::zeros((3, h, w));
            for a in &atoms {
                let s: f32 = if sign_rng.random::<bool>() { scale } else { -scale };
                t.scaled_add(s, a);
            }
            t
        })
        .collect();

    let render = |split: u64, per_class: usize| -> Array4<f32> {
        let n = spec.classes * per_class;
        let mut images = Array4::<f32>::zeros((n, 3, h, w));
        for class in 0..spec.classes {
            let t = &templates[class];
            // Per-class noise ramp: early classes are clean anchors that
            // build up the shared atom detectors, late classes sit near the
            // signal-to-noise limit, so accuracy degrades smoothly as model
            // capacity shrinks.
            let sigma = 0.25
                + 0.75 * class as f32 / spec.classes.saturating_sub(1).max(1) as f32;
            for k in 0..per_class {
                let stream = mix64(spec.seed)
                    ^ mix64(((class as u64) << 40) | (split << 39) | k as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let brightness = rng.random_range(-0.08..0.08f32);
                let row = class * per_class + k;
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            let px = 0.5
                                + brightness
                                + t[[c, y, x]]
                                + sigma * sample_normal(&mut rng);
                            images[[row, c, y, x]] =
                                (px.clamp(0.0, 1.0) - 0.5) / 0.5;
                        }
                    }
                }
            }
        }
        images
    };

    let labels = |per_class: usize| -> Vec<usize> {
        (0..spec.classes).flat_map(|c| std::iter::repeat(c).take(per_class)).collect()
    };
    let train = Dataset::new(
        &format!("{}-train", spec.name),
        render(0, spec.train_per_class),
        labels(spec.train_per_class),
        spec.classes,
    )?;
    let test = Dataset::new(
        &format!("{}-test", spec.name),
        render(1, spec.test_per_class),
        labels(spec.test_per_class),
        spec.classes,
    )?;
    Ok((train, test))
}

fn sample_normal<R: Rng>(rng: &mut R) -> f32 {
    rng.sample::<f32, _>(rand_distr::StandardNormal)
}

/// Shuffled batch indices for one training epoch. The final short batch is
/// dropped (unless it is the only one) so every step sees a full batch —
/// batch-norm statistics stay comparable across steps.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed) ^ mix64(epoch as u64));
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map_or(false, |l| l.len() < batch_size) {
        out.pop();
    }
    out
}

/// In-order batch indices covering every sample (for evaluation).
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn normalize_byte(b: u8) -> f32 {
    (b as f32 / 255.0 - 0.5) / 0.5
}

fn read_cifar_file(
    path: &Path,
    label_bytes: usize,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let rec = label_bytes + 3072;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{} is {} bytes, not a multiple of the {rec}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    for chunk in bytes.chunks(rec) {
        // The fine label is the last label byte (CIFAR-100 stores coarse
        // first).
        labels.push(chunk[label_bytes - 1] as usize);
        images.extend(chunk[label_bytes..].iter().map(|&b| normalize_byte(b)));
    }
    Ok(())
}

fn cifar_dataset(name: &str, images: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
    let n = labels.len();
    let arr = Array4::from_shape_vec((n, 3, 32, 32), images)
        .map_err(|e| Error::Data(e.to_string()))?;
    Dataset::new(name, arr, labels, classes)
}

/// Read the `cifar-10-batches-bin` layout: five training shards plus
/// `test_batch.bin`, records of 1 label byte + 3072 pixel bytes.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), 1, &mut images, &mut labels)?;
    }
    let train = cifar_dataset("cifar10-train", images, labels, 10)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), 1, &mut images, &mut labels)?;
    let test = cifar_dataset("cifar10-test", images, labels, 10)?;
    Ok((train, test))
}

/// Read the `cifar-100-binary` layout: `train.bin` / `test.bin`, records of
/// coarse + fine label bytes + 3072 pixel bytes; fine labels are used.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("train.bin"), 2, &mut images, &mut labels)?;
    let train = cifar_dataset("cifar100-train", images, labels, 100)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("test.bin"), 2, &mut images, &mut labels)?;
    let test = cifar_dataset("cifar100-test", images, labels, 100)?;
    Ok((train, test))
}

/// Load a class-per-subdirectory image folder, bilinearly resized to
/// `hw`. Classes are subdirectory names in sorted order.
pub fn load_image_folder(root: &Path, hw: (usize, usize)) -> Result<Dataset> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let (h, w) = hw;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = walkdir::WalkDir::new(dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let resized = image::imageops::resize(
                &img,
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            );
            for c in 0..3usize {
                for y in 0..h {
                    for x in 0..w {
                        images.push(normalize_byte(resized.get_pixel(x as u32, y as u32)[c]));
                    }
                }
            }
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.display())));
    }
    let n = labels.len();
    let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("folder");
    let arr = Array4::from_shape_vec((n, 3, h, w), images)
        .map_err(|e| Error::Data(e.to_string()))?;
    Dataset::new(name, arr, labels, class_dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> TaskSpec {
        TaskSpec { image_hw: (16, 16), ..TaskSpec::new("t", 4, 6, 3, 77) }
    }

    #[test]
    fn tasks_are_deterministic_and_shaped() {
        let (tr1, te1) = make_task(&tiny_spec()).unwrap();
        let (tr2, _) = make_task(&tiny_spec()).unwrap();
        assert_eq!(tr1.images, tr2.images);
        assert_eq!(tr1.images.dim(), (24, 3, 16, 16));
        assert_eq!(te1.images.dim(), (12, 3, 16, 16));
        assert_eq!(tr1.labels[0], 0);
        assert_eq!(tr1.labels[23], 3);
        assert!(tr1.images.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn train_and_test_draws_differ() {
        let (tr, te) = make_task(&tiny_spec()).unwrap();
        let a = tr.images.index_axis(ndarray::Axis(0), 0);
        let b = te.images.index_axis(ndarray::Axis(0), 0);
        assert_ne!(a, b, "train and test use disjoint sample streams");
    }

    #[test]
    fn different_seeds_give_different_tasks() {
        let (a, _) = make_task(&tiny_spec()).unwrap();
        let mut spec = tiny_spec();
        spec.seed = 78;
        let (b, _) = make_task(&spec).unwrap();
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn class_signal_exceeds_noise() {
        // Mean images of two classes must be clearly apart while two
        // samples of one class stay close to their class mean.
        let spec = TaskSpec { image_hw: (16, 16), ..TaskSpec::new("t", 2, 20, 1, 5) };
        let (tr, _) = make_task(&spec).unwrap();
        let mean = |class: usize| -> ndarray::Array3<f32> {
            let mut acc = ndarray::Array3::<f32>::zeros((3, 16, 16));
            for (i, &l) in tr.labels.iter().enumerate() {
                if l == class {
                    acc += &tr.images.index_axis(ndarray::Axis(0), i);
                }
            }
            acc / 20.0
        };
        let m0 = mean(0);
        let m1 = mean(1);
        let between = (&m0 - &m1).mapv(f32::abs).mean().unwrap();
        assert!(between > 0.05, "class means indistinguishable: {between}");
    }

    #[test]
    fn batcher_is_seeded_and_drops_only_short_tails() {
        let a = epoch_batches(10, 4, 3, 0);
        let b = epoch_batches(10, 4, 3, 0);
        assert_eq!(a, b);
        // 10 = 4 + 4 + short 2 -> the tail is dropped.
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|batch| batch.len() == 4));
        let c = epoch_batches(10, 4, 3, 1);
        assert_ne!(a, c, "epochs reshuffle");
        // A dataset smaller than one batch keeps its single short batch.
        let d = epoch_batches(3, 8, 3, 0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].len(), 3);
        // Exact division drops nothing.
        let e = epoch_batches(8, 4, 3, 0);
        let covered: std::collections::BTreeSet<usize> =
            e.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 8);
    }

    #[test]
    fn eval_batches_cover_everything_in_order() {
        let b = eval_batches(5, 2);
        assert_eq!(b, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn cifar10_reader_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        // Two records per shard: label byte + 3072 pixel bytes.
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        rec.push(2);
        rec.extend(std::iter::repeat(0u8).take(3072));
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 2);
        assert_eq!(train.labels[0], 7);
        assert_eq!(train.labels[1], 2);
        assert_eq!(train.images[[0, 0, 0, 0]], 1.0);
        assert_eq!(train.images[[1, 2, 31, 31]], -1.0);
    }

    #[test]
    fn cifar100_reader_takes_the_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![3u8, 42u8];
        rec.extend(std::iter::repeat(128u8).take(3072));
        std::fs::write(dir.path().join("train.bin"), &rec).unwrap();
        std::fs::write(dir.path().join("test.bin"), &rec).unwrap();
        let (train, _) = load_cifar100(dir.path()).unwrap();
        assert_eq!(train.labels, vec![42]);
    }

    #[test]
    fn truncated_cifar_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), [1, 2, 3]).unwrap();
        }
        assert!(load_cifar10(dir.path()).is_err());
    }

    #[test]
    fn image_folder_loads_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, color) in [("b_class", [255u8, 0, 0]), ("a_class", [0u8, 255, 0])] {
            let sub = dir.path().join(class);
            std::fs::create_dir(&sub).unwrap();
            let img = image::RgbImage::from_pixel(5, 5, image::Rgb(color));
            img.save(sub.join("one.png")).unwrap();
        }
        let ds = load_image_folder(dir.path(), (8, 8)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.images.dim(), (2, 3, 8, 8));
        // a_class sorts first: green -> channel 1 saturated.
        assert_eq!(ds.labels, vec![0, 1]);
        assert!(ds.images[[0, 1, 4, 4]] > 0.9);
        assert!(ds.images[[1, 0, 4, 4]] > 0.9);
    }
}
