//! Real datasets (IDX image files), synthetic toy datasets, and the
//! learnable synthetic set.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization statistics, fitted on a training split and
/// reused verbatim for its test split.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// An immutable, class-indexed dataset of normalized images.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// [N, C, H, W]
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per-class sample positions; partitions 0..N-1.
    pub class_index: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub norm: NormStats,
}

impl Dataset {
    /// Build from images already scaled to their working range. When `stats`
    /// is `None`, per-channel statistics are fitted and applied; otherwise
    /// the given statistics are applied.
    pub fn from_raw(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        stats: Option<NormStats>,
    ) -> Result<Self> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Consistency(format!(
                "images must be [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        let norm = match stats {
            Some(st) => {
                if st.mean.len() != c || st.std.len() != c {
                    return Err(Error::Consistency(format!(
                        "stats for {} channels applied to {} channels",
                        st.mean.len(),
                        c
                    )));
                }
                st
            }
            None => fit_stats(&images),
        };
        let images = apply_stats(&images, &norm);
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(Self {
            images,
            labels,
            class_index,
            num_classes,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width)
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }
}

fn fit_stats(images: &Tensor) -> NormStats {
    let s = images.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = images.data();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    let count = (n * hw) as f64;
    for img in 0..n {
        for ch in 0..c {
            mean[ch] += d[(img * c + ch) * hw..(img * c + ch + 1) * hw]
                .iter()
                .sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for img in 0..n {
        for ch in 0..c {
            std[ch] += d[(img * c + ch) * hw..(img * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in std.iter_mut() {
        *v = (*v / count).sqrt().max(1e-12);
    }
    NormStats { mean, std }
}

fn apply_stats(images: &Tensor, st: &NormStats) -> Tensor {
    let s = images.shape().to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    let d = images.data();
    Tensor::from_fn(&s, |i| {
        let ch = (i / hw) % c;
        (d[i] - st.mean[ch]) / st.std[ch]
    })
}

/// Invert the stored normalization and clamp to [0, 1] (for image dumps).
pub fn denormalize_clamped(images: &Tensor, st: &NormStats) -> Tensor {
    let s = images.shape().to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    let d = images.data();
    Tensor::from_fn(&s, |i| {
        let ch = (i / hw) % c;
        (d[i] * st.std[ch] + st.mean[ch]).clamp(0.0, 1.0)
    })
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn read_u32_be(buf: &[u8], off: usize, path: &Path) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: "truncated header".into(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Load a big-endian IDX image/label file pair (the MNIST layout), scale
/// pixels to [0,1], fit-or-apply channel normalization, and optionally keep
/// only the first `limit_per_class` samples of each class.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit_per_class: Option<usize>,
    stats: Option<NormStats>,
) -> Result<Dataset> {
    let ibuf = read_file(images_path)?;
    let lbuf = read_file(labels_path)?;

    let imagic = read_u32_be(&ibuf, 0, images_path)?;
    if imagic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            msg: format!("bad magic {imagic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let lmagic = read_u32_be(&lbuf, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            msg: format!("bad magic {lmagic}, expected {IDX_LABELS_MAGIC}"),
        });
    }

    let n = read_u32_be(&ibuf, 4, images_path)? as usize;
    let h = read_u32_be(&ibuf, 8, images_path)? as usize;
    let w = read_u32_be(&ibuf, 12, images_path)? as usize;
    let nl = read_u32_be(&lbuf, 4, labels_path)? as usize;
    if n != nl {
        return Err(Error::Consistency(format!(
            "{n} images vs {nl} labels"
        )));
    }
    if ibuf.len() != 16 + n * h * w {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            msg: format!("payload is {} bytes, header implies {}", ibuf.len() - 16, n * h * w),
        });
    }
    if lbuf.len() != 8 + n {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            msg: "label payload length mismatch".into(),
        });
    }

    let raw_labels: Vec<usize> = lbuf[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = raw_labels.iter().copied().max().map_or(0, |m| m + 1);
    if num_classes == 0 {
        return Err(Error::Consistency("empty dataset".into()));
    }

    // First-k-per-class truncation in file order keeps runs reproducible.
    let keep: Vec<usize> = match limit_per_class {
        None => (0..n).collect(),
        Some(k) => {
            let mut counts = vec![0usize; num_classes];
            (0..n)
                .filter(|&i| {
                    let c = raw_labels[i];
                    if counts[c] < k {
                        counts[c] += 1;
                        true
                    } else {
                        false
                    }
                })
                .collect()
        }
    };

    let hw = h * w;
    let mut data = Vec::with_capacity(keep.len() * hw);
    for &i in &keep {
        data.extend(
            ibuf[16 + i * hw..16 + (i + 1) * hw]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    let images = Tensor::new(vec![keep.len(), 1, h, w], data)?;
    let labels: Vec<usize> = keep.iter().map(|&i| raw_labels[i]).collect();
    Dataset::from_raw(images, labels, num_classes, stats)
}

/// Deterministic unit direction for class `c` in `dim` dimensions: the
/// signed axes first, then seeded random directions.
fn class_direction(c: usize, dim: usize) -> Vec<f64> {
    let mut u = vec![0.0; dim];
    if c < 2 * dim {
        u[c % dim] = if c < dim { 1.0 } else { -1.0 };
        return u;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10b_5000 + c as u64);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    loop {
        for v in u.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for v in u.iter_mut() {
                *v /= norm;
            }
            return u;
        }
    }
}

/// Gaussian class blobs: class `c` is unit isotropic noise centered at
/// `separation * u_c`. Stored unnormalized (identity statistics) so the
/// analytic geometry is preserved.
pub fn gaussian_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::Contract(format!(
            "gaussian_blobs: need C >= 2, per_class >= 1, dim >= 1 (got {num_classes}, {per_class}, {dim})"
        )));
    }
    if separation < 0.0 {
        return Err(Error::Contract("gaussian_blobs: separation must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let center = class_direction(c, dim);
        for _ in 0..per_class {
            for (j, &cj) in center.iter().enumerate().take(dim) {
                let _ = j;
                data.push(separation * cj + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 1, 1, dim], data)?;
    Dataset::from_raw(images, labels, num_classes, Some(NormStats::identity(1)))
}

/// Class centers used by `gaussian_blobs` (for analytic classifiers in tests).
pub fn blob_centers(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            class_direction(c, dim)
                .into_iter()
                .map(|v| v * separation)
                .collect()
        })
        .collect()
}

/// Copy the given sample rows out of [N,C,H,W] images.
pub fn gather_rows(images: &Tensor, idx: &[usize]) -> Tensor {
    let s = images.shape();
    let stride: usize = s[1..].iter().product();
    let d = images.data();
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::from_fn(&shape, |i| d[idx[i / stride] * stride + i % stride])
}

/// Uniform without-replacement batch from one class; if `n` exceeds the
/// class size the whole class is returned, shuffled.
pub fn sample_class_batch(
    ds: &Dataset,
    class: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let members = ds
        .class_index
        .get(class)
        .ok_or_else(|| Error::Sampling(format!("class {class} out of range")))?;
    if members.is_empty() {
        return Err(Error::Sampling(format!("class {class} has no samples")));
    }
    let mut pool = members.clone();
    pool.shuffle(rng);
    pool.truncate(n.min(members.len()));
    let images = gather_rows(&ds.images, &pool);
    let labels = pool.iter().map(|&i| ds.labels[i]).collect();
    Ok((images, labels))
}

/// A fixed-size batch of mixed-class samples (overfit-criterion validation).
pub fn sample_mixed_batch(
    ds: &Dataset,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::Sampling("dataset is empty".into()));
    }
    let idx: Vec<usize> = (0..n.min(ds.len()))
        .map(|_| rng.random_range(0..ds.len()))
        .collect();
    let images = gather_rows(&ds.images, &idx);
    let labels = idx.iter().map(|&i| ds.labels[i]).collect();
    Ok((images, labels))
}

/// How the synthetic images start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthInit {
    Noise,
    RealSample,
}

/// The learnable set S: `ipc` images per class, labels fixed and exactly
/// balanced, grouped by class along axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    /// [IPC*C, C_in, H, W]; trainable during condensation.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ipc: usize,
}

impl SyntheticSet {
    pub fn num_classes(&self) -> usize {
        self.labels.len() / self.ipc
    }

    /// Row range of class `c`.
    pub fn class_range(&self, c: usize) -> std::ops::Range<usize> {
        c * self.ipc..(c + 1) * self.ipc
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn check_balanced(&self) -> Result<()> {
        for c in 0..self.num_classes() {
            for i in self.class_range(c) {
                if self.labels[i] != c {
                    return Err(Error::Consistency(format!(
                        "label at row {i} is {} but the slot belongs to class {c}",
                        self.labels[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn init_synthetic(
    ds: &Dataset,
    ipc: usize,
    mode: SynthInit,
    seed: u64,
) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::SyntheticInit("ipc must be >= 1".into()));
    }
    let (c_in, h, w) = ds.input_shape();
    let classes = ds.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..classes * ipc).map(|i| i / ipc).collect();
    let images = match mode {
        SynthInit::Noise => {
            let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
            Tensor::from_fn(&[classes * ipc, c_in, h, w], |_| normal.sample(&mut rng))
        }
        SynthInit::RealSample => {
            let mut picks = Vec::with_capacity(classes * ipc);
            for c in 0..classes {
                let members = &ds.class_index[c];
                if members.len() < ipc {
                    return Err(Error::SyntheticInit(format!(
                        "class {c} has {} samples, ipc = {ipc}",
                        members.len()
                    )));
                }
                let mut pool = members.clone();
                pool.shuffle(&mut rng);
                picks.extend_from_slice(&pool[..ipc]);
            }
            gather_rows(&ds.images, &picks)
        }
    };
    Ok(SyntheticSet {
        images,
        labels,
        ipc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        images: &[Vec<u8>],
        labels: &[u8],
        h: usize,
        w: usize,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx3-ubyte");
        let lp = dir.join("labs.idx1-ubyte");
        let mut f = File::create(&ip).unwrap();
        f.write_all(&2051u32.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
        let mut f = File::create(&lp).unwrap();
        f.write_all(&2049u32.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<u8>> = (0..6).map(|i| vec![(i * 40) as u8; 4]).collect();
        let labels = vec![0u8, 1, 0, 1, 0, 1];
        let (ip, lp) = write_idx_pair(dir.path(), &images, &labels, 2, 2);

        let ds = load_idx(&ip, &lp, None, None).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.input_shape(), (1, 2, 2));

        let trunc = load_idx(&ip, &lp, Some(2), None).unwrap();
        assert_eq!(trunc.len(), 4);
        assert!(trunc.class_index.iter().all(|v| v.len() == 2));
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad.idx");
        let lp = dir.path().join("labs.idx");
        std::fs::write(&ip, 2050u32.to_be_bytes()).unwrap();
        std::fs::write(&lp, 2049u32.to_be_bytes()).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, None, None),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<u8>> = (0..3).map(|_| vec![0u8; 4]).collect();
        let labels = vec![0u8, 1];
        let (ip, lp) = write_idx_pair(dir.path(), &images, &labels, 2, 2);
        assert!(matches!(
            load_idx(&ip, &lp, None, None),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn normalization_statistics_are_exact_on_fit_split() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<u8>> = (0..8).map(|i| (0..9).map(|j| (i * 13 + j * 7) as u8).collect()).collect();
        let labels = vec![0u8, 1, 2, 0, 1, 2, 0, 1];
        let (ip, lp) = write_idx_pair(dir.path(), &images, &labels, 3, 3);
        let ds = load_idx(&ip, &lp, None, None).unwrap();
        let d = ds.images.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 1e-9, "std {}", var.sqrt());
    }

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a = gaussian_blobs(3, 5, 2, 4.0, 42).unwrap();
        let b = gaussian_blobs(3, 5, 2, 4.0, 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.class_index.iter().all(|v| v.len() == 5));
        let c = gaussian_blobs(3, 5, 2, 4.0, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn blobs_nearest_center_accuracy_at_sep8() {
        let ds = gaussian_blobs(2, 2000, 2, 8.0, 7).unwrap();
        let centers = blob_centers(2, 2, 8.0);
        let d = ds.images.data();
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let x = &d[i * 2..(i + 1) * 2];
            let mut best = (f64::INFINITY, 0usize);
            for (c, ctr) in centers.iter().enumerate() {
                let dist: f64 = x
                    .iter()
                    .zip(ctr.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.999, "nearest-center accuracy {acc}");
    }

    #[test]
    fn class_batch_contract() {
        let ds = gaussian_blobs(3, 7, 2, 2.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (imgs, labels) = sample_class_batch(&ds, 1, 100, &mut rng).unwrap();
        assert_eq!(imgs.shape()[0], 7);
        assert!(labels.iter().all(|&l| l == 1));

        let empty = Dataset::from_raw(Tensor::zeros(&[1, 1, 1, 1]), vec![0], 2, None).unwrap();
        assert!(matches!(
            sample_class_batch(&empty, 1, 1, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn class_batch_selection_is_uniform() {
        // Pixel value encodes the sample index, so every draw is attributable.
        let images = Tensor::from_fn(&[10, 1, 1, 1], |i| i as f64);
        let labels = vec![0usize; 10];
        let ds = Dataset::from_raw(images, labels, 1, Some(NormStats::identity(1))).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = vec![0usize; 10];
        let reps = 10_000;
        for _ in 0..reps {
            let (imgs, _) = sample_class_batch(&ds, 0, 3, &mut rng).unwrap();
            for &v in imgs.data() {
                counts[v as usize] += 1;
            }
        }
        let p = 3.0 / 10.0;
        let sigma = ((reps as f64) * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - reps as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "element {i}: count {c} deviates {dev:.1} > 3 sigma");
        }
    }

    #[test]
    fn synthetic_init_contracts() {
        let ds = gaussian_blobs(10, 4, 3, 2.0, 5).unwrap();
        let s = init_synthetic(&ds, 1, SynthInit::Noise, 2).unwrap();
        assert_eq!(s.images.shape()[0], 10);
        assert_eq!(s.labels, (0..10).collect::<Vec<_>>());
        s.check_balanced().unwrap();

        // noise mean within 3 sigma / sqrt(n) of zero
        let d = s.images.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!(mean.abs() <= 3.0 / (d.len() as f64).sqrt());

        // real_sample picks rows of the dataset, exactly
        let r = init_synthetic(&ds, 2, SynthInit::RealSample, 3).unwrap();
        r.check_balanced().unwrap();
        let row = |t: &Tensor, i: usize| t.data()[i * 3..(i + 1) * 3].to_vec();
        for i in 0..r.images.shape()[0] {
            let target = row(&r.images, i);
            assert!(
                (0..ds.len()).any(|j| row(&ds.images, j) == target),
                "synthetic row {i} not found in dataset"
            );
        }

        // ipc larger than class size
        assert!(matches!(
            init_synthetic(&ds, 5, SynthInit::RealSample, 1),
            Err(Error::SyntheticInit(_))
        ));
    }
}
