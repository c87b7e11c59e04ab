//! Datasets: IDX and CIFAR-10 binary loaders, synthetic Gaussian blobs,
//! per-channel normalisation, stratified subsampling and label corruption.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::net::Shape3;
use crate::seed;
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Flattened examples (`n x dim`, row-major) with integer labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub x: Vec<f32>,
    pub y: Vec<u32>,
    pub dim: usize,
}

impl Samples {
    pub fn new(x: Vec<f32>, y: Vec<u32>, dim: usize) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} labels of dimension {dim}",
                x.len(),
                y.len()
            )));
        }
        Ok(Samples { x, y, dim })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Samples {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.example(i));
            y.push(self.y[i]);
        }
        Samples { x, y, dim: self.dim }
    }

    /// Number of examples per class.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.y {
            c[y as usize] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
    pub shape: Shape3,
    pub num_classes: usize,
    pub norm_stats: Option<NormStats>,
    /// Human-readable description of where the data came from.
    pub provenance: String,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &Samples {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Check label ranges, finiteness and buffer shapes.
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            if s.dim != self.shape.numel() || s.x.len() != s.len() * s.dim {
                return Err(Error::ShapeMismatch(format!("{name} split shape")));
            }
            if s.y.iter().any(|&y| y as usize >= self.num_classes) {
                return Err(Error::InvalidArgument(format!("{name} label out of range")));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite inputs")));
            }
        }
        Ok(())
    }
}

/// Raw IDX image file contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            what,
            detail: "truncated header".into(),
        })
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "IDX image file";
        let magic = be_u32(bytes, 0, WHAT)?;
        if magic != IDX_IMAGE_MAGIC {
            return Err(Error::Format {
                what: WHAT,
                detail: format!("bad magic {magic:#010x}"),
            });
        }
        let count = be_u32(bytes, 4, WHAT)? as usize;
        let rows = be_u32(bytes, 8, WHAT)? as usize;
        let cols = be_u32(bytes, 12, WHAT)? as usize;
        let need = count * rows * cols;
        let body = &bytes[16..];
        if body.len() != need {
            return Err(Error::Format {
                what: WHAT,
                detail: format!("expected {need} pixel bytes, found {}", body.len()),
            });
        }
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGE_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("bad magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("expected {count} labels, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| u32::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load one IDX image/label file pair as a split of `1 x rows x cols` images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Samples, Shape3)> {
    let images = IdxImages::parse(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::Format {
            what: "IDX pair",
            detail: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    let shape = Shape3::new(1, images.rows, images.cols);
    let samples = Samples::new(images.to_f32(), labels, shape.numel())?;
    Ok((samples, shape))
}

/// Load an MNIST-layout directory (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`).
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let (train, shape) = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test, test_shape) = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    if shape != test_shape {
        return Err(Error::Format {
            what: "IDX pair",
            detail: "train and test image sizes differ".into(),
        });
    }
    let num_classes = train.y.iter().chain(&test.y).max().map_or(0, |&m| m as usize + 1);
    let ds = Dataset {
        train,
        test,
        shape,
        num_classes: num_classes.max(10),
        norm_stats: None,
        provenance: format!("idx:{}", dir.display()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Parse CIFAR-10 binary batch records (1 label byte + 3072 CHW pixel bytes).
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Samples> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            what: "CIFAR-10 batch",
            detail: format!("{} bytes is not a whole number of records", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut x = Vec::with_capacity(n * 3072);
    let mut y = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format {
                what: "CIFAR-10 batch",
                detail: format!("label {} out of range", rec[0]),
            });
        }
        y.push(u32::from(rec[0]));
        x.extend(rec[1..].iter().map(|&p| f32::from(p) / 255.0));
    }
    Samples::new(x, y, 3072)
}

/// CIFAR-10 from lists of binary batch files.
pub fn load_cifar10(train_files: &[&Path], test_files: &[&Path]) -> Result<Dataset> {
    let load = |files: &[&Path]| -> Result<Samples> {
        let mut all = Samples {
            dim: 3072,
            ..Samples::default()
        };
        for f in files {
            let s = parse_cifar_batch(&read(f)?)?;
            all.x.extend(s.x);
            all.y.extend(s.y);
        }
        Ok(all)
    };
    let ds = Dataset {
        train: load(train_files)?,
        test: load(test_files)?,
        shape: Shape3::new(3, 32, 32),
        num_classes: 10,
        norm_stats: None,
        provenance: "cifar10".into(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Class-conditional unit Gaussians in `d` dimensions.
///
/// Class means sit on a simplex scaled by `separation` (centred unit basis
/// vectors when `classes <= d`, seeded unit directions otherwise). Classes
/// are balanced; a shuffled 80/20 split gives train and test.
pub fn synth_blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || d == 0 || n < classes || !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs: n={n} d={d} classes={classes} separation={separation}"
        )));
    }
    let mut rng = seed::rng(seed);
    let means: Vec<Vec<f64>> = if classes <= d {
        let c = 1.0 / classes as f64;
        (0..classes)
            .map(|k| {
                (0..d)
                    .map(|j| {
                        let e = if j == k { 1.0 } else { 0.0 };
                        let centre = if j < classes { c } else { 0.0 };
                        separation * (e - centre)
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|a| separation * a / norm).collect()
            })
            .collect()
    };
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * d);
    for &y in &labels {
        for &m in &means[y as usize] {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push((m + z) as f32);
        }
    }
    let all = Samples::new(x, labels, d)?;
    let n_train = (n * 4).div_ceil(5).min(n);
    let idx: Vec<usize> = (0..n).collect();
    Ok(Dataset {
        train: all.select(&idx[..n_train]),
        test: all.select(&idx[n_train..]),
        shape: Shape3::flat(d),
        num_classes: classes,
        norm_stats: None,
        provenance: format!("blobs:n={n},d={d},classes={classes},sep={separation},seed={seed}"),
    })
}

/// Replace the labels of exactly `round(fraction * n_train)` distinct
/// training examples with a uniformly drawn different class. The test split
/// is untouched.
pub fn corrupt_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let n = dataset.train.len();
    let k = (fraction * n as f64).round() as usize;
    if k > 0 && dataset.num_classes < 2 {
        return Err(Error::InvalidArgument(
            "cannot change labels with fewer than two classes".into(),
        ));
    }
    let mut out = dataset.clone();
    let mut rng = seed::rng(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let old = out.train.y[i];
        let r = rng.random_range(0..dataset.num_classes as u32 - 1);
        out.train.y[i] = if r >= old { r + 1 } else { r };
    }
    if k > 0 {
        out.provenance = format!("{}+noise{fraction}", dataset.provenance);
    }
    Ok(out)
}

/// Class-stratified subsample: per-class quotas proportional to the class
/// frequencies (largest remainders first), examples drawn uniformly within
/// each class, original order preserved.
pub fn subsample(dataset: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed);
    let train = stratified(&dataset.train, dataset.num_classes, n_train, &mut rng)?;
    let test = stratified(&dataset.test, dataset.num_classes, n_test, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        provenance: format!("{}[{n_train}/{n_test}]", dataset.provenance),
        ..dataset.clone()
    })
}

fn stratified(s: &Samples, classes: usize, want: usize, rng: &mut seed::Rng) -> Result<Samples> {
    if want > s.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {want} examples but only {} available",
            s.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in s.y.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let total = s.len().max(1);
    let mut quota: Vec<usize> = by_class.iter().map(|c| c.len() * want / total).collect();
    let mut rest: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(k, c)| ((c.len() * want) % total, k))
        .collect();
    // largest remainder first, ties to the lowest class
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = want - quota.iter().sum::<usize>();
    for &(_, k) in &rest {
        if missing == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut picked = Vec::with_capacity(want);
    for (k, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        picked.extend_from_slice(&members[..quota[k]]);
    }
    picked.sort_unstable();
    Ok(s.select(&picked))
}

/// Per-channel standardisation with statistics from the training split,
/// applied to both splits. Labels are untouched.
pub fn normalize(dataset: &Dataset) -> Dataset {
    let ch = dataset.shape.channels;
    let sp = dataset.shape.spatial();
    let mut sum = vec![0.0f64; ch];
    let mut sq = vec![0.0f64; ch];
    for ex in dataset.train.x.chunks_exact(dataset.shape.numel().max(1)) {
        for c in 0..ch {
            for &v in &ex[c * sp..(c + 1) * sp] {
                let v = f64::from(v);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (dataset.train.len() * sp).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / count - m * m).max(0.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let apply = |s: &Samples| -> Samples {
        let mut out = s.clone();
        for ex in out.x.chunks_exact_mut(dataset.shape.numel().max(1)) {
            for c in 0..ch {
                for v in &mut ex[c * sp..(c + 1) * sp] {
                    *v = ((f64::from(*v) - mean[c]) / std[c]) as f32;
                }
            }
        }
        out
    };
    Dataset {
        train: apply(&dataset.train),
        test: apply(&dataset.test),
        norm_stats: Some(NormStats { mean, std }),
        ..dataset.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(body);
        out
    }

    #[test]
    fn idx_header_and_scaling() {
        let bytes = idx_bytes(0x803, &[2, 1, 2], &[0, 255, 51, 102]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let img = IdxImages::parse(&bytes).unwrap();
        assert_eq!(img.to_f32(), vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(img.to_bytes(), bytes);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        assert!(IdxImages::parse(&idx_bytes(0x801, &[1, 1, 1], &[0])).is_err());
        assert!(IdxImages::parse(&idx_bytes(0x803, &[2, 1, 1], &[0])).is_err());
        assert!(IdxImages::parse(&[0, 0, 8]).is_err());
        assert!(parse_idx_labels(&idx_bytes(0x801, &[3], &[1, 2])).is_err());
    }

    #[test]
    fn idx_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, idx_bytes(0x803, &[2, 1, 1], &[1, 2])).unwrap();
        std::fs::write(&lp, idx_bytes(0x801, &[3], &[0, 1, 2])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        let s = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(s.y, vec![3]);
        assert_eq!(s.x.len(), 3072);
        assert!(parse_cifar_batch(&bytes[..100]).is_err());
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(500, 3, 5, 2.0, 1).unwrap();
        assert_eq!(a, synth_blobs(500, 3, 5, 2.0, 1).unwrap());
        assert_eq!(a.train.len(), 400);
        assert_eq!(a.test.len(), 100);
        let mut counts = a.train.class_counts(5);
        for (c, t) in counts.iter_mut().zip(a.test.class_counts(5)) {
            *c += t;
        }
        assert!(counts.iter().all(|&c| c == 100));
        a.validate().unwrap();
    }

    #[test]
    fn zero_separation_means_labels_carry_no_signal() {
        let a = synth_blobs(60, 3, 3, 0.0, 1).unwrap();
        let b = synth_blobs(60, 3, 3, 5.0, 1).unwrap();
        // same noise draws, same labels, means collapsed
        assert_eq!(a.train.y, b.train.y);
        let mean_by = |ds: &Dataset, k: u32| -> f64 {
            let v: Vec<f64> = ds
                .train
                .y
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == k)
                .map(|(i, _)| f64::from(ds.train.example(i)[0]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean_by(&b, 0) - mean_by(&b, 1)).abs() > 3.0);
        assert!((mean_by(&a, 0) - mean_by(&a, 1)).abs() < 1.5);
    }

    #[test]
    fn corruption_counts() {
        let ds = synth_blobs(1250, 2, 4, 1.0, 3).unwrap();
        assert_eq!(ds.train.len(), 1000);
        assert_eq!(corrupt_labels(&ds, 0.0, 1).unwrap(), ds);
        let all = corrupt_labels(&ds, 1.0, 1).unwrap();
        assert!(all.train.y.iter().zip(&ds.train.y).all(|(a, b)| a != b));
        let q = corrupt_labels(&ds, 0.25, 1).unwrap();
        let changed = q.train.y.iter().zip(&ds.train.y).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 250);
        assert_eq!(q.test, ds.test);
        assert!(corrupt_labels(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn normalize_stats_and_idempotence() {
        let ds = synth_blobs(300, 3, 3, 4.0, 2).unwrap();
        let n1 = normalize(&ds);
        let st = n1.norm_stats.as_ref().unwrap();
        assert_eq!(st.mean.len(), 3);
        let again = normalize(&n1);
        let s2 = again.norm_stats.unwrap();
        for c in 0..3 {
            assert!(s2.mean[c].abs() < 1e-6, "{}", s2.mean[c]);
            assert!((s2.std[c] - 1.0).abs() < 1e-6);
        }
        for (a, b) in again.train.x.iter().zip(&n1.train.x) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(n1.train.y, ds.train.y);
        assert_eq!(n1.test.y, ds.test.y);
    }

    #[test]
    fn stratified_subsample() {
        let ds = synth_blobs(1000, 2, 4, 1.0, 5).unwrap();
        let s = subsample(&ds, 101, 42, 7).unwrap();
        assert_eq!(s.train.len(), 101);
        assert_eq!(s.test.len(), 42);
        let counts = s.train.class_counts(4);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 2, "{counts:?}");
        assert_eq!(s, subsample(&ds, 101, 42, 7).unwrap());
        assert!(subsample(&ds, 5000, 1, 7).is_err());
    }
}
