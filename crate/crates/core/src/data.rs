//! Labeled image datasets: synthetic generation, IDX files and sharding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `N × C × H × W` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return dim_err(format!("{n} images but {} labels", labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let labels = rows
            .iter()
            .map(|&r| self.labels.get(r).copied().ok_or_else(|| Error::Dimension(format!("row {r} out of range"))))
            .collect::<Result<_>>()?;
        Ok(Self { images: self.images.gather_batch(rows)?, labels })
    }

    /// Rows `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_batch(start, count)?,
            labels: self.labels[start..start + count].to_vec(),
        })
    }
}

/// Parameters of the template-plus-noise image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub classes: usize,
    pub samples: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Per-pixel RMS of each class template.
    pub class_separation: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Seed of the generator, used when the params are read from a file.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return input_err("synthetic data needs at least two classes");
        }
        if self.image_size == 0 || self.channels == 0 {
            return input_err("image_size and channels must be positive");
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return input_err("class_separation must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return input_err("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// One random spatial template per class: white noise smoothed by a 3×3 box
/// filter, shifted to zero mean and scaled to RMS `class_separation`.
pub fn class_templates(params: &SyntheticParams, rng: &mut impl Rng) -> Result<Vec<Vec<f32>>> {
    params.validate()?;
    let (c, s) = (params.channels, params.image_size);
    let mut out = Vec::with_capacity(params.classes);
    for _ in 0..params.classes {
        let raw: Vec<f64> = (0..c * s * s).map(|_| StandardNormal.sample(rng)).collect();
        let mut smooth = vec![0.0f64; raw.len()];
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if (0..s as i64).contains(&yy) && (0..s as i64).contains(&xx) {
                                acc += raw[(ch * s + yy as usize) * s + xx as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    smooth[(ch * s + y) * s + x] = acc / cnt;
                }
            }
        }
        let n = smooth.len() as f64;
        let mean = smooth.iter().sum::<f64>() / n;
        let rms = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        out.push(smooth.iter().map(|v| ((v - mean) / rms * params.class_separation) as f32).collect());
    }
    Ok(out)
}

/// Balanced labelled samples `template + N(0, noise_sigma²)` in random order.
pub fn generate_synthetic_dataset(params: &SyntheticParams, rng: &mut impl Rng) -> Result<Dataset> {
    let templates = class_templates(params, rng)?;
    let mut labels: Vec<usize> = (0..params.samples).map(|i| i % params.classes).collect();
    labels.shuffle(rng);
    let pixels = templates[0].len();
    let mut data = Vec::with_capacity(params.samples * pixels);
    for &label in &labels {
        for &t in &templates[label] {
            let noise: f64 = StandardNormal.sample(rng);
            data.push(t + (noise * params.noise_sigma) as f32);
        }
    }
    let s = params.image_size;
    Dataset::new(Tensor::new(vec![params.samples, params.channels, s, s], data)?, labels)
}

/// Disjoint uniformly random shards of exactly `shard_size` samples.
pub fn partition_data(dataset: &Dataset, n_devices: usize, shard_size: usize, rng: &mut impl Rng) -> Result<Vec<Dataset>> {
    let need = n_devices.checked_mul(shard_size).ok_or_else(|| Error::Input("shard request overflows".into()))?;
    if need > dataset.len() {
        return input_err(format!("{n_devices} shards of {shard_size} need {need} samples, dataset has {}", dataset.len()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    order.chunks(shard_size.max(1)).take(n_devices).map(|rows| dataset.subset(rows)).collect()
}

fn format_err<T>(path: &Path, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { path: path.to_path_buf(), msg: msg.into() })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Parses the IDX header and returns the dimensions and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |i: usize| -> Option<u32> { bytes.get(4 * i..4 * i + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())) };
    let Some(found) = word(0) else {
        return format_err(path, "file shorter than the magic number");
    };
    if found != magic {
        return format_err(path, format!("magic {found:#010x}, expected {magic:#010x}"));
    }
    let n_dims = (found & 0xff) as usize;
    let dims = (1..=n_dims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .map_or_else(|| format_err(path, "truncated dimension header"), Ok)?;
    let payload = &bytes[4 * (n_dims + 1)..];
    let expected: usize = dims.iter().product();
    if payload.len() < expected {
        return format_err(path, format!("{} data bytes, header announces {expected}", payload.len()));
    }
    Ok((dims, &payload[..expected]))
}

/// Reads an unsigned-byte IDX image file (`N×H×W` or `N×C×H×W`) and its label
/// file; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let lab_bytes = read_file(labels_path)?;
    // Multi-channel image files use the four-dimensional variant of the magic.
    let magic = if img_bytes.get(..4) == Some(&[0, 0, 8, 4]) { IDX_IMAGES4_MAGIC } else { IDX_IMAGES_MAGIC };
    let (idims, pixels) = parse_idx(images_path, &img_bytes, magic)?;
    let (ldims, labels) = parse_idx(labels_path, &lab_bytes, IDX_LABELS_MAGIC)?;
    let shape = match idims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!("dimension count is fixed by the magic"),
    };
    if ldims[0] != shape[0] {
        return format_err(labels_path, format!("{} labels for {} images", ldims[0], shape[0]));
    }
    let images = Tensor::new(shape, pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes a dataset as IDX files. Pixels are min/max scaled to `0..=255`;
/// single-channel images use the three-dimensional image layout.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    write_idx_in_range(dataset, dataset.images.min_max(), images_path, labels_path)
}

/// Like [`write_idx`], but maps `range` onto `0..=255`, so several splits can
/// share one pixel scale. Values outside the range saturate.
pub fn write_idx_in_range(dataset: &Dataset, range: (f32, f32), images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = dataset.image_shape();
    let n = dataset.len();
    if let Some(&big) = dataset.labels.iter().find(|&&l| l > 255) {
        return input_err(format!("label {big} does not fit in a byte"));
    }
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
    let mut img = Vec::with_capacity(4 * (dims.len() + 1) + dataset.images.len());
    img.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for d in &dims {
        img.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|&p| ((p - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(classes: usize, samples: usize, sep: f64, noise: f64) -> SyntheticParams {
        SyntheticParams { classes, samples, image_size: 8, channels: 1, class_separation: sep, noise_sigma: noise, seed: 0 }
    }

    fn nearest_template_accuracy(d: &Dataset, templates: &[Vec<f32>]) -> f64 {
        let pixels = templates[0].len();
        let hits = (0..d.len())
            .filter(|&i| {
                let x = &d.images.data()[i * pixels..(i + 1) * pixels];
                let dist = |t: &Vec<f32>| x.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
                let best = (0..templates.len()).min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b]))).unwrap();
                best == d.labels[i]
            })
            .count();
        hits as f64 / d.len() as f64
    }

    #[test]
    fn noiseless_samples_equal_templates() {
        let p = params(2, 20, 1.0, 0.0);
        let templates = class_templates(&p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d = generate_synthetic_dataset(&p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(nearest_template_accuracy(&d, &templates), 1.0);
        for i in 0..d.len() {
            assert_eq!(&d.images.data()[i * 64..(i + 1) * 64], &templates[d.labels[i]][..]);
        }
    }

    #[test]
    fn balanced_labels_and_determinism() {
        let p = params(3, 100, 1.0, 0.3);
        let a = generate_synthetic_dataset(&p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_synthetic_dataset(&p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let counts: Vec<usize> = (0..3).map(|k| a.labels.iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(generate_synthetic_dataset(&params(1, 10, 1.0, 0.1), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(generate_synthetic_dataset(&params(2, 10, 0.0, 0.1), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn shards_are_disjoint_and_exact() {
        let mut p = params(4, 60, 1.0, 0.1);
        p.image_size = 2;
        let mut d = generate_synthetic_dataset(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // Tag every sample so shards can be traced back to rows.
        d.images = Tensor::from_fn(&[60, 1, 2, 2], |i| (i / 4) as f32);
        let shards = partition_data(&d, 6, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut seen: Vec<usize> = shards
            .iter()
            .flat_map(|s| {
                assert_eq!(s.len(), 10);
                s.images.data().chunks(4).map(|c| c[0] as usize).collect::<Vec<_>>()
            })
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..60).collect::<Vec<_>>());
        assert!(partition_data(&d, 7, 10, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
        assert_eq!(partition_data(&d, 1, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().len(), 1);
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_hand_built_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        fs::write(&lp, idx_bytes(0x801, &[2], &[7, 1])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.labels, vec![7, 1]);
        assert_eq!(&d.images.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&lp, idx_bytes(0x801, &[2], &[0, 1])).unwrap();
        fs::write(&ip, idx_bytes(0x802, &[2, 2, 2], &[0; 8])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::write(&ip, idx_bytes(0x803, &[2, 2, 2], &[0; 7])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::write(&ip, idx_bytes(0x803, &[3, 1, 1], &[0; 3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_image_set() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, idx_bytes(0x803, &[0, 4, 4], &[])).unwrap();
        fs::write(&lp, idx_bytes(0x801, &[0], &[])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.images.shape(), &[0, 1, 4, 4]);
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let d = generate_synthetic_dataset(&params(3, 9, 1.0, 0.2), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, d.labels);
        let (lo, hi) = d.images.min_max();
        for (a, b) in back.images.data().iter().zip(d.images.data()) {
            assert!((a - (b - lo) / (hi - lo)).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn shared_range_keeps_splits_on_one_scale() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(Tensor::new(vec![2, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), vec![0, 1]).unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_in_range(&d.slice(1, 1).unwrap(), (0.0, 3.0), &img, &lab).unwrap();
        let bytes = std::fs::read(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[170, 255]);
        write_idx(&d.slice(1, 1).unwrap(), &img, &lab).unwrap();
        let bytes = std::fs::read(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
    }
}
