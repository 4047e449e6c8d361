//! IDX datasets, a synthetic oriented-bar generator, and seeded batching.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use encap_autodiff::{cast, Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]`, stored as `f32` `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.sample_len() {
            return Err(Error::Length(format!(
                "{} pixels for {} samples of {}",
                self.images.len(),
                self.len(),
                self.sample_len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Input(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut crc = flate2::Crc::new();
    crc.update(&raw);
    log::info!("{}: {} bytes, crc32 {:08x}", path.display(), raw.len(), crc.sum());
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX buffer with the expected magic, returning extents and payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Length("IDX header shorter than the magic number".into()));
    }
    let m = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if m != magic {
        return Err(Error::Format(format!("IDX magic {m:#010x}, expected {magic:#010x}")));
    }
    let ndim = (m & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Length(format!("IDX header needs {header} bytes, file has {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(Error::Length(format!("IDX header promises {n} bytes, payload has {}", payload.len())));
    }
    Ok((dims, payload))
}

/// Serializes an unsigned-byte IDX buffer.
pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Writes an IDX file, gzipped when the path ends in `.gz`.
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let bytes = encode_idx(magic, dims, payload);
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = f;
        f.write_all(&bytes)
    };
    res.map_err(|e| Error::io(path, e))
}

/// Loads an image/label IDX pair (plain or gzipped) with 10 classes.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let (idims, ipx) = parse_idx(&ib, IMAGES_MAGIC)?;
    let (ldims, lbl) = parse_idx(&lb, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Length(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let ds = Dataset {
        images: ipx.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: lbl.to_vec(),
        channels: 1,
        height: idims[1],
        width: idims[2],
        classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

/// Back to IDX bytes: `(images, labels)`.
pub fn to_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let px: Vec<u8> = ds.images.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    (
        encode_idx(IMAGES_MAGIC, &[ds.len(), ds.height, ds.width], &px),
        encode_idx(LABELS_MAGIC, &[ds.len()], &ds.labels),
    )
}

/// Loads `<split>-images-idx3-ubyte[.gz]` and the matching labels from `dir`.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let pick = |stem: &str| {
        let gz = dir.join(format!("{split}-{stem}-ubyte.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(format!("{split}-{stem}-ubyte"))
        }
    };
    load_idx(&pick("images-idx3"), &pick("labels-idx1"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Bar through `(cx, cy)` at angle `theta`, with soft edges.
fn bar(size: usize, theta: f64, cx: f64, cy: f64) -> Vec<f32> {
    let (s, c) = theta.sin_cos();
    let half_len = size as f64 * 0.35;
    let half_width = (size as f64 * 0.06).max(0.75);
    let mut img = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let v = (half_width + 0.5 - across.abs()).clamp(0.0, 1.0) * (half_len + 0.5 - along.abs()).clamp(0.0, 1.0);
            img[y * size + x] = v as f32;
        }
    }
    img
}

/// Canonical pattern of class `k`: a centred bar at angle `kπ/K`.
pub fn base_pattern(spec: &SyntheticSpec, k: usize) -> Vec<f32> {
    let mid = spec.size as f64 / 2.0;
    bar(spec.size, k as f64 * PI / spec.classes as f64, mid, mid)
}

/// Class `k` sample `0` is the canonical pattern; later samples jitter the
/// angle by up to a quarter of the class spacing and shift by up to 15% of
/// the side. Gaussian pixel noise of std `noise` is added and clipped.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > 256 || spec.size < 4 || spec.noise < 0.0 {
        return Err(Error::Config(format!("unusable synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let n = spec.size * spec.size;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * n);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    let mid = spec.size as f64 / 2.0;
    let shift = spec.size as f64 * 0.15;
    for s in 0..spec.per_class {
        for k in 0..spec.classes {
            let theta = k as f64 * PI / spec.classes as f64;
            let mut img = if s == 0 {
                base_pattern(spec, k)
            } else {
                let jitter = PI / spec.classes as f64 / 4.0;
                let t = theta + rng.random_range(-jitter..=jitter);
                bar(spec.size, t, mid + rng.random_range(-shift..=shift), mid + rng.random_range(-shift..=shift))
            };
            if spec.noise > 0.0 {
                for p in &mut img {
                    *p = (*p as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            images.extend_from_slice(&img);
            labels.push(k as u8);
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 1,
        height: spec.size,
        width: spec.size,
        classes: spec.classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchCfg {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    /// Pad by one pixel and crop back at a random offset.
    pub augment: bool,
    /// Zero-pad (centred) to this side length; 0 keeps the native size.
    pub pad_to: usize,
}

#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    /// Dataset indices in batch order.
    pub indices: Vec<usize>,
}

/// Deterministic sample order of one epoch.
pub fn epoch_order(n: usize, seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Batches of one epoch. The last batch may be smaller.
pub struct Batches<'a, F> {
    ds: &'a Dataset,
    cfg: BatchCfg,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    _f: std::marker::PhantomData<F>,
}

pub fn batches<F: Real>(ds: &Dataset, cfg: BatchCfg, epoch: u64) -> Result<Batches<'_, F>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if cfg.pad_to != 0 && (cfg.pad_to < ds.height || cfg.pad_to < ds.width) {
        return Err(Error::Config(format!("cannot pad {}×{} down to {}", ds.height, ds.width, cfg.pad_to)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.unwrap_or(0) ^ 0x5eed_a11c);
    rng.set_stream(epoch);
    Ok(Batches {
        ds,
        cfg,
        order: epoch_order(ds.len(), cfg.shuffle_seed, epoch),
        pos: 0,
        rng,
        _f: std::marker::PhantomData,
    })
}

impl<F: Real> Batches<'_, F> {
    fn out_side(&self) -> (usize, usize) {
        if self.cfg.pad_to == 0 {
            (self.ds.height, self.ds.width)
        } else {
            (self.cfg.pad_to, self.cfg.pad_to)
        }
    }
}

impl<F: Real> Iterator for Batches<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (c, h, w) = (self.ds.channels, self.ds.height, self.ds.width);
        let (oh, ow) = self.out_side();
        let (top, left) = ((oh - h) / 2, (ow - w) / 2);
        let mut data = vec![F::zero(); indices.len() * c * oh * ow];
        for (b, &i) in indices.iter().enumerate() {
            // Crop offset inside the one-pixel padded image; (1, 1) is the identity.
            let (dy, dx) = if self.cfg.augment {
                (self.rng.random_range(0..=2usize), self.rng.random_range(0..=2usize))
            } else {
                (1, 1)
            };
            let img = self.ds.image(i);
            for ch in 0..c {
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        data[((b * c + ch) * oh + top + y) * ow + left + x] = cast(img[(ch * h + sy - 1) * w + sx - 1] as f64);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.ds.labels[i] as usize).collect();
        let images = Tensor::new(vec![indices.len(), c, oh, ow], data).expect("batch shape");
        Some(Batch { images, labels, indices })
    }
}
