//! Domain datasets: MNIST IDX ingestion, rotated-MNIST domains, Gaussian
//! blob domains with controllable shift, and server/client/test assignment.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{InputShape, Tensor};
use crate::seeding::{rng_for, stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { offset: usize, expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes at offset {offset}, have {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("count mismatch: {images} images vs {labels} labels (label header at offset 4)")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {value} at offset {offset} is outside [0, {classes})")]
    InvalidLabel { offset: usize, value: u8, classes: usize },
    #[error("labels of domain {0} are hidden from this caller")]
    LabelsHidden(String),
    #[error("requested {requested} examples from a domain of {available}")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain plan: {0}")]
    Plan(String),
}

/// One domain's examples. Labels are always stored; `labels_visible`
/// decides whether training code may read them through [`labels`].
///
/// [`labels`]: DomainDataset::labels
#[derive(Debug)]
pub struct DomainDataset {
    id: String,
    input: InputShape,
    classes: usize,
    examples: Tensor,
    labels: Vec<usize>,
    labels_visible: bool,
    diagnostic_reads: AtomicUsize,
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            input: self.input,
            classes: self.classes,
            examples: self.examples.clone(),
            labels: self.labels.clone(),
            labels_visible: self.labels_visible,
            diagnostic_reads: AtomicUsize::new(self.diagnostic_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.input == other.input
            && self.classes == other.classes
            && self.examples == other.examples
            && self.labels == other.labels
            && self.labels_visible == other.labels_visible
    }
}

impl DomainDataset {
    pub fn new(
        id: impl Into<String>,
        input: InputShape,
        classes: usize,
        examples: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let n = labels.len();
        if n == 0 {
            return Err(DataError::InvalidArgument(format!("domain {id} is empty")));
        }
        if examples.shape() != [n, input.len()] {
            return Err(DataError::InvalidArgument(format!(
                "domain {id}: examples {:?} do not match {n} x {}",
                examples.shape(),
                input.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidArgument(format!("domain {id}: label {bad} >= {classes}")));
        }
        Ok(Self {
            id,
            input,
            classes,
            examples,
            labels,
            labels_visible: true,
            diagnostic_reads: AtomicUsize::new(0),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n x input` examples, flattened row-major per example.
    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible
    }

    pub fn set_labels_visible(&mut self, visible: bool) {
        self.labels_visible = visible;
    }

    pub fn hidden(mut self) -> Self {
        self.labels_visible = false;
        self
    }

    /// Training-path label access; fails on a sequestered domain.
    pub fn labels(&self) -> Result<&[usize], DataError> {
        if self.labels_visible {
            Ok(&self.labels)
        } else {
            Err(DataError::LabelsHidden(self.id.clone()))
        }
    }

    /// Label access for metrics only. Every call is counted so tests can
    /// assert that training code never reaches it.
    pub fn diagnostic_labels(&self) -> &[usize] {
        self.diagnostic_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn diagnostic_reads(&self) -> usize {
        self.diagnostic_reads.load(Ordering::Relaxed)
    }

    /// Rows `indices`, keeping the visibility flag.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Result<Self, DataError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::InvalidArgument(format!("index {bad} out of range for {} examples", self.len())));
        }
        let mut out = Self::new(
            id,
            self.input,
            self.classes,
            self.examples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )?;
        out.labels_visible = self.labels_visible;
        Ok(out)
    }
}

// ---- IDX ------------------------------------------------------------------

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let b = bytes.get(offset..offset + 4).ok_or(DataError::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic {
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], DataError> {
    bytes.get(offset..offset + len).ok_or(DataError::Truncated {
        offset,
        needed: len,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let data = payload(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, data.to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.to_vec())
}

/// Loads an image/label IDX pair (optionally gzipped) with pixels scaled
/// to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DomainDataset, DataError> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    idx_dataset(&images, &labels)
}

pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<DomainDataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some((i, &value)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= MNIST_CLASSES) {
        return Err(DataError::InvalidLabel {
            offset: 8 + i,
            value,
            classes: MNIST_CLASSES,
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    DomainDataset::new(
        "idx",
        InputShape::image(1, rows, cols),
        MNIST_CLASSES,
        Tensor::new(vec![n, rows * cols], data).expect("pixel count"),
        labels.iter().map(|&l| l as usize).collect(),
    )
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io)?;
        fs::write(path, enc.finish().map_err(io)?).map_err(io)
    } else {
        fs::write(path, bytes).map_err(io)
    }
}

/// Writes a single-channel image domain as an IDX pair; pixels are
/// rounded back to bytes. Paths ending in `.gz` are gzipped.
pub fn write_idx(data: &DomainDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<(), DataError> {
    let shape = data.input_shape();
    if shape.channels != 1 {
        return Err(DataError::InvalidArgument("IDX export needs single-channel images".into()));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.examples.len());
    for v in [IDX_IMAGES_MAGIC, n, shape.height as u32, shape.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.examples.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lab)
}

// ---- rotation -------------------------------------------------------------

/// Rotates one `h x w` plane counter-clockwise by `angle_degrees` about
/// `((h−1)/2, (w−1)/2)` with bilinear sampling; outside pixels read as 0.
pub fn rotate_image(src: &[f64], h: usize, w: usize, angle_degrees: f64) -> Vec<f64> {
    let theta = angle_degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            src[r as usize * w + col as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            // destination in y-up coordinates, then the inverse rotation
            let x = col as f64 - cx;
            let y = cy - r as f64;
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            let (sr, sc) = (cy - ys, cx + xs);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            out[r * w + col] = (1.0 - fr) * (1.0 - fc) * at(r0, c0)
                + (1.0 - fr) * fc * at(r0, c0 + 1)
                + fr * (1.0 - fc) * at(r0 + 1, c0)
                + fr * fc * at(r0 + 1, c0 + 1);
        }
    }
    out
}

/// Rotates the given rows of `base` into a new domain.
pub fn rotate_rows(base: &DomainDataset, indices: &[usize], angle_degrees: f64, id: impl Into<String>) -> Result<DomainDataset, DataError> {
    let shape = base.input_shape();
    if shape.height < 2 || shape.width < 2 {
        return Err(DataError::InvalidArgument("rotation needs image-shaped examples".into()));
    }
    let plane = shape.height * shape.width;
    let mut sub = base.subset(indices, id)?;
    for row in sub.examples.data_mut().chunks_mut(shape.len()) {
        for ch in row.chunks_mut(plane) {
            let rotated = rotate_image(ch, shape.height, shape.width, angle_degrees);
            ch.copy_from_slice(&rotated);
        }
    }
    Ok(sub)
}

/// `n` examples drawn without replacement (seeded) and rotated.
pub fn rotate_domain(base: &DomainDataset, angle_degrees: f64, n: usize, seed: u64) -> Result<DomainDataset, DataError> {
    if !(0.0..=360.0).contains(&angle_degrees) {
        return Err(DataError::InvalidArgument(format!("angle {angle_degrees} outside [0, 360]")));
    }
    if n > base.len() {
        return Err(DataError::NotEnoughExamples {
            requested: n,
            available: base.len(),
        });
    }
    let mut rng = rng_for(&[stream::DATA, seed, angle_degrees.to_bits()]);
    let mut idx = sample(&mut rng, base.len(), n).into_vec();
    idx.sort_unstable();
    rotate_rows(base, &idx, angle_degrees, rotation_id(angle_degrees))
}

/// `"M15"` for 15°, `"M22.5"` for 22.5°.
pub fn rotation_id(angle_degrees: f64) -> String {
    format!("M{angle_degrees}")
}

/// Rotated-MNIST domains, one per angle. Train-split domains use disjoint
/// subsets of `train`; the domain at `test_angle` is drawn from `test`.
pub fn rotated_mnist_domains(
    train: &DomainDataset,
    test: &DomainDataset,
    angles: &[f64],
    per_domain: usize,
    test_angle: f64,
    seed: u64,
) -> Result<Vec<DomainDataset>, DataError> {
    if !angles.contains(&test_angle) {
        return Err(DataError::Plan(format!("test angle {test_angle} is not among {angles:?}")));
    }
    let train_domains = angles.len() - 1;
    if train_domains * per_domain > train.len() {
        return Err(DataError::NotEnoughExamples {
            requested: train_domains * per_domain,
            available: train.len(),
        });
    }
    if per_domain > test.len() {
        return Err(DataError::NotEnoughExamples {
            requested: per_domain,
            available: test.len(),
        });
    }
    let mut rng = rng_for(&[stream::DATA, seed]);
    let mut pool: Vec<usize> = (0..train.len()).collect();
    pool.shuffle(&mut rng);
    let mut chunks = pool.chunks(per_domain);
    let mut out = Vec::with_capacity(angles.len());
    for &angle in angles {
        let d = if angle == test_angle {
            let mut trng = rng_for(&[stream::DATA, seed, u64::MAX]);
            let mut idx = sample(&mut trng, test.len(), per_domain).into_vec();
            idx.sort_unstable();
            rotate_rows(test, &idx, angle, rotation_id(angle))?
        } else {
            let mut idx = chunks.next().expect("enough chunks").to_vec();
            idx.sort_unstable();
            rotate_rows(train, &idx, angle, rotation_id(angle))?
        };
        out.push(d);
    }
    Ok(out)
}

// ---- blobs ----------------------------------------------------------------

/// Gaussian class blobs seen through per-domain rotations and shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub domains: usize,
    /// Norm of each domain's translation.
    pub shift_scale: f64,
    /// Strength of each domain's random rotation (0 = identity).
    pub rot_scale: f64,
    pub n_per_class: usize,
    /// Standard deviation of the class means around the origin.
    pub class_sep: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: 8,
            domains: 4,
            shift_scale: 0.0,
            rot_scale: 0.0,
            n_per_class: 50,
            class_sep: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Orthonormalizes the columns of a square row-major matrix (modified
/// Gram-Schmidt).
pub fn gram_schmidt(a: &[f64], n: usize) -> Vec<f64> {
    let mut q = a.to_vec();
    for j in 0..n {
        for p in 0..j {
            let dot: f64 = (0..n).map(|i| q[i * n + j] * q[i * n + p]).sum();
            for i in 0..n {
                q[i * n + j] -= dot * q[i * n + p];
            }
        }
        let norm = (0..n).map(|i| q[i * n + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..n {
            q[i * n + j] /= norm;
        }
    }
    q
}

/// `(Q, t)` for domain `d`: `Q` orthonormalizes `I + rot_scale·G`.
pub fn blob_domain_transform(spec: &BlobSpec, d: usize) -> (Vec<f64>, Vec<f64>) {
    let m = spec.dims;
    let mut rng = rng_for(&[stream::DATA, spec.seed, 1, d as u64]);
    let mut a = Tensor::identity(m).into_data();
    for v in a.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v += spec.rot_scale * g;
    }
    let q = gram_schmidt(&a, m);
    let dir: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let t = dir.iter().map(|v| spec.shift_scale * v / norm).collect();
    (q, t)
}

/// Domains `B0..B{n−1}`. Class means and within-class noise are drawn once
/// from `seed`; domain `d` maps every point `x ↦ Q_d·x + t_d`.
pub fn make_blob_domains(spec: &BlobSpec) -> Result<Vec<DomainDataset>, DataError> {
    if spec.classes == 0 || spec.dims == 0 || spec.domains == 0 || spec.n_per_class == 0 {
        return Err(DataError::InvalidArgument("blob counts must all be >= 1".into()));
    }
    let (k, m) = (spec.classes, spec.dims);
    let mut rng = rng_for(&[stream::DATA, spec.seed, 0]);
    let means: Vec<f64> = (0..k * m)
        .map(|_| spec.class_sep * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let n = k * spec.n_per_class;
    let mut base = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        for j in 0..m {
            let e: f64 = StandardNormal.sample(&mut rng);
            base.push(means[class * m + j] + spec.noise * e);
        }
    }
    (0..spec.domains)
        .map(|d| {
            let (q, t) = blob_domain_transform(spec, d);
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                let x = &base[i * m..(i + 1) * m];
                for r in 0..m {
                    data[i * m + r] = t[r] + (0..m).map(|c| q[r * m + c] * x[c]).sum::<f64>();
                }
            }
            DomainDataset::new(
                format!("B{d}"),
                InputShape::flat(m),
                k,
                Tensor::new(vec![n, m], data).expect("n*m values"),
                labels.clone(),
            )
        })
        .collect()
}

// ---- assignment -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainAssignment {
    pub server: String,
    pub test: String,
    /// Client domains; `None` means every domain except server and test.
    #[serde(default)]
    pub clients: Option<Vec<String>>,
    /// Shards per client domain (clients-split mode); `None` = 1.
    #[serde(default)]
    pub split: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AssignedDomains {
    /// Labels visible.
    pub server: DomainDataset,
    /// Labels sequestered.
    pub clients: Vec<DomainDataset>,
    /// Labels visible, used only for evaluation.
    pub test: DomainDataset,
}

pub fn assign_domains(all: &[DomainDataset], plan: &DomainAssignment) -> Result<AssignedDomains, DataError> {
    if plan.server == plan.test {
        return Err(DataError::Plan(format!("server and test are both {}", plan.server)));
    }
    let find = |id: &str| {
        all.iter()
            .find(|d| d.id() == id)
            .ok_or_else(|| DataError::Plan(format!("unknown domain {id}")))
    };
    let server = find(&plan.server)?.clone();
    let test = find(&plan.test)?.clone();
    let client_ids: Vec<String> = match &plan.clients {
        Some(ids) => ids.clone(),
        None => all
            .iter()
            .map(|d| d.id().to_string())
            .filter(|id| *id != plan.server && *id != plan.test)
            .collect(),
    };
    for (i, id) in client_ids.iter().enumerate() {
        if *id == plan.server || *id == plan.test {
            return Err(DataError::Plan(format!("client domain {id} overlaps server or test")));
        }
        if client_ids[..i].contains(id) {
            return Err(DataError::Plan(format!("client domain {id} listed twice")));
        }
    }
    let split = plan.split.unwrap_or(1);
    if split == 0 {
        return Err(DataError::Plan("split count must be >= 1".into()));
    }
    let mut clients = Vec::new();
    for id in &client_ids {
        let d = find(id)?;
        if split > d.len() {
            return Err(DataError::Plan(format!("cannot split {} examples of {id} into {split} shards", d.len())));
        }
        if split == 1 {
            clients.push(d.clone().hidden());
            continue;
        }
        for s in 0..split {
            let idx: Vec<usize> = (s..d.len()).step_by(split).collect();
            clients.push(d.subset(&idx, format!("{id}/{s}"))?.hidden());
        }
    }
    let mut server = server;
    server.set_labels_visible(true);
    let mut test = test;
    test.set_labels_visible(true);
    Ok(AssignedDomains { server, clients, test })
}
