//! Source / target datasets: synthetic domain-shift generators, IDX loading
//! and paired batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const COLORIZE_OPACITY: f64 = 0.5;

/// Features `[n × in_dim]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    /// Channels per sample; features are laid out channel-major.
    channels: usize,
    pub domain_tag: String,
}

impl LabeledDataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, domain_tag: impl Into<String>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        if y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = vec![false; num_classes];
        for (index, &label) in y.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
            seen[label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("class {missing} has no samples")));
        }
        Ok(LabeledDataset {
            x,
            y,
            num_classes,
            channels: 1,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.x.cols()
    }

    /// Drops the labels from the training path; they are kept for evaluation only.
    pub fn into_unlabeled(self) -> UnlabeledDataset {
        UnlabeledDataset {
            x: self.x,
            hidden_y: Some(self.y),
            domain_tag: self.domain_tag,
        }
    }
}

/// Target-domain features. `hidden_y` is only read by evaluation code.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    x: Tensor,
    hidden_y: Option<Vec<usize>>,
    pub domain_tag: String,
}

impl UnlabeledDataset {
    pub fn new(x: Tensor, hidden_y: Option<Vec<usize>>, domain_tag: impl Into<String>) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(y) = &hidden_y {
            if y.len() != x.rows() {
                return Err(Error::ShapeMismatch {
                    op: "unlabeled_dataset",
                    lhs: x.shape().to_vec(),
                    rhs: vec![y.len()],
                });
            }
        }
        Ok(UnlabeledDataset {
            x,
            hidden_y,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn hidden_y(&self) -> Option<&[usize]> {
        self.hidden_y.as_deref()
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn in_dim(&self) -> usize {
        self.x.cols()
    }
}

/// One training iteration's inputs. Carries no target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub x_s: Tensor,
    pub y_s: Vec<usize>,
    pub x_t: Tensor,
    /// Row indices into the source dataset.
    pub source_indices: Vec<usize>,
    /// Row indices into the target dataset.
    pub target_indices: Vec<usize>,
}

fn rotate_translate(x: f64, y: f64, rotation_deg: f64, translate: [f64; 2]) -> [f64; 2] {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    [c * x - s * y + translate[0], s * x + c * y + translate[1]]
}

/// Two interleaved half circles with Gaussian noise, rotated about the origin
/// and then translated. Class 0 is the upper unit arc, class 1 the lower arc
/// centered at `(1, 0.5)`. The first `n - n/2` samples are class 0.
pub fn gen_two_moons(
    n: usize,
    noise_sd: f64,
    rotation_deg: f64,
    translate: [f64; 2],
    seed: u64,
) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two-moons needs n >= 2, got {n}")));
    }
    let noise = Normal::new(0.0, noise_sd)
        .map_err(|e| Error::InvalidArgument(format!("noise_sd: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n - n / 2;
    let n_lower = n / 2;
    let angle = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = angle(i, n_upper);
        let (px, py) = (t.cos(), t.sin());
        let p = rotate_translate(px + noise.sample(&mut rng), py + noise.sample(&mut rng), rotation_deg, translate);
        data.extend(p);
        y.push(0);
    }
    for i in 0..n_lower {
        let t = angle(i, n_lower);
        let (px, py) = (1.0 - t.cos(), 0.5 - t.sin());
        let p = rotate_translate(px + noise.sample(&mut rng), py + noise.sample(&mut rng), rotation_deg, translate);
        data.extend(p);
        y.push(1);
    }
    LabeledDataset::new(Tensor::matrix(n, 2, data)?, y, 2, format!("two_moons_rot{rotation_deg}"))
}

/// Mean and standard deviation of one isotropic Gaussian cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobCenter {
    pub mean: Vec<f64>,
    pub sd: f64,
}

/// Isotropic Gaussian clusters, `n_per_class` samples per center, one class
/// per center, all shifted by `shift`.
pub fn gen_blobs(n_per_class: usize, centers: &[BlobCenter], shift: &[f64], seed: u64) -> Result<LabeledDataset> {
    if centers.len() < 2 {
        return Err(Error::InvalidArgument(format!("blobs need >= 2 centers, got {}", centers.len())));
    }
    if n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = centers[0].mean.len();
    if centers.iter().any(|c| c.mean.len() != dim) || shift.len() != dim {
        return Err(Error::InvalidArgument("center and shift dimensions disagree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_class * centers.len() * dim);
    let mut y = Vec::with_capacity(n_per_class * centers.len());
    for (class, c) in centers.iter().enumerate() {
        let noise = Normal::new(0.0, c.sd).map_err(|e| Error::InvalidArgument(format!("sd: {e}")))?;
        for _ in 0..n_per_class {
            for d in 0..dim {
                data.push(c.mean[d] + shift[d] + noise.sample(&mut rng));
            }
            y.push(class);
        }
    }
    let n = y.len();
    LabeledDataset::new(Tensor::matrix(n, dim, data)?, y, centers.len(), "blobs")
}

/// Either result of [`load_idx`].
#[derive(Debug, Clone, PartialEq)]
pub enum IdxDataset {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
}

struct IdxCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl IdxCursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("truncated IDX header".into()))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn body(&self, n: usize) -> Result<&[u8]> {
        self.bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("truncated IDX body: need {n} bytes, have {}", self.bytes.len() - self.pos)))
    }
}

/// Parses an IDX image file. Returns `(count, rows, cols, pixels)`; pixels are
/// scaled to `[0, 1]`, one row-major image after another.
pub fn parse_idx_images(bytes: &[u8], limit: usize) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut c = IdxCursor { bytes, pos: 0 };
    if c.u32()? != IDX_IMAGES_MAGIC {
        return Err(Error::Format("not an IDX file: bad image magic".into()));
    }
    let (n, rows, cols) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("bad IDX image dims {rows}x{cols}")));
    }
    let take = n.min(limit);
    let px = rows * cols;
    // the whole declared body must be present, not just the slice we keep
    c.body(n * px)?;
    let pixels = c.body(take * px)?.iter().map(|&b| b as f64 / 255.0).collect();
    if bytes.len() != c.pos + n * px {
        return Err(Error::Format("trailing bytes after IDX image body".into()));
    }
    Ok((take, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], limit: usize) -> Result<(usize, Vec<usize>)> {
    let mut c = IdxCursor { bytes, pos: 0 };
    if c.u32()? != IDX_LABELS_MAGIC {
        return Err(Error::Format("not an IDX file: bad label magic".into()));
    }
    let n = c.u32()? as usize;
    c.body(n)?;
    if bytes.len() != c.pos + n {
        return Err(Error::Format("trailing bytes after IDX label body".into()));
    }
    let labels = c.body(n.min(limit))?.iter().map(|&b| b as usize).collect();
    Ok((n, labels))
}

/// Loads at most `limit` samples from IDX files. Without a label file the
/// result is unlabeled.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, limit: usize) -> Result<IdxDataset> {
    if limit == 0 {
        return Err(Error::EmptyDataset);
    }
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img, limit)?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let x = Tensor::matrix(n, rows * cols, pixels)?;
    let tag = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    match labels_path {
        None => Ok(IdxDataset::Unlabeled(UnlabeledDataset::new(x, None, tag)?)),
        Some(lp) => {
            let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
            let (total, labels) = parse_idx_labels(&lb, limit)?;
            let img_total = u32::from_be_bytes(img[4..8].try_into().unwrap()) as usize;
            if total != img_total {
                return Err(Error::Format(format!(
                    "IDX count mismatch: {img_total} images vs {total} labels"
                )));
            }
            let num_classes = labels.iter().max().map_or(0, |m| m + 1);
            Ok(IdxDataset::Labeled(LabeledDataset::new(x, labels, num_classes, tag)?))
        }
    }
}

/// Serializes images (values in `[0, 1]`, rounded to bytes) as an IDX image file.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, x: &Tensor) -> Result<()> {
    if x.cols() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "write_idx_images",
            lhs: x.shape().to_vec(),
            rhs: vec![rows, cols],
        });
    }
    let mut buf = Vec::with_capacity(16 + x.numel());
    for v in [IDX_IMAGES_MAGIC, x.rows() as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?;
        buf.push(b);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Expands grayscale images to three channels over a per-image random tint:
/// `out_c = (1 - a)·pixel + a·tint_c` with opacity `a` = [`COLORIZE_OPACITY`].
pub fn colorize_shift(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if ds.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "colorize_shift needs grayscale input, got {} channels",
            ds.channels
        )));
    }
    if ds.x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("colorize_shift needs features in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ds.in_dim();
    let a = COLORIZE_OPACITY;
    let mut out = Vec::with_capacity(ds.len() * 3 * d);
    for r in 0..ds.len() {
        let tint: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for t in tint {
            out.extend(ds.x.row(r).iter().map(|p| (1.0 - a) * p + a * t));
        }
    }
    let mut shifted = LabeledDataset::new(
        Tensor::matrix(ds.len(), 3 * d, out)?,
        ds.y.clone(),
        ds.num_classes,
        format!("{}_color", ds.domain_tag),
    )?;
    shifted.channels = 3;
    Ok(shifted)
}

/// Repeats each grayscale pixel across three channels so the feature width
/// matches a [`colorize_shift`] output.
pub fn gray_to_rgb(ds: &LabeledDataset) -> Result<LabeledDataset> {
    if ds.channels != 1 {
        return Err(Error::InvalidArgument("gray_to_rgb needs grayscale input".into()));
    }
    let d = ds.in_dim();
    let mut out = Vec::with_capacity(ds.len() * 3 * d);
    for r in 0..ds.len() {
        for _ in 0..3 {
            out.extend_from_slice(ds.x.row(r));
        }
    }
    let mut rgb = LabeledDataset::new(Tensor::matrix(ds.len(), 3 * d, out)?, ds.y.clone(), ds.num_classes, ds.domain_tag.clone())?;
    rgb.channels = 3;
    Ok(rgb)
}

/// Number of paired batches per epoch.
pub fn batches_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.min(n_target) / batch_size
}

/// Shuffles both datasets independently with a seed derived from
/// `(seed, epoch)` and pairs `floor(min(n_s, n_t) / batch_size)` batches.
pub fn batches(
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PairedBatch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if batch_size > source.len().min(target.len()) {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} exceeds dataset size (source {}, target {})",
            source.len(),
            target.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut src: Vec<usize> = (0..source.len()).collect();
    let mut tgt: Vec<usize> = (0..target.len()).collect();
    src.shuffle(&mut rng);
    tgt.shuffle(&mut rng);
    let k = batches_per_epoch(source.len(), target.len(), batch_size);
    Ok((0..k)
        .map(|b| {
            let si = src[b * batch_size..(b + 1) * batch_size].to_vec();
            let ti = tgt[b * batch_size..(b + 1) * batch_size].to_vec();
            PairedBatch {
                x_s: source.x.select_rows(&si),
                y_s: si.iter().map(|&i| source.y[i]).collect(),
                x_t: target.x.select_rows(&ti),
                source_indices: si,
                target_indices: ti,
            }
        })
        .collect())
}

/// Writes `f0,...,fk,label`; `labels = None` writes `-1` for every row.
pub fn write_csv(path: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut out = String::new();
    let d = x.cols();
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).chain(["label".into()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..x.rows() {
        for v in x.row(r) {
            out.push_str(&format!("{v:?},"));
        }
        match labels {
            Some(l) => out.push_str(&l[r].to_string()),
            None => out.push_str("-1"),
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the CSV form back. Rows labeled `-1` yield `None`.
pub fn read_csv(path: &Path) -> Result<(Tensor, Vec<Option<usize>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let d = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Format(format!("row {i}: expected {} fields", d + 1)));
        }
        for f in &fields[..d] {
            data.push(f.parse::<f64>().map_err(|e| Error::Format(format!("row {i}: {e}")))?);
        }
        let l: i64 = fields[d].parse().map_err(|e| Error::Format(format!("row {i}: {e}")))?;
        labels.push(if l < 0 { None } else { Some(l as usize) });
    }
    Ok((Tensor::matrix(labels.len(), d, data)?, labels))
}
