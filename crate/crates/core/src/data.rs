//! Task datasets, IDX ingestion, downsampling, and synthetic task families.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled set of binary data vectors forming one task `D_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset<T> {
    pub task_id: usize,
    items: Vec<Vec<T>>,
    labels: Vec<u32>,
    dim: usize,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn new(task_id: usize, items: Vec<Vec<T>>, labels: Vec<u32>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} items but {} labels",
                items.len(),
                labels.len()
            )));
        }
        let dim = items.first().map_or(0, Vec::len);
        if items.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("items differ in dimension".into()));
        }
        Ok(Self { task_id, items, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Vec<T>] {
        &self.items
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn item(&self, i: usize) -> &[T] {
        &self.items[i]
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            task_id: self.task_id,
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
        }
    }

    pub fn filter_class(&self, class: u32) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.subset(&idx)
    }

    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    /// Per-dimension mean.
    pub fn pixel_mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim];
        for x in &self.items {
            for (a, &v) in m.iter_mut().zip(x) {
                *a += v;
            }
        }
        let n = T::of(self.len().max(1) as f64);
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// A minibatch of `min(size, len)` distinct items drawn uniformly.
    pub fn sample_batch(&self, size: usize, rng: &mut RngState) -> Vec<&[T]> {
        let k = size.min(self.len());
        rng.sample_indices(self.len(), k).into_iter().map(|i| self.items[i].as_slice()).collect()
    }

    /// Random split into `(first, second)` with `round(len · frac)` items in the first.
    pub fn split(&self, frac: f64, rng: &mut RngState) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let cut = ((self.len() as f64) * frac).round() as usize;
        let cut = cut.min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    pub fn cast<U: Scalar>(&self) -> TaskDataset<U> {
        TaskDataset {
            task_id: self.task_id,
            items: self.items.iter().map(|x| x.iter().map(|&v| U::of(v.to64())).collect()).collect(),
            labels: self.labels.clone(),
            dim: self.dim,
        }
    }

    /// Concatenates datasets of equal dimension; the result takes `task_id`.
    pub fn concat(task_id: usize, parts: &[&Self]) -> Result<Self> {
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            items.extend(p.items.iter().cloned());
            labels.extend_from_slice(&p.labels);
        }
        Self::new(task_id, items, labels)
    }
}

// ---------------------------------------------------------------------------
// IDX

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Raw IDX image payload: `(rows, cols, one byte vector per image)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let per = rows.checked_mul(cols).ok_or_else(|| Error::Idx("image dimensions overflow".into()))?;
    let total = per.checked_mul(count).ok_or_else(|| Error::Idx("payload size overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() != total {
        return Err(Error::Idx(format!("expected {total} pixel bytes, found {}", payload.len())));
    }
    let images = if per == 0 { vec![Vec::new(); count] } else { payload.chunks(per).map(<[u8]>::to_vec).collect() };
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Idx(format!("expected {count} label bytes, found {}", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Pixel byte to `{0, 1}`: scaled to `[0, 1]`, then thresholded at 0.5.
pub fn binarize_byte<T: Scalar>(b: u8) -> T {
    if f64::from(b) / 255.0 >= 0.5 {
        T::one()
    } else {
        T::zero()
    }
}

/// Parses an image/label IDX pair into a binarized dataset. Returns the
/// dataset and the image side lengths `(rows, cols)`.
pub fn idx_dataset_from_bytes<T: Scalar>(
    images: &[u8],
    labels: &[u8],
) -> Result<(TaskDataset<T>, usize, usize)> {
    let (rows, cols, imgs) = parse_idx_images(images)?;
    let labs = parse_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::Idx(format!("{} images but {} labels", imgs.len(), labs.len())));
    }
    let items = imgs.iter().map(|im| im.iter().map(|&b| binarize_byte(b)).collect()).collect();
    let ds = TaskDataset::new(0, items, labs.iter().map(|&l| u32::from(l)).collect())?;
    Ok((ds, rows, cols))
}

pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(TaskDataset<T>, usize, usize)> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    idx_dataset_from_bytes(&images, &labels)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<Vec<u8>> {
    if images.iter().any(|im| im.len() != rows * cols) {
        return Err(Error::Shape("image size does not match rows × cols".into()));
    }
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        let v = u32::try_from(v).map_err(|_| Error::Idx("dimension exceeds u32".into()))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        out.extend_from_slice(im);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    let n = u32::try_from(labels.len()).map_err(|_| Error::Idx("count exceeds u32".into()))?;
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

/// Writes a binary dataset as an IDX pair, pixels as 0 or 255.
pub fn write_idx<T: Scalar>(
    ds: &TaskDataset<T>,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images: Vec<Vec<u8>> = ds
        .items()
        .iter()
        .map(|x| x.iter().map(|&v| if v.to64() >= 0.5 { 255 } else { 0 }).collect())
        .collect();
    let labels = ds
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Idx(format!("label {l} exceeds a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(images_path, encode_idx_images(rows, cols, &images)?)?;
    fs::write(labels_path, encode_idx_labels(&labels)?)?;
    Ok(())
}

/// `k×k` max-pool of a square binary image of side `side`.
pub fn downsample<T: Scalar>(image: &[T], side: usize, k: usize) -> Result<Vec<T>> {
    if k == 0 || !side.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!("factor {k} does not divide side {side}")));
    }
    if image.len() != side * side {
        return Err(Error::Shape(format!("expected {} pixels, got {}", side * side, image.len())));
    }
    let s = side / k;
    let mut out = vec![T::zero(); s * s];
    for r in 0..side {
        for c in 0..side {
            let o = &mut out[(r / k) * s + c / k];
            *o = o.max(image[r * side + c]);
        }
    }
    Ok(out)
}

pub fn downsample_dataset<T: Scalar>(ds: &TaskDataset<T>, side: usize, k: usize) -> Result<TaskDataset<T>> {
    let items = ds.items().iter().map(|x| downsample(x, side, k)).collect::<Result<Vec<_>>>()?;
    TaskDataset::new(ds.task_id, items, ds.labels().to_vec())
}

// ---------------------------------------------------------------------------
// synthetic tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticFamily {
    /// Parallel lines; each class has its own orientation and phase.
    Bars,
    /// Filled discs around a class-specific centre.
    Blobs,
    /// Jittered polylines through class-specific control points.
    Strokes,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub family: SyntheticFamily,
    pub side: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub flip_prob: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::InvalidArgument(format!("image side {} < 4", self.side)));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("flip probability {} outside [0, 0.5)", self.flip_prob)));
        }
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("need at least one class and one sample".into()));
        }
        Ok(())
    }
}

/// Set of pixels a class can ever turn on (before flip noise).
pub fn class_template(spec: &SyntheticTaskSpec, class: usize) -> Vec<bool> {
    let n = spec.side;
    let mut t = vec![false; n * n];
    match spec.family {
        SyntheticFamily::Bars => {
            for (r, c) in (0..n).flat_map(|r| (0..n).map(move |c| (r, c))) {
                t[r * n + c] = bar_line(class, r, c, n).is_some();
            }
        }
        SyntheticFamily::Blobs => {
            let (cy, cx, rad) = blob_geometry(spec, class);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    paint_disc(&mut t, n, cy + dy as f64, cx + dx as f64, rad + 1.0);
                }
            }
        }
        SyntheticFamily::Strokes => {
            let pts = stroke_points(spec, class);
            // every jitter of ±1 stays within the 3×3 dilation of the base stroke
            let mut base = vec![false; n * n];
            for w in pts.windows(2) {
                draw_line(&mut base, n, w[0], w[1]);
            }
            for (i, &on) in base.iter().enumerate() {
                if on {
                    let (r, c) = ((i / n) as i64, (i % n) as i64);
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            set(&mut t, n, r + dr, c + dc);
                        }
                    }
                }
            }
        }
    }
    t
}

const BAR_SPACING: usize = 3;

/// Index of the class-`class` line through `(r, c)`, if any.
fn bar_line(class: usize, r: usize, c: usize, n: usize) -> Option<usize> {
    let phase = (class / 4) % BAR_SPACING;
    let (key, id) = match class % 4 {
        0 => (r, r),
        1 => (c, c),
        2 => (r + c, r + c),
        _ => (r + n - c, r + n - c),
    };
    (key % BAR_SPACING == phase).then_some(id)
}

fn blob_geometry(spec: &SyntheticTaskSpec, class: usize) -> (f64, f64, f64) {
    let n = spec.side as f64;
    let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
    let ring = n / 4.0;
    let centre = (n - 1.0) / 2.0;
    (centre + ring * angle.sin(), centre + ring * angle.cos(), (n / 7.0).max(1.0))
}

fn stroke_points(spec: &SyntheticTaskSpec, class: usize) -> Vec<(i64, i64)> {
    let mut rng = RngState::new(0x5157_0000 + class as u64);
    let n = spec.side as i64;
    let lo = 1;
    let hi = n - 2;
    (0..4).map(|_| (lo + rng.below((hi - lo + 1) as usize) as i64, lo + rng.below((hi - lo + 1) as usize) as i64)).collect()
}

fn set(img: &mut [bool], n: usize, r: i64, c: i64) {
    if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
        img[r as usize * n + c as usize] = true;
    }
}

fn paint_disc(img: &mut [bool], n: usize, cy: f64, cx: f64, rad: f64) {
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            if dy * dy + dx * dx <= rad * rad {
                img[r * n + c] = true;
            }
        }
    }
}

/// Bresenham line between two pixel coordinates `(row, col)`.
fn draw_line(img: &mut [bool], n: usize, a: (i64, i64), b: (i64, i64)) {
    let (mut r, mut c) = a;
    let dr = (b.0 - r).abs();
    let dc = -(b.1 - c).abs();
    let sr = if r < b.0 { 1 } else { -1 };
    let sc = if c < b.1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        set(img, n, r, c);
        if (r, c) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

fn render_item(spec: &SyntheticTaskSpec, class: usize, rng: &mut RngState) -> Vec<bool> {
    let n = spec.side;
    let mut img = vec![false; n * n];
    match spec.family {
        SyntheticFamily::Bars => {
            // random nonempty subset of the class's lines
            let mut lines: Vec<usize> = (0..n * n)
                .filter_map(|i| bar_line(class, i / n, i % n, n))
                .collect();
            lines.sort_unstable();
            lines.dedup();
            let mut keep: Vec<bool> = lines.iter().map(|_| rng.bernoulli(0.5)).collect();
            if !keep.iter().any(|&k| k) {
                let i = rng.below(keep.len());
                keep[i] = true;
            }
            for (i, px) in img.iter_mut().enumerate() {
                if let Some(id) = bar_line(class, i / n, i % n, n) {
                    let pos = lines.binary_search(&id).expect("line id present");
                    *px = keep[pos];
                }
            }
        }
        SyntheticFamily::Blobs => {
            let (cy, cx, rad) = blob_geometry(spec, class);
            let jy = rng.below(3) as f64 - 1.0;
            let jx = rng.below(3) as f64 - 1.0;
            let r = rad + rng.uniform();
            paint_disc(&mut img, n, cy + jy, cx + jx, r);
        }
        SyntheticFamily::Strokes => {
            let pts: Vec<(i64, i64)> = stroke_points(spec, class)
                .into_iter()
                .map(|(r, c)| (r + rng.below(3) as i64 - 1, c + rng.below(3) as i64 - 1))
                .collect();
            for w in pts.windows(2) {
                draw_line(&mut img, n, w[0], w[1]);
            }
        }
    }
    img
}

/// One dataset per class, with `task_id` and label equal to the class index.
pub fn generate_synthetic_tasks<T: Scalar>(
    spec: &SyntheticTaskSpec,
    rng: &mut RngState,
) -> Result<Vec<TaskDataset<T>>> {
    spec.validate()?;
    (0..spec.classes)
        .map(|class| {
            let items = (0..spec.samples_per_class)
                .map(|_| {
                    render_item(spec, class, rng)
                        .into_iter()
                        .map(|on| {
                            let flip = spec.flip_prob > 0.0 && rng.bernoulli(spec.flip_prob);
                            if on != flip {
                                T::one()
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                })
                .collect();
            TaskDataset::new(class, items, vec![class as u32; spec.samples_per_class])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        // two 2×2 images: [0, 255, 128, 127] and [255, 0, 0, 255]; labels 3, 7
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 128, 127, 255, 0, 0, 255]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
        (img, lab)
    }

    #[test]
    fn idx_fixture_parses() {
        let (img, lab) = fixture();
        let (ds, rows, cols) = idx_dataset_from_bytes::<f64>(&img, &lab).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(ds.items(), &[vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]]);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn idx_rejects_malformed() {
        let (img, lab) = fixture();
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(idx_dataset_from_bytes::<f64>(&bad, &lab), Err(Error::Idx(_))));
        assert!(idx_dataset_from_bytes::<f64>(&img[..img.len() - 1], &lab).is_err());
        assert!(idx_dataset_from_bytes::<f64>(&img[..10], &lab).is_err());
        let mut extra = img.clone();
        extra.push(0);
        assert!(idx_dataset_from_bytes::<f64>(&extra, &lab).is_err());
        let one_label = encode_idx_labels(&[3]).unwrap();
        assert!(idx_dataset_from_bytes::<f64>(&img, &one_label).is_err());
        let mut huge = img.clone();
        huge[8..16].copy_from_slice(&[0xff; 8]);
        huge[4..8].copy_from_slice(&[0xff; 4]);
        assert!(idx_dataset_from_bytes::<f64>(&huge, &lab).is_err());
    }

    #[test]
    fn idx_encoding_round_trips() {
        let (img, lab) = fixture();
        let (rows, cols, images) = parse_idx_images(&img).unwrap();
        assert_eq!(encode_idx_images(rows, cols, &images).unwrap(), img);
        assert_eq!(encode_idx_labels(&parse_idx_labels(&lab).unwrap()).unwrap(), lab);
    }

    #[test]
    fn downsample_cases() {
        assert_eq!(downsample(&[0.0f64; 16], 4, 2).unwrap(), vec![0.0; 4]);
        let mut one = vec![0.0f64; 16];
        one[6] = 1.0;
        assert_eq!(downsample(&one, 4, 2).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        assert_eq!(downsample(&checker, 4, 2).unwrap(), vec![1.0; 4]);
        assert!(downsample(&checker, 4, 3).is_err());
    }

    #[test]
    fn bars_stay_inside_template() {
        let spec = SyntheticTaskSpec { family: SyntheticFamily::Bars, side: 14, classes: 6, samples_per_class: 40, flip_prob: 0.0 };
        let tasks = generate_synthetic_tasks::<f64>(&spec, &mut RngState::new(1)).unwrap();
        for (c, t) in tasks.iter().enumerate() {
            let tmpl = class_template(&spec, c);
            for x in t.items() {
                assert!(x.contains(&1.0));
                for (&v, &on) in x.iter().zip(&tmpl) {
                    assert!(v == 0.0 || on);
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = SyntheticTaskSpec { family: SyntheticFamily::Blobs, side: 3, classes: 2, samples_per_class: 1, flip_prob: 0.0 };
        assert!(spec.validate().is_err());
        spec.side = 8;
        spec.flip_prob = 0.5;
        assert!(spec.validate().is_err());
        spec.flip_prob = 0.1;
        assert!(spec.validate().is_ok());
    }
}
