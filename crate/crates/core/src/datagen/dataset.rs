use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{KeyedRng, RngKey};

use super::{default_classes, render_shape, ShapeClass, ShapeParams};

pub const DATASET_MAGIC: &[u8; 4] = b"LFDS";
pub const DATASET_VERSION: u32 = 1;

/// Seed namespace of the held-out real test split; independent of every
/// experiment seed.
pub const TEST_SPLIT_SEED: u64 = 0x7E57_5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Pretrain,
    Downstream,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Closed interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn around(centre: f64, half_width: f64) -> Self {
        Range::new(centre - half_width, centre + half_width)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// `self ⊊ other`.
    pub fn strictly_within(&self, other: &Range) -> bool {
        other.lo <= self.lo && self.hi <= other.hi && (other.lo < self.lo || self.hi < other.hi)
    }

    fn sample(&self, rng: &mut KeyedRng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.uniform()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRanges {
    pub offset_x: Range,
    pub offset_y: Range,
    pub size: Range,
    pub intensity: Range,
    pub noise: Range,
}

impl ClassRanges {
    fn fields(&self) -> [&Range; 5] {
        [&self.offset_x, &self.offset_y, &self.size, &self.intensity, &self.noise]
    }

    pub fn contains(&self, p: &ShapeParams) -> bool {
        self.offset_x.contains(p.offset_x)
            && self.offset_y.contains(p.offset_y)
            && self.size.contains(p.size)
            && self.intensity.contains(p.intensity)
            && self.noise.contains(p.noise)
    }

    pub fn sample(&self, rng: &mut KeyedRng) -> ShapeParams {
        ShapeParams {
            offset_x: self.offset_x.sample(rng),
            offset_y: self.offset_y.sample(rng),
            size: self.size.sample(rng),
            intensity: self.intensity.sample(rng),
            noise: self.noise.sample(rng),
        }
    }
}

/// Per-class parameter ranges of one data regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<(ShapeClass, ClassRanges)>,
}

/// Where each class sits in the downstream regime (pixel offsets).
const DOWNSTREAM_CENTRES: [(f64, f64); 6] = [(-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0), (2.0, 2.0), (0.0, -2.5), (0.0, 2.5)];

impl RegimeConfig {
    /// Broad regime: any position, size, contrast and noise level.
    pub fn pretrain(num_classes: usize) -> Result<Self> {
        let ranges = ClassRanges {
            offset_x: Range::new(-3.0, 3.0),
            offset_y: Range::new(-3.0, 3.0),
            size: Range::new(3.0, 6.0),
            intensity: Range::new(0.5, 1.0),
            noise: Range::new(0.0, 0.1),
        };
        Ok(RegimeConfig {
            regime: Regime::Pretrain,
            height: 16,
            width: 16,
            classes: default_classes(num_classes)?.into_iter().map(|c| (c, ranges)).collect(),
        })
    }

    /// Narrow, shifted regime: each class confined to its own region,
    /// low contrast and strong noise.
    pub fn downstream(num_classes: usize) -> Result<Self> {
        let classes = default_classes(num_classes)?
            .into_iter()
            .map(|c| {
                let (ox, oy) = DOWNSTREAM_CENTRES[c.id];
                (
                    c,
                    ClassRanges {
                        offset_x: Range::around(ox, 1.0),
                        offset_y: Range::around(oy, 0.5),
                        size: Range::new(3.5, 5.0),
                        intensity: Range::new(0.55, 0.8),
                        noise: Range::new(0.04, 0.08),
                    },
                )
            })
            .collect();
        Ok(RegimeConfig {
            regime: Regime::Downstream,
            height: 16,
            width: 16,
            classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Every class's ranges are proper subsets of `other`'s.
    pub fn strictly_within(&self, other: &RegimeConfig) -> bool {
        self.classes.len() == other.classes.len()
            && self.classes.iter().zip(&other.classes).all(|((c, r), (oc, or))| {
                c == oc && r.fields().iter().zip(or.fields()).all(|(a, b)| a.strictly_within(b))
            })
    }
}

/// One image with its label. The id encodes regime, split, class and index
/// so ids never collide across splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub label: usize,
    pub pixels: Vec<f32>,
}

pub fn image_id(regime: Regime, split: Split, class: usize, index: usize) -> u64 {
    let r = match regime {
        Regime::Pretrain => 1u64,
        Regime::Downstream => 2,
        Regime::Synthetic => 3,
    };
    let s = match split {
        Split::Train => 0u64,
        Split::Test => 1,
    };
    ((r << 4 | s) << 48) | ((class as u64 & 0xFFFF) << 32) | (index as u64 & 0xFFFF_FFFF)
}

impl LabeledImage {
    pub fn regime(&self) -> Option<Regime> {
        match self.id >> 52 {
            1 => Some(Regime::Pretrain),
            2 => Some(Regime::Downstream),
            3 => Some(Regime::Synthetic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    height: usize,
    width: usize,
    items: Vec<LabeledImage>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, items: Vec<LabeledImage>) -> Result<Self> {
        let d = height * width;
        let mut ids = std::collections::HashSet::with_capacity(items.len());
        for it in &items {
            if it.pixels.len() != d {
                return Err(Error::shape("dataset", format!("{d} pixels"), it.pixels.len()));
            }
            if !ids.insert(it.id) {
                return Err(Error::InvalidArgument(format!("duplicate image id {}", it.id)));
            }
            if let Some(p) = it.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidArgument(format!("pixel {p} of image {} outside [0, 1]", it.id)));
            }
        }
        Ok(ImageDataset { height, width, items })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.items.iter().map(|i| i.label + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for it in &self.items {
            if it.label < num_classes {
                counts[it.label] += 1;
            }
        }
        counts
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |i| i.label == class)
    }

    /// The first `n` images of every class, in original order.
    pub fn take_per_class(&self, n: usize) -> ImageDataset {
        let mut seen = std::collections::HashMap::new();
        let items = self
            .items
            .iter()
            .filter(|it| {
                let c = seen.entry(it.label).or_insert(0usize);
                *c += 1;
                *c <= n
            })
            .cloned()
            .collect();
        ImageDataset {
            height: self.height,
            width: self.width,
            items,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC)
            .u32(DATASET_VERSION)
            .u32(self.items.len() as u32)
            .u32(self.height as u32)
            .u32(self.width as u32);
        for it in &self.items {
            w.u64(it.id).u32(it.label as u32).f32s(&it.pixels);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let d = height * width;
        let per_item = 12 + 4 * d;
        if r.remaining() < count.saturating_mul(per_item) {
            return Err(Error::UnexpectedEof(format!("{count} images of {height}x{width}")));
        }
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let id = r.u64(&format!("image {i} id"))?;
            let label = r.u32(&format!("image {i} label"))? as usize;
            let pixels = r.f32s(d, &format!("image {i} pixels"))?;
            items.push(LabeledImage { id, label, pixels });
        }
        r.expect_end()?;
        ImageDataset::new(height, width, items)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Renders `n_per_class` training-split images for every class of `config`.
pub fn make_dataset(config: &RegimeConfig, n_per_class: usize, seed: u64) -> Result<ImageDataset> {
    make_split(config, n_per_class, seed, Split::Train)
}

/// The held-out real test split: fixed seed namespace, disjoint ids.
pub fn make_test_split(config: &RegimeConfig, n_per_class: usize) -> Result<ImageDataset> {
    make_split(config, n_per_class, TEST_SPLIT_SEED, Split::Test)
}

pub fn make_split(config: &RegimeConfig, n_per_class: usize, seed: u64, split: Split) -> Result<ImageDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let root = RngKey::new(seed)
        .child("data", config.regime as u64)
        .child("split", split as u64);
    let mut items = Vec::with_capacity(n_per_class * config.classes.len());
    for (class, ranges) in &config.classes {
        for index in 0..n_per_class {
            let mut rng = root.child("class", class.id as u64).child("index", index as u64).stream();
            let params = ranges.sample(&mut rng);
            let pixels = render_shape(class, &params, config.height, config.width, &mut rng)?;
            items.push(LabeledImage {
                id: image_id(config.regime, split, class.id, index),
                label: class.id,
                pixels,
            });
        }
    }
    ImageDataset::new(config.height, config.width, items)
}

/// `k` images per class drawn without replacement from `pool`. Draws for a
/// smaller `k` are a prefix of those for a larger one under the same seed.
pub fn make_fewshot(pool: &ImageDataset, k: usize, seed: u64) -> Result<ImageDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let classes = pool.num_labels();
    let mut items = Vec::with_capacity(k * classes);
    for c in 0..classes {
        let candidates: Vec<&LabeledImage> = pool.of_class(c).collect();
        if candidates.len() < k {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} images, cannot draw {k} shots",
                candidates.len()
            )));
        }
        let mut rng = RngKey::new(seed).child("fewshot", c as u64).stream();
        items.extend(rng.choose_distinct(candidates.len(), k).into_iter().map(|i| candidates[i].clone()));
    }
    ImageDataset::new(pool.height, pool.width, items)
}

/// Binary PGM (P5) of images tiled row-major, `columns` per row, with
/// 1-pixel black separators.
pub fn export_grid(images: &[&[f32]], height: usize, width: usize, columns: usize) -> Result<Vec<u8>> {
    if images.is_empty() || columns == 0 {
        return Err(Error::InvalidArgument("grid needs at least one image and one column".into()));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * width + (cols - 1);
    let gh = rows * height + (rows - 1);
    let mut pixels = vec![0u8; gw * gh];
    for (n, img) in images.iter().enumerate() {
        if img.len() != height * width {
            return Err(Error::shape("grid", height * width, img.len()));
        }
        let (r0, c0) = ((n / cols) * (height + 1), (n % cols) * (width + 1));
        for y in 0..height {
            for x in 0..width {
                let v = (img[y * width + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                pixels[(r0 + y) * gw + c0 + x] = v;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_class() {
        let cfg = RegimeConfig::pretrain(6).unwrap();
        let ds = make_dataset(&cfg, 10, 1).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.class_counts(6), vec![10; 6]);
    }

    #[test]
    fn seeds_change_content_and_repeat_exactly() {
        let cfg = RegimeConfig::downstream(6).unwrap();
        let a = make_dataset(&cfg, 3, 1).unwrap();
        let b = make_dataset(&cfg, 3, 2).unwrap();
        assert_ne!(a.items()[0].pixels, b.items()[0].pixels);
        assert_eq!(a.to_bytes(), make_dataset(&cfg, 3, 1).unwrap().to_bytes());
    }

    #[test]
    fn downstream_is_strictly_inside_pretrain() {
        let pre = RegimeConfig::pretrain(6).unwrap();
        let down = RegimeConfig::downstream(6).unwrap();
        assert!(down.strictly_within(&pre));
        assert!(!pre.strictly_within(&down));
        // Every sampled downstream parameter set is a valid pretrain one.
        let mut rng = RngKey::new(0).stream();
        for ((_, d), (_, p)) in down.classes.iter().zip(&pre.classes) {
            for _ in 0..200 {
                assert!(p.contains(&d.sample(&mut rng)));
            }
        }
    }

    #[test]
    fn fewshot_sizes_and_disjointness() {
        let cfg = RegimeConfig::downstream(6).unwrap();
        let pool = make_dataset(&cfg, 20, 4).unwrap();
        let test = make_test_split(&cfg, 5).unwrap();
        let fs = make_fewshot(&pool, 16, 9).unwrap();
        assert_eq!(fs.len(), 96);
        assert_eq!(fs.class_counts(6), vec![16; 6]);
        assert!(fs.items().iter().all(|a| test.items().iter().all(|b| a.id != b.id)));
        assert_eq!(make_fewshot(&pool, 1, 9).unwrap().class_counts(6), vec![1; 6]);
        assert!(matches!(make_fewshot(&pool, 21, 9), Err(Error::InsufficientData(_))));
        assert_eq!(fs.items()[0].regime(), Some(Regime::Downstream));
    }

    #[test]
    fn lfds_roundtrip_and_errors() {
        let ds = make_dataset(&RegimeConfig::pretrain(2).unwrap(), 2, 0).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(ImageDataset::from_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ImageDataset::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            ImageDataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::UnexpectedEof(_))
        ));
    }

    #[test]
    fn grid_layout() {
        let a = vec![1.0f32; 4];
        let b = vec![0.5f32; 4];
        let pgm = export_grid(&[&a, &b, &a], 2, 2, 2).unwrap();
        let header = b"P5\n5 5\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 25);
        assert_eq!(px[0], 255);
        assert_eq!(px[2], 0); // separator column
        assert_eq!(px[3], 128);
        assert_eq!(px[2 * 5], 0); // separator row
        assert_eq!(px[3 * 5], 255);
    }
}
