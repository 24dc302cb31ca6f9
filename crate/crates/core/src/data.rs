//! Synthetic detection scenes: solid colored rectangles on uniform noise,
//! with optional skew in object size, plus PPM and groundtruth file I/O.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::boxes::{BBox, Object};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill colors, one per class.
pub const CLASS_COLORS: [[u8; 3]; 5] = [[230, 25, 25], [25, 230, 25], [25, 60, 230], [240, 230, 20], [230, 20, 230]];

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SizeBucket {
    /// Side-length range as a fraction of the image; both sides are drawn
    /// independently from it.
    pub range: (f64, f64),
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub scale_distribution: Vec<SizeBucket>,
    pub seed: u64,
}

impl SyntheticSceneConfig {
    /// Medium and large objects in equal proportion.
    pub fn balanced(image_size: usize, num_images: usize, seed: u64) -> Self {
        Self {
            image_size,
            num_images,
            num_classes: 3,
            max_objects: 4,
            scale_distribution: vec![
                SizeBucket { range: (0.15, 0.3), probability: 0.5 },
                SizeBucket { range: (0.3, 0.5), probability: 0.5 },
            ],
            seed,
        }
    }

    /// 90% large objects, 10% small ones.
    pub fn skewed(image_size: usize, num_images: usize, seed: u64) -> Self {
        Self {
            scale_distribution: vec![
                SizeBucket { range: (0.3, 0.5), probability: 0.9 },
                SizeBucket { range: (0.1, 0.2), probability: 0.1 },
            ],
            ..Self::balanced(image_size, num_images, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_COLORS.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}, got {}",
                CLASS_COLORS.len(),
                self.num_classes
            )));
        }
        if !(1..=4).contains(&self.max_objects) {
            return Err(Error::Config(format!("max_objects must be in 1..=4, got {}", self.max_objects)));
        }
        if self.scale_distribution.is_empty() {
            return Err(Error::Config("scale_distribution is empty".into()));
        }
        let mut total = 0.0;
        for b in &self.scale_distribution {
            let (lo, hi) = b.range;
            // objects are placed one per quadrant, so a side may not exceed half the image
            if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
                return Err(Error::Config(format!("size range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5")));
            }
            if !(b.probability >= 0.0) {
                return Err(Error::Config(format!("bad bucket probability {}", b.probability)));
            }
            total += b.probability;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("bucket probabilities sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    /// Interleaved RGB, row-major, `image_size * image_size * 3` bytes each.
    pub images: Vec<Vec<u8>>,
    pub objects: Vec<Vec<Object>>,
}

fn draw_bucket<R: Rng>(rng: &mut R, buckets: &[SizeBucket]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, b) in buckets.iter().enumerate() {
        acc += b.probability;
        if u < acc {
            return i;
        }
    }
    buckets.len() - 1
}

pub fn generate_dataset(cfg: &SyntheticSceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let half = s / 2;
    let quadrants = [(0, 0), (0, half), (half, 0), (half, half)];
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut objects = Vec::with_capacity(cfg.num_images);
    for _ in 0..cfg.num_images {
        let mut img = vec![0u8; s * s * 3];
        rng.fill(&mut img[..]);
        let n = rng.random_range(1..=cfg.max_objects);
        let mut cells = quadrants;
        cells.shuffle(&mut rng);
        let mut objs = Vec::with_capacity(n);
        for &(cy, cx) in &cells[..n] {
            // a lone object may sit anywhere; otherwise each takes one quadrant
            let extent = |c: usize| if c == 0 { half } else { s - half };
            let (oy, ox, cell_h, cell_w) = if n == 1 { (0, 0, s, s) } else { (cy, cx, extent(cy), extent(cx)) };
            let (lo, hi) = cfg.scale_distribution[draw_bucket(&mut rng, &cfg.scale_distribution)].range;
            let mut side = |limit: usize| -> usize {
                let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
                ((f * s as f64).round() as usize).clamp(1, limit)
            };
            let (ph, pw) = (side(cell_h), side(cell_w));
            let y0 = oy + rng.random_range(0..=cell_h - ph);
            let x0 = ox + rng.random_range(0..=cell_w - pw);
            let class = rng.random_range(0..cfg.num_classes);
            let color = CLASS_COLORS[class];
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    img[(y * s + x) * 3..][..3].copy_from_slice(&color);
                }
            }
            let f = s as f32;
            objs.push(Object {
                bbox: BBox::new(y0 as f32 / f, x0 as f32 / f, (y0 + ph) as f32 / f, (x0 + pw) as f32 / f),
                class,
            });
        }
        images.push(img);
        objects.push(objs);
    }
    Ok(Dataset { image_size: s, images, objects })
}

/// Maps a byte to `[-1, 1]` via `2x/255 - 1`.
pub fn normalize_pixel(x: u8) -> f32 {
    2.0 * x as f32 / 255.0 - 1.0
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_boxes(&self) -> usize {
        self.objects.iter().map(Vec::len).sum()
    }

    /// Normalized NHWC batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Config(format!("image index {i} out of range ({} images)", self.len())))?;
            data.extend(img.iter().map(|&b| normalize_pixel(b)));
        }
        Tensor::new([indices.len(), s, s, 3], data)
    }

    /// Writes `{index:06}.ppm` per image and one groundtruth file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut gt = String::new();
        for (i, (img, objs)) in self.images.iter().zip(&self.objects).enumerate() {
            fs::write(dir.join(format!("{i:06}.ppm")), encode_ppm(self.image_size, self.image_size, img))?;
            for o in objs {
                let b = o.bbox;
                writeln!(gt, "{i} {} {} {} {} {}", o.class, b.ymin, b.xmin, b.ymax, b.xmax).unwrap();
            }
        }
        fs::File::create(dir.join(GROUNDTRUTH_FILE))?.write_all(gt.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gt_text = fs::read_to_string(dir.join(GROUNDTRUTH_FILE))?;
        let mut images = vec![];
        let mut size = None;
        loop {
            let path = dir.join(format!("{:06}.ppm", images.len()));
            if !path.exists() {
                break;
            }
            let img = decode_ppm(&fs::read(&path)?)?;
            if img.width != img.height || size.is_some_and(|s| s != img.width) {
                return Err(Error::Format {
                    what: "dataset",
                    reason: format!("{} is {}x{}; images must be square and equal-sized", path.display(), img.width, img.height),
                });
            }
            size = Some(img.width);
            images.push(img.data);
        }
        let image_size = size.ok_or_else(|| Error::Format {
            what: "dataset",
            reason: format!("no images in {}", dir.display()),
        })?;
        let mut objects = vec![vec![]; images.len()];
        for (n, line) in gt_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Format {
                what: "groundtruth",
                reason: format!("line {}: {reason}", n + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", fields.len())));
            }
            let index: usize = fields[0].parse().map_err(|_| bad(format!("bad image index {:?}", fields[0])))?;
            let class: usize = fields[1].parse().map_err(|_| bad(format!("bad class {:?}", fields[1])))?;
            let mut c = [0f32; 4];
            for (v, f) in c.iter_mut().zip(&fields[2..]) {
                *v = f.parse().map_err(|_| bad(format!("bad coordinate {f:?}")))?;
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]);
            if !bbox.is_valid() {
                return Err(bad(format!("invalid box {c:?}")));
            }
            objects
                .get_mut(index)
                .ok_or_else(|| bad(format!("image index {index} has no image")))?
                .push(Object { bbox, class });
        }
        Ok(Self { image_size, images, objects })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl PpmImage {
    /// Normalized `1 x H x W x 3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| normalize_pixel(b)).collect();
        Tensor::new([1, self.height, self.width, 3], data).expect("ppm payload matches its header")
    }
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary `P6` with maxval 255; `#` comments are allowed in the header.
pub fn decode_ppm(bytes: &[u8]) -> Result<PpmImage> {
    let bad = |reason: &str| Error::Format {
        what: "ppm",
        reason: reason.to_string(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| bad("image too large"))?;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(bad(&format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    Ok(PpmImage {
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    decode_ppm(&fs::read(path)?)
}
