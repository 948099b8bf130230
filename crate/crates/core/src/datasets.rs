//! Synthetic image corpora: sprite positioning and glyph classification.
//!
//! The sprite set exists to punish pixel-level reconstruction. Each image is
//! mostly high-entropy clutter (soft blobs, a random skyline, pixel noise)
//! that no small code can memorize, while the task label depends only on a
//! tiny saturated sprite. The background stays muted in channel 0 (at most
//! 0.5) and the sprite pins channel 0 to 1.0, so sprite pixels always stand
//! at least 0.5 proud of any background pixel in that channel.
//!
//! The glyph set is a 10-way shape classification corpus rendered from
//! signed distance fields over the same terrain clutter. Glyphs land
//! anywhere in frame, span sprite-like to image-filling sizes, and rotate
//! within a band narrow enough that no two classes collide (square and
//! diamond meet at 45 degrees, the two bars at 90). The spread matters: the
//! loss network trains on this corpus, and only wide placement and scale
//! variety force its tap features to respond to small bright structure at
//! every image location, which is what makes them transfer to the sprite
//! task.

use crate::tensor::{numel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset request: {0}")]
    InvalidConfig(String),
    #[error("dataset file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset container: bad magic bytes")]
    BadMagic,
    #[error("unsupported dataset container version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset container truncated: {0}")]
    Truncated(String),
    #[error("dataset container metadata: {0}")]
    Metadata(String),
}

/// Ground truth attached to the images.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Sprite centers as `[n, 2]` (row, col) in pixels.
    Positions(Tensor),
    /// Integer class labels.
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
}

/// Images plus targets. Images are `[n, c, s, s]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let shape = self.images.shape();
        let row = numel(&shape[1..]);
        let mut images = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < self.len(), "row {i} out of range");
            images.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let images = Tensor::from_vec(&out_shape, images).expect("row arithmetic");
        let targets = match &self.targets {
            Targets::Positions(p) => {
                let mut rows = Vec::with_capacity(indices.len() * 2);
                for &i in indices {
                    rows.extend_from_slice(&p.data()[i * 2..i * 2 + 2]);
                }
                Targets::Positions(
                    Tensor::from_vec(&[indices.len(), 2], rows).expect("row arithmetic"),
                )
            }
            Targets::Classes {
                labels,
                num_classes,
            } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        };
        Dataset { images, targets }
    }

    /// Rows `start..end` in order.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let indices: Vec<usize> = (start..end).collect();
        self.select(&indices)
    }
}

const SPRITE_HALF: usize = 2;
/// Sprite extent in pixels (square).
pub const SPRITE_SIZE: usize = 2 * SPRITE_HALF;
/// Background ceiling in channel 0; the sprite writes 1.0 there.
pub const BACKGROUND_RED_CAP: f64 = 0.5;

/// Fills one `[3, s, s]` image with terrain clutter: a per-channel wash,
/// soft blobs, a random-walk skyline, and pixel noise, clamped so channel 0
/// never exceeds [`BACKGROUND_RED_CAP`].
fn paint_terrain(img: &mut [f64], s: usize, rng: &mut ChaCha8Rng) {
    let c = 3usize;
    let blob_count = 40;

    let base = [
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.75),
        rng.gen_range(0.05..0.75),
    ];
    for (ch, chunk) in img.chunks_exact_mut(s * s).enumerate() {
        chunk.fill(base[ch]);
    }

    for _ in 0..blob_count {
        let cy = rng.gen_range(0.0..s as f64);
        let cx = rng.gen_range(0.0..s as f64);
        let r: f64 = rng.gen_range(1.5..4.0);
        let amp = [
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ];
        let reach = (3.0 * r).ceil() as isize;
        let inv = 1.0 / (2.0 * r * r);
        for dy in -reach..=reach {
            let y = cy as isize + dy;
            if y < 0 || y >= s as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = cx as isize + dx;
                if x < 0 || x >= s as isize {
                    continue;
                }
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let w = (-d2 * inv).exp();
                for ch in 0..c {
                    img[ch * s * s + y as usize * s + x as usize] += amp[ch] * w;
                }
            }
        }
    }

    let tint = [
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.35..0.35),
        rng.gen_range(-0.35..0.35),
    ];
    let mut horizon = rng.gen_range(0.3..0.7) * s as f64;
    for x in 0..s {
        horizon += rng.gen_range(-1.5..1.5);
        horizon = horizon.clamp(2.0, s as f64 - 2.0);
        for y in (horizon as usize)..s {
            for ch in 0..c {
                img[ch * s * s + y * s + x] += tint[ch];
            }
        }
    }

    for v in img.iter_mut() {
        *v += rng.gen_range(-0.04..0.04);
    }

    for (ch, chunk) in img.chunks_exact_mut(s * s).enumerate() {
        let max = if ch == 0 { BACKGROUND_RED_CAP } else { 0.98 };
        for v in chunk.iter_mut() {
            *v = v.clamp(0.02, max);
        }
    }
}

/// Generates the sprite positioning corpus: `n` RGB images of side
/// `image_size` with cluttered backgrounds and one 4x4 sprite at an integer
/// center, which is the regression target.
pub fn gen_sprite_dataset(
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if image_size < 8 {
        return Err(DatasetError::InvalidConfig(format!(
            "image_size {image_size} leaves no room for the sprite; need at least 8"
        )));
    }
    if n == 0 {
        return Err(DatasetError::InvalidConfig("empty dataset requested".into()));
    }
    let s = image_size;
    let c = 3usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0.0; n * c * s * s];
    let mut positions = Vec::with_capacity(n * 2);

    let lo = SPRITE_HALF;
    let hi = s - SPRITE_HALF;

    for img in images.chunks_exact_mut(c * s * s) {
        paint_terrain(img, s, &mut rng);

        // Sprite: saturated, channel 0 pinned to 1.0.
        let cy = rng.gen_range(lo..=hi);
        let cx = rng.gen_range(lo..=hi);
        let g = rng.gen_range(0.7..1.0);
        let b = rng.gen_range(0.0..0.25);
        for y in cy - SPRITE_HALF..cy + SPRITE_HALF {
            for x in cx - SPRITE_HALF..cx + SPRITE_HALF {
                img[y * s + x] = 1.0;
                img[s * s + y * s + x] = g;
                img[2 * s * s + y * s + x] = b;
            }
        }
        positions.push(cy as f64);
        positions.push(cx as f64);
    }

    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, s, s], images).expect("size arithmetic"),
        targets: Targets::Positions(
            Tensor::from_vec(&[n, 2], positions).expect("size arithmetic"),
        ),
    })
}

/// Number of distinct glyphs available to [`gen_shapes_dataset`].
pub const GLYPH_COUNT: usize = 10;

/// Signed distance from normalized coordinates to glyph `id`; negative means
/// inside. Coordinates are roughly in `[-1, 1]`.
fn glyph_sdf(id: usize, u: f64, v: f64) -> f64 {
    let (au, av) = (u.abs(), v.abs());
    match id {
        // disk
        0 => (u * u + v * v).sqrt() - 0.65,
        // ring
        1 => ((u * u + v * v).sqrt() - 0.55).abs() - 0.18,
        // square
        2 => au.max(av) - 0.55,
        // diamond
        3 => au + av - 0.8,
        // upright cross
        4 => (au - 0.25).max(av - 0.8).min((au - 0.8).max(av - 0.25)),
        // horizontal bar
        5 => (au - 0.8).max(av - 0.28),
        // vertical bar
        6 => (au - 0.28).max(av - 0.8),
        // triangle pointing up
        7 => (au * 0.866 + v * 0.5).max(-v - 0.45) - 0.32,
        // diagonal cross
        8 => {
            let ru = (u + v).abs() * std::f64::consts::FRAC_1_SQRT_2;
            let rv = (u - v).abs() * std::f64::consts::FRAC_1_SQRT_2;
            (ru - 0.22).max(rv - 0.8).min((ru - 0.8).max(rv - 0.22))
        }
        // two dots
        9 => {
            let left = ((u + 0.42) * (u + 0.42) + v * v).sqrt();
            let right = ((u - 0.42) * (u - 0.42) + v * v).sqrt();
            left.min(right) - 0.3
        }
        _ => unreachable!("glyph id out of range"),
    }
}

/// Rotation jitter bound in radians. Square meets diamond at 45 degrees and
/// the two bars meet at 90, so anything under about 22 degrees keeps every
/// class pair distinct; 15 leaves margin for edge softness.
const GLYPH_MAX_ROTATION: f64 = 0.26;

/// Generates the glyph classification corpus: `n` RGB images, each carrying
/// one of `num_classes` glyphs placed anywhere in frame with jittered scale,
/// a bounded rotation, and jittered colors, over the same terrain clutter as
/// the sprite corpus. Classes are assigned round-robin before shuffling, so
/// per-class counts never differ by more than one.
pub fn gen_shapes_dataset(
    n: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if !(2..=GLYPH_COUNT).contains(&num_classes) {
        return Err(DatasetError::InvalidConfig(format!(
            "num_classes {num_classes} out of range: have {GLYPH_COUNT} glyphs, need at least 2"
        )));
    }
    if image_size < 8 {
        return Err(DatasetError::InvalidConfig(format!(
            "image_size {image_size} too small to draw glyphs; need at least 8"
        )));
    }
    if n == 0 {
        return Err(DatasetError::InvalidConfig("empty dataset requested".into()));
    }
    let s = image_size;
    let c = 3usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut labels = vec![0usize; n];
    for (rank, &row) in order.iter().enumerate() {
        labels[row] = rank % num_classes;
    }

    let scale_lo = (0.18 * s as f64).max(3.0).min(s as f64 / 2.0 - 1.2);
    let scale_hi = (0.42 * s as f64)
        .min(s as f64 / 2.0 - 1.0)
        .max(scale_lo + 0.1);

    let mut images = vec![0.0; n * c * s * s];
    for (img, &label) in images.chunks_exact_mut(c * s * s).zip(&labels) {
        paint_terrain(img, s, &mut rng);

        let fg = [
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.3..0.95),
            rng.gen_range(0.3..0.95),
        ];
        let scale = rng.gen_range(scale_lo..scale_hi);
        let margin = scale + 0.8;
        let cy = rng.gen_range(margin..=s as f64 - margin);
        let cx = rng.gen_range(margin..=s as f64 - margin);
        let angle = rng.gen_range(-GLYPH_MAX_ROTATION..GLYPH_MAX_ROTATION);
        let (sin, cos) = angle.sin_cos();

        let edge = 0.8 / scale;
        for y in 0..s {
            for x in 0..s {
                let u0 = (x as f64 + 0.5 - cx) / scale;
                let v0 = (y as f64 + 0.5 - cy) / scale;
                let u = cos * u0 + sin * v0;
                let v = cos * v0 - sin * u0;
                let d = glyph_sdf(label, u, v);
                // Coverage ramps from 0 outside to 1 inside across the edge band.
                let t = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
                let cover = t * t * (3.0 - 2.0 * t);
                if cover <= 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let p = &mut img[ch * s * s + y * s + x];
                    *p += cover * (fg[ch] - *p);
                }
            }
        }
    }

    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, s, s], images).expect("size arithmetic"),
        targets: Targets::Classes {
            labels,
            num_classes,
        },
    })
}

const MAGIC: [u8; 4] = *b"FPIM";
const VERSION: u32 = 1;
const KIND_POSITIONS: u8 = 0;
const KIND_CLASSES: u8 = 1;

/// Writes a dataset as bytes: images quantized to u8, positions as f64,
/// class labels as u16.
pub fn export_raw(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let shape = ds.images.shape();
    let (n, c, s) = (shape[0], shape[1], shape[2]);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (kind, num_classes) = match &ds.targets {
        Targets::Positions(_) => (KIND_POSITIONS, 0u32),
        Targets::Classes { num_classes, .. } => (KIND_CLASSES, *num_classes as u32),
    };
    w.write_all(&[kind])?;
    for dim in [n, c, s] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&num_classes.to_le_bytes())?;
    for &v in ds.images.data() {
        w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    match &ds.targets {
        Targets::Positions(p) => {
            for &v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Targets::Classes { labels, .. } => {
            for &l in labels {
                w.write_all(&(l as u16).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Truncated(format!("file ended while reading {what}"))
        } else {
            DatasetError::Io(e)
        }
    })
}

/// Reads a dataset written by [`export_raw`]. Image bytes map back to
/// `byte / 255`.
pub fn import_raw(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "format version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let mut kind = [0u8; 1];
    read_exact(&mut r, &mut kind, "target kind")?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        read_exact(&mut r, &mut word, "image dimensions")?;
        *d = u32::from_le_bytes(word) as usize;
    }
    read_exact(&mut r, &mut word, "class count")?;
    let num_classes = u32::from_le_bytes(word) as usize;
    let (n, c, s) = (dims[0], dims[1], dims[2]);
    if n == 0 || c == 0 || s == 0 {
        return Err(DatasetError::Metadata(format!(
            "degenerate image dimensions {n}x{c}x{s}x{s}"
        )));
    }

    let mut bytes = vec![0u8; n * c * s * s];
    read_exact(&mut r, &mut bytes, "image data")?;
    let images = Tensor::from_vec(
        &[n, c, s, s],
        bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
    .expect("size arithmetic");

    let targets = match kind[0] {
        KIND_POSITIONS => {
            let mut word8 = [0u8; 8];
            let mut rows = Vec::with_capacity(n * 2);
            for i in 0..n * 2 {
                read_exact(&mut r, &mut word8, &format!("position value {i}"))?;
                rows.push(f64::from_le_bytes(word8));
            }
            Targets::Positions(Tensor::from_vec(&[n, 2], rows).expect("size arithmetic"))
        }
        KIND_CLASSES => {
            if num_classes < 2 {
                return Err(DatasetError::Metadata(format!(
                    "class dataset declares {num_classes} classes"
                )));
            }
            let mut word2 = [0u8; 2];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                read_exact(&mut r, &mut word2, &format!("label {i}"))?;
                let l = u16::from_le_bytes(word2) as usize;
                if l >= num_classes {
                    return Err(DatasetError::Metadata(format!(
                        "label {l} out of range for {num_classes} classes"
                    )));
                }
                labels.push(l);
            }
            Targets::Classes {
                labels,
                num_classes,
            }
        }
        other => {
            return Err(DatasetError::Metadata(format!(
                "unknown target kind {other}"
            )))
        }
    };

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(Dataset { images, targets }),
        _ => Err(DatasetError::Metadata(
            "trailing bytes after target data".into(),
        )),
    }
}
