//! Raw binary formats for masks, embedding maps and centroids, plus the
//! line-oriented dataset manifest.
//!
//! All binary files start with a four byte magic and a version byte;
//! every multi-byte integer and float is little-endian.
//!
//! | format | magic  | header after version        | payload                          |
//! |--------|--------|-----------------------------|----------------------------------|
//! | mask   | `LSMK` | width u32, height u32       | `w*h` u16 ids, row-major         |
//! | embed  | `LEMB` | L u32, H u32, W u32         | `L*H*W` f32, channel-major       |
//! | cents  | `LCTR` | C u32, L u32                | `C*L` f32, row-major by centroid |
//! | bank   | `LBNK` | N u32, L u32                | N records (see [`write_bank`])   |

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatError};
use crate::tensor::DenseArray;

pub const MASK_MAGIC: [u8; 4] = *b"LSMK";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"LEMB";
pub const CENTROID_MAGIC: [u8; 4] = *b"LCTR";
pub const BANK_MAGIC: [u8; 4] = *b"LBNK";
pub const FORMAT_VERSION: u8 = 0x01;

/// Id of the catch-all "other" category.
pub const OTHER: u16 = 0;
/// Sentinel for pixels excluded from evaluation.
pub const IGNORE: u16 = u16::MAX;
/// Largest category count representable next to the ignore sentinel.
pub const MAX_CATEGORIES: u32 = 65534;

type FResult<T> = std::result::Result<T, FormatError>;

/// A grid of category ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> crate::Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("mask dimensions must be positive".into()));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} mask with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, id: u16) -> crate::Result<Self> {
        Self::new(width, height, vec![id; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn same_dims(&self, other: &SegMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Checks every id is `<= categories` or the ignore sentinel.
    pub fn validate(&self, categories: u32) -> crate::Result<()> {
        match self
            .labels
            .iter()
            .find(|&&id| id != IGNORE && u32::from(id) > categories)
        {
            Some(&id) => Err(Error::CategoryRange {
                id: id.into(),
                max: categories,
            }),
            None => Ok(()),
        }
    }

    /// Distinct major category ids (no "other", no ignore), ascending.
    pub fn categories(&self) -> BTreeSet<u16> {
        self.labels
            .iter()
            .copied()
            .filter(|&id| id != OTHER && id != IGNORE)
            .collect()
    }
}

fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> FResult<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|e| truncated(e, "magic"))?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    let version = r.read_u8().map_err(|e| truncated(e, "version"))?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    Ok(())
}

fn truncated(e: std::io::Error, what: &str) -> FormatError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FormatError::Truncated(format!("reading {what}"))
    } else {
        FormatError::Io(e)
    }
}

fn read_dim<R: Read>(r: &mut R, what: &str) -> FResult<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| truncated(e, what))
}

/// Reads exactly `count` elements of `size` bytes without trusting `count`
/// for the allocation.
fn read_payload<R: Read>(r: &mut R, count: u64, size: u64, what: &str) -> FResult<Vec<u8>> {
    let want = count
        .checked_mul(size)
        .ok_or_else(|| FormatError::Header(format!("{what} size overflows")))?;
    let mut buf = Vec::new();
    r.take(want).read_to_end(&mut buf)?;
    if (buf.len() as u64) < want {
        return Err(FormatError::Truncated(format!(
            "{what}: expected {want} bytes, got {}",
            buf.len()
        )));
    }
    Ok(buf)
}

fn decode_f32s(bytes: &[u8]) -> FResult<Vec<f64>> {
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, b)| {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err(FormatError::NonFinite(i))
            }
        })
        .collect()
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> FResult<()> {
    for (i, &v) in values.iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        w.write_f32::<LittleEndian>(narrowed)?;
    }
    Ok(())
}

fn dim_u32(v: usize, what: &str) -> FResult<u32> {
    u32::try_from(v).map_err(|_| FormatError::Header(format!("{what} {v} exceeds u32")))
}

pub fn write_mask<W: Write>(m: &SegMask, mut w: W) -> FResult<()> {
    w.write_all(&MASK_MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(m.width, "width")?)?;
    w.write_u32::<LittleEndian>(dim_u32(m.height, "height")?)?;
    for &id in &m.labels {
        w.write_u16::<LittleEndian>(id)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask<R: Read>(mut r: R) -> FResult<SegMask> {
    read_magic(&mut r, MASK_MAGIC)?;
    let width = read_dim(&mut r, "width")?;
    let height = read_dim(&mut r, "height")?;
    if width == 0 || height == 0 {
        return Err(FormatError::Header(format!("empty mask {width}x{height}")));
    }
    let count = u64::from(width) * u64::from(height);
    let bytes = read_payload(&mut r, count, 2, "mask labels")?;
    let labels = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(SegMask {
        width: width as usize,
        height: height as usize,
        labels,
    })
}

/// Writes a rank-3 `L x H x W` array, narrowing to 32-bit floats.
pub fn write_embedding<W: Write>(z: &DenseArray, mut w: W) -> FResult<()> {
    let (l, h, wd) = z.dims3().map_err(|e| FormatError::Header(e.to_string()))?;
    w.write_all(&EMBEDDING_MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    for (v, what) in [(l, "L"), (h, "H"), (wd, "W")] {
        w.write_u32::<LittleEndian>(dim_u32(v, what)?)?;
    }
    write_f32s(&mut w, z.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_embedding<R: Read>(mut r: R) -> FResult<DenseArray> {
    read_magic(&mut r, EMBEDDING_MAGIC)?;
    let l = read_dim(&mut r, "L")?;
    let h = read_dim(&mut r, "H")?;
    let w = read_dim(&mut r, "W")?;
    if l == 0 || h == 0 || w == 0 {
        return Err(FormatError::Header(format!("empty embedding {l}x{h}x{w}")));
    }
    let count = u64::from(l)
        .checked_mul(u64::from(h))
        .and_then(|n| n.checked_mul(u64::from(w)))
        .ok_or_else(|| FormatError::Header(format!("embedding {l}x{h}x{w} size overflows")))?;
    let bytes = read_payload(&mut r, count, 4, "embedding values")?;
    let data = decode_f32s(&bytes)?;
    DenseArray::new(vec![l as usize, h as usize, w as usize], data)
        .map_err(|e| FormatError::Header(e.to_string()))
}

/// Cluster centers, one row of length `dim` per centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    count: usize,
    dim: usize,
    centers: Vec<f64>,
}

impl CentroidSet {
    pub fn new(count: usize, dim: usize, centers: Vec<f64>) -> crate::Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "centroid set {count}x{dim} must be non-empty"
            )));
        }
        if centers.len() != count * dim {
            return Err(Error::Shape(format!(
                "{count}x{dim} centroids with {} values",
                centers.len()
            )));
        }
        if let Some(index) = centers.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            count,
            dim,
            centers,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> crate::Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged centroid rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.centers
    }
}

pub fn write_centroids<W: Write>(k: &CentroidSet, mut w: W) -> FResult<()> {
    w.write_all(&CENTROID_MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(k.count, "C")?)?;
    w.write_u32::<LittleEndian>(dim_u32(k.dim, "L")?)?;
    write_f32s(&mut w, &k.centers)?;
    w.flush()?;
    Ok(())
}

pub fn read_centroids<R: Read>(mut r: R) -> FResult<CentroidSet> {
    read_magic(&mut r, CENTROID_MAGIC)?;
    let c = read_dim(&mut r, "C")?;
    let l = read_dim(&mut r, "L")?;
    if c == 0 || l == 0 {
        return Err(FormatError::Header(format!(
            "centroid set {c}x{l} must be non-empty"
        )));
    }
    let bytes = read_payload(&mut r, u64::from(c) * u64::from(l), 4, "centroid values")?;
    let centers = decode_f32s(&bytes)?;
    CentroidSet::new(c as usize, l as usize, centers)
        .map_err(|e| FormatError::Header(e.to_string()))
}

/// One averaged embedding of an (image, category) region.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub vector: Vec<f64>,
    pub label: u16,
    pub image_id: String,
}

/// Record layout after the `LBNK` header (`N`, `L`): for each entry a u32
/// label, a u32 byte length and UTF-8 image id, then `L` f32 values.
pub fn write_bank<W: Write>(entries: &[BankEntry], mut w: W) -> FResult<()> {
    let dim = entries.first().map_or(0, |e| e.vector.len());
    w.write_all(&BANK_MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(entries.len(), "N")?)?;
    w.write_u32::<LittleEndian>(dim_u32(dim, "L")?)?;
    for e in entries {
        if e.vector.len() != dim {
            return Err(FormatError::Header("bank vectors differ in length".into()));
        }
        w.write_u32::<LittleEndian>(u32::from(e.label))?;
        w.write_u32::<LittleEndian>(dim_u32(e.image_id.len(), "image id length")?)?;
        w.write_all(e.image_id.as_bytes())?;
        write_f32s(&mut w, &e.vector)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bank<R: Read>(mut r: R) -> FResult<Vec<BankEntry>> {
    read_magic(&mut r, BANK_MAGIC)?;
    let n = read_dim(&mut r, "N")?;
    let l = read_dim(&mut r, "L")?;
    let mut out = Vec::new();
    for i in 0..n {
        let label = read_dim(&mut r, "label")?;
        let label = u16::try_from(label)
            .map_err(|_| FormatError::Header(format!("entry {i}: label {label}")))?;
        let id_len = read_dim(&mut r, "image id length")?;
        let id_bytes = read_payload(&mut r, u64::from(id_len), 1, "image id")?;
        let image_id = String::from_utf8(id_bytes)
            .map_err(|_| FormatError::Header(format!("entry {i}: image id not UTF-8")))?;
        let vector = decode_f32s(&read_payload(&mut r, u64::from(l), 4, "bank vector")?)?;
        out.push(BankEntry {
            vector,
            label,
            image_id,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub mask_path: String,
    pub gt_categories: BTreeSet<u16>,
}

/// Dataset listing: category count plus per-image label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub category_count: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("C={}\n", self.category_count);
        for e in &self.entries {
            let ids: Vec<String> = e.gt_categories.iter().map(u16::to_string).collect();
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image_id,
                e.mask_path,
                ids.join(",")
            ));
        }
        s
    }
}

pub fn read_manifest<R: Read>(mut r: R) -> FResult<Manifest> {
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|e| FormatError::Manifest {
            line: 0,
            msg: format!("not UTF-8 text: {e}"),
        })?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> FResult<Manifest> {
    let err = |line: usize, msg: String| FormatError::Manifest { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty manifest".into()))?;
    let category_count: u32 = header
        .strip_prefix("C=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| err(1, format!("expected \"C=<int>\", got {header:?}")))?;
    if category_count == 0 || category_count > MAX_CATEGORIES {
        return Err(err(
            1,
            format!("category count {category_count} outside 1..={MAX_CATEGORIES}"),
        ));
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image_id, mask_path, ids] = fields[..] else {
            return Err(err(
                n,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        };
        if image_id.is_empty() || mask_path.is_empty() {
            return Err(err(n, "empty image id or mask path".into()));
        }
        let mut gt_categories = BTreeSet::new();
        for tok in ids.split(',') {
            let id: u32 = tok
                .trim()
                .parse()
                .map_err(|_| err(n, format!("bad category id {tok:?}")))?;
            if id == 0 || id > category_count {
                return Err(err(
                    n,
                    format!("category id {id} outside 1..={category_count}"),
                ));
            }
            gt_categories.insert(id as u16);
        }
        if !seen.insert(image_id.to_string()) {
            return Err(err(n, format!("duplicate image id {image_id:?}")));
        }
        entries.push(ManifestEntry {
            image_id: image_id.into(),
            mask_path: mask_path.into(),
            gt_categories,
        });
    }
    Ok(Manifest {
        category_count,
        entries,
    })
}

/// Converts decoded RGB pixels (row-major, 3 bytes each) with the
/// `id = R + 256 * G` convention. `(255, 255, _)` becomes [`IGNORE`].
pub fn import_png_mask(rgb: &[u8], width: usize, height: usize) -> crate::Result<SegMask> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{width}x{height} RGB image needs {} bytes, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let labels = rgb
        .chunks_exact(3)
        .map(|px| u16::from(px[0]) + 256 * u16::from(px[1]))
        .collect();
    SegMask::new(width, height, labels)
}

pub fn load_mask(path: &Path) -> FResult<SegMask> {
    read_mask(BufReader::new(File::open(path)?))
}

pub fn save_mask(path: &Path, m: &SegMask) -> FResult<()> {
    write_mask(m, BufWriter::new(File::create(path)?))
}

pub fn load_embedding(path: &Path) -> FResult<DenseArray> {
    read_embedding(BufReader::new(File::open(path)?))
}

pub fn save_embedding(path: &Path, z: &DenseArray) -> FResult<()> {
    write_embedding(z, BufWriter::new(File::create(path)?))
}

pub fn load_centroids(path: &Path) -> FResult<CentroidSet> {
    read_centroids(BufReader::new(File::open(path)?))
}

pub fn save_centroids(path: &Path, k: &CentroidSet) -> FResult<()> {
    write_centroids(k, BufWriter::new(File::create(path)?))
}

pub fn load_bank(path: &Path) -> FResult<Vec<BankEntry>> {
    read_bank(BufReader::new(File::open(path)?))
}

pub fn save_bank(path: &Path, entries: &[BankEntry]) -> FResult<()> {
    write_bank(entries, BufWriter::new(File::create(path)?))
}

pub fn load_manifest(path: &Path) -> FResult<Manifest> {
    read_manifest(BufReader::new(File::open(path)?))
}
