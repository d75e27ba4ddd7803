use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClassMap, Dataset, FeatureMap, ImagePatch, Sample, SparseLabelSet, Split};
use crate::{Error, Result};

/// Magic bytes of the LCSB dataset container.
pub const LCSB_MAGIC: [u8; 4] = *b"LCSB";
/// Current LCSB format version.
pub const LCSB_VERSION: u32 = 1;

const FMAP_MAGIC: [u8; 4] = *b"LCFM";

// Little-endian scalar helpers. The format is normative and bit-exact, so
// every field goes through these.
fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<R: Read> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.inner.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let mut bytes = vec![0u8; n * 2];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }
}

fn check_u16(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value)
        .map_err(|_| Error::validation(format!("{what} {value} does not fit the u16 header field")))
}

fn header_bytes(count: u64, k: u16, c: u16, h: u16, w: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(24);
    out.extend_from_slice(&LCSB_MAGIC);
    put_u32(&mut out, LCSB_VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    put_u16(&mut out, k);
    put_u16(&mut out, c);
    put_u16(&mut out, h);
    put_u16(&mut out, w);
    out
}

fn read_header<R: Read>(cur: &mut Cursor<R>) -> Result<(u64, u16, u16, u16, u16)> {
    let mut magic = [0u8; 4];
    cur.inner.read_exact(&mut magic)?;
    if magic != LCSB_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?}, expected {LCSB_MAGIC:?}"
        )));
    }
    let version = cur.u32()?;
    if version != LCSB_VERSION {
        return Err(Error::format(format!(
            "unsupported version {version}, expected {LCSB_VERSION}"
        )));
    }
    let count = cur.u64()?;
    let k = cur.u16()?;
    let c = cur.u16()?;
    let h = cur.u16()?;
    let w = cur.u16()?;
    Ok((count, k, c, h, w))
}

/// Serialize a dataset to the LCSB container at `path`.
///
/// Layout (little-endian): magic `LCSB`, version u32, sample count u64, then
/// K, C, H, W as u16. Per sample: image float32 `(C, H, W)`, split byte,
/// group u32, label count u16, then per label row/col/class as u16 each.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = dataset.shape().unwrap_or((0, 0, 0));
    let header = header_bytes(
        dataset.len() as u64,
        dataset.num_classes(),
        check_u16(c, "channel count")?,
        check_u16(h, "height")?,
        check_u16(w, "width")?,
    );

    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&header)?;
    for sample in dataset.samples() {
        let mut body = Vec::with_capacity(sample.image.values().len() * 4 + 16);
        for &v in sample.image.values() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.push(sample.split.to_byte());
        put_u32(&mut body, sample.group);
        put_u16(&mut body, check_u16(sample.labels.len(), "label count")?);
        for &(row, col, class) in sample.labels.entries() {
            put_u16(&mut body, row);
            put_u16(&mut body, col);
            put_u16(&mut body, class);
        }
        writer.write_all(&body)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read an LCSB container. `read(write(x)) == x` bit-exactly.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut cur = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    let (count, k, c, h, w) = read_header(&mut cur)?;

    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let values = cur.f32s(c as usize * h as usize * w as usize)?;
        let image = ImagePatch::new(c as usize, h as usize, w as usize, values)?;
        let split = Split::from_byte(cur.u8()?)?;
        let group = cur.u32()?;
        let label_count = cur.u16()?;
        let mut entries = Vec::with_capacity(label_count as usize);
        for _ in 0..label_count {
            let row = cur.u16()?;
            let col = cur.u16()?;
            let class = cur.u16()?;
            entries.push((row, col, class));
        }
        let labels = SparseLabelSet::new(entries, k, h as usize, w as usize)?;
        samples.push(Sample {
            image,
            labels,
            split,
            group,
        });
    }
    Dataset::new(k, samples)
}

/// Write dense class rasters (ground-truth sidecars or predictions) using
/// the LCSB header layout with `C = 1` and u16 class ids in place of floats.
pub fn write_class_rasters(maps: &[ClassMap], num_classes: u16, path: &Path) -> Result<()> {
    let (h, w) = maps
        .first()
        .map(|m| (m.height(), m.width()))
        .unwrap_or((0, 0));
    for (i, m) in maps.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(Error::validation(format!(
                "raster {i} is {}x{}, expected {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    let header = header_bytes(
        maps.len() as u64,
        num_classes,
        1,
        check_u16(h, "height")?,
        check_u16(w, "width")?,
    );
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&header)?;
    for m in maps {
        let mut body = Vec::with_capacity(m.classes().len() * 2);
        for &id in m.classes() {
            body.extend_from_slice(&id.to_le_bytes());
        }
        writer.write_all(&body)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a class raster container written by [`write_class_rasters`].
pub fn read_class_rasters(path: &Path) -> Result<(Vec<ClassMap>, u16)> {
    let mut cur = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    let (count, k, c, h, w) = read_header(&mut cur)?;
    if c != 1 {
        return Err(Error::format(format!(
            "class raster container must have C=1, got {c}"
        )));
    }
    let mut maps = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let ids = cur.u16s(h as usize * w as usize)?;
        for &id in &ids {
            if id >= k {
                return Err(Error::validation(format!("class id {id} outside [0, {k})")));
            }
        }
        maps.push(ClassMap::new(h as usize, w as usize, ids)?);
    }
    Ok((maps, k))
}

/// Write one externally produced feature map: magic `LCFM`, version u32,
/// F/H/W u16, then float32 `(F, H, W)` little-endian.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(14 + map.values().len() * 4);
    out.extend_from_slice(&FMAP_MAGIC);
    put_u32(&mut out, 1);
    put_u16(&mut out, check_u16(map.features(), "feature count")?);
    put_u16(&mut out, check_u16(map.height(), "height")?);
    put_u16(&mut out, check_u16(map.width(), "width")?);
    for &v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&out)?;
    writer.flush()?;
    Ok(())
}

/// Read a feature map written by [`write_feature_map`].
pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut cur = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 4];
    cur.inner.read_exact(&mut magic)?;
    if magic != FMAP_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?}, expected {FMAP_MAGIC:?}"
        )));
    }
    let version = cur.u32()?;
    if version != 1 {
        return Err(Error::format(format!(
            "unsupported feature map version {version}"
        )));
    }
    let f = cur.u16()? as usize;
    let h = cur.u16()? as usize;
    let w = cur.u16()? as usize;
    let values = cur.f32s(f * h * w)?;
    FeatureMap::new(f, h, w, values)
}

/// One line of a plain-text split manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub group: u32,
}

/// Parse a manifest: one `index split group` triple per line, `#` comments
/// and blank lines ignored. Split is `train|val|test` or `0|1|2`.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        fn field<'a>(part: Option<&'a str>, what: &str, lineno: usize) -> Result<&'a str> {
            part.ok_or_else(|| {
                Error::format(format!("manifest line {}: missing {what}", lineno + 1))
            })
        }
        let parse = |part, what| field(part, what, lineno);
        let index: usize = parse(parts.next(), "sample index")?
            .parse()
            .map_err(|e| Error::format(format!("manifest line {}: {e}", lineno + 1)))?;
        let split = Split::parse(parse(parts.next(), "split")?)?;
        let group: u32 = parse(parts.next(), "group")?
            .parse()
            .map_err(|e| Error::format(format!("manifest line {}: {e}", lineno + 1)))?;
        entries.push(ManifestEntry {
            index,
            split,
            group,
        });
    }
    Ok(entries)
}

/// Apply manifest entries to a sample list, overriding split and group.
pub fn apply_manifest(samples: &mut [Sample], entries: &[ManifestEntry]) -> Result<()> {
    let count = samples.len();
    for e in entries {
        let sample = samples.get_mut(e.index).ok_or_else(|| {
            Error::validation(format!("manifest references sample {} of {count}", e.index))
        })?;
        sample.split = e.split;
        sample.group = e.group;
    }
    Ok(())
}
