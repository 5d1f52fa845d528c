//! Binary raster ("MSRV") and weights ("PSHW") containers, plus PGM/PPM
//! export and ingest for visual inspection and test data creation.
//!
//! MSRV: magic `MSRV`, version byte 0x01, little-endian u32 W, H, L, dtype
//! byte 0x01 (= float32), then W*H*L little-endian f32, band-sequential.
//!
//! PSHW: magic `PSHW`, version byte 0x01, little-endian u32 block count, then
//! per block: u16 name length, UTF-8 name, u8 rank, rank little-endian u32
//! dims, then f32 data. Reserved blocks named `meta.*` (rank 1, one value)
//! carry the pipeline-stage tag and small scalar settings; `meta.stage` is
//! 1.0 for fusion weights and 2.0 for texture weights.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::CoreError;
use crate::params::ParamStore;
use crate::raster::RasterVolume;
use crate::tensor::Tensor;
use crate::Result;

const MSRV_MAGIC: [u8; 4] = *b"MSRV";
const PSHW_MAGIC: [u8; 4] = *b"PSHW";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x01;

// ---------------------------------------------------------------------------
// framing helpers
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Truncated {
                path: self.path.to_string(),
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CoreError::Format {
                path: self.path.to_string(),
                detail: format!("{} trailing byte(s) after payload", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, expected: [u8; 4]) -> Result<()> {
    let b = r.take(4)?;
    let found = [b[0], b[1], b[2], b[3]];
    if found != expected {
        return Err(CoreError::BadMagic {
            path: r.path.to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

fn check_version(r: &mut Reader) -> Result<()> {
    let v = r.u8()?;
    if v != VERSION {
        return Err(CoreError::UnknownVersion {
            path: r.path.to_string(),
            found: v,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MSRV rasters
// ---------------------------------------------------------------------------

pub fn raster_to_bytes(volume: &RasterVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + volume.pixels().len() * 4);
    out.extend_from_slice(&MSRV_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(volume.width() as u32).to_le_bytes());
    out.extend_from_slice(&(volume.height() as u32).to_le_bytes());
    out.extend_from_slice(&(volume.bands() as u32).to_le_bytes());
    out.push(DTYPE_F32);
    for &p in volume.pixels() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn raster_from_bytes(bytes: &[u8], path: &str) -> Result<RasterVolume> {
    let mut r = Reader::new(bytes, path);
    check_magic(&mut r, MSRV_MAGIC)?;
    check_version(&mut r)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let l = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CoreError::Format {
            path: path.to_string(),
            detail: format!("unknown dtype byte {dtype:#04x}"),
        });
    }
    let pixels = r.f32_vec(w.checked_mul(h).and_then(|a| a.checked_mul(l)).ok_or_else(|| {
        CoreError::Format {
            path: path.to_string(),
            detail: format!("implausible dimensions {w}x{h}x{l}"),
        }
    })?)?;
    r.finish()?;
    let mut volume = RasterVolume::new(w, h, l, pixels).map_err(|e| CoreError::Format {
        path: path.to_string(),
        detail: e.to_string(),
    })?;
    let clamped = volume.clamp_unit();
    if clamped > 0 {
        eprintln!("warning: {path}: clamped {clamped} pixel(s) into [0,1] on ingest");
    }
    Ok(volume)
}

pub fn write_raster(volume: &RasterVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, raster_to_bytes(volume))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    raster_from_bytes(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// PSHW weights
// ---------------------------------------------------------------------------

/// Which pipeline stage a weights file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Fusion,
    Texture,
}

impl StageTag {
    fn code(self) -> f32 {
        match self {
            StageTag::Fusion => 1.0,
            StageTag::Texture => 2.0,
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageTag::Fusion => write!(f, "fusion"),
            StageTag::Texture => write!(f, "texture"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Named parameter blocks plus a stage tag and scalar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub stage: StageTag,
    /// Scalar settings serialized as `meta.<key>` blocks, in order.
    pub meta: Vec<(String, f32)>,
    pub blocks: Vec<WeightBlock>,
}

impl WeightsFile {
    pub fn new(stage: StageTag) -> Self {
        WeightsFile {
            stage,
            meta: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn from_params(stage: StageTag, params: &ParamStore<f32>) -> Self {
        let blocks = params
            .iter()
            .map(|(name, t)| WeightBlock {
                name: name.to_string(),
                dims: t.shape().iter().map(|&d| d as u32).collect(),
                data: t.data().to_vec(),
            })
            .collect();
        WeightsFile {
            stage,
            meta: Vec::new(),
            blocks,
        }
    }

    /// Rebuilds a parameter store from the blocks, preserving order.
    pub fn to_params(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for b in &self.blocks {
            let shape: Vec<usize> = b.dims.iter().map(|&d| d as usize).collect();
            store.add(&b.name, Tensor::new(&shape, b.data.clone())?);
        }
        Ok(store)
    }

    pub fn meta_value(&self, key: &str) -> Option<f32> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|&(_, v)| v)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: f32) {
        self.meta.push((key.into(), value));
    }

    pub fn block(&self, name: &str) -> Result<&WeightBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CoreError::contract(format!("missing weight block {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PSHW_MAGIC);
        out.push(VERSION);
        let count = 1 + self.meta.len() + self.blocks.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let scalar_block = |out: &mut Vec<u8>, name: &str, value: f32| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(1u8);
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&value.to_le_bytes());
        };
        scalar_block(&mut out, "meta.stage", self.stage.code());
        for (key, value) in &self.meta {
            scalar_block(&mut out, &format!("meta.{key}"), *value);
        }
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.dims.len() as u8);
            for &d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        check_magic(&mut r, PSHW_MAGIC)?;
        check_version(&mut r)?;
        let count = r.u32()? as usize;
        let mut stage = None;
        let mut meta = Vec::new();
        let mut blocks: Vec<WeightBlock> = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                CoreError::Format {
                    path: path.to_string(),
                    detail: "block name is not UTF-8".to_string(),
                }
            })?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let numel = dims.iter().map(|&d| d as usize).product::<usize>();
            let data = r.f32_vec(numel)?;
            if let Some(key) = name.strip_prefix("meta.") {
                if numel != 1 {
                    return Err(CoreError::Format {
                        path: path.to_string(),
                        detail: format!("meta block {name} must hold exactly one value"),
                    });
                }
                if key == "stage" {
                    stage = Some(match data[0] {
                        v if v == 1.0 => StageTag::Fusion,
                        v if v == 2.0 => StageTag::Texture,
                        v => {
                            return Err(CoreError::Format {
                                path: path.to_string(),
                                detail: format!("unknown stage code {v}"),
                            })
                        }
                    });
                } else {
                    meta.push((key.to_string(), data[0]));
                }
            } else {
                if blocks.iter().any(|b| b.name == name) {
                    return Err(CoreError::Format {
                        path: path.to_string(),
                        detail: format!("duplicate block name {name}"),
                    });
                }
                blocks.push(WeightBlock { name, dims, data });
            }
        }
        r.finish()?;
        let stage = stage.ok_or_else(|| CoreError::Format {
            path: path.to_string(),
            detail: "missing meta.stage block".to_string(),
        })?;
        Ok(WeightsFile { stage, meta, blocks })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// PGM / PPM export and ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// round(v * (2^bits - 1)) with ties rounding up, clamped to the code range.
fn quantize(v: f32, max: u32) -> u32 {
    let q = (v as f64 * max as f64 + 0.5).floor();
    q.clamp(0.0, max as f64) as u32
}

fn push_sample(out: &mut Vec<u8>, value: u32, depth: BitDepth) {
    match depth {
        BitDepth::Eight => out.push(value as u8),
        // 16-bit netpbm samples are big-endian
        BitDepth::Sixteen => out.extend_from_slice(&(value as u16).to_be_bytes()),
    }
}

/// Writes one band as a binary PGM (P5).
pub fn export_gray(
    volume: &RasterVolume,
    band: usize,
    depth: BitDepth,
    path: impl AsRef<Path>,
) -> Result<()> {
    if band >= volume.bands() {
        return Err(CoreError::contract(format!(
            "band {band} out of range for {} band(s)",
            volume.bands()
        )));
    }
    let max = depth.max();
    let mut out = format!("P5\n{} {}\n{}\n", volume.width(), volume.height(), max).into_bytes();
    for &v in volume.band(band) {
        push_sample(&mut out, quantize(v, max), depth);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a band triple as a binary PPM (P6), 8 bits per sample.
pub fn export_rgb(
    volume: &RasterVolume,
    bands: [usize; 3],
    path: impl AsRef<Path>,
) -> Result<()> {
    for &b in &bands {
        if b >= volume.bands() {
            return Err(CoreError::contract(format!(
                "band {b} out of range for {} band(s)",
                volume.bands()
            )));
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", volume.width(), volume.height()).into_bytes();
    for y in 0..volume.height() {
        for x in 0..volume.width() {
            for &b in &bands {
                out.push(quantize(volume.get(x, y, b), 255) as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM (one band) or PPM (three bands), normalizing samples
/// by the declared maxval.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<RasterVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let fail = |detail: &str| CoreError::Format {
        path: name.clone(),
        detail: detail.to_string(),
    };
    if bytes.len() < 2 {
        return Err(fail("too short for a netpbm header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(fail("expected P5 or P6")),
    };
    // header tokens: width, height, maxval; # comments allowed
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail("header field out of range"))?;
    }
    // single whitespace byte separates header from payload
    pos += 1;
    let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(fail("maxval outside 1..=65535"));
    }
    let wide = maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    let want = w * h * channels * sample_bytes;
    if bytes.len() < pos + want {
        return Err(CoreError::Truncated {
            path: name,
            needed: pos + want - bytes.len(),
        });
    }
    let payload = &bytes[pos..pos + want];
    // interleaved samples -> band-sequential planes
    let mut pixels = vec![0.0f32; w * h * channels];
    for i in 0..w * h {
        for c in 0..channels {
            let s = i * channels + c;
            let raw = if wide {
                u16::from_be_bytes([payload[s * 2], payload[s * 2 + 1]]) as u32
            } else {
                payload[s] as u32
            };
            pixels[c * w * h + i] = raw as f32 / maxval as f32;
        }
    }
    RasterVolume::new(w, h, channels, pixels)
}
