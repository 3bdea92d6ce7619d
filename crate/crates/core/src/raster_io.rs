//! Raster types and their on-disk formats.
//!
//! * class rasters: binary PGM (`P5`), 16-bit big-endian samples;
//! * UID rasters: `UIR1`, little-endian `u32` words;
//! * probability rasters: `PRB1`, little-endian `f64`, channel-fastest.
//!
//! Writers always emit the canonical header, so `write(read(f)) == f` holds
//! for every canonical file.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{format_err, invalid, Result};

pub const MAX_UID: u32 = 9_999_999;
pub const PROB_TOLERANCE: f64 = 1e-9;

const UIR_MAGIC: &[u8] = b"UIR1\n";
const PRB_MAGIC: &[u8] = b"PRB1\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl ClassRaster {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        Ok(ClassRaster {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        ClassRaster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UidRaster {
    width: usize,
    height: usize,
    data: Vec<u32>,
}

impl UidRaster {
    pub fn new(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > MAX_UID) {
            return Err(invalid(format!("uid {v} exceeds {MAX_UID}")));
        }
        Ok(UidRaster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-pixel categorical distributions, stored row-major with the channel
/// index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ProbRaster {
    /// Builds a raster and checks that every pixel is a categorical
    /// distribution within [`PROB_TOLERANCE`].
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let r = Self::new_unchecked(width, height, channels, data)?;
        if let Some((pixel, sum)) = r.first_unnormalized() {
            return Err(invalid(format!(
                "pixel {pixel} is not a categorical distribution (sum {sum})"
            )));
        }
        Ok(r)
    }

    /// Builds a raster checking only the shape.
    pub fn new_unchecked(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("probability raster needs at least one channel"));
        }
        check_len(width, height, channels, data.len())?;
        Ok(ProbRaster {
            width,
            height,
            channels,
            data,
        })
    }

    /// Each pixel gets all of its mass on `channel`.
    pub fn one_hot(width: usize, height: usize, channels: usize, channel: usize) -> Self {
        let mut data = vec![0.0; width * height * channels];
        for px in data.chunks_exact_mut(channels) {
            px[channel] = 1.0;
        }
        ProbRaster {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    /// Index and sum of the first pixel that is not a distribution.
    pub fn first_unnormalized(&self) -> Option<(usize, f64)> {
        self.pixels().enumerate().find_map(|(i, px)| {
            let sum: f64 = px.iter().sum();
            let ok = px.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= PROB_TOLERANCE;
            (!ok).then_some((i, sum))
        })
    }

    pub fn same_shape(&self, other: &ProbRaster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| invalid("raster dimensions overflow"))?;
    if expected != len {
        return Err(invalid(format!(
            "raster {width}x{height}x{channels} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- PGM ----

/// Canonical PGM encoding: `P5 <w> <h> 65535\n` then big-endian `u16` samples.
pub fn write_pgm16<W: Write>(raster: &ClassRaster, mut out: W) -> Result<()> {
    writeln!(out, "P5 {} {} 65535", raster.width, raster.height)?;
    let mut buf = Vec::with_capacity(raster.data.len() * 2);
    for v in &raster.data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads any binary PGM with `maxval <= 65535`, including comments and
/// one-byte samples for `maxval < 256`.
pub fn read_pgm16<R: Read>(mut input: R) -> Result<ClassRaster> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<ClassRaster> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err("not a binary PGM (magic must be P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        let start = pos;
        skip_pnm_whitespace(bytes, &mut pos);
        if pos == start {
            return Err(format_err("PGM header fields must be whitespace separated"));
        }
        *field = parse_decimal(bytes, &mut pos)?;
    }
    // exactly one whitespace byte ends the header
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err("PGM header is not terminated by whitespace")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .ok_or_else(|| format_err("PGM dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != count * bytes_per_sample {
        return Err(format_err(format!(
            "PGM payload has {} bytes, expected {}",
            payload.len(),
            count * bytes_per_sample
        )));
    }
    let data: Vec<u16> = if bytes_per_sample == 1 {
        payload.iter().map(|&b| b as u16).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(format_err(format!(
            "PGM sample {v} exceeds maxval {maxval}"
        )));
    }
    ClassRaster::new(width, height, data)
}

fn skip_pnm_whitespace(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn parse_decimal(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("expected a decimal number in header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("header number out of range"))
}

/// Parses the strict `"<a> <b>...\n"` header line used by UIR1 and PRB1.
fn parse_header_line(bytes: &[u8], pos: &mut usize, fields: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(fields);
    for i in 0..fields {
        out.push(parse_decimal(bytes, pos)?);
        let sep = if i + 1 == fields { b'\n' } else { b' ' };
        if bytes.get(*pos) != Some(&sep) {
            return Err(format_err("malformed header line"));
        }
        *pos += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------- UIR ----

pub fn write_uir32<W: Write>(raster: &UidRaster, mut out: W) -> Result<()> {
    if let Some(v) = raster.data.iter().find(|&&v| v > MAX_UID) {
        return Err(invalid(format!("uid {v} exceeds {MAX_UID}")));
    }
    out.write_all(UIR_MAGIC)?;
    writeln!(out, "{} {}", raster.width, raster.height)?;
    let mut buf = Vec::with_capacity(raster.data.len() * 4);
    for v in &raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_uir32<R: Read>(mut input: R) -> Result<UidRaster> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(UIR_MAGIC) {
        return Err(format_err("bad UIR1 magic"));
    }
    let mut pos = UIR_MAGIC.len();
    let dims = parse_header_line(&bytes, &mut pos, 2)?;
    let (width, height) = (dims[0], dims[1]);
    let count = width
        .checked_mul(height)
        .ok_or_else(|| format_err("UIR1 dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(format_err(format!(
            "UIR1 payload has {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<u32> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(v) = data.iter().find(|&&v| v > MAX_UID) {
        return Err(format_err(format!("UIR1 value {v} exceeds {MAX_UID}")));
    }
    Ok(UidRaster {
        width,
        height,
        data,
    })
}

// ---------------------------------------------------------------- PRB ----

/// Non-fatal findings from loading a probability raster.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

pub fn write_prb<W: Write>(raster: &ProbRaster, mut out: W) -> Result<()> {
    if let Some((pixel, sum)) = raster.first_unnormalized() {
        return Err(invalid(format!(
            "pixel {pixel} is not a categorical distribution (sum {sum})"
        )));
    }
    out.write_all(PRB_MAGIC)?;
    writeln!(
        out,
        "{} {} {}",
        raster.width, raster.height, raster.channels
    )?;
    let mut buf = Vec::with_capacity(raster.data.len() * 8);
    for v in &raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_prb<R: Read>(mut input: R) -> Result<(ProbRaster, LoadReport)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(PRB_MAGIC) {
        return Err(format_err("bad PRB1 magic"));
    }
    let mut pos = PRB_MAGIC.len();
    let dims = parse_header_line(&bytes, &mut pos, 3)?;
    let (width, height, channels) = (dims[0], dims[1], dims[2]);
    if channels == 0 {
        return Err(format_err("PRB1 channel count must be positive"));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err("PRB1 dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != count * 8 {
        return Err(format_err(format!(
            "PRB1 payload has {} bytes, expected {}",
            payload.len(),
            count * 8
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let raster = ProbRaster {
        width,
        height,
        channels,
        data,
    };
    let mut report = LoadReport::default();
    let bad = raster
        .pixels()
        .filter(|px| {
            let sum: f64 = px.iter().sum();
            !(px.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= PROB_TOLERANCE)
        })
        .count();
    if bad > 0 {
        report.warnings.push(format!(
            "{bad} pixel(s) are not categorical within {PROB_TOLERANCE}"
        ));
    }
    Ok((raster, report))
}

// ------------------------------------------------------ path helpers ----

pub fn load_pgm16(path: impl AsRef<Path>) -> Result<ClassRaster> {
    read_pgm16(fs::File::open(path)?)
}

pub fn save_pgm16(raster: &ClassRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm16(raster, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_uir32(path: impl AsRef<Path>) -> Result<UidRaster> {
    read_uir32(fs::File::open(path)?)
}

pub fn save_uir32(raster: &UidRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_uir32(raster, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_prb(path: impl AsRef<Path>) -> Result<(ProbRaster, LoadReport)> {
    read_prb(fs::File::open(path)?)
}

pub fn save_prb(raster: &ProbRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_prb(raster, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    Pgm,
    Uir,
    Prb,
}

/// Format, dimensions and channel count of a raster file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RasterInfo {
    pub format: RasterFormat,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// Sniffs the magic and fully parses the file.
pub fn raster_info(path: impl AsRef<Path>) -> Result<RasterInfo> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let r = parse_pgm(&bytes)?;
        Ok(RasterInfo {
            format: RasterFormat::Pgm,
            width: r.width,
            height: r.height,
            channels: 1,
        })
    } else if bytes.starts_with(UIR_MAGIC) {
        let r = read_uir32(bytes.as_slice())?;
        Ok(RasterInfo {
            format: RasterFormat::Uir,
            width: r.width,
            height: r.height,
            channels: 1,
        })
    } else if bytes.starts_with(PRB_MAGIC) {
        let (r, _) = read_prb(bytes.as_slice())?;
        Ok(RasterInfo {
            format: RasterFormat::Prb,
            width: r.width,
            height: r.height,
            channels: r.channels,
        })
    } else {
        Err(format_err("unrecognized raster magic"))
    }
}

// ------------------------------------------------------ confusion ----

/// Square count matrix; rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt * self.classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.classes..(gt + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, pred)).sum()
    }

    /// Element-wise sum; both matrices must have the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Accumulates gt/pred co-occurrences, skipping pixels whose gt is ignored.
pub fn confusion_matrix(
    gt: &ClassRaster,
    pred: &ClassRaster,
    classes: usize,
    ignore: &BTreeSet<u16>,
) -> Result<ConfusionMatrix> {
    if gt.width != pred.width || gt.height != pred.height {
        return Err(invalid(format!(
            "dimension mismatch: gt {}x{} vs pred {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&g, &p) in gt.data.iter().zip(&pred.data) {
        if (g as usize) >= classes || (p as usize) >= classes {
            return Err(invalid(format!(
                "class id {} out of range for {classes} classes",
                g.max(p)
            )));
        }
        if ignore.contains(&g) {
            continue;
        }
        cm.add(g as usize, p as usize, 1);
    }
    Ok(cm)
}
