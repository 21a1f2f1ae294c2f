//! Raster files and the synthesis sidecar manifest.
//!
//! Interferograms (`QPI1`) and phase maps (`QPH1`) share one layout: a
//! 64-byte little-endian header followed by `rows × cols` f32 samples in
//! row-major order.
//!
//! | offset | field |
//! |--------|-------|
//! | 0  | magic, 4 ASCII bytes |
//! | 4  | rows, u32 |
//! | 8  | cols, u32 |
//! | 12 | wavelength, nm, u32 |
//! | 16 | pixel pitch, nm, u32 |
//! | 20 | carrier fx, f32 |
//! | 24 | carrier fy, f32 |
//! | 28 | flag byte (`QPH1`: 1 when wrapped) |
//! | 29..64 | zero |

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{CellClass, CellTruth, Interferogram, PhaseMap, CAMERA_PIXEL_PITCH_UM};
use crate::error::{QpiError, Result};
use crate::imaging::BoundingBox;

pub const INTERFEROGRAM_MAGIC: &[u8; 4] = b"QPI1";
pub const PHASE_MAGIC: &[u8; 4] = b"QPH1";
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterHeader {
    pub magic: [u8; 4],
    pub rows: u32,
    pub cols: u32,
    pub wavelength_nm: u32,
    pub pixel_pitch_nm: u32,
    pub carrier: (f32, f32),
    pub flag: u8,
}

impl RasterHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.rows.to_le_bytes());
        out[8..12].copy_from_slice(&self.cols.to_le_bytes());
        out[12..16].copy_from_slice(&self.wavelength_nm.to_le_bytes());
        out[16..20].copy_from_slice(&self.pixel_pitch_nm.to_le_bytes());
        out[20..24].copy_from_slice(&self.carrier.0.to_le_bytes());
        out[24..28].copy_from_slice(&self.carrier.1.to_le_bytes());
        out[28] = self.flag;
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(QpiError::format(path, "file shorter than the 64-byte header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if bytes[29..HEADER_LEN].iter().any(|&b| b != 0) {
            return Err(QpiError::format(path, "reserved header bytes are not zero"));
        }
        Ok(Self {
            magic: bytes[0..4].try_into().expect("4 bytes"),
            rows: u32_at(4),
            cols: u32_at(8),
            wavelength_nm: u32_at(12),
            pixel_pitch_nm: u32_at(16),
            carrier: (f32_at(20), f32_at(24)),
            flag: bytes[28],
        })
    }
}

fn um_to_nm(um: f64) -> u32 {
    (um * 1000.0).round() as u32
}

fn write_raster(path: &Path, header: &RasterHeader, values: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    bytes.extend_from_slice(&header.encode());
    for &v in values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| QpiError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| QpiError::io(path, e))
}

fn read_raster(path: &Path, magic: &[u8; 4]) -> Result<(RasterHeader, Array2<f64>)> {
    crate::audit::record_read(path);
    let bytes = fs::read(path).map_err(|e| QpiError::io(path, e))?;
    let header = RasterHeader::decode(&bytes, path)?;
    if &header.magic != magic {
        return Err(QpiError::format(
            path,
            format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&header.magic)
            ),
        ));
    }
    let (rows, cols) = (header.rows as usize, header.cols as usize);
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(QpiError::format(
            path,
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let values = Array2::from_shape_vec((rows, cols), data).expect("length checked above");
    Ok((header, values))
}

pub fn write_interferogram(path: &Path, frame: &Interferogram) -> Result<()> {
    let (rows, cols) = frame.shape();
    let header = RasterHeader {
        magic: *INTERFEROGRAM_MAGIC,
        rows: rows as u32,
        cols: cols as u32,
        wavelength_nm: um_to_nm(frame.wavelength_um),
        pixel_pitch_nm: um_to_nm(frame.pixel_pitch_um),
        carrier: (frame.carrier_cycles_per_px.0 as f32, frame.carrier_cycles_per_px.1 as f32),
        flag: 0,
    };
    write_raster(path, &header, &frame.pixels)
}

/// Reads an interferogram; the subject id is not stored in the raster and is
/// left empty.
pub fn read_interferogram(path: &Path) -> Result<Interferogram> {
    let (header, pixels) = read_raster(path, INTERFEROGRAM_MAGIC)?;
    let frame = Interferogram {
        pixels,
        wavelength_um: header.wavelength_nm as f64 / 1000.0,
        carrier_cycles_per_px: (header.carrier.0 as f64, header.carrier.1 as f64),
        pixel_pitch_um: header.pixel_pitch_nm as f64 / 1000.0,
        subject_id: String::new(),
    };
    frame.validate().map_err(|e| QpiError::format(path, e.to_string()))?;
    Ok(frame)
}

pub fn write_phase_map(path: &Path, map: &PhaseMap) -> Result<()> {
    let (rows, cols) = map.shape();
    let header = RasterHeader {
        magic: *PHASE_MAGIC,
        rows: rows as u32,
        cols: cols as u32,
        wavelength_nm: um_to_nm(map.wavelength_um),
        pixel_pitch_nm: um_to_nm(CAMERA_PIXEL_PITCH_UM),
        carrier: (0.0, 0.0),
        flag: u8::from(map.wrapped),
    };
    write_raster(path, &header, &map.values)
}

pub fn read_phase_map(path: &Path) -> Result<PhaseMap> {
    let (header, mut values) = read_raster(path, PHASE_MAGIC)?;
    let wrapped = match header.flag {
        0 => false,
        1 => true,
        other => return Err(QpiError::format(path, format!("invalid wrapped flag {other}"))),
    };
    if wrapped {
        // f32 storage can round a value just below π up to π's f32 image
        // which lies above f64 π; fold it back into (−π, π].
        let pi = std::f64::consts::PI;
        values.mapv_inplace(|v| if v > pi { v - std::f64::consts::TAU } else if v <= -pi { pi } else { v });
    }
    Ok(PhaseMap {
        values,
        wrapped,
        wavelength_um: header.wavelength_nm as f64 / 1000.0,
    })
}

/// One sidecar record per written interferogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRecord {
    pub file: PathBuf,
    pub subject_id: String,
    pub class: String,
    pub seed: u64,
    pub truth: PathBuf,
    pub channel: String,
    pub cells: PathBuf,
}

impl SynthRecord {
    pub fn to_line(&self) -> String {
        format!(
            "file={}\tsubject={}\tclass={}\tseed={}\ttruth={}\tchannel={}\tcells={}",
            self.file.display(),
            self.subject_id,
            self.class,
            self.seed,
            self.truth.display(),
            self.channel,
            self.cells.display()
        )
    }

    pub fn parse(line: &str, path: &Path) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split('\t') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| QpiError::format(path, format!("malformed field {part:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(|v| v.to_string())
                .ok_or_else(|| QpiError::format(path, format!("missing field {k}")))
        };
        Ok(Self {
            file: get("file")?.into(),
            subject_id: get("subject")?,
            class: get("class")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| QpiError::format(path, "seed is not a u64"))?,
            truth: get("truth")?.into(),
            channel: get("channel")?,
            cells: get("cells")?.into(),
        })
    }
}

pub fn write_synth_manifest(path: &Path, records: &[SynthRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", r.to_line()).expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))
}

pub fn read_synth_manifest(path: &Path) -> Result<Vec<SynthRecord>> {
    let file = fs::File::open(path).map_err(|e| QpiError::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| QpiError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(SynthRecord::parse(&line, path)?);
    }
    Ok(records)
}

/// Cell annotations for a field of view: the labels a pathologist would
/// attach, plus exact geometry.
pub fn write_cells(path: &Path, cells: &[CellTruth]) -> Result<()> {
    let mut out = String::from("class\tcenter_row\tcenter_col\tradius_px\tbox_row\tbox_col\tbox_h\tbox_w\n");
    for cell in cells {
        let (cy, cx) = cell.center();
        out.push_str(&format!(
            "{}\t{cy:.4}\t{cx:.4}\t{:.4}\t{}\t{}\t{}\t{}\n",
            cell.class(),
            cell.radius_px,
            cell.bbox.row,
            cell.bbox.col,
            cell.bbox.height,
            cell.bbox.width
        ));
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))
}

/// Annotation as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAnnotation {
    pub class: CellClass,
    pub center: (f64, f64),
    pub radius_px: f64,
    pub bbox: BoundingBox,
}

impl From<&CellTruth> for CellAnnotation {
    fn from(cell: &CellTruth) -> Self {
        Self {
            class: cell.class(),
            center: cell.center(),
            radius_px: cell.radius_px,
            bbox: cell.bbox,
        }
    }
}

pub fn read_cells(path: &Path) -> Result<Vec<CellAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(QpiError::format(path, format!("expected 8 columns, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| QpiError::format(path, format!("bad number {s:?}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| QpiError::format(path, format!("bad integer {s:?}")))
        };
        out.push(CellAnnotation {
            class: f[0].parse()?,
            center: (num(f[1])?, num(f[2])?),
            radius_px: num(f[3])?,
            bbox: BoundingBox {
                row: int(f[4])?,
                col: int(f[5])?,
                height: int(f[6])?,
                width: int(f[7])?,
            },
        });
    }
    Ok(out)
}
