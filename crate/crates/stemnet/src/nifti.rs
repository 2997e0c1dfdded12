//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only 3-D volumes with `uint8`, `int16`, `uint16` or `float32` voxels are
//! supported. Either byte order is read; files are written little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use stemnet_core::volume::Affine;
use stemnet_core::{LabelVolume, Volume};

const HEADER_SIZE: i32 = 348;
/// Header plus the four-byte extension flag.
const DATA_OFFSET: usize = 352;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a NIfTI-1 file: magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("header size field is {0}, expected 348 in either byte order")]
    BadHeaderSize(i32),
    #[error("unsupported datatype code {0}; supported are uint8 (2), int16 (4), float32 (16), uint16 (512)")]
    UnsupportedDatatype(i16),
    #[error("only 3-D volumes are supported, got dim[0] = {0}")]
    Dimensionality(i16),
    #[error("payload holds {got} bytes but the header describes {expected}")]
    PayloadMismatch { expected: usize, got: usize },
    #[error("value {value} at voxel {index} cannot be stored losslessly as {dtype:?}")]
    Unrepresentable { value: f32, index: usize, dtype: DataType },
    #[error("voxel {index} holds {value}, which is not a label code")]
    NotALabel { value: f32, index: usize },
    #[error(transparent)]
    Core(#[from] stemnet_core::Error),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    U16,
    F32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
            DataType::U16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            16 => DataType::F32,
            512 => DataType::U16,
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::F32 => 4,
        }
    }

    fn holds(self, v: f32) -> bool {
        let int_in = |lo: f32, hi: f32| v.fract() == 0.0 && v >= lo && v <= hi;
        match self {
            DataType::U8 => int_in(0.0, 255.0),
            DataType::I16 => int_in(-32768.0, 32767.0),
            DataType::U16 => int_in(0.0, 65535.0),
            DataType::F32 => true,
        }
    }
}

/// The header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: DataType,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// `srow_x/y/z` when `sform_code > 0`.
    pub affine: Option<Affine>,
    pub big_endian: bool,
}

/// Raw voxel values plus their header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: Header,
    /// Voxel values after `scl_slope`/`scl_inter`, x fastest.
    pub data: Vec<f32>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io { path: path.display().to_string(), source }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE as usize {
        return Err(NiftiError::PayloadMismatch { expected: HEADER_SIZE as usize, got: bytes.len() });
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    let be = BigEndian::read_i32(&bytes[0..4]);
    let big_endian = match (le, be) {
        (HEADER_SIZE, _) => false,
        (_, HEADER_SIZE) => true,
        _ => return Err(NiftiError::BadHeaderSize(le)),
    };
    if big_endian {
        header_fields::<BigEndian>(bytes, true)
    } else {
        header_fields::<LittleEndian>(bytes, false)
    }
}

fn header_fields<B: ByteOrder>(b: &[u8], big_endian: bool) -> Result<Header> {
    let magic: [u8; 4] = b[344..348].try_into().expect("four bytes");
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let i16_at = |o: usize| B::read_i16(&b[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&b[o..o + 4]);
    let ndim = i16_at(40);
    let dim = |i: usize| i16_at(40 + 2 * i);
    // trailing singleton dimensions are tolerated
    if !(1..=7).contains(&ndim) || (4..=ndim as usize).any(|i| dim(i) > 1) || ndim < 3 {
        return Err(NiftiError::Dimensionality(ndim));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = dim(a + 1);
        if v < 1 {
            return Err(NiftiError::Dimensionality(ndim));
        }
        *d = v as usize;
    }
    let spacing = [1, 2, 3].map(|i| f32_at(76 + 4 * i).abs() as f64);
    let datatype = DataType::from_code(i16_at(70))?;
    let vox_offset = f32_at(108).max(0.0) as usize;
    let sform = i16_at(254);
    let affine = (sform > 0).then(|| {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c) as f64;
            }
        }
        m[3][3] = 1.0;
        m
    });
    Ok(Header {
        dims,
        spacing,
        datatype,
        vox_offset: vox_offset.max(HEADER_SIZE as usize),
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        affine,
        big_endian,
    })
}

/// Parses a complete, uncompressed single-file NIfTI-1 image.
pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    let header = parse_header(bytes)?;
    let n: usize = header.dims.iter().product();
    let expected = n * header.datatype.bytes();
    let payload = bytes.get(header.vox_offset..).unwrap_or(&[]);
    if payload.len() != expected {
        return Err(NiftiError::PayloadMismatch { expected, got: payload.len() });
    }
    let mut data = vec![0f32; n];
    if header.big_endian {
        read_voxels::<BigEndian>(payload, header.datatype, &mut data);
    } else {
        read_voxels::<LittleEndian>(payload, header.datatype, &mut data);
    }
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { header, data })
}

fn read_voxels<B: ByteOrder>(mut p: &[u8], dt: DataType, out: &mut [f32]) {
    for v in out {
        // lengths were checked by the caller
        *v = match dt {
            DataType::U8 => p.read_u8().map(f32::from),
            DataType::I16 => p.read_i16::<B>().map(f32::from),
            DataType::U16 => p.read_u16::<B>().map(f32::from),
            DataType::F32 => p.read_f32::<B>(),
        }
        .expect("payload length checked");
    }
}

/// Serializes to little-endian single-file NIfTI-1 bytes.
pub fn encode(
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Option<&Affine>,
    data: &[f32],
    dtype: DataType,
) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if data.len() != n {
        return Err(NiftiError::PayloadMismatch { expected: n, got: data.len() });
    }
    if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| !dtype.holds(v)) {
        return Err(NiftiError::Unrepresentable { value, index, dtype });
    }
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE);
    LittleEndian::write_i16(&mut h[40..42], 3);
    for (a, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| NiftiError::Dimensionality(3))?;
        LittleEndian::write_i16(&mut h[42 + 2 * a..44 + 2 * a], d);
    }
    for i in 4..8 {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], 1);
    }
    LittleEndian::write_i16(&mut h[70..72], dtype.code());
    LittleEndian::write_i16(&mut h[72..74], (dtype.bytes() * 8) as i16);
    LittleEndian::write_f32(&mut h[76..80], 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut h[80 + 4 * a..84 + 4 * a], s as f32);
    }
    LittleEndian::write_f32(&mut h[108..112], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    // xyzt_units: millimetres
    h[123] = 2;
    if let Some(m) = affine {
        LittleEndian::write_i16(&mut h[254..256], 1);
        for (r, row) in m.iter().take(3).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c], v as f32);
            }
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = Vec::with_capacity(DATA_OFFSET + n * dtype.bytes());
    out.extend_from_slice(&h);
    for &v in data {
        match dtype {
            DataType::U8 => out.push(v as u8),
            DataType::I16 => out.write_i16::<LittleEndian>(v as i16).expect("vec write"),
            DataType::U16 => out.write_u16::<LittleEndian>(v as u16).expect("vec write"),
            DataType::F32 => out.write_f32::<LittleEndian>(v).expect("vec write"),
        }
    }
    Ok(out)
}

/// Reads a file, decompressing when the name ends in `.gz`.
pub fn read(path: &Path) -> Result<NiftiImage> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes).map_err(io_err(path))?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    }
    decode(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    if is_gz(path) {
        // mtime stays zero in the gzip header, so output is reproducible
        let mut gz = GzEncoder::new(file, Compression::default());
        io::copy(&mut Cursor::new(bytes), &mut gz).map_err(io_err(path))?;
        gz.finish().and_then(|mut f| f.flush()).map_err(io_err(path))
    } else {
        let mut file = file;
        file.write_all(bytes).and_then(|_| file.flush()).map_err(io_err(path))
    }
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let img = read(path)?;
    let h = img.header;
    let mut v = Volume::new(h.dims, h.spacing, img.data)?;
    v.affine = h.affine;
    Ok(v)
}

/// Loads a label map; every voxel must be an integer in `0..=4`.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let img = read(path)?;
    let h = img.header;
    let mut codes = Vec::with_capacity(img.data.len());
    for (index, &value) in img.data.iter().enumerate() {
        if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
            return Err(NiftiError::NotALabel { value, index });
        }
        codes.push(value as u8);
    }
    let mut l = LabelVolume::new(h.dims, h.spacing, codes)?;
    l.affine = h.affine;
    Ok(l)
}

pub fn save_volume(path: &Path, v: &Volume, dtype: DataType) -> Result<()> {
    write_bytes(path, &encode(v.dims, v.spacing, v.affine.as_ref(), &v.data, dtype)?)
}

/// Labels are always stored as `uint8`.
pub fn save_labels(path: &Path, l: &LabelVolume) -> Result<()> {
    let data: Vec<f32> = l.labels.iter().map(|&c| f32::from(c)).collect();
    write_bytes(path, &encode(l.dims, l.spacing, l.affine.as_ref(), &data, DataType::U8)?)
}
