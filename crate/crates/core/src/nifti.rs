//! NIfTI-1 single-file reader and writer (raw or gzip).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::image::{Grid, LabelVolume, Volume3D};
use crate::labels::LabelDictionary;
use crate::registration::DisplacementField;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;

/// Voxel storage types supported on read and write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16 | Datatype::I32)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::U8 => (0.0, 255.0),
            Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::I32 => (i32::MIN as f64, i32::MAX as f64),
            Datatype::F32 => (f32::MIN as f64, f32::MAX as f64),
            Datatype::F64 => (f64::MIN, f64::MAX),
        }
    }
}

/// The fields of the 348-byte header that this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    fn blank(dims: &[usize], datatype: Datatype, intent_code: i16) -> Result<Self> {
        let mut dim = [1i16; 8];
        dim[0] = dims.len() as i16;
        for (i, d) in dims.iter().enumerate() {
            dim[i + 1] = i16::try_from(*d)
                .map_err(|_| Error::InvalidGeometry(format!("dimension {d} exceeds the NIfTI-1 limit")))?;
        }
        Ok(NiftiHeader {
            dim,
            intent_code,
            datatype: datatype.code(),
            bitpix: (datatype.bytes() * 8) as i16,
            pixdim: [1.0; 8],
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: *b"n+1\0",
        })
    }

    /// Parse a header, detecting byte order. Returns the header and whether
    /// the file is big-endian.
    pub fn parse(bytes: &[u8]) -> Result<(NiftiHeader, bool)> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::BadMagic(format!("only {} bytes, header needs {HEADER_SIZE}", bytes.len())));
        }
        let plausible = |be: bool| {
            let (size, dim0) = if be {
                (BigEndian::read_i32(bytes), BigEndian::read_i16(&bytes[40..]))
            } else {
                (LittleEndian::read_i32(bytes), LittleEndian::read_i16(&bytes[40..]))
            };
            size == HEADER_SIZE as i32 && (1..=7).contains(&dim0)
        };
        let be = if plausible(false) {
            false
        } else if plausible(true) {
            true
        } else {
            return Err(Error::BadMagic("sizeof_hdr/dim[0] not valid in either byte order".into()));
        };
        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        match &magic {
            b"n+1\0" => {}
            b"ni1\0" => return Err(Error::InvalidHeader("separate header/image pairs are not supported".into())),
            _ => return Err(Error::BadMagic(format!("magic {magic:?}"))),
        }
        let i16_at = |o: usize| if be { BigEndian::read_i16(&bytes[o..]) } else { LittleEndian::read_i16(&bytes[o..]) };
        let f32_at = |o: usize| if be { BigEndian::read_f32(&bytes[o..]) } else { LittleEndian::read_f32(&bytes[o..]) };
        let dim = std::array::from_fn(|i| i16_at(40 + 2 * i));
        let pixdim = std::array::from_fn(|i| f32_at(76 + 4 * i));
        let descrip_raw = &bytes[148..228];
        let end = descrip_raw.iter().position(|b| *b == 0).unwrap_or(80);
        Ok((
            NiftiHeader {
                dim,
                intent_code: i16_at(68),
                datatype: i16_at(70),
                bitpix: i16_at(72),
                pixdim,
                vox_offset: f32_at(108),
                scl_slope: f32_at(112),
                scl_inter: f32_at(116),
                xyzt_units: bytes[123],
                descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
                qform_code: i16_at(252),
                sform_code: i16_at(254),
                quatern: std::array::from_fn(|i| f32_at(256 + 4 * i)),
                qoffset: std::array::from_fn(|i| f32_at(268 + 4 * i)),
                srow: std::array::from_fn(|r| std::array::from_fn(|c| f32_at(280 + 16 * r + 4 * c))),
                magic,
            },
            be,
        ))
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        LittleEndian::write_i32(&mut b[0..], HEADER_SIZE as i32);
        b[38] = b'r';
        for i in 0..8 {
            LittleEndian::write_i16(&mut b[40 + 2 * i..], self.dim[i]);
            LittleEndian::write_f32(&mut b[76 + 4 * i..], self.pixdim[i]);
        }
        LittleEndian::write_i16(&mut b[68..], self.intent_code);
        LittleEndian::write_i16(&mut b[70..], self.datatype);
        LittleEndian::write_i16(&mut b[72..], self.bitpix);
        LittleEndian::write_f32(&mut b[108..], self.vox_offset);
        LittleEndian::write_f32(&mut b[112..], self.scl_slope);
        LittleEndian::write_f32(&mut b[116..], self.scl_inter);
        b[123] = self.xyzt_units;
        let d = self.descrip.as_bytes();
        let n = d.len().min(79);
        b[148..148 + n].copy_from_slice(&d[..n]);
        LittleEndian::write_i16(&mut b[252..], self.qform_code);
        LittleEndian::write_i16(&mut b[254..], self.sform_code);
        for i in 0..3 {
            LittleEndian::write_f32(&mut b[256 + 4 * i..], self.quatern[i]);
            LittleEndian::write_f32(&mut b[268 + 4 * i..], self.qoffset[i]);
            for c in 0..4 {
                LittleEndian::write_f32(&mut b[280 + 16 * i + 4 * c..], self.srow[i][c]);
            }
        }
        b[344..348].copy_from_slice(&self.magic);
        b
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        let n = self.dim[0] as usize;
        let mut out = [1usize; 3];
        for a in 0..3 {
            if a < n {
                if self.dim[a + 1] < 1 {
                    return Err(Error::InvalidHeader(format!("dim[{}] = {}", a + 1, self.dim[a + 1])));
                }
                out[a] = self.dim[a + 1] as usize;
            }
        }
        Ok(out)
    }

    fn element_count(&self) -> Result<usize> {
        let n = self.dim[0] as usize;
        let mut count = 1usize;
        for i in 1..=n {
            if self.dim[i] < 1 {
                return Err(Error::InvalidHeader(format!("dim[{i}] = {}", self.dim[i])));
            }
            count *= self.dim[i] as usize;
        }
        Ok(count)
    }

    fn spacing(&self) -> Result<[f64; 3]> {
        let n = self.dim[0] as usize;
        let mut s = [1.0; 3];
        for a in 0..3 {
            let p = self.pixdim[a + 1] as f64;
            if a < n {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::NonPositiveSpacing([
                        self.pixdim[1] as f64,
                        self.pixdim[2] as f64,
                        self.pixdim[3] as f64,
                    ]));
                }
                s[a] = p;
            } else if p > 0.0 && p.is_finite() {
                s[a] = p;
            }
        }
        Ok(s)
    }

    fn qform_affine(&self, spacing: [f64; 3]) -> Matrix4<f64> {
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut m = Matrix4::identity();
        for row in 0..3 {
            m[(row, 0)] = r[(row, 0)] * spacing[0];
            m[(row, 1)] = r[(row, 1)] * spacing[1];
            m[(row, 2)] = r[(row, 2)] * spacing[2] * qfac;
            m[(row, 3)] = self.qoffset[row] as f64;
        }
        m
    }

    /// Voxel→world affine: sform, else qform, else diagonal spacing.
    pub fn affine(&self) -> Result<Matrix4<f64>> {
        let spacing = self.spacing()?;
        if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] = self.srow[r][c] as f64;
                }
            }
            return Ok(m);
        }
        if self.qform_code > 0 {
            return Ok(self.qform_affine(spacing));
        }
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = spacing[a];
        }
        Ok(m)
    }

    fn grid(&self) -> Result<Grid> {
        let dims = self.spatial_dims()?;
        let spacing = self.spacing()?;
        let affine = self.affine()?;
        match Grid::new(dims, spacing, affine) {
            Err(Error::InvalidGeometry(_)) => {
                // pixdim disagrees with the stored affine: trust the affine.
                let s = [0, 1, 2].map(|a| affine.fixed_view::<3, 1>(0, a).norm());
                Grid::new(dims, s, affine)
            }
            other => other,
        }
    }

    fn set_geometry(&mut self, grid: &Grid) {
        let s = grid.spacing();
        let m = grid.affine();
        for a in 0..3 {
            self.pixdim[a + 1] = s[a] as f32;
        }
        for r in 0..3 {
            for c in 0..4 {
                self.srow[r][c] = m[(r, c)] as f32;
            }
        }
        self.sform_code = 1;
        let mut rot = Matrix3::from_fn(|r, c| m[(r, c)] / s[c]);
        let mut qfac = 1.0;
        if rot.determinant() < 0.0 {
            qfac = -1.0;
            for r in 0..3 {
                rot[(r, 2)] = -rot[(r, 2)];
            }
        }
        if (rot.transpose() * rot - Matrix3::identity()).abs().max() < 1e-6 {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
            let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
            self.quatern = [q.i as f32, q.j as f32, q.k as f32];
            self.qoffset = [m[(0, 3)] as f32, m[(1, 3)] as f32, m[(2, 3)] as f32];
            self.pixdim[0] = qfac as f32;
            self.qform_code = 1;
        }
    }
}

/// Undecoded voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVoxelBuffer {
    pub datatype: Datatype,
    pub payload: Vec<u8>,
    pub big_endian: bool,
}

impl RawVoxelBuffer {
    pub fn len(&self) -> usize {
        self.payload.len() / self.datatype.bytes()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Stored values, unscaled.
    pub fn values(&self) -> Vec<f64> {
        let w = self.datatype.bytes();
        let be = self.big_endian;
        self.payload
            .chunks_exact(w)
            .map(|c| match self.datatype {
                Datatype::U8 => c[0] as f64,
                Datatype::I16 => (if be { BigEndian::read_i16(c) } else { LittleEndian::read_i16(c) }) as f64,
                Datatype::I32 => (if be { BigEndian::read_i32(c) } else { LittleEndian::read_i32(c) }) as f64,
                Datatype::F32 => (if be { BigEndian::read_f32(c) } else { LittleEndian::read_f32(c) }) as f64,
                Datatype::F64 => {
                    if be {
                        BigEndian::read_f64(c)
                    } else {
                        LittleEndian::read_f64(c)
                    }
                }
            })
            .collect()
    }

    /// Little-endian encoding of `values`. Integer types are rounded and
    /// range-checked.
    pub fn encode(values: &[f64], datatype: Datatype) -> Result<RawVoxelBuffer> {
        let w = datatype.bytes();
        let (lo, hi) = datatype.range();
        let mut payload = vec![0u8; values.len() * w];
        for (v, out) in values.iter().zip(payload.chunks_exact_mut(w)) {
            let x = if datatype.is_integer() { v.round() } else { *v };
            if !x.is_finite() || x < lo || x > hi {
                return Err(Error::ValueOutOfRange {
                    value: *v,
                    datatype: datatype.code(),
                });
            }
            match datatype {
                Datatype::U8 => out[0] = x as u8,
                Datatype::I16 => LittleEndian::write_i16(out, x as i16),
                Datatype::I32 => LittleEndian::write_i32(out, x as i32),
                Datatype::F32 => LittleEndian::write_f32(out, x as f32),
                Datatype::F64 => LittleEndian::write_f64(out, x),
            }
        }
        Ok(RawVoxelBuffer {
            datatype,
            payload,
            big_endian: false,
        })
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn inflate(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if is_gzip(bytes) {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(std::borrow::Cow::Owned(out))
    } else {
        Ok(std::borrow::Cow::Borrowed(bytes))
    }
}

/// Parse header and payload.
pub fn decode(bytes: &[u8]) -> Result<(NiftiHeader, RawVoxelBuffer)> {
    let bytes = inflate(bytes)?;
    let (header, big_endian) = NiftiHeader::parse(&bytes)?;
    let datatype = Datatype::from_code(header.datatype)?;
    let offset = header.vox_offset as usize;
    if !(header.vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::InvalidHeader(format!("vox_offset {}", header.vox_offset)));
    }
    let expected = header.element_count()? * datatype.bytes();
    let found = bytes.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    let payload = bytes[offset..offset + expected].to_vec();
    Ok((
        header,
        RawVoxelBuffer {
            datatype,
            payload,
            big_endian,
        },
    ))
}

/// Serialize header and payload, optionally gzip-compressed.
pub fn encode(header: &NiftiHeader, raw: &RawVoxelBuffer, gzip: bool) -> Result<Vec<u8>> {
    let mut out = header.to_bytes();
    out.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    out.extend_from_slice(&raw.payload);
    if !gzip {
        return Ok(out);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&out)?;
    Ok(enc.finish()?)
}

fn check_scalar(header: &NiftiHeader) -> Result<()> {
    for i in 4..=header.dim[0] as usize {
        if header.dim[i] != 1 {
            return Err(Error::InvalidHeader(format!(
                "expected a 3D volume, dim[{i}] = {}",
                header.dim[i]
            )));
        }
    }
    Ok(())
}

/// Read a scalar volume, applying `scl_slope`/`scl_inter` when the slope is
/// nonzero.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let (header, raw) = decode(bytes)?;
    check_scalar(&header)?;
    let grid = header.grid()?;
    let mut values = raw.values();
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume3D::new(grid, values)
}

pub fn write_nifti(volume: &Volume3D, datatype: Datatype, gzip: bool) -> Result<Vec<u8>> {
    let mut header = NiftiHeader::blank(&volume.dims(), datatype, 0)?;
    header.set_geometry(volume.grid());
    let raw = RawVoxelBuffer::encode(volume.data(), datatype)?;
    encode(&header, &raw, gzip)
}

/// Read an integer label volume. Scaling is ignored; float files must hold
/// integral values (within 1e-6).
pub fn read_labels(bytes: &[u8]) -> Result<LabelVolume> {
    let (header, raw) = decode(bytes)?;
    check_scalar(&header)?;
    let grid = header.grid()?;
    let mut labels = Vec::with_capacity(raw.len());
    for v in raw.values() {
        let r = v.round();
        if (v - r).abs() > 1e-6 || !v.is_finite() {
            return Err(Error::NonIntegerLabels(v));
        }
        if !(0.0..=u16::MAX as f64).contains(&r) {
            return Err(Error::ValueOutOfRange {
                value: v,
                datatype: header.datatype,
            });
        }
        labels.push(r as u16);
    }
    let mut present: Vec<u16> = labels.iter().copied().filter(|l| *l != 0).collect();
    present.sort_unstable();
    present.dedup();
    LabelVolume::new(grid, labels, LabelDictionary::for_indices(present))
}

/// Labels are stored as uint8 when they fit, else int16, else int32.
pub fn write_labels(labels: &LabelVolume, gzip: bool) -> Result<Vec<u8>> {
    let max = labels.labels().iter().copied().max().unwrap_or(0);
    let datatype = if max <= 255 {
        Datatype::U8
    } else if max <= i16::MAX as u16 {
        Datatype::I16
    } else {
        Datatype::I32
    };
    let mut header = NiftiHeader::blank(&labels.dims(), datatype, 0)?;
    header.set_geometry(labels.grid());
    let values: Vec<f64> = labels.labels().iter().map(|v| *v as f64).collect();
    encode(&header, &RawVoxelBuffer::encode(&values, datatype)?, gzip)
}

/// Displacement field as a 5D float64 vector image (x, y, z, 1, 3) with
/// vectors in voxel units of its grid.
pub fn write_field(field: &DisplacementField, gzip: bool) -> Result<Vec<u8>> {
    let d = field.grid().dims();
    let mut header = NiftiHeader::blank(&[d[0], d[1], d[2], 1, 3], Datatype::F64, INTENT_VECTOR)?;
    header.set_geometry(field.grid());
    header.descrip = "displacement, voxel units".into();
    let c = field.components();
    let mut values = Vec::with_capacity(3 * c[0].len());
    for comp in c {
        values.extend_from_slice(comp);
    }
    encode(&header, &RawVoxelBuffer::encode(&values, Datatype::F64)?, gzip)
}

pub fn read_field(bytes: &[u8]) -> Result<DisplacementField> {
    let (header, raw) = decode(bytes)?;
    if header.dim[0] != 5 || header.dim[4] != 1 || header.dim[5] != 3 {
        return Err(Error::InvalidHeader(format!(
            "displacement field must be (x, y, z, 1, 3), dim = {:?}",
            header.dim
        )));
    }
    let grid = header.grid()?;
    let values = raw.values();
    let n = grid.len();
    let comps = [0, 1, 2].map(|a| values[a * n..(a + 1) * n].to_vec());
    DisplacementField::new(grid, comps)
}

fn wants_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io_at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_nifti(&read_file(path.as_ref())?)
}

/// Write a volume; gzip when the name ends in `.gz`.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume3D, datatype: Datatype) -> Result<()> {
    let p = path.as_ref();
    write_file(p, &write_nifti(volume, datatype, wants_gzip(p))?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_labels(&read_file(path.as_ref())?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    let p = path.as_ref();
    write_file(p, &write_labels(labels, wants_gzip(p))?)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    read_field(&read_file(path.as_ref())?)
}

pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let p = path.as_ref();
    write_file(p, &write_field(field, wants_gzip(p))?)
}
