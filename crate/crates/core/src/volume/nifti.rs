//! NIfTI-1 single-file reader and writer (`.nii`, `.nii.gz`).
//!
//! Reading accepts either byte order and the datatypes uint8, int16, int32,
//! float32 and float64. Writing always produces little-endian, `n+1` magic,
//! `vox_offset = 352`, with both sform and qform set from the affine.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{diagonal_affine, Affine, BrainMask, Grid, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

/// On-disk voxel datatypes understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::Uint8,
            4 => DataType::Int16,
            8 => DataType::Int32,
            16 => DataType::Float32,
            64 => DataType::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Int32 => 8,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Int32 | DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }

    fn holds(self, v: f32) -> bool {
        let integral = v.fract() == 0.0;
        match self {
            DataType::Uint8 => integral && (0.0..=255.0).contains(&v),
            DataType::Int16 => integral && (-32768.0..=32767.0).contains(&v),
            // every f32 integer below 2^24 is exact; stay well inside i32
            DataType::Int32 => integral && v.abs() <= 16_777_216.0,
            DataType::Float32 | DataType::Float64 => v.is_finite() || v.is_nan(),
        }
    }
}

struct Header {
    dims: [usize; 3],
    datatype: DataType,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
    single_file: bool,
}

fn parse_header<B: ByteOrder>(h: &[u8]) -> Result<Header> {
    let mut dim = [0i16; 8];
    B::read_i16_into(&h[40..56], &mut dim);
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Dimension(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    if ndim < 3 {
        return Err(Error::Dimension(format!("{ndim}D image, need 3D")));
    }
    for (axis, &d) in dim[1..=ndim].iter().enumerate() {
        if d < 1 {
            return Err(Error::Dimension(format!("dim[{}] = {d}", axis + 1)));
        }
    }
    if let Some(extra) = dim[4..=ndim].iter().find(|&&d| d != 1) {
        return Err(Error::Dimension(format!(
            "only single-frame 3D volumes are supported (trailing dim {extra})"
        )));
    }
    let datatype = DataType::from_code(B::read_i16(&h[70..72]))?;
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&h[76..108], &mut pixdim);
    let vox_offset = B::read_f32(&h[108..112]);
    let mut quatern = [0f32; 3];
    B::read_f32_into(&h[256..268], &mut quatern);
    let mut qoffset = [0f32; 3];
    B::read_f32_into(&h[268..280], &mut qoffset);
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        let start = 280 + 16 * r;
        B::read_f32_into(&h[start..start + 16], row);
    }
    let magic = &h[344..348];
    let single_file = if magic == MAGIC_SINGLE {
        true
    } else if magic == MAGIC_PAIR {
        false
    } else {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    };
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }
    Ok(Header {
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        scl_slope: B::read_f32(&h[112..116]),
        scl_inter: B::read_f32(&h[116..120]),
        qform_code: B::read_i16(&h[252..254]),
        sform_code: B::read_i16(&h[254..256]),
        quatern,
        qoffset,
        srow,
        single_file,
    })
}

impl Header {
    fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = diagonal_affine([1.0; 3]);
            for (r, row) in self.srow.iter().enumerate() {
                for c in 0..4 {
                    a[r][c] = row[c] as f64;
                }
            }
            a
        } else if self.qform_code > 0 {
            quatern_to_affine(self.quatern, self.qoffset, self.pixdim)
        } else {
            let sp = |v: f32| if v > 0.0 { v as f64 } else { 1.0 };
            diagonal_affine([sp(self.pixdim[1]), sp(self.pixdim[2]), sp(self.pixdim[3])])
        }
    }
}

fn quatern_to_affine(q: [f32; 3], offset: [f32; 3], pixdim: [f32; 8]) -> Affine {
    let (mut b, mut c, mut d) = (q[0] as f64, q[1] as f64, q[2] as f64);
    let s = 1.0 - (b * b + c * c + d * d);
    let a = if s < 1e-7 {
        let norm = (b * b + c * c + d * d).sqrt();
        b /= norm;
        c /= norm;
        d /= norm;
        0.0
    } else {
        s.sqrt()
    };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let sp = |v: f32| if v > 0.0 { v as f64 } else { 1.0 };
    let scale = [sp(pixdim[1]), sp(pixdim[2]), sp(pixdim[3]) * qfac];
    let mut out = diagonal_affine([1.0; 3]);
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i] as f64;
    }
    out
}

/// Quaternion parameters (b, c, d) and qfac for the rotation part of `a`.
fn affine_to_quatern(a: &Affine) -> ([f64; 3], f64) {
    let norms = super::column_norms(a);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][j] / norms[j];
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = r[0][0] + r[1][1] + r[2][2] + 1.0;
    let (qa, qb, qc, qd);
    if trace > 0.5 {
        let a = 0.5 * trace.sqrt();
        qa = a;
        qb = 0.25 * (r[2][1] - r[1][2]) / a;
        qc = 0.25 * (r[0][2] - r[2][0]) / a;
        qd = 0.25 * (r[1][0] - r[0][1]) / a;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            let b = 0.5 * xd.sqrt();
            qb = b;
            qc = 0.25 * (r[0][1] + r[1][0]) / b;
            qd = 0.25 * (r[0][2] + r[2][0]) / b;
            qa = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            let c = 0.5 * yd.sqrt();
            qc = c;
            qb = 0.25 * (r[0][1] + r[1][0]) / c;
            qd = 0.25 * (r[1][2] + r[2][1]) / c;
            qa = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            let d = 0.5 * zd.sqrt();
            qd = d;
            qb = 0.25 * (r[0][2] + r[2][0]) / d;
            qc = 0.25 * (r[1][2] + r[2][1]) / d;
            qa = 0.25 * (r[1][0] - r[0][1]) / d;
        }
    }
    // canonical sign: a >= 0
    let sign = if qa < 0.0 { -1.0 } else { 1.0 };
    ([qb * sign, qc * sign, qd * sign], qfac)
}

fn decode_voxels<B: ByteOrder>(raw: &[u8], dtype: DataType, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    match dtype {
        DataType::Uint8 => out.extend(raw[..n].iter().map(|&v| v as f32)),
        DataType::Int16 => out.extend(raw.chunks_exact(2).take(n).map(|c| B::read_i16(c) as f32)),
        DataType::Int32 => out.extend(raw.chunks_exact(4).take(n).map(|c| B::read_i32(c) as f32)),
        DataType::Float32 => out.extend(raw.chunks_exact(4).take(n).map(B::read_f32)),
        DataType::Float64 => out.extend(raw.chunks_exact(8).take(n).map(|c| B::read_f64(c) as f32)),
    }
    out
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn header_from(bytes: &[u8]) -> Result<(Header, bool)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "{} bytes, need at least {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        Ok((parse_header::<LittleEndian>(bytes)?, false))
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        Ok((parse_header::<BigEndian>(bytes)?, true))
    } else {
        Err(Error::MalformedHeader(format!(
            "sizeof_hdr = {} (expected 348)",
            LittleEndian::read_i32(&bytes[0..4])
        )))
    }
}

fn assemble(hdr: Header, big_endian: bool, payload: &[u8]) -> Result<Volume> {
    let grid = Grid::new(hdr.dims, hdr.affine())?;
    let n = grid.len();
    let needed = n * hdr.datatype.size();
    if payload.len() < needed {
        return Err(Error::MalformedHeader(format!(
            "voxel data truncated: {} of {needed} bytes",
            payload.len()
        )));
    }
    let mut data = if big_endian {
        decode_voxels::<BigEndian>(payload, hdr.datatype, n)
    } else {
        decode_voxels::<LittleEndian>(payload, hdr.datatype, n)
    };
    if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() && hdr.scl_inter.is_finite() {
        let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
        if slope != 1.0 || inter != 0.0 {
            for v in &mut data {
                *v = *v * slope + inter;
            }
        }
    }
    Ok(Volume {
        grid,
        data,
        dtype: hdr.datatype,
    })
}

/// Parses an in-memory single-file NIfTI-1 image (optionally gzipped).
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    let bytes = maybe_gunzip(bytes.to_vec())?;
    let (hdr, be) = header_from(&bytes)?;
    if !hdr.single_file {
        return Err(Error::MalformedHeader(
            "\"ni1\" header needs a separate .img file".into(),
        ));
    }
    let offset = hdr.vox_offset.max(HEADER_SIZE);
    let payload = bytes.get(offset..).unwrap_or(&[]);
    assemble(hdr, be, payload)
}

/// Reads a `.nii`/`.nii.gz` file, or a `.hdr` whose voxels live in the
/// sibling `.img`.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let bytes = maybe_gunzip(bytes)?;
    let (hdr, be) = header_from(&bytes)?;
    if hdr.single_file {
        let offset = hdr.vox_offset.max(HEADER_SIZE);
        let payload = bytes.get(offset..).unwrap_or(&[]);
        return assemble(hdr, be, payload);
    }
    let img = path.with_extension("img");
    let raw = fs::read(&img).map_err(|e| Error::io_at(&img, e))?;
    let raw = maybe_gunzip(raw)?;
    let payload = raw.get(hdr.vox_offset..).unwrap_or(&[]).to_vec();
    assemble(hdr, be, &payload)
}

/// Serialises `grid` + `data` as an uncompressed single-file image.
pub fn encode_nifti(grid: &Grid, data: &[f32], dtype: DataType) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [3, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 1, 1, 1];
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..72], dtype.code());
    LittleEndian::write_i16(&mut h[72..74], (dtype.size() * 8) as i16);
    let (quat, qfac) = affine_to_quatern(&grid.affine);
    let pixdim: [f32; 8] = [
        qfac as f32,
        grid.spacing[0] as f32,
        grid.spacing[1] as f32,
        grid.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    // scl_slope = 0: stored values are the intensities
    LittleEndian::write_f32(&mut h[112..116], 0.0);
    LittleEndian::write_f32(&mut h[116..120], 0.0);
    h[123] = 2; // NIFTI_UNITS_MM
    let descrip = b"voxelstrip";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    let q: [f32; 3] = [quat[0] as f32, quat[1] as f32, quat[2] as f32];
    LittleEndian::write_f32_into(&q, &mut h[256..268]);
    let off: [f32; 3] = [
        grid.affine[0][3] as f32,
        grid.affine[1][3] as f32,
        grid.affine[2][3] as f32,
    ];
    LittleEndian::write_f32_into(&off, &mut h[268..280]);
    for r in 0..3 {
        let row: Vec<f32> = grid.affine[r].iter().map(|&v| v as f32).collect();
        LittleEndian::write_f32_into(&row, &mut h[280 + 16 * r..296 + 16 * r]);
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = h;
    out.reserve(data.len() * dtype.size());
    let mut buf = [0u8; 8];
    for &v in data {
        let width = dtype.size();
        match dtype {
            DataType::Uint8 => buf[0] = v as u8,
            DataType::Int16 => LittleEndian::write_i16(&mut buf, v as i16),
            DataType::Int32 => LittleEndian::write_i32(&mut buf, v as i32),
            DataType::Float32 => LittleEndian::write_f32(&mut buf, v),
            DataType::Float64 => LittleEndian::write_f64(&mut buf, v as f64),
        }
        out.extend_from_slice(&buf[..width]);
    }
    out
}

fn write_bytes(bytes: &[u8], path: &Path, compress: bool) -> Result<()> {
    let io = |e| Error::io_at(path, e);
    if compress {
        let file = fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(std::io::BufWriter::new(file), Compression::default());
        enc.write_all(bytes).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)?;
    } else {
        fs::write(path, bytes).map_err(io)?;
    }
    Ok(())
}

/// Writes `vol`, keeping its original integer datatype when every voxel is
/// still exactly representable, else float32 (float64 stays float64).
pub fn write_nifti(vol: &Volume, path: &Path, compress: bool) -> Result<()> {
    let dtype = match vol.dtype {
        DataType::Float64 => DataType::Float64,
        dt @ (DataType::Uint8 | DataType::Int16 | DataType::Int32)
            if vol.data.iter().all(|&v| dt.holds(v)) =>
        {
            dt
        }
        _ => DataType::Float32,
    };
    write_bytes(&encode_nifti(&vol.grid, &vol.data, dtype), path, compress)
}

/// Writes a 0/1 uint8 mask.
pub fn write_mask(mask: &BrainMask, path: &Path, compress: bool) -> Result<()> {
    let data: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
    write_bytes(&encode_nifti(&mask.grid, &data, DataType::Uint8), path, compress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;

    fn header_with(dtype: DataType, dims: [i16; 3]) -> Vec<u8> {
        let grid = Grid::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = encode_nifti(&grid, &[], dtype);
        LittleEndian::write_i16_into(&[3, dims[0], dims[1], dims[2]], &mut bytes[40..48]);
        bytes
    }

    #[test]
    fn scl_slope_and_inter_applied() {
        let mut bytes = header_with(DataType::Int16, [1, 1, 1]);
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 1.0);
        bytes.extend_from_slice(&5i16.to_le_bytes());
        let vol = read_nifti_bytes(&bytes).unwrap();
        assert_eq!(vol.data, vec![11.0]);
        assert_eq!(vol.dtype, DataType::Int16);
    }

    #[test]
    fn bad_sizeof_hdr_is_malformed() {
        let mut bytes = header_with(DataType::Float32, [1, 1, 1]);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        LittleEndian::write_i32(&mut bytes[0..4], 540);
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::MalformedHeader(_))));
        assert!(matches!(read_nifti_bytes(&bytes[..100]), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn bad_magic_is_malformed() {
        let mut bytes = header_with(DataType::Float32, [1, 1, 1]);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        bytes[344..348].copy_from_slice(b"XXXX");
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let mut bytes = header_with(DataType::Float32, [1, 1, 1]);
        LittleEndian::write_i16(&mut bytes[70..72], 32); // complex64
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::UnsupportedDatatype(32))));
    }

    #[test]
    fn dimension_errors() {
        let mut bytes = header_with(DataType::Uint8, [2, 0, 2]);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::Dimension(_))));

        // 4D with a real time axis
        let mut bytes = header_with(DataType::Uint8, [1, 1, 1]);
        LittleEndian::write_i16_into(&[4, 1, 1, 1, 3], &mut bytes[40..50]);
        bytes.extend_from_slice(&[0u8; 3]);
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::Dimension(_))));

        // 2D
        let mut bytes = header_with(DataType::Uint8, [1, 1, 1]);
        LittleEndian::write_i16(&mut bytes[40..42], 2);
        bytes.extend_from_slice(&[0u8; 1]);
        assert!(matches!(read_nifti_bytes(&bytes), Err(Error::Dimension(_))));
    }

    #[test]
    fn trailing_singleton_dims_squeezed() {
        let mut bytes = header_with(DataType::Uint8, [2, 1, 1]);
        LittleEndian::write_i16_into(&[5, 2, 1, 1, 1, 1], &mut bytes[40..52]);
        bytes.extend_from_slice(&[3, 4]);
        let vol = read_nifti_bytes(&bytes).unwrap();
        assert_eq!(vol.dims(), [2, 1, 1]);
        assert_eq!(vol.data, vec![3.0, 4.0]);
    }

    #[test]
    fn big_endian_file_reads() {
        let mut h = vec![0u8; VOX_OFFSET];
        BigEndian::write_i32(&mut h[0..4], 348);
        BigEndian::write_i16_into(&[3, 2, 1, 1, 1, 1, 1, 1], &mut h[40..56]);
        BigEndian::write_i16(&mut h[70..72], 4);
        BigEndian::write_f32_into(&[1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0], &mut h[76..108]);
        BigEndian::write_f32(&mut h[108..112], 352.0);
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        h.extend_from_slice(&[0x01, 0x00, 0xff, 0xfe]); // 256, -2
        let vol = read_nifti_bytes(&h).unwrap();
        assert_eq!(vol.data, vec![256.0, -2.0]);
        assert_eq!(vol.spacing(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn qform_used_when_sform_absent() {
        // 90 degree rotation about z, scaled, with translation (all f32-exact)
        let affine: Affine = [
            [0.0, -2.0, 0.0, 12.5],
            [1.5, 0.0, 0.0, -30.0],
            [0.0, 0.0, 3.0, 4.25],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let grid = Grid::new([2, 2, 2], affine).unwrap();
        let mut bytes = encode_nifti(&grid, &[0.0; 8], DataType::Float32);
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        let vol = read_nifti_bytes(&bytes).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((vol.affine()[i][j] - affine[i][j]).abs() < 1e-5, "{i},{j}");
            }
        }
    }

    #[test]
    fn qform_handles_left_handed_affines() {
        let mut affine = identity_affine();
        affine[0][0] = -1.0;
        affine[1][1] = -1.0;
        affine[2][2] = -1.0; // det < 0, needs qfac = -1
        let grid = Grid::new([1, 1, 1], affine).unwrap();
        let mut bytes = encode_nifti(&grid, &[0.0], DataType::Float32);
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        let vol = read_nifti_bytes(&bytes).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((vol.affine()[i][j] - affine[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pixdim_fallback_without_codes() {
        let grid = Grid::with_spacing([1, 1, 1], [0.5, 0.75, 2.0]).unwrap();
        let mut bytes = encode_nifti(&grid, &[0.0], DataType::Float32);
        LittleEndian::write_i16(&mut bytes[252..254], 0);
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        let vol = read_nifti_bytes(&bytes).unwrap();
        assert_eq!(vol.spacing(), [0.5, 0.75, 2.0]);
        assert_eq!(vol.affine()[0][3], 0.0);
    }

    #[test]
    fn integer_dtype_preserved_when_representable() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::with_spacing([2, 1, 1], [1.0; 3]).unwrap();
        let mut vol = Volume::new(grid, vec![-7.0, 300.0]).unwrap();
        vol.dtype = DataType::Int16;
        let p = dir.path().join("a.nii");
        write_nifti(&vol, &p, false).unwrap();
        let back = read_nifti(&p).unwrap();
        assert_eq!(back.dtype, DataType::Int16);
        assert_eq!(back.data, vol.data);

        vol.data[0] = 0.5;
        write_nifti(&vol, &p, false).unwrap();
        assert_eq!(read_nifti(&p).unwrap().dtype, DataType::Float32);
    }
}
