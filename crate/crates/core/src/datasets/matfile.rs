//! Reader for the subset of the MATLAB level-5 MAT-file format used by the
//! SVHN cropped-digit archives: numeric matrices, optionally zlib-compressed.

use std::collections::HashMap;
use std::io::Read;

use flate2::read::ZlibDecoder;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// Numeric classes (mxDOUBLE .. mxUINT64); anything else is skipped.
const NUMERIC_CLASSES: std::ops::RangeInclusive<u8> = 6..=15;

#[derive(Clone, Debug, PartialEq)]
pub enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

/// A numeric array in MATLAB's column-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatArray {
    pub dims: Vec<usize>,
    pub data: MatData,
}

impl MatArray {
    pub fn len(&self) -> usize {
        match &self.data {
            MatData::U8(v) => v.len(),
            MatData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            MatData::U8(v) => v.iter().map(|&b| f64::from(b)).collect(),
            MatData::F64(v) => v.clone(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        Ok(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    /// Returns `(type, payload)`, consuming padding.
    fn element(&mut self) -> Result<(u32, &'a [u8]), String> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            let n = (first >> 16) as usize;
            if n > 4 {
                return Err(format!("small element claims {n} bytes"));
            }
            let data = self.take(4)?;
            return Ok((first & 0xffff, &data[..n]));
        }
        let n = self.u32()? as usize;
        let data = self.take(n)?;
        if first != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            // the final element of a stream may omit its padding
            let pad = pad.min(self.bytes.len() - self.pos);
            self.take(pad)?;
        }
        Ok((first, data))
    }
}

fn decode_numeric(ty: u32, data: &[u8], big_endian: bool) -> Result<MatData, String> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {{
            if data.len() % $n != 0 {
                return Err(format!("{} bytes is not a multiple of {}", data.len(), $n));
            }
            data.chunks_exact($n)
                .map(|c| {
                    let arr: [u8; $n] = c.try_into().expect("chunk");
                    let v = if big_endian {
                        <$t>::from_be_bytes(arr)
                    } else {
                        <$t>::from_le_bytes(arr)
                    };
                    v as f64
                })
                .collect::<Vec<f64>>()
        }};
    }
    Ok(match ty {
        MI_UINT8 => MatData::U8(data.to_vec()),
        MI_INT8 => MatData::F64(data.iter().map(|&b| f64::from(b as i8)).collect()),
        MI_INT16 => MatData::F64(conv!(i16, 2)),
        MI_UINT16 => MatData::F64(conv!(u16, 2)),
        MI_INT32 => MatData::F64(conv!(i32, 4)),
        MI_UINT32 => MatData::F64(conv!(u32, 4)),
        MI_INT64 => MatData::F64(conv!(i64, 8)),
        MI_UINT64 => MatData::F64(conv!(u64, 8)),
        MI_SINGLE => MatData::F64(conv!(f32, 4)),
        MI_DOUBLE => MatData::F64(conv!(f64, 8)),
        other => return Err(format!("unsupported numeric storage type {other}")),
    })
}

fn parse_matrix(body: &[u8], big_endian: bool) -> Result<Option<(String, MatArray)>, String> {
    let mut c = Cursor {
        bytes: body,
        pos: 0,
        big_endian,
    };
    let (_, flags) = c.element()?;
    if flags.len() < 8 {
        return Err("array flags too short".into());
    }
    let flag_word = if big_endian {
        u32::from_be_bytes(flags[..4].try_into().expect("4"))
    } else {
        u32::from_le_bytes(flags[..4].try_into().expect("4"))
    };
    let class = (flag_word & 0xff) as u8;
    let complex = flag_word & 0x800 != 0;
    let (dim_ty, dims_raw) = c.element()?;
    let dims: Vec<usize> = match decode_numeric(dim_ty, dims_raw, big_endian)? {
        MatData::U8(v) => v.into_iter().map(usize::from).collect(),
        MatData::F64(v) => v.into_iter().map(|d| d as usize).collect(),
    };
    let (_, name) = c.element()?;
    let name = String::from_utf8_lossy(name).into_owned();
    if !NUMERIC_CLASSES.contains(&class) || complex {
        return Ok(None);
    }
    let (ty, real) = c.element()?;
    let data = decode_numeric(ty, real, big_endian)?;
    let array = MatArray { dims, data };
    let expected: usize = array.dims.iter().product();
    if array.len() != expected {
        return Err(format!(
            "variable {name}: {} values for dimensions {:?}",
            array.len(),
            array.dims
        ));
    }
    Ok(Some((name, array)))
}

fn parse_elements(bytes: &[u8], big_endian: bool, out: &mut HashMap<String, MatArray>) -> Result<(), String> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        big_endian,
    };
    while !c.done() {
        let (ty, data) = c.element()?;
        match ty {
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(data)
                    .read_to_end(&mut inflated)
                    .map_err(|e| format!("zlib: {e}"))?;
                parse_elements(&inflated, big_endian, out)?;
            }
            MI_MATRIX => {
                if let Some((name, arr)) = parse_matrix(data, big_endian)? {
                    out.insert(name, arr);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parse every numeric, real-valued variable of a level-5 MAT file.
pub fn read_mat(bytes: &[u8]) -> Result<HashMap<String, MatArray>, String> {
    if bytes.len() < 128 {
        return Err("file shorter than the 128-byte MAT header".into());
    }
    let big_endian = match &bytes[126..128] {
        b"IM" => false,
        b"MI" => true,
        _ => return Err("missing MAT-file endian indicator (not a level-5 MAT file?)".into()),
    };
    let mut out = HashMap::new();
    parse_elements(&bytes[128..], big_endian, &mut out)?;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod writer {
    //! Minimal level-5 writer used to build fixtures in tests.
    use std::io::Write;

    use flate2::write::ZlibEncoder;
    use flate2::Compression;

    fn element(ty: u32, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(ty.to_le_bytes());
        out.extend((data.len() as u32).to_le_bytes());
        out.extend(data);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        out
    }

    pub enum Values<'a> {
        U8(&'a [u8]),
        F64(&'a [f64]),
    }

    pub fn matrix(name: &str, dims: &[usize], values: Values<'_>) -> Vec<u8> {
        let (class, ty, raw): (u32, u32, Vec<u8>) = match values {
            Values::U8(v) => (9, super::MI_UINT8, v.to_vec()),
            Values::F64(v) => (6, super::MI_DOUBLE, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        };
        let mut body = Vec::new();
        let mut flags = class.to_le_bytes().to_vec();
        flags.extend(0u32.to_le_bytes());
        body.extend(element(super::MI_UINT32, &flags));
        let dims: Vec<u8> = dims.iter().flat_map(|&d| (d as i32).to_le_bytes()).collect();
        body.extend(element(super::MI_INT32, &dims));
        body.extend(element(super::MI_INT8, name.as_bytes()));
        body.extend(element(ty, &raw));
        element(super::MI_MATRIX, &body)
    }

    pub fn compressed(inner: &[u8]) -> Vec<u8> {
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
        enc.write_all(inner).unwrap();
        let z = enc.finish().unwrap();
        let mut out = Vec::new();
        out.extend(super::MI_COMPRESSED.to_le_bytes());
        out.extend((z.len() as u32).to_le_bytes());
        out.extend(z);
        out
    }

    pub fn file(elements: &[Vec<u8>]) -> Vec<u8> {
        let mut header = vec![b' '; 116];
        header[..20].copy_from_slice(b"MATLAB 5.0 MAT-file ");
        header.extend([0u8; 8]);
        header.extend(0x0100u16.to_le_bytes());
        header.extend(b"IM");
        for e in elements {
            header.extend(e);
        }
        header
    }
}

#[cfg(test)]
mod tests {
    use super::writer::*;
    use super::*;

    #[test]
    fn reads_plain_and_compressed_matrices() {
        let x: Vec<u8> = (0..24).collect();
        let y = [10.0, 1.0, 3.0];
        let bytes = file(&[
            matrix("X", &[2, 4, 3], Values::U8(&x)),
            compressed(&matrix("y", &[3, 1], Values::F64(&y))),
        ]);
        let vars = read_mat(&bytes).unwrap();
        assert_eq!(vars["X"].dims, vec![2, 4, 3]);
        assert_eq!(vars["X"].data, MatData::U8(x));
        assert_eq!(vars["y"].to_f64(), y.to_vec());
    }

    #[test]
    fn reads_scipy_written_file() {
        // written by scipy.io.savemat(..., do_compression=True) with
        // X = arange(24, dtype=uint8).reshape(2,3,4), y = [[10],[2],[7]]
        let bytes = include_bytes!("../../tests/fixtures/scipy_small.mat");
        let vars = read_mat(bytes).unwrap();
        assert_eq!(vars["X"].dims, vec![2, 3, 4]);
        // column-major: element (i,j,k) at i + 2*(j + 3*k); python value is 12*i + 4*j + k
        let x = vars["X"].to_f64();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(x[i + 2 * (j + 3 * k)], (12 * i + 4 * j + k) as f64);
                }
            }
        }
        assert_eq!(vars["y"].to_f64(), vec![10.0, 2.0, 7.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_mat(&[0u8; 10]).is_err());
        assert!(read_mat(&[0u8; 200]).is_err());
        let mut ok = file(&[matrix("y", &[3, 1], Values::F64(&[1.0, 2.0, 3.0]))]);
        ok.truncate(ok.len() - 12);
        assert!(read_mat(&ok).is_err());
    }
}
