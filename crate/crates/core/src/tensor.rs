//! Minimal little-endian tensor container.
//!
//! A single tensor (`.pnt`) is laid out as
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PNTF"
//! 4       1           version (1)
//! 5       1           dtype code
//! 6       1           ndim
//! 7       5           zero padding
//! 12      8 * ndim    dims, u64 little-endian
//! ...     numel * sz  row-major payload, little-endian
//! ```
//!
//! An archive (`.pnta`) is a `u32` entry count followed by repeated
//! `(u16 name length, UTF-8 name, tensor)` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PNTF";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
    I32,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::I32,
            4 => DType::I64,
            other => return Err(Error::UnsupportedDtype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// Dense row-major tensor backed by its little-endian byte image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

macro_rules! typed_ctor {
    ($from:ident, $to:ident, $ty:ty, $dt:expr) => {
        pub fn $from(shape: &[usize], values: &[$ty]) -> Result<Self> {
            let mut data = Vec::with_capacity(values.len() * std::mem::size_of::<$ty>());
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
            Tensor::from_bytes($dt, shape.to_vec(), data)
        }

        pub fn $to(&self) -> Result<Vec<$ty>> {
            if self.dtype != $dt {
                return Err(Error::Format(format!(
                    "expected {:?} tensor, found {:?}",
                    $dt, self.dtype
                )));
            }
            const SZ: usize = std::mem::size_of::<$ty>();
            Ok(self
                .data
                .chunks_exact(SZ)
                .map(|c| <$ty>::from_le_bytes(c.try_into().expect("chunk size")))
                .collect())
        }
    };
}

impl Tensor {
    pub fn from_bytes(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Format("tensor shape must be non-empty".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected = numel(&shape)? * dtype.size();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} of {dtype:?} needs {expected} bytes, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { dtype, shape, data })
    }

    typed_ctor!(from_f32, to_f32_vec, f32, DType::F32);
    typed_ctor!(from_f64, to_f64_vec, f64, DType::F64);
    typed_ctor!(from_i32, to_i32_vec, i32, DType::I32);
    typed_ctor!(from_i64, to_i64_vec, i64, DType::I64);

    pub fn from_u8(shape: &[usize], values: &[u8]) -> Result<Self> {
        Tensor::from_bytes(DType::U8, shape.to_vec(), values.to_vec())
    }

    pub fn to_u8_vec(&self) -> Result<Vec<u8>> {
        if self.dtype != DType::U8 {
            return Err(Error::Format(format!("expected U8 tensor, found {:?}", self.dtype)));
        }
        Ok(self.data.clone())
    }

    /// Values as f32, accepting f64 input (narrowed).
    pub fn to_f32_lossy(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => self.to_f32_vec(),
            DType::F64 => Ok(self.to_f64_vec()?.into_iter().map(|v| v as f32).collect()),
            other => Err(Error::Format(format!("expected floating tensor, found {other:?}"))),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    /// Keeps the given leading-axis rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        if rows.is_empty() {
            return Err(Error::Dimension("cannot select zero rows".into()));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_bytes(self.dtype, shape, data)
    }

    /// Sets the given leading-axis rows to all-zero bytes (0.0 for float dtypes).
    pub fn zero_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut out = self.clone();
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("row {r} out of range for {n} rows")));
            }
            out.data[r * stride..(r + 1) * stride].fill(0);
        }
        Ok(out)
    }

    /// Interprets the tensor as a matrix, folding leading dims into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.numel() / cols, cols)
    }
}

fn numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

/// Writer wrapper that tracks the byte offset for error reporting.
struct Counting<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Counting<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.written, e))?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

fn write_tensor_counted<W: Write>(t: &Tensor, out: &mut Counting<W>) -> Result<()> {
    if t.shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dims exceed the format limit", t.shape.len())));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = VERSION;
    header[5] = t.dtype.code();
    header[6] = t.shape.len() as u8;
    out.put(&header)?;
    for &d in &t.shape {
        out.put(&(d as u64).to_le_bytes())?;
    }
    out.put(&t.data)
}

/// Writes one tensor, returning the number of bytes emitted.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<u64> {
    let mut out = Counting { inner: sink, written: 0 };
    write_tensor_counted(t, &mut out)?;
    Ok(out.written)
}

/// Reader wrapper that counts consumed bytes and reports truncation.
struct Exact<R> {
    inner: R,
    read: u64,
}

impl<R: Read> Exact<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        expected: self.read + buf.len() as u64,
                        actual: self.read + filled as u64,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(self.read + filled as u64, e)),
            }
        }
        self.read += buf.len() as u64;
        Ok(())
    }

    fn take_vec(&mut self, len: usize) -> Result<Vec<u8>> {
        // grow in bounded chunks so a corrupt length cannot force a huge allocation
        const CHUNK: usize = 1 << 20;
        let mut out = Vec::with_capacity(len.min(CHUNK));
        let mut remaining = len;
        let mut buf = vec![0u8; len.min(CHUNK)];
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            match self.take(&mut buf[..n]) {
                Ok(()) => {}
                Err(Error::Truncated { actual, .. }) => {
                    return Err(Error::Truncated {
                        expected: self.read + remaining as u64,
                        actual,
                    })
                }
                Err(e) => return Err(e),
            }
            out.extend_from_slice(&buf[..n]);
            remaining -= n;
        }
        Ok(out)
    }
}

fn read_tensor_counted<R: Read>(src: &mut Exact<R>) -> Result<Tensor> {
    let mut header = [0u8; HEADER_LEN];
    src.take(&mut header[..4])?;
    if header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02X?}", &header[..4])));
    }
    src.take(&mut header[4..])?;
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_code(header[5])?;
    let ndim = header[6] as usize;
    if ndim == 0 {
        return Err(Error::Format("tensor with zero dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut word = [0u8; 8];
        src.take(&mut word)?;
        let d = u64::from_le_bytes(word);
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        shape.push(d);
    }
    let len = numel(&shape)?
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let data = src.take_vec(len)?;
    Tensor::from_bytes(dtype, shape, data)
}

/// Reads exactly one tensor from `source`; never consumes bytes past its payload.
pub fn read_tensor<R: Read>(source: R) -> Result<Tensor> {
    let mut src = Exact { inner: source, read: 0 };
    read_tensor_counted(&mut src)
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; rejects duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate archive entry `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name of {} bytes too long", name.len())));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Replaces an existing entry in place, or appends it.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name.to_owned(), tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingData(format!("archive entry `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn write_archive<W: Write>(a: &TensorArchive, sink: W) -> Result<u64> {
    let mut out = Counting { inner: sink, written: 0 };
    let count = u32::try_from(a.entries.len())
        .map_err(|_| Error::Format("too many archive entries".into()))?;
    out.put(&count.to_le_bytes())?;
    for (name, t) in &a.entries {
        out.put(&(name.len() as u16).to_le_bytes())?;
        out.put(name.as_bytes())?;
        write_tensor_counted(t, &mut out)?;
    }
    Ok(out.written)
}

pub fn read_archive<R: Read>(source: R) -> Result<TensorArchive> {
    let mut src = Exact { inner: source, read: 0 };
    let mut word = [0u8; 4];
    src.take(&mut word)?;
    let count = u32::from_le_bytes(word);
    let mut archive = TensorArchive::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        src.take(&mut len)?;
        let name = src.take_vec(u16::from_le_bytes(len) as usize)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("archive entry name is not UTF-8".into()))?;
        let tensor = read_tensor_counted(&mut src)?;
        archive.insert(name, tensor)?;
    }
    Ok(archive)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(0, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(0, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| {
        Error::Format(format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(BufReader::new(f))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    let n = write_tensor(t, &mut w)?;
    w.flush().map_err(|e| Error::io(n, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(open(path)?)
}

pub fn save_archive(path: &Path, a: &TensorArchive) -> Result<()> {
    let mut w = create(path)?;
    let n = write_archive(a, &mut w)?;
    w.flush().map_err(|e| Error::io(n, e))
}

pub fn load_archive(path: &Path) -> Result<TensorArchive> {
    read_archive(open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout_f32_2x3() {
        let values: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let t = Tensor::from_f32(&[2, 3], &values).unwrap();
        let buf = bytes_of(&t);
        assert_eq!(
            &buf[..12],
            &[0x50, 0x4E, 0x54, 0x46, 0x01, 0x00, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00]
        );
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..28], &3u64.to_le_bytes());
        assert_eq!(buf.len(), 28 + 24);
        let back = read_tensor(&buf[..]).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.to_f32_vec().unwrap(), values);
    }

    #[test]
    fn f64_zero_payload() {
        let t = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let buf = bytes_of(&t);
        assert_eq!(&buf[buf.len() - 8..], &[0u8; 8]);
        assert_eq!(buf.len(), 12 + 8 + 8);
    }

    #[test]
    fn bad_magic() {
        let err = read_tensor(&b"XXXX\x01\x00\x01\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn unknown_dtype() {
        let mut buf = bytes_of(&Tensor::from_u8(&[1], &[7]).unwrap());
        buf[5] = 42;
        assert!(matches!(read_tensor(&buf[..]), Err(Error::UnsupportedDtype(42))));
    }

    #[test]
    fn truncated_dims() {
        let mut buf = vec![0x50, 0x4E, 0x54, 0x46, 0x01, 0x00, 10, 0, 0, 0, 0, 0];
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&3u64.to_le_bytes());
        match read_tensor(&buf[..]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(actual, 28);
                assert_eq!(expected, 36);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let buf = bytes_of(&Tensor::from_i32(&[4], &[1, 2, 3, 4]).unwrap());
        match read_tensor(&buf[..buf.len() - 3]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, buf.len() as u64);
                assert_eq!(actual, buf.len() as u64 - 3);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn does_not_over_read() {
        let mut buf = bytes_of(&Tensor::from_u8(&[3], &[1, 2, 3]).unwrap());
        buf.extend_from_slice(b"tail");
        let mut cursor = std::io::Cursor::new(buf);
        read_tensor(&mut cursor).unwrap();
        let mut rest = Vec::new();
        cursor.read_to_end(&mut rest).unwrap();
        assert_eq!(rest, b"tail");
    }

    #[test]
    fn empty_archive_is_four_bytes() {
        let mut buf = Vec::new();
        assert_eq!(write_archive(&TensorArchive::new(), &mut buf).unwrap(), 4);
        assert_eq!(buf, [0, 0, 0, 0]);
        assert!(read_archive(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn duplicate_names_rejected_on_read() {
        let t = Tensor::from_u8(&[1], &[1]).unwrap();
        let mut one = TensorArchive::new();
        one.insert("w", t.clone()).unwrap();
        assert!(one.insert("w", t.clone()).is_err());
        let mut buf = Vec::new();
        write_archive(&one, &mut buf).unwrap();
        // splice a second copy of the single record and bump the count
        let record = buf[4..].to_vec();
        buf.extend_from_slice(&record);
        buf[0] = 2;
        assert!(matches!(read_archive(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn sink_failure_reports_offset() {
        struct Limited(usize);
        impl Write for Limited {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                if self.0 == 0 {
                    return Err(std::io::Error::other("full"));
                }
                let n = buf.len().min(self.0);
                self.0 -= n;
                Ok(n)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let t = Tensor::from_f32(&[4], &[0.0; 4]).unwrap();
        match write_tensor(&t, Limited(12)) {
            Err(Error::Io { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected i/o error, got {other:?}"),
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (0u8..5, prop::collection::vec(1usize..5, 1..4)).prop_flat_map(|(code, shape)| {
            let dtype = DType::from_code(code).unwrap();
            let len = shape.iter().product::<usize>() * dtype.size();
            prop::collection::vec(any::<u8>(), len)
                .prop_map(move |data| Tensor::from_bytes(dtype, shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn tensor_round_trip(t in arb_tensor()) {
            let buf = bytes_of(&t);
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }

        #[test]
        fn archive_round_trip(ts in prop::collection::vec(arb_tensor(), 0..5)) {
            let mut a = TensorArchive::new();
            for (i, t) in ts.into_iter().enumerate() {
                a.insert(format!("t{i}/é"), t).unwrap();
            }
            let mut buf = Vec::new();
            write_archive(&a, &mut buf).unwrap();
            let back = read_archive(&buf[..]).unwrap();
            let mut again = Vec::new();
            write_archive(&back, &mut again).unwrap();
            prop_assert_eq!(back, a);
            prop_assert_eq!(again, buf);
        }
    }
}
