//! Binary tensor and archive containers, plus ingestion of depth maps,
//! semantic masks and box annotations.
//!
//! Tensor record (`KTSR`), all integers little-endian:
//!
//! ```text
//! "KTSR1\0" | u8 dtype | u8 ndim | ndim x u64 shape | row-major payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = i32.
//!
//! Archive (`KTAR`):
//!
//! ```text
//! "KTAR1\0" | u32 count | count x (u8 name_len | name | KTSR record)
//! ```

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 6] = b"KTSR1\0";
pub const ARCHIVE_MAGIC: &[u8; 6] = b"KTAR1\0";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("{0} trailing bytes after record")]
    TrailingBytes(usize),
    #[error("shape {shape:?} has {expected} elements but data holds {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} overflows the addressable size")]
    ShapeOverflow(Vec<usize>),
    #[error("tensor has {0} dimensions, at most 255 are encodable")]
    TooManyDims(usize),
    #[error("invalid archive entry name {0:?}: names must be 1..=255 bytes")]
    BadName(String),
    #[error("duplicate archive entry {0:?}")]
    DuplicateName(String),
    #[error("archive entry {0:?} not found")]
    MissingEntry(String),
    #[error("entry name is not valid UTF-8")]
    NameEncoding,
    #[error("expected {expected}, got {actual}")]
    WrongKind { expected: String, actual: String },
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: field {field} is not a number: {value:?}")]
    Parse {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {field} = {value} is invalid: {reason}")]
    Invalid {
        line: usize,
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorIoError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            3 => Ok(DType::I32),
            other => Err(TensorIoError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize, TensorIoError> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorIoError::ShapeOverflow(shape.to_vec()))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorIoError> {
        if shape.len() > 255 {
            return Err(TensorIoError::TooManyDims(shape.len()));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(TensorIoError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::I32(data))
    }

    /// UTF-8 text stored as a rank-1 u8 tensor.
    pub fn from_text(text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        Self {
            shape: vec![bytes.len()],
            data: TensorData::U8(bytes),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values widened to f64 (exact for every supported dtype).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<String> {
        self.as_u8()
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }

    /// Serializes into a KTSR record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + self.len() * self.dtype().size());
        self.write_into(&mut out);
        out
    }

    fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    /// Parses exactly one KTSR record; trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let mut reader = ByteReader::new(bytes);
        let t = read_tensor_record(&mut reader)?;
        match reader.remaining() {
            0 => Ok(t),
            n => Err(TensorIoError::TrailingBytes(n)),
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorIoError> {
        if n > self.remaining() {
            return Err(TensorIoError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TensorIoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TensorIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 6]) -> Result<(), TensorIoError> {
        let n = expected.len().min(self.remaining());
        let found = &self.bytes[self.pos..self.pos + n];
        if found != &expected[..n] {
            return Err(TensorIoError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: found.to_vec(),
            });
        }
        self.take(expected.len())?;
        Ok(())
    }
}

fn read_tensor_record(r: &mut ByteReader<'_>) -> Result<Tensor, TensorIoError> {
    r.magic(TENSOR_MAGIC)?;
    let dtype = DType::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.u64()?;
        shape.push(usize::try_from(d).map_err(|_| TensorIoError::ShapeOverflow(shape.clone()))?);
    }
    let count = element_count(&shape)?;
    let nbytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| TensorIoError::ShapeOverflow(shape.clone()))?;
    let payload = r.take(nbytes)?;
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor { shape, data })
}

fn io_err(path: &Path, source: std::io::Error) -> TensorIoError {
    TensorIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

fn check_name(name: &str) -> Result<(), TensorIoError> {
    if name.is_empty() || name.len() > 255 {
        return Err(TensorIoError::BadName(name.to_string()));
    }
    Ok(())
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry, rejecting duplicate or malformed names.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), TensorIoError> {
        let name = name.into();
        check_name(&name)?;
        if self.get(&name).is_some() {
            return Err(TensorIoError::DuplicateName(name));
        }
        self.entries.push((name, t));
        Ok(())
    }

    /// Builds an archive without validating names; `to_bytes` validates.
    pub fn from_entries_unchecked(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, TensorIoError> {
        self.get(name)
            .ok_or_else(|| TensorIoError::MissingEntry(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorIoError> {
        let mut seen = HashSet::new();
        for (name, _) in &self.entries {
            check_name(name)?;
            if !seen.insert(name.as_str()) {
                return Err(TensorIoError::DuplicateName(name.clone()));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            t.write_into(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let mut r = ByteReader::new(bytes);
        r.magic(ARCHIVE_MAGIC)?;
        let count = r.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let len = r.u8()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TensorIoError::NameEncoding)?
                .to_string();
            let t = read_tensor_record(&mut r)?;
            archive.insert(name, t)?;
        }
        match r.remaining() {
            0 => Ok(archive),
            n => Err(TensorIoError::TrailingBytes(n)),
        }
    }
}

pub fn write_archive(a: &TensorArchive, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, a.to_bytes()?).map_err(|e| io_err(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    TensorArchive::from_bytes(&bytes)
}

/// Depth map: f32 `[H, W]` in meters.
pub fn check_depth_map(t: &Tensor) -> Result<(usize, usize), TensorIoError> {
    match (t.dtype(), t.shape()) {
        (DType::F32, &[h, w]) => Ok((h, w)),
        _ => Err(TensorIoError::WrongKind {
            expected: "f32 [H, W] depth map".into(),
            actual: format!("{:?} {:?}", t.dtype(), t.shape()),
        }),
    }
}

/// Semantic mask: u8 `[H, W]` of category ids, `K - 1` is background.
pub fn check_semantic_mask(t: &Tensor, num_categories: usize) -> Result<(usize, usize), TensorIoError> {
    let (h, w) = match (t.dtype(), t.shape()) {
        (DType::U8, &[h, w]) => (h, w),
        _ => {
            return Err(TensorIoError::WrongKind {
                expected: "u8 [H, W] semantic mask".into(),
                actual: format!("{:?} {:?}", t.dtype(), t.shape()),
            })
        }
    };
    if let Some(&bad) = t.as_u8().unwrap().iter().find(|&&c| c as usize >= num_categories) {
        return Err(TensorIoError::WrongKind {
            expected: format!("category ids < {num_categories}"),
            actual: format!("id {bad}"),
        });
    }
    Ok((h, w))
}

pub fn load_depth_map(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let t = read_tensor(path)?;
    check_depth_map(&t)?;
    Ok(t)
}

pub fn load_semantic_mask(path: impl AsRef<Path>, num_categories: usize) -> Result<Tensor, TensorIoError> {
    let t = read_tensor(path)?;
    check_semantic_mask(&t, num_categories)?;
    Ok(t)
}

/// Ground-truth (or predicted, with `confidence`) yaw-rotated 3D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub category_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

const FIELD_NAMES: [&str; 9] = ["category_id", "cx", "cy", "cz", "sx", "sy", "sz", "yaw", "confidence"];

/// One parsed record: the box plus the optional ninth confidence field.
pub type BoxRecord = (BoxAnnotation, Option<f64>);

/// Parses annotation text. Each non-comment line holds 8 whitespace
/// separated fields (`category_id cx cy cz sx sy sz yaw`), or 9 when
/// `with_confidence` is set. `#` starts a comment.
pub fn parse_box_records(
    text: &str,
    num_categories: usize,
    with_confidence: bool,
) -> Result<Vec<BoxRecord>, AnnotationError> {
    let expected = if with_confidence { 9 } else { 8 };
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != expected {
            return Err(AnnotationError::FieldCount {
                line,
                expected,
                found: fields.len(),
            });
        }
        let category_id: usize = fields[0].parse().map_err(|_| AnnotationError::Parse {
            line,
            field: FIELD_NAMES[0],
            value: fields[0].to_string(),
        })?;
        if category_id >= num_categories {
            return Err(AnnotationError::Invalid {
                line,
                field: FIELD_NAMES[0],
                value: category_id as f64,
                reason: "category id must be below the category count",
            });
        }
        let mut nums = [0.0f64; 8];
        for i in 1..expected {
            let v: f64 = fields[i].parse().map_err(|_| AnnotationError::Parse {
                line,
                field: FIELD_NAMES[i],
                value: fields[i].to_string(),
            })?;
            if !v.is_finite() {
                return Err(AnnotationError::Invalid {
                    line,
                    field: FIELD_NAMES[i],
                    value: v,
                    reason: "must be finite",
                });
            }
            if i < 8 {
                nums[i] = v;
            } else {
                nums[0] = v;
            }
        }
        for i in 4..7 {
            if nums[i] <= 0.0 {
                return Err(AnnotationError::Invalid {
                    line,
                    field: FIELD_NAMES[i],
                    value: nums[i],
                    reason: "size must be strictly positive",
                });
            }
        }
        if !(-PI..=PI).contains(&nums[7]) {
            return Err(AnnotationError::Invalid {
                line,
                field: FIELD_NAMES[7],
                value: nums[7],
                reason: "yaw must lie in [-pi, pi]",
            });
        }
        let confidence = if with_confidence {
            let c = nums[0];
            if !(0.0..=1.0).contains(&c) {
                return Err(AnnotationError::Invalid {
                    line,
                    field: FIELD_NAMES[8],
                    value: c,
                    reason: "confidence must lie in [0, 1]",
                });
            }
            Some(c)
        } else {
            None
        };
        out.push((
            BoxAnnotation {
                category_id,
                center: [nums[1], nums[2], nums[3]],
                size: [nums[4], nums[5], nums[6]],
                yaw: nums[7],
            },
            confidence,
        ));
    }
    Ok(out)
}

pub fn parse_annotations(text: &str, num_categories: usize) -> Result<Vec<BoxAnnotation>, AnnotationError> {
    Ok(parse_box_records(text, num_categories, false)?
        .into_iter()
        .map(|(b, _)| b)
        .collect())
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    num_categories: usize,
) -> Result<Vec<BoxAnnotation>, AnnotationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations(&text, num_categories)
}

/// Formats one record; `{:?}` on f64 is shortest round-trip, so
/// parse(format(x)) == x.
pub fn format_box_record(b: &BoxAnnotation, confidence: Option<f64>) -> String {
    let mut s = format!(
        "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
        b.category_id, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
    );
    if let Some(c) = confidence {
        s.push_str(&format!(" {c:?}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_2x2_byte_layout() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = t.to_bytes();
        let mut expected = b"KTSR1\0".to_vec();
        expected.push(0);
        expected.push(2);
        expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes.len(), 6 + 1 + 1 + 16 + 16);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_is_reported() {
        let err = Tensor::from_bytes(b"XXXX").unwrap_err();
        assert!(matches!(err, TensorIoError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_and_unknown_dtype_are_distinct() {
        let t = Tensor::from_i32(vec![3], vec![1, 2, 3]).unwrap();
        let bytes = t.to_bytes();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, TensorIoError::Truncated { .. }));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bad).unwrap_err(),
            TensorIoError::UnknownDtype(9)
        ));
        // Partial magic is still a truncation, not a panic.
        assert!(matches!(
            Tensor::from_bytes(b"KTS").unwrap_err(),
            TensorIoError::Truncated { .. }
        ));
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut bytes = TENSOR_MAGIC.to_vec();
        bytes.push(1);
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Tensor::from_bytes(&bytes).is_err());
        let mut bytes = TENSOR_MAGIC.to_vec();
        bytes.push(1);
        bytes.push(1);
        bytes.extend_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&bytes).unwrap_err(),
            TensorIoError::Truncated { .. }
        ));
    }

    #[test]
    fn archive_basics() {
        let empty = TensorArchive::new();
        assert_eq!(TensorArchive::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);

        let mut a = TensorArchive::new();
        a.insert("centers", Tensor::from_f32(vec![2, 3], vec![0.5; 6]).unwrap())
            .unwrap();
        assert_eq!(TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);

        let t = Tensor::from_u8(vec![1], vec![1]).unwrap();
        assert!(matches!(
            a.insert("centers", t.clone()).unwrap_err(),
            TensorIoError::DuplicateName(_)
        ));
        let dup = TensorArchive::from_entries_unchecked(vec![("x".into(), t.clone()), ("x".into(), t.clone())]);
        assert!(matches!(dup.to_bytes().unwrap_err(), TensorIoError::DuplicateName(_)));
        assert!(a.insert("", t.clone()).is_err());
        assert!(a.insert("n".repeat(256), t).is_err());

        let bytes = a.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(TensorArchive::from_bytes(&bytes[..cut]).is_err());
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let s1 = shape.clone();
            let s2 = shape.clone();
            let s3 = shape.clone();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n)
                    .prop_map(move |v| Tensor::from_f32(s1.clone(), v.into_iter().map(f32::from_bits).collect()).unwrap()),
                prop::collection::vec(any::<u64>(), n)
                    .prop_map(move |v| Tensor::from_f64(s2.clone(), v.into_iter().map(f64::from_bits).collect()).unwrap()),
                prop::collection::vec(any::<u8>(), n).prop_map(move |v| Tensor::from_u8(s3.clone(), v).unwrap()),
                prop::collection::vec(any::<i32>(), n).prop_map(move |v| Tensor::from_i32(shape.clone(), v).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_is_bit_identical(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.shape(), t.shape());
        }

        #[test]
        fn archive_roundtrip_preserves_order(ts in prop::collection::vec(arb_tensor(), 0..5)) {
            let mut a = TensorArchive::new();
            for (i, t) in ts.into_iter().enumerate() {
                a.insert(format!("e{}", 9 - i), t).unwrap();
            }
            let bytes = a.to_bytes().unwrap();
            let back = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert!(back.names().eq(a.names()));
        }

        #[test]
        fn truncated_tensor_never_panics(t in arb_tensor(), frac in 0.0f64..1.0) {
            let bytes = t.to_bytes();
            let cut = ((bytes.len() as f64) * frac) as usize;
            prop_assert!(Tensor::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn annotations_parse_and_validate() {
        let text = "# cat cx cy cz sx sy sz yaw\n3 1.0 2.0 0.5 1 1 1 0.25 # chair\n\n";
        let boxes = parse_annotations(text, 12).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].category_id, 3);
        assert_eq!(boxes[0].size, [1.0, 1.0, 1.0]);

        let err = parse_annotations("0 0 0 0 0 1 1 0", 12).unwrap_err();
        match err {
            AnnotationError::Invalid { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "sx");
            }
            e => panic!("unexpected {e}"),
        }
        let err = parse_annotations("\n0 0 0 0 1 1 1 4.0", 12).unwrap_err();
        assert!(matches!(err, AnnotationError::Invalid { line: 2, field: "yaw", .. }));
        let err = parse_annotations("12 0 0 0 1 1 1 0", 12).unwrap_err();
        assert!(matches!(err, AnnotationError::Invalid { field: "category_id", .. }));
        let err = parse_annotations("1 0 0 0 -1 1 1 0", 12).unwrap_err();
        assert!(matches!(err, AnnotationError::Invalid { field: "sx", .. }));
        assert!(matches!(
            parse_annotations("1 0 0", 12).unwrap_err(),
            AnnotationError::FieldCount { .. }
        ));
    }

    #[test]
    fn box_record_format_roundtrips() {
        let b = BoxAnnotation {
            category_id: 4,
            center: [0.1, -2.0 / 3.0, 1e-7],
            size: [0.3, 1.0, 2.5],
            yaw: -1.2345678901234,
        };
        let line = format_box_record(&b, Some(0.875));
        let parsed = parse_box_records(&line, 12, true).unwrap();
        assert_eq!(parsed, vec![(b, Some(0.875))]);
    }

    #[test]
    fn mask_validation() {
        let m = Tensor::from_u8(vec![1, 3], vec![0, 11, 12]).unwrap();
        assert!(check_semantic_mask(&m, 12).is_err());
        assert_eq!(check_semantic_mask(&m, 13).unwrap(), (1, 3));
        let d = Tensor::from_f64(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(check_depth_map(&d).is_err());
    }
}
