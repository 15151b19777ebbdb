//! Self-describing binary container for volumes, masks and measurements.
//!
//! Layout: the magic `MSRD`, a little-endian `u16` version, a little-endian
//! `u32` header length, a UTF-8 header of `key=value` lines and finally the
//! little-endian row-major payload. Complex values are stored as
//! interleaved `(re, im)` doubles. The header always carries `dtype`,
//! `shape` and `labels`; any other keys are free-form attributes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use num_complex::Complex64;
use thiserror::Error;

use crate::types::{ComplexVolume, DiffractionSet, KSpaceStack, MaskKind, ProbeParams, SamplingMask};

pub const MAGIC: [u8; 4] = *b"MSRD";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a container file (bad magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated container: expected {expected} bytes of {what}, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },

    #[error("inconsistent container: {0}")]
    Inconsistent(String),

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("container i/o: {0}")]
    Io(#[from] io::Error),
}

type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    C128,
    F64,
    U8,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::C128 => "c128",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::C128 => 16,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

impl FromStr for Dtype {
    type Err = ContainerError;

    fn from_str(s: &str) -> CResult<Self> {
        match s {
            "c128" => Ok(Dtype::C128),
            "f64" => Ok(Dtype::F64),
            "u8" => Ok(Dtype::U8),
            other => Err(ContainerError::Header(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    C128(Vec<Complex64>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::C128(_) => Dtype::C128,
            Payload::F64(_) => Dtype::F64,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::C128(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory image of one container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub labels: Vec<String>,
    pub attrs: BTreeMap<String, String>,
    pub payload: Payload,
}

const RESERVED: [&str; 3] = ["dtype", "shape", "labels"];

fn check_token(s: &str, what: &str) -> CResult<()> {
    if s.is_empty() || s.contains(['\n', '=', ',']) {
        return Err(ContainerError::Header(format!("invalid {what} {s:?}")));
    }
    Ok(())
}

impl Container {
    pub fn new(shape: Vec<usize>, labels: Vec<String>, payload: Payload) -> CResult<Self> {
        let c = Self { shape, labels, attrs: BTreeMap::new(), payload };
        c.validate()?;
        Ok(c)
    }

    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    pub fn validate(&self) -> CResult<()> {
        if self.labels.len() != self.shape.len() {
            return Err(ContainerError::Inconsistent(format!(
                "{} labels for a rank-{} shape",
                self.labels.len(),
                self.shape.len()
            )));
        }
        let count: usize = self.shape.iter().product();
        if count != self.payload.len() {
            return Err(ContainerError::Inconsistent(format!(
                "shape {:?} holds {count} elements but payload has {}",
                self.shape,
                self.payload.len()
            )));
        }
        for l in &self.labels {
            check_token(l, "axis label")?;
        }
        for (k, v) in &self.attrs {
            check_token(k, "attribute key")?;
            if RESERVED.contains(&k.as_str()) || v.contains('\n') {
                return Err(ContainerError::Header(format!("invalid attribute {k:?}")));
            }
        }
        Ok(())
    }

    pub fn with_attr(mut self, key: &str, value: impl ToString) -> Self {
        self.attrs.insert(key.to_string(), value.to_string());
        self
    }

    pub fn attr<T: FromStr>(&self, key: &str) -> CResult<T> {
        let raw = self.attrs.get(key).ok_or_else(|| ContainerError::Header(format!("missing attribute {key:?}")))?;
        raw.parse().map_err(|_| ContainerError::Header(format!("attribute {key}={raw:?} does not parse")))
    }

    pub fn attr_or<T: FromStr>(&self, key: &str, default: T) -> CResult<T> {
        if self.attrs.contains_key(key) {
            self.attr(key)
        } else {
            Ok(default)
        }
    }

    fn header_text(&self) -> String {
        let mut h = format!(
            "dtype={}\nshape={}\nlabels={}\n",
            self.dtype().as_str(),
            self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            self.labels.join(",")
        );
        for (k, v) in &self.attrs {
            h.push_str(&format!("{k}={v}\n"));
        }
        h
    }

    /// Serialises to any byte sink.
    pub fn write_to<W: Write>(&self, w: &mut W) -> CResult<()> {
        self.validate()?;
        let header = self.header_text();
        let hlen = u32::try_from(header.len()).map_err(|_| ContainerError::Header("header too long".into()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&hlen.to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        match &self.payload {
            Payload::C128(v) => {
                for z in v {
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
            Payload::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::U8(v) => w.write_all(v)?,
        }
        w.flush()?;
        Ok(())
    }

    /// Reads exactly one container from a byte stream, leaving any following
    /// bytes unread.
    pub fn read_from<R: Read>(r: &mut R) -> CResult<Self> {
        let mut magic = [0u8; 4];
        read_full(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let mut v = [0u8; 2];
        read_full(r, &mut v, "version")?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(ContainerError::VersionMismatch { found: version, expected: VERSION });
        }
        let mut l = [0u8; 4];
        read_full(r, &mut l, "header length")?;
        let hlen = u32::from_le_bytes(l) as usize;
        let mut header = vec![0u8; hlen];
        read_full(r, &mut header, "header")?;
        let header = String::from_utf8(header).map_err(|_| ContainerError::Header("header is not UTF-8".into()))?;
        let (dtype, shape, labels, attrs) = parse_header(&header)?;

        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ContainerError::Inconsistent(format!("shape {shape:?} overflows")))?;
        let bytes =
            count.checked_mul(dtype.size()).ok_or_else(|| ContainerError::Inconsistent(format!("shape {shape:?} overflows")))?;
        let mut raw = Vec::new();
        let got = r.take(bytes as u64).read_to_end(&mut raw)?;
        if got < bytes {
            return Err(ContainerError::Truncated { what: "payload", expected: bytes, found: got });
        }
        let payload = match dtype {
            Dtype::U8 => Payload::U8(raw),
            Dtype::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::C128 => Payload::C128(
                raw.chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
        };
        let c = Container { shape, labels, attrs, payload };
        c.validate()?;
        Ok(c)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> CResult<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(ContainerError::Truncated { what, expected: buf.len(), found: filled }),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

type Header = (Dtype, Vec<usize>, Vec<String>, BTreeMap<String, String>);

fn parse_header(text: &str) -> CResult<Header> {
    let mut dtype = None;
    let mut shape = None;
    let mut labels = None;
    let mut attrs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| ContainerError::Header(format!("line {line:?} is not key=value")))?;
        match k {
            "dtype" => dtype = Some(v.parse::<Dtype>()?),
            "shape" => {
                let dims = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|d| d.trim().parse::<usize>().map_err(|_| ContainerError::Header(format!("bad extent {d:?}"))))
                        .collect::<CResult<Vec<_>>>()?
                };
                shape = Some(dims);
            }
            "labels" => labels = Some(if v.is_empty() { Vec::new() } else { v.split(',').map(str::to_string).collect() }),
            _ => {
                if attrs.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(ContainerError::Header(format!("duplicate key {k:?}")));
                }
            }
        }
    }
    let dtype = dtype.ok_or_else(|| ContainerError::Header("missing dtype".into()))?;
    let shape = shape.ok_or_else(|| ContainerError::Header("missing shape".into()))?;
    let labels = labels.ok_or_else(|| ContainerError::Header("missing labels".into()))?;
    Ok((dtype, shape, labels, attrs))
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> CResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    c.write_to(&mut w)
}

/// Reads a whole file; trailing bytes after the payload are an error.
pub fn read_container(path: impl AsRef<Path>) -> CResult<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let c = Container::read_from(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ContainerError::Inconsistent("trailing bytes after payload".into()));
    }
    Ok(c)
}

fn labels(ls: &[&str]) -> Vec<String> {
    ls.iter().map(|s| s.to_string()).collect()
}

fn expect(c: &Container, dtype: Dtype, rank: usize, what: &str) -> CResult<()> {
    if c.dtype() != dtype || c.shape.len() != rank {
        return Err(ContainerError::Inconsistent(format!(
            "{what} needs a rank-{rank} {} array, found rank-{} {}",
            dtype.as_str(),
            c.shape.len(),
            c.dtype().as_str()
        )));
    }
    Ok(())
}

fn data_error(e: crate::Error) -> ContainerError {
    ContainerError::Inconsistent(e.to_string())
}

pub const CONTENT: &str = "content";

impl Container {
    pub fn content(&self) -> Option<&str> {
        self.attrs.get(CONTENT).map(String::as_str)
    }

    pub fn from_volume(x: &ComplexVolume) -> Self {
        let (s, n, _) = x.dim();
        Container::new(vec![s, n, n], labels(&["slice", "y", "x"]), Payload::C128(x.as_slice().to_vec()))
            .expect("volume shape is consistent")
            .with_attr(CONTENT, "volume")
    }

    pub fn to_volume(&self) -> CResult<ComplexVolume> {
        expect(self, Dtype::C128, 3, "volume")?;
        let Payload::C128(v) = &self.payload else { unreachable!() };
        let a = Array3::from_shape_vec((self.shape[0], self.shape[1], self.shape[2]), v.clone())
            .map_err(|e| ContainerError::Inconsistent(e.to_string()))?;
        ComplexVolume::new(a).map_err(data_error)
    }

    pub fn from_mask(m: &SamplingMask) -> Self {
        let n = m.n();
        Container::new(vec![n, n], labels(&["ky", "kx"]), Payload::U8(m.values().iter().copied().collect()))
            .expect("mask shape is consistent")
            .with_attr(CONTENT, "mask")
            .with_attr("accel", m.accel)
            .with_attr("center_frac", m.center_frac)
            .with_attr("kind", m.kind.as_str())
            .with_attr("seed", m.seed)
    }

    pub fn to_mask(&self) -> CResult<SamplingMask> {
        expect(self, Dtype::U8, 2, "mask")?;
        let Payload::U8(v) = &self.payload else { unreachable!() };
        let values = Array2::from_shape_vec((self.shape[0], self.shape[1]), v.clone())
            .map_err(|e| ContainerError::Inconsistent(e.to_string()))?;
        let kind = match self.attrs.get("kind") {
            Some(k) => MaskKind::parse(k).ok_or_else(|| ContainerError::Header(format!("unknown mask kind {k:?}")))?,
            None => MaskKind::Custom,
        };
        if kind == MaskKind::Custom && !self.attrs.contains_key("accel") {
            return SamplingMask::custom(values).map_err(data_error);
        }
        SamplingMask::new(values, self.attr("accel")?, self.attr("center_frac")?, kind, self.attr_or("seed", 0)?)
            .map_err(data_error)
    }

    pub fn from_kspace(y: &KSpaceStack) -> Self {
        Container::from_volume(y.spectra()).with_attr(CONTENT, "kspace")
    }

    pub fn to_kspace(&self, mask: &SamplingMask) -> CResult<KSpaceStack> {
        KSpaceStack::new(self.to_volume()?, mask).map_err(data_error)
    }

    pub fn from_diffraction(d: &DiffractionSet) -> Self {
        let shape = d.data().shape().to_vec();
        Container::new(shape, labels(&["scan_y", "scan_x", "ky", "kx"]), Payload::F64(d.data().iter().copied().collect()))
            .expect("diffraction shape is consistent")
            .with_attr(CONTENT, "diffraction")
            .with_attr("scan_step", d.scan_step)
    }

    pub fn to_diffraction(&self) -> CResult<DiffractionSet> {
        expect(self, Dtype::F64, 4, "diffraction set")?;
        let Payload::F64(v) = &self.payload else { unreachable!() };
        let s = &self.shape;
        let a = Array4::from_shape_vec((s[0], s[1], s[2], s[3]), v.clone())
            .map_err(|e| ContainerError::Inconsistent(e.to_string()))?;
        DiffractionSet::new(a, self.attr_or("scan_step", 1.0)?).map_err(data_error)
    }

    pub fn from_image(img: &Array2<f64>) -> Self {
        let (h, w) = img.dim();
        Container::new(vec![h, w], labels(&["y", "x"]), Payload::F64(img.iter().copied().collect()))
            .expect("image shape is consistent")
            .with_attr(CONTENT, "image")
    }

    pub fn to_image(&self) -> CResult<Array2<f64>> {
        expect(self, Dtype::F64, 2, "image")?;
        let Payload::F64(v) = &self.payload else { unreachable!() };
        Array2::from_shape_vec((self.shape[0], self.shape[1]), v.clone()).map_err(|e| ContainerError::Inconsistent(e.to_string()))
    }

    pub fn from_probe(p: &Array2<Complex64>, params: &ProbeParams) -> Self {
        let (h, w) = p.dim();
        Container::new(vec![h, w], labels(&["y", "x"]), Payload::C128(p.iter().copied().collect()))
            .expect("probe shape is consistent")
            .with_attr(CONTENT, "probe")
            .with_attr("wavelength", params.wavelength)
            .with_attr("semi_angle", params.semi_angle)
            .with_attr("defocus", params.defocus)
            .with_attr("pixel_size", params.pixel_size)
    }

    pub fn to_complex_image(&self) -> CResult<Array2<Complex64>> {
        expect(self, Dtype::C128, 2, "complex image")?;
        let Payload::C128(v) = &self.payload else { unreachable!() };
        Array2::from_shape_vec((self.shape[0], self.shape[1]), v.clone()).map_err(|e| ContainerError::Inconsistent(e.to_string()))
    }

    /// Generic view as an n-dimensional real array (magnitude for complex).
    pub fn to_real_dyn(&self) -> CResult<ArrayD<f64>> {
        let data: Vec<f64> = match &self.payload {
            Payload::C128(v) => v.iter().map(|z| z.norm()).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&b| b as f64).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), data).map_err(|e| ContainerError::Inconsistent(e.to_string()))
    }
}
