//! Grid/time data types, the `.dpet` binary container, ROI masks, and TAC
//! extraction.
//!
//! The `.dpet` layout is little-endian:
//!
//! ```text
//! magic "DPET" | version u32 = 1 | nx u32 | ny u32 | nt u32
//! | times: nt x f64 | data: nt*ny*nx x f32, C-order [t][y][x]
//! ```
//!
//! ROI masks reuse the same container with nt = 1 and values in {0, 1};
//! the ROI name lives in a sidecar JSON `{"name": ...}` next to the file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DPET";
const VERSION: u32 = 1;

/// A time-ordered sequence of 2D scalar fields with physical frame times.
///
/// Values are stored as f32 on disk and promoted to f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub nx: usize,
    pub ny: usize,
    /// Frame midpoints in minutes, strictly increasing.
    pub times: Vec<f64>,
    /// Shape (nt, ny, nx).
    pub data: Array3<f64>,
}

impl FrameStack {
    pub fn new(nx: usize, ny: usize, times: Vec<f64>, data: Array3<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || times.is_empty() {
            return Err(Error::Argument("frame stack dimensions must be positive".into()));
        }
        if data.shape() != [times.len(), ny, nx] {
            return Err(Error::Shape(format!(
                "data shape {:?} does not match (nt={}, ny={}, nx={})",
                data.shape(),
                times.len(),
                ny,
                nx
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("frame times must be strictly increasing".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("frame data contains non-finite values".into()));
        }
        Ok(FrameStack { nx, ny, times, data })
    }

    pub fn nt(&self) -> usize {
        self.times.len()
    }

    /// View of frame `j` with shape (ny, nx).
    pub fn frame(&self, j: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), j)
    }
}

/// A named boolean pixel mask over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub name: String,
    pub nx: usize,
    pub ny: usize,
    /// Shape (ny, nx).
    pub mask: Array2<bool>,
}

impl RoiMask {
    pub fn new(name: impl Into<String>, mask: Array2<bool>) -> Result<Self> {
        let (ny, nx) = mask.dim();
        if !mask.iter().any(|&b| b) {
            return Err(Error::Argument("ROI mask has no true pixels".into()));
        }
        Ok(RoiMask { name: name.into(), nx, ny, mask })
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// A region's activity as a function of time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tac {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Tac {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Shape(format!(
                "TAC times ({}) and values ({}) differ in length",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("TAC times must be strictly increasing".into()));
        }
        Ok(Tac { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn save_framestack(stack: &FrameStack, path: &Path) -> Result<()> {
    let nt = stack.nt();
    let mut buf = Vec::with_capacity(20 + 8 * nt + 4 * nt * stack.ny * stack.nx);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(stack.nx as u32).to_le_bytes());
    buf.extend_from_slice(&(stack.ny as u32).to_le_bytes());
    buf.extend_from_slice(&(nt as u32).to_le_bytes());
    for &t in &stack.times {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for &v in stack.data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_framestack(path: &Path) -> Result<FrameStack> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };

    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"DPET\"", magic)));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let nx = cur.u32("nx")? as usize;
    let ny = cur.u32("ny")? as usize;
    let nt = cur.u32("nt")? as usize;
    if nx == 0 || ny == 0 || nt == 0 {
        return Err(Error::format(path, format!("zero dimension (nx={nx}, ny={ny}, nt={nt})")));
    }
    let mut times = Vec::with_capacity(nt);
    for _ in 0..nt {
        times.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::format(path, "times not strictly increasing"));
    }
    let n = nt * ny * nx;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after data", bytes.len() - cur.pos)));
    }
    let data = Array3::from_shape_vec((nt, ny, nx), values).expect("shape checked");
    FrameStack::new(nx, ny, times, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated payload at byte {} (wanted {} more)", self.pos, n),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let s = self.take(4).map_err(|_| {
            Error::format(self.path, format!("truncated payload reading field {field}"))
        })?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Write a ROI as a one-frame `.dpet` of 0/1 values plus a `.json` name
/// sidecar with the same basename.
pub fn save_roi(roi: &RoiMask, path: &Path) -> Result<()> {
    let data = Array3::from_shape_fn((1, roi.ny, roi.nx), |(_, y, x)| {
        if roi.mask[(y, x)] {
            1.0
        } else {
            0.0
        }
    });
    let stack = FrameStack::new(roi.nx, roi.ny, vec![0.0], data)?;
    save_framestack(&stack, path)?;
    let sidecar = path.with_extension("json");
    let json = serde_json::json!({ "name": roi.name });
    fs::write(&sidecar, serde_json::to_string(&json).unwrap()).map_err(|e| Error::io(&sidecar, e))
}

pub fn load_roi(path: &Path) -> Result<RoiMask> {
    let stack = load_framestack(path)?;
    if stack.nt() != 1 {
        return Err(Error::format(path, format!("ROI file must have nt=1, got {}", stack.nt())));
    }
    let mut mask = Array2::from_elem((stack.ny, stack.nx), false);
    for ((_, y, x), &v) in stack.data.indexed_iter() {
        if v == 1.0 {
            mask[(y, x)] = true;
        } else if v != 0.0 {
            return Err(Error::format(path, format!("ROI value {v} at ({x},{y}) not in {{0,1}}")));
        }
    }
    let sidecar = path.with_extension("json");
    let name = match fs::read_to_string(&sidecar) {
        Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("name").and_then(|n| n.as_str()).map(str::to_owned))
            .ok_or_else(|| Error::format(&sidecar, "missing \"name\" key"))?,
        Err(_) => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    RoiMask::new(name, mask)
}

/// ROI-mean activity over time.
pub fn extract_roi_tac(stack: &FrameStack, roi: &RoiMask) -> Result<Tac> {
    if roi.nx != stack.nx || roi.ny != stack.ny {
        return Err(Error::Shape(format!(
            "ROI grid ({}x{}) does not match stack ({}x{})",
            roi.nx, roi.ny, stack.nx, stack.ny
        )));
    }
    let n = roi.pixel_count();
    if n == 0 {
        return Err(Error::Argument("ROI mask is empty".into()));
    }
    let values = (0..stack.nt())
        .map(|j| {
            let frame = stack.frame(j);
            let sum: f64 = roi
                .mask
                .indexed_iter()
                .filter(|&(_, &b)| b)
                .map(|((y, x), _)| frame[(y, x)])
                .sum();
            sum / n as f64
        })
        .collect();
    Tac::new(stack.times.clone(), values)
}
