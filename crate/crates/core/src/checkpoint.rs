//! The SLNK container: an ordered list of named f32 tensors.
//!
//! ```text
//! "SLNK" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: utf-8 | rank: u32 | dims: rank × u32 | data: f32 × prod(dims) )
//! ```
//!
//! All integers and floats are little-endian. Checkpoints, exported
//! sub-networks and feature caches all use this layout; non-tensor values
//! are stored under `meta/` names (see [`Container::put_bytes`] and
//! [`Container::put_u64`]).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLNK";
pub const VERSION: u32 = 1;

pub const SPEC_KEY: &str = "meta/spec";
pub const CONFIG_KEY: &str = "meta/config";
pub const STEP_KEY: &str = "meta/step";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    /// Appends or replaces `name`.
    pub fn put(&mut self, name: &str, tensor: Tensor<f32>) {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name.to_string(), t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("container has no entry '{name}'")))
    }

    /// Stores bytes one per float. Empty payloads are stored as a single
    /// sentinel value of -1.
    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) {
        let data: Vec<f32> = if bytes.is_empty() {
            vec![-1.0]
        } else {
            bytes.iter().map(|&b| b as f32).collect()
        };
        let n = data.len();
        self.put(name, Tensor::new(&[n], data).expect("non-empty"));
    }

    pub fn get_bytes(&self, name: &str) -> Result<Option<Vec<u8>>> {
        let Some(t) = self.get(name) else { return Ok(None) };
        if t.data() == [-1.0] {
            return Ok(Some(Vec::new()));
        }
        t.data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("'{name}' is not a byte entry")))
                }
            })
            .collect::<Result<Vec<u8>>>()
            .map(Some)
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.put_bytes(name, text.as_bytes());
    }

    pub fn get_text(&self, name: &str) -> Result<Option<String>> {
        match self.get_bytes(name)? {
            Some(b) => String::from_utf8(b)
                .map(Some)
                .map_err(|_| Error::Format(format!("'{name}' is not valid UTF-8"))),
            None => Ok(None),
        }
    }

    /// Stores an integer as four exact 16-bit chunks, low first.
    pub fn put_u64(&mut self, name: &str, v: u64) {
        let chunks: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
        self.put(name, Tensor::new(&[4], chunks).expect("four chunks"));
    }

    pub fn get_u64(&self, name: &str) -> Result<Option<u64>> {
        let Some(t) = self.get(name) else { return Ok(None) };
        if t.len() != 4 || t.data().iter().any(|&c| !(0.0..65536.0).contains(&c) || c.fract() != 0.0) {
            return Err(Error::Format(format!("'{name}' is not an integer entry")));
        }
        Ok(Some(
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &c)| (c as u64) << (16 * i))
                .sum(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a SLNK container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("entry '{name}' overruns the file")))?;
            let data: Vec<f32> = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("entry '{name}': {e}")))?;
            if c.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate entry '{name}'")));
            }
            c.entries.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Adds the spec and every stored tensor (weights and all per-width norm
/// sets) of `model` to `c`.
pub fn put_model(c: &mut Container, model: &Model<f32>) {
    let spec = serde_json::to_string(model.spec()).expect("spec serializes");
    c.put_text(SPEC_KEY, &spec);
    for (_, name, t) in model.store().iter() {
        c.put(name, t.clone());
    }
}

/// Rebuilds the model described by `meta/spec` and loads its tensors.
pub fn take_model(c: &Container) -> Result<Model<f32>> {
    let text = c
        .get_text(SPEC_KEY)?
        .ok_or_else(|| Error::Format(format!("container has no '{SPEC_KEY}' entry")))?;
    let spec: ModelSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("invalid model spec: {e}")))?;
    let mut model = Model::<f32>::build(&spec, 0)?;
    let mut store = ParamStore::<f32>::new();
    for (_, name, _) in model.store().iter() {
        store.add_buffer(name, c.require(name)?.clone())?;
    }
    model.load_store(store)?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut c = Container::new();
    put_model(&mut c, model);
    c.write(path)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    take_model(&Container::read(path)?)
}
