//! Little-endian binary checkpoint container.
//!
//! ```text
//! magic      b"DOTR"
//! version    u32 (= 1)
//! config     n_layers, n_heads, d_model, d_ff, input_vocab, output_vocab, max_len: u32
//!            seed: u64
//! meta       count: u32, then per entry: key_len u32, key utf8, value u64
//! tensors    count: u32, then per tensor: name_len u32, name utf8, rank u32,
//!            dims u32 x rank, payload f32 x prod(dims)
//! ```
//!
//! Model tensors use the names of [`ModelParams::tensors`]; any other named tensor
//! (optimizer moments, for instance) is carried through in [`Checkpoint::extra`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{ModelConfig, ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"DOTR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub meta: BTreeMap<String, u64>,
    pub extra: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
            extra: Vec::new(),
        }
    }
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_string(),
        source,
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn put_tensor<'a>(
    w: &mut impl Write,
    name: &str,
    shape: &[usize],
    values: impl Iterator<Item = &'a f32>,
) -> std::io::Result<()> {
    put_str(w, name)?;
    put_u32(w, shape.len())?;
    for &dim in shape {
        put_u32(w, dim)?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> std::io::Result<()> {
    let cfg = &ckpt.params.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_ff,
        cfg.input_vocab,
        cfg.output_vocab,
        cfg.max_len,
    ] {
        put_u32(w, v)?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;

    put_u32(w, ckpt.meta.len())?;
    for (key, value) in &ckpt.meta {
        put_str(w, key)?;
        w.write_all(&value.to_le_bytes())?;
    }

    let tensors = ckpt.params.tensors();
    put_u32(w, tensors.len() + ckpt.extra.len())?;
    for (name, t) in &tensors {
        put_tensor(w, name, t.shape(), t.iter())?;
    }
    for (name, t) in &ckpt.extra {
        put_tensor(w, name, t.shape(), t.iter())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| ModelError::Format(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let len = self.u32()?;
        if len > 1 << 16 {
            return Err(ModelError::Format(format!("name length {len} is implausible")));
        }
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| ModelError::Format(format!("truncated name: {e}")))?;
        String::from_utf8(buf).map_err(|e| ModelError::Format(format!("name is not utf-8: {e}")))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        d_model: r.u32()?,
        d_ff: r.u32()?,
        input_vocab: r.u32()?,
        output_vocab: r.u32()?,
        max_len: r.u32()?,
        seed: r.u64()?,
    };
    let mut params = ModelParams::<f32>::init(&config)?;

    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let key = r.string()?;
        meta.insert(key, r.u64()?);
    }

    let mut loaded: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    let mut extra = Vec::new();
    let expected: BTreeMap<String, Vec<usize>> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f32::from_le_bytes(r.bytes()?));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| ModelError::Format(format!("{name}: {e}")))?;
        match expected.get(&name) {
            Some(shape) if shape != &dims => {
                return Err(ModelError::Format(format!(
                    "{name}: shape {dims:?} does not match config shape {shape:?}"
                )));
            }
            Some(_) => {
                loaded.insert(name, array);
            }
            None => extra.push((name, array)),
        }
    }
    for (name, mut dst) in params.tensors_mut() {
        let src = loaded
            .remove(&name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        dst.assign(&src);
    }
    Ok(Checkpoint {
        params,
        meta,
        extra,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(io_err(&shown))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ckpt).map_err(io_err(&shown))?;
    w.flush().map_err(io_err(&shown))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(io_err(&shown))?;
    read_checkpoint(BufReader::new(file))
}
