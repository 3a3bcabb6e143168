//! Versioned single-file checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "PSUNETCK" | version u32 | dtype u8
//! meta: u32 length + UTF-8 TOML (backbone config, schedule, training config)
//! step u64
//! params: u32 count, then per param: name, u32 ndim, u64 dims.., values
//! optimizer: u8 flag [, u64 t, f64 beta1, f64 beta2, f64 eps, m values.., v values..]
//! vocabulary: u8 flag [, u32 count, tokens..]
//! codec: u8 flag [, base, up, down matrices as u64 rows, u64 cols, f64 values; u8 fallback]
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes. Values are stored
//! in the checkpoint's dtype.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::text::{EmbeddingTable, Vocabulary};
use crate::train::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 8] = b"PSUNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub train: Option<TrainConfig>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub dtype: DType,
    pub model: Backbone<F>,
    pub optimizer: Option<AdamW<F>>,
    pub vocab: Option<Vocabulary>,
    pub codec: Option<EmbeddingTable>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n > 1 << 26 {
        return Err(ck_err(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ck_err("string is not UTF-8"))
}

fn write_values<W: Write, F: Real>(w: &mut W, a: &Array2<F>) -> Result<()> {
    for &x in a.iter() {
        match F::DTYPE {
            DType::F32 => w.write_f32::<LE>(x.to_f64_lossy() as f32)?,
            DType::F64 => w.write_f64::<LE>(x.to_f64_lossy())?,
        }
    }
    Ok(())
}

fn read_values<R: Read, F: Real>(r: &mut R, dtype: DType, a: &mut Array2<F>) -> Result<()> {
    for x in a.iter_mut() {
        let v = match dtype {
            DType::F32 => r.read_f32::<LE>()? as f64,
            DType::F64 => r.read_f64::<LE>()?,
        };
        *x = F::of(v);
    }
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, a: &Array2<f64>) -> Result<()> {
    w.write_u64::<LE>(a.nrows() as u64)?;
    w.write_u64::<LE>(a.ncols() as u64)?;
    for &x in a.iter() {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let rows = r.read_u64::<LE>()? as usize;
    let cols = r.read_u64::<LE>()? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(ck_err("matrix size is implausible"));
    }
    let mut a = Array2::zeros((rows, cols));
    for x in a.iter_mut() {
        *x = r.read_f64::<LE>()?;
    }
    Ok(a)
}

/// Writes a checkpoint atomically: a sibling temp file is written, synced
/// and renamed over `path`, so a failure never clobbers an older file.
pub fn save<F: Real>(
    path: &Path,
    meta: &CheckpointMeta,
    step: u64,
    model: &Backbone<F>,
    optimizer: Option<&AdamW<F>>,
    vocab: Option<&Vocabulary>,
    codec: Option<&EmbeddingTable>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| ck_err(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_body(&mut w, meta, step, model, optimizer, vocab, codec)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_body<W: Write, F: Real>(
    w: &mut W,
    meta: &CheckpointMeta,
    step: u64,
    model: &Backbone<F>,
    optimizer: Option<&AdamW<F>>,
    vocab: Option<&Vocabulary>,
    codec: Option<&EmbeddingTable>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u8(F::DTYPE.code())?;
    let toml = toml::to_string(meta).map_err(|e| ck_err(e.to_string()))?;
    write_str(w, &toml)?;
    w.write_u64::<LE>(step)?;

    let store = model.params();
    w.write_u32::<LE>(store.len() as u32)?;
    for (_, p) in store.iter() {
        write_str(w, &p.name)?;
        w.write_u32::<LE>(p.shape.len() as u32)?;
        for &d in &p.shape {
            w.write_u64::<LE>(d as u64)?;
        }
        write_values(w, &p.value)?;
    }

    match optimizer {
        Some(o) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(o.t)?;
            w.write_f64::<LE>(o.betas.0)?;
            w.write_f64::<LE>(o.betas.1)?;
            w.write_f64::<LE>(o.eps)?;
            for a in o.m.iter().chain(&o.v) {
                write_values(w, a)?;
            }
        }
        None => w.write_u8(0)?,
    }

    match vocab {
        Some(v) => {
            w.write_u8(1)?;
            w.write_u32::<LE>(v.len() as u32)?;
            for t in v.tokens() {
                write_str(w, t)?;
            }
        }
        None => w.write_u8(0)?,
    }

    match codec {
        Some(c) => {
            w.write_u8(1)?;
            write_matrix(w, &c.base)?;
            write_matrix(w, &c.up)?;
            write_matrix(w, &c.down)?;
            w.write_u8(c.fallback as u8)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

/// Reads and validates a checkpoint. Every stored parameter must exist in a
/// model built from the stored config with exactly the stored shape, and no
/// model parameter may be missing.
pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ck_err(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let dtype = DType::from_code(r.read_u8()?).ok_or_else(|| ck_err("unknown dtype tag"))?;
    let meta: CheckpointMeta =
        toml::from_str(&read_str(&mut r)?).map_err(|e| ck_err(format!("metadata: {e}")))?;
    let step = r.read_u64::<LE>()?;

    let mut model = Backbone::<F>::new(meta.backbone.clone(), 0)?;
    let n = r.read_u32::<LE>()? as usize;
    let mut seen = vec![false; model.params().len()];
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let ndim = r.read_u32::<LE>()? as usize;
        if ndim > 2 {
            return Err(Error::Shape(format!("parameter {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LE>()? as usize);
        }
        let id = model
            .params()
            .id_of(&name)
            .ok_or_else(|| ck_err(format!("unknown parameter {name}")))?;
        let p = model.params_mut().get_mut(id);
        if p.shape != shape {
            return Err(Error::Shape(format!(
                "parameter {name}: checkpoint shape {shape:?}, config expects {:?}",
                p.shape
            )));
        }
        if seen[id.0] {
            return Err(ck_err(format!("parameter {name} stored twice")));
        }
        seen[id.0] = true;
        read_values(&mut r, dtype, &mut p.value)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let (_, p) = model.params().iter().nth(i).expect("index in range");
        return Err(ck_err(format!("parameter {} missing", p.name)));
    }

    let optimizer = if r.read_u8()? == 1 {
        let t = r.read_u64::<LE>()?;
        let betas = (r.read_f64::<LE>()?, r.read_f64::<LE>()?);
        let eps = r.read_f64::<LE>()?;
        let wd = meta.train.map(|c| c.weight_decay).unwrap_or(0.0);
        let mut o = AdamW::new(model.params(), betas, eps, wd);
        o.t = t;
        for a in o.m.iter_mut().chain(o.v.iter_mut()) {
            read_values(&mut r, dtype, a)?;
        }
        Some(o)
    } else {
        None
    };

    let vocab = if r.read_u8()? == 1 {
        let n = r.read_u32::<LE>()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(read_str(&mut r)?);
        }
        Some(Vocabulary::from_tokens(tokens)?)
    } else {
        None
    };

    let codec = if r.read_u8()? == 1 {
        let base = read_matrix(&mut r)?;
        let up = read_matrix(&mut r)?;
        let down = read_matrix(&mut r)?;
        let fallback = r.read_u8()? != 0;
        Some(EmbeddingTable {
            base,
            up,
            down,
            fallback,
        })
    } else {
        None
    };

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ck_err(format!("{} trailing bytes", rest.len())));
    }

    let cfg = &meta.backbone;
    if let Some(v) = &vocab {
        if v.len() != cfg.vocab_size {
            return Err(Error::Shape(format!(
                "stored vocabulary has {} tokens, config says {}",
                v.len(),
                cfg.vocab_size
            )));
        }
    }
    if let Some(c) = &codec {
        let ok = c.vocab_size() == cfg.vocab_size
            && c.word_dim() == cfg.word_dim
            && c.embed_dim() == cfg.embed_dim
            && c.down.dim() == (cfg.embed_dim, cfg.word_dim);
        if !ok {
            return Err(Error::Shape(format!(
                "codec tables ({}x{} base, {}-wide) disagree with the config",
                c.vocab_size(),
                c.word_dim(),
                c.embed_dim()
            )));
        }
    }

    Ok(Checkpoint {
        meta,
        step,
        dtype,
        model,
        optimizer,
        vocab,
        codec,
    })
}
