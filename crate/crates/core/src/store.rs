//! Binary file formats. All multi-byte values are little-endian; tensors are
//! row-major 32-bit floats.
//!
//! Model file (PFXM): magic, format version, the five ModelConfig fields as
//! 32-bit integers, then named parameter tensors.
//!
//! Bank file (PFXB): magic, version, aspect name, N, M, D, attribute names,
//! provenance, then the dense N x M x D table.
//!
//! Encoder file (PFXE): like PFXM plus the prefix length the head targets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bank::{AspectSchema, BankProvenance, PrefixBank};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig, ParamSet, TransformerLm};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

fn write_magic(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_version(r: &mut impl Read) -> Result<()> {
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("format version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

pub fn write_tensor_f32(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    write_u32(w, t.rows() as u32)?;
    write_u32(w, t.cols() as u32)?;
    for v in t.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_f32(r: &mut impl Read) -> Result<Tensor<f32>> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.saturating_mul(cols) > (1 << 28) {
        return Err(Error::Format(format!("tensor {rows}x{cols} implausibly large")));
    }
    let mut data = vec![0f32; rows * cols];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

pub fn write_param_set(w: &mut impl Write, params: &ParamSet<f32>) -> Result<()> {
    write_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_str(w, name)?;
        write_tensor_f32(w, t)?;
    }
    Ok(())
}

pub fn read_param_set(r: &mut impl Read) -> Result<ParamSet<f32>> {
    let count = read_u32(r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let t = read_tensor_f32(r)?;
        if params.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        params.push(&name, t);
    }
    Ok(params)
}

fn write_config(w: &mut impl Write, c: &ModelConfig) -> Result<()> {
    write_u32(w, c.num_layers as u32)?;
    write_u32(w, c.hidden_size as u32)?;
    write_u32(w, c.num_heads as u32)?;
    write_u32(w, c.vocab_size as u32)?;
    write_u32(w, c.max_positions as u32)?;
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<ModelConfig> {
    let c = ModelConfig {
        num_layers: read_u32(r)? as usize,
        hidden_size: read_u32(r)? as usize,
        num_heads: read_u32(r)? as usize,
        vocab_size: read_u32(r)? as usize,
        max_positions: read_u32(r)? as usize,
    };
    c.validate()?;
    Ok(c)
}

pub fn save_model(path: impl AsRef<Path>, model: &TransformerLm<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, b"PFXM")?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_config(&mut w, &model.config)?;
    write_param_set(&mut w, &model.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TransformerLm<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, b"PFXM")?;
    expect_version(&mut r)?;
    let config = read_config(&mut r)?;
    let params = read_param_set(&mut r)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let model = TransformerLm { config, params };
    if model.param_count() != model.config.param_count() {
        return Err(Error::Format(format!(
            "model carries {} params, config implies {}",
            model.param_count(),
            model.config.param_count()
        )));
    }
    Ok(model)
}

pub fn save_encoder(path: impl AsRef<Path>, enc: &Encoder<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, b"PFXE")?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_config(&mut w, &enc.config)?;
    write_u32(&mut w, enc.prefix_len as u32)?;
    write_param_set(&mut w, &enc.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<Encoder<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, b"PFXE")?;
    expect_version(&mut r)?;
    let config = read_config(&mut r)?;
    let prefix_len = read_u32(&mut r)? as usize;
    let params = read_param_set(&mut r)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("encoder parameters".into()));
    }
    Ok(Encoder { config, prefix_len, params })
}

pub fn save_bank(path: impl AsRef<Path>, bank: &PrefixBank<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, b"PFXB")?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_str(&mut w, &bank.schema.aspect_name)?;
    write_u32(&mut w, bank.n() as u32)?;
    write_u32(&mut w, bank.prefix_len as u32)?;
    write_u32(&mut w, bank.activation_dim as u32)?;
    for a in &bank.schema.attributes {
        write_str(&mut w, a)?;
    }
    w.write_all(&[u8::from(bank.trained)])?;
    write_str(&mut w, &bank.provenance.regime)?;
    write_u64(&mut w, bank.provenance.seed)?;
    write_str(&mut w, &bank.provenance.config_hash)?;
    for i in 0..bank.n() {
        for v in bank.row(i).as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrefixBank<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, b"PFXB")?;
    expect_version(&mut r)?;
    let aspect_name = read_str(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut attributes = Vec::with_capacity(n);
    for _ in 0..n {
        attributes.push(read_str(&mut r)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let provenance = BankProvenance {
        regime: read_str(&mut r)?,
        seed: read_u64(&mut r)?,
        config_hash: read_str(&mut r)?,
    };
    let mut rows = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        let mut data = vec![0f32; m * d];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        rows.push(Tensor::from_vec(m, d, data));
    }
    let schema = AspectSchema::new(aspect_name, attributes)?;
    PrefixBank::from_rows(schema, rows, flag[0] != 0, provenance)
}

/// Human-readable header summary for `prefixctl bank inspect`.
pub fn describe_bank(bank: &PrefixBank<f32>) -> String {
    let mut s = String::new();
    s.push_str(&format!("aspect        {}\n", bank.schema.aspect_name));
    s.push_str(&format!("attributes    {}\n", bank.schema.attributes.join(", ")));
    s.push_str(&format!("prefixes (N)  {}\n", bank.n()));
    s.push_str(&format!("length (M)    {}\n", bank.prefix_len));
    s.push_str(&format!("act dim (D)   {}\n", bank.activation_dim));
    s.push_str(&format!("trained       {}\n", bank.trained));
    s.push_str(&format!("regime        {}\n", bank.provenance.regime));
    s.push_str(&format!("seed          {}\n", bank.provenance.seed));
    s.push_str(&format!("config hash   {}\n", bank.provenance.config_hash));
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256_hex(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}
