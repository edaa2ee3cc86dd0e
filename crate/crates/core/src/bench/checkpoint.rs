//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "STTT1"
//! u32 config length, config text (see `render_run_config`)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank × u64 extents,
//!             extents-product × f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::{parse_run_config, render_run_config};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::RunConfig;

pub const MAGIC: &[u8; 5] = b"STTT1";

pub fn write_checkpoint<F: Scalar, W: Write>(mut out: W, rc: &RunConfig, params: &ModelParams<Tensor<F>>) -> Result<()> {
    out.write_all(MAGIC)?;
    let text = render_run_config(rc);
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    let named = params.named();
    out.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&x.to_f64().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v).map_err(|_| bad("truncated"))?;
    Ok(v)
}

/// Reads a checkpoint and checks every tensor against the shapes the
/// stored configuration implies.
pub fn read_checkpoint<F: Scalar, R: Read>(mut input: R) -> Result<(RunConfig, ModelParams<Tensor<F>>)> {
    if read_bytes(&mut input, 5)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = read_u32(&mut input)? as usize;
    let text = String::from_utf8(read_bytes(&mut input, len)?).map_err(|_| bad("config is not UTF-8"))?;
    let rc = parse_run_config(&text)?;
    let model = rc.effective_model();
    let template = ModelParams::<Tensor<F>>::init(&model, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let expected = template.named();
    let count = read_u32(&mut input)? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors stored, configuration has {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want) in &expected {
        let nlen = read_u32(&mut input)? as usize;
        let name = String::from_utf8(read_bytes(&mut input, nlen)?).map_err(|_| bad("name is not UTF-8"))?;
        if &name != want_name {
            return Err(bad(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let rank = read_u32(&mut input)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u64(&mut input).map(|e| e as usize)).collect::<Result<_>>()?;
        if shape != want.shape() {
            return Err(bad(format!("`{name}` has shape {shape:?}, configuration implies {:?}", want.shape())));
        }
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut input, n * 8)?;
        let data: Vec<F> = raw.chunks_exact(8).map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes"));
    }
    let mut i = 0;
    let params = template.map(|_, _| {
        i += 1;
        tensors[i - 1].clone()
    });
    Ok((rc, params))
}

pub fn save_checkpoint<F: Scalar>(path: &Path, rc: &RunConfig, params: &ModelParams<Tensor<F>>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, rc, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(RunConfig, ModelParams<Tensor<F>>)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HybridConfig, StackLayout};
    use rand::SeedableRng;

    fn small() -> (RunConfig, ModelParams<Tensor<f64>>) {
        let mut rc = RunConfig::desk();
        rc.model = HybridConfig::tiny(64, 8, 2, 4);
        rc.model.layout = StackLayout::parse("ttt,anchor", 2).unwrap();
        let p = ModelParams::init(&rc.model, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        (rc, p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (rc, p) = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &rc, &p).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let (rc2, q) = read_checkpoint::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(q, p);
        assert_eq!(rc2.model, rc.model);
        let p32 = p.cast::<f32>();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &rc, &p32).unwrap();
        assert_eq!(read_checkpoint::<f32, _>(buf.as_slice()).unwrap().1, p32);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (rc, p) = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &rc, &p).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint::<f64, _>(bad_magic.as_slice()).is_err());
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint::<f64, _>(trailing.as_slice()).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (rc, p) = small();
        let mut other = rc.clone();
        other.model.d_ff = 32;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &other, &p).unwrap();
        match read_checkpoint::<f64, _>(buf.as_slice()) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("shape"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
