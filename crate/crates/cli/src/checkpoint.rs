//! Binary checkpoint format. Everything is little-endian and written in one
//! fixed order, so saving the same training state twice produces the same
//! bytes: byte equality of two checkpoints certifies two runs reached an
//! identical model, optimizer and step.
//!
//! Layout:
//! - magic `DOCINSCK`, format version (u32), dtype tag (u8), step (u64)
//! - run config text (u32 length + UTF-8 bytes)
//! - parameter count (u32), then per tensor: name (u16 length + bytes),
//!   rank (u8), dims (u64 each), row-major data
//! - per tensor, aligned by index: the optimizer's second-moment slot
//!   (tag 0 = dense + data, tag 1 = factored + row covers + column covers)
//!   and the momentum buffer (u64 length + data)

use std::fs;
use std::path::Path;

use docins_core::numerics::{Dtype, ParamId, Parameters, Scalar, Tensor};
use docins_core::optim::{SecondMoment, Sm3};
use docins_core::{Error, Result};

const MAGIC: &[u8; 8] = b"DOCINSCK";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct LoadedCheckpoint<S: Scalar> {
    pub config_text: String,
    pub step: u64,
    pub params: Parameters<S>,
    pub slots: Vec<SecondMoment<S>>,
    pub momenta: Vec<Vec<S>>,
}

pub fn save<S: Scalar>(
    path: &Path,
    config_text: &str,
    step: u64,
    params: &Parameters<S>,
    optimizer: &Sm3<S>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION);
    out.push(S::DTYPE.tag());
    write_u64(&mut out, step);
    let config_bytes = config_text.as_bytes();
    write_u32(&mut out, config_bytes.len() as u32);
    out.extend_from_slice(config_bytes);
    write_u32(&mut out, params.len() as u32);
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        write_u16(&mut out, name_bytes.len() as u16);
        out.extend_from_slice(name_bytes);
        out.push(tensor.rank() as u8);
        for &dim in tensor.shape() {
            write_u64(&mut out, dim as u64);
        }
        for &value in tensor.data() {
            value.write_le(&mut out);
        }
    }
    for (slot, momentum) in optimizer.slots().iter().zip(optimizer.momenta()) {
        match slot {
            SecondMoment::Dense(data) => {
                out.push(0);
                write_scalars(&mut out, data);
            }
            SecondMoment::Factored { rows, cols } => {
                out.push(1);
                write_scalars(&mut out, rows);
                write_scalars(&mut out, cols);
            }
        }
        write_scalars(&mut out, momentum);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads just enough of the header to learn the element type, so callers can
/// pick which monomorphization of [`load`] to run.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = fs::read(path)?;
    let mut reader = Reader::new(&bytes);
    reader.expect_header()?;
    reader.dtype()
}

pub fn load<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let bytes = fs::read(path)?;
    let mut reader = Reader::new(&bytes);
    reader.expect_header()?;
    let dtype = reader.dtype()?;
    if dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} weights, expected {}",
            dtype.name(),
            S::DTYPE.name()
        )));
    }
    let step = reader.u64()?;
    let config_len = reader.u32()? as usize;
    let config_text = String::from_utf8(reader.bytes(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let num_params = reader.u32()? as usize;
    let mut params = Parameters::new();
    for _ in 0..num_params {
        let name_len = reader.u16()? as usize;
        let name = String::from_utf8(reader.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = reader.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = reader.scalars::<S>(len)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        params.push(name, tensor);
    }
    let mut slots = Vec::with_capacity(num_params);
    let mut momenta = Vec::with_capacity(num_params);
    for i in 0..num_params {
        let tensor = params.get(ParamId(i));
        let slot = match reader.u8()? {
            0 => SecondMoment::Dense(reader.scalar_vec()?),
            1 => {
                let rows = reader.scalar_vec()?;
                let cols = reader.scalar_vec()?;
                SecondMoment::Factored { rows, cols }
            }
            tag => {
                return Err(Error::Checkpoint(format!(
                    "unknown accumulator tag {tag} for {:?}",
                    params.name(ParamId(i))
                )))
            }
        };
        let momentum: Vec<S> = reader.scalar_vec()?;
        if momentum.len() != tensor.len() {
            return Err(Error::Checkpoint(format!(
                "momentum length {} does not match tensor {:?} of {} values",
                momentum.len(),
                params.name(ParamId(i)),
                tensor.len()
            )));
        }
        slots.push(slot);
        momenta.push(momentum);
    }
    reader.expect_end()?;
    Ok(LoadedCheckpoint {
        config_text,
        step,
        params,
        slots,
        momenta,
    })
}

fn write_u16(out: &mut Vec<u8>, value: u16) {
    out.extend_from_slice(&value.to_le_bytes());
}

fn write_u32(out: &mut Vec<u8>, value: u32) {
    out.extend_from_slice(&value.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, value: u64) {
    out.extend_from_slice(&value.to_le_bytes());
}

fn write_scalars<S: Scalar>(out: &mut Vec<u8>, values: &[S]) {
    write_u64(out, values.len() as u64);
    for &value in values {
        value.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn scalars<S: Scalar>(&mut self, count: usize) -> Result<Vec<S>> {
        let width = S::DTYPE.byte_width();
        let raw = self.bytes(count * width)?;
        Ok(raw.chunks_exact(width).map(S::read_le).collect())
    }

    fn scalar_vec<S: Scalar>(&mut self) -> Result<Vec<S>> {
        let len = self.u64()? as usize;
        self.scalars(len)
    }

    fn expect_header(&mut self) -> Result<()> {
        let magic = self.bytes(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        Ok(())
    }

    fn dtype(&mut self) -> Result<Dtype> {
        let tag = self.u8()?;
        Dtype::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))
    }

    fn expect_end(&mut self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use docins_core::model::{ModelConfig, Network};
    use docins_core::optim::Sm3Options;

    fn micro_net() -> Network {
        Network::new(ModelConfig {
            vocab_size: 13,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            num_layers: 1,
            max_sentences: 4,
            use_sentence_positions: true,
            eps: 1e-6,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = micro_net();
        let params: Parameters<f64> = net.init_params(3);
        let optimizer = Sm3::new(&params, Sm3Options::default());
        let first = dir.path().join("a.ckpt");
        save(&first, "d_model = 8\n", 42, &params, &optimizer).unwrap();

        let loaded = load::<f64>(&first).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_text, "d_model = 8\n");
        net.validate_params(&loaded.params).unwrap();
        for i in 0..params.len() {
            let id = ParamId(i);
            assert_eq!(params.get(id).data(), loaded.params.get(id).data());
        }

        let reopt = Sm3::from_state(
            &loaded.params,
            loaded.slots,
            loaded.momenta,
            Sm3Options::default(),
        )
        .unwrap();
        let second = dir.path().join("b.ckpt");
        save(&second, &loaded.config_text, loaded.step, &loaded.params, &reopt).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn f32_checkpoints_round_trip_and_refuse_f64_loads() {
        let dir = tempfile::tempdir().unwrap();
        let net = micro_net();
        let params: Parameters<f32> = net.init_params(5);
        let optimizer = Sm3::new(&params, Sm3Options::default());
        let path = dir.path().join("half.ckpt");
        save(&path, "dtype = f32\n", 7, &params, &optimizer).unwrap();

        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F32);
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.step, 7);
        let err = load::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("f32"), "{err}");
    }

    #[test]
    fn corrupt_files_are_reported_not_panicked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load::<f64>(&path).unwrap_err().to_string().contains("not a checkpoint"));

        let net = micro_net();
        let params: Parameters<f64> = net.init_params(1);
        let optimizer = Sm3::new(&params, Sm3Options::default());
        save(&path, "", 1, &params, &optimizer).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        fs::write(&path, &bytes).unwrap();
        assert!(load::<f64>(&path).unwrap_err().to_string().contains("truncated"));

        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 9]);
        bytes.extend_from_slice(&[1u8; 4]);
        fs::write(&path, &bytes).unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
