//! Binary model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic       8 bytes  "QMULCKPT"
//! version     u32      = 1
//! layers      u32
//! per layer:
//!   tag       u8       0 = linear, 1 = relu, 2 = softmax
//!   linear:   input u32, output u32, has_bias u8, quant block,
//!             weight f64 * (output * input) row-major, bias f64 * output
//!   relu:     quant block
//! quant block:
//!   present   u8       0 or 1; when 1:
//!   bits u8, target u8 (0 weights, 1 activations, 2 both),
//!   mode u8 (0 fixed, 1 learnable), scale f64
//! ```
//!
//! Trailing bytes after the last layer are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, Model};
use crate::quant::{QuantNode, QuantSpec, QuantTarget, ScaleMode};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QMULCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        match layer.kind() {
            LayerKind::Linear {
                input,
                output,
                has_bias,
            } => {
                out.push(0);
                out.extend_from_slice(&(input as u32).to_le_bytes());
                out.extend_from_slice(&(output as u32).to_le_bytes());
                out.push(u8::from(has_bias));
                encode_quant(&mut out, layer.quant());
                for t in layer.weight().into_iter().chain(layer.bias()) {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            LayerKind::Relu => {
                out.push(1);
                encode_quant(&mut out, layer.quant());
            }
            LayerKind::Softmax => out.push(2),
        }
    }
    out
}

fn encode_quant(out: &mut Vec<u8>, node: Option<&QuantNode>) {
    match node {
        None => out.push(0),
        Some(q) => {
            out.push(1);
            out.push(q.bits());
            out.push(match q.spec().target {
                QuantTarget::Weights => 0,
                QuantTarget::Activations => 1,
                QuantTarget::Both => 2,
            });
            out.push(u8::from(q.is_learnable()));
            out.extend_from_slice(&q.scale().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn quant(&mut self) -> Result<Option<QuantNode>> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let bits = self.u8()?;
                let target = match self.u8()? {
                    0 => QuantTarget::Weights,
                    1 => QuantTarget::Activations,
                    2 => QuantTarget::Both,
                    t => return Err(Error::Checkpoint(format!("unknown quant target {t}"))),
                };
                let learnable = match self.u8()? {
                    0 => false,
                    1 => true,
                    m => return Err(Error::Checkpoint(format!("unknown scale mode {m}"))),
                };
                let scale = self.f64()?;
                let scale_mode = if learnable {
                    ScaleMode::LearnableLsq
                } else {
                    ScaleMode::Fixed(scale)
                };
                let spec = QuantSpec {
                    bits,
                    scale_mode,
                    target,
                };
                Ok(Some(QuantNode::new(spec, scale)?))
            }
            p => Err(Error::Checkpoint(format!("bad quant flag {p}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| bad_magic())? != MAGIC {
        return Err(bad_magic());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let input = r.u32()? as usize;
                let output = r.u32()? as usize;
                let has_bias = r.u8()? != 0;
                let quant = r.quant()?;
                let weight = Tensor::new(vec![output, input], r.reals(output * input)?)?;
                let bias = if has_bias {
                    Some(Tensor::new(vec![output], r.reals(output)?)?)
                } else {
                    None
                };
                let l = Layer::linear(weight, bias)?;
                match quant {
                    Some(q) => l.with_quant(q)?,
                    None => l,
                }
            }
            1 => match r.quant()? {
                Some(q) => Layer::relu().with_quant(q)?,
                None => Layer::relu(),
            },
            2 => Layer::softmax(),
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::new(layers)
}

fn bad_magic() -> Error {
    Error::Checkpoint("not a checkpoint (bad magic bytes)".into())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    fn quantized() -> Model {
        let spec = QuantSpec {
            bits: 4,
            scale_mode: ScaleMode::LearnableLsq,
            target: QuantTarget::Both,
        };
        let mut m = Model::mlp(3, &[5, 4], 2, Some(spec), &mut seeded_rng(2)).unwrap();
        m.calibrate(&Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap())
            .unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        for model in [quantized(), Model::mlp(2, &[3], 2, None, &mut seeded_rng(1)).unwrap()] {
            let bytes = encode(&model);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(encode(&back), bytes);
        }
        let fixed = QuantSpec {
            bits: 2,
            scale_mode: ScaleMode::Fixed(0.25),
            target: QuantTarget::Weights,
        };
        let mut m = Model::mlp(2, &[2], 2, Some(fixed), &mut seeded_rng(0)).unwrap();
        let mut layers = m.layers().to_vec();
        layers.push(Layer::softmax());
        m = Model::new(layers).unwrap();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&quantized());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..4]), Err(Error::Checkpoint(_))));

        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&v2),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));

        for cut in [13, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
