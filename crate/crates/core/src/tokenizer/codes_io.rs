//! Code pyramid file format.
//!
//! Layout: magic `OCSC`, version u32 LE, d u32 LE, K u32 LE, then per
//! scale: h u32 LE, w u32 LE, packed sign bitmap — one bit per entry in
//! [d, h, w] row-major order, LSB first within each byte, 1 = +1/√d, each
//! scale padded to a whole byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::MultiScaleCode;

const MAGIC: &[u8; 4] = b"OCSC";
const VERSION: u32 = 1;

pub fn write_codes(path: &Path, codes: &MultiScaleCode) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codes_to(&mut w, codes)
}

pub fn write_codes_to<W: Write>(w: &mut W, codes: &MultiScaleCode) -> Result<()> {
    if !codes.alphabet_valid() {
        return Err(Error::InvalidArgument {
            context: "write_codes",
            message: "codes must be in the ±1/√d alphabet".into(),
        });
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(codes.dim as u32).to_le_bytes())?;
    w.write_all(&(codes.scales.len() as u32).to_le_bytes())?;
    for scale in &codes.scales {
        let (h, wd) = (scale.shape()[1], scale.shape()[2]);
        w.write_all(&(h as u32).to_le_bytes())?;
        w.write_all(&(wd as u32).to_le_bytes())?;
        let mut bits = vec![0u8; scale.len().div_ceil(8)];
        for (i, &v) in scale.data().iter().enumerate() {
            if v > 0.0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
    }
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<MultiScaleCode> {
    let mut r = BufReader::new(File::open(path)?);
    read_codes_from(&mut r)
}

pub fn read_codes_from<R: Read>(r: &mut R) -> Result<MultiScaleCode> {
    let ctx = "read_codes";
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format { context: ctx, message: format!("bad magic {magic:?}") });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format { context: ctx, message: format!("unsupported version {version}") });
    }
    let dim = read_u32(r)? as usize;
    let num_scales = read_u32(r)? as usize;
    if dim == 0 || num_scales == 0 {
        return Err(Error::Format { context: ctx, message: "empty code pyramid".into() });
    }
    let unit = 1.0 / (dim as f64).sqrt();
    let mut scales = Vec::with_capacity(num_scales);
    for _ in 0..num_scales {
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        if h == 0 || w == 0 {
            return Err(Error::Format { context: ctx, message: "zero-sized scale".into() });
        }
        let n = dim * h * w;
        let mut bits = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bits)?;
        let data = (0..n)
            .map(|i| if bits[i / 8] >> (i % 8) & 1 == 1 { unit } else { -unit })
            .collect();
        scales.push(Tensor::new(vec![dim, h, w], data));
    }
    Ok(MultiScaleCode { dim, scales })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tokenizer::{encode_multiscale, Quantizer, ScaleSchedule};

    #[test]
    fn round_trip_preserves_every_sign() {
        let mut rng = seeded(12);
        let f = Tensor::randn(vec![8, 6, 6], 1.0, &mut rng);
        let schedule = ScaleSchedule::builtin(1.0, 4).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Bsq).unwrap();
        let mut buf = Vec::new();
        write_codes_to(&mut buf, &codes).unwrap();
        let back = read_codes_from(&mut &buf[..]).unwrap();
        assert_eq!(back, codes);
    }

    #[test]
    fn refuses_identity_quantizer_output() {
        let mut rng = seeded(13);
        let f = Tensor::randn(vec![4, 4, 4], 1.0, &mut rng);
        let schedule = ScaleSchedule::custom(1.0, vec![(4, 4)]).unwrap();
        let codes = encode_multiscale(&f, &schedule, Quantizer::Identity).unwrap();
        let mut buf = Vec::new();
        assert!(write_codes_to(&mut buf, &codes).is_err());
    }

    #[test]
    fn rejects_corrupt_header() {
        assert!(read_codes_from(&mut &b"OCSX\x01\x00\x00\x00"[..]).is_err());
    }
}
