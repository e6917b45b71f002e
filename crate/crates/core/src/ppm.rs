//! Binary PPM (P6) image I/O.
//!
//! Images are [3, H, W] f64 tensors with values in [0, 1]; files are 8-bit
//! with maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm_to(&mut w, image)
}

pub fn write_ppm_to<W: Write>(w: &mut W, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "write_ppm",
            expected: vec![3, 0, 0],
            got: image.shape().to_vec(),
        });
    }
    let (h, wd) = (image.shape()[1], image.shape()[2]);
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let mut row = Vec::with_capacity(wd * 3);
    for y in 0..h {
        row.clear();
        for x in 0..wd {
            for c in 0..3 {
                let v = image.data()[c * plane + y * wd + x];
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_ppm_from(&mut r)
}

pub fn read_ppm_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let ctx = "read_ppm";
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format { context: ctx, message: "not a P6 file".into() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // skip whitespace and `#` comments between header fields
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { context: ctx, message: "truncated header".into() });
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| Error::Format { context: ctx, message: format!("bad header: {e}") })?;
    }
    let [wd, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format { context: ctx, message: format!("unsupported maxval {maxval}") });
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = wd * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format { context: ctx, message: "truncated pixel data".into() });
    }
    let plane = h * wd;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..wd {
            for c in 0..3 {
                let v = bytes[pos + (y * wd + x) * 3 + c];
                data[c * plane + y * wd + x] = v as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, wd], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn round_trip_quantizes_to_8_bit() {
        let mut rng = seeded(2);
        let img = Tensor::randn(vec![3, 5, 7], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let mut buf = Vec::new();
        write_ppm_to(&mut buf, &img).unwrap();
        let back = read_ppm_from(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        // a second pass is lossless: already quantized
        let mut buf2 = Vec::new();
        write_ppm_to(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_non_p6() {
        assert!(read_ppm_from(&mut &b"P3\n1 1\n255\n0 0 0"[..]).is_err());
    }
}
