//! Binary Netpbm reader/writer (P5 grayscale, P6 color), maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (PGM) or 3 (PPM) interleaved samples per pixel.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self { width, height, channels: 1, pixels }
    }

    /// Convert to a [C,H,W] tensor with values in [0,1].
    pub fn to_tensor(&self) -> Result<Tensor> {
        let hw = self.width * self.height;
        let mut data = vec![0.0; self.channels * hw];
        for p in 0..hw {
            for c in 0..self.channels {
                data[c * hw + p] = self.pixels[p * self.channels + c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], data)
    }

    /// Quantize a [C,H,W] tensor in [0,1] to 8-bit samples.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 && c != 3 {
            return Err(Error::Format(format!("pnm: {c} channels unsupported")));
        }
        let hw = h * w;
        let mut pixels = vec![0u8; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                let v = (t.data()[ch * hw + p] * 255.0).round().clamp(0.0, 255.0);
                pixels[p * c + ch] = v as u8;
            }
        }
        Ok(Self { width: w, height: h, channels: c, pixels })
    }
}

fn read_token(r: &mut impl Read) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("pnm: unexpected end of header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(c as char),
        }
    }
}

pub fn read(path: &Path) -> Result<PnmImage> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("pnm: unsupported magic {other:?}"))),
    };
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::Format(format!("pnm: bad header token {tok:?}")))
    };
    let width = parse(read_token(&mut r)?)?;
    let height = parse(read_token(&mut r)?)?;
    let maxval = parse(read_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("pnm: zero-sized image".into()));
    }
    let mut pixels = vec![0u8; width * height * channels];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::Format("pnm: truncated pixel data".into()))?;
    Ok(PnmImage { width, height, channels, pixels })
}

pub fn write(path: &Path, img: &PnmImage) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("pnm: {c} channels unsupported"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}
