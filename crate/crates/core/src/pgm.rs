//! Binary 8-bit PGM (P5) images.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

/// Writes raw bytes as a P5 file with maxval 255.
pub fn write_bytes(mut w: impl Write, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != height * width {
        return Err(Error::Shape(format!("{} bytes for a {height}x{width} image", bytes.len())));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    Ok(())
}

/// Quantizes `[0,1]` intensities to 8 bits (values outside are clipped).
pub fn image_to_bytes(image: &Image) -> Vec<u8> {
    image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn mask_to_bytes(mask: &Mask) -> Vec<u8> {
    mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bytes(f, image.height(), image.width(), &image_to_bytes(image))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bytes(f, mask.height(), mask.width(), &mask_to_bytes(mask))
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Data("truncated PGM header".into()));
    }
    Ok(tok)
}

/// Reads a P5 file, returning the raw samples.
pub fn read_bytes(r: impl Read) -> Result<Grid<u8>> {
    let mut r = BufReader::new(r);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Data("not a binary PGM (P5) file".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(&mut r)?.parse().map_err(|_| Error::Data(format!("bad PGM {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
    }
    let mut data = vec![0u8; width * height];
    r.read_exact(&mut data)
        .map_err(|_| Error::Data("truncated PGM pixel data".into()))?;
    Grid::from_vec(height, width, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let g = read_bytes(std::fs::File::open(path)?)?;
    Ok(g.map(|&b| b as f64 / 255.0))
}

/// Any nonzero sample is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let g = read_bytes(std::fs::File::open(path)?)?;
    Ok(g.map(|&b| b != 0))
}
