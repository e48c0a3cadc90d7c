//! File formats: binary PGM/PPM, little-endian PFM and a raw f32 volume dump.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(tok)
}

fn parse_usize(tok: &str) -> Result<usize> {
    tok.parse().map_err(|_| Error::Format(format!("bad header field {tok:?}")))
}

/// Writes an 8-bit binary (P5) PGM.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != rows * cols {
        return Err(Error::Shape(format!("{} pixels for {rows}x{cols}", pixels.len())));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Reads an 8-bit binary PGM, returning `(rows, cols, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if read_token(&mut r)? != "P5" {
        return Err(Error::Format(format!("{}: not a binary PGM", path.display())));
    }
    let cols = parse_usize(&read_token(&mut r)?)?;
    let rows = parse_usize(&read_token(&mut r)?)?;
    if read_token(&mut r)? != "255" {
        return Err(Error::Format("only 8-bit PGM is supported".into()));
    }
    let mut pixels = vec![0u8; rows * cols];
    r.read_exact(&mut pixels)?;
    Ok((rows, cols, pixels))
}

/// Writes an RGB binary (P6) PPM.
pub fn write_ppm(path: &Path, rows: usize, cols: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != rows * cols {
        return Err(Error::Shape(format!("{} pixels for {rows}x{cols}", rgb.len())));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for p in rgb {
        out.extend_from_slice(p);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a grayscale PFM (`Pf`, scale -1.0 = little-endian). Rows are
/// stored bottom to top, as the format prescribes.
pub fn write_pfm(path: &Path, raster: &Raster) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", raster.cols, raster.rows).into_bytes();
    out.reserve(raster.data.len() * 4);
    for row in (0..raster.rows).rev() {
        for v in &raster.data[row * raster.cols..(row + 1) * raster.cols] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Raster> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if read_token(&mut r)? != "Pf" {
        return Err(Error::Format(format!("{}: not a grayscale PFM", path.display())));
    }
    let cols = parse_usize(&read_token(&mut r)?)?;
    let rows = parse_usize(&read_token(&mut r)?)?;
    let scale: f32 = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0f32; rows * cols];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (i / cols, i % cols);
        data[(rows - 1 - row_from_bottom) * cols + col] = v;
    }
    Raster::from_vec(rows, cols, data)
}

const VOLUME_MAGIC: &[u8; 8] = b"OMVSVOL1";

/// Dumps an n-dimensional f32 array: magic, u32 rank, u64 extents, then
/// little-endian values.
pub fn write_volume(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(VOLUME_MAGIC)?;
    f.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::Format(format!("{}: not a volume dump", path.display())));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(off..off + 8)
            .ok_or_else(|| Error::Format("truncated volume header".into()))?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    let body = &bytes[off..];
    if body.len() != n * 4 {
        return Err(Error::Format("volume body size mismatch".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

/// Blue-to-red color ramp for values in [0, 1].
pub fn blue_to_red(t: f32) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    // blue -> cyan -> green -> yellow -> red
    let (r, g, b) = match t {
        t if t < 0.25 => (0.0, 4.0 * t, 1.0),
        t if t < 0.5 => (0.0, 1.0, 1.0 - 4.0 * (t - 0.25)),
        t if t < 0.75 => (4.0 * (t - 0.5), 1.0, 0.0),
        t => (1.0, 1.0 - 4.0 * (t - 0.75), 0.0),
    };
    [(r * 255.0f32).round() as u8, (g * 255.0f32).round() as u8, (b * 255.0f32).round() as u8]
}
