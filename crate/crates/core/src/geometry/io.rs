use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{MmptError, Result};

const MAGIC: &[u8; 4] = b"MMPC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` triple per line.
    Text,
    /// `MMPC`, u32 count, little-endian f32 triples.
    Binary,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mmpc" | "bin") => CloudFormat::Binary,
            _ => CloudFormat::Text,
        }
    }
}

pub fn write_text<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| MmptError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let [x, y, z] = vals[..] else {
            return Err(MmptError::Parse(format!(
                "line {}: expected 3 coordinates, found {}",
                lineno + 1,
                vals.len()
            )));
        };
        pts.push([x, y, z]);
    }
    PointCloud::new(pts)
}

pub fn write_binary<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    for p in cloud.points() {
        for &c in p {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MmptError::Parse(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut pts: Vec<Point> = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let mut p = [0.0; 3];
        for c in &mut p {
            r.read_exact(&mut b4)?;
            *c = f32::from_le_bytes(b4) as f64;
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        CloudFormat::Text => write_text(&mut w, cloud)?,
        CloudFormat::Binary => write_binary(&mut w, cloud)?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let f = File::open(path)?;
    match CloudFormat::from_path(path) {
        CloudFormat::Text => read_text(BufReader::new(f)),
        CloudFormat::Binary => read_binary(&mut BufReader::new(f)),
    }
}
