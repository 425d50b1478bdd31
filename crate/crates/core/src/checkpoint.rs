//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   e.g. "IM2WCODC" or "IM2WLMDL"
//! version      u32       FORMAT_VERSION
//! config_len   u32       followed by config_len bytes of UTF-8 JSON
//! n_sections   u32
//! per section: name_len u32, name bytes, ndim u32, dims u32 * ndim,
//!              product(dims) f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const CODEC_MAGIC: &[u8; 8] = b"IM2WCODC";
pub const LM_MAGIC: &[u8; 8] = b"IM2WLMDL";

pub struct Checkpoint {
    pub config_json: String,
    pub sections: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Tensor<f32>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn sections_as<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.sections.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }
}

pub fn encode<'a, T: Scalar + 'a>(
    magic: &[u8; 8],
    config_json: &str,
    sections: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    let sections: Vec<_> = sections.into_iter().collect();
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn write<'a, T: Scalar + 'a>(
    path: &Path,
    magic: &[u8; 8],
    config_json: &str,
    sections: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let bytes = encode(magic, config_json, sections);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], magic: &[u8; 8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    let m = r.take(8)?;
    if m != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let clen = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(clen)?)
        .map_err(|e| Error::format(path, format!("config is not UTF-8: {e}")))?
        .to_string();
    let n = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::format(path, format!("section name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("section {name} holds non-finite values")));
        }
        sections.push((name, Tensor::new(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last section"));
    }
    Ok(Checkpoint { config_json, sections })
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode(&bytes, magic, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.5]);
        let b = Tensor::<f64>::from_f64(&[1], &[-0.25]);
        let bytes = encode(LM_MAGIC, "{\"x\":1}", [("a", &a), ("b", &b)]);
        let p = Path::new("mem");
        let ck = decode(&bytes, LM_MAGIC, p).unwrap();
        assert_eq!(ck.config_json, "{\"x\":1}");
        assert_eq!(ck.section("a").unwrap().cast::<f64>(), a);
        assert_eq!(ck.section("b").unwrap().data(), &[-0.25f32]);

        assert!(decode(&bytes, CODEC_MAGIC, p).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], LM_MAGIC, p).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(decode(&bad_version, LM_MAGIC, p).is_err());
    }
}
