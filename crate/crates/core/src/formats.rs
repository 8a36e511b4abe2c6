//! On-disk formats.
//!
//! | file        | layout                                                               |
//! |-------------|----------------------------------------------------------------------|
//! | vectors     | `RVQV`, u32 version, u64 count, u32 dim, `count*dim` f32             |
//! | codebooks   | `RVQC`, u32 version, u8 scheme, u8 metric, u32 N, K, d, q, layers    |
//! | token files | one JSON object per line: id, token_rate_hz, layers, codebook_size, codes |
//!
//! All integers and floats are little-endian; matrices are row-major. Each
//! codebook layer stores `proj_in` (d x q), the entries (K x q) and
//! `proj_out` (q x d), the projections only for the projected scheme.
//! Values are held as f64 in memory and stored as f32, so a loaded file
//! saves back to identical bytes.
//!
//! Writes go to a temporary file in the destination directory that is then
//! renamed over the target.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rvq::{RvqQuantizer, Scheme, TokenStream};
use crate::vq::{Codebook, Metric, ProjectionPair};

pub const VECTOR_MAGIC: &[u8; 4] = b"RVQV";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"RVQC";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "{} truncated: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{}: matrix size overflows", self.what)))?;
        let raw = self.take(n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_matrix(out: &mut Vec<u8>, m: ArrayView2<f64>) {
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn as_u32(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{name} = {v} does not fit in 32 bits")))
}

pub fn encode_vectors(data: ArrayView2<f64>) -> Result<Vec<u8>> {
    let (count, dim) = data.dim();
    let mut out = Vec::with_capacity(20 + 4 * data.len());
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&as_u32(dim, "dim")?.to_le_bytes());
    put_matrix(&mut out, data);
    Ok(out)
}

pub fn decode_vectors(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader::new(bytes, "vector file");
    r.magic(VECTOR_MAGIC)?;
    r.version()?;
    let count = usize::try_from(r.u64()?)
        .map_err(|_| Error::Format("vector count does not fit in memory".into()))?;
    let dim = r.u32()? as usize;
    let expected = count.checked_mul(dim).and_then(|n| n.checked_mul(4));
    if expected != Some(bytes.len() - r.pos) {
        return Err(Error::Format(format!(
            "vector file declares {count} x {dim} values but carries {} payload bytes",
            bytes.len() - r.pos
        )));
    }
    let m = r.matrix(count, dim)?;
    r.finish()?;
    Ok(m)
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    decode_vectors(&fs::read(path)?)
}

pub fn write_vectors(path: impl AsRef<Path>, data: ArrayView2<f64>) -> Result<()> {
    write_atomic(path, &encode_vectors(data)?)
}

pub fn encode_codebook(q: &RvqQuantizer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match q.scheme() {
        Scheme::Plain => 0,
        Scheme::Projected => 1,
    });
    out.push(match q.metric() {
        Metric::Euclidean => 0,
        Metric::Cosine => 1,
    });
    for (v, name) in [
        (q.num_layers(), "num_layers"),
        (q.codebook_size(), "codebook_size"),
        (q.latent_dim(), "latent_dim"),
        (q.quant_dim(), "quant_dim"),
    ] {
        out.extend_from_slice(&as_u32(v, name)?.to_le_bytes());
    }
    for (n, layer) in q.layers().iter().enumerate() {
        let proj = q.projections().map(|p| &p[n]);
        if let Some(p) = proj {
            put_matrix(&mut out, p.proj_in().view());
        }
        put_matrix(&mut out, layer.entries().view());
        if let Some(p) = proj {
            put_matrix(&mut out, p.proj_out().view());
        }
    }
    Ok(out)
}

/// Parses a codebook file. EMA statistics are not stored; loaded layers
/// start from unit cluster sizes and sums equal to their entries.
pub fn decode_codebook(bytes: &[u8]) -> Result<RvqQuantizer> {
    let mut r = Reader::new(bytes, "codebook file");
    r.magic(CODEBOOK_MAGIC)?;
    r.version()?;
    let scheme = match r.u8()? {
        0 => Scheme::Plain,
        1 => Scheme::Projected,
        t => return Err(Error::Format(format!("unknown scheme tag {t}"))),
    };
    let metric = match r.u8()? {
        0 => Metric::Euclidean,
        1 => Metric::Cosine,
        t => return Err(Error::Format(format!("unknown metric tag {t}"))),
    };
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let q = r.u32()? as usize;
    if n == 0 || k == 0 || d == 0 || q == 0 {
        return Err(Error::Format(format!("degenerate header N={n} K={k} d={d} q={q}")));
    }
    if scheme == Scheme::Plain && d != q {
        return Err(Error::Format(format!("plain codebook with d={d} != q={q}")));
    }
    let per_layer = match scheme {
        Scheme::Plain => k * q,
        Scheme::Projected => k * q + 2 * d * q,
    };
    let expected = per_layer.checked_mul(n).and_then(|v| v.checked_mul(4));
    if expected != Some(bytes.len() - r.pos) {
        return Err(Error::Format(format!(
            "codebook header implies {} payload bytes, file carries {}",
            expected.map_or_else(|| "overflowing".to_string(), |v| v.to_string()),
            bytes.len() - r.pos
        )));
    }
    let mut layers = Vec::with_capacity(n);
    let mut projections = Vec::with_capacity(n);
    let as_format = |e: Error| match e {
        Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    };
    for _ in 0..n {
        if scheme == Scheme::Projected {
            let proj_in = r.matrix(d, q)?;
            let entries = r.matrix(k, q)?;
            let proj_out = r.matrix(q, d)?;
            layers.push(Codebook::new(entries, metric).map_err(as_format)?);
            projections.push(ProjectionPair::new(proj_in, proj_out).map_err(as_format)?);
        } else {
            layers.push(Codebook::new(r.matrix(k, q)?, metric).map_err(as_format)?);
        }
    }
    r.finish()?;
    match scheme {
        Scheme::Plain => RvqQuantizer::plain(layers),
        Scheme::Projected => RvqQuantizer::projected(layers, projections),
    }
    .map_err(as_format)
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<RvqQuantizer> {
    decode_codebook(&fs::read(path)?)
}

pub fn write_codebook(path: impl AsRef<Path>, q: &RvqQuantizer) -> Result<()> {
    write_atomic(path, &encode_codebook(q)?)
}

pub fn encode_streams(streams: &[TokenStream]) -> Result<String> {
    let mut out = String::new();
    for s in streams {
        s.validate()?;
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a token file; blank lines are skipped and every record is
/// validated.
pub fn decode_streams(text: &str) -> Result<Vec<TokenStream>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let s: TokenStream = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("token file line {}: {e}", i + 1)))?;
            s.validate()
                .map_err(|e| Error::Format(format!("token file line {}: {e}", i + 1)))?;
            Ok(s)
        })
        .collect()
}

pub fn read_streams(path: impl AsRef<Path>) -> Result<Vec<TokenStream>> {
    decode_streams(&fs::read_to_string(path)?)
}

pub fn write_streams(path: impl AsRef<Path>, streams: &[TokenStream]) -> Result<()> {
    write_atomic(path, encode_streams(streams)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvq::TokenFrame;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn vector_header_layout() {
        let m = array![[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]];
        let b = encode_vectors(m.view()).unwrap();
        assert_eq!(&b[..4], b"RVQV");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
        assert_eq!(b.len(), 20 + 24);
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), -2.0);
        assert_eq!(decode_vectors(&b).unwrap(), m);
    }

    #[test]
    fn vector_errors() {
        let b = encode_vectors(array![[1.0, 2.0]].view()).unwrap();
        assert!(matches!(decode_vectors(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_vectors(&extra), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vectors(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_vectors(b"RV"), Err(Error::Format(_))));
    }

    #[test]
    fn empty_vector_file() {
        let m = Array2::<f64>::zeros((0, 7));
        let b = encode_vectors(m.view()).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(decode_vectors(&b).unwrap().dim(), (0, 7));
    }

    fn projected_quantizer() -> RvqQuantizer {
        let layers = (0..2)
            .map(|l| {
                Codebook::new(
                    Array2::from_shape_fn((3, 2), |(i, j)| 0.1 + (l * 6 + i * 2 + j) as f64 / 7.0),
                    Metric::Cosine,
                )
                .unwrap()
            })
            .collect();
        let proj = (0..2)
            .map(|l| {
                ProjectionPair::new(
                    Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - j as f64 + l as f64) / 3.0),
                    Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 / 9.0 - 0.4),
                )
                .unwrap()
            })
            .collect();
        RvqQuantizer::projected(layers, proj).unwrap()
    }

    #[test]
    fn codebook_header_and_roundtrip() {
        let q = projected_quantizer();
        let b = encode_codebook(&q).unwrap();
        assert_eq!(&b[..4], b"RVQC");
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 1);
        let header: Vec<u32> = b[10..26]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(header, vec![2, 3, 4, 2]);
        assert_eq!(b.len(), 26 + 2 * 4 * (6 + 8 + 8));
        let back = decode_codebook(&b).unwrap();
        assert_eq!(encode_codebook(&back).unwrap(), b);
        assert!(matches!(decode_codebook(&b[..b.len() - 4]), Err(Error::Format(_))));
    }

    #[test]
    fn plain_codebook_roundtrip() {
        let q = RvqQuantizer::plain(vec![
            Codebook::new(array![[0.0, 1.0], [2.0, 3.0]], Metric::Euclidean).unwrap(),
        ])
        .unwrap();
        let b = encode_codebook(&q).unwrap();
        assert_eq!(b[8], 0);
        assert_eq!(b.len(), 26 + 16);
        let back = decode_codebook(&b).unwrap();
        assert_eq!(back.layers()[0].entries(), q.layers()[0].entries());
        assert_eq!(back.layers()[0].ema_cluster_size().to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn token_file_roundtrip_and_validation() {
        let s = TokenStream::new(
            "utt-1",
            50.0,
            2,
            4,
            vec![TokenFrame::new(vec![0, 3]), TokenFrame::new(vec![2, 1])],
        )
        .unwrap();
        let text = encode_streams(std::slice::from_ref(&s)).unwrap();
        assert!(text.contains("\"codes\":[[0,3],[2,1]]"));
        assert!(text.contains("\"token_rate_hz\":50.0"));
        assert_eq!(decode_streams(&text).unwrap(), vec![s]);
        let bad = text.replace("[2,1]", "[2,4]");
        assert!(matches!(decode_streams(&bad), Err(Error::Format(_))));
        let ragged = text.replace("[2,1]", "[2]");
        assert!(matches!(decode_streams(&ragged), Err(Error::Format(_))));
        assert!(decode_streams("").unwrap().is_empty());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        write_vectors(&p, array![[1.0]].view()).unwrap();
        write_vectors(&p, array![[2.0, 3.0]].view()).unwrap();
        assert_eq!(read_vectors(&p).unwrap(), array![[2.0, 3.0]]);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn vectors_roundtrip_bit_exact(
            rows in 0usize..6,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 30),
        ) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 5 + j]);
            let b = encode_vectors(m.view()).unwrap();
            let back = decode_vectors(&b).unwrap();
            prop_assert_eq!(encode_vectors(back.view()).unwrap(), b);
        }
    }
}
