//! Binary container for named tensors.
//!
//! Used for model parameters, optimizer state, affinity tables, and gallery
//! payloads. Layout, all integers little-endian:
//!
//! ```text
//! magic "GTCK" | version u32 | tensor count u32
//! per tensor: name length u32 | name bytes (UTF-8) | rank u32 | dims u32 xrank | f32 payload
//! ```
//!
//! Values are stored as f32; reading widens to f64. The decoder treats input
//! as untrusted: every length is validated against the remaining byte count
//! before any allocation.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GTCK";
const VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 4096;

/// A named tensor as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

impl Entry {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Entry {
            name: name.into(),
            tensor,
        }
    }
}

/// Rounds every value through f32, the container's storage precision. A
/// tensor that has passed through `quantize` round-trips bit-exactly.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&x| x as f32 as f64).collect();
    Tensor::from_vec(t.rows(), t.cols(), data).expect("shape unchanged")
}

/// Serializes entries to the container byte format.
pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(e.tensor.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.tensor.cols() as u32).to_le_bytes());
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses the container byte format. Rejects malformed input with
/// [`Error::Format`]; never panics and never allocates more than the input
/// size implies.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = r.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!(
                "tensor {i}: name length {name_len} exceeds {MAX_NAME_LEN}"
            )));
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > 2 {
            return Err(Error::Format(format!(
                "tensor {name:?}: unsupported rank {rank}"
            )));
        }
        let mut dims = [1usize; 2];
        for d in dims.iter_mut().skip(2 - rank as usize) {
            *d = r.u32()? as usize;
        }
        let numel = dims[0].checked_mul(dims[1]).ok_or_else(|| {
            Error::Format(format!("tensor {name:?}: element count overflows"))
        })?;
        let payload_len = numel.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("tensor {name:?}: payload size overflows"))
        })?;
        let payload = r.take(payload_len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        entries.push(Entry::new(name, Tensor::from_vec(dims[0], dims[1], data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Writes entries to `path` atomically (temp file in the same directory, then
/// rename).
pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

/// Reads and parses a container file.
pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes `bytes` to `path` via a temp file and rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_entries() -> Vec<Entry> {
        vec![
            Entry::new("w1", Tensor::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-8, -7.5]).unwrap()),
            Entry::new("b1", Tensor::row(vec![0.25, 0.75])),
            Entry::new("scalar", Tensor::scalar(42.0)),
        ]
    }

    #[test]
    fn round_trip_preserves_quantized_values() {
        let entries = sample_entries();
        let decoded = decode(&encode(&entries)).unwrap();
        assert_eq!(decoded.len(), entries.len());
        for (d, e) in decoded.iter().zip(&entries) {
            assert_eq!(d.name, e.name);
            assert_eq!(d.tensor.shape(), e.tensor.shape());
            assert_eq!(d.tensor, quantize(&e.tensor));
        }
        // a second trip is bit-exact end to end
        assert_eq!(encode(&decoded), encode(&decoded.clone()));
        let twice = decode(&encode(&decoded)).unwrap();
        assert_eq!(twice, decoded);
    }

    #[test]
    fn file_round_trip_is_byte_identical(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries: Vec<Entry> = sample_entries().iter().map(|e| Entry::new(e.name.clone(), quantize(&e.tensor))).collect();
        save(&path, &entries).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, entries);
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode(&sample_entries());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        bytes[4] = 99;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncation_at_every_length() {
        let bytes = encode(&sample_entries());
        for cut in 0..bytes.len() {
            assert!(
                decode(&bytes[..cut]).is_err(),
                "truncation to {cut} bytes accepted"
            );
        }
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode(&sample_entries());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn huge_claimed_dims_fail_without_allocating() {
        // header claims one tensor of u32::MAX x u32::MAX elements
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GTCK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let start = std::time::Instant::now();
        assert!(decode(&bytes).is_err());
        assert!(start.elapsed().as_millis() < 100);
    }

    #[test]
    fn rejects_oversized_name_and_bad_utf8() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GTCK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(MAX_NAME_LEN + 1).to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GTCK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0xff, 0xfe]);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn reads_rank_one_as_row_vector() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GTCK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'v');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let entries = decode(&bytes).unwrap();
        assert_eq!(entries[0].tensor.shape(), (1, 3));
        assert_eq!(entries[0].tensor.data(), &[1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decode_never_panics_with_valid_prefix(tail in proptest::collection::vec(any::<u8>(), 0..256)) {
            let mut bytes = encode(&sample_entries());
            bytes.truncate(12);
            bytes.extend(tail);
            let _ = decode(&bytes);
        }
    }
}
