use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::scalar::Scalar;
use super::store::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

const MAGIC: &str = "PBDR1";

/// Serialize parameter stores into one checkpoint file.
///
/// Layout: a text manifest (`PBDR1`, tensor count, one `name rank dims...
/// offset` line per tensor, `DATA`) followed by all tensors as a flat
/// little-endian f32 blob. Offsets are in scalars. Values are converted to
/// f32 regardless of the training precision.
pub fn save<S: Scalar>(path: &Path, stores: &[(&str, &ParamStore<S>)]) -> Result<(), NumericsError> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut count = 0usize;
    let mut offset = 0usize;
    for (prefix, store) in stores {
        for (name, tensor) in store.entries() {
            let full = format!("{prefix}/{name}");
            assert!(!full.contains(char::is_whitespace), "whitespace in parameter name {full:?}");
            manifest.push_str(&full);
            manifest.push_str(&format!(" {}", tensor.rank()));
            for d in tensor.shape() {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push_str(&format!(" {offset}\n"));
            for &x in tensor.data() {
                blob.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
            }
            offset += tensor.len();
            count += 1;
        }
    }
    let mut file = fs::File::create(path)?;
    write!(file, "{MAGIC}\ntensors {count}\n{manifest}DATA\n")?;
    file.write_all(&blob)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next_line(&mut self) -> Result<&'a str, NumericsError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos == self.bytes.len() {
            return Err(bad("truncated manifest"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| bad("manifest is not UTF-8"))?;
        self.pos += 1;
        Ok(s)
    }
}

/// Parsed checkpoint: named f32 tensors in manifest order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, NumericsError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.next_line()?;
    if magic != MAGIC {
        return Err(bad(&format!("unsupported checkpoint version {magic:?} (expected {MAGIC})")));
    }
    let header = cur.next_line()?;
    let count: usize = header
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(&format!("bad tensor count line {header:?}")))?;

    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for _ in 0..count {
        let l = cur.next_line()?;
        let mut it = l.split(' ');
        let name = it.next().ok_or_else(|| bad("empty manifest line"))?.to_string();
        let rank: usize = parse_field(it.next(), &l)?;
        if rank > 2 {
            return Err(bad(&format!("rank {rank} unsupported in {l:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(parse_field(it.next(), &l)?);
        }
        let offset: usize = parse_field(it.next(), &l)?;
        if it.next().is_some() {
            return Err(bad(&format!("trailing fields in {l:?}")));
        }
        if offset != expected_offset {
            return Err(bad(&format!("offset {offset} for {name:?}, expected {expected_offset}")));
        }
        expected_offset += shape.iter().product::<usize>();
        entries.push((name, shape));
    }
    if cur.next_line()? != "DATA" {
        return Err(bad("missing DATA separator"));
    }
    let blob = &bytes[cur.pos..];
    if blob.len() != expected_offset * 4 {
        return Err(bad(&format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            expected_offset * 4
        )));
    }

    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for (name, shape) in entries {
        let len: usize = shape.iter().product();
        let data: Vec<f32> = (0..len)
            .map(|i| {
                let b = &blob[(cursor + i) * 4..(cursor + i) * 4 + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]])
            })
            .collect();
        cursor += len;
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Copy checkpoint entries under `prefix/` into a store whose parameter names
/// and shapes must match exactly.
pub fn assign<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    entries: &[(String, Tensor<f32>)],
) -> Result<(), NumericsError> {
    for key in store.keys().collect::<Vec<_>>() {
        let full = format!("{prefix}/{}", store.name(key));
        let found = entries
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| bad(&format!("checkpoint is missing tensor {full:?}")))?;
        if found.1.shape() != store.get(key).shape() {
            return Err(bad(&format!(
                "shape mismatch for {full:?}: checkpoint {:?}, model {:?}",
                found.1.shape(),
                store.get(key).shape()
            )));
        }
        let converted: Vec<S> = found.1.data().iter().map(|&x| S::from_f64(x as f64)).collect();
        *store.get_mut(key) = Tensor::new(found.1.shape().to_vec(), converted);
    }
    Ok(())
}

fn bad(msg: &str) -> NumericsError {
    NumericsError::Checkpoint(msg.to_string())
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: &str) -> Result<T, NumericsError> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(&format!("malformed manifest line {line:?}")))
}
