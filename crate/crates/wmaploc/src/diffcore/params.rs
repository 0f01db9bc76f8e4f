use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use super::{DiffError, Result};

/// One named parameter: shape plus raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat parameter blob with a plain-text header.
///
/// File layout:
///
/// ```text
/// WMAPPARAMS 1
/// meta <key> <value...>            (zero or more)
/// tensor <name> <d0>x<d1>x... <byte_offset>
/// ...
/// end <total_data_bytes>
/// <raw little-endian f64 data>
/// ```
///
/// Offsets are relative to the byte right after the `end` line's newline.
/// Values round-trip bit-exactly.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    pub meta: Vec<(String, String)>,
    entries: Vec<ParamEntry>,
}

const MAGIC: &str = "WMAPPARAMS 1";

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.meta.push((key.to_string(), value));
        }
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), values });
    }

    pub fn insert_tensor(&mut self, name: &str, tensor: &Tensor) {
        self.insert(name, &tensor.shape(), tensor.to_vec());
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy stored values into an existing tensor, checking shape.
    pub fn load_into(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| DiffError::BadParamFile(format!("missing tensor '{name}'")))?;
        if entry.shape != tensor.shape() {
            return Err(DiffError::BadParamFile(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        tensor.set_values(&entry.values);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {} {}\n", e.name, dims.join("x"), offset));
            offset += e.values.len() * 8;
        }
        header.push_str(&format!("end {offset}\n"));
        let mut out = header.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let bad = |m: String| DiffError::BadParamFile(m);
        let mut pos = 0usize;
        let line_at = |pos: &mut usize| -> Result<String> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(bad("truncated header".into()));
            }
            let line = std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| bad("non-utf8 header".into()))?
                .to_string();
            *pos += 1;
            Ok(line)
        };
        if line_at(&mut pos)? != MAGIC {
            return Err(bad("bad magic line".into()));
        }
        let mut store = ParamStore::new();
        let mut pending: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let data_len;
        loop {
            let line = line_at(&mut pos)?;
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| bad("bare meta line".into()))?;
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed meta line '{line}'")))?;
                    store.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let rest = parts.next().ok_or_else(|| bad("bare tensor line".into()))?;
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 3 {
                        return Err(bad(format!("malformed tensor line '{line}'")));
                    }
                    let shape: Vec<usize> = fields[1]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad dim in '{line}'"))))
                        .collect::<Result<_>>()?;
                    let offset: usize =
                        fields[2].parse().map_err(|_| bad(format!("bad offset in '{line}'")))?;
                    pending.push((fields[0].to_string(), shape, offset));
                }
                Some("end") => {
                    let rest = parts.next().ok_or_else(|| bad("bare end line".into()))?;
                    data_len = rest.parse::<usize>().map_err(|_| bad("bad end length".into()))?;
                    break;
                }
                _ => return Err(bad(format!("unexpected header line '{line}'"))),
            }
        }
        let data = &bytes[pos..];
        if data.len() != data_len {
            return Err(bad(format!("data section is {} bytes, header says {data_len}", data.len())));
        }
        for (name, shape, offset) in pending {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > data.len() {
                return Err(bad(format!("tensor '{name}' overruns data section")));
            }
            let values: Vec<f64> = data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.entries.push(ParamEntry { name, shape, values });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = fs::read(path)?;
        ParamStore::from_bytes(&bytes).map_err(|e| match e {
            DiffError::BadParamFile(m) => {
                DiffError::BadParamFile(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.set_meta("epoch", 7);
        store.set_meta("config_hash", "abc123");
        store.insert("enc.w", &[2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 2.5e-300, 1e300, 0.1]);
        store.insert("enc.b", &[1], vec![-0.25]);
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.get_meta("epoch"), Some("7"));
        assert_eq!(back.entries().len(), 2);
        for (a, b) in store.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a
                .values
                .iter()
                .zip(&b.values)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // serialized form is itself deterministic
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn corrupt_header_is_rejected() {
        assert!(ParamStore::from_bytes(b"NOTPARAMS\nend 0\n").is_err());
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, 2.0]);
        let mut bytes = store.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn load_into_checks_shape() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, 2.0]);
        let t = Tensor::zeros(&[3]);
        assert!(store.load_into("w", &t).is_err());
        let t = Tensor::zeros(&[2]);
        store.load_into("w", &t).unwrap();
        assert_eq!(t.to_vec(), vec![1.0, 2.0]);
        assert!(store.load_into("missing", &t).is_err());
    }
}
