//! Binary point-cloud files and checkpoints.
//!
//! Point clouds (`CTPC`): magic, then little-endian `u32` version, point
//! count `n`, feature width `f` and a label flag, then `n` rows of `3 + f`
//! `f64` values (xyz first), then `n` `u32` labels when flagged.
//!
//! Checkpoints (`CTCK`): magic, `u32` version, the configuration echo as a
//! length-prefixed UTF-8 string, a `u32` tensor count, then per tensor its
//! name, rank, dims and `f64` data.

use crate::error::{HarnessError, Result};
use cloud_transform::{ParamStore, Tensor};
use std::path::Path;

const CLOUD_MAGIC: &[u8; 4] = b"CTPC";
const CKPT_MAGIC: &[u8; 4] = b"CTCK";
const VERSION: u32 = 1;

/// One cloud: `points [n, 3]`, `features [n, f]`, optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudFile {
    pub points: Vec<f64>,
    pub features: Vec<f64>,
    pub feature_width: usize,
    pub labels: Option<Vec<u32>>,
}

impl CloudFile {
    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, f) = (self.len(), self.feature_width);
        let mut out = Vec::with_capacity(20 + n * (3 + f) * 8 + n * 4);
        out.extend_from_slice(CLOUD_MAGIC);
        for v in [VERSION, n as u32, f as u32, self.labels.is_some() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..n {
            let row = self.points[3 * i..3 * i + 3]
                .iter()
                .chain(&self.features[f * i..f * (i + 1)]);
            row.for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if let Some(labels) = &self.labels {
            labels
                .iter()
                .for_each(|l| out.extend_from_slice(&l.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CLOUD_MAGIC)?;
        r.version()?;
        let n = r.u32()? as usize;
        let f = r.u32()? as usize;
        let flag = r.u32()?;
        if flag > 1 {
            return Err(r.err(format!("label flag {flag} is not 0 or 1")));
        }
        let mut points = Vec::with_capacity(3 * n);
        let mut features = Vec::with_capacity(f * n);
        for _ in 0..n {
            for _ in 0..3 {
                points.push(r.f64()?);
            }
            for _ in 0..f {
                features.push(r.f64()?);
            }
        }
        let labels = if flag == 1 {
            Some((0..n).map(|_| r.u32()).collect::<Result<_>>()?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            points,
            features,
            feature_width: f,
            labels,
        })
    }
}

pub fn write_cloud(path: &Path, cloud: &CloudFile) -> Result<()> {
    std::fs::write(path, cloud.to_bytes()).map_err(|e| HarnessError::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<CloudFile> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    CloudFile::from_bytes(&bytes, path)
}

pub fn checkpoint_bytes(store: &ParamStore, config_echo: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, config_echo);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        p.value
            .shape()
            .iter()
            .for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        p.value
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, config_echo: &str) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, config_echo))
        .map_err(|e| HarnessError::io(path, e))
}

/// Configuration echo and named tensors stored in a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(CKPT_MAGIC)?;
    r.version()?;
    let echo = r.string()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let len = shape.iter().product::<usize>();
        let data: Vec<f64> = (0..len).map(|_| r.f64()).collect::<Result<_>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| r.err(e.to_string()))?;
        tensors.push((name, t));
    }
    r.finish()?;
    Ok((echo, tensors))
}

/// Copies checkpoint tensors into a store built for the same architecture.
pub fn load_into(
    store: &mut ParamStore,
    tensors: Vec<(String, Tensor)>,
    path: &Path,
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(HarnessError::format(
            path,
            format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                store.len()
            ),
        ));
    }
    for (name, t) in tensors {
        let id = store.find(&name).ok_or_else(|| {
            HarnessError::format(path, format!("model has no parameter {name:?}"))
        })?;
        if store.value(id).shape() != t.shape() {
            return Err(HarnessError::format(
                path,
                format!(
                    "{name}: shape {:?} != {:?}",
                    t.shape(),
                    store.value(id).shape()
                ),
            ));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    fn err(&self, msg: impl Into<String>) -> HarnessError {
        HarnessError::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if self.take(4)? != want {
            return Err(self.err(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(self.err(format!("unsupported version {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CloudFile {
        CloudFile {
            points: vec![0.1, -0.2, 0.3, 1.0 / 3.0, f64::MIN_POSITIVE, -0.0],
            features: vec![1.0, 2.0, 3.0, 4.0],
            feature_width: 2,
            labels: Some(vec![0, 7]),
        }
    }

    #[test]
    fn cloud_round_trip_is_bit_exact() {
        let c = sample();
        let back = CloudFile::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert!(back.points[5].is_sign_negative());
        let plain = CloudFile { labels: None, ..c };
        assert_eq!(
            CloudFile::from_bytes(&plain.to_bytes(), Path::new("x")).unwrap(),
            plain
        );
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"CTPC");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len(), 20 + 2 * 5 * 8 + 2 * 4);
    }

    #[test]
    fn corrupt_clouds_rejected() {
        let b = sample().to_bytes();
        let p = Path::new("x");
        assert!(CloudFile::from_bytes(&b[..b.len() - 1], p).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(CloudFile::from_bytes(&extra, p).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(CloudFile::from_bytes(&magic, p).is_err());
        let mut version = b;
        version[4] = 9;
        assert!(CloudFile::from_bytes(&version, p).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctck");
        let mut store = ParamStore::new();
        store.add(
            "a.weight",
            Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 1e-300]).unwrap(),
            true,
        );
        store.add(
            "a.running_mean",
            Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            false,
        );
        write_checkpoint(&path, &store, "seed = 1\n").unwrap();
        let (echo, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(echo, "seed = 1\n");
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.value_mut(id).data_mut().fill(0.0);
        }
        load_into(&mut other, tensors, &path).unwrap();
        for (id, p) in store.iter() {
            assert_eq!(other.value(id), &p.value);
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]), true);
        let tensors = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(load_into(&mut store, tensors, Path::new("x")).is_err());
    }
}
