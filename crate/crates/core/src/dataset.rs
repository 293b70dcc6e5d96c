//! Dataset manifests (`path,identity,label`), identity pools and the preprocessed
//! tensor cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cotuplet::IdentityPool;
use crate::error::{Error, Result};
use crate::imageprep::{preprocess, GrayImage, PrepConfig};
use crate::ndgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Forged,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub identity: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_path_buf(), source }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
        }
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let headers = rdr.headers().map_err(csv_err(path))?.clone();
        if headers != vec!["path", "identity", "label"] {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("header must be `path,identity,label`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>().map_err(csv_err(path))?;
        Ok(Manifest { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        if self.rows.is_empty() {
            w.write_record(["path", "identity", "label"]).map_err(csv_err(path))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.identity.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Row indices grouped by identity, identities sorted.
    pub fn pools(&self) -> Vec<IdentityPool> {
        let mut map: BTreeMap<&str, IdentityPool> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let p = map.entry(&r.identity).or_insert_with(|| IdentityPool {
                identity: r.identity.clone(),
                genuine: Vec::new(),
                forged: Vec::new(),
            });
            match r.label {
                Label::Genuine => p.genuine.push(i),
                Label::Forged => p.forged.push(i),
            }
        }
        map.into_values().collect()
    }

    /// Rows whose identity is in `ids`, order preserved.
    pub fn subset(&self, ids: &[String]) -> Manifest {
        Manifest { rows: self.rows.iter().filter(|r| ids.contains(&r.identity)).cloned().collect() }
    }
}

/// Preprocessed network inputs for every manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCache {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<ManifestRow>,
    /// `[1,H,W]` per row.
    pub images: Vec<Tensor>,
}

const CACHE_MAGIC: &[u8; 8] = b"SIGVCACH";
const CACHE_VERSION: u32 = 1;

impl TensorCache {
    /// Loads and preprocesses every image of `manifest` (paths relative to `root`).
    pub fn build(manifest: &Manifest, root: &Path, prep: &PrepConfig) -> Result<Self> {
        prep.validate()?;
        let mut images = Vec::with_capacity(manifest.rows.len());
        for r in &manifest.rows {
            let path = root.join(&r.path);
            let raw = GrayImage::load(&path)?;
            images.push(preprocess(&raw, prep)?);
        }
        Ok(TensorCache { height: prep.target_height, width: prep.target_width, rows: manifest.rows.clone(), images })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { rows: self.rows.clone() }
    }

    /// Rows of the given identities.
    pub fn subset(&self, ids: &[String]) -> TensorCache {
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&i| ids.contains(&self.rows[i].identity)).collect();
        TensorCache {
            height: self.height,
            width: self.width,
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Little-endian: magic, version u32, count u32, height u32, width u32, then per
    /// row: path, identity (u32 length + UTF-8 each), label u8 (0 genuine, 1 forged),
    /// H*W f32 pixels.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        for v in [CACHE_VERSION, self.rows.len() as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (r, t) in self.rows.iter().zip(&self.images) {
            for s in [r.path.to_string_lossy().as_ref(), r.identity.as_str()] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.push(match r.label {
                Label::Genuine => 0,
                Label::Forged => 1,
            });
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or("truncated cache")?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err("bad magic".into());
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, count, h, w] = u32s;
        if version != CACHE_VERSION {
            return Err(format!("unsupported cache version {version}"));
        }
        let (h, w) = (h as usize, w as usize);
        let mut rows = Vec::with_capacity(count as usize);
        let mut images = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut strs = Vec::with_capacity(2);
            for _ in 0..2 {
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                strs.push(String::from_utf8(take(len)?.to_vec()).map_err(|e| e.to_string())?);
            }
            let label = match take(1)?[0] {
                0 => Label::Genuine,
                1 => Label::Forged,
                b => return Err(format!("bad label byte {b}")),
            };
            let data = take(h * w * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let identity = strs.pop().unwrap();
            let path = PathBuf::from(strs.pop().unwrap());
            rows.push(ManifestRow { path, identity, label });
            images.push(Tensor::new(vec![1, h, w], data).map_err(|e| e.to_string())?);
        }
        if pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(TensorCache { height: h, width: w, rows, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Values round-trip through f32, so a loaded cache is what training sees.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorCache::decode(&bytes).map_err(|detail| Error::Format { path: path.to_path_buf(), detail })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Manifest {
        let mk = |p: &str, id: &str, l| ManifestRow { path: p.into(), identity: id.into(), label: l };
        Manifest {
            rows: vec![
                mk("b1.pgm", "b", Label::Genuine),
                mk("a1.pgm", "a", Label::Genuine),
                mk("a2.pgm", "a", Label::Forged),
                mk("b2.pgm", "b", Label::Forged),
                mk("a3.pgm", "a", Label::Genuine),
            ],
        }
    }

    #[test]
    fn manifest_roundtrip_and_pools() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = rows();
        m.write(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("path,identity,label\nb1.pgm,b,genuine\n"));
        assert_eq!(Manifest::read(&p).unwrap(), m);
        let pools = m.pools();
        assert_eq!(pools[0].identity, "a");
        assert_eq!((pools[0].genuine.clone(), pools[0].forged.clone()), (vec![1, 4], vec![2]));
        assert_eq!(m.subset(&["b".into()]).rows.len(), 2);
    }

    #[test]
    fn bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        let err = Manifest::read(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
        let p = dir.path().join("bad.csv");
        fs::write(&p, "file,who,kind\nx,y,genuine\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Format { .. })));
        fs::write(&p, "path,identity,label\nx,y,maybe\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Csv { .. })));
    }

    #[test]
    fn cache_roundtrip() {
        let c = TensorCache {
            height: 2,
            width: 3,
            rows: rows().rows[..2].to_vec(),
            images: vec![Tensor::full(&[1, 2, 3], 0.5), Tensor::full(&[1, 2, 3], 0.25)],
        };
        let back = TensorCache::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let mut bytes = c.encode();
        bytes.truncate(bytes.len() - 2);
        assert!(TensorCache::decode(&bytes).is_err());
    }
}
