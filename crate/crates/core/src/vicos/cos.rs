//! Cloud object stores: a plain key-value interface with atomic operations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

#[derive(Debug, thiserror::Error)]
pub enum CosError {
    #[error("object store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("object store: {0}")]
    Backend(String),
}

pub trait Cos: Send + Sync {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), CosError>;
    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, CosError>;
    /// Deleting an absent key is not an error.
    fn del(&self, key: &[u8]) -> Result<(), CosError>;
    fn list(&self) -> Result<Vec<Vec<u8>>, CosError>;
    /// Deletes every key starting with `prefix`; returns how many.
    fn del_prefix(&self, prefix: &[u8]) -> Result<usize, CosError>;
}

impl<C: Cos + ?Sized> Cos for Arc<C> {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), CosError> {
        (**self).put(key, value)
    }

    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, CosError> {
        (**self).get(key)
    }

    fn del(&self, key: &[u8]) -> Result<(), CosError> {
        (**self).del(key)
    }

    fn list(&self) -> Result<Vec<Vec<u8>>, CosError> {
        (**self).list()
    }

    fn del_prefix(&self, prefix: &[u8]) -> Result<usize, CosError> {
        (**self).del_prefix(prefix)
    }
}

/// An object store in memory. Cloning copies the contents; share one store
/// between handles through an `Arc`.
#[derive(Default)]
pub struct MemoryCos {
    objects: Mutex<BTreeMap<Vec<u8>, Vec<u8>>>,
}

impl Clone for MemoryCos {
    fn clone(&self) -> Self {
        MemoryCos {
            objects: Mutex::new(self.objects.lock().unwrap().clone()),
        }
    }
}

impl MemoryCos {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.objects.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Cos for MemoryCos {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), CosError> {
        self.objects.lock().unwrap().insert(key.to_vec(), value.to_vec());
        Ok(())
    }

    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, CosError> {
        Ok(self.objects.lock().unwrap().get(key).cloned())
    }

    fn del(&self, key: &[u8]) -> Result<(), CosError> {
        self.objects.lock().unwrap().remove(key);
        Ok(())
    }

    fn list(&self) -> Result<Vec<Vec<u8>>, CosError> {
        Ok(self.objects.lock().unwrap().keys().cloned().collect())
    }

    fn del_prefix(&self, prefix: &[u8]) -> Result<usize, CosError> {
        let mut m = self.objects.lock().unwrap();
        let doomed: Vec<_> = m.range(prefix.to_vec()..).map(|(k, _)| k).take_while(|k| k.starts_with(prefix)).cloned().collect();
        for k in &doomed {
            m.remove(k);
        }
        Ok(doomed.len())
    }
}

/// One file per object in a directory, named by the hex encoding of its key.
pub struct FsCos {
    dir: PathBuf,
}

const TMP_SUFFIX: &str = ".tmp";

impl FsCos {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CosError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(FsCos {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    fn path(&self, key: &[u8]) -> PathBuf {
        self.dir.join(hex::encode(key))
    }

    fn names(&self) -> Result<Vec<String>, CosError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            if let Some(name) = name.to_str() {
                if !name.ends_with(TMP_SUFFIX) && hex::decode(name).is_ok() {
                    out.push(name.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

impl Cos for FsCos {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), CosError> {
        let path = self.path(key);
        let tmp = path.with_extension(&TMP_SUFFIX[1..]);
        let mut f = fs::File::create(&tmp)?;
        f.write_all(value)?;
        f.sync_data()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, CosError> {
        match fs::read(self.path(key)) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn del(&self, key: &[u8]) -> Result<(), CosError> {
        match fs::remove_file(self.path(key)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn list(&self) -> Result<Vec<Vec<u8>>, CosError> {
        Ok(self
            .names()?
            .iter()
            .map(|n| hex::decode(n).expect("filtered"))
            .collect())
    }

    fn del_prefix(&self, prefix: &[u8]) -> Result<usize, CosError> {
        // byte prefixes are exactly hex prefixes of even length
        let p = hex::encode(prefix);
        let mut n = 0;
        for name in self.names()? {
            if name.starts_with(&p) {
                match fs::remove_file(self.dir.join(&name)) {
                    Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                    _ => n += 1,
                }
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(cos: &dyn Cos) {
        assert!(cos.list().unwrap().is_empty());
        cos.put(b"a\0x", b"1").unwrap();
        cos.put(b"a\0y", b"2").unwrap();
        cos.put(b"ab\0z", b"3").unwrap();
        cos.put(b"b", b"").unwrap();
        assert_eq!(cos.get(b"a\0y").unwrap(), Some(b"2".to_vec()));
        assert_eq!(cos.get(b"b").unwrap(), Some(Vec::new()));
        assert_eq!(cos.get(b"zz").unwrap(), None);
        cos.put(b"a\0y", b"22").unwrap();
        assert_eq!(cos.get(b"a\0y").unwrap(), Some(b"22".to_vec()));
        assert_eq!(cos.del_prefix(b"a\0").unwrap(), 2);
        assert_eq!(cos.list().unwrap(), vec![b"ab\0z".to_vec(), b"b".to_vec()]);
        cos.del(b"b").unwrap();
        cos.del(b"b").unwrap();
        assert_eq!(cos.list().unwrap(), vec![b"ab\0z".to_vec()]);
    }

    #[test]
    fn memory_backend() {
        exercise(&MemoryCos::new());
    }

    #[test]
    fn filesystem_backend() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&FsCos::open(dir.path()).unwrap());
        // survives reopening
        let cos = FsCos::open(dir.path()).unwrap();
        assert_eq!(cos.get(b"ab\0z").unwrap(), Some(b"3".to_vec()));
    }
}
