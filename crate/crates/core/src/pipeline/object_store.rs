//! Object storage behind a small put/get/list interface.
//!
//! Keys are `/`-separated relative paths. The only shipped backend maps keys
//! onto files under a local root directory; a remote backend only needs to
//! implement [`ObjectStore`] and be wired into [`open_store`].

use std::fs;
use std::path::{Component, Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid object key {0:?}")]
    BadKey(String),
    #[error("no object at key {0}")]
    NotFound(String),
    #[error("unsupported store backend {0:?} (only local directories are available)")]
    UnsupportedBackend(String),
    #[error("{key}: {source}")]
    Io {
        key: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError>;
    /// Every key starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError>;
    fn descriptor(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct LocalStore {
    root: PathBuf,
}

impl LocalStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> Result<PathBuf, StoreError> {
        let rel = Path::new(key);
        let valid = !key.is_empty()
            && !key.ends_with('/')
            && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !valid {
            return Err(StoreError::BadKey(key.to_string()));
        }
        Ok(self.root.join(rel))
    }
}

fn walk(dir: &Path, rel: &str, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let key = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if entry.file_type()?.is_dir() {
            walk(&entry.path(), &key, out)?;
        } else {
            out.push(key);
        }
    }
    Ok(())
}

impl ObjectStore for LocalStore {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.path_for(key)?;
        let io = |source| StoreError::Io {
            key: key.to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&path, bytes).map_err(|source| StoreError::Io {
            key: key.to_string(),
            source,
        })
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_for(key)?;
        fs::read(&path).map_err(|source| match source.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            _ => StoreError::Io {
                key: key.to_string(),
                source,
            },
        })
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let mut keys = Vec::new();
        if self.root.is_dir() {
            walk(&self.root, "", &mut keys).map_err(|source| StoreError::Io {
                key: prefix.to_string(),
                source,
            })?;
        }
        keys.retain(|k| k.starts_with(prefix));
        keys.sort();
        Ok(keys)
    }

    fn descriptor(&self) -> String {
        format!("local:{}", self.root.display())
    }
}

/// Opens a store from a descriptor: `local:<dir>` or a bare directory path.
pub fn open_store(descriptor: &str) -> Result<Box<dyn ObjectStore>, StoreError> {
    if let Some(dir) = descriptor.strip_prefix("local:") {
        return Ok(Box::new(LocalStore::new(dir)));
    }
    if descriptor.contains("://") {
        return Err(StoreError::UnsupportedBackend(descriptor.to_string()));
    }
    Ok(Box::new(LocalStore::new(descriptor)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_list() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalStore::new(dir.path().join("bucket"));
        assert!(store.list("").unwrap().is_empty());
        store.put("keep/a.f64", &[1, 2, 3]).unwrap();
        store.put("keep/b.f64", &[]).unwrap();
        store.put("reports/report.json", b"{}").unwrap();
        assert_eq!(store.get("keep/a.f64").unwrap(), vec![1, 2, 3]);
        assert_eq!(store.get("keep/b.f64").unwrap(), Vec::<u8>::new());
        assert_eq!(
            store.list("keep/").unwrap(),
            vec!["keep/a.f64".to_string(), "keep/b.f64".to_string()]
        );
        assert_eq!(store.list("").unwrap().len(), 3);
        assert!(matches!(store.get("keep/zz"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn rejects_escaping_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalStore::new(dir.path());
        for key in ["../x", "/abs", "", "a/../../b", "dir/"] {
            assert!(
                matches!(store.put(key, b"x"), Err(StoreError::BadKey(_))),
                "{key}"
            );
        }
    }

    #[test]
    fn descriptors() {
        assert!(open_store("s3://bucket/prefix").is_err());
        let s = open_store("local:/tmp/x").unwrap();
        assert_eq!(s.descriptor(), "local:/tmp/x");
    }

    proptest::proptest! {
        #[test]
        fn get_returns_what_was_put(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..512), name in "[a-z]{1,8}") {
            let dir = tempfile::tempdir().unwrap();
            let store = LocalStore::new(dir.path());
            let key = format!("p/{name}");
            store.put(&key, &bytes).unwrap();
            proptest::prop_assert_eq!(store.get(&key).unwrap(), bytes);
            proptest::prop_assert_eq!(store.list("p/").unwrap(), vec![key]);
        }
    }
}
