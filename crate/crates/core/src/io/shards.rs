//! Multi-shard datasets: a small JSON file listing container shards.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{ContainerError, ContainerIndex, EmbeddingSource, EntryData};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardRef {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub version: u32,
    pub shards: Vec<ShardRef>,
}

impl ShardManifest {
    pub fn new(shards: Vec<ShardRef>) -> Self {
        ShardManifest { version: 1, shards }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = super::read_to_string(path)?;
        let m: ShardManifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(ContainerError::UnsupportedVersion {
                found: m.version,
                expected: 1,
            }
            .into());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }
}

/// Opened shards with a global id -> shard lookup.
#[derive(Debug)]
pub struct ShardSet {
    shards: Vec<ContainerIndex>,
    owner: HashMap<String, usize>,
}

impl ShardSet {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = ShardManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        let mut shards = Vec::new();
        let mut owner = HashMap::new();
        for (i, s) in manifest.shards.iter().enumerate() {
            let p = PathBuf::from(&s.path);
            let p = if p.is_absolute() { p } else { base.join(p) };
            let idx = ContainerIndex::open(&p)?;
            if idx.ids().len() != s.entries {
                return Err(Error::invalid(format!(
                    "shard {} lists {} entries, file has {}",
                    p.display(),
                    s.entries,
                    idx.ids().len()
                )));
            }
            for id in idx.ids() {
                if owner.insert(id.clone(), i).is_some() {
                    return Err(ContainerError::Malformed(format!(
                        "id {id:?} appears in more than one shard"
                    ))
                    .into());
                }
            }
            shards.push(idx);
        }
        Ok(ShardSet { shards, owner })
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.owner.contains_key(id)
    }
}

impl EmbeddingSource for ShardSet {
    fn entry(&self, id: &str) -> Result<EntryData> {
        let &i = self
            .owner
            .get(id)
            .ok_or_else(|| ContainerError::MissingEntry(id.to_string()))?;
        self.shards[i].entry(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Container;

    #[test]
    fn resolves_across_shards() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Container::new("");
        a.push("x", EntryData::Global(vec![1.0, 2.0])).unwrap();
        let mut b = Container::new("");
        b.push("y", EntryData::Global(vec![3.0, 4.0])).unwrap();
        b.push("z", EntryData::Global(vec![5.0, 6.0])).unwrap();
        a.write(&dir.path().join("a.gfe")).unwrap();
        b.write(&dir.path().join("sub/b.gfe")).unwrap();
        let m = ShardManifest::new(vec![
            ShardRef { path: "a.gfe".into(), entries: 1 },
            ShardRef { path: "sub/b.gfe".into(), entries: 2 },
        ]);
        let mpath = dir.path().join("shards.json");
        m.write(&mpath).unwrap();
        let set = ShardSet::open(&mpath).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.entry("z").unwrap().values(), &[5.0, 6.0]);
        assert!(set.entry("w").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Container::new("");
        a.push("x", EntryData::Global(vec![1.0])).unwrap();
        a.write(&dir.path().join("a.gfe")).unwrap();
        a.write(&dir.path().join("b.gfe")).unwrap();
        let m = ShardManifest::new(vec![
            ShardRef { path: "a.gfe".into(), entries: 1 },
            ShardRef { path: "b.gfe".into(), entries: 1 },
        ]);
        let mpath = dir.path().join("shards.json");
        m.write(&mpath).unwrap();
        assert!(ShardSet::open(&mpath).is_err());
    }
}
