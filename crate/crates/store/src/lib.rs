// SPDX-License-Identifier: Apache-2.0

//! Embedded single-file key-value store.
//!
//! Every record lives in a namespace and carries a per-key version that
//! increments by one on each committed write. Writes are appended to a log
//! file as checksummed frames; a frame is either fully present and valid or
//! it is discarded on reopen, so an interrupted write leaves the previous
//! value in place. The whole index is held in memory and rebuilt from the log
//! when the store is opened.
//!
//! The on-disk layout is described in `docs/FORMATS.md`.

mod format;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use format::{FORMAT_VERSION, MAGIC};

/// Record namespaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Users,
    Events,
    Fixes,
    Fences,
    Feedback,
    Posts,
    Notifications,
    Models,
    Pois,
}

impl Namespace {
    pub const ALL: [Namespace; 9] = [
        Namespace::Users,
        Namespace::Events,
        Namespace::Fixes,
        Namespace::Fences,
        Namespace::Feedback,
        Namespace::Posts,
        Namespace::Notifications,
        Namespace::Models,
        Namespace::Pois,
    ];

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Namespace::Users => "users",
            Namespace::Events => "events",
            Namespace::Fixes => "fixes",
            Namespace::Fences => "fences",
            Namespace::Feedback => "feedback",
            Namespace::Posts => "posts",
            Namespace::Notifications => "notifications",
            Namespace::Models => "models",
            Namespace::Pois => "pois",
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("version conflict on {namespace}/{key}: expected {expected}, found {found}")]
    VersionConflict {
        namespace: &'static str,
        key: String,
        expected: u64,
        found: u64,
    },
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("store file is corrupt: {0}")]
    Corrupt(String),
    #[error("store is unusable after an interrupted write; reopen it")]
    Poisoned,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// A committed record as returned by [`Store::scan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub namespace: Namespace,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SyncMode {
    /// fsync after every committed frame.
    #[default]
    Always,
    /// Leave flushing to the OS. Only for tests and bulk imports.
    Never,
}

#[derive(Clone, Debug)]
struct Entry {
    // None marks a tombstone; the version survives deletion so a later put
    // cannot reuse an old version number.
    value: Option<Vec<u8>>,
    version: u64,
}

type Index = BTreeMap<(Namespace, Vec<u8>), Entry>;

struct Writer {
    file: File,
    poisoned: bool,
    crash_after: Option<usize>,
}

struct Inner {
    path: PathBuf,
    sync: SyncMode,
    index: RwLock<Index>,
    writer: Mutex<Writer>,
}

/// Shared handle to an open store. Cloning is cheap.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

/// One operation inside a [`WriteBatch`].
#[derive(Clone, Debug)]
enum BatchOp {
    Put {
        namespace: Namespace,
        key: Vec<u8>,
        value: Vec<u8>,
        expected: Option<u64>,
    },
    Delete {
        namespace: Namespace,
        key: Vec<u8>,
        expected: Option<u64>,
    },
}

/// A group of writes committed atomically as one log frame.
#[derive(Clone, Debug, Default)]
pub struct WriteBatch {
    ops: Vec<BatchOp>,
}

impl WriteBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// `expected` follows the same convention as [`Store::put`].
    pub fn put(
        &mut self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        value: impl Into<Vec<u8>>,
        expected: Option<u64>,
    ) -> &mut Self {
        self.ops.push(BatchOp::Put {
            namespace,
            key: key.into(),
            value: value.into(),
            expected,
        });
        self
    }

    pub fn put_json<T: Serialize>(
        &mut self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        doc: &T,
        expected: Option<u64>,
    ) -> Result<&mut Self> {
        let value = serde_json::to_vec(doc)?;
        Ok(self.put(namespace, key, value, expected))
    }

    pub fn delete(
        &mut self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        expected: Option<u64>,
    ) -> &mut Self {
        self.ops.push(BatchOp::Delete {
            namespace,
            key: key.into(),
            expected,
        });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }
}

/// Zero-padded epoch seconds used as the time segment of event and fix keys,
/// so that lexicographic key order matches time order.
pub fn time_key(epoch_secs: i64) -> String {
    format!("{:012}", epoch_secs.max(0))
}

impl Store {
    /// Opens (or creates) the store file at `path`, replaying the log.
    ///
    /// A torn frame at the tail of the log is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, SyncMode::Always)
    }

    pub fn open_with(path: impl AsRef<Path>, sync: SyncMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;

        let mut index = Index::new();
        let replay = format::replay(&mut file, |frame| apply_frame(&mut index, frame))?;
        if replay.torn_tail {
            file.set_len(replay.valid_len)?;
            file.sync_all()?;
        }
        format::seek_end(&mut file)?;

        Ok(Self {
            inner: Arc::new(Inner {
                path,
                sync,
                index: RwLock::new(index),
                writer: Mutex::new(Writer {
                    file,
                    poisoned: false,
                    crash_after: None,
                }),
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    /// Writes `value` under `(namespace, key)` and returns the new version.
    ///
    /// With `expected_version = Some(v)` the write only succeeds when the
    /// current version is `v`; `Some(0)` requires the key to be absent.
    pub fn put(
        &self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        value: impl Into<Vec<u8>>,
        expected_version: Option<u64>,
    ) -> Result<u64> {
        let mut batch = WriteBatch::new();
        batch.put(namespace, key, value, expected_version);
        Ok(self.commit(batch)?[0])
    }

    pub fn put_json<T: Serialize>(
        &self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        doc: &T,
        expected_version: Option<u64>,
    ) -> Result<u64> {
        let value = serde_json::to_vec(doc)?;
        self.put(namespace, key, value, expected_version)
    }

    pub fn delete(
        &self,
        namespace: Namespace,
        key: impl Into<Vec<u8>>,
        expected_version: Option<u64>,
    ) -> Result<u64> {
        let mut batch = WriteBatch::new();
        batch.delete(namespace, key, expected_version);
        Ok(self.commit(batch)?[0])
    }

    pub fn get(&self, namespace: Namespace, key: impl AsRef<[u8]>) -> Option<(Vec<u8>, u64)> {
        let index = self.inner.index.read().expect("index lock poisoned");
        index
            .get(&(namespace, key.as_ref().to_vec()))
            .and_then(|e| e.value.clone().map(|v| (v, e.version)))
    }

    pub fn get_json<T: DeserializeOwned>(
        &self,
        namespace: Namespace,
        key: impl AsRef<[u8]>,
    ) -> Result<Option<(T, u64)>> {
        match self.get(namespace, key) {
            Some((bytes, version)) => Ok(Some((serde_json::from_slice(&bytes)?, version))),
            None => Ok(None),
        }
    }

    /// Current version of a key, 0 if it has never been written or is deleted
    /// and never re-created.
    pub fn version(&self, namespace: Namespace, key: impl AsRef<[u8]>) -> u64 {
        let index = self.inner.index.read().expect("index lock poisoned");
        index
            .get(&(namespace, key.as_ref().to_vec()))
            .map_or(0, |e| e.version)
    }

    /// Key-ordered snapshot of live records whose key starts with `prefix`.
    ///
    /// With `time_range = Some((from, to))` only keys whose segment right
    /// after the prefix lies in `[time_key(from), time_key(to))` are kept.
    pub fn scan(
        &self,
        namespace: Namespace,
        prefix: impl AsRef<[u8]>,
        time_range: Option<(i64, i64)>,
    ) -> std::vec::IntoIter<Record> {
        let prefix = prefix.as_ref();
        let (lower, upper) = match time_range {
            Some((from, to)) => {
                let mut lo = prefix.to_vec();
                lo.extend_from_slice(time_key(from).as_bytes());
                let mut hi = prefix.to_vec();
                hi.extend_from_slice(time_key(to).as_bytes());
                (lo, Some(hi))
            }
            None => (prefix.to_vec(), None),
        };
        let index = self.inner.index.read().expect("index lock poisoned");
        let start = Bound::Included((namespace, lower));
        let end = match upper {
            Some(hi) => Bound::Excluded((namespace, hi)),
            None => Bound::Unbounded,
        };
        let out: Vec<Record> = index
            .range((start, end))
            .take_while(|((ns, key), _)| *ns == namespace && key.starts_with(prefix))
            .filter_map(|((ns, key), entry)| {
                entry.value.as_ref().map(|value| Record {
                    namespace: *ns,
                    key: key.clone(),
                    value: value.clone(),
                    version: entry.version,
                })
            })
            .collect();
        out.into_iter()
    }

    pub fn scan_json<T: DeserializeOwned>(
        &self,
        namespace: Namespace,
        prefix: impl AsRef<[u8]>,
        time_range: Option<(i64, i64)>,
    ) -> Result<Vec<(Vec<u8>, T)>> {
        self.scan(namespace, prefix, time_range)
            .map(|r| Ok((r.key, serde_json::from_slice(&r.value)?)))
            .collect()
    }

    /// Commits every operation in `batch` atomically. Returns the new
    /// version of each touched key, in batch order.
    pub fn commit(&self, batch: WriteBatch) -> Result<Vec<u64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut writer = self.inner.writer.lock().expect("writer lock poisoned");
        if writer.poisoned {
            return Err(StoreError::Poisoned);
        }

        // Versions are assigned against the committed index plus earlier
        // operations of this batch touching the same key.
        let mut pending: BTreeMap<(Namespace, Vec<u8>), (u64, bool)> = BTreeMap::new();
        let mut frame_ops = Vec::with_capacity(batch.ops.len());
        {
            let index = self.inner.index.read().expect("index lock poisoned");
            for op in batch.ops {
                let (namespace, key, value, expected) = match op {
                    BatchOp::Put {
                        namespace,
                        key,
                        value,
                        expected,
                    } => (namespace, key, Some(value), expected),
                    BatchOp::Delete {
                        namespace,
                        key,
                        expected,
                    } => (namespace, key, None, expected),
                };
                let id = (namespace, key);
                let (current, live) = pending.get(&id).copied().unwrap_or_else(|| {
                    index
                        .get(&id)
                        .map_or((0, false), |e| (e.version, e.value.is_some()))
                });
                if let Some(exp) = expected {
                    let ok = if exp == 0 { !live } else { live && current == exp };
                    if !ok {
                        return Err(StoreError::VersionConflict {
                            namespace: namespace.name(),
                            key: String::from_utf8_lossy(&id.1).into_owned(),
                            expected: exp,
                            found: if live { current } else { 0 },
                        });
                    }
                }
                let version = current + 1;
                pending.insert(id.clone(), (version, value.is_some()));
                frame_ops.push(format::FrameOp {
                    namespace,
                    key: id.1,
                    value,
                    version,
                });
            }
        }

        let frame = format::encode_frame(&frame_ops);
        if let Some(limit) = writer.crash_after.take() {
            // Simulated process death part-way through the write.
            let cut = limit.min(frame.len().saturating_sub(1));
            writer.file.write_all(&frame[..cut])?;
            writer.file.flush()?;
            writer.poisoned = true;
            return Err(StoreError::Poisoned);
        }
        if let Err(e) = writer.file.write_all(&frame) {
            writer.poisoned = true;
            return Err(e.into());
        }
        if self.inner.sync == SyncMode::Always {
            writer.file.sync_data()?;
        }

        let versions = frame_ops.iter().map(|op| op.version).collect();
        let mut index = self.inner.index.write().expect("index lock poisoned");
        for op in frame_ops {
            index.insert(
                (op.namespace, op.key),
                Entry {
                    value: op.value,
                    version: op.version,
                },
            );
        }
        Ok(versions)
    }

    /// Arms a simulated crash: the next commit writes only the first
    /// `bytes` bytes of its frame and the handle becomes unusable, as if the
    /// process had been killed mid-write. Reopen the path to recover.
    pub fn arm_crash_after(&self, bytes: usize) {
        self.inner.writer.lock().expect("writer lock poisoned").crash_after = Some(bytes);
    }

    /// Size in bytes of the frame a batch would produce; lets crash tests
    /// pick interruption points inside the frame.
    pub fn frame_len(namespace: Namespace, key: &[u8], value: &[u8]) -> usize {
        format::encode_frame(&[format::FrameOp {
            namespace,
            key: key.to_vec(),
            value: Some(value.to_vec()),
            version: 1,
        }])
        .len()
    }

    /// Rewrites the log keeping only the latest state of every key, then
    /// atomically replaces the old file.
    pub fn compact(&self) -> Result<()> {
        let mut writer = self.inner.writer.lock().expect("writer lock poisoned");
        if writer.poisoned {
            return Err(StoreError::Poisoned);
        }
        let index = self.inner.index.read().expect("index lock poisoned");
        let tmp = self.inner.path.with_extension("compact");
        {
            let mut out = File::create(&tmp)?;
            out.write_all(&format::header())?;
            for ((namespace, key), entry) in index.iter() {
                let frame = format::encode_frame(&[format::FrameOp {
                    namespace: *namespace,
                    key: key.clone(),
                    value: entry.value.clone(),
                    version: entry.version,
                }]);
                out.write_all(&frame)?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, &self.inner.path)?;
        let mut file = OpenOptions::new().read(true).write(true).open(&self.inner.path)?;
        format::seek_end(&mut file)?;
        writer.file = file;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let writer = self.inner.writer.lock().expect("writer lock poisoned");
        writer.file.sync_all()?;
        Ok(())
    }
}

fn apply_frame(index: &mut Index, ops: Vec<format::FrameOp>) {
    for op in ops {
        index.insert(
            (op.namespace, op.key),
            Entry {
                value: op.value,
                version: op.version,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with(dir.path().join("db.log"), SyncMode::Never).unwrap();
        (dir, store)
    }

    #[test]
    fn fresh_key_gets_version_one() {
        let (_dir, store) = temp_store();
        assert_eq!(store.put(Namespace::Users, "u1", "a", None).unwrap(), 1);
        assert_eq!(store.put(Namespace::Users, "u1", "b", None).unwrap(), 2);
    }

    #[test]
    fn stale_expected_version_conflicts() {
        let (_dir, store) = temp_store();
        store.put(Namespace::Posts, "p", "v1", None).unwrap();
        store.put(Namespace::Posts, "p", "v2", Some(1)).unwrap();
        let err = store.put(Namespace::Posts, "p", "v3", Some(1)).unwrap_err();
        assert!(matches!(err, StoreError::VersionConflict { found: 2, .. }));
        assert_eq!(store.get(Namespace::Posts, "p").unwrap().0, b"v2");
    }

    #[test]
    fn expected_zero_means_absent() {
        let (_dir, store) = temp_store();
        assert_eq!(store.put(Namespace::Users, "u", "x", Some(0)).unwrap(), 1);
        assert!(store.put(Namespace::Users, "u", "y", Some(0)).is_err());
    }

    #[test]
    fn missing_key_is_none() {
        let (_dir, store) = temp_store();
        assert!(store.get(Namespace::Events, "nope").is_none());
    }

    #[test]
    fn values_round_trip_bit_exact() {
        let (dir, store) = temp_store();
        let value: Vec<u8> = (0..=255u8).chain([0, 0, 255]).collect();
        store.put(Namespace::Models, "m", value.clone(), None).unwrap();
        assert_eq!(store.get(Namespace::Models, "m").unwrap().0, value);
        drop(store);
        let reopened = Store::open(dir.path().join("db.log")).unwrap();
        assert_eq!(reopened.get(Namespace::Models, "m").unwrap(), (value, 1));
    }

    #[test]
    fn delete_keeps_version_monotone() {
        let (_dir, store) = temp_store();
        store.put(Namespace::Fences, "f", "a", None).unwrap();
        assert_eq!(store.delete(Namespace::Fences, "f", Some(1)).unwrap(), 2);
        assert!(store.get(Namespace::Fences, "f").is_none());
        assert_eq!(store.put(Namespace::Fences, "f", "b", Some(0)).unwrap(), 3);
    }

    #[test]
    fn scan_is_prefix_and_namespace_bounded() {
        let (_dir, store) = temp_store();
        assert_eq!(store.scan(Namespace::Events, "", None).count(), 0);
        store.put(Namespace::Events, "user1/000000000010/a", "1", None).unwrap();
        store.put(Namespace::Events, "user1/000000000020/b", "2", None).unwrap();
        store.put(Namespace::Events, "user10/000000000015/c", "3", None).unwrap();
        store.put(Namespace::Fixes, "user1/000000000010/z", "4", None).unwrap();
        let keys: Vec<_> = store
            .scan(Namespace::Events, "user1/", None)
            .map(|r| String::from_utf8(r.key).unwrap())
            .collect();
        assert_eq!(keys, ["user1/000000000010/a", "user1/000000000020/b"]);
    }

    #[test]
    fn time_range_is_half_open() {
        let (_dir, store) = temp_store();
        for t in [10, 20, 30] {
            let key = format!("u/{}/e{t}", time_key(t));
            store.put(Namespace::Events, key, "x", None).unwrap();
        }
        let hits: Vec<_> = store
            .scan(Namespace::Events, "u/", Some((10, 30)))
            .map(|r| String::from_utf8(r.key).unwrap())
            .collect();
        assert_eq!(hits, ["u/000000000010/e10", "u/000000000020/e20"]);
    }

    #[test]
    fn batch_is_all_or_nothing_on_conflict() {
        let (_dir, store) = temp_store();
        store.put(Namespace::Users, "a", "1", None).unwrap();
        let mut batch = WriteBatch::new();
        batch
            .put(Namespace::Users, "b", "2", None)
            .put(Namespace::Users, "a", "3", Some(7));
        assert!(store.commit(batch).is_err());
        assert!(store.get(Namespace::Users, "b").is_none());
    }

    #[test]
    fn crash_leaves_old_value() {
        let (dir, store) = temp_store();
        store.put(Namespace::Users, "k", "old", None).unwrap();
        store.arm_crash_after(5);
        assert!(matches!(
            store.put(Namespace::Users, "k", "new", None),
            Err(StoreError::Poisoned)
        ));
        assert!(matches!(
            store.put(Namespace::Users, "k", "again", None),
            Err(StoreError::Poisoned)
        ));
        drop(store);
        let reopened = Store::open(dir.path().join("db.log")).unwrap();
        assert_eq!(reopened.get(Namespace::Users, "k").unwrap(), (b"old".to_vec(), 1));
        // the torn tail is gone, so new writes land cleanly
        reopened.put(Namespace::Users, "k", "new", Some(1)).unwrap();
    }

    #[test]
    fn compaction_preserves_state() {
        let (dir, store) = temp_store();
        for i in 0..20 {
            store.put(Namespace::Users, "k", format!("v{i}"), None).unwrap();
        }
        store.put(Namespace::Users, "gone", "x", None).unwrap();
        store.delete(Namespace::Users, "gone", None).unwrap();
        let before = fs::metadata(store.path()).unwrap().len();
        store.compact().unwrap();
        assert!(fs::metadata(store.path()).unwrap().len() < before);
        store.put(Namespace::Users, "k", "after", Some(20)).unwrap();
        drop(store);
        let reopened = Store::open(dir.path().join("db.log")).unwrap();
        assert_eq!(reopened.get(Namespace::Users, "k").unwrap(), (b"after".to_vec(), 21));
        assert_eq!(reopened.version(Namespace::Users, "gone"), 2);
    }

    #[test]
    fn bad_header_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.log");
        fs::write(&path, b"not a store file at all").unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::Corrupt(_))));
    }
}
