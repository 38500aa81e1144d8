//! Persistence: JSON-lines artifacts, the content-addressed response cache,
//! and per-run manifests.
//!
//! Layout under an output root:
//!
//! ```text
//! runs/<run_id>/manifest.json
//! runs/<run_id>/*.jsonl
//! cache/<2-char shard>/<digest>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// One record per line, UTF-8, trailing newline. Returns the content digest.
pub fn persist_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<String> {
    let bytes = jsonl_bytes(records)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::parse(
                    path.display().to_string(),
                    format!("line {}", i + 1),
                    e.to_string(),
                )
            })
        })
        .collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// Cache key: a pure function of the endpoint fingerprint and request body.
pub fn request_digest(endpoint_fingerprint: &str, request_body: &str) -> String {
    // Length prefix keeps the field boundary unambiguous.
    sha256_hex(format!(
        "{}:{endpoint_fingerprint}{request_body}",
        endpoint_fingerprint.len()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response: serde_json::Value,
    pub created_at: u64,
    pub endpoint_fingerprint: String,
}

/// Content-addressed response cache on the local filesystem. Reads are
/// lock-free; writes are serialized and atomic.
#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<ResponseCache> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ResponseCache {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, digest: &str) -> Result<PathBuf> {
        if digest.len() < 3 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Cache(format!("malformed digest `{digest}`")));
        }
        Ok(self.root.join(&digest[..2]).join(digest))
    }

    /// `Ok(None)` on a miss; `Err(Cache)` when an entry exists but is corrupt.
    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(digest)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry =
            serde_json::from_slice(&bytes).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        if entry.request_digest != digest {
            return Err(Error::Cache(format!("{}: digest mismatch", path.display())));
        }
        Ok(Some(entry))
    }

    /// Idempotent: an existing valid entry for the digest is left untouched.
    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.path_for(&entry.request_digest)?;
        let _guard = self.write_lock.lock().unwrap();
        if let Ok(Some(_)) = self.get(&entry.request_digest) {
            return Ok(());
        }
        let bytes = serde_json::to_vec(entry)?;
        write_atomic(&path, &bytes).map_err(|e| Error::Cache(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Split,
    Generate,
    Rewrite,
    Select,
    Export,
    Evaluate,
    Robustness,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the run directory.
    pub path: String,
    pub digest: String,
}

/// One completed stage. Timestamps are excluded from [`StageRecord::digest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config_digest: String,
    pub effective_config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seed: u64,
    pub endpoint_fingerprints: BTreeMap<String, String>,
    /// Stage reports (gate verdicts, sampling shortfalls, provenance ...).
    pub reports: BTreeMap<String, serde_json::Value>,
    pub parent_digest: Option<String>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl StageRecord {
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("stage record serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("started_at");
            obj.remove("finished_at");
        }
        sha256_hex(v.to_string())
    }

    /// Same stage, same config and same inputs.
    pub fn same_work(&self, other: &StageRecord) -> bool {
        self.stage == other.stage
            && self.config_digest == other.config_digest
            && self.inputs == other.inputs
            && self.seed == other.seed
    }
}

/// Append-only chain of stage records for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub entries: Vec<StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(run_id: impl Into<String>) -> Self {
        RunManifest {
            run_id: run_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn load_or_new(run_dir: &Path, run_id: &str) -> Result<RunManifest> {
        let path = run_dir.join(Self::FILE);
        match fs::read(&path) {
            Ok(bytes) => {
                let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| {
                    Error::parse(
                        path.display().to_string(),
                        format!("line {}", e.line()),
                        e.to_string(),
                    )
                })?;
                m.check_chain()?;
                Ok(m)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::new(run_id)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn head_digest(&self) -> Option<String> {
        self.entries.last().map(StageRecord::digest)
    }

    pub fn latest(&self, stage: Stage) -> Option<&StageRecord> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    /// Links `record` to the current head and appends it.
    pub fn append(&mut self, mut record: StageRecord) {
        record.parent_digest = self.head_digest();
        self.entries.push(record);
    }

    pub fn check_chain(&self) -> Result<()> {
        let mut parent = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.parent_digest != parent {
                return Err(Error::Validation(format!(
                    "manifest entry {i} ({}) does not chain to its predecessor",
                    e.stage
                )));
            }
            parent = Some(e.digest());
        }
        Ok(())
    }

    /// Every output file's most recent listing exists and matches its digest.
    pub fn verify_outputs(&self, run_dir: &Path) -> Result<()> {
        let mut latest: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &self.entries {
            for f in &e.outputs {
                latest.insert(&f.path, &f.digest);
            }
        }
        for (path, digest) in latest {
            let full = run_dir.join(path);
            if !full.exists() {
                return Err(Error::Validation(format!("listed output {path} is missing")));
            }
            if file_digest(&full)? != digest {
                return Err(Error::Validation(format!("listed output {path} changed on disk")));
            }
        }
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(&run_dir.join(Self::FILE), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn jsonl_shape_and_stable_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let recs = vec![
            serde_json::json!({"b": 1, "a": "x"}),
            serde_json::json!({"c": null}),
        ];
        let d1 = persist_jsonl(&recs, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert_eq!(d1, persist_jsonl(&recs, &p).unwrap());
        assert_eq!(d1, file_digest(&p).unwrap());
        let back: Vec<serde_json::Value> = read_jsonl(&p).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn empty_jsonl_has_valid_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        let d = persist_jsonl::<serde_json::Value>(&[], &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 0);
        assert_eq!(d, sha256_hex(b""));
    }

    #[test]
    fn read_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{}\n{oops\n").unwrap();
        match read_jsonl::<serde_json::Value>(&p).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            e => panic!("{e:?}"),
        }
    }

    fn entry(digest: &str, body: &str) -> CacheEntry {
        CacheEntry {
            request_digest: digest.to_string(),
            response: serde_json::json!({ "text": body }),
            created_at: 1,
            endpoint_fingerprint: "fp".into(),
        }
    }

    #[test]
    fn cache_put_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let d = request_digest("fp", "{\"prompt\":\"P\"}");
        assert_eq!(cache.get(&d).unwrap(), None);
        cache.put(&entry(&d, "X")).unwrap();
        assert_eq!(cache.get(&d).unwrap().unwrap().response["text"], "X");
        // idempotent: first value wins
        cache.put(&entry(&d, "Y")).unwrap();
        assert_eq!(cache.get(&d).unwrap().unwrap().response["text"], "X");
        assert!(dir.path().join(&d[..2]).join(&d).exists());
    }

    #[test]
    fn corrupt_cache_entry_is_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let d = request_digest("fp", "body");
        fs::create_dir_all(dir.path().join(&d[..2])).unwrap();
        fs::write(dir.path().join(&d[..2]).join(&d), b"{not json").unwrap();
        assert!(matches!(cache.get(&d), Err(Error::Cache(_))));
        // a put replaces the corrupt entry
        cache.put(&entry(&d, "ok")).unwrap();
        assert!(cache.get(&d).unwrap().is_some());
    }

    #[test]
    fn request_digest_depends_on_fingerprint_and_body() {
        assert_eq!(request_digest("a", "b"), request_digest("a", "b"));
        assert_ne!(request_digest("a", "b"), request_digest("a2", "b"));
        assert_ne!(request_digest("a", "b"), request_digest("a", "b2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]
        #[test]
        fn cache_matches_map_oracle(ops in prop::collection::vec((any::<bool>(), 0u8..40, 0u32..5), 250)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ResponseCache::open(dir.path()).unwrap();
            let mut oracle: HashMap<String, String> = HashMap::new();
            for (is_put, key, val) in ops {
                let d = request_digest("fp", &key.to_string());
                if is_put {
                    cache.put(&entry(&d, &val.to_string())).unwrap();
                    oracle.entry(d).or_insert(val.to_string());
                } else {
                    let got = cache.get(&d).unwrap().map(|e| e.response["text"].as_str().unwrap().to_string());
                    prop_assert_eq!(got, oracle.get(&d).cloned());
                }
            }
        }
    }

    fn record(stage: Stage, t: u64) -> StageRecord {
        StageRecord {
            stage,
            config_digest: "c".into(),
            effective_config: serde_json::json!({}),
            inputs: vec![],
            outputs: vec![],
            seed: 1,
            endpoint_fingerprints: BTreeMap::new(),
            reports: BTreeMap::new(),
            parent_digest: None,
            started_at: t,
            finished_at: t + 1,
        }
    }

    #[test]
    fn digest_ignores_timestamps() {
        assert_eq!(
            record(Stage::Ingest, 1).digest(),
            record(Stage::Ingest, 999).digest()
        );
        assert_ne!(
            record(Stage::Ingest, 1).digest(),
            record(Stage::Split, 1).digest()
        );
    }

    #[test]
    fn manifest_chain_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let d = persist_jsonl(&[1, 2, 3], &dir.path().join("a.jsonl")).unwrap();
        let mut m = RunManifest::new("r");
        let mut r = record(Stage::Ingest, 5);
        r.outputs.push(FileDigest {
            path: "a.jsonl".into(),
            digest: d,
        });
        m.append(r);
        m.append(record(Stage::Split, 6));
        m.check_chain().unwrap();
        m.verify_outputs(dir.path()).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load_or_new(dir.path(), "r").unwrap(), m);

        fs::write(dir.path().join("a.jsonl"), "tampered\n").unwrap();
        assert!(m.verify_outputs(dir.path()).is_err());

        m.entries.swap(0, 1);
        assert!(m.check_chain().is_err());
    }
}
