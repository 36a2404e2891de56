//! Single-file encrypted journal.
//!
//! Layout: an 8-byte magic, then a sealed key-check block, then frames of
//! `len:u32le | crc32:u32le | nonce(12) | ciphertext`. Every frame holds one
//! put or delete. A frame whose length or checksum does not hold is a torn
//! tail from an interrupted write and is cut off on open; a frame that
//! checks out but fails authentication is reported as corruption.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use super::{RecordStore, StoreError};

const MAGIC: &[u8; 8] = b"CLJRNL01";
const AAD: &[u8] = b"carelink-journal-v1";
const KEY_CHECK: &[u8] = b"key-check";
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const HEADER_LEN: usize = MAGIC.len() + NONCE_LEN + KEY_CHECK.len() + TAG_LEN;
const FRAME_HEAD: usize = 8;

pub const JOURNAL_FILE: &str = "journal.db";

const OP_PUT: u8 = 1;
const OP_DELETE: u8 = 2;

struct Sealer {
    cipher: ChaCha20Poly1305,
}

impl Sealer {
    fn new(secret: &str) -> Self {
        let digest = Sha256::digest(secret.as_bytes());
        Self { cipher: ChaCha20Poly1305::new(Key::from_slice(&digest)) }
    }

    fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let nonce_bytes: [u8; NONCE_LEN] = rand::random();
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce_bytes), Payload { msg: plaintext, aad: AAD })
            .expect("encryption of in-memory buffer");
        let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
        out.extend_from_slice(&nonce_bytes);
        out.extend_from_slice(&sealed);
        out
    }

    fn open(&self, payload: &[u8]) -> Option<Vec<u8>> {
        if payload.len() < NONCE_LEN + TAG_LEN {
            return None;
        }
        let (nonce, body) = payload.split_at(NONCE_LEN);
        self.cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad: AAD })
            .ok()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JournalOptions {
    /// fsync after every append before acknowledging.
    pub sync_writes: bool,
}

impl Default for JournalOptions {
    fn default() -> Self {
        Self { sync_writes: true }
    }
}

type Index = BTreeMap<(String, String), String>;

pub struct JournalStore {
    path: PathBuf,
    sealer: Sealer,
    options: JournalOptions,
    file: Mutex<File>,
    index: RwLock<Index>,
    recovered_bytes: u64,
}

fn encode_op(op: u8, collection: &str, key: &str, value: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(1 + 2 + 4 + collection.len() + key.len() + value.len());
    buf.push(op);
    buf.extend_from_slice(&(collection.len() as u16).to_le_bytes());
    buf.extend_from_slice(collection.as_bytes());
    buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
    buf.extend_from_slice(key.as_bytes());
    buf.extend_from_slice(value.as_bytes());
    buf
}

fn decode_op(buf: &[u8]) -> Option<(u8, String, String, String)> {
    let op = *buf.first()?;
    let clen = u16::from_le_bytes(buf.get(1..3)?.try_into().ok()?) as usize;
    let collection = std::str::from_utf8(buf.get(3..3 + clen)?).ok()?.to_owned();
    let at = 3 + clen;
    let klen = u32::from_le_bytes(buf.get(at..at + 4)?.try_into().ok()?) as usize;
    let key = std::str::from_utf8(buf.get(at + 4..at + 4 + klen)?).ok()?.to_owned();
    let value = std::str::from_utf8(buf.get(at + 4 + klen..)?).ok()?.to_owned();
    Some((op, collection, key, value))
}

fn frame(sealer: &Sealer, plaintext: &[u8]) -> Vec<u8> {
    let payload = sealer.seal(plaintext);
    let mut out = Vec::with_capacity(FRAME_HEAD + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn io_err(context: &str, e: std::io::Error) -> StoreError {
    StoreError::Io(format!("{context}: {e}"))
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn header(sealer: &Sealer) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&sealer.seal(KEY_CHECK));
    h
}

impl JournalStore {
    /// Opens (or creates) the journal in `dir`, replaying it into memory.
    pub fn open(dir: &Path, secret: &str, options: JournalOptions) -> Result<Self, StoreError> {
        if secret.is_empty() {
            return Err(StoreError::Config("store key must not be empty".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| io_err("creating data directory", e))?;
        let path = dir.join(JOURNAL_FILE);
        let sealer = Sealer::new(secret);

        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| io_err("opening journal", e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| io_err("reading journal", e))?;

        if bytes.len() < HEADER_LEN {
            // New file, or a crash before the header was complete.
            if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
                return Err(StoreError::Corrupt("not a journal file".into()));
            }
            file.set_len(0).map_err(|e| io_err("resetting journal", e))?;
            file.seek(SeekFrom::Start(0)).map_err(|e| io_err("seeking journal", e))?;
            file.write_all(&header(&sealer)).map_err(|e| io_err("writing header", e))?;
            file.sync_all().map_err(|e| io_err("syncing header", e))?;
            sync_dir(dir);
            bytes.clear();
        } else {
            if &bytes[..MAGIC.len()] != MAGIC {
                return Err(StoreError::Corrupt("not a journal file".into()));
            }
            if sealer.open(&bytes[MAGIC.len()..HEADER_LEN]).as_deref() != Some(KEY_CHECK) {
                return Err(StoreError::WrongKey);
            }
        }

        let mut index = Index::new();
        let mut pos = HEADER_LEN.min(bytes.len());
        let mut good_end = HEADER_LEN as u64;
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            if rest.len() < FRAME_HEAD {
                break;
            }
            let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
            let crc = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes"));
            if len < NONCE_LEN + TAG_LEN || rest.len() < FRAME_HEAD + len {
                break;
            }
            let payload = &rest[FRAME_HEAD..FRAME_HEAD + len];
            if crc32fast::hash(payload) != crc {
                break;
            }
            let plain = sealer
                .open(payload)
                .ok_or_else(|| StoreError::Corrupt(format!("frame at offset {pos} failed authentication")))?;
            let (op, collection, key, value) = decode_op(&plain)
                .ok_or_else(|| StoreError::Corrupt(format!("frame at offset {pos} is malformed")))?;
            match op {
                OP_PUT => {
                    index.insert((collection, key), value);
                }
                OP_DELETE => {
                    index.remove(&(collection, key));
                }
                other => return Err(StoreError::Corrupt(format!("unknown op {other} at offset {pos}"))),
            }
            pos += FRAME_HEAD + len;
            good_end = pos as u64;
        }

        let total = if bytes.is_empty() { HEADER_LEN as u64 } else { bytes.len() as u64 };
        let recovered_bytes = total - good_end;
        if recovered_bytes > 0 {
            tracing::warn!(bytes = recovered_bytes, "discarding torn journal tail");
            file.set_len(good_end).map_err(|e| io_err("truncating torn tail", e))?;
            file.sync_all().map_err(|e| io_err("syncing journal", e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| io_err("seeking journal", e))?;

        Ok(Self {
            path,
            sealer,
            options,
            file: Mutex::new(file),
            index: RwLock::new(index),
            recovered_bytes,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Bytes cut from the end of the file during the last open.
    pub fn recovered_bytes(&self) -> u64 {
        self.recovered_bytes
    }

    fn append(&self, file: &mut File, plaintext: &[u8]) -> Result<(), StoreError> {
        let bytes = frame(&self.sealer, plaintext);
        let start = file.stream_position().map_err(|e| io_err("locating journal end", e))?;
        if let Err(e) = file.write_all(&bytes) {
            let _ = file.set_len(start);
            let _ = file.seek(SeekFrom::Start(start));
            return Err(io_err("appending to journal", e));
        }
        if self.options.sync_writes {
            file.sync_data().map_err(|e| io_err("syncing journal", e))?;
        }
        Ok(())
    }

    /// Rewrites the journal with only live records, dropping history and
    /// deleted data from disk.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut file = self.file.lock();
        let index = self.index.read();
        let dir = self.path.parent().unwrap_or(Path::new("."));
        let tmp = self.path.with_extension("compact");
        {
            let mut out = File::create(&tmp).map_err(|e| io_err("creating compaction file", e))?;
            let mut buf = header(&self.sealer);
            for ((collection, key), value) in index.iter() {
                buf.extend_from_slice(&frame(&self.sealer, &encode_op(OP_PUT, collection, key, value)));
            }
            out.write_all(&buf).map_err(|e| io_err("writing compaction file", e))?;
            out.sync_all().map_err(|e| io_err("syncing compaction file", e))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(|e| io_err("replacing journal", e))?;
        sync_dir(dir);
        let mut reopened = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&self.path)
            .map_err(|e| io_err("reopening journal", e))?;
        reopened.seek(SeekFrom::End(0)).map_err(|e| io_err("seeking journal", e))?;
        *file = reopened;
        Ok(())
    }
}

impl RecordStore for JournalStore {
    fn put(&self, collection: &str, key: &str, value: &str) -> Result<(), StoreError> {
        let mut file = self.file.lock();
        self.append(&mut file, &encode_op(OP_PUT, collection, key, value))?;
        self.index.write().insert((collection.to_owned(), key.to_owned()), value.to_owned());
        Ok(())
    }

    fn delete(&self, collection: &str, key: &str) -> Result<(), StoreError> {
        let mut file = self.file.lock();
        let id = (collection.to_owned(), key.to_owned());
        if !self.index.read().contains_key(&id) {
            return Ok(());
        }
        self.append(&mut file, &encode_op(OP_DELETE, collection, key, ""))?;
        self.index.write().remove(&id);
        Ok(())
    }

    fn get(&self, collection: &str, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self.index.read().get(&(collection.to_owned(), key.to_owned())).cloned())
    }

    fn scan(&self, collection: &str) -> Result<Vec<(String, String)>, StoreError> {
        Ok(self
            .index
            .read()
            .range((collection.to_owned(), String::new())..)
            .take_while(|((c, _), _)| c == collection)
            .map(|((_, k), v)| (k.clone(), v.clone()))
            .collect())
    }

    fn collections(&self) -> Vec<String> {
        let mut out: Vec<String> = self.index.read().keys().map(|(c, _)| c.clone()).collect();
        out.dedup();
        out
    }

    fn compact(&self) -> Result<(), StoreError> {
        JournalStore::compact(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(dir: &Path) -> JournalStore {
        JournalStore::open(dir, "test-key", JournalOptions::default()).unwrap()
    }

    #[test]
    fn values_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let j = open(dir.path());
            j.put("patients", "a", r#"{"name":"Alice"}"#).unwrap();
            j.put("patients", "b", r#"{"name":"Bob"}"#).unwrap();
            j.put("patients", "a", r#"{"name":"Alicia"}"#).unwrap();
            j.delete("patients", "b").unwrap();
        }
        let j = open(dir.path());
        assert_eq!(j.get("patients", "a").unwrap().as_deref(), Some(r#"{"name":"Alicia"}"#));
        assert_eq!(j.get("patients", "b").unwrap(), None);
        assert_eq!(j.recovered_bytes(), 0);
    }

    #[test]
    fn wrong_key_refused() {
        let dir = tempfile::tempdir().unwrap();
        open(dir.path()).put("x", "1", "v").unwrap();
        assert!(matches!(
            JournalStore::open(dir.path(), "other", JournalOptions::default()),
            Err(StoreError::WrongKey)
        ));
    }

    #[test]
    fn no_plaintext_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let j = open(dir.path());
        j.put("patients", "patient-zed", r#"{"name":"Zebediah Quackenbush"}"#).unwrap();
        let raw = std::fs::read(j.path()).unwrap();
        for needle in ["Zebediah", "Quackenbush", "patients", "patient-zed"] {
            assert!(!raw.windows(needle.len()).any(|w| w == needle.as_bytes()), "{needle}");
        }
    }

    #[test]
    fn every_truncation_point_recovers_a_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path;
        {
            let j = open(dir.path());
            for i in 0..5 {
                j.put("c", &format!("k{i}"), &format!("value-{i}")).unwrap();
            }
            path = j.path().to_owned();
        }
        let full = std::fs::read(&path).unwrap();
        for cut in HEADER_LEN..full.len() {
            std::fs::write(&path, &full[..cut]).unwrap();
            let j = open(dir.path());
            let rows = j.scan("c").unwrap();
            for (i, (k, v)) in rows.iter().enumerate() {
                assert_eq!(k, &format!("k{i}"));
                assert_eq!(v, &format!("value-{i}"));
            }
            drop(j);
            // Recovery leaves a clean file that accepts further writes.
            let j = open(dir.path());
            j.put("c", "after", "x").unwrap();
        }
    }

    #[test]
    fn flipped_byte_in_body_is_reported_or_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let j = open(dir.path());
            j.put("c", "k", "value").unwrap();
            j.path().to_owned()
        };
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        // The checksum no longer matches, so the frame is treated as torn.
        let j = open(dir.path());
        assert_eq!(j.get("c", "k").unwrap(), None);
    }

    #[test]
    fn compaction_keeps_live_records_only() {
        let dir = tempfile::tempdir().unwrap();
        let j = open(dir.path());
        for i in 0..20 {
            j.put("c", "k", &format!("v{i}")).unwrap();
        }
        j.put("c", "gone", "secret-data").unwrap();
        j.delete("c", "gone").unwrap();
        let before = std::fs::metadata(j.path()).unwrap().len();
        j.compact().unwrap();
        let after = std::fs::metadata(j.path()).unwrap().len();
        assert!(after < before);
        j.put("c", "later", "x").unwrap();
        drop(j);
        let j = open(dir.path());
        assert_eq!(j.get("c", "k").unwrap().as_deref(), Some("v19"));
        assert_eq!(j.get("c", "gone").unwrap(), None);
        assert_eq!(j.get("c", "later").unwrap().as_deref(), Some("x"));
    }

    #[test]
    fn op_codec_roundtrip() {
        let buf = encode_op(OP_PUT, "sessions", "s-1", "{\"a\":1}");
        assert_eq!(decode_op(&buf), Some((OP_PUT, "sessions".into(), "s-1".into(), "{\"a\":1}".into())));
    }
}
