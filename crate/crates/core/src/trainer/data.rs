//! Byte-level tokenization, document packing and corpus shards.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TrainWindow;

/// Ids below this are raw byte values.
pub const BYTE_VOCAB: usize = 256;
/// Joins packed documents. The NUL byte never occurs in the text corpora.
pub const SEPARATOR: usize = 0;

pub fn tokenize_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn detokenize_bytes(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange { id, vocab: BYTE_VOCAB })
        })
        .collect()
}

/// Invalid UTF-8 sequences are replaced, so generated text always decodes.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    Ok(String::from_utf8_lossy(&detokenize_bytes(ids)?).into_owned())
}

/// Joins `documents` with `separator` and cuts the stream into consecutive
/// windows of `seq_len` inputs. Window `i` reads `stream[i*L ..= i*L + L]`, so
/// targets are the inputs shifted by one and `(n - 1) / L` windows exist.
pub fn pack_tokens(documents: &[Vec<usize>], seq_len: usize, separator: usize) -> Result<Vec<TrainWindow>> {
    if documents.is_empty() {
        return Err(Error::InvalidArgument("pack_tokens needs at least one document".into()));
    }
    if seq_len < 2 {
        return Err(Error::InvalidArgument(format!("seq_len must be >= 2, got {seq_len}")));
    }
    let mut stream = Vec::with_capacity(documents.iter().map(|d| d.len() + 1).sum());
    for (i, doc) in documents.iter().enumerate() {
        if i > 0 {
            stream.push(separator);
        }
        stream.extend_from_slice(doc);
    }
    if stream.len() <= seq_len {
        return Ok(Vec::new());
    }
    let n = (stream.len() - 1) / seq_len;
    Ok((0..n)
        .map(|i| {
            let s = &stream[i * seq_len..=(i + 1) * seq_len];
            TrainWindow {
                tokens: s[..seq_len].to_vec(),
                targets: s[1..].to_vec(),
                mask: vec![true; seq_len],
            }
        })
        .collect())
}

/// Splits text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<Vec<usize>> {
    text.split("\n\n")
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(tokenize_bytes)
        .collect()
}

/// Tokenized corpus shards keyed by name.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub shards: BTreeMap<String, Vec<Vec<usize>>>,
}

impl Corpus {
    /// A file becomes one shard named by its stem. A directory contributes one
    /// shard per `.txt` file.
    pub fn load(path: &Path) -> Result<Self> {
        let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
        let files = if meta.is_dir() {
            let mut files: Vec<_> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            files
        } else {
            vec![path.to_path_buf()]
        };
        let mut shards = BTreeMap::new();
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            shards.insert(name, split_documents(&text));
        }
        Self::from_shards(shards)
    }

    pub fn from_text(name: &str, text: &str) -> Result<Self> {
        Self::from_shards(BTreeMap::from([(name.to_string(), split_documents(text))]))
    }

    fn from_shards(shards: BTreeMap<String, Vec<Vec<usize>>>) -> Result<Self> {
        if shards.values().all(|docs| docs.iter().all(Vec::is_empty)) {
            return Err(Error::Config("corpus is empty".into()));
        }
        Ok(Self { shards })
    }

    /// FNV-1a over every shard name and token, identifying the corpus in
    /// checkpoints.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (name, docs) in &self.shards {
            h.write(name.as_bytes());
            for doc in docs {
                h.write_u64(doc.len() as u64);
                for &t in doc {
                    h.write_u16(t as u16);
                }
            }
        }
        h.finish()
    }
}
