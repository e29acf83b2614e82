//! Triple files, vocabularies, filter indexes and mini-batching.
//!
//! Dataset directories hold `train.txt`, `valid.txt` and `test.txt`, one
//! `head<TAB>relation<TAB>tail` triple per line. Ids are assigned in
//! first-seen order over train, then valid, then test.
//!
//! The binary cache written by [`write_cache`] is laid out as (all integers
//! little-endian):
//!
//! ```text
//! magic      8 bytes  "MEIMTRPL"
//! version    u16      1
//! entities   u32      vocabulary size
//! relations  u32      vocabulary size
//! train      u32      triple count
//! valid      u32      triple count
//! test       u32      triple count
//! triples    (train + valid + test) x [head u32, relation u32, tail u32]
//! names      entities + relations x [length u32, UTF-8 bytes]
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeimError, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"MEIMTRPL";
pub const CACHE_VERSION: u16 = 1;
pub const CACHE_FILE: &str = "triples.bin";

/// An integer-encoded `(head, tail, relation)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
}

impl Triple {
    pub fn new(head: usize, tail: usize, relation: usize) -> Self {
        Triple {
            head,
            tail,
            relation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = MeimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(MeimError::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Bidirectional string <-> id mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut vocab = Vocab::default();
        for name in names {
            if vocab.ids.contains_key(&name) {
                return Err(MeimError::Integrity(format!(
                    "duplicate vocabulary entry '{name}'"
                )));
            }
            vocab.intern(&name);
        }
        Ok(vocab)
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entity and relation vocabularies plus the three id-encoded splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripleStore {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    /// Builds a store from already-encoded triples with synthetic names.
    pub fn from_ids(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let store = TripleStore {
            entities: Vocab::from_names((0..num_entities).map(|i| format!("e{i}")).collect())?,
            relations: Vocab::from_names((0..num_relations).map(|i| format!("r{i}")).collect())?,
            train,
            valid,
            test,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Checks id ranges and rejects duplicate triples within a split.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            let mut seen = HashSet::new();
            for t in self.split(split) {
                if t.head >= self.num_entities() || t.tail >= self.num_entities() {
                    return Err(MeimError::Lookup {
                        kind: "entity",
                        id: t.head.max(t.tail),
                        size: self.num_entities(),
                    });
                }
                if t.relation >= self.num_relations() {
                    return Err(MeimError::Lookup {
                        kind: "relation",
                        id: t.relation,
                        size: self.num_relations(),
                    });
                }
                if !seen.insert(*t) {
                    return Err(MeimError::Integrity(format!(
                        "duplicate triple {t:?} in {split:?} split"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the three split files in the text format read by [`load_triples`].
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MeimError::io(dir, e))?;
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let mut out = String::new();
            for t in self.split(split) {
                out.push_str(&self.entities.names[t.head]);
                out.push('\t');
                out.push_str(&self.relations.names[t.relation]);
                out.push('\t');
                out.push_str(&self.entities.names[t.tail]);
                out.push('\n');
            }
            fs::write(&path, out).map_err(|e| MeimError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`.
pub fn load_triples(dir: &Path) -> Result<TripleStore> {
    let mut store = TripleStore::default();
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let file = fs::File::open(&path).map_err(|e| MeimError::io(&path, e))?;
        let mut triples = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| MeimError::io(&path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(MeimError::Parse {
                    path: path.clone(),
                    line: lineno + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let head = store.entities.intern(fields[0]);
            let relation = store.relations.intern(fields[1]);
            let tail = store.entities.intern(fields[2]);
            let triple = Triple::new(head, tail, relation);
            if !seen.insert(triple) {
                return Err(MeimError::Parse {
                    path: path.clone(),
                    line: lineno + 1,
                    message: "duplicate triple".into(),
                });
            }
            triples.push(triple);
        }
        match split {
            Split::Train => store.train = triples,
            Split::Valid => store.valid = triples,
            Split::Test => store.test = triples,
        }
    }
    Ok(store)
}

/// Loads the binary cache from `dir` when present, else the text files.
pub fn load_dataset(dir: &Path) -> Result<TripleStore> {
    let cache = dir.join(CACHE_FILE);
    if cache.is_file() {
        read_cache(&cache)
    } else {
        load_triples(dir)
    }
}

pub fn write_cache(store: &TripleStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for n in [
        store.num_entities(),
        store.num_relations(),
        store.train.len(),
        store.valid.len(),
        store.test.len(),
    ] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for split in Split::ALL {
        for t in store.split(split) {
            for id in [t.head, t.relation, t.tail] {
                buf.extend_from_slice(&(id as u32).to_le_bytes());
            }
        }
    }
    for name in store.entities.names().iter().chain(store.relations.names()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| MeimError::io(path, e))?;
    file.write_all(&buf).map_err(|e| MeimError::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<TripleStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MeimError::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != CACHE_MAGIC {
        return Err(MeimError::Integrity(format!(
            "{} is not a triple cache",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != CACHE_VERSION {
        return Err(MeimError::Integrity(format!(
            "unsupported cache version {version}"
        )));
    }
    let n_ent = r.u32()? as usize;
    let n_rel = r.u32()? as usize;
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut splits: Vec<Vec<Triple>> = Vec::new();
    for count in counts {
        let mut triples = Vec::with_capacity(count);
        for _ in 0..count {
            let (h, rel, t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            triples.push(Triple::new(h, t, rel));
        }
        splits.push(triples);
    }
    let mut read_names = |n: usize| -> Result<Vec<String>> {
        (0..n)
            .map(|_| {
                let len = r.u32()? as usize;
                String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| MeimError::Integrity("vocabulary entry is not UTF-8".into()))
            })
            .collect()
    };
    let entities = Vocab::from_names(read_names(n_ent)?)?;
    let relations = Vocab::from_names(read_names(n_rel)?)?;
    if !r.is_done() {
        return Err(MeimError::Integrity(
            "trailing bytes after triple cache".into(),
        ));
    }
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let store = TripleStore {
        entities,
        relations,
        train,
        valid,
        test,
    };
    store.validate()?;
    Ok(store)
}

/// Little-endian cursor that reports truncation as an integrity error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MeimError::Integrity(format!(
                "truncated payload: wanted {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Known true answers for `(head, relation)` and `(tail, relation)` queries.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), Vec<usize>>,
    heads: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut tails: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut heads: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in triples {
            tails.entry((t.head, t.relation)).or_default().push(t.tail);
            heads.entry((t.tail, t.relation)).or_default().push(t.head);
        }
        let finish = |m: BTreeMap<(usize, usize), Vec<usize>>| {
            m.into_iter()
                .map(|(k, mut v)| {
                    v.sort_unstable();
                    v.dedup();
                    (k, v)
                })
                .collect()
        };
        FilterIndex {
            tails: finish(tails),
            heads: finish(heads),
        }
    }

    /// Sorted true tails of `(head, relation)`.
    pub fn true_tails(&self, head: usize, relation: usize) -> &[usize] {
        self.tails.get(&(head, relation)).map_or(&[], Vec::as_slice)
    }

    /// Sorted true heads of `(tail, relation)`.
    pub fn true_heads(&self, tail: usize, relation: usize) -> &[usize] {
        self.heads.get(&(tail, relation)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.true_tails(t.head, t.relation)
            .binary_search(&t.tail)
            .is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }
}

pub fn build_filter_index(store: &TripleStore, splits: &[Split]) -> FilterIndex {
    FilterIndex::from_triples(splits.iter().flat_map(|&s| store.split(s)))
}

/// Splits a seeded permutation of `split` into batches of `batch_size`,
/// keeping the final short batch.
pub fn batches(
    store: &TripleStore,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<Triple>> {
    let batch_size = batch_size.max(1);
    let mut order = store.split(split).to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[Triple]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn toy_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "train.txt",
            "a\tlikes\tb\nb\tlikes\ta\na\tknows\tb\n",
        );
        write(dir.path(), "valid.txt", "");
        write(dir.path(), "test.txt", "b\tknows\ta\n");
        dir
    }

    #[test]
    fn loads_small_fixture() {
        let dir = toy_dir();
        let store = load_triples(dir.path()).unwrap();
        assert_eq!(store.num_entities(), 2);
        assert_eq!(store.num_relations(), 2);
        assert_eq!(store.train[0], Triple::new(0, 1, 0));
        assert_eq!(store.test, vec![Triple::new(1, 0, 1)]);
    }

    #[test]
    fn single_relation_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "x\tr\ty\ny\tr\tx\nx\tr\tx\n");
        write(dir.path(), "valid.txt", "");
        write(dir.path(), "test.txt", "");
        let store = load_triples(dir.path()).unwrap();
        assert_eq!((store.num_entities(), store.num_relations()), (2, 1));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = toy_dir();
        write(dir.path(), "valid.txt", "a\tlikes\tb\nbroken line\n");
        match load_triples(dir.path()) {
            Err(MeimError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_triples(dir.path()),
            Err(MeimError::Io { .. })
        ));
    }

    #[test]
    fn duplicate_triple_rejected() {
        let dir = toy_dir();
        write(dir.path(), "test.txt", "b\tknows\ta\nb\tknows\ta\n");
        assert!(matches!(
            load_triples(dir.path()),
            Err(MeimError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn text_round_trip_and_determinism() {
        let dir = toy_dir();
        let store = load_triples(dir.path()).unwrap();
        let again = load_triples(dir.path()).unwrap();
        assert_eq!(store, again);
        let out = tempfile::tempdir().unwrap();
        store.write_dir(out.path()).unwrap();
        assert_eq!(load_triples(out.path()).unwrap(), store);
    }

    #[test]
    fn cache_round_trip() {
        let store = load_triples(toy_dir().path()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CACHE_FILE);
        write_cache(&store, &path).unwrap();
        assert_eq!(read_cache(&path).unwrap(), store);
        assert_eq!(load_dataset(dir.path()).unwrap(), store);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_cache(&path), Err(MeimError::Integrity(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, bad).unwrap();
        assert!(matches!(read_cache(&path), Err(MeimError::Integrity(_))));
    }

    #[test]
    fn filter_index_examples() {
        let store = TripleStore::from_ids(
            3,
            1,
            vec![Triple::new(0, 1, 0), Triple::new(0, 2, 0)],
            vec![],
            vec![],
        )
        .unwrap();
        let idx = build_filter_index(&store, &[Split::Train]);
        assert_eq!(idx.true_tails(0, 0), &[1, 2]);
        assert_eq!(idx.true_heads(2, 0), &[0]);
        let empty = build_filter_index(&store, &[]);
        assert!(empty.is_empty());
        assert!(empty.true_tails(0, 0).is_empty());
    }

    #[test]
    fn filter_index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = HashSet::new();
        while set.len() < 50 {
            set.insert(Triple::new(
                rng.gen_range(0..12),
                rng.gen_range(0..12),
                rng.gen_range(0..3),
            ));
        }
        let triples: Vec<Triple> = set.into_iter().collect();
        let store = TripleStore::from_ids(12, 3, triples.clone(), vec![], vec![]).unwrap();
        let idx = build_filter_index(&store, &[Split::Train]);
        for _ in 0..1000 {
            let q = Triple::new(
                rng.gen_range(0..12),
                rng.gen_range(0..12),
                rng.gen_range(0..3),
            );
            let scan = triples.contains(&q);
            assert_eq!(idx.contains(&q), scan);
            assert_eq!(idx.true_tails(q.head, q.relation).contains(&q.tail), scan);
            assert_eq!(idx.true_heads(q.tail, q.relation).contains(&q.head), scan);
        }
    }

    #[test]
    fn batching_contract() {
        let train: Vec<Triple> = (0..10).map(|i| Triple::new(i, (i + 1) % 10, 0)).collect();
        let store = TripleStore::from_ids(10, 1, train.clone(), vec![], vec![]).unwrap();
        let b = batches(&store, Split::Train, 4, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(&store, Split::Train, 4, 1));
        let other = batches(&store, Split::Train, 4, 2);
        assert_ne!(b, other);
        let mut flat: Vec<Triple> = b.concat();
        let mut flat2: Vec<Triple> = other.concat();
        flat.sort();
        flat2.sort();
        let mut want = train;
        want.sort();
        assert_eq!(flat, want);
        assert_eq!(flat2, want);
    }
}
