//! Word, sentence and post vectors behind one interface.
//!
//! Two backings exist for each level:
//!
//! * **Tables** loaded from the TSV interchange format
//!   (`#dim=<d>` header, then `key<TAB>v1<TAB>...<TAB>vd` rows).
//! * **Synthetic** vectors derived from a seeded hash of the input, so tests and
//!   demos run without pretrained files.
//!
//! Out-of-vocabulary words are composed from hashed character n-grams
//! (n = 3..=6 over `<token>`), the same sub-word scheme fastText uses, so words
//! that share most of their n-grams land close together.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const WORD_DIM: usize = 300;
pub const SENTENCE_DIM: usize = 768;
pub const TABLE_BUCKETS: u32 = 2_000_000;
pub const SYNTHETIC_BUCKETS: u32 = 4_096;
const MIN_NGRAM: usize = 3;
const MAX_NGRAM: usize = 6;

/// Lowercase, NFC, trim, and collapse internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect::<String>().to_lowercase();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 32-bit FNV-1a, as used for fastText sub-word buckets.
pub fn fnv1a_32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 2_166_136_261;
    for b in bytes {
        h ^= u32::from(*b);
        h = h.wrapping_mul(16_777_619);
    }
    h
}

fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Character n-grams (3..=6) of `<token>`, in order of length then position.
pub fn char_ngrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut out = Vec::new();
    for n in MIN_NGRAM..=MAX_NGRAM {
        if n > chars.len() {
            break;
        }
        for start in 0..=chars.len() - n {
            out.push(chars[start..start + n].iter().collect());
        }
    }
    out
}

/// 300-d word vectors with sub-word fallback.
#[derive(Clone, Debug)]
pub struct WordEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    buckets: u32,
    seed: u64,
}

impl WordEmbedder {
    /// Purely n-gram-composed vectors; no table.
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        WordEmbedder {
            dim,
            table: HashMap::new(),
            buckets: SYNTHETIC_BUCKETS,
            seed,
        }
    }

    pub fn from_table(path: &Path, seed: u64) -> Result<Self> {
        let (dim, table) = read_table(path)?;
        Ok(WordEmbedder {
            dim,
            table,
            buckets: TABLE_BUCKETS,
            seed,
        })
    }

    pub fn with_table(dim: usize, table: HashMap<String, Vec<f64>>, seed: u64) -> Result<Self> {
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::contract(format!(
                "word table row {k:?} has {} values, expected {dim}",
                v.len()
            )));
        }
        let table = table.into_iter().map(|(k, v)| (normalize(&k), v)).collect();
        Ok(WordEmbedder {
            dim,
            table,
            buckets: TABLE_BUCKETS,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> u32 {
        self.buckets
    }

    pub fn contains(&self, token: &str) -> bool {
        self.table.contains_key(&normalize(token))
    }

    pub fn bucket_of(&self, ngram: &str) -> u32 {
        fnv1a_32(ngram.as_bytes()) % self.buckets
    }

    /// Deterministic vector for one hash bucket, scaled to unit expected norm.
    pub fn bucket_vector(&self, bucket: u32) -> Vec<f64> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        gaussian(mix(self.seed, u64::from(bucket) | (1 << 40)), self.dim)
            .into_iter()
            .map(|x| x * scale)
            .collect()
    }

    pub fn embed_word(&self, token: &str) -> Result<Vec<f64>> {
        let key = normalize(token);
        if key.is_empty() {
            return Err(Error::contract("embed_word: empty token"));
        }
        let v = match self.table.get(&key) {
            Some(v) => v.clone(),
            None => {
                let grams = char_ngrams(&key);
                let mut acc = vec![0.0; self.dim];
                for gram in &grams {
                    let bv = self.bucket_vector(self.bucket_of(gram));
                    acc.iter_mut().zip(&bv).for_each(|(a, b)| *a += b);
                }
                let n = grams.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            }
        };
        check_vector(&v, self.dim, &key)?;
        Ok(v)
    }
}

#[derive(Clone, Debug)]
enum SentenceMode {
    FileLookup(HashMap<String, Vec<f64>>),
    Synthetic { seed: u64 },
}

/// 768-d sentence and post vectors.
#[derive(Clone, Debug)]
pub struct SentenceEmbedder {
    dim: usize,
    mode: SentenceMode,
}

impl SentenceEmbedder {
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        SentenceEmbedder {
            dim,
            mode: SentenceMode::Synthetic { seed },
        }
    }

    pub fn from_table(path: &Path) -> Result<Self> {
        let (dim, table) = read_table(path)?;
        Ok(SentenceEmbedder {
            dim,
            mode: SentenceMode::FileLookup(table),
        })
    }

    pub fn with_table(dim: usize, table: HashMap<String, Vec<f64>>) -> Self {
        let table = table.into_iter().map(|(k, v)| (normalize(&k), v)).collect();
        SentenceEmbedder {
            dim,
            mode: SentenceMode::FileLookup(table),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.mode, SentenceMode::Synthetic { .. })
    }

    pub fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let key = normalize(text);
        if key.is_empty() {
            return Err(Error::contract("embed_sentence: empty text"));
        }
        let v = match &self.mode {
            SentenceMode::FileLookup(table) => table
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(key.clone()))?,
            SentenceMode::Synthetic { seed } => {
                let mut v = gaussian(mix(*seed, fnv1a_64(key.as_bytes())), self.dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            }
        };
        check_vector(&v, self.dim, &key)?;
        Ok(v)
    }

    /// Same provider and contract as [`Self::embed_sentence`], applied to the whole post.
    pub fn embed_post(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_sentence(text)
    }
}

/// The three encoding levels together.
#[derive(Clone, Debug)]
pub struct Embedders {
    pub words: WordEmbedder,
    pub sentences: SentenceEmbedder,
}

impl Embedders {
    pub fn synthetic(seed: u64) -> Self {
        Embedders {
            words: WordEmbedder::synthetic(WORD_DIM, seed),
            sentences: SentenceEmbedder::synthetic(SENTENCE_DIM, seed),
        }
    }

    pub fn embed_word(&self, token: &str) -> Result<Vec<f64>> {
        self.words.embed_word(token)
    }

    pub fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        self.sentences.embed_sentence(text)
    }

    pub fn embed_post(&self, text: &str) -> Result<Vec<f64>> {
        self.sentences.embed_post(text)
    }
}

fn check_vector(v: &[f64], dim: usize, key: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::contract(format!(
            "embedding for {key:?} has dimension {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain(format!("embedding for {key:?} is not finite")));
    }
    Ok(())
}

/// Reads a `#dim=<d>` TSV table. Keys are normalized; the first of duplicate keys wins.
pub fn read_table(path: &Path) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty table; expected #dim=<d> header".into()))?
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let dim: usize = header
        .trim()
        .strip_prefix("#dim=")
        .and_then(|d| d.parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| parse_err(1, format!("bad header {header:?}; expected #dim=<d>")))?;

    let mut table = HashMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let key = normalize(fields.next().unwrap_or_default());
        if key.is_empty() {
            return Err(parse_err(lineno, "empty key".into()));
        }
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(lineno, format!("bad value {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(
                lineno,
                format!("{} values, header says {dim}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        if table.contains_key(&key) {
            log::warn!("{}:{lineno}: duplicate key {key:?} ignored", path.display());
            continue;
        }
        table.insert(key, values);
    }
    Ok((dim, table))
}

/// Writes rows in the table format, keys in the given order.
pub fn write_table<'a>(
    path: &Path,
    dim: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut buf = format!("#dim={dim}\n");
    for (k, v) in rows {
        if v.len() != dim {
            return Err(Error::contract(format!("row {k:?} has {} values, expected {dim}", v.len())));
        }
        buf.push_str(k);
        for x in v {
            buf.push('\t');
            buf.push_str(&x.to_string());
        }
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  Hello \t  World\n"), "hello world");
        // "e" + combining acute composes to the precomposed form under NFC
        assert_eq!(normalize("Caf\u{0065}\u{0301}"), "caf\u{00e9}");
    }

    #[test]
    fn table_hit_returns_stored_row() {
        let mut t = HashMap::new();
        t.insert("Sad".to_string(), vec![1.0, 2.0, 3.0]);
        let w = WordEmbedder::with_table(3, t, 0).unwrap();
        assert_eq!(w.embed_word("sad").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(w.embed_word(" SAD ").unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn oov_is_deterministic_and_dimensioned() {
        let w = WordEmbedder::synthetic(WORD_DIM, 9);
        let a = w.embed_word("sadnesssss").unwrap();
        let b = w.embed_word("sadnesssss").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), WORD_DIM);
        assert!(matches!(w.embed_word("   "), Err(Error::Contract(_))));
        // single character still has the "<x>" trigram
        assert_eq!(w.embed_word("x").unwrap().len(), WORD_DIM);
    }

    #[test]
    fn ngram_enumeration() {
        assert_eq!(char_ngrams("a"), vec!["<a>"]);
        let g = char_ngrams("ab");
        assert_eq!(g, vec!["<ab", "ab>", "<ab>"]);
    }

    #[test]
    fn oov_variant_stays_close() {
        // Independent oracle: count n-gram overlap of "<depression>" and
        // "<depressionnn>" by brute force over substrings.
        let grams = |w: &str| -> BTreeSet<String> {
            let s: Vec<char> = format!("<{w}>").chars().collect();
            let mut out = BTreeSet::new();
            for n in 3..=6 {
                for i in 0..s.len().saturating_sub(n - 1) {
                    out.insert(s[i..i + n].iter().collect());
                }
            }
            out
        };
        let a = grams("depression");
        let b = grams("depressionnn");
        let shared = a.intersection(&b).count();
        assert_eq!((a.len(), b.len(), shared), (34, 42, 30));
        // With near-orthogonal bucket vectors cosine ≈ 30/√(34·42) ≈ 0.79.
        let w = WordEmbedder::synthetic(WORD_DIM, 0);
        let c = cos(&w.embed_word("depression").unwrap(), &w.embed_word("depressionnn").unwrap());
        assert!(c >= 0.5, "cosine {c}");
        assert!((c - 30.0 / (34.0f64 * 42.0).sqrt()).abs() < 0.15, "cosine {c}");
    }

    #[test]
    fn synthetic_sentences_are_unit_and_stable() {
        let s = SentenceEmbedder::synthetic(SENTENCE_DIM, 4);
        assert!(matches!(s.embed_sentence(""), Err(Error::Contract(_))));
        let a = s.embed_sentence("I cannot sleep.").unwrap();
        assert_eq!(a, s.embed_sentence("i  cannot sleep.").unwrap());
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(s.embed_post("I cannot sleep.").unwrap(), a);
        assert_ne!(s.embed_sentence("I can sleep.").unwrap(), a);
    }

    #[test]
    fn file_mode_lookup_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        let row = vec![0.5; 4];
        write_table(&path, 4, [("A whole post.", row.as_slice())]).unwrap();
        let s = SentenceEmbedder::from_table(&path).unwrap();
        assert_eq!(s.embed_post("a whole post.").unwrap(), row);
        match s.embed_sentence("missing text") {
            Err(Error::MissingEmbedding(t)) => assert_eq!(t, "missing text"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_tables_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tsv");
        std::fs::write(&path, "#dim=2\nok\t1\t2\nbad\t1\n").unwrap();
        match WordEmbedder::from_table(&path, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "k\t1\n").unwrap();
        assert!(matches!(read_table(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dataset_embedding_is_bitwise_reproducible() {
        let texts = ["first post here.", "another one", "sleep is gone"];
        let e1 = Embedders::synthetic(17);
        let e2 = Embedders::synthetic(17);
        for t in texts {
            assert_eq!(e1.embed_post(t).unwrap(), e2.embed_post(t).unwrap());
            for w in t.split_whitespace() {
                let a: Vec<u64> = e1.embed_word(w).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = e2.embed_word(w).unwrap().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
        }
    }
}
