//! Caption embeddings: word vectors from a text vector file or a seeded hash,
//! mean-pooled into a 300-d sentence vector.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding(Vec<f32>);

impl SentenceEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBED_DIM {
            return Err(Error::Dimension { expected: EMBED_DIM, found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sentence embedding"));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBED_DIM])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// How word vectors are combined into a sentence vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backend {
    PretrainedFile,
    Hashed { seed: u64 },
}

#[derive(Debug)]
pub struct VocabEmbedding {
    backend: Backend,
    words: Vec<String>,
    vectors: HashMap<String, Vec<f32>>,
    all_oov: AtomicUsize,
}

impl VocabEmbedding {
    pub fn from_words(words: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut vocab = Self::empty(Backend::PretrainedFile);
        for (w, v) in words {
            if v.len() != EMBED_DIM {
                return Err(Error::Dimension { expected: EMBED_DIM, found: v.len() });
            }
            if vocab.vectors.insert(w.clone(), v).is_none() {
                vocab.words.push(w);
            }
        }
        Ok(vocab)
    }

    fn empty(backend: Backend) -> Self {
        Self { backend, words: Vec::new(), vectors: HashMap::new(), all_oov: AtomicUsize::new(0) }
    }

    /// Deterministic test double: every word gets a unit vector seeded by
    /// `sha256(seed, word)`. There are no out-of-vocabulary words.
    pub fn hashed(seed: u64) -> Self {
        Self::empty(Backend::Hashed { seed })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn dimension(&self) -> usize {
        EMBED_DIM
    }

    /// Stored words in file order (empty for the hashed backend).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<Vec<f32>> {
        match self.backend {
            Backend::PretrainedFile => self.vectors.get(word).cloned(),
            Backend::Hashed { seed } => Some(hashed_vector(seed, word)),
        }
    }

    /// Number of sentences embedded so far that had no known token.
    pub fn all_oov_count(&self) -> usize {
        self.all_oov.load(Ordering::Relaxed)
    }
}

fn hashed_vector(seed: u64, word: &str) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(word.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Parse a text vector file: a `count dim` header, then `word v1 .. v300`
/// per line. At most `vocab_limit` words are kept, in file order.
pub fn load_vectors(path: impl AsRef<Path>, vocab_limit: Option<usize>) -> Result<VocabEmbedding> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::VectorFormat { path: path.to_path_buf(), line, message };
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(bad(1, "missing header".into())),
    };
    let fields: Vec<&str> = header.split(' ').collect();
    let parsed: Vec<usize> = fields.iter().filter_map(|f| f.trim().parse().ok()).collect();
    if fields.len() != 2 || parsed.len() != 2 {
        return Err(bad(1, format!("header must be `<count> <dim>`, got {header:?}")));
    }
    if parsed[1] != EMBED_DIM {
        return Err(bad(1, format!("dimension {} is not {EMBED_DIM}", parsed[1])));
    }
    let limit = vocab_limit.unwrap_or(usize::MAX);
    let mut words = Vec::new();
    for (i, line) in lines.enumerate() {
        if words.len() >= limit {
            break;
        }
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', ' ']);
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default().to_string();
        let mut v = Vec::with_capacity(EMBED_DIM);
        for p in parts {
            let x: f32 = p.parse().map_err(|_| bad(lineno, format!("non-numeric component {p:?}")))?;
            if !x.is_finite() {
                return Err(bad(lineno, format!("non-finite component {p:?}")));
            }
            v.push(x);
        }
        if v.len() != EMBED_DIM {
            return Err(bad(lineno, format!("word {word:?} has {} components, expected {EMBED_DIM}", v.len())));
        }
        words.push((word, v));
    }
    VocabEmbedding::from_words(words)
}

/// Write a stored vocabulary in the format read by [`load_vectors`].
pub fn write_vectors(path: impl AsRef<Path>, vocab: &VocabEmbedding) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{} {EMBED_DIM}", vocab.len()).map_err(io)?;
    for word in &vocab.words {
        write!(w, "{word}").map_err(io)?;
        for x in &vocab.vectors[word] {
            write!(w, " {x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// ASCII-lowercase, punctuation to spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c.to_ascii_lowercase() })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Mean of the in-vocabulary token vectors. Tokens are summed in sorted
/// order so the result depends only on the token multiset. A sentence with
/// no known token maps to zero and bumps [`VocabEmbedding::all_oov_count`].
pub fn embed_sentence(vocab: &VocabEmbedding, text: &str) -> SentenceEmbedding {
    let mut tokens = tokenize(text);
    tokens.sort_unstable();
    let mut acc = vec![0.0f64; EMBED_DIM];
    let mut known = 0usize;
    for t in &tokens {
        if let Some(v) = vocab.lookup(t) {
            known += 1;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
        }
    }
    if known == 0 {
        vocab.all_oov.fetch_add(1, Ordering::Relaxed);
        log::warn!("no in-vocabulary token in caption {text:?}; using the zero embedding");
        return SentenceEmbedding::zeros();
    }
    SentenceEmbedding(acc.iter().map(|a| (a / known as f64) as f32).collect())
}

/// `w * h1 + (1 - w) * h2`.
pub fn interpolate(h1: &SentenceEmbedding, h2: &SentenceEmbedding, w: f64) -> Result<SentenceEmbedding> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::OutOfUnitRange { what: "interpolation weight", value: w });
    }
    if w == 1.0 {
        return Ok(h1.clone());
    }
    if w == 0.0 {
        return Ok(h2.clone());
    }
    let v = h1.0.iter().zip(&h2.0).map(|(&a, &b)| (w * a as f64 + (1.0 - w) * b as f64) as f32).collect();
    Ok(SentenceEmbedding(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_vectors() -> Vec<(String, Vec<f32>)> {
        let hello = (0..EMBED_DIM).map(|i| i as f32 * 0.25 - 3.0).collect();
        let world = (0..EMBED_DIM).map(|i| 1.5 - (i % 7) as f32).collect();
        vec![("hello".into(), hello), ("world".into(), world)]
    }

    fn fixture_file(dir: &tempfile::TempDir) -> std::path::PathBuf {
        let path = dir.path().join("vectors.vec");
        write_vectors(&path, &VocabEmbedding::from_words(fixture_vectors()).unwrap()).unwrap();
        path
    }

    fn unit(i: usize) -> SentenceEmbedding {
        let mut v = vec![0.0; EMBED_DIM];
        v[i] = 1.0;
        SentenceEmbedding::new(v).unwrap()
    }

    #[test]
    fn load_reproduces_written_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture_file(&dir);
        let vocab = load_vectors(&path, None).unwrap();
        for (w, v) in fixture_vectors() {
            assert_eq!(vocab.lookup(&w).unwrap(), v);
        }
        assert_eq!(vocab.words(), ["hello", "world"]);
        let one = load_vectors(&path, Some(1)).unwrap();
        assert_eq!(one.words(), ["hello"]);
        assert!(one.lookup("world").is_none());
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vec");
        std::fs::write(&p, "1 200\nhello 1 2\n").unwrap();
        let e = load_vectors(&p, None).unwrap_err();
        assert!(matches!(e, Error::VectorFormat { line: 1, .. }), "{e}");

        let mut row = String::from("hello");
        for i in 0..EMBED_DIM {
            row.push_str(if i == 7 { " x" } else { " 0.5" });
        }
        std::fs::write(&p, format!("1 300\n{row}\n")).unwrap();
        let e = load_vectors(&p, None).unwrap_err();
        assert!(matches!(e, Error::VectorFormat { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("\"x\""));

        std::fs::write(&p, "1 300\nhello 0.5\n").unwrap();
        assert!(matches!(load_vectors(&p, None), Err(Error::VectorFormat { line: 2, .. })));
        std::fs::write(&p, "garbage\n").unwrap();
        assert!(load_vectors(&p, None).is_err());
        assert!(load_vectors(dir.path().join("missing.vec"), None).is_err());
    }

    #[test]
    fn sentence_embedding_examples() {
        let vocab = VocabEmbedding::from_words(fixture_vectors()).unwrap();
        let words = fixture_vectors();
        assert_eq!(embed_sentence(&vocab, "hello").as_slice(), &words[0].1[..]);
        let both = embed_sentence(&vocab, "hello world");
        for i in 0..EMBED_DIM {
            let mean = (words[0].1[i] as f64 + words[1].1[i] as f64) / 2.0;
            assert_eq!(both.as_slice()[i], mean as f32);
        }
        assert_eq!(embed_sentence(&vocab, "HELLO, world!"), both);
        assert_eq!(embed_sentence(&vocab, "world hello"), both);
    }

    #[test]
    fn all_oov_is_zero_and_counted() {
        let vocab = VocabEmbedding::from_words(fixture_vectors()).unwrap();
        assert_eq!(embed_sentence(&vocab, "zebra crossing"), SentenceEmbedding::zeros());
        assert_eq!(embed_sentence(&vocab, "?!"), SentenceEmbedding::zeros());
        assert_eq!(vocab.all_oov_count(), 2);
        // unknown words are skipped, not averaged in as zeros
        assert_eq!(embed_sentence(&vocab, "hello zebra").as_slice(), &fixture_vectors()[0].1[..]);
    }

    #[test]
    fn hashed_vectors_are_unit_and_deterministic() {
        let vocab = VocabEmbedding::hashed(7);
        let a = vocab.lookup("person").unwrap();
        assert_eq!(a, VocabEmbedding::hashed(7).lookup("person").unwrap());
        assert_ne!(a, VocabEmbedding::hashed(8).lookup("person").unwrap());
        for w in ["a", "person", "raising", "arms", "sitting"] {
            let v = vocab.lookup(w).unwrap();
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hashed_words_are_nearly_orthogonal() {
        let vocab = VocabEmbedding::hashed(0);
        let trials = 1000;
        let mut small = 0;
        for i in 0..trials {
            let a = vocab.lookup(&format!("w{i}")).unwrap();
            let b = vocab.lookup(&format!("v{i}")).unwrap();
            let cos: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
            small += (cos.abs() < 0.3) as usize;
        }
        assert!(small as f64 >= 0.99 * trials as f64, "{small}/{trials}");
    }

    #[test]
    fn interpolation_examples() {
        let (a, b) = (unit(0), unit(1));
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert_eq!(&mid.as_slice()[..3], &[0.5, 0.5, 0.0]);
        assert!(mid.as_slice()[2..].iter().all(|&v| v == 0.0));
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &b, -0.1).is_err());
    }

    #[test]
    fn dimension_is_checked() {
        assert!(matches!(SentenceEmbedding::new(vec![0.0; 3]), Err(Error::Dimension { .. })));
        assert!(VocabEmbedding::from_words(vec![("x".into(), vec![1.0])]).is_err());
    }

    proptest! {
        #[test]
        fn token_order_does_not_matter(perm in Just(vec!["a", "person", "with", "arms", "up", "a"]).prop_shuffle()) {
            let vocab = VocabEmbedding::hashed(3);
            let base = embed_sentence(&vocab, "a person with arms up a");
            prop_assert_eq!(embed_sentence(&vocab, &perm.join(" ")), base);
        }

        #[test]
        fn interpolation_is_symmetric(w in 0.0f64..=1.0, s in 0u64..50) {
            let vocab = VocabEmbedding::hashed(s);
            let h1 = embed_sentence(&vocab, "left");
            let h2 = embed_sentence(&vocab, "right");
            let a = interpolate(&h1, &h2, w).unwrap();
            let b = interpolate(&h2, &h1, 1.0 - w).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn write_then_load_is_identity(vals in proptest::collection::vec(-1e3f32..1e3, EMBED_DIM * 3)) {
            let words: Vec<(String, Vec<f32>)> = vals
                .chunks(EMBED_DIM)
                .enumerate()
                .map(|(i, c)| (format!("word{i}"), c.to_vec()))
                .collect();
            let vocab = VocabEmbedding::from_words(words.clone()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.vec");
            write_vectors(&p, &vocab).unwrap();
            let back = load_vectors(&p, None).unwrap();
            prop_assert_eq!(back.words(), vocab.words());
            for (w, v) in &words {
                prop_assert_eq!(&back.lookup(w).unwrap(), v);
            }
        }
    }
}
