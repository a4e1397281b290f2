//! Subject attributes to sentences, sentences to token embeddings, and an
//! on-disk embedding cache.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use kgpl_tensor::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Container, ContainerError, Tensor, Values};
use crate::domain::{Sex, SubjectAttributes};

pub const DEFAULT_HIDDEN: usize = 768;
pub const DEFAULT_FIXED_N: usize = 32;
pub const DEFAULT_TEMPLATE: &str =
    "This is a brain magnetic resonance image acquired from a {sex} with {diagnosis} at {age_decade} years old";

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("age {0} outside [0, 130]")]
    OutOfRange(u32),
    #[error("template lacks placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("text encoder failed: {0}")]
    EncoderFailure(String),
    #[error("fixed token count must be at least 1")]
    BadTokenCount,
    #[error("no cached embedding for key {0}")]
    KeyNotFound(String),
    #[error("cached embedding {0} failed its checksum")]
    ChecksumMismatch(String),
    #[error("embedding cache i/o failure: {0}")]
    Io(String),
}

impl From<ContainerError> for KnowledgeError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::ChecksumMismatch { path } => KnowledgeError::ChecksumMismatch(path),
            other => KnowledgeError::Io(other.to_string()),
        }
    }
}

const DECADES: [&str; 10] = ["zero", "ten", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AgeBucket {
    pub lo: u32,
    pub hi: u32,
    pub label: String,
}

/// Ten-year bucket containing `age_years`, labelled with its decade word.
pub fn bucket_age(age_years: u32) -> Result<AgeBucket, KnowledgeError> {
    if age_years > 130 {
        return Err(KnowledgeError::OutOfRange(age_years));
    }
    let decade = age_years / 10;
    let label = if decade < 10 {
        DECADES[decade as usize].to_string()
    } else if decade == 10 {
        "one hundred".to_string()
    } else {
        format!("one hundred {}", DECADES[(decade - 10) as usize])
    };
    Ok(AgeBucket { lo: decade * 10, hi: decade * 10 + 9, label })
}

/// Sentence pattern plus the phrases used for absent attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    pub healthy_phrase: String,
    pub unspecified_sex: String,
}

impl Default for Template {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_TEMPLATE.to_string(),
            healthy_phrase: "no reported condition".to_string(),
            unspecified_sex: "person".to_string(),
        }
    }
}

impl Template {
    pub fn new(pattern: impl Into<String>) -> Result<Self, KnowledgeError> {
        let t = Self { pattern: pattern.into(), ..Self::default() };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), KnowledgeError> {
        for p in ["{sex}", "{diagnosis}", "{age_decade}"] {
            if !self.pattern.contains(p) {
                return Err(KnowledgeError::MissingPlaceholder(p));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSentence {
    pub text: String,
    pub source_attributes: SubjectAttributes,
}

pub fn render_sentence(attrs: &SubjectAttributes, template: &Template) -> Result<PromptSentence, KnowledgeError> {
    template.check()?;
    let bucket = bucket_age(attrs.age_years)?;
    let sex = match attrs.sex {
        Sex::Male => "male",
        Sex::Female => "female",
        Sex::Unspecified => template.unspecified_sex.as_str(),
    };
    let diagnosis = match attrs.diagnosis.as_deref().map(str::trim) {
        Some(d) if !d.is_empty() => d,
        _ => template.healthy_phrase.as_str(),
    };
    let text = template
        .pattern
        .replace("{sex}", sex)
        .replace("{diagnosis}", diagnosis)
        .replace("{age_decade}", &bucket.label);
    Ok(PromptSentence { text, source_attributes: attrs.clone() })
}

/// A `(N, D)` block of token embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEmbedding {
    pub encoder: String,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl KnowledgeEmbedding {
    pub fn zeros(encoder: &str, n: usize, d: usize) -> Self {
        Self { encoder: encoder.to_string(), n, d, data: vec![0.0; n * d] }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn to_array(&self) -> Array {
        Array::from_vec(&[self.n, self.d], self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of equally shaped embeddings.
    pub fn mean(items: &[KnowledgeEmbedding]) -> Option<Array> {
        let first = items.first()?;
        let mut acc = Array::zeros(&[first.n, first.d]);
        for e in items {
            assert_eq!((e.n, e.d), (first.n, first.d), "embedding shapes differ");
            acc.add_assign(&e.to_array());
        }
        Some(acc.scale(1.0 / items.len() as f64))
    }
}

pub trait TextEncoder {
    fn name(&self) -> &str;
    fn max_tokens(&self) -> usize;
    fn hidden_size(&self) -> usize;
    /// Raw per-token embeddings, at most `max_tokens` rows.
    fn encode(&self, sentence: &str) -> Result<KnowledgeEmbedding, KnowledgeError>;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Deterministic test double for a pretrained text encoder.
///
/// Tokens are whitespace-separated words. Token `t` at position `i` gets the
/// vector whose component `j` is `splitmix64(base + j)` mapped to `[-1, 1)`, where
/// `base = fnv1a(t) ^ splitmix64(seed) ^ splitmix64(i + 2^32)`; the vector is then
/// L2-normalized and rounded to `f32`.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    seed: u64,
    hidden: usize,
    max_tokens: usize,
    name: String,
}

impl StubEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_hidden(seed, DEFAULT_HIDDEN)
    }

    pub fn with_hidden(seed: u64, hidden: usize) -> Self {
        Self { seed, hidden, max_tokens: 256, name: format!("stub-{}-{}", seed, hidden) }
    }

    pub fn token_vector(&self, token: &str, position: usize) -> Vec<f32> {
        let base = fnv1a(token.as_bytes()) ^ splitmix64(self.seed) ^ splitmix64(position as u64 + (1 << 32));
        let raw: Vec<f64> = (0..self.hidden as u64)
            .map(|j| {
                let bits = splitmix64(base.wrapping_add(j)) >> 11;
                bits as f64 / (1u64 << 52) as f64 - 1.0
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl TextEncoder for StubEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn encode(&self, sentence: &str) -> Result<KnowledgeEmbedding, KnowledgeError> {
        let tokens: Vec<&str> = sentence.split_whitespace().take(self.max_tokens).collect();
        let mut data = Vec::with_capacity(tokens.len() * self.hidden);
        for (i, t) in tokens.iter().enumerate() {
            data.extend(self.token_vector(t, i));
        }
        Ok(KnowledgeEmbedding { encoder: self.name.clone(), n: tokens.len(), d: self.hidden, data })
    }
}

/// Delegates encoding to an external program.
///
/// For each sentence the program is started, receives the UTF-8 sentence on
/// stdin, and must print one JSON line `{"n": N, "d": D}` followed by `N·D`
/// little-endian `f32` values.
#[derive(Clone, Debug)]
pub struct CommandEncoder {
    pub program: String,
    pub args: Vec<String>,
    pub name: String,
    pub hidden: usize,
    pub max_tokens: usize,
}

impl CommandEncoder {
    pub fn new(program: impl Into<String>, args: Vec<String>, hidden: usize) -> Self {
        let program = program.into();
        Self { name: format!("cmd:{}", program), program, args, hidden, max_tokens: 256 }
    }
}

#[derive(Deserialize)]
struct CommandReply {
    n: usize,
    d: usize,
}

impl TextEncoder for CommandEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn encode(&self, sentence: &str) -> Result<KnowledgeEmbedding, KnowledgeError> {
        let fail = |m: String| KnowledgeError::EncoderFailure(m);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("cannot start {}: {}", self.program, e)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin.write_all(sentence.as_bytes()).map_err(|e| fail(e.to_string()))?;
        }
        let mut reader = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| fail(e.to_string()))?;
        let reply: Result<CommandReply, _> = serde_json::from_str(line.trim());
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            let mut err = String::new();
            if let Some(mut s) = child.stderr.take() {
                let _ = s.read_to_string(&mut err);
            }
            return Err(fail(format!("{} exited with {}: {}", self.program, status, err.trim())));
        }
        let reply = reply.map_err(|e| fail(format!("bad reply header {:?}: {}", line.trim(), e)))?;
        if reply.d != self.hidden {
            return Err(fail(format!("hidden size {} but expected {}", reply.d, self.hidden)));
        }
        if payload.len() != reply.n * reply.d * 4 {
            return Err(fail(format!("payload has {} bytes, expected {}", payload.len(), reply.n * reply.d * 4)));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let n = reply.n.min(self.max_tokens);
        let mut emb = KnowledgeEmbedding { encoder: self.name.clone(), n, d: reply.d, data };
        emb.data.truncate(n * reply.d);
        if !emb.all_finite() {
            return Err(fail("non-finite values in reply".into()));
        }
        Ok(emb)
    }
}

/// Encodes and truncates or zero-pads the token axis to exactly `fixed_n` rows.
pub fn encode_knowledge(
    encoder: &dyn TextEncoder,
    sentence: &PromptSentence,
    fixed_n: usize,
) -> Result<KnowledgeEmbedding, KnowledgeError> {
    if fixed_n == 0 {
        return Err(KnowledgeError::BadTokenCount);
    }
    let raw = encoder.encode(&sentence.text)?;
    if !raw.all_finite() {
        return Err(KnowledgeError::EncoderFailure("encoder produced non-finite values".into()));
    }
    let mut data = raw.data;
    data.resize(fixed_n * raw.d, 0.0);
    Ok(KnowledgeEmbedding { encoder: raw.encoder, n: fixed_n, d: raw.d, data })
}

/// Hex SHA-256 of the encoder name, sentence text and token count.
pub fn cache_key(encoder_name: &str, sentence: &str, fixed_n: usize) -> String {
    let mut h = Sha256::new();
    h.update(encoder_name.as_bytes());
    h.update([0u8]);
    h.update(sentence.as_bytes());
    h.update([0u8]);
    h.update((fixed_n as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Directory of cached embeddings, one container file per key.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{}.kgpl", key))
    }

    pub fn store(&self, key: &str, emb: &KnowledgeEmbedding) -> Result<(), KnowledgeError> {
        let mut c = Container::new(serde_json::json!({ "encoder": emb.encoder, "key": key }));
        c.push(Tensor::new("tokens", &[emb.n, emb.d], Values::F32(emb.data.clone())));
        c.write(&self.path(key))?;
        Ok(())
    }

    pub fn load(&self, key: &str) -> Result<KnowledgeEmbedding, KnowledgeError> {
        let path = self.path(key);
        if !path.exists() {
            return Err(KnowledgeError::KeyNotFound(key.to_string()));
        }
        let c = Container::read(&path)?;
        let encoder = c.meta.get("encoder").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        match c.get("tokens") {
            Some(Tensor { shape, values: Values::F32(data), .. }) if shape.len() == 2 => {
                Ok(KnowledgeEmbedding { encoder, n: shape[0], d: shape[1], data: data.clone() })
            }
            _ => Err(KnowledgeError::Io(format!("{} holds no f32 token matrix", path.display()))),
        }
    }
}

/// Renders, encodes and pads one subject's sentence, going through `cache` when given.
pub fn subject_embedding(
    encoder: &dyn TextEncoder,
    attrs: &SubjectAttributes,
    template: &Template,
    fixed_n: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<(PromptSentence, KnowledgeEmbedding), KnowledgeError> {
    let sentence = render_sentence(attrs, template)?;
    let key = cache_key(encoder.name(), &sentence.text, fixed_n);
    if let Some(cache) = cache {
        match cache.load(&key) {
            Ok(emb) => return Ok((sentence, emb)),
            Err(KnowledgeError::KeyNotFound(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let emb = encode_knowledge(encoder, &sentence, fixed_n)?;
    if let Some(cache) = cache {
        cache.store(&key, &emb)?;
    }
    Ok((sentence, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attrs(age: u32, sex: Sex, dx: Option<&str>) -> SubjectAttributes {
        SubjectAttributes::new(age, sex, dx).unwrap()
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_age(50).unwrap(), AgeBucket { lo: 50, hi: 59, label: "fifty".into() });
        assert_eq!((bucket_age(0).unwrap().lo, bucket_age(0).unwrap().hi), (0, 9));
        assert_eq!((bucket_age(97).unwrap().lo, bucket_age(97).unwrap().hi), (90, 99));
        assert_eq!(bucket_age(130).unwrap().label, "one hundred thirty");
        assert!(matches!(bucket_age(131), Err(KnowledgeError::OutOfRange(131))));
    }

    #[test]
    fn reference_sentence() {
        let s = render_sentence(&attrs(50, Sex::Male, Some("mild cognitive impairment")), &Template::default()).unwrap();
        assert_eq!(
            s.text,
            "This is a brain magnetic resonance image acquired from a male with mild cognitive impairment at fifty years old"
        );
    }

    #[test]
    fn absent_diagnosis_uses_healthy_phrase() {
        let t = Template { healthy_phrase: "a healthy brain".into(), ..Template::default() };
        let s = render_sentence(&attrs(25, Sex::Female, None), &t).unwrap();
        assert_eq!(
            s.text,
            "This is a brain magnetic resonance image acquired from a female with a healthy brain at twenty years old"
        );
        let s = render_sentence(&attrs(25, Sex::Unspecified, None), &Template::default()).unwrap();
        assert!(s.text.contains("from a person with no reported condition at twenty"));
    }

    #[test]
    fn template_placeholders_required() {
        assert!(matches!(
            Template::new("a {sex} with {diagnosis}"),
            Err(KnowledgeError::MissingPlaceholder("{age_decade}"))
        ));
        let t = Template { pattern: "{sex} {age_decade}".into(), ..Template::default() };
        assert!(matches!(
            render_sentence(&attrs(3, Sex::Male, None), &t),
            Err(KnowledgeError::MissingPlaceholder("{diagnosis}"))
        ));
    }

    #[test]
    fn stub_shapes_and_padding() {
        let enc = StubEncoder::new(0);
        let s = render_sentence(&attrs(50, Sex::Male, Some("mild cognitive impairment")), &Template::default()).unwrap();
        let e = encode_knowledge(&enc, &s, 32).unwrap();
        assert_eq!((e.n, e.d), (32, 768));
        assert_eq!(e, encode_knowledge(&enc, &s, 32).unwrap());

        let twelve = PromptSentence { text: "a b c d e f g h i j k l".into(), source_attributes: s.source_attributes };
        let e = encode_knowledge(&enc, &twelve, 32).unwrap();
        assert!(e.data[12 * 768..].iter().all(|&v| v == 0.0));
        assert!(e.data[..12 * 768].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stub_token_vectors() {
        let enc = StubEncoder::new(0);
        let v = enc.token_vector("male", 3);
        assert_eq!(v, enc.token_vector("male", 3));
        let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let first: Vec<u32> = v[..2].iter().map(|x| x.to_bits()).collect();
        assert_eq!(first, STUB_MALE_3_BITS);

        let w = enc.token_vector("female", 3);
        let cos: f64 = v.iter().zip(&w).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!(cos < 0.999);
        assert_eq!(enc.encode("").unwrap().n, 0);
    }

    // Computed by an independent Python reimplementation of the hash.
    const STUB_MALE_3_BITS: [u32; 2] = [3174830831, 3142587974];

    #[test]
    fn zero_fixed_n_rejected() {
        let s = render_sentence(&attrs(5, Sex::Male, None), &Template::default()).unwrap();
        assert!(matches!(encode_knowledge(&StubEncoder::new(1), &s, 0), Err(KnowledgeError::BadTokenCount)));
    }

    #[test]
    fn cache_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let enc = StubEncoder::new(4);
        let s = render_sentence(&attrs(71, Sex::Female, Some("dementia")), &Template::default()).unwrap();
        let e = encode_knowledge(&enc, &s, 32).unwrap();
        let key = cache_key(enc.name(), &s.text, 32);
        cache.store(&key, &e).unwrap();
        assert_eq!(cache.load(&key).unwrap(), e);
        assert!(matches!(cache.load("deadbeef"), Err(KnowledgeError::KeyNotFound(_))));

        let path = dir.path().join(format!("{}.kgpl", key));
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(cache.load(&key), Err(KnowledgeError::ChecksumMismatch(_))));
    }

    #[test]
    fn cache_key_depends_on_every_part() {
        let k = cache_key("a", "s", 32);
        assert_ne!(k, cache_key("b", "s", 32));
        assert_ne!(k, cache_key("a", "t", 32));
        assert_ne!(k, cache_key("a", "s", 16));
        assert_eq!(k.len(), 64);
    }

    #[test]
    fn subject_embedding_uses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let enc = StubEncoder::with_hidden(2, 16);
        let a = attrs(33, Sex::Male, None);
        let (_, first) = subject_embedding(&enc, &a, &Template::default(), 8, Some(&cache)).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let (_, second) = subject_embedding(&enc, &a, &Template::default(), 8, Some(&cache)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn command_encoder_via_python() {
        if Command::new("python3").arg("--version").output().is_err() {
            return;
        }
        let script = "import sys,struct,json\n\
                      words=sys.stdin.read().split()\n\
                      d=4\n\
                      sys.stdout.write(json.dumps({'n':len(words),'d':d})+'\\n');sys.stdout.flush()\n\
                      sys.stdout.buffer.write(b''.join(struct.pack('<f',float(len(w)+j)) for w in words for j in range(d)))\n";
        let enc = CommandEncoder::new("python3", vec!["-c".into(), script.into()], 4);
        let s = PromptSentence { text: "ab cde".into(), source_attributes: attrs(1, Sex::Male, None) };
        let e = encode_knowledge(&enc, &s, 3).unwrap();
        assert_eq!(e.data, vec![2., 3., 4., 5., 3., 4., 5., 6., 0., 0., 0., 0.]);

        let bad = CommandEncoder::new("python3", vec!["-c".into(), "import sys; sys.exit(3)".into()], 4);
        assert!(matches!(encode_knowledge(&bad, &s, 3), Err(KnowledgeError::EncoderFailure(_))));
    }

    proptest! {
        #[test]
        fn same_decade_same_sentence(a in 0u32..=130, b in 0u32..=130, male in any::<bool>()) {
            let sex = if male { Sex::Male } else { Sex::Female };
            let t = Template::default();
            let sa = render_sentence(&attrs(a, sex, Some("x")), &t).unwrap().text;
            let sb = render_sentence(&attrs(b, sex, Some("x")), &t).unwrap().text;
            prop_assert_eq!(a / 10 == b / 10, sa == sb);
        }

        #[test]
        fn padding_appends_zero_rows(words in 0usize..12, n1 in 1usize..16, extra in 0usize..8) {
            let enc = StubEncoder::with_hidden(7, 8);
            let text = (0..words).map(|i| format!("w{}", i)).collect::<Vec<_>>().join(" ");
            let s = PromptSentence { text, source_attributes: attrs(1, Sex::Male, None) };
            let short = encode_knowledge(&enc, &s, n1).unwrap();
            let long = encode_knowledge(&enc, &s, n1 + extra).unwrap();
            let keep = words.min(n1);
            prop_assert_eq!(&short.data[..keep * 8], &long.data[..keep * 8]);
            prop_assert!(long.data[words.min(n1 + extra) * 8..].iter().all(|&v| v == 0.0));
            prop_assert!(long.all_finite());
        }
    }
}
