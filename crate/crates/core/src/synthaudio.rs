//! Deterministic synthetic speech features.
//!
//! Every character (space included) owns a fixed random codebook vector; an
//! utterance is the codebook row of each character repeated
//! `frames_per_symbol` times, plus Gaussian noise. Masking augmentation zeroes
//! random time and feature bands.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::tensor::Mat;
use crate::textops::Transcript;
use crate::{derive_seed, par};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("character {0:?} is outside the lexicon alphabet")]
    UnknownChar(char),
    #[error("invalid corpus request: {0}")]
    Invalid(String),
    #[error("feature file {path}: {reason}")]
    Feature { path: PathBuf, reason: String },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `frames x dim` matrix of finite features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Mat<f32>);

impl FeatureMatrix {
    pub fn new(m: Mat<f32>) -> Result<Self, SynthError> {
        if m.rows == 0 || m.cols == 0 {
            return Err(SynthError::Invalid("feature matrix must have at least one frame".into()));
        }
        if !m.all_finite() {
            return Err(SynthError::Invalid("non-finite feature".into()));
        }
        Ok(Self(m))
    }

    pub fn frames(&self) -> usize {
        self.0.rows
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }

    pub fn mat(&self) -> &Mat<f32> {
        &self.0
    }

    /// Little-endian `u32` frames and dim, then row-major `f32` values.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.0.data.len() * 4);
        for v in &self.0.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SynthError> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let frames = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != frames * dim * 4 {
            return Err(SynthError::Invalid(format!("expected {} bytes of features, got {}", frames * dim * 4, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(Mat::from_vec(frames, dim, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames_per_symbol: usize,
    pub noise_std: f64,
    pub feature_dim: usize,
    /// Seeds the codebook; noise streams derive from it per utterance.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames_per_symbol: 3, noise_std: 0.1, feature_dim: 16, seed: 0 }
    }
}

/// Fixed per-character feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    rows: BTreeMap<char, Vec<f32>>,
}

impl Codebook {
    /// One standard-normal vector per character of `alphabet`, in sorted
    /// character order, so the codebook depends only on the alphabet and seed.
    pub fn new(alphabet: impl IntoIterator<Item = char>, dim: usize, seed: u64) -> Self {
        let chars: std::collections::BTreeSet<char> = alphabet.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "codebook"));
        let rows = chars
            .into_iter()
            .map(|c| (c, (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
            .collect();
        Self { rows }
    }

    pub fn for_lexicon<S: AsRef<str>>(lexicon: &[S], cfg: &SynthConfig) -> Self {
        let alphabet = lexicon.iter().flat_map(|w| w.as_ref().chars().collect::<Vec<_>>()).chain([' ']);
        Self::new(alphabet, cfg.feature_dim, cfg.seed)
    }

    pub fn row(&self, c: char) -> Option<&[f32]> {
        self.rows.get(&c).map(Vec::as_slice)
    }

    pub fn symbols(&self) -> impl Iterator<Item = char> + '_ {
        self.rows.keys().copied()
    }

    /// Nearest codebook symbol by squared distance.
    pub fn nearest(&self, frame: &[f32]) -> char {
        let mut best = (f32::INFINITY, ' ');
        for (&c, row) in &self.rows {
            let d: f32 = row.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

/// Renders `transcript` as features: each character's codebook row repeated
/// `frames_per_symbol` times plus i.i.d. noise.
pub fn synthesize<R: Rng>(
    transcript: &Transcript,
    codebook: &Codebook,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<FeatureMatrix, SynthError> {
    let text = transcript.text();
    if text.is_empty() {
        return Err(SynthError::Invalid("cannot synthesize an empty transcript".into()));
    }
    let frames = text.chars().count() * cfg.frames_per_symbol;
    let mut m = Mat::zeros(frames, cfg.feature_dim);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let mut r = 0;
    for c in text.chars() {
        let row = codebook.row(c).ok_or(SynthError::UnknownChar(c))?;
        if row.len() != cfg.feature_dim {
            return Err(SynthError::Invalid("codebook width differs from feature_dim".into()));
        }
        for _ in 0..cfg.frames_per_symbol {
            for (o, &v) in m.row_mut(r).iter_mut().zip(row) {
                *o = v + if cfg.noise_std > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
            }
            r += 1;
        }
    }
    FeatureMatrix::new(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl MaskPolicy {
    pub const NONE: MaskPolicy = MaskPolicy { time_masks: 0, max_time_width: 0, freq_masks: 0, max_freq_width: 0 };
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { time_masks: 2, max_time_width: 10, freq_masks: 1, max_freq_width: 4 }
    }
}

/// Zeroes `time_masks` bands of up to `max_time_width` frames and
/// `freq_masks` bands of up to `max_freq_width` feature bins. Widths are
/// clamped to the matrix, so the shape never changes.
pub fn spec_augment<R: Rng>(f: &FeatureMatrix, rng: &mut R, policy: &MaskPolicy) -> FeatureMatrix {
    let mut m = f.0.clone();
    let (t, d) = (m.rows, m.cols);
    for _ in 0..policy.time_masks {
        let width = rng.random_range(0..=policy.max_time_width.min(t));
        let start = rng.random_range(0..=t - width);
        for r in start..start + width {
            m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for _ in 0..policy.freq_masks {
        let width = rng.random_range(0..=policy.max_freq_width.min(d));
        let start = rng.random_range(0..=d - width);
        for r in 0..t {
            m.row_mut(r)[start..start + width].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    FeatureMatrix(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: Transcript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub transcript: String,
    pub feature_file: String,
    pub n_frames: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { train: 2000, dev: 200, test: 200, min_words: 3, max_words: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub lexicon: Vec<String>,
    pub config: SynthConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// The bundled 20-word lexicon.
pub const DEFAULT_LEXICON: [&str; 20] = [
    "the", "a", "and", "of", "cat", "dog", "sun", "moon", "river", "stone", "green", "quiet", "house", "light",
    "bird", "tree", "cold", "storm", "horizon", "road",
];

/// Draws `n` utterances with uniformly distributed word counts in
/// `min_words..=max_words`. Each utterance uses its own stream derived from
/// `(seed, id)`, so output does not depend on worker count.
pub fn build_split<S: AsRef<str> + Sync>(
    prefix: &str,
    lexicon: &[S],
    n: usize,
    min_words: usize,
    max_words: usize,
    codebook: &Codebook,
    cfg: &SynthConfig,
) -> Result<Vec<Utterance>, SynthError> {
    if lexicon.is_empty() {
        return Err(SynthError::Invalid("lexicon is empty".into()));
    }
    if min_words == 0 || min_words > max_words {
        return Err(SynthError::Invalid(format!("bad length range {min_words}..={max_words}")));
    }
    par::map_range(n, |i| {
        let id = format!("{prefix}-{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &id));
        let len = rng.random_range(min_words..=max_words);
        let words: Vec<&str> = (0..len).map(|_| lexicon[rng.random_range(0..lexicon.len())].as_ref()).collect();
        let transcript = Transcript::from_words(words);
        let features = synthesize(&transcript, codebook, cfg, &mut rng)?;
        Ok(Utterance { id, features, transcript })
    })
    .into_iter()
    .collect()
}

pub fn build_corpus<S: AsRef<str> + Sync>(
    lexicon: &[S],
    spec: &CorpusSpec,
    cfg: &SynthConfig,
) -> Result<Corpus, SynthError> {
    let codebook = Codebook::for_lexicon(lexicon, cfg);
    let split = |p: &str, n: usize| build_split(p, lexicon, n, spec.min_words, spec.max_words, &codebook, cfg);
    Ok(Corpus {
        lexicon: lexicon.iter().map(|s| s.as_ref().to_owned()).collect(),
        config: cfg.clone(),
        train: split("train", spec.train)?,
        dev: split("dev", spec.dev)?,
        test: split("test", spec.test)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusMeta {
    lexicon: Vec<String>,
    synth: SynthConfig,
}

impl Corpus {
    pub fn codebook(&self) -> Codebook {
        Codebook::for_lexicon(&self.lexicon, &self.config)
    }

    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `corpus.json`, `<split>.jsonl` manifests and `features/<id>.bin`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir.join("features"))?;
        let meta = CorpusMeta { lexicon: self.lexicon.clone(), synth: self.config.clone() };
        std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&meta).expect("meta serialises"))?;
        for (name, utts) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.jsonl")))?);
            for u in utts {
                let rel = format!("features/{}.bin", u.id);
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&rel))?);
                u.features.write_to(&mut f)?;
                f.flush()?;
                let row = ManifestRow {
                    id: u.id.clone(),
                    transcript: u.transcript.text(),
                    feature_file: rel,
                    n_frames: u.features.frames(),
                    dim: u.features.dim(),
                };
                writeln!(manifest, "{}", serde_json::to_string(&row).expect("row serialises"))?;
            }
            manifest.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let meta: CorpusMeta = serde_json::from_slice(&std::fs::read(dir.join("corpus.json"))?)
            .map_err(|e| SynthError::Manifest { line: 0, reason: e.to_string() })?;
        let mut splits = Vec::new();
        for name in ["train", "dev", "test"] {
            splits.push(load_manifest(dir, &dir.join(format!("{name}.jsonl")))?);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self { lexicon: meta.lexicon, config: meta.synth, train, dev, test })
    }

    /// SHA-256 over manifests and feature bytes of every split.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for u in self.train.iter().chain(&self.dev).chain(&self.test) {
            h.update(u.id.as_bytes());
            h.update(u.transcript.text().as_bytes());
            let mut buf = Vec::new();
            u.features.write_to(&mut buf).expect("vec write");
            h.update(&buf);
        }
        crate::tokenizer::hex(&h.finalize())
    }
}

pub fn load_manifest(root: &Path, manifest: &Path) -> Result<Vec<Utterance>, SynthError> {
    let reader = std::io::BufReader::new(std::fs::File::open(manifest)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(&line).map_err(|e| SynthError::Manifest { line: i + 1, reason: e.to_string() })?;
        let path = root.join(&row.feature_file);
        let features = FeatureMatrix::read_from(std::io::BufReader::new(std::fs::File::open(&path)?))
            .map_err(|e| SynthError::Feature { path: path.clone(), reason: e.to_string() })?;
        if (features.frames(), features.dim()) != (row.n_frames, row.dim) {
            return Err(SynthError::Manifest { line: i + 1, reason: "feature shape disagrees with manifest".into() });
        }
        out.push(Utterance { id: row.id, features, transcript: Transcript::new(&row.transcript) });
    }
    Ok(out)
}
