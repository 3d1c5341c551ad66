//! Synthetic entity-profile corpus.
//!
//! Each entity owns a fixed image embedding, a two-token name and one answer
//! sequence per attribute. Even-numbered attributes are asked as multimodal
//! questions (`[attr]` + image, the entity is only identifiable from the
//! image); odd-numbered ones are asked as text-only questions
//! (`[attr, name_a, name_b]`, zero image).
//!
//! Token layout inside the vocabulary: `[0, answer_classes)` are answer
//! tokens, the next `qa_per_entity` ids are attribute tokens, and the rest are
//! name tokens.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Multimodal,
    TextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub entity_id: usize,
    pub image_vec: Vec<f64>,
    pub name_tokens: [usize; 2],
    /// attribute token -> answer tokens
    pub attributes: BTreeMap<usize, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub entity_id: usize,
    pub image_vec: Vec<f64>,
    pub question_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub modality: Modality,
}

impl Example {
    pub fn is_multimodal(&self) -> bool {
        self.modality == Modality::Multimodal
    }

    /// Question followed by the first `answer_prefix` gold answer tokens.
    pub fn prompt(&self, answer_prefix: usize) -> Vec<usize> {
        let mut p = self.question_tokens.clone();
        p.extend_from_slice(&self.answer_tokens[..answer_prefix]);
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_entities: usize,
    pub qa_per_entity: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_entities: 60,
            qa_per_entity: 6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub forget_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            forget_ratio: 0.05,
            seed: 7,
        }
    }
}

/// Forget-ratio presets offered by the command line.
pub const FORGET_RATIO_PRESETS: [f64; 3] = [0.05, 0.10, 0.15];

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub profiles: Vec<Profile>,
}

impl Corpus {
    /// All examples, entity-major, attribute order within an entity.
    pub fn examples(&self) -> Vec<Example> {
        let qa = self.config.qa_per_entity;
        let mut out = Vec::with_capacity(self.profiles.len() * qa);
        for p in &self.profiles {
            for (q, (&attr, answer)) in p.attributes.iter().enumerate() {
                let multimodal = q % 2 == 0;
                let (question_tokens, image_vec, modality) = if multimodal {
                    (vec![attr], p.image_vec.clone(), Modality::Multimodal)
                } else {
                    (
                        vec![attr, p.name_tokens[0], p.name_tokens[1]],
                        vec![0.0; p.image_vec.len()],
                        Modality::TextOnly,
                    )
                };
                out.push(Example {
                    id: p.entity_id * qa + q,
                    entity_id: p.entity_id,
                    image_vec,
                    question_tokens,
                    answer_tokens: answer.clone(),
                    modality,
                });
            }
        }
        out
    }
}

/// Entity-level forget/retain partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub forget_entities: Vec<usize>,
    pub forget: Vec<Example>,
    pub retain: Vec<Example>,
}

pub fn generate_corpus(config: &CorpusConfig, layout: &ModelConfig) -> Result<Corpus> {
    if config.num_entities < 10 {
        return Err(Error::InvalidConfig(format!(
            "need at least 10 entities, got {}",
            config.num_entities
        )));
    }
    if config.qa_per_entity < 4 {
        return Err(Error::InvalidConfig(format!(
            "each entity needs at least 4 QA pairs, got {}",
            config.qa_per_entity
        )));
    }
    let classes = layout.answer_classes;
    let first_name = classes + config.qa_per_entity;
    if first_name + 2 > layout.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary of {} cannot hold {} answer, {} attribute and 2 name tokens",
            layout.vocab_size, classes, config.qa_per_entity
        )));
    }
    let name_pool: Vec<usize> = (first_name..layout.vocab_size).collect();
    let mut pairs = Vec::new();
    for (i, &a) in name_pool.iter().enumerate() {
        for &b in &name_pool[i + 1..] {
            pairs.push([a, b]);
        }
    }
    if pairs.len() < config.num_entities {
        return Err(Error::InvalidConfig(format!(
            "only {} distinct names for {} entities",
            pairs.len(),
            config.num_entities
        )));
    }
    // Every attribute needs enough distinct answer sequences (lengths 1..=3).
    let distinct_answers = classes + classes * classes + classes * classes * classes;
    if distinct_answers < config.num_entities {
        return Err(Error::InvalidConfig(
            "too few answer classes for unique answers".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    pairs.shuffle(&mut rng);

    let mut used: HashSet<(usize, Vec<usize>)> = HashSet::new();
    let mut profiles = Vec::with_capacity(config.num_entities);
    for entity_id in 0..config.num_entities {
        let mut attributes = BTreeMap::new();
        for q in 0..config.qa_per_entity {
            let attr = classes + q;
            let answer = loop {
                let len = rng.random_range(1..=3usize);
                let candidate: Vec<usize> =
                    (0..len).map(|_| rng.random_range(0..classes)).collect();
                if used.insert((attr, candidate.clone())) {
                    break candidate;
                }
            };
            attributes.insert(attr, answer);
        }
        profiles.push(Profile {
            entity_id,
            image_vec: image_embedding(config.seed, entity_id, layout.visual_input_dim),
            name_tokens: pairs[entity_id],
            attributes,
        });
    }
    Ok(Corpus {
        config: config.clone(),
        profiles,
    })
}

/// Image embedding determined by `(corpus_seed, entity_id)` alone.
pub fn image_embedding(corpus_seed: u64, entity_id: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(entity_id as u64 + 1);
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Number of forget entities for a ratio: `round(ratio * n)`.
pub fn forget_entity_count(forget_ratio: f64, num_entities: usize) -> usize {
    (forget_ratio * num_entities as f64).round() as usize
}

pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    if !(spec.forget_ratio > 0.0 && spec.forget_ratio < 0.5) {
        return Err(Error::InvalidConfig(format!(
            "forget ratio must lie in (0, 0.5), got {}",
            spec.forget_ratio
        )));
    }
    let n = corpus.profiles.len();
    let k = forget_entity_count(spec.forget_ratio, n);
    if k == 0 {
        return Err(Error::InvalidConfig(format!(
            "forget ratio {} selects no entity out of {n}",
            spec.forget_ratio
        )));
    }
    let mut ids: Vec<usize> = corpus.profiles.iter().map(|p| p.entity_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let mut forget_entities = ids[..k].to_vec();
    forget_entities.sort_unstable();
    let (forget, retain) = corpus
        .examples()
        .into_iter()
        .partition(|e| forget_entities.binary_search(&e.entity_id).is_ok());
    Ok(Split {
        forget_entities,
        forget,
        retain,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub examples: usize,
    pub forget: usize,
    pub retain: usize,
    pub multimodal: usize,
    pub text_only: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub corpus_seed: u64,
    pub num_entities: usize,
    pub qa_per_entity: usize,
    pub split_spec: SplitSpec,
    pub forget_entities: Vec<usize>,
    pub counts: CorpusCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Forget,
    Retain,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    split: SplitTag,
    #[serde(flatten)]
    example: Example,
}

/// Write the corpus as JSON lines: a header line, then one example per line.
pub fn write_corpus_jsonl(
    path: &Path,
    corpus: &Corpus,
    spec: &SplitSpec,
    split: &Split,
    config_hash: &str,
) -> Result<()> {
    let examples = corpus.examples();
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        corpus_seed: corpus.config.seed,
        num_entities: corpus.config.num_entities,
        qa_per_entity: corpus.config.qa_per_entity,
        split_spec: spec.clone(),
        forget_entities: split.forget_entities.clone(),
        counts: CorpusCounts {
            examples: examples.len(),
            forget: split.forget.len(),
            retain: split.retain.len(),
            multimodal: examples.iter().filter(|e| e.is_multimodal()).count(),
            text_only: examples.iter().filter(|e| !e.is_multimodal()).count(),
        },
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for example in examples {
        let split = if split.forget_entities.binary_search(&example.entity_id).is_ok() {
            SplitTag::Forget
        } else {
            SplitTag::Retain
        };
        serde_json::to_writer(&mut w, &ExampleLine { split, example })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a corpus file back into its header and split.
pub fn read_corpus_jsonl(path: &Path) -> Result<(CorpusHeader, Split)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let malformed = |detail: String| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail,
    };
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| malformed("empty corpus file".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let mut forget = Vec::new();
    let mut retain = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExampleLine = serde_json::from_str(&line)?;
        match parsed.split {
            SplitTag::Forget => forget.push(parsed.example),
            SplitTag::Retain => retain.push(parsed.example),
        }
    }
    if forget.len() != header.counts.forget || retain.len() != header.counts.retain {
        return Err(malformed("example counts disagree with header".into()));
    }
    Ok((
        header.clone(),
        Split {
            forget_entities: header.forget_entities,
            forget,
            retain,
        },
    ))
}
