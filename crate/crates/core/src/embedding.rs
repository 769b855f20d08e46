//! Embedding vectors, class registries, prompt templates and the fixed
//! text-embedding classifier.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default embedding width, matching CLIP ViT-B/32 text features.
pub const DEFAULT_EMBEDDING_DIM: usize = 512;

/// Placeholder substituted by the class label in prompt templates.
pub const CLASS_PLACEHOLDER: &str = "{class}";

/// A dense real vector living in the shared text/detector embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    /// Widens single-precision values, as stored in embedding files.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub fn normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(Embedding(v.0.iter().map(|x| x / n).collect()))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<String>,
    /// Instance count in the source dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u64>,
    #[serde(default = "default_role")]
    pub role: ClassRole,
}

fn default_role() -> ClassRole {
    ClassRole::Seen
}

impl ClassEntry {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            superclass: None,
            frequency: None,
            role: ClassRole::Seen,
        }
    }
}

/// Ordered set of classes; position `i` identifies class `i` everywhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRegistry {
    classes: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &classes {
            if c.name.is_empty() {
                return Err(Error::InvalidData("empty class name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateClass(c.name.clone()));
            }
        }
        Ok(Self { classes })
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(names.into_iter().map(ClassEntry::named).collect())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}

impl<'de> Deserialize<'de> for ClassRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            classes: Vec<ClassEntry>,
        }
        let raw = Raw::deserialize(d)?;
        ClassRegistry::new(raw.classes).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one prompt template is required".into(),
            ));
        }
        for t in &templates {
            if t.matches(CLASS_PLACEHOLDER).count() != 1 {
                return Err(Error::InvalidTemplate(t.clone()));
            }
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Prompts for `class_name`, in template order.
    pub fn fill(&self, class_name: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(CLASS_PLACEHOLDER, class_name, 1))
            .collect()
    }
}

/// Averages the encoded prompts of one class and normalizes the mean.
pub fn build_class_embedding<F>(
    class_name: &str,
    templates: &PromptTemplateSet,
    mut encoder: F,
) -> Result<Embedding>
where
    F: FnMut(&str) -> Result<Embedding>,
{
    let mut sum: Option<Vec<f64>> = None;
    for prompt in templates.fill(class_name) {
        let e = encoder(&prompt)?;
        match sum.as_mut() {
            None => sum = Some(e.into_inner()),
            Some(acc) => {
                check_dim(acc.len(), e.dim())?;
                acc.iter_mut().zip(e.as_slice()).for_each(|(a, b)| *a += b);
            }
        }
    }
    let k = templates.len() as f64;
    let mean = Embedding::new(sum.unwrap_or_default().into_iter().map(|v| v / k).collect())?;
    normalize(&mean).map_err(|_| Error::CancellingTemplates(class_name.to_string()))
}

/// Deterministic stand-in for a text encoder: a keyed hash of the text
/// seeds a generator whose Gaussian draws are normalized.
pub fn pseudo_encoder(text: &str, dim: usize, seed: u64) -> Embedding {
    assert!(dim >= 2, "pseudo_encoder requires dim >= 2");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((dim as u64).to_le_bytes());
    hasher.update(text.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Ok(e) = normalize(&Embedding(v)) {
            return e;
        }
    }
}

/// Fixed linear classifier whose columns are unit-norm class embeddings.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMatrix {
    names: Vec<String>,
    columns: Vec<Embedding>,
    dim: usize,
}

impl ClassifierMatrix {
    pub fn n_classes(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn column(&self, i: usize) -> &Embedding {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Embedding] {
        &self.columns
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn build_classifier(
    registry: &ClassRegistry,
    per_class: &BTreeMap<String, Embedding>,
) -> Result<ClassifierMatrix> {
    if registry.is_empty() {
        return Err(Error::EmptySubset);
    }
    let missing: Vec<String> = registry
        .names()
        .filter(|n| !per_class.contains_key(*n))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    let mut columns = Vec::with_capacity(registry.len());
    let mut dim = None;
    for name in registry.names() {
        let e = &per_class[name];
        match dim {
            None => dim = Some(e.dim()),
            Some(d) => check_dim(d, e.dim())?,
        }
        columns.push(normalize(e)?);
    }
    Ok(ClassifierMatrix {
        names: registry.names().map(str::to_string).collect(),
        columns,
        dim: dim.unwrap_or(0),
    })
}

/// Learnable temperature stored in log space; the effective logit scale is
/// `exp(log_scale)`, clipped to at most `max_effective_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParam {
    pub log_scale: f64,
    pub max_effective_scale: f64,
}

pub const MAX_EFFECTIVE_SCALE: f64 = 100.0;

impl TemperatureParam {
    pub fn new(log_scale: f64) -> Self {
        Self {
            log_scale,
            max_effective_scale: MAX_EFFECTIVE_SCALE,
        }
    }

    /// Effective scale `1 / 0.07`.
    pub fn initial() -> Self {
        Self::new((1.0f64 / 0.07).ln())
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp().min(self.max_effective_scale)
    }

    pub fn max_log_scale(&self) -> f64 {
        self.max_effective_scale.ln()
    }

    pub fn at_upper_bound(&self) -> bool {
        self.log_scale >= self.max_log_scale()
    }
}

impl Default for TemperatureParam {
    fn default() -> Self {
        Self::initial()
    }
}

pub fn clip_temperature(t: TemperatureParam) -> TemperatureParam {
    let max = t.max_log_scale();
    if t.log_scale > max {
        TemperatureParam {
            log_scale: max,
            ..t
        }
    } else {
        t
    }
}
