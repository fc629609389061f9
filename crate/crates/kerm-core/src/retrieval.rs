//! Fact embedding and exact top-k cosine retrieval.
//!
//! The embedding provider is a deterministic stand-in for a joint
//! image/text encoder: each token hashes to a seeded signed projection
//! column, token columns are summed and the result normalized. Externally
//! computed vectors can be imported instead. The index is exact full-scan
//! search; desk-scale knowledge bases make that cheap and deterministic.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

const INDEX_MAGIC: &[u8; 8] = b"KERMIDX1";
const INDEX_VERSION: u32 = 1;

/// Which embedding backend produces vectors, and at what dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingProviderSpec {
    pub provider: ProviderKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    HashBag,
    Imported,
}

impl EmbeddingProviderSpec {
    pub fn hash_bag(dim: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            provider: ProviderKind::HashBag,
            dim,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!(
                "embedding dimension must be >= 8, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Signed +-1 projection column for one token, derived from a SHA-256
/// bit stream over (seed, token, counter). Stable across platforms.
fn token_column(seed: u64, token: &str, dim: usize, out: &mut [f64]) {
    let mut produced = 0;
    let mut counter = 0u32;
    while produced < dim {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(token.as_bytes());
        hasher.update(counter.to_le_bytes());
        let digest = hasher.finalize();
        for byte in digest.iter() {
            for bit in 0..8 {
                if produced == dim {
                    break;
                }
                out[produced] = if (byte >> bit) & 1 == 1 { 1.0 } else { -1.0 };
                produced += 1;
            }
        }
        counter += 1;
    }
}

/// Deterministic unit-norm embedding of canonical text.
pub fn embed_text(spec: &EmbeddingProviderSpec, text: &str) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.provider == ProviderKind::Imported {
        return Err(Error::Invalid(
            "imported provider has no text encoder; load vectors from file".into(),
        ));
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Invalid("cannot embed empty text".into()));
    }
    let mut acc = vec![0.0; spec.dim];
    let mut col = vec![0.0; spec.dim];
    for token in tokens {
        token_column(spec.seed, token, spec.dim, &mut col);
        for (a, c) in acc.iter_mut().zip(&col) {
            *a += c;
        }
    }
    normalize(&mut acc)?;
    Ok(acc)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Invalid("zero vector cannot be normalized".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Normalized sub-rectangle of a view image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCrop {
    pub index: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionCrop {
    fn new(index: usize, rect: (f64, f64, f64, f64)) -> Self {
        Self {
            index,
            x0: rect.0,
            y0: rect.1,
            x1: rect.2,
            y1: rect.3,
        }
    }

    pub fn overlaps(&self, other: &RegionCrop) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// The five default sub-regions: four half-size corners plus a centered
/// half-size crop.
pub fn default_crops() -> Vec<RegionCrop> {
    crop_regions(5).expect("5 is supported")
}

/// Crop layouts for the supported region counts: 1 (full view), 5
/// (corners + center), 9 (3x3 grid).
pub fn crop_regions(count: usize) -> Result<Vec<RegionCrop>> {
    match count {
        1 => Ok(vec![RegionCrop::new(0, (0.0, 0.0, 1.0, 1.0))]),
        5 => Ok(vec![
            RegionCrop::new(0, (0.0, 0.0, 0.5, 0.5)),
            RegionCrop::new(1, (0.5, 0.0, 1.0, 0.5)),
            RegionCrop::new(2, (0.0, 0.5, 0.5, 1.0)),
            RegionCrop::new(3, (0.5, 0.5, 1.0, 1.0)),
            RegionCrop::new(4, (0.25, 0.25, 0.75, 0.75)),
        ]),
        9 => {
            let mut crops = Vec::with_capacity(9);
            for row in 0..3 {
                for col in 0..3 {
                    let idx = row * 3 + col;
                    crops.push(RegionCrop::new(
                        idx,
                        (
                            col as f64 / 3.0,
                            row as f64 / 3.0,
                            (col + 1) as f64 / 3.0,
                            (row + 1) as f64 / 3.0,
                        ),
                    ));
                }
            }
            Ok(crops)
        }
        other => Err(Error::Config(format!(
            "unsupported region count {other}; expected 1, 5, or 9"
        ))),
    }
}

/// Immutable exact-search index: id-ordered unit vectors, one per fact.
/// Vectors are held in single precision, matching the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct FactIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl FactIndex {
    /// Embeds every fact in the knowledge base as a search key.
    pub fn build(kb: &KnowledgeBase, spec: &EmbeddingProviderSpec) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::Invalid("cannot index an empty knowledge base".into()));
        }
        let mut ids = Vec::with_capacity(kb.len());
        let mut vectors = Vec::with_capacity(kb.len());
        for fact in kb.facts() {
            let v = embed_text(spec, &fact.text)?;
            ids.push(fact.id.clone());
            vectors.push(v.iter().map(|x| *x as f32).collect());
        }
        Ok(Self {
            dim: spec.dim,
            ids,
            vectors,
        })
    }

    /// Builds from externally computed vectors (JSON Lines
    /// {"id": ..., "vec": [...]}). Vectors are renormalized; every fact in
    /// the knowledge base must be covered.
    pub fn from_imported(kb: &KnowledgeBase, r: impl BufRead, dim: usize) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ImportedVec {
            id: String,
            vec: Vec<f32>,
        }
        let mut by_id = std::collections::BTreeMap::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ImportedVec = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad imported vector line: {e}")))?;
            if entry.vec.len() != dim {
                return Err(Error::Format(format!(
                    "imported vector for {} has dim {}, expected {dim}",
                    entry.id,
                    entry.vec.len()
                )));
            }
            let mut v: Vec<f64> = entry.vec.iter().map(|x| *x as f64).collect();
            normalize(&mut v)?;
            by_id.insert(entry.id, v.iter().map(|x| *x as f32).collect::<Vec<f32>>());
        }
        let mut ids = Vec::with_capacity(kb.len());
        let mut vectors = Vec::with_capacity(kb.len());
        for fact in kb.facts() {
            let v = by_id.remove(&fact.id).ok_or_else(|| {
                Error::Format(format!("imported vectors missing fact {}", fact.id))
            })?;
            ids.push(fact.id.clone());
            vectors.push(v);
        }
        Ok(Self { dim, ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i]
    }

    pub fn vector_by_id(&self, id: &str) -> Option<&[f32]> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
            .map(|i| self.vectors[i].as_slice())
    }

    /// Exact top-k by cosine over unit vectors: descending score, ties
    /// broken by ascending fact id. The query is renormalized if it is
    /// within 1e-3 of unit norm, rejected otherwise.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 || k > self.len() {
            return Err(Error::Invalid(format!(
                "k must be in 1..={}, got {k}",
                self.len()
            )));
        }
        if query.len() != self.dim {
            return Err(Error::Dim(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.dim
            )));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Invalid(format!(
                "query norm {norm} is not within 1e-3 of 1"
            )));
        }
        let mut scores: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| *a as f64 * b).sum();
                (i, (dot / norm).clamp(-1.0, 1.0))
            })
            .collect();
        // ids are index-ordered, so the index doubles as the tie-break key
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(scores
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (id, vec) in self.ids.iter().zip(&self.vectors) {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in vec {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Format("fact id is not UTF-8".into()))?;
            let mut vec = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                vec.push(f32::from_le_bytes(b));
            }
            ids.push(id);
            vectors.push(vec);
        }
        Ok(Self { dim, ids, vectors })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Top-k facts for each region of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFacts {
    pub view_id: String,
    /// One ranked (fact id, cosine) list per region, each exactly k long.
    pub per_region: Vec<Vec<(String, f64)>>,
}

impl RegionFacts {
    pub fn total(&self) -> usize {
        self.per_region.iter().map(Vec::len).sum()
    }
}

/// Retrieves k facts for each region query vector of a view.
pub fn retrieve_view_facts(
    index: &FactIndex,
    view_id: &str,
    region_queries: &[Vec<f64>],
    k: usize,
) -> Result<RegionFacts> {
    let per_region = region_queries
        .iter()
        .map(|q| index.top_k(q, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionFacts {
        view_id: view_id.to_string(),
        per_region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Fact, FactKind, KnowledgeBase};

    fn spec() -> EmbeddingProviderSpec {
        EmbeddingProviderSpec::hash_bag(64, 7).unwrap()
    }

    fn small_kb(texts: &[&str]) -> KnowledgeBase {
        KnowledgeBase::build(
            texts
                .iter()
                .map(|t| Fact::new(t.to_string(), FactKind::Attribute, "r".into()))
                .collect(),
        )
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let s = spec();
        let a = embed_text(&s, "red chair").unwrap();
        let b = embed_text(&s, "red chair").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_rejects_empty_text() {
        assert!(embed_text(&spec(), "   ").is_err());
    }

    #[test]
    fn dim_below_8_rejected() {
        assert!(EmbeddingProviderSpec::hash_bag(4, 0).is_err());
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let s = spec();
        let a = embed_text(&s, "red chair armrest").unwrap();
        let b = embed_text(&s, "red chair").unwrap();
        let c = embed_text(&s, "blue lamp").unwrap();
        assert!(cosine(&a, &b) > cosine(&b, &c));
    }

    #[test]
    fn crop_counts() {
        assert_eq!(crop_regions(1).unwrap().len(), 1);
        let five = crop_regions(5).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!((five[0].x0, five[0].y0, five[0].x1, five[0].y1), (0.0, 0.0, 0.5, 0.5));
        assert_eq!((five[4].x0, five[4].y0, five[4].x1, five[4].y1), (0.25, 0.25, 0.75, 0.75));
        let nine = crop_regions(9).unwrap();
        assert_eq!(nine.len(), 9);
        for c in &nine {
            assert!((c.x1 - c.x0 - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(crop_regions(3).is_err());
    }

    #[test]
    fn self_retrieval_scores_one() {
        let s = spec();
        let kb = small_kb(&["red chair", "blue lamp", "green rug"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let q = embed_text(&s, "blue lamp").unwrap();
        let hits = index.top_k(&q, 1).unwrap();
        let expect = kb
            .facts()
            .iter()
            .find(|f| f.text == "blue lamp")
            .unwrap()
            .id
            .clone();
        assert_eq!(hits[0].0, expect);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_equal_index_size_is_full_sort() {
        let s = spec();
        let kb = small_kb(&["red chair", "blue lamp", "green rug", "wooden table"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let q = embed_text(&s, "red chair").unwrap();
        let hits = index.top_k(&q, 4).unwrap();
        assert_eq!(hits.len(), 4);
        for w in hits.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn k_out_of_range_rejected() {
        let s = spec();
        let kb = small_kb(&["red chair"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let q = embed_text(&s, "red chair").unwrap();
        assert!(index.top_k(&q, 0).is_err());
        assert!(index.top_k(&q, 2).is_err());
    }

    #[test]
    fn non_unit_query_rejected_but_near_unit_renormalized() {
        let s = spec();
        let kb = small_kb(&["red chair", "blue lamp"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let q = embed_text(&s, "red chair").unwrap();
        let slightly: Vec<f64> = q.iter().map(|v| v * (1.0 + 5e-4)).collect();
        assert!(index.top_k(&slightly, 1).is_ok());
        let badly: Vec<f64> = q.iter().map(|v| v * 2.0).collect();
        assert!(index.top_k(&badly, 1).is_err());
    }

    #[test]
    fn index_roundtrips_bit_exactly() {
        let s = spec();
        let kb = small_kb(&["red chair", "blue lamp", "green rug"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let mut bytes = Vec::new();
        index.write(&mut bytes).unwrap();
        let re = FactIndex::read(bytes.as_slice()).unwrap();
        assert_eq!(index, re);
        let mut bytes2 = Vec::new();
        re.write(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let s = spec();
        let kb = small_kb(&["red chair"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        let mut bytes = Vec::new();
        index.write(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(FactIndex::read(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn stored_vectors_match_reembedding() {
        let s = spec();
        let kb = small_kb(&["red chair", "blue lamp"]);
        let index = FactIndex::build(&kb, &s).unwrap();
        for fact in kb.facts() {
            let stored = index.vector_by_id(&fact.id).unwrap();
            let fresh = embed_text(&s, &fact.text).unwrap();
            for (a, b) in stored.iter().zip(&fresh) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn imported_vectors_are_renormalized() {
        let kb = small_kb(&["red chair", "blue lamp"]);
        let mut lines = String::new();
        for (i, f) in kb.facts().iter().enumerate() {
            let mut v = vec![0.0f32; 8];
            v[i] = 3.0; // non-unit on purpose
            lines.push_str(&format!(
                "{}\n",
                serde_json::json!({"id": f.id, "vec": v})
            ));
        }
        let index = FactIndex::from_imported(&kb, lines.as_bytes(), 8).unwrap();
        for i in 0..index.len() {
            let n: f64 = index.vector(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let missing = FactIndex::from_imported(&kb, "".as_bytes(), 8);
        assert!(missing.is_err());
    }

    #[test]
    fn region_facts_counts() {
        let s = spec();
        let texts: Vec<String> = (0..30).map(|i| format!("object kind{i} here")).collect();
        let kb = small_kb(&texts.iter().map(String::as_str).collect::<Vec<_>>());
        let index = FactIndex::build(&kb, &s).unwrap();
        let queries: Vec<Vec<f64>> = (0..5)
            .map(|i| embed_text(&s, &format!("object kind{i}")).unwrap())
            .collect();
        let rf = retrieve_view_facts(&index, "v0", &queries, 5).unwrap();
        assert_eq!(rf.total(), 25);
        let one = retrieve_view_facts(&index, "v0", &queries[..1], 5).unwrap();
        assert_eq!(one.total(), 5);
        // never a duplicate within one region
        for region in &rf.per_region {
            let mut ids: Vec<&str> = region.iter().map(|(id, _)| id.as_str()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), region.len());
        }
    }
}
