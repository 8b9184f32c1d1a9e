//! Corpus construction: interval sampling of sequences, similarity
//! deduplication, grayscale conversion, class-balanced subsampling, manifest
//! mixing and the cross-dataset similarity audit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::png_bytes;
use crate::error::{Error, Result};
use crate::io::{write_atomic, CorpusManifest, ImageRecord, Provenance};
use crate::tensor::FeatureStack;

/// Keeps every `k`-th frame of each sequence, counted from its first frame index.
pub fn interval_sample(manifest: &CorpusManifest, k: u64) -> Result<CorpusManifest> {
    if k == 0 {
        return Err(Error::config("interval k must be at least 1"));
    }
    let mut first: HashMap<&str, u64> = HashMap::new();
    for r in &manifest.records {
        if let (Some(seq), Some(idx)) = (&r.sequence_id, r.frame_index) {
            let e = first.entry(seq.as_str()).or_insert(idx);
            *e = (*e).min(idx);
        }
    }
    let records: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| match (&r.sequence_id, r.frame_index) {
            (Some(seq), Some(idx)) => (idx - first[seq.as_str()]).is_multiple_of(k),
            _ => true,
        })
        .cloned()
        .collect();
    let mut out = CorpusManifest::new(records)?;
    out.provenance = manifest.provenance.clone();
    out.provenance.push(Provenance::new(
        "interval_sample",
        format!("k={k}; {} -> {} records", manifest.len(), out.len()),
    ));
    Ok(out)
}

/// Record embeddings, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::shape(format!(
                "{} ids of dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::codec("non-finite embedding value"));
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            normalized: false,
        })
    }

    /// Reads a single-layer feature dump, naming rows by position.
    pub fn from_features(stack: &FeatureStack) -> Result<Self> {
        if stack.layers() != 1 {
            return Err(Error::shape(format!(
                "embedding dump must have one layer, found {}",
                stack.layers()
            )));
        }
        let ids = (0..stack.tokens()).map(|i| i.to_string()).collect();
        Self::new(ids, stack.dim(), stack.values().to_vec())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        for (i, row) in self.vectors.chunks_mut(self.dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate {
                    op: "normalize",
                    message: format!("embedding {} is the zero vector", self.ids[i]),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.normalized = true;
        Ok(())
    }

    fn normalized_copy(&self) -> Result<EmbeddingSet> {
        let mut copy = self.clone();
        copy.normalize()?;
        Ok(copy)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Kept sets at least this large are scanned in parallel.
const PARALLEL_SCAN: usize = 2048;

/// Streams records in order and keeps one iff its cosine similarity to every
/// previously kept record is below `threshold`.
pub fn greedy_dedup(set: &EmbeddingSet, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!(
            "threshold {threshold} outside (0, 1]"
        )));
    }
    let set = set.normalized_copy()?;
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..set.len() {
        let v = set.row(i);
        let duplicate = if kept.len() >= PARALLEL_SCAN {
            kept.par_iter().any(|&j| dot(v, set.row(j)) >= threshold)
        } else {
            kept.iter().any(|&j| dot(v, set.row(j)) >= threshold)
        };
        if !duplicate {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Luma of an 8-bit RGB pixel, rounded to nearest.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Replaces every pixel by its luma in all three channels.
pub fn to_grayscale(img: &image::RgbImage) -> image::RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let y = luma(px[0], px[1], px[2]);
        *px = image::Rgb([y, y, y]);
    }
    out
}

/// Reads any supported image, converts it and writes it as PNG to `dst`.
pub fn grayscale_file(src: &Path, dst: &Path) -> Result<()> {
    let gray = to_grayscale(&image::open(src)?.to_rgb8());
    if let Some(dir) = dst.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(dst, &png_bytes(&gray)?)
}

/// Draws `n` records spread evenly over classes; the remainder goes to the
/// lexicographically first classes. Output keeps manifest order.
pub fn balanced_subsample(
    manifest: &CorpusManifest,
    n: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let class = r
            .class_label
            .as_deref()
            .ok_or_else(|| Error::config(format!("record {} has no class label", r.path)))?;
        by_class.entry(class).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::config("manifest has no labeled records"));
    }
    let classes = by_class.len();
    let (quota, extra) = (n / classes, n % classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (c, (class, members)) in by_class.iter_mut().enumerate() {
        let want = quota + usize::from(c < extra);
        if members.len() < want {
            return Err(Error::config(format!(
                "class `{class}` has {} records but needs {want}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    let mut out = CorpusManifest::new(
        chosen
            .iter()
            .map(|&i| manifest.records[i].clone())
            .collect(),
    )?;
    out.provenance = manifest.provenance.clone();
    out.provenance.push(Provenance::new(
        "balanced_subsample",
        format!("n={n}; classes={classes}; seed={seed}"),
    ));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTransform {
    #[default]
    None,
    Grayscale,
}

/// Concatenates disjoint manifests, recording each source and its transform.
pub fn mix_manifests(sources: &[(CorpusManifest, SourceTransform)]) -> Result<CorpusManifest> {
    let total: usize = sources.iter().map(|(m, _)| m.len()).sum();
    let mut seen: HashSet<&str> = HashSet::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    let mut provenance = Vec::new();
    for (s, (m, transform)) in sources.iter().enumerate() {
        for r in &m.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::config(format!(
                    "path `{}` appears in more than one source",
                    r.path
                )));
            }
            records.push(r.clone());
        }
        for p in &m.provenance {
            provenance.push(Provenance::new(
                format!("source{s}/{}", p.step),
                p.detail.clone(),
            ));
        }
        let datasets: std::collections::BTreeSet<&str> = m
            .records
            .iter()
            .map(|r| r.source_dataset.as_str())
            .collect();
        let names: Vec<&str> = datasets.into_iter().collect();
        let transform = match transform {
            SourceTransform::None => "none",
            SourceTransform::Grayscale => "grayscale",
        };
        provenance.push(Provenance::new(
            "mix",
            format!(
                "source {s}: {} records from [{}]; transform {transform}",
                m.len(),
                names.join(", ")
            ),
        ));
    }
    let mut out = CorpusManifest::new(records)?;
    out.provenance = provenance;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEstimate {
    pub mean: f64,
    pub mode: EstimateMode,
    pub pairs: u64,
}

/// Mean cosine similarity over all cross pairs, or over `pair_cap` seeded
/// uniform pairs when there are more than `pair_cap`.
pub fn cross_similarity(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    pair_cap: u64,
    seed: u64,
) -> Result<SimilarityEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("cross similarity needs two nonempty sets"));
    }
    if a.dim != b.dim {
        return Err(Error::shape(format!(
            "embedding dims {} and {} differ",
            a.dim, b.dim
        )));
    }
    if pair_cap == 0 {
        return Err(Error::config("pair_cap must be positive"));
    }
    let (a, b) = (a.normalized_copy()?, b.normalized_copy()?);
    let total = a.len() as u64 * b.len() as u64;
    if total <= pair_cap {
        let rows: Vec<f64> = (0..a.len())
            .into_par_iter()
            .map(|i| (0..b.len()).map(|j| dot(a.row(i), b.row(j))).sum::<f64>())
            .collect();
        return Ok(SimilarityEstimate {
            mean: rows.iter().sum::<f64>() / total as f64,
            mode: EstimateMode::Exact,
            pairs: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..pair_cap {
        let i = rng.random_range(0..a.len());
        let j = rng.random_range(0..b.len());
        sum += dot(a.row(i), b.row(j));
    }
    Ok(SimilarityEstimate {
        mean: sum / pair_cap as f64,
        mode: EstimateMode::Sampled,
        pairs: pair_cap,
    })
}

/// Summary of one curation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub step: String,
    pub input_count: usize,
    pub output_count: usize,
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarity: Vec<SimilarityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub a: String,
    pub b: String,
    pub estimate: SimilarityEstimate,
}

impl CurationReport {
    pub fn new(step: &str, input_count: usize, output_count: usize) -> Self {
        Self {
            step: step.to_string(),
            input_count,
            output_count,
            parameters: BTreeMap::new(),
            similarity: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.parameters.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Modality;

    fn seq_manifest(frames: &[(&str, u64)]) -> CorpusManifest {
        let records = frames
            .iter()
            .map(|&(s, i)| {
                ImageRecord::new(format!("{s}/{i}.png"), "src", Modality::Infrared).with_frame(s, i)
            })
            .collect();
        CorpusManifest::new(records).unwrap()
    }

    #[test]
    fn interval_examples() {
        let frames: Vec<(&str, u64)> = (0..10).map(|i| ("a", i)).collect();
        let m = seq_manifest(&frames);
        assert_eq!(interval_sample(&m, 1).unwrap().records, m.records);
        let ten = interval_sample(&m, 10).unwrap();
        assert_eq!(ten.len(), 1);
        assert_eq!(ten.records[0].frame_index, Some(0));
        let m = seq_manifest(&[("a", 5), ("b", 2), ("a", 7), ("a", 8), ("b", 4)]);
        let three: Vec<_> = interval_sample(&m, 3)
            .unwrap()
            .records
            .into_iter()
            .map(|r| r.path)
            .collect();
        assert_eq!(three, vec!["a/5.png", "b/2.png", "a/8.png"]);
        assert!(interval_sample(&m, 0).is_err());
    }

    #[test]
    fn dedup_examples() {
        let same = EmbeddingSet::new(
            (0..4).map(|i| i.to_string()).collect(),
            2,
            vec![1.0, 1.0, 2.0, 2.0, 0.5, 0.5, 3.0, 3.0],
        )
        .unwrap();
        assert_eq!(greedy_dedup(&same, 0.95).unwrap(), vec![0]);
        let ortho = EmbeddingSet::new(
            (0..3).map(|i| i.to_string()).collect(),
            3,
            vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0],
        )
        .unwrap();
        assert_eq!(greedy_dedup(&ortho, 0.01).unwrap(), vec![0, 1, 2]);
        let zero = EmbeddingSet::new(vec!["z".into()], 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            greedy_dedup(&zero, 0.9),
            Err(Error::Degenerate { .. })
        ));
        assert!(greedy_dedup(&ortho, 0.0).is_err());
    }

    #[test]
    fn grayscale_examples() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(255, 0, 0), 76);
        assert_eq!(luma(0, 255, 0), 150);
        assert_eq!(luma(0, 0, 255), 29);
        let img = image::RgbImage::from_fn(3, 2, |x, y| {
            image::Rgb([(x * 80) as u8, (y * 100) as u8, 37])
        });
        let g = to_grayscale(&img);
        assert!(g.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(to_grayscale(&g), g);
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.png");
        std::fs::write(&src, png_bytes(&img).unwrap()).unwrap();
        let dst = dir.path().join("out/c.png");
        grayscale_file(&src, &dst).unwrap();
        assert_eq!(image::open(&dst).unwrap().to_rgb8(), g);
    }

    fn labeled(counts: &[(&str, usize)]) -> CorpusManifest {
        let mut records = Vec::new();
        for &(class, n) in counts {
            for i in 0..n {
                records.push(
                    ImageRecord::new(format!("{class}/{i}"), "in1k", Modality::Rgb)
                        .with_class(class),
                );
            }
        }
        CorpusManifest::new(records).unwrap()
    }

    #[test]
    fn balanced_examples() {
        let m = labeled(&[("a", 5), ("b", 5), ("c", 5)]);
        let s = balanced_subsample(&m, 9, 42).unwrap();
        let again = balanced_subsample(&m, 9, 42).unwrap();
        assert_eq!(s, again);
        for class in ["a", "b", "c"] {
            assert_eq!(
                s.records
                    .iter()
                    .filter(|r| r.class_label.as_deref() == Some(class))
                    .count(),
                3
            );
        }
        let all = balanced_subsample(&m, 15, 1).unwrap();
        assert_eq!(all.records, m.records);
        let r = balanced_subsample(&m, 8, 1).unwrap();
        let count = |c: &str| {
            r.records
                .iter()
                .filter(|x| x.class_label.as_deref() == Some(c))
                .count()
        };
        assert_eq!((count("a"), count("b"), count("c")), (3, 3, 2));
        let short = labeled(&[("a", 5), ("b", 1)]);
        let err = balanced_subsample(&short, 4, 0).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn mix_examples() {
        let a = labeled(&[("a", 3)]);
        let b = seq_manifest(&[("s", 0), ("s", 1)]);
        let one = mix_manifests(&[(a.clone(), SourceTransform::Grayscale)]).unwrap();
        assert_eq!(one.records, a.records);
        assert!(one.provenance[0].detail.contains("grayscale"));
        let both = mix_manifests(&[
            (a.clone(), SourceTransform::Grayscale),
            (b, SourceTransform::None),
        ])
        .unwrap();
        assert_eq!(both.len(), 5);
        assert_eq!(both.provenance.len(), 2);
        assert!(mix_manifests(&[
            (a.clone(), SourceTransform::None),
            (a, SourceTransform::None)
        ])
        .is_err());
    }

    #[test]
    fn similarity_examples() {
        let u = EmbeddingSet::new(vec!["u".into()], 2, vec![0.6, 0.8]).unwrap();
        let e = cross_similarity(&u, &u, 10, 0).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-15);
        assert_eq!(e.mode, EstimateMode::Exact);
        let v = EmbeddingSet::new(vec!["v".into()], 2, vec![-0.8, 0.6]).unwrap();
        assert_eq!(cross_similarity(&u, &v, 10, 0).unwrap().mean, 0.0);
        let many =
            EmbeddingSet::new((0..5).map(|i| i.to_string()).collect(), 2, vec![1.0; 10]).unwrap();
        let s = cross_similarity(&many, &many, 7, 3).unwrap();
        assert_eq!((s.mode, s.pairs), (EstimateMode::Sampled, 7));
        assert!((s.mean - 1.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn dedup_kept_set_is_spread_and_covering(
            raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..40),
            t in 0.05f64..1.0,
        ) {
            let rows: Vec<Vec<f64>> = raw.into_iter().map(|mut r| { r[0] += 2.0; r }).collect();
            let set = EmbeddingSet::new((0..rows.len()).map(|i| i.to_string()).collect(), 3, rows.concat()).unwrap();
            let kept = greedy_dedup(&set, t).unwrap();
            let unit = set.normalized_copy().unwrap();
            proptest::prop_assert_eq!(kept[0], 0);
            for (x, &i) in kept.iter().enumerate() {
                for &j in &kept[..x] {
                    proptest::prop_assert!(dot(unit.row(i), unit.row(j)) < t);
                }
            }
            for i in (0..set.len()).filter(|i| !kept.contains(i)) {
                proptest::prop_assert!(kept.iter().any(|&j| j < i && dot(unit.row(i), unit.row(j)) >= t));
            }
        }

        #[test]
        fn interval_keeps_expected_count(lens in proptest::collection::vec(1u64..30, 1..5), k in 1u64..12) {
            let names: Vec<String> = (0..lens.len()).map(|s| format!("s{s}")).collect();
            let frames: Vec<(&str, u64)> = names.iter().zip(&lens).flat_map(|(s, &n)| (0..n).map(move |i| (s.as_str(), 100 + i))).collect();
            let out = interval_sample(&seq_manifest(&frames), k).unwrap();
            let expected: u64 = lens.iter().map(|n| n.div_ceil(k)).sum();
            proptest::prop_assert_eq!(out.len() as u64, expected);
        }

        #[test]
        fn balanced_counts_differ_by_at_most_one(sizes in proptest::collection::vec(3usize..9, 1..6), seed in 0u64..1000) {
            let names: Vec<String> = (0..sizes.len()).map(|c| format!("c{c}")).collect();
            let counts: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
            let n = 3 * sizes.len();
            let out = balanced_subsample(&labeled(&counts), n, seed).unwrap();
            proptest::prop_assert_eq!(out.len(), n);
            for name in &names {
                proptest::prop_assert_eq!(out.records.iter().filter(|r| r.class_label.as_ref() == Some(name)).count(), 3);
            }
        }
    }
}
