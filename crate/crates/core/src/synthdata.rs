//! Deterministic multi-grained triplet datasets.
//!
//! Every item belongs to a concept and carries a binary attribute code.
//! Its image vector is `prototype[concept] + sum_a code[a] * attr_dir[a]`
//! plus Gaussian noise. A query pairs a source item with a text vector that
//! describes how to move from the source's attributes to the target's:
//!
//! * fine queries specify every attribute, so exactly one item matches;
//! * coarse queries withhold some attributes (their text slots are zero),
//!   so exactly `coarse_multiplicity` items of the concept match. Only one of
//!   them is the labeled target.
//!
//! Items are split into train and eval targets per concept; the gallery
//! always holds every item.

use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::FeatureMatrix;

const MAGIC: &[u8; 4] = b"MGDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_concepts: usize,
    pub n_attributes: usize,
    pub items_per_concept: usize,
    pub coarse_fraction: f64,
    pub coarse_multiplicity: usize,
    /// Standard deviation of the per-item Gaussian noise.
    pub noise_level: f64,
    /// Scale of the attribute directions relative to concept prototypes.
    pub attribute_scale: f64,
    pub image_dim: usize,
    pub text_dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Fraction of each concept's items reserved as evaluation targets.
    pub eval_item_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_concepts: 20,
            n_attributes: 4,
            items_per_concept: 16,
            coarse_fraction: 0.5,
            coarse_multiplicity: 4,
            // Chosen so a trained baseline lands well below R@50 = 1 on
            // every stratum; at 1.0 R@50 saturates near 0.98.
            noise_level: 2.0,
            attribute_scale: 0.5,
            image_dim: 32,
            text_dim: 16,
            n_train: 2000,
            n_eval: 500,
            eval_item_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_items(&self) -> usize {
        self.n_concepts * self.items_per_concept
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_concepts", self.n_concepts),
            ("n_attributes", self.n_attributes),
            ("items_per_concept", self.items_per_concept),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if self.n_attributes > 16 {
            return Err(Error::invalid("n_attributes", "must be <= 16"));
        }
        if self.items_per_concept < 2 || self.items_per_concept > 1 << self.n_attributes {
            return Err(Error::invalid(
                "items_per_concept",
                format!(
                    "must lie in [2, 2^n_attributes = {}], got {}",
                    1usize << self.n_attributes,
                    self.items_per_concept
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.coarse_fraction) {
            return Err(Error::invalid("coarse_fraction", "must lie in [0, 1]"));
        }
        if self.coarse_multiplicity < 2 {
            return Err(Error::invalid("coarse_multiplicity", "must be >= 2"));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("attribute_scale", self.attribute_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        if !(self.eval_item_fraction > 0.0 && self.eval_item_fraction < 1.0) {
            return Err(Error::invalid("eval_item_fraction", "must lie in (0, 1)"));
        }
        if self.coarse_multiplicity >= self.items_per_concept {
            return Err(Error::MultiplicityUnsatisfiable(format!(
                "k = {} needs more than k items per concept, have {}",
                self.coarse_multiplicity, self.items_per_concept
            )));
        }
        Ok(())
    }

    fn eval_items_per_concept(&self) -> usize {
        let n = (self.eval_item_fraction * self.items_per_concept as f64).round() as usize;
        n.clamp(1, self.items_per_concept - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Fine,
    Coarse,
}

/// The latent content of a text vector: per-attribute change
/// `(target - source) / 2` and whether the attribute is mentioned at all.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextIntent {
    pub delta: Vec<i8>,
    pub specified: Vec<bool>,
}

impl TextIntent {
    fn latent(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.delta.iter().map(|&d| d as f64).collect();
        v.extend(self.specified.iter().map(|&s| if s { 1.0 } else { 0.0 }));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub source_id: usize,
    pub source_vec: Vec<f64>,
    pub text_vec: Vec<f64>,
    pub target_id: usize,
    pub granularity: Granularity,
    /// Sorted gallery ids of every item consistent with the query.
    pub valid_targets: Vec<usize>,
    pub intent: TextIntent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    /// Every item's image vector; row index is the item id.
    pub gallery: FeatureMatrix,
    /// `+1 / -1` attribute code per item.
    pub item_codes: Vec<Vec<i8>>,
    /// `true` for items reserved as evaluation targets.
    pub eval_item: Vec<bool>,
    pub prototypes: FeatureMatrix,
    pub attribute_dirs: FeatureMatrix,
    /// `text_dim x 2 * n_attributes` map from latent intent to text vector.
    pub text_embedding: FeatureMatrix,
    pub train: Vec<Triplet>,
    pub eval: Vec<Triplet>,
}

impl Dataset {
    pub fn concept_of(&self, item: usize) -> usize {
        item / self.spec.items_per_concept
    }

    pub fn n_items(&self) -> usize {
        self.gallery.rows()
    }

    /// Image vector an item of `concept` with `code` has before noise.
    pub fn clean_vector(&self, concept: usize, code: &[i8]) -> Vec<f64> {
        let mut v = self.prototypes.row(concept).to_vec();
        for (a, &c) in code.iter().enumerate() {
            for (x, &d) in v.iter_mut().zip(self.attribute_dirs.row(a)) {
                *x += c as f64 * d;
            }
        }
        v
    }

    /// Text vector for a latent intent.
    pub fn embed_text(&self, intent: &TextIntent) -> Vec<f64> {
        embed(&self.text_embedding, &intent.latent())
    }
}

fn embed(embedding: &FeatureMatrix, latent: &[f64]) -> Vec<f64> {
    embedding
        .iter_rows()
        .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum())
        .collect()
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::from_fn(rows, cols, |_, _| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

fn code_from_bits(bits: usize, n: usize) -> Vec<i8> {
    (0..n)
        .map(|a| if bits >> a & 1 == 1 { 1 } else { -1 })
        .collect()
}

/// Items of `concept` whose codes agree with `code` on every attribute not
/// in the `withheld` bitmask.
fn matching_items(
    codes: &[Vec<i8>],
    concept: usize,
    per_concept: usize,
    code: &[i8],
    withheld: usize,
) -> Vec<usize> {
    (concept * per_concept..(concept + 1) * per_concept)
        .filter(|&j| {
            codes[j]
                .iter()
                .zip(code)
                .enumerate()
                .all(|(a, (x, y))| withheld >> a & 1 == 1 || x == y)
        })
        .collect()
}

/// Generates a dataset. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_attr = spec.n_attributes;
    let per = spec.items_per_concept;
    let n_items = spec.n_items();

    let prototypes = gaussian(spec.n_concepts, spec.image_dim, 1.0, &mut rng);
    let attribute_dirs = gaussian(n_attr, spec.image_dim, spec.attribute_scale, &mut rng);
    let text_embedding = gaussian(
        spec.text_dim,
        2 * n_attr,
        1.0 / (n_attr as f64).sqrt(),
        &mut rng,
    );

    let mut item_codes = Vec::with_capacity(n_items);
    for _ in 0..spec.n_concepts {
        let mut all: Vec<usize> = (0..1usize << n_attr).collect();
        if per < all.len() {
            all.shuffle(&mut rng);
            all.truncate(per);
            all.sort_unstable();
        }
        item_codes.extend(all.into_iter().map(|b| code_from_bits(b, n_attr)));
    }

    let noise = gaussian(n_items, spec.image_dim, spec.noise_level, &mut rng);
    let mut gallery = FeatureMatrix::zeros(n_items, spec.image_dim);
    let mut eval_item = vec![false; n_items];
    let n_eval_items = spec.eval_items_per_concept();
    for c in 0..spec.n_concepts {
        let mut ids: Vec<usize> = (c * per..(c + 1) * per).collect();
        ids.shuffle(&mut rng);
        for &i in &ids[..n_eval_items] {
            eval_item[i] = true;
        }
    }

    let mut ds = Dataset {
        spec: spec.clone(),
        gallery: FeatureMatrix::zeros(1, 1),
        item_codes,
        eval_item,
        prototypes,
        attribute_dirs,
        text_embedding,
        train: Vec::new(),
        eval: Vec::new(),
    };
    for i in 0..n_items {
        let clean = ds.clean_vector(i / per, &ds.item_codes[i]);
        for (d, (x, n)) in gallery
            .row_mut(i)
            .iter_mut()
            .zip(clean.iter().zip(noise.row(i)))
        {
            *d = x + n;
        }
    }
    ds.gallery = gallery;

    // (target, withheld mask) pairs that leave exactly k candidates
    let k = spec.coarse_multiplicity;
    let mut coarse_options: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (t, opts) in coarse_options.iter_mut().enumerate() {
        let c = t / per;
        for mask in 1..(1usize << n_attr) {
            if matching_items(&ds.item_codes, c, per, &ds.item_codes[t], mask).len() == k {
                opts.push(mask);
            }
        }
    }

    let train_targets: Vec<usize> = (0..n_items).filter(|&i| !ds.eval_item[i]).collect();
    let eval_targets: Vec<usize> = (0..n_items).filter(|&i| ds.eval_item[i]).collect();
    ds.train = make_queries(&ds, &train_targets, spec.n_train, &coarse_options, &mut rng)?;
    ds.eval = make_queries(&ds, &eval_targets, spec.n_eval, &coarse_options, &mut rng)?;
    Ok(ds)
}

fn make_queries(
    ds: &Dataset,
    targets: &[usize],
    count: usize,
    coarse_options: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let spec = &ds.spec;
    let per = spec.items_per_concept;
    let coarse_targets: Vec<usize> = targets
        .iter()
        .copied()
        .filter(|&t| !coarse_options[t].is_empty())
        .collect();

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let coarse = rng.random::<f64>() < spec.coarse_fraction;
        let (target, withheld) = if coarse {
            let &t = coarse_targets.choose(rng).ok_or_else(|| {
                Error::MultiplicityUnsatisfiable(format!(
                    "no target has exactly k = {} items sharing a partial attribute description",
                    spec.coarse_multiplicity
                ))
            })?;
            (t, *coarse_options[t].choose(rng).expect("non-empty"))
        } else {
            (*targets.choose(rng).expect("split has items"), 0)
        };
        let concept = target / per;
        let code = &ds.item_codes[target];
        let valid = matching_items(&ds.item_codes, concept, per, code, withheld);
        let sources: Vec<usize> = (concept * per..(concept + 1) * per)
            .filter(|j| !valid.contains(j))
            .collect();
        let &source = sources.choose(rng).expect("k < items_per_concept");

        let specified: Vec<bool> = (0..spec.n_attributes)
            .map(|a| withheld >> a & 1 == 0)
            .collect();
        let delta: Vec<i8> = ds.item_codes[source]
            .iter()
            .zip(code)
            .zip(&specified)
            .map(|((&s, &t), &on)| if on { (t - s) / 2 } else { 0 })
            .collect();
        let intent = TextIntent { delta, specified };
        out.push(Triplet {
            source_id: source,
            source_vec: ds.gallery.row(source).to_vec(),
            text_vec: ds.embed_text(&intent),
            target_id: target,
            granularity: if coarse {
                Granularity::Coarse
            } else {
                Granularity::Fine
            },
            valid_targets: valid,
            intent,
        });
    }
    Ok(out)
}

/// Partitions queries into `(coarse, fine)`.
pub fn coarse_split(queries: &[Triplet]) -> (Vec<&Triplet>, Vec<&Triplet>) {
    queries
        .iter()
        .partition(|q| q.granularity == Granularity::Coarse)
}

#[derive(Serialize, Deserialize)]
struct TripletMeta {
    source_id: usize,
    target_id: usize,
    granularity: Granularity,
    valid_targets: Vec<usize>,
    intent: TextIntent,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format_version: u32,
    spec: SynthSpec,
    item_codes: Vec<Vec<i8>>,
    eval_item: Vec<bool>,
    train: Vec<TripletMeta>,
    eval: Vec<TripletMeta>,
    arrays: Vec<ArrayHeader>,
}

fn meta(t: &Triplet) -> TripletMeta {
    TripletMeta {
        source_id: t.source_id,
        target_id: t.target_id,
        granularity: t.granularity,
        valid_targets: t.valid_targets.clone(),
        intent: t.intent.clone(),
    }
}

fn text_matrix(ts: &[Triplet], dim: usize) -> FeatureMatrix {
    FeatureMatrix::from_fn(ts.len(), dim, |r, c| ts[r].text_vec[c])
}

impl Dataset {
    /// Binary dataset file: magic `MGDS`, `u32` format version, `u64` header
    /// length, JSON header, then the arrays listed in the header as
    /// row-major little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let arrays: Vec<(&str, FeatureMatrix)> = vec![
            ("gallery", self.gallery.clone()),
            ("prototypes", self.prototypes.clone()),
            ("attribute_dirs", self.attribute_dirs.clone()),
            ("text_embedding", self.text_embedding.clone()),
            ("train_text", text_matrix(&self.train, self.spec.text_dim)),
            ("eval_text", text_matrix(&self.eval, self.spec.text_dim)),
        ];
        let header = FileHeader {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            item_codes: self.item_codes.clone(),
            eval_item: self.eval_item.clone(),
            train: self.train.iter().map(meta).collect(),
            eval: self.eval.iter().map(meta).collect(),
            arrays: arrays
                .iter()
                .map(|(n, m)| ArrayHeader {
                    name: n.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, m) in &arrays {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format version {version}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: FileHeader = serde_json::from_slice(&json)?;

        let mut arrays = std::collections::HashMap::new();
        for a in &header.arrays {
            let mut buf = vec![0u8; a.rows * a.cols * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(
                a.name.clone(),
                FeatureMatrix::from_vec(a.rows, a.cols, data)?,
            );
        }
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
        };
        let gallery = take("gallery")?;
        let prototypes = take("prototypes")?;
        let attribute_dirs = take("attribute_dirs")?;
        let text_embedding = take("text_embedding")?;
        let train_text = take("train_text")?;
        let eval_text = take("eval_text")?;

        let spec = header.spec;
        if gallery.rows() != spec.n_items() || gallery.cols() != spec.image_dim {
            return Err(Error::Format(format!(
                "gallery is {} but spec implies {}x{}",
                gallery.shape_str(),
                spec.n_items(),
                spec.image_dim
            )));
        }
        let rebuild = |metas: Vec<TripletMeta>, text: &FeatureMatrix| -> Result<Vec<Triplet>> {
            if metas.len() != text.rows() && !metas.is_empty() {
                return Err(Error::Format(
                    "triplet count does not match text array".into(),
                ));
            }
            metas
                .into_iter()
                .enumerate()
                .map(|(i, m)| {
                    if m.source_id >= gallery.rows() || m.target_id >= gallery.rows() {
                        return Err(Error::Format(format!(
                            "triplet {i} references unknown item"
                        )));
                    }
                    Ok(Triplet {
                        source_id: m.source_id,
                        source_vec: gallery.row(m.source_id).to_vec(),
                        text_vec: text.row(i).to_vec(),
                        target_id: m.target_id,
                        granularity: m.granularity,
                        valid_targets: m.valid_targets,
                        intent: m.intent,
                    })
                })
                .collect()
        };
        let train = rebuild(header.train, &train_text)?;
        let eval = rebuild(header.eval, &eval_text)?;
        Ok(Dataset {
            spec,
            gallery,
            item_codes: header.item_codes,
            eval_item: header.eval_item,
            prototypes,
            attribute_dirs,
            text_embedding,
            train,
            eval,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
