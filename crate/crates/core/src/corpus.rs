//! Synthetic oracle corpus: identities described by one value per attribute
//! category, images as patch blocks carrying the attribute signatures, and
//! mock captions with exact per-word noise labels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;
use crate::tde::{
    literal_words, read_captions, static_skeleton, write_captions, CaptionRecord, MockCaptioner, SlotNoise, TemplateBank,
};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    /// One value per category describes an identity, so k = categories.
    pub categories: Vec<Category>,
    pub patch_dim: usize,
    pub patches: usize,
    /// Standard deviation of the Gaussian background in every patch.
    pub background_std: f64,
    /// Scale of a signature added to its patch.
    pub signature_scale: f64,
}

fn words_of(list: &str) -> Vec<String> {
    list.split_whitespace().map(str::to_string).collect()
}

impl Default for AttributeSpec {
    fn default() -> Self {
        let cat = |name: &str, v: &str| Category { name: name.to_string(), values: words_of(v) };
        Self {
            categories: vec![
                cat("upper", "jacket shirt sweater hoodie coat blouse vest tshirt"),
                cat("lower", "jeans shorts skirt trousers leggings overalls slacks chinos"),
                cat("shoes", "sneakers boots sandals heels loafers slippers flats clogs"),
                cat("carried", "backpack handbag umbrella suitcase briefcase tote purse satchel"),
            ],
            patch_dim: 32,
            patches: 12,
            background_std: 0.05,
            signature_scale: 1.0,
        }
    }
}

impl AttributeSpec {
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    /// Every attribute value in category order.
    pub fn vocabulary(&self) -> Vec<String> {
        self.categories.iter().flat_map(|c| c.values.iter().cloned()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            contract!("attribute spec needs at least 2 categories, has {}", self.k());
        }
        if self.patches < self.k() {
            contract!("{} patches cannot hold {} attributes", self.patches, self.k());
        }
        let vocab = self.vocabulary();
        let distinct: HashSet<&String> = vocab.iter().collect();
        if distinct.len() != vocab.len() {
            contract!("attribute values must be unique across categories");
        }
        for c in &self.categories {
            if c.values.len() < 2 {
                contract!("category {} needs at least 2 values to draw distractors", c.name);
            }
            if c.values.iter().any(|v| v.is_empty() || v.chars().any(|ch| !ch.is_alphanumeric() || ch.is_uppercase())) {
                contract!("category {} values must be single lowercase words", c.name);
            }
        }
        if vocab.len() > self.patch_dim {
            contract!(
                "{} attribute values need at least that many patch dimensions for orthogonal signatures, have {}",
                vocab.len(),
                self.patch_dim
            );
        }
        if !(self.background_std >= 0.0) || !(self.signature_scale > 0.0) {
            contract!("background_std must be ≥ 0 and signature_scale > 0");
        }
        Ok(())
    }

    /// Orthonormal signature per attribute value (Gram–Schmidt on Gaussian
    /// draws), in vocabulary order.
    pub fn signatures(&self, seed: u64) -> Result<BTreeMap<String, Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let d = self.patch_dim;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut out = BTreeMap::new();
        for v in self.vocabulary() {
            loop {
                let mut x: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                for b in &basis {
                    let proj: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
                    x.iter_mut().zip(b).for_each(|(a, c)| *a -= proj * c);
                }
                let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-6 {
                    x.iter_mut().for_each(|a| *a /= n);
                    basis.push(x.clone());
                    out.insert(v.clone(), x);
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Standard normal via Box–Muller.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    /// Noise rate of captions of training identities.
    pub noise_rate: f64,
    /// Share of noisy slots that name the true value's look-alike.
    pub confusion: f64,
    /// Noise rate of captions of held-out identities; `None` uses
    /// `noise_rate`. Zero models clean human annotations at test time.
    pub test_noise_rate: Option<f64>,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            identities: 500,
            images_per_identity: 2,
            captions_per_image: 4,
            noise_rate: 0.3,
            confusion: 0.0,
            test_noise_rate: None,
            test_fraction: 0.2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u64,
    /// Empty for imported real data.
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub identity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitManifest {
    pub fn validate(&self, identities: &[Identity]) -> Result<()> {
        let train: BTreeSet<u64> = self.train.iter().copied().collect();
        let test: BTreeSet<u64> = self.test.iter().copied().collect();
        if let Some(x) = train.intersection(&test).next() {
            contract!("identity {x} is on both sides of the split");
        }
        let all: BTreeSet<u64> = identities.iter().map(|i| i.id).collect();
        let union: BTreeSet<u64> = train.union(&test).copied().collect();
        if union != all {
            contract!("split does not cover exactly the corpus identities");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: AttributeSpec,
    pub params: CorpusParams,
    pub identities: Vec<Identity>,
    pub images: Vec<ImageMeta>,
    pub caption_count: usize,
    /// File name → SHA-256 of its bytes.
    pub checksums: BTreeMap<String, String>,
}

/// In-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: AttributeSpec,
    pub params: CorpusParams,
    pub identities: Vec<Identity>,
    pub images: Vec<ImageMeta>,
    /// One M×patch_dim block per image.
    pub patches: Vec<Tensor>,
    pub captions: Vec<CaptionRecord>,
    pub splits: SplitManifest,
}

const CAPTIONERS: [&str; 2] = ["mock-a", "mock-b"];

/// Generates the corpus. Each identity draws from its own ChaCha stream, so
/// its content does not depend on how many identities precede it.
pub fn gen_corpus(spec: &AttributeSpec, params: &CorpusParams, bank: &TemplateBank) -> Result<Dataset> {
    spec.validate()?;
    if params.identities == 0 || params.images_per_identity == 0 || params.captions_per_image == 0 {
        contract!("identity, image and caption counts must be positive");
    }
    for x in [params.noise_rate, params.test_noise_rate.unwrap_or(0.0), params.confusion] {
        if !(0.0..=1.0).contains(&x) {
            contract!("noise rates and confusion must lie in [0, 1], got {x}");
        }
    }
    let combos: f64 = spec.categories.iter().map(|c| c.values.len() as f64).product();
    if params.identities as f64 > combos {
        contract!("{} identities exceed the {combos} distinct attribute combinations", params.identities);
    }
    let vocab: HashSet<String> = spec.vocabulary().into_iter().collect();
    // Literal template words that are also attribute words would blur the
    // noise labels and the skeleton fingerprints.
    for t in bank.templates().iter().cloned().chain((0..2).map(|s| static_skeleton(spec.k(), s))) {
        if let Some(w) = literal_words(&t)?.into_iter().find(|w| vocab.contains(w)) {
            contract!("template {t:?} uses attribute word {w:?} outside a slot");
        }
    }
    let sigs = spec.signatures(params.seed)?;
    let pools: Vec<Vec<String>> = spec.categories.iter().map(|c| c.values.clone()).collect();

    let mut taken = HashSet::new();
    let mut identities = Vec::with_capacity(params.identities);
    let mut images = Vec::new();
    let mut patches = Vec::new();
    let (m, d) = (spec.patches, spec.patch_dim);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(params.seed);
    draw_rng.set_stream(1);
    for id in 0..params.identities as u64 {
        let attrs = loop {
            let a: Vec<String> = pools.iter().map(|p| p[draw_rng.gen_range(0..p.len())].clone()).collect();
            if taken.insert(a.clone()) {
                break a;
            }
        };
        let mut rng = identity_rng(params.seed, id, PATCH_STREAM);
        for _ in 0..params.images_per_identity {
            let image_id = format!("img{:06}", images.len());
            let mut block: Vec<f64> = (0..m * d).map(|_| spec.background_std * gaussian(&mut rng)).collect();
            let mut slots: Vec<usize> = (0..m).collect();
            slots.shuffle(&mut rng);
            for (a, &slot) in attrs.iter().zip(&slots) {
                for (x, s) in block[slot * d..(slot + 1) * d].iter_mut().zip(&sigs[a]) {
                    *x += spec.signature_scale * s;
                }
            }
            patches.push(Tensor::new(vec![m, d], block)?);
            images.push(ImageMeta { image_id, identity: id });
        }
        identities.push(Identity { id, attributes: attrs });
    }
    let splits = split_identities(&identities, params.test_fraction, params.seed)?;
    let captions = mock_captions(spec, params, &identities, &images, &splits.test, bank)?;
    Ok(Dataset { spec: spec.clone(), params: params.clone(), identities, images, patches, captions, splits })
}

const PATCH_STREAM: u64 = 2;
const CAPTION_STREAM: u64 = 3;

/// Generator for one identity's patches or captions; independent of every
/// other identity.
fn identity_rng(seed: u64, identity: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((identity << 2) | purpose);
    rng
}

/// Mock captions for every image; identities in `test` use the held-out
/// noise rate. Per image, the first half of
/// `captions_per_image` follow the static skeletons and the rest follow
/// random bank templates; the two mock captioners alternate.
pub fn mock_captions(
    spec: &AttributeSpec,
    params: &CorpusParams,
    identities: &[Identity],
    images: &[ImageMeta],
    test: &[u64],
    bank: &TemplateBank,
) -> Result<Vec<CaptionRecord>> {
    let test: HashSet<u64> = test.iter().copied().collect();
    let pools: Vec<Vec<String>> = spec.categories.iter().map(|c| c.values.clone()).collect();
    let captioners: Vec<MockCaptioner> =
        CAPTIONERS.iter().enumerate().map(|(i, id)| MockCaptioner::new(id, i, bank.clone())).collect();
    let attrs: BTreeMap<u64, &Vec<String>> = identities.iter().map(|i| (i.id, &i.attributes)).collect();
    let mut rngs: BTreeMap<u64, ChaCha8Rng> = BTreeMap::new();
    let mut out = Vec::with_capacity(images.len() * params.captions_per_image);
    for img in images {
        let a = attrs
            .get(&img.identity)
            .ok_or_else(|| Error::Contract(format!("image {} has unknown identity {}", img.image_id, img.identity)))?;
        if a.len() != pools.len() {
            contract!("identity {} has {} attributes for {} categories", img.identity, a.len(), pools.len());
        }
        let rate = match params.test_noise_rate {
            Some(r) if test.contains(&img.identity) => r,
            _ => params.noise_rate,
        };
        let noise = SlotNoise { rate, confusion: params.confusion };
        let rng = rngs.entry(img.identity).or_insert_with(|| identity_rng(params.seed, img.identity, CAPTION_STREAM));
        for c in 0..params.captions_per_image {
            let dynamic = c >= params.captions_per_image / 2;
            let captioner = &captioners[c % captioners.len()];
            let template = if dynamic { Some(rng.gen_range(0..bank.len())) } else { None };
            let caption_id = format!("{}-c{c}", img.image_id);
            out.push(captioner.caption(&caption_id, &img.image_id, a, &pools, template, noise, rng)?);
        }
    }
    Ok(out)
}

/// Identity-level split; the test side gets `round(n · test_fraction)`
/// identities, at least one on each side.
pub fn split_identities(identities: &[Identity], test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        contract!("test fraction {test_fraction} outside (0, 1)");
    }
    let n = identities.len();
    if n < 2 {
        contract!("splitting needs at least 2 identities, have {n}");
    }
    let mut ids: Vec<u64> = identities.iter().map(|i| i.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitManifest { train, test })
}

pub fn split_corpus(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    split_identities(&dataset.identities, test_fraction, seed)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

const FILES: [&str; 3] = ["patches.bin", "captions.jsonl", "splits.json"];

impl Dataset {
    pub fn image_index(&self) -> BTreeMap<&str, usize> {
        self.images.iter().enumerate().map(|(i, m)| (m.image_id.as_str(), i)).collect()
    }

    pub fn identity_of_image(&self, image_id: &str) -> Option<u64> {
        self.images.iter().find(|m| m.image_id == image_id).map(|m| m.identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.len() != self.images.len() {
            contract!("{} patch blocks for {} images", self.patches.len(), self.images.len());
        }
        let index = self.image_index();
        let mut seen = HashSet::new();
        for c in &self.captions {
            c.validate()?;
            if !index.contains_key(c.image_id.as_str()) {
                contract!("caption {} refers to unknown image {}", c.caption_id, c.image_id);
            }
            if !seen.insert(c.caption_id.as_str()) {
                contract!("duplicate caption id {}", c.caption_id);
            }
        }
        self.splits.validate(&self.identities)
    }

    /// Writes `manifest.json`, `patches.bin`, `captions.jsonl` and
    /// `splits.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let (m, d) = (self.spec.patches, self.spec.patch_dim);
        let mut flat = Vec::with_capacity(self.patches.len() * m * d);
        for p in &self.patches {
            flat.extend_from_slice(p.data());
        }
        Tensor::new(vec![self.patches.len(), m, d], flat)?.save(&dir.join("patches.bin"))?;
        write_captions(&dir.join("captions.jsonl"), &self.captions)?;
        std::fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&self.splits)?)?;
        let mut checksums = BTreeMap::new();
        for f in FILES {
            checksums.insert(f.to_string(), sha256_file(&dir.join(f))?);
        }
        let manifest = Manifest {
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
            identities: self.identities.clone(),
            images: self.images.clone(),
            caption_count: self.captions.len(),
            checksums,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a dataset directory after verifying every checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
        let head: serde_json::Value = serde_json::from_str(&raw)?;
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == DATASET_VERSION as u64 => {}
            other => return Err(Error::Format(format!("dataset version {other:?}, expected {DATASET_VERSION}"))),
        }
        let manifest: Manifest = serde_json::from_value(head)?;
        for f in FILES {
            let want = manifest
                .checksums
                .get(f)
                .ok_or_else(|| Error::Format(format!("manifest has no checksum for {f}")))?;
            let got = sha256_file(&dir.join(f))?;
            if &got != want {
                return Err(Error::Corruption(format!("{f} checksum mismatch")));
            }
        }
        let blob = Tensor::load(&dir.join("patches.bin"))?;
        let (m, d) = (manifest.spec.patches, manifest.spec.patch_dim);
        if blob.shape() != [manifest.images.len(), m, d] {
            return Err(Error::Format(format!("patches.bin has shape {:?}", blob.shape())));
        }
        let patches = blob
            .data()
            .chunks(m * d)
            .map(|c| Tensor::new(vec![m, d], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let captions = read_captions(&dir.join("captions.jsonl"))?;
        if captions.len() != manifest.caption_count {
            return Err(Error::Corruption(format!(
                "{} captions on disk, manifest says {}",
                captions.len(),
                manifest.caption_count
            )));
        }
        let splits: SplitManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json"))?)?;
        let ds = Dataset {
            spec: manifest.spec,
            params: manifest.params,
            identities: manifest.identities,
            images: manifest.images,
            patches,
            captions,
            splits,
        };
        ds.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(ds)
    }

    /// Captions whose image belongs to one of `ids`.
    pub fn captions_of(&self, ids: &[u64]) -> Vec<&CaptionRecord> {
        let want: HashSet<u64> = ids.iter().copied().collect();
        let owner: BTreeMap<&str, u64> = self.images.iter().map(|m| (m.image_id.as_str(), m.identity)).collect();
        self.captions.iter().filter(|c| want.contains(&owner[c.image_id.as_str()])).collect()
    }

    /// Indices of images whose identity is one of `ids`.
    pub fn images_of(&self, ids: &[u64]) -> Vec<usize> {
        let want: HashSet<u64> = ids.iter().copied().collect();
        (0..self.images.len()).filter(|i| want.contains(&self.images[*i].identity)).collect()
    }
}

/// Entry of a ReID-style annotation file.
#[derive(Debug, Clone, Deserialize)]
pub struct ReidAnnotation {
    pub id: u64,
    pub file_path: String,
    pub captions: Vec<String>,
}

/// Imports a ReID-style annotation list (identity, image path, captions)
/// with precomputed patch features: `features` is a rank-3 blob with one
/// M×d block per annotation, in file order. Captions carry no noise labels.
pub fn import_reid(annotations: &Path, features: &Path, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let list: Vec<ReidAnnotation> = serde_json::from_str(&std::fs::read_to_string(annotations)?)?;
    let blob = Tensor::load(features)?;
    if blob.shape().len() != 3 || blob.shape()[0] != list.len() {
        return Err(Error::Format(format!(
            "feature blob {:?} does not hold one block per annotation ({})",
            blob.shape(),
            list.len()
        )));
    }
    let (m, d) = (blob.shape()[1], blob.shape()[2]);
    let patches: Vec<Tensor> =
        blob.data().chunks(m * d).map(|c| Tensor::new(vec![m, d], c.to_vec())).collect::<Result<_>>()?;
    let mut identities: BTreeMap<u64, Identity> = BTreeMap::new();
    let mut images = Vec::new();
    let mut captions = Vec::new();
    for (i, a) in list.iter().enumerate() {
        identities.entry(a.id).or_insert(Identity { id: a.id, attributes: Vec::new() });
        let image_id = a.file_path.clone();
        for (c, text) in a.captions.iter().enumerate() {
            captions.push(CaptionRecord {
                caption_id: format!("{i}-c{c}"),
                image_id: image_id.clone(),
                text: text.clone(),
                source: crate::tde::CaptionSource {
                    kind: crate::tde::InstructionKind::Static,
                    captioner: "human".into(),
                },
                template_index: None,
                noise_labels: None,
            });
        }
        images.push(ImageMeta { image_id, identity: a.id });
    }
    let identities: Vec<Identity> = identities.into_values().collect();
    let splits = split_identities(&identities, test_fraction, seed)?;
    let spec = AttributeSpec { categories: Vec::new(), patch_dim: d, patches: m, ..AttributeSpec::default() };
    let params = CorpusParams {
        identities: identities.len(),
        images_per_identity: 0,
        captions_per_image: 0,
        noise_rate: 0.0,
        confusion: 0.0,
        test_noise_rate: None,
        test_fraction,
        seed,
    };
    let ds = Dataset { spec, params, identities, images, patches, captions, splits };
    ds.validate()?;
    Ok(ds)
}
