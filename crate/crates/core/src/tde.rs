//! Template-based diversity enhancement: captioning instructions, the
//! template bank, captioner clients and a diversity report.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{contract, Error, Result};
use crate::tokenizer::words;

const STATIC_INSTRUCTION: &str = "Write a description about the overall appearance of the person in the image, \
including the attributes: clothing, shoes, hairstyle, gender and belongings. If any attribute is not visible, \
you can ignore it. Do not imagine any contents that are not in the image.";

const DYNAMIC_HEAD: &str = "Generate a description about the overall appearance of the person, including clothing, \
shoes, hairstyle, gender, and belongings, in a style similar to the template: '";

const DYNAMIC_TAIL: &str = "'. If some requirements in the template are not visible, you can ignore them. \
Do not imagine any contents that are not in the image.";

/// The fixed captioning instruction used for every image.
pub fn static_instruction() -> &'static str {
    STATIC_INSTRUCTION
}

/// The captioning instruction parameterized by a sentence template.
pub fn dynamic_instruction(template: &str) -> Result<String> {
    if template.is_empty() {
        contract!("dynamic instruction needs a non-empty template");
    }
    Ok(format!("{DYNAMIC_HEAD}{template}{DYNAMIC_TAIL}"))
}

const SHIPPED_BANK: &str = include_str!("../assets/templates.txt");

/// Ordered, duplicate-free list of sentence templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    pub id: String,
    pub source: String,
    templates: Vec<String>,
}

impl TemplateBank {
    pub fn new(id: &str, source: &str, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            contract!("template bank {id} is empty");
        }
        let mut seen = HashSet::new();
        for (i, t) in templates.iter().enumerate() {
            if t.trim().is_empty() {
                contract!("template {i} of bank {id} is empty");
            }
            if !seen.insert(t.as_str()) {
                contract!("template bank {id} repeats {t:?}");
            }
        }
        Ok(Self { id: id.to_string(), source: source.to_string(), templates })
    }

    /// One template per line; blank lines and lines starting with `#` are
    /// skipped.
    pub fn parse(id: &str, source: &str, text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self::new(id, source, templates)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("bank").to_string();
        Self::parse(&id, &path.display().to_string(), &text)
    }

    /// The 46-entry example bank bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse("example-46", "bundled example bank (not from the original study)", SHIPPED_BANK)
            .expect("bundled bank is valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.templates.get(i).map(String::as_str)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstructionKind {
    Static,
    Dynamic,
}

/// Which instruction produced a caption and which captioner ran it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaptionSource {
    pub kind: InstructionKind,
    pub captioner: String,
}

impl fmt::Display for CaptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            InstructionKind::Static => "static",
            InstructionKind::Dynamic => "dynamic",
        };
        write!(f, "{k}:{}", self.captioner)
    }
}

impl FromStr for CaptionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, c) = s.split_once(':').ok_or_else(|| Error::Format(format!("caption source {s:?} lacks ':'")))?;
        let kind = match k {
            "static" => InstructionKind::Static,
            "dynamic" => InstructionKind::Dynamic,
            _ => return Err(Error::Format(format!("unknown caption source kind {k:?}"))),
        };
        if c.is_empty() {
            return Err(Error::Format("caption source has an empty captioner id".into()));
        }
        Ok(Self { kind, captioner: c.to_string() })
    }
}

impl Serialize for CaptionSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CaptionSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One generated caption. Stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
    pub source: CaptionSource,
    pub template_index: Option<usize>,
    /// One flag per word of `text` (synthetic captions only).
    pub noise_labels: Option<Vec<bool>>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        match (self.source.kind, self.template_index) {
            (InstructionKind::Dynamic, None) => contract!("dynamic caption {} has no template index", self.caption_id),
            (InstructionKind::Static, Some(_)) => contract!("static caption {} has a template index", self.caption_id),
            _ => {}
        }
        if let Some(l) = &self.noise_labels {
            let n = words(&self.text).len();
            if l.len() != n {
                contract!("caption {}: {} noise labels for {n} words", self.caption_id, l.len());
            }
        }
        if self.text.trim().is_empty() {
            contract!("caption {} is empty", self.caption_id);
        }
        Ok(())
    }
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CaptionRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.validate().map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(usize),
}

fn parse_skeleton(template: &str) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            out.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Contract(format!("unclosed slot in template {template:?}")))?;
        let inner = &rest[open + 1..open + close];
        let slot = inner
            .parse()
            .map_err(|_| Error::Contract(format!("slot {{{inner}}} in {template:?} is not an index")))?;
        out.push(Piece::Slot(slot));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest.to_string()));
    }
    Ok(out)
}

/// Words of a template outside its slots.
pub fn literal_words(template: &str) -> Result<Vec<String>> {
    Ok(parse_skeleton(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Text(t) => Some(words(&t)),
            Piece::Slot(_) => None,
        })
        .flatten()
        .collect())
}

/// Fixed sentence skeleton a mock captioner follows under the static
/// instruction. `style` picks one of two phrasings so that two captioners
/// differ, as two real models would.
pub fn static_skeleton(k: usize, style: usize) -> String {
    let slots: Vec<String> = (0..k).map(|i| format!("a {{{i}}}")).collect();
    let list = match slots.len() {
        0 => String::new(),
        1 => slots[0].clone(),
        n => format!("{} and {}", slots[..n - 1].join(", "), slots[n - 1]),
    };
    if style.is_multiple_of(2) {
        format!("The person is wearing {list}.")
    } else {
        format!("A pedestrian with {list}.")
    }
}

/// How a mock captioner corrupts an attribute slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotNoise {
    /// Probability that a slot names a wrong value.
    pub rate: f64,
    /// Given a wrong slot, probability that it names the value's fixed
    /// look-alike (its neighbour in the pool, index `i ^ 1`) rather than a
    /// uniformly drawn distractor. Real captioners confuse similar items far
    /// more often than unrelated ones.
    pub confusion: f64,
}

impl SlotNoise {
    pub fn uniform(rate: f64) -> Self {
        Self { rate, confusion: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            contract!("noise rate {} outside [0, 1]", self.rate);
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            contract!("confusion {} outside [0, 1]", self.confusion);
        }
        Ok(())
    }
}

/// Deterministic captioner over known attributes. Each attribute slot has a
/// pool of alternative values; a noisy slot is filled from the pool with a
/// value the image does not show.
#[derive(Debug, Clone)]
pub struct MockCaptioner {
    pub id: String,
    pub style: usize,
    pub bank: TemplateBank,
}

impl MockCaptioner {
    pub fn new(id: &str, style: usize, bank: TemplateBank) -> Self {
        Self { id: id.to_string(), style, bank }
    }

    /// `attributes[i]` fills slot `{i}`; `pools[i]` lists the values slot `i`
    /// can take. With `template_index` the caption follows that bank entry
    /// (dynamic), otherwise the captioner's static skeleton.
    #[allow(clippy::too_many_arguments)]
    pub fn caption<R: Rng + ?Sized>(
        &self,
        caption_id: &str,
        image_id: &str,
        attributes: &[String],
        pools: &[Vec<String>],
        template_index: Option<usize>,
        noise: SlotNoise,
        rng: &mut R,
    ) -> Result<CaptionRecord> {
        mock_caption(self, caption_id, image_id, attributes, pools, template_index, noise, rng)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn mock_caption<R: Rng + ?Sized>(
    captioner: &MockCaptioner,
    caption_id: &str,
    image_id: &str,
    attributes: &[String],
    pools: &[Vec<String>],
    template_index: Option<usize>,
    noise: SlotNoise,
    rng: &mut R,
) -> Result<CaptionRecord> {
    if attributes.is_empty() {
        contract!("mock caption needs at least one attribute");
    }
    noise.validate()?;
    if pools.len() != attributes.len() {
        contract!("{} attribute pools for {} attributes", pools.len(), attributes.len());
    }
    let skeleton = match template_index {
        Some(i) => captioner
            .bank
            .get(i)
            .ok_or_else(|| Error::Contract(format!("template index {i} outside a bank of {}", captioner.bank.len())))?
            .to_string(),
        None => static_skeleton(attributes.len(), captioner.style),
    };
    let pieces = parse_skeleton(&skeleton)?;

    // Every slot draws the same number of times, in slot order, whether or
    // not the template shows it, so the random stream does not depend on
    // the template.
    let shown: HashSet<&str> = attributes.iter().map(String::as_str).collect();
    let mut fill = Vec::with_capacity(attributes.len());
    for (i, a) in attributes.iter().enumerate() {
        let noisy = rng.gen::<f64>() < noise.rate;
        let confused = rng.gen::<f64>() < noise.confusion;
        let uniform = rng.gen::<f64>();
        if noisy {
            let partner = pools[i]
                .iter()
                .position(|v| v == a)
                .and_then(|j| pools[i].get(j ^ 1))
                .filter(|v| !shown.contains(v.as_str()));
            let pick = match partner {
                Some(v) if confused => v,
                _ => {
                    let candidates: Vec<&String> = pools[i].iter().filter(|v| !shown.contains(v.as_str())).collect();
                    if candidates.is_empty() {
                        contract!("slot {i} has no distractor outside the image's attributes");
                    }
                    candidates[((uniform * candidates.len() as f64) as usize).min(candidates.len() - 1)]
                }
            };
            fill.push((pick.clone(), true));
        } else {
            fill.push((a.clone(), false));
        }
    }

    let mut text = String::new();
    let mut labels = Vec::new();
    for p in &pieces {
        match p {
            Piece::Text(t) => {
                text.push_str(t);
                labels.extend(std::iter::repeat_n(false, words(t).len()));
            }
            Piece::Slot(i) => {
                let (v, noisy) = fill
                    .get(*i)
                    .ok_or_else(|| Error::Contract(format!("slot {{{i}}} but only {} attributes", attributes.len())))?;
                text.push_str(v);
                labels.extend(std::iter::repeat_n(*noisy, words(v).len()));
            }
        }
    }
    if words(&text).len() != labels.len() {
        contract!("template {skeleton:?} glues a slot to neighbouring letters");
    }
    let kind = if template_index.is_some() { InstructionKind::Dynamic } else { InstructionKind::Static };
    Ok(CaptionRecord {
        caption_id: caption_id.to_string(),
        image_id: image_id.to_string(),
        text,
        source: CaptionSource { kind, captioner: captioner.id.clone() },
        template_index,
        noise_labels: Some(labels),
    })
}

/// HTTP captioner: `POST {base}/caption` with `{"image_ref","instruction"}`,
/// expecting `{"caption"}`.
#[derive(Debug, Clone)]
pub struct CaptionerEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after the first.
    pub retries: u32,
    /// Delay before retry `i` is `backoff · 2^i`.
    pub backoff: Duration,
    pub captioner_id: String,
}

impl CaptionerEndpoint {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            captioner_id: "remote".to_string(),
        }
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_ref: &'a str,
    instruction: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Deserialize)]
struct ErrorResponse {
    error: String,
}

enum Attempt {
    Done(String),
    Retry(Error),
    Fail(Error),
}

fn attempt(agent: &ureq::Agent, url: &str, body: &str) -> Attempt {
    match agent.post(url).set("Content-Type", "application/json").send_string(body) {
        Ok(resp) => {
            let text = match resp.into_string() {
                Ok(t) => t,
                Err(e) => return Attempt::Retry(Error::Transport(format!("reading response: {e}"))),
            };
            match serde_json::from_str::<CaptionResponse>(&text) {
                Ok(r) if !r.caption.trim().is_empty() => Attempt::Done(r.caption),
                Ok(_) => Attempt::Fail(Error::Protocol("empty caption in response".into())),
                Err(e) => Attempt::Fail(Error::Protocol(format!("malformed response: {e}"))),
            }
        }
        Err(ureq::Error::Status(code, resp)) => {
            let detail = resp
                .into_string()
                .ok()
                .and_then(|t| serde_json::from_str::<ErrorResponse>(&t).ok())
                .map(|e| e.error)
                .unwrap_or_default();
            let msg = format!("captioner returned {code}: {detail}");
            if code >= 500 {
                Attempt::Retry(Error::Transport(msg))
            } else {
                Attempt::Fail(Error::Protocol(msg))
            }
        }
        Err(e) => Attempt::Retry(Error::Transport(e.to_string())),
    }
}

/// Sends one request, retrying transport failures and 5xx answers up to the
/// endpoint's budget with exponential backoff. 4xx answers and malformed
/// bodies fail immediately. Returns the caption and the attempt count.
pub fn request_caption(endpoint: &CaptionerEndpoint, image_ref: &str, instruction: &str) -> Result<(String, u32)> {
    let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
    let url = format!("{}/caption", endpoint.base_url);
    let body = serde_json::to_string(&CaptionRequest { image_ref, instruction })?;
    let mut last = Error::Transport("no attempt made".into());
    for i in 0..=endpoint.retries {
        if i > 0 {
            std::thread::sleep(endpoint.backoff * 2u32.saturating_pow(i - 1));
        }
        match attempt(&agent, &url, &body) {
            Attempt::Done(c) => return Ok((c, i + 1)),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(e) => {
                log::warn!("caption attempt {} for {image_ref} failed: {e}", i + 1);
                last = e;
            }
        }
    }
    Err(match last {
        Error::Transport(m) => Error::Transport(format!("retries exhausted: {m}")),
        e => e,
    })
}

/// Captions one image through a remote captioner.
pub fn caption_image(
    endpoint: &CaptionerEndpoint,
    caption_id: &str,
    image_ref: &str,
    template: Option<(usize, &str)>,
) -> Result<CaptionRecord> {
    let (instruction, kind, template_index) = match template {
        Some((i, t)) => (dynamic_instruction(t)?, InstructionKind::Dynamic, Some(i)),
        None => (static_instruction().to_string(), InstructionKind::Static, None),
    };
    let (text, _) = request_caption(endpoint, image_ref, &instruction)?;
    Ok(CaptionRecord {
        caption_id: caption_id.to_string(),
        image_id: image_ref.to_string(),
        text,
        source: CaptionSource { kind, captioner: endpoint.captioner_id.clone() },
        template_index,
        noise_labels: None,
    })
}

/// A captioning job for [`caption_many`].
#[derive(Debug, Clone)]
pub struct CaptionJob {
    pub caption_id: String,
    pub image_ref: String,
    pub template: Option<(usize, String)>,
}

/// Runs jobs with at most `in_flight` concurrent requests; output order
/// follows input order.
pub fn caption_many(endpoint: &CaptionerEndpoint, jobs: &[CaptionJob], in_flight: usize) -> Result<Vec<CaptionRecord>> {
    let width = in_flight.max(1);
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(width) {
        let results: Vec<Result<CaptionRecord>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|j| {
                    s.spawn(move || {
                        caption_image(
                            endpoint,
                            &j.caption_id,
                            &j.image_ref,
                            j.template.as_ref().map(|(i, t)| (*i, t.as_str())),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("caption worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    pub captions: usize,
    pub distinct_skeletons: usize,
    pub skeleton_ratio: f64,
    pub four_grams: usize,
    pub distinct_four_grams: usize,
    pub four_gram_ratio: f64,
}

/// Word sequence with attribute words replaced by a slot marker.
pub fn skeleton(text: &str, attribute_vocab: &HashSet<String>) -> String {
    words(text)
        .into_iter()
        .map(|w| if attribute_vocab.contains(&w) { "<slot>".to_string() } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn diversity_report(captions: &[CaptionRecord], attribute_vocab: &HashSet<String>) -> Result<DiversityReport> {
    if captions.is_empty() {
        contract!("diversity report over no captions");
    }
    let skeletons: HashSet<String> = captions.iter().map(|c| skeleton(&c.text, attribute_vocab)).collect();
    let mut grams = 0;
    let mut distinct = HashSet::new();
    for c in captions {
        let ws = words(&c.text);
        for g in ws.windows(4) {
            grams += 1;
            distinct.insert(g.join(" "));
        }
    }
    let n = captions.len();
    Ok(DiversityReport {
        captions: n,
        distinct_skeletons: skeletons.len(),
        skeleton_ratio: skeletons.len() as f64 / n as f64,
        four_grams: grams,
        distinct_four_grams: distinct.len(),
        four_gram_ratio: if grams == 0 { 0.0 } else { distinct.len() as f64 / grams as f64 },
    })
}
