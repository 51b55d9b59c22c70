//! Command-line entry point. Flags override values from `--config`, which
//! override built-in defaults.

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{gen_corpus, mock_captions, AttributeSpec, CorpusParams, Dataset};
use crate::error::{contract, Error, Result};
use crate::eval::{ablate, ablation_csv, evaluate, noise_detection, QuerySet, Split, SweepKind};
use crate::nam::recenter;
use crate::tde::{caption_many, read_captions, write_captions, CaptionJob, CaptionerEndpoint, TemplateBank};
use crate::trainer::{checkpoint_load, checkpoint_save, resume, trace_csv, TrainConfig, TrainOptions, TrainState};

#[derive(Parser, Debug)]
#[command(name = "namreid", version, about = "Noise-aware masking for text-to-image person retrieval at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic attribute corpus into a dataset directory.
    GenCorpus(GenCorpusArgs),
    /// Caption the images of a dataset with mock or remote captioners.
    BuildCaptions(BuildCaptionsArgs),
    /// Train a model and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a split and print a metrics CSV.
    Eval(EvalArgs),
    /// Train one run per sweep value and seed; write a results CSV.
    Ablate(AblateArgs),
    /// Print word | r | r' | noise_label for one caption.
    InspectNoise(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of identities.
    #[arg(long, default_value_t = 500)]
    pub identities: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 2)]
    pub images_per_identity: usize,
    /// Captions per image; the first half static, the rest dynamic.
    #[arg(long, default_value_t = 4)]
    pub captions_per_image: usize,
    /// Probability that an attribute slot names a wrong value.
    #[arg(long, default_value_t = 0.3)]
    pub noise_rate: f64,
    /// Share of wrong slots that name the true value's look-alike.
    #[arg(long, default_value_t = 0.0)]
    pub confusion: f64,
    /// Noise rate of held-out identities' captions; defaults to --noise-rate.
    #[arg(long)]
    pub test_noise_rate: Option<f64>,
    /// Fraction of identities held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Template bank file (one template per line); defaults to the shipped bank.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BuildCaptionsArgs {
    /// Dataset directory whose images are captioned.
    #[arg(long)]
    pub data: PathBuf,
    /// Output captions JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the built-in mock captioners over the known attributes.
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    pub mock: bool,
    /// Base URL of a remote captioner serving POST /caption.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Mock noise rate; defaults to the dataset's.
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Static-instruction captions per image (remote only).
    #[arg(long, default_value_t = 2)]
    pub static_per_image: usize,
    /// Dynamic-instruction captions per image (remote only).
    #[arg(long, default_value_t = 2)]
    pub dynamic_per_image: usize,
    /// Template bank file; defaults to the shipped bank.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Concurrent remote requests.
    #[arg(long, default_value_t = 4)]
    pub in_flight: usize,
    /// Per-request timeout in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure or 5xx answer.
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
    /// Base delay between retries in milliseconds, doubled per retry.
    #[arg(long, default_value_t = 200)]
    pub backoff_ms: u64,
    /// Captioner name stored in each record's source.
    #[arg(long, default_value = "remote")]
    pub captioner_id: String,
    /// Seed for template choice and mock noise.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    /// Run config JSON with any TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// nam, em or none.
    #[arg(long)]
    pub mask_mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Average masking ratio p.
    #[arg(long)]
    pub p: Option<f64>,
    /// 1-based tap layer for NAM.
    #[arg(long)]
    pub tap_layer: Option<usize>,
    /// Add the masked-language-model loss.
    #[arg(long)]
    pub mlm: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = &self.mask_mode {
            c.mask_mode = m.parse()?;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.p {
            c.nam.p = v;
        }
        if let Some(v) = self.tap_layer {
            c.nam.tap_layer = v;
        }
        if self.mlm {
            c.mlm_enabled = true;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Replacement captions JSONL for the dataset.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Output directory: epoch-NNN checkpoints, final/ and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Replacement captions JSONL for the dataset.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// all, or clean for captions without noisy words.
    #[arg(long, default_value = "all")]
    pub queries: String,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// layer, ratio, mask_mode or mlm.
    #[arg(long)]
    pub sweep: String,
    /// Comma-separated sweep values (layer also accepts `none`).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Run the trainings on parallel threads.
    #[arg(long)]
    pub parallel: bool,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub caption_id: String,
}

fn bank(path: &Option<PathBuf>) -> Result<TemplateBank> {
    match path {
        Some(p) => TemplateBank::load(p),
        None => Ok(TemplateBank::shipped()),
    }
}

fn load_data(dir: &Path, captions: &Option<PathBuf>) -> Result<Dataset> {
    let mut ds = Dataset::load(dir)?;
    if let Some(p) = captions {
        ds.captions = read_captions(p)?;
        ds.validate()?;
    }
    Ok(ds)
}

fn gen_cmd(a: &GenCorpusArgs, out: &mut dyn Write) -> Result<()> {
    let params = CorpusParams {
        identities: a.identities,
        images_per_identity: a.images_per_identity,
        captions_per_image: a.captions_per_image,
        noise_rate: a.noise_rate,
        confusion: a.confusion,
        test_noise_rate: a.test_noise_rate,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let ds = gen_corpus(&AttributeSpec::default(), &params, &bank(&a.templates)?)?;
    ds.save(&a.out)?;
    writeln!(
        out,
        "wrote {}: {} identities, {} images, {} captions",
        a.out.display(),
        ds.identities.len(),
        ds.images.len(),
        ds.captions.len()
    )?;
    Ok(())
}

fn build_captions_cmd(a: &BuildCaptionsArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let bank = bank(&a.templates)?;
    let seed = a.seed.unwrap_or(ds.params.seed);
    let records = if a.mock {
        if ds.identities.iter().any(|i| i.attributes.is_empty()) {
            contract!("mock captions need identity attributes; this dataset has none");
        }
        let params = CorpusParams { noise_rate: a.noise_rate.unwrap_or(ds.params.noise_rate), seed, ..ds.params.clone() };
        mock_captions(&ds.spec, &params, &ds.identities, &ds.images, &ds.splits.test, &bank)?
    } else {
        let url = a.endpoint.as_deref().expect("clap requires --endpoint without --mock");
        let endpoint = CaptionerEndpoint {
            timeout: std::time::Duration::from_millis(a.timeout_ms),
            retries: a.retries,
            backoff: std::time::Duration::from_millis(a.backoff_ms),
            captioner_id: a.captioner_id.clone(),
            ..CaptionerEndpoint::new(url)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jobs = Vec::new();
        for img in &ds.images {
            for c in 0..a.static_per_image + a.dynamic_per_image {
                let template = (c >= a.static_per_image).then(|| {
                    let i = rng.gen_range(0..bank.len());
                    (i, bank.templates()[i].clone())
                });
                jobs.push(CaptionJob { caption_id: format!("{}-c{c}", img.image_id), image_ref: img.image_id.clone(), template });
            }
        }
        caption_many(&endpoint, &jobs, a.in_flight)?
    };
    write_captions(&a.out, &records)?;
    let attrs: HashSet<String> = ds.spec.vocabulary().into_iter().collect();
    let report = crate::tde::diversity_report(&records, &attrs)?;
    writeln!(
        out,
        "wrote {} captions to {}; {} distinct skeletons",
        records.len(),
        a.out.display(),
        report.distinct_skeletons
    )?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_data(&a.data, &a.captions)?;
    let state = match &a.resume {
        Some(ck) => {
            let mut s = checkpoint_load(ck, None)?;
            if let Some(e) = a.overrides.epochs {
                s.config.epochs = e;
            }
            s
        }
        None => TrainState::init(&ds, &a.overrides.resolve()?)?,
    };
    let opts = TrainOptions { checkpoint_dir: Some(a.out.clone()), ..Default::default() };
    let state = resume(&ds, state, opts)?;
    checkpoint_save(&a.out.join("final"), &state)?;
    std::fs::write(a.out.join("loss.csv"), trace_csv(&state.trace))?;
    let last = state.trace.last();
    writeln!(
        out,
        "trained {} epochs ({} steps), final loss_sdm {}; checkpoint {}",
        state.epoch,
        state.step,
        last.map_or(f64::NAN, |r| r.loss_sdm),
        a.out.join("final").display()
    )?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_data(&a.data, &a.captions)?;
    let state = checkpoint_load(&a.ckpt, None)?;
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        s => contract!("split must be train or test, got {s:?}"),
    };
    let queries = match a.queries.as_str() {
        "all" => QuerySet::All,
        "clean" => QuerySet::Clean,
        s => contract!("queries must be all or clean, got {s:?}"),
    };
    let r = evaluate(&state, &ds, split, queries)?;
    let auc = if ds.captions.iter().all(|c| c.noise_labels.is_some()) {
        Some(noise_detection(&state, &ds)?)
    } else {
        None
    };
    let mut csv = String::from("split,queries,rank1,rank5,rank10,map,auc,mean_r_noisy,mean_r_clean\n");
    let (au, rn, rc) = auc.map_or((f64::NAN, f64::NAN, f64::NAN), |n| (n.auc, n.mean_r_noisy, n.mean_r_clean));
    csv.push_str(&format!("{},{},{},{},{},{},{},{},{}\n", a.split, a.queries, r.rank1, r.rank5, r.rank10, r.map, au, rn, rc));
    if let Some(p) = &a.out {
        std::fs::write(p, &csv)?;
    }
    out.write_all(csv.as_bytes())?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let kind: SweepKind = a.sweep.parse()?;
    let base = a.overrides.resolve()?;
    let rows = ablate(&ds, &base, kind, &a.values, &a.seeds, a.parallel)?;
    let csv = ablation_csv(&rows);
    std::fs::write(&a.out, &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(())
}

fn inspect_cmd(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let state = checkpoint_load(&a.ckpt, None)?;
    let ci = ds
        .captions
        .iter()
        .position(|c| c.caption_id == a.caption_id)
        .ok_or_else(|| Error::Contract(format!("no caption {:?} in the dataset", a.caption_id)))?;
    let rec = &ds.captions[ci];
    let r = crate::eval::caption_noise_levels(&state, &ds, &[ci])?.remove(0);
    let rp = recenter(&r, state.config.nam.p)?;
    let seq = state.vocab.tokenize(&rec.caption_id, &rec.text);
    let words: Vec<String> = seq.word_ids().iter().map(|i| state.vocab.word(*i).unwrap_or("[UNK]").to_string()).collect();
    writeln!(out, "word|r|r'|noise_label")?;
    for (i, w) in words.iter().enumerate() {
        let label = rec.noise_labels.as_ref().and_then(|l| l.get(i)).map_or("-".to_string(), |b| b.to_string());
        writeln!(out, "{w}|{:.6}|{:.6}|{label}", r[i], rp.probs[i])?;
    }
    Ok(())
}

/// Parses `argv` and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the process exit code: 0 on success, 1 on a
/// contract violation (including bad usage), 2 on I/O, format or transport
/// failures.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenCorpus(a) => gen_cmd(a, out),
        Command::BuildCaptions(a) => build_captions_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::InspectNoise(a) => inspect_cmd(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
