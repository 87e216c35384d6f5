//! Command implementations behind the `ddghm` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ddghm_core::checkpoint::{self, CheckpointMeta};
use ddghm_core::data::{
    parse_log, preprocess, read_processed, split, write_processed, write_vocabulary, Catalog, DatasetSplit, Domain,
    PreprocessConfig, PreprocessStats, ProcessedData, SeqItem, SequenceTriple,
};
use ddghm_core::eval::{evaluate, MetricTable};
use ddghm_core::gradcheck::{grad_check, GradCheckReport};
use ddghm_core::model::ModelInput;
use ddghm_core::tape::Tape;
use ddghm_core::train::{batch_loss, train, BatchPlan, EpochRecord, TrainConfig};
use ddghm_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "DDGHM_";
/// `DDGHM_*` variables consumed by the binary itself rather than the config.
pub const RESERVED_ENV: [&str; 2] = ["CONFIG", "LOG"];
/// Pass mark for the finite-difference check.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::DatasetExhausted(_)
        | Error::Data(_)
        | Error::Contract(_)
        | Error::Checkpoint(_)
        | Error::VocabularyMismatch(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

/// Everything a run can be configured with; one flat JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub preprocess: PreprocessConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = self.preprocess.validate();
        p.extend(self.train.validate());
        p
    }

    /// Top-level keys accepted in a config file.
    pub fn known_keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }
}

/// Builds the run configuration from an optional JSON file and `DDGHM_<KEY>`
/// overrides (values parsed as JSON, falling back to a plain string).
///
/// Unknown keys and every invalid field are reported together.
pub fn load_config<I>(path: Option<&Path>, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut object = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            match serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?
            {
                serde_json::Value::Object(m) => m,
                _ => return Err(Error::Config(vec![format!("{}: expected a JSON object", p.display())])),
            }
        }
        None => serde_json::Map::new(),
    };
    let known = RunConfig::known_keys();
    let mut problems: Vec<String> = object
        .keys()
        .filter(|k| !known.contains(k))
        .map(|k| format!("{k}: unknown configuration key"))
        .collect();
    let mut overrides: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_string(), v)))
        .filter(|(k, _)| !RESERVED_ENV.contains(&k.as_str()))
        .collect();
    overrides.sort();
    for (suffix, raw) in overrides {
        let key = suffix.to_ascii_lowercase();
        if !known.contains(&key) {
            problems.push(format!("{ENV_PREFIX}{suffix}: unknown configuration key `{key}`"));
            continue;
        }
        let value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw));
        object.insert(key, value);
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    // Deserialize field by field so that every type error is reported.
    let defaults = match serde_json::to_value(RunConfig::default())? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    };
    let mut merged = defaults.clone();
    for (k, v) in object {
        let mut probe = defaults.clone();
        probe.insert(k.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<RunConfig>(serde_json::Value::Object(probe)) {
            problems.push(format!("{k}: {e}"));
        } else {
            merged.insert(k, v);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let cfg: RunConfig = serde_json::from_value(serde_json::Value::Object(merged))?;
    let invalid = cfg.validate();
    if !invalid.is_empty() {
        return Err(Error::Config(invalid));
    }
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Sidecar vocabulary path for a processed-sequence file.
pub fn vocab_path(processed: &Path) -> PathBuf {
    let mut s = processed.as_os_str().to_owned();
    s.push(".vocab.tsv");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct PreprocessOutcome {
    pub stats: PreprocessStats,
    pub rejected_lines: usize,
}

/// Raw interaction log → processed sequences plus vocabulary sidecar.
pub fn cmd_preprocess(input: &Path, config: &RunConfig, out: &Path) -> Result<PreprocessOutcome> {
    let text = fs::read_to_string(input)?;
    let report = parse_log(text.lines());
    for r in report.rejects.iter().take(10) {
        log::warn!("line {}: {} ({})", r.line, r.reason, r.text);
    }
    if report.rejects.len() > 10 {
        log::warn!("{} more malformed lines", report.rejects.len() - 10);
    }
    let pre = preprocess(&report.events, &config.preprocess)?;
    let data = ProcessedData {
        catalog: pre.vocab.catalog(),
        triples: pre.triples,
    };
    write_file(out, write_processed(&data))?;
    write_file(&vocab_path(out), write_vocabulary(&pre.vocab))?;
    Ok(PreprocessOutcome {
        stats: pre.stats,
        rejected_lines: report.rejects.len(),
    })
}

pub fn load_processed(path: &Path) -> Result<ProcessedData> {
    read_processed(&fs::read_to_string(path)?)
}

/// The deterministic train/validation/test partition used by every command.
pub fn split_data(data: &ProcessedData, cfg: &TrainConfig) -> Result<DatasetSplit<SequenceTriple>> {
    split(&data.triples, cfg.split, cfg.seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub outputs: BTreeMap<String, String>,
    pub best_epoch: Option<usize>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub test: Option<MetricTable>,
    pub out_dir: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_LOG_FILE: &str = "epochs.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";

/// Trains on the training split and writes checkpoint, epoch log and manifest
/// into `out_dir`.
pub fn cmd_train(data_path: &Path, config: &RunConfig, config_path: Option<&Path>, out_dir: &Path) -> Result<TrainSummary> {
    let invalid = config.validate();
    if !invalid.is_empty() {
        return Err(Error::Config(invalid));
    }
    let cfg = &config.train;
    let raw = fs::read(data_path)?;
    let data = read_processed(std::str::from_utf8(&raw).map_err(|_| Error::Data("processed file is not UTF-8".into()))?)?;
    let parts = split_data(&data, cfg)?;

    let mut inputs = vec![InputDigest {
        path: data_path.display().to_string(),
        sha256: sha256_hex(&raw),
    }];
    if let Some(p) = config_path {
        inputs.push(InputDigest {
            path: p.display().to_string(),
            sha256: sha256_hex(&fs::read(p)?),
        });
    }
    let path_of = |name: &str| out_dir.join(name);
    let outputs: BTreeMap<String, String> = [
        ("checkpoint", CHECKPOINT_FILE),
        ("epoch_log", EPOCH_LOG_FILE),
        ("timing", TIMING_FILE),
        ("test_metrics", TEST_METRICS_FILE),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), path_of(f).display().to_string()))
    .collect();
    let mut manifest = RunManifest {
        status: "running".into(),
        config: config.clone(),
        seed: cfg.seed,
        inputs,
        started_at_unix: unix_now(),
        finished_at_unix: None,
        outputs,
        best_epoch: None,
    };
    fs::create_dir_all(out_dir)?;
    manifest.write(&path_of(MANIFEST_FILE))?;

    let mut epoch_log = EpochRecord::tsv_header(&cfg.cutoffs) + "\n";
    let mut timing = String::from("epoch\twall_seconds\n");
    let outcome = train(&parts.train, &parts.validation, &data.catalog, cfg, |r| {
        eprintln!("epoch {:>3}  total {:.6}  ({:.2}s)", r.epoch, r.losses.total, r.wall_seconds);
        epoch_log.push_str(&r.tsv_row(&cfg.cutoffs));
        epoch_log.push('\n');
        timing.push_str(&format!("{}\t{:.3}\n", r.epoch, r.wall_seconds));
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.status = format!("failed: {}", e.to_string().lines().next().unwrap_or_default());
            manifest.finished_at_unix = Some(unix_now());
            manifest.write(&path_of(MANIFEST_FILE))?;
            return Err(e);
        }
    };
    write_file(&path_of(EPOCH_LOG_FILE), &epoch_log)?;
    write_file(&path_of(TIMING_FILE), &timing)?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        seed: cfg.seed,
        catalog: data.catalog.clone(),
        best_epoch: outcome.best_epoch,
    };
    write_file(&path_of(CHECKPOINT_FILE), checkpoint::encode(&meta, &outcome.store)?)?;

    let test = if parts.test.is_empty() {
        None
    } else {
        let table = evaluate(&outcome.store, &outcome.model, &parts.test, cfg.max_seq_len, &cfg.cutoffs)?;
        write_file(&path_of(TEST_METRICS_FILE), serde_json::to_string_pretty(&table.to_json())? + "\n")?;
        Some(table)
    };

    manifest.status = "finished".into();
    manifest.finished_at_unix = Some(unix_now());
    manifest.best_epoch = Some(outcome.best_epoch);
    manifest.write(&path_of(MANIFEST_FILE))?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        log: outcome.log,
        test,
        out_dir: out_dir.to_path_buf(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
    All,
}

fn check_catalog(expected: &Catalog, found: &Catalog) -> Result<()> {
    for d in Domain::BOTH {
        let (e, f) = match d {
            Domain::A => ((expected.size_a, &expected.digest_a), (found.size_a, &found.digest_a)),
            Domain::B => ((expected.size_b, &expected.digest_b), (found.size_b, &found.digest_b)),
        };
        if e != f {
            return Err(Error::VocabularyMismatch(format!(
                "domain {d}: checkpoint has {} items (digest {}), data has {} items (digest {})",
                e.0, e.1, f.0, f.1
            )));
        }
    }
    Ok(())
}

/// Ranks held-out items with a trained checkpoint.
pub fn cmd_evaluate(checkpoint_path: &Path, data_path: &Path, which: SplitChoice, cutoffs: Option<&[usize]>) -> Result<MetricTable> {
    let (meta, store, model) = checkpoint::restore(&fs::read(checkpoint_path)?)?;
    let data = load_processed(data_path)?;
    check_catalog(&meta.catalog, &data.catalog)?;
    let cutoffs = cutoffs.unwrap_or(&meta.config.cutoffs).to_vec();
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config(vec!["cutoffs: need at least one cut-off, each >= 1".into()]));
    }
    let triples = match which {
        SplitChoice::All => data.triples.clone(),
        other => {
            let parts = split_data(&data, &meta.config)?;
            match other {
                SplitChoice::Train => parts.train,
                SplitChoice::Validation => parts.validation,
                _ => parts.test,
            }
        }
    };
    evaluate(&store, &model, &triples, meta.config.max_seq_len, &cutoffs)
}

/// The fixed toy instance checked by `gradcheck`: two users over six items per domain.
pub fn gradcheck_instance(seed: u64) -> (Catalog, Vec<SequenceTriple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = Catalog::synthetic(6, 6);
    let triples = (0..2)
        .map(|user| {
            let mut per_domain = Domain::BOTH.map(|d| {
                let mut items: Vec<usize> = (0..6).collect();
                items.shuffle(&mut rng);
                let n = rng.gen_range(3..=4);
                items
                    .into_iter()
                    .take(n)
                    .map(|item| SeqItem {
                        item,
                        timestamp: 0,
                        source: d,
                    })
                    .collect::<Vec<_>>()
            });
            for seq in per_domain.iter_mut() {
                let mut ts: Vec<u64> = (0..seq.len()).map(|_| rng.gen_range(0..1000)).collect();
                ts.sort();
                for (it, t) in seq.iter_mut().zip(ts) {
                    it.timestamp = t;
                }
            }
            let [a, b] = per_domain;
            SequenceTriple::from_domains(user, a, b).expect("sorted sequences")
        })
        .collect();
    (catalog, triples)
}

/// Finite-difference check of the full four-term objective on the toy instance.
pub fn cmd_gradcheck(seed: u64, dim: usize, eps: f64) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        dim,
        seed,
        ..Default::default()
    };
    let invalid = cfg.validate();
    if !invalid.is_empty() {
        return Err(Error::Config(invalid));
    }
    let (catalog, triples) = gradcheck_instance(seed);
    let (mut store, model) = cfg.build_model(&catalog)?;
    let inputs = triples
        .iter()
        .map(|t| ModelInput::from_triple(t, cfg.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let mut plan = BatchPlan::sample(inputs, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let mut tape = Tape::new();
    let first = batch_loss(&mut tape, &store, &model, &plan, &cfg)?;
    if !(first.has_col && first.has_con) {
        return Err(Error::Contract("gradient check needs every loss term".into()));
    }
    plan.rank_weights = Some(first.rank_weights);
    grad_check(|tape, s| Ok(batch_loss(tape, s, &model, &plan, &cfg)?.loss), &mut store, eps)
}
