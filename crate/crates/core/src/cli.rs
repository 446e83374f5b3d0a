//! Experiment harness behind the `lasers` binary.
//!
//! Every command reads a flat `key = value` config (see [`RunConfig::set`]
//! for the keys), applies `--seed` / `--set` overrides, and writes its
//! artifacts plus a `manifest.json` into `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autoencoder::{train, train_model_target, AffineCoder, CoderMode, EpochMetrics, EvalMetrics, Model, TrainConfig, UpdateRule};
use crate::bottleneck::{Bottleneck, BottleneckKind};
use crate::data_io::{
    generate_planted, image_tiles, load_checkpoint, load_images, read_image_dir, save_checkpoint, write_pgm, Checkpoint,
    Dataset, EmaState, PlantedModel,
};
use crate::dictionary::{init_dictionary, InitStrategy};
use crate::error::{Error, Result};
use crate::metrics::{psnr_from_mse, savitzky_golay, top_singular_projection};
use crate::tensor::{CodingUnit, LatentTensor, PatchGeometry, SignalMatrix};
use crate::vq::Codebook;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const METRICS_HEADER: &str = "epoch,mse,psnr,perplexity,utilization,codebook_term,commitment_term";

#[derive(Debug, Parser)]
#[command(
    name = "lasers",
    version,
    about = "Train and compare vector-quantization and sparse dictionary-learning bottlenecks",
    after_help = "Config files hold one `key = value` per line (`#` starts a comment); --seed and --set \
                  override file values. With coder=raw the input is coded directly and only the \
                  reconstruction and codebook terms train anything; the commitment gradient reaches \
                  parameters only with coder=affine.\n\nExit codes: 0 ok, 1 usage/config, 2 data, 3 numerical divergence."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file (flat key = value)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` (and `data_seed` unless set explicitly)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-column coding
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Omit wall-clock timestamps from outputs
    #[arg(long, global = true)]
    pub reproducible: bool,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Config override, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train one model; writes metrics.csv, model.lsrs, curves.svg
    Train,
    /// Evaluate the model in `checkpoint` on the configured data
    Eval,
    /// Train VQ and DL on the same data and seed
    Compare,
    /// One DL run per sparsity level
    AblateSparsity {
        /// Comma-separated sparsity levels (default: config `s_list`)
        #[arg(long, value_delimiter = ',')]
        s_list: Option<Vec<usize>>,
    },
    /// Reconstruct patches with a centered square zeroed out
    MaskEval {
        /// Side of the square as a fraction of the patch side
        #[arg(long)]
        fraction: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::AblateSparsity { .. } => "ablate-sparsity",
            Command::MaskEval { .. } => "mask-eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Random square crops from the PGM images in a directory.
    Images { dir: PathBuf, patch: usize, count: usize },
    /// Sparse combinations of a random ground-truth dictionary.
    Planted { k: usize, dim: usize, s: usize, n: usize, sigma: f64 },
}

/// Everything a command needs besides output options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub data_seed: Option<u64>,
    pub s_list: Vec<usize>,
    pub mask_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub smooth_window: usize,
    pub smooth_order: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSource::Planted { k: 32, dim: 32, s: 3, n: 1000, sigma: 0.0 },
            data_seed: None,
            s_list: vec![1, 2, 4, 8],
            mask_fraction: 0.25,
            checkpoint: None,
            smooth_window: 9,
            smooth_order: 2,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.train.seed)
    }

    /// Applies one config entry.
    ///
    /// Training: `k l s beta eta ema_decay ema_epsilon lr epochs batch_size
    /// seed shuffle_seed kind update_rule coding_unit patch_h patch_w
    /// reseed_threshold coder init vq_codebook_loss peak`.
    /// Data: `data` (`planted` | `images`), `image_dir patch_size
    /// num_patches data_seed planted_k planted_dim planted_s planted_n
    /// planted_sigma`. Commands: `s_list mask_fraction checkpoint
    /// smooth_window smooth_order`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "k" => t.k = parse(key, value)?,
            "l" => t.l = parse(key, value)?,
            "s" => t.s = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "eta" => t.eta = parse(key, value)?,
            "ema_decay" => t.ema_decay = parse(key, value)?,
            "ema_epsilon" => t.ema_epsilon = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "shuffle_seed" => {
                t.shuffle_seed = if value == "auto" { None } else { Some(parse(key, value)?) };
            }
            "kind" => t.kind = value.parse()?,
            "update_rule" => t.update_rule = value.parse()?,
            "coding_unit" => {
                t.geometry.coding_unit = match value {
                    "fiber" => CodingUnit::Fiber,
                    "patch" => CodingUnit::Patch,
                    _ => return Err(Error::Config(format!("{key}: expected fiber or patch, got {value:?}"))),
                };
                if t.geometry.coding_unit == CodingUnit::Fiber {
                    t.geometry = PatchGeometry::fiber();
                }
            }
            "patch_h" => t.geometry.p_h = parse(key, value)?,
            "patch_w" => t.geometry.p_w = parse(key, value)?,
            "reseed_threshold" => t.reseed_threshold = parse(key, value)?,
            "coder" => t.coder = value.parse()?,
            "init" => {
                t.init = match value {
                    "auto" => None,
                    "gaussian" => Some(InitStrategy::GaussianNormalized),
                    "data" => Some(InitStrategy::DataSample),
                    _ => return Err(Error::Config(format!("{key}: expected auto, gaussian or data, got {value:?}"))),
                }
            }
            "vq_codebook_loss" => t.vq_codebook_loss = parse_bool(key, value)?,
            "peak" => t.peak = parse(key, value)?,
            "data" => {
                self.data = match value {
                    "planted" => DataSource::Planted { k: 32, dim: 32, s: 3, n: 1000, sigma: 0.0 },
                    "images" => DataSource::Images { dir: PathBuf::from("images"), patch: 8, count: 2000 },
                    _ => return Err(Error::Config(format!("{key}: expected planted or images, got {value:?}"))),
                }
            }
            "image_dir" | "patch_size" | "num_patches" => match &mut self.data {
                DataSource::Images { dir, patch, count } => match key {
                    "image_dir" => *dir = PathBuf::from(value),
                    "patch_size" => *patch = parse(key, value)?,
                    _ => *count = parse(key, value)?,
                },
                _ => return Err(Error::Config(format!("{key} requires data = images (set it first)"))),
            },
            "planted_k" | "planted_dim" | "planted_s" | "planted_n" | "planted_sigma" => match &mut self.data {
                DataSource::Planted { k, dim, s, n, sigma } => match key {
                    "planted_k" => *k = parse(key, value)?,
                    "planted_dim" => *dim = parse(key, value)?,
                    "planted_s" => *s = parse(key, value)?,
                    "planted_n" => *n = parse(key, value)?,
                    _ => *sigma = parse(key, value)?,
                },
                _ => return Err(Error::Config(format!("{key} requires data = planted"))),
            },
            "data_seed" => self.data_seed = Some(parse(key, value)?),
            "s_list" => self.s_list = parse_list(key, value)?,
            "mask_fraction" => self.mask_fraction = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "smooth_window" => self.smooth_window = parse(key, value)?,
            "smooth_order" => self.smooth_order = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text. Keys may appear once; `data` must precede its
    /// sub-keys.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    /// Resolved settings, one entry per key.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("k", t.k.to_string());
        put("l", t.l.to_string());
        put("s", t.s.to_string());
        put("beta", t.beta.to_string());
        put("eta", t.eta.to_string());
        put("ema_decay", t.ema_decay.to_string());
        put("ema_epsilon", t.ema_epsilon.to_string());
        put("lr", t.lr.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("seed", t.seed.to_string());
        put("shuffle_seed", t.shuffle_seed.map_or("auto".into(), |s| s.to_string()));
        put("kind", t.kind.to_string());
        put("update_rule", t.update_rule.to_string());
        put(
            "coding_unit",
            match t.geometry.coding_unit {
                CodingUnit::Fiber => "fiber".into(),
                CodingUnit::Patch => "patch".into(),
            },
        );
        put("patch_h", t.geometry.p_h.to_string());
        put("patch_w", t.geometry.p_w.to_string());
        put("reseed_threshold", t.reseed_threshold.to_string());
        put("coder", t.coder.to_string());
        put(
            "init",
            match t.init {
                None => "auto".into(),
                Some(InitStrategy::GaussianNormalized) => "gaussian".into(),
                Some(InitStrategy::DataSample) => "data".into(),
            },
        );
        put("vq_codebook_loss", t.vq_codebook_loss.to_string());
        put("peak", t.peak.to_string());
        match &self.data {
            DataSource::Images { dir, patch, count } => {
                put("data", "images".into());
                put("image_dir", dir.display().to_string());
                put("patch_size", patch.to_string());
                put("num_patches", count.to_string());
            }
            DataSource::Planted { k, dim, s, n, sigma } => {
                put("data", "planted".into());
                put("planted_k", k.to_string());
                put("planted_dim", dim.to_string());
                put("planted_s", s.to_string());
                put("planted_n", n.to_string());
                put("planted_sigma", sigma.to_string());
            }
        }
        put("data_seed", self.data_seed().to_string());
        put("s_list", join_list(&self.s_list));
        put("mask_fraction", self.mask_fraction.to_string());
        if let Some(c) = &self.checkpoint {
            put("checkpoint", c.display().to_string());
        }
        put("smooth_window", self.smooth_window.to_string());
        put("smooth_order", self.smooth_order.to_string());
        m
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.snapshot().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Images { dir, patch, count } => load_images(dir, *patch, *count, self.data_seed()),
            DataSource::Planted { k, dim, s, n, sigma } => {
                let d = init_dictionary(*k, *dim, InitStrategy::GaussianNormalized, self.data_seed(), None)?;
                let model = PlantedModel { noise_sigma: *sigma, ..PlantedModel::new(d, *s) };
                Ok(generate_planted(&model, *n, self.data_seed().wrapping_add(1))?.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub reproducible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Git-style blob hash of the resolved config text and the input data.
    pub input_hash: String,
    pub start_time: Option<u64>,
    pub end_time: Option<u64>,
    pub outputs: Vec<ManifestEntry>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn input_hash(cfg: &RunConfig, data: &SignalMatrix) -> String {
    let mut bytes = cfg.to_text().into_bytes();
    bytes.extend_from_slice(&(data.dim() as u64).to_le_bytes());
    bytes.extend_from_slice(&(data.count() as u64).to_le_bytes());
    for v in data.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    blob_hash(&bytes)
}

/// Collects artifacts written by one command.
struct Run<'a> {
    out: &'a OutputOptions,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn start(command: &str, cfg: &RunConfig, data: &SignalMatrix, out: &'a OutputOptions) -> Result<Self> {
        fs::create_dir_all(&out.dir)?;
        Ok(Self {
            out,
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.train.seed,
                config: cfg.snapshot(),
                input_hash: input_hash(cfg, data),
                start_time: (!out.reproducible).then(unix_now),
                end_time: None,
                outputs: Vec::new(),
            },
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.manifest.outputs.push(ManifestEntry { path: name.to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(())
    }

    fn write(&mut self, name: &str, content: &[u8]) -> Result<()> {
        fs::write(self.path(name), content)?;
        self.record(name)
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.end_time = (!self.out.reproducible).then(unix_now);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.path("manifest.json"), json + "\n")?;
        Ok(self.manifest)
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.mse, r.psnr, r.perplexity, r.utilization, r.codebook_term, r.commitment_term
        );
    }
    s
}

fn smooth(series: &[f64], window: usize, order: usize) -> Option<Vec<f64>> {
    if series.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // shrink the window for short runs, keeping it odd and above the order
    let mut w = window.min(series.len());
    if w % 2 == 0 {
        w = w.saturating_sub(1);
    }
    if w <= order {
        return None;
    }
    savitzky_golay(series, w, order).ok()
}

fn svg_panel(out: &mut String, x0: f64, title: &str, raw: &[f64], smoothed: Option<&[f64]>) {
    const W: f64 = 360.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let _ = writeln!(out, r#"<g transform="translate({x0},0)">"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, PAD + W / 2.0);
    let _ = writeln!(out, r##"<rect x="{PAD}" y="{PAD}" width="{W}" height="{H}" fill="none" stroke="#444"/>"##);
    let finite: Vec<f64> = raw.iter().chain(smoothed.into_iter().flatten()).copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">no data</text>"#, PAD + W / 2.0, PAD + H / 2.0);
        out.push_str("</g>\n");
        return;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let n = raw.len().max(2) - 1;
    let px = |i: usize| PAD + W * i as f64 / n as f64;
    let py = |v: f64| PAD + H - H * (v - lo) / (hi - lo);
    let polyline = |out: &mut String, series: &[f64], stroke: &str, width: f64| {
        let pts: Vec<String> = series
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{stroke}" stroke-width="{width}" points="{}"/>"#, pts.join(" "));
    };
    polyline(out, raw, "#9bb7d4", 1.0);
    if let Some(s) = smoothed {
        polyline(out, s, "#1f4e79", 2.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{hi:.2}</text>"#, PAD - 4.0, PAD + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{lo:.2}</text>"#, PAD - 4.0, PAD + H);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">epoch</text>"#, PAD + W / 2.0, PAD + H + 24.0);
    out.push_str("</g>\n");
}

/// PSNR and perplexity curves, raw and Savitzky–Golay smoothed.
pub fn curves_svg(history: &[EpochMetrics], window: usize, order: usize, timestamp: Option<u64>) -> String {
    let psnr: Vec<f64> = history.iter().map(|r| r.psnr).collect();
    let ppl: Vec<f64> = history.iter().map(|r| r.perplexity).collect();
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"880\" height=\"320\" font-family=\"sans-serif\">\n",
    );
    if let Some(t) = timestamp {
        let _ = writeln!(s, "<!-- generated {t} -->");
    }
    svg_panel(&mut s, 0.0, "PSNR (dB)", &psnr, smooth(&psnr, window, order).as_deref());
    svg_panel(&mut s, 440.0, "Perplexity", &ppl, smooth(&ppl, window, order).as_deref());
    s.push_str("</svg>\n");
    s
}

pub fn checkpoint_of(model: &Model) -> Checkpoint {
    let (dictionary, ema) = match &model.bottleneck {
        Bottleneck::Identity => (None, None),
        Bottleneck::Vq(cb) => (
            Some(cb.embeddings().clone()),
            Some(EmaState { counts: cb.ema_counts().to_vec(), sums: cb.ema_sums().to_vec() }),
        ),
        Bottleneck::Dl { dictionary, .. } => (Some(dictionary.clone()), None),
    };
    Checkpoint { dictionary, ema, coder: Some(model.coder.clone()) }
}

/// Rebuilds a model for inputs of dimension `m`. The bottleneck kind follows
/// the checkpoint: no atoms means identity, an EMA section means VQ.
pub fn model_from_checkpoint(ckpt: Checkpoint, cfg: &TrainConfig, m: usize) -> Result<Model> {
    let coder = ckpt.coder.unwrap_or_else(|| AffineCoder::raw(m));
    if coder.m != m {
        return Err(Error::DimensionMismatch(format!("checkpoint coder expects dim {}, data has {m}", coder.m)));
    }
    let kind = match (&ckpt.dictionary, &ckpt.ema) {
        (None, _) => BottleneckKind::Identity,
        (Some(_), Some(_)) => BottleneckKind::Vq,
        (Some(_), None) => BottleneckKind::Dl,
    };
    if kind != cfg.kind {
        log::warn!("checkpoint holds a {kind} bottleneck; ignoring kind = {}", cfg.kind);
    }
    let cfg = TrainConfig { kind, coder: coder.mode, l: coder.l, ..cfg.clone() };
    cfg.validate(m)?;
    let shape = cfg.latent_shape(m)?;
    let unit_dim = cfg.geometry.signal_dim(shape.l);
    let bottleneck = match (ckpt.dictionary, ckpt.ema) {
        (None, _) => Bottleneck::Identity,
        (Some(d), ema) => {
            if d.l() != unit_dim {
                return Err(Error::DimensionMismatch(format!("checkpoint atoms have dim {}, model needs {unit_dim}", d.l())));
            }
            match ema {
                Some(e) => Bottleneck::Vq(Codebook::with_ema_state(d, cfg.ema_decay, cfg.ema_epsilon, e.counts, e.sums)?),
                None => Bottleneck::Dl { dictionary: d, sparsity: cfg.s, geometry: cfg.geometry },
            }
        }
    };
    Ok(Model::from_parts(coder, bottleneck, shape, &cfg))
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary {
    recon_mse: f64,
    psnr: f64,
    latent_mse: f64,
    perplexity: f64,
    utilization: f64,
}

impl From<&EvalMetrics> for EvalSummary {
    fn from(e: &EvalMetrics) -> Self {
        Self {
            recon_mse: e.recon_mse,
            psnr: e.psnr,
            latent_mse: e.latent_mse,
            perplexity: e.perplexity,
            utilization: e.utilization,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn cmd_train(cfg: &RunConfig, out: &OutputOptions) -> Result<RunManifest> {
    let data = cfg.load_data()?;
    let mut run = Run::start("train", cfg, &data.samples, out)?;
    let outcome = train(&data.samples, &cfg.train)?;
    run.write("metrics.csv", metrics_csv(&outcome.history).as_bytes())?;
    save_checkpoint(&run.path("model.lsrs"), &checkpoint_of(&outcome.model))?;
    run.record("model.lsrs")?;
    let svg = curves_svg(&outcome.history, cfg.smooth_window, cfg.smooth_order, run.manifest.start_time);
    run.write("curves.svg", svg.as_bytes())?;
    run.finish()
}

fn checkpoint_model(cfg: &RunConfig, m: usize) -> Result<Option<Model>> {
    match &cfg.checkpoint {
        Some(path) => Ok(Some(model_from_checkpoint(load_checkpoint(path)?, &cfg.train, m)?)),
        None => Ok(None),
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &OutputOptions) -> Result<RunManifest> {
    if cfg.checkpoint.is_none() {
        return Err(Error::Config("eval needs `checkpoint = PATH`".into()));
    }
    let data = cfg.load_data()?;
    let mut run = Run::start("eval", cfg, &data.samples, out)?;
    let model = checkpoint_model(cfg, data.samples.dim())?.expect("checked above");
    let metrics = model.evaluate(&data.samples, &cfg.train)?;
    run.write("summary.json", &to_json(&EvalSummary::from(&metrics))?)?;
    run.finish()
}

/// Samples arranged on a grid for projection images: the tiles of the first
/// image, or the first `r*r` columns otherwise.
fn projection_grid(cfg: &RunConfig, data: &SignalMatrix) -> Result<(usize, usize, SignalMatrix)> {
    if let DataSource::Images { dir, patch, .. } = &cfg.data {
        if let Some((_, img)) = read_image_dir(dir)?.into_iter().next() {
            return image_tiles(&img, *patch);
        }
    }
    let r = (data.count() as f64).sqrt().floor() as usize;
    let idx: Vec<usize> = (0..r * r).collect();
    Ok((r, r, data.select_columns(&idx)))
}

fn write_projection(run: &mut Run, name: &str, rows: usize, cols: usize, z: &SignalMatrix) -> Result<()> {
    let t = LatentTensor::new(rows, cols, z.dim(), z.data().to_vec())?;
    write_pgm(&run.path(name), cols, rows, &top_singular_projection(&t))?;
    run.record(name)
}

#[derive(Debug, Clone, Serialize)]
struct CompareSummary {
    vq: EvalSummary,
    dl: EvalSummary,
    /// DL over VQ latent reconstruction MSE.
    latent_mse_ratio: f64,
    recon_mse_ratio: f64,
    /// (VQ, DL)
    perplexity: (f64, f64),
    utilization: (f64, f64),
}

pub fn cmd_compare(cfg: &RunConfig, out: &OutputOptions) -> Result<RunManifest> {
    let data = cfg.load_data()?;
    let mut run = Run::start("compare", cfg, &data.samples, out)?;
    let (rows, cols, grid) = projection_grid(cfg, &data.samples)?;
    let mut histories = Vec::new();
    let mut evals = Vec::new();
    for kind in [BottleneckKind::Vq, BottleneckKind::Dl] {
        let tcfg = TrainConfig { kind, ..cfg.train.clone() };
        let outcome = train(&data.samples, &tcfg)?;
        let eval = outcome.model.evaluate(&data.samples, &tcfg)?;
        save_checkpoint(&run.path(&format!("{kind}.lsrs")), &checkpoint_of(&outcome.model))?;
        run.record(&format!("{kind}.lsrs"))?;
        let fp = outcome.model.forward(&grid, &tcfg)?;
        write_projection(&mut run, &format!("{kind}_ze.pgm"), rows, cols, &fp.z_e)?;
        write_projection(&mut run, &format!("{kind}_zhat.pgm"), rows, cols, &fp.zhat)?;
        histories.push(outcome.history);
        evals.push(eval);
    }
    let mut csv = String::from(
        "epoch,vq_mse,dl_mse,vq_psnr,dl_psnr,vq_perplexity,dl_perplexity,vq_utilization,dl_utilization,vq_latent_mse,dl_latent_mse\n",
    );
    for (v, d) in histories[0].iter().zip(&histories[1]) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            v.epoch, v.mse, d.mse, v.psnr, d.psnr, v.perplexity, d.perplexity, v.utilization, d.utilization, v.latent_mse, d.latent_mse
        );
    }
    run.write("compare.csv", csv.as_bytes())?;
    let (vq, dl) = (&evals[0], &evals[1]);
    let summary = CompareSummary {
        vq: vq.into(),
        dl: dl.into(),
        latent_mse_ratio: dl.latent_mse / vq.latent_mse,
        recon_mse_ratio: dl.recon_mse / vq.recon_mse,
        perplexity: (vq.perplexity, dl.perplexity),
        utilization: (vq.utilization, dl.utilization),
    };
    run.write("summary.json", &to_json(&summary)?)?;
    run.finish()
}

/// One DL run per sparsity level; the table holds the trained models'
/// evaluation on the training data.
pub fn cmd_ablate_sparsity(cfg: &RunConfig, s_list: &[usize], out: &OutputOptions) -> Result<RunManifest> {
    if s_list.is_empty() {
        return Err(Error::Config("s_list is empty".into()));
    }
    let data = cfg.load_data()?;
    let mut run = Run::start("ablate-sparsity", cfg, &data.samples, out)?;
    let mut csv = String::from("s,psnr,perplexity\n");
    for &s in s_list {
        let tcfg = TrainConfig { kind: BottleneckKind::Dl, s, ..cfg.train.clone() };
        let outcome = train(&data.samples, &tcfg)?;
        let eval = outcome.model.evaluate(&data.samples, &tcfg)?;
        log::info!("s = {s}: psnr {:.3} perplexity {:.1}", eval.psnr, eval.perplexity);
        let _ = writeln!(csv, "{s},{},{}", eval.psnr, eval.perplexity);
    }
    run.write("ablation.csv", csv.as_bytes())?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskReport {
    pub mask_fraction: f64,
    pub mask_side: usize,
    /// NaN (null in JSON) when the mask is empty.
    pub masked_mse: f64,
    pub masked_psnr: f64,
    pub full_mse: f64,
    pub full_psnr: f64,
}

/// Centered square mask over `side x side` samples: returns the masked copy
/// of `data`, the mask side, and the masked pixel indices.
pub fn center_mask(data: &SignalMatrix, fraction: f64) -> Result<(SignalMatrix, usize, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("mask fraction must lie in [0, 1], got {fraction}")));
    }
    let m = data.dim();
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(Error::Config(format!("mask evaluation needs square samples, got dim {m}")));
    }
    let ms = (fraction * side as f64).round() as usize;
    let off = (side - ms) / 2;
    let pixels: Vec<usize> = (off..off + ms).flat_map(|r| (off..off + ms).map(move |c| r * side + c)).collect();
    let mut masked = data.clone();
    for j in 0..masked.count() {
        let col = masked.col_mut(j);
        for &p in &pixels {
            col[p] = 0.0;
        }
    }
    Ok((masked, ms, pixels))
}

/// Zeroes a centered square of side `round(fraction * side)` in every
/// (square) sample, reconstructs, and scores against the unmasked data.
pub fn mask_evaluate(model: &Model, data: &SignalMatrix, fraction: f64, cfg: &TrainConfig) -> Result<MaskReport> {
    let (masked, ms, pixels) = center_mask(data, fraction)?;
    let fp = model.forward_target(&masked, data, cfg)?;
    let full_mse = fp.recon_mse;
    let mut sum = 0.0;
    for j in 0..data.count() {
        let (a, b) = (fp.x_hat.col(j), data.col(j));
        sum += pixels.iter().map(|&p| (a[p] - b[p]) * (a[p] - b[p])).sum::<f64>();
    }
    let cnt = pixels.len() * data.count();
    let masked_mse = if cnt == 0 { f64::NAN } else { sum / cnt as f64 };
    Ok(MaskReport {
        mask_fraction: fraction,
        mask_side: ms,
        masked_mse,
        masked_psnr: psnr_from_mse(masked_mse, cfg.peak),
        full_mse,
        full_psnr: psnr_from_mse(full_mse, cfg.peak),
    })
}

/// Evaluates the checkpoint model if one is configured, otherwise first
/// trains one to map masked samples to the originals (and saves it).
pub fn cmd_mask_eval(cfg: &RunConfig, fraction: f64, out: &OutputOptions) -> Result<RunManifest> {
    let data = cfg.load_data()?;
    let mut run = Run::start("mask-eval", cfg, &data.samples, out)?;
    let model = match checkpoint_model(cfg, data.samples.dim())? {
        Some(m) => m,
        None => {
            let (masked, _, _) = center_mask(&data.samples, fraction)?;
            let model = Model::new(&masked, &cfg.train)?;
            let outcome = train_model_target(model, &masked, &data.samples, &cfg.train)?;
            run.write("metrics.csv", metrics_csv(&outcome.history).as_bytes())?;
            save_checkpoint(&run.path("model.lsrs"), &checkpoint_of(&outcome.model))?;
            run.record("model.lsrs")?;
            outcome.model
        }
    };
    let report = mask_evaluate(&model, &data.samples, fraction, &cfg.train)?;
    run.write("summary.json", &to_json(&report)?)?;
    run.finish()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::DimensionMismatch(_) => EXIT_CONFIG,
        Error::Divergence(_) | Error::SingularSupport { .. } | Error::NearDependence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match &cli.command {
        Command::AblateSparsity { s_list: Some(list) } => cfg.s_list = list.clone(),
        Command::MaskEval { fraction: Some(f) } => cfg.mask_fraction = *f,
        _ => {}
    }
    if cfg.train.update_rule == UpdateRule::Bcd && cfg.train.kind == BottleneckKind::Vq {
        log::warn!("update_rule = bcd only affects dl bottlenecks");
    }
    if cfg.train.coder == CoderMode::RawPatch && cfg.train.beta > 0.0 {
        log::debug!("coder = raw: the commitment term is reported but has no parameters to train");
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<RunManifest> {
    let cfg = resolve_config(cli)?;
    let out = OutputOptions { dir: cli.out.clone(), reproducible: cli.reproducible };
    match &cli.command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Eval => cmd_eval(&cfg, &out),
        Command::Compare => cmd_compare(&cfg, &out),
        Command::AblateSparsity { .. } => cmd_ablate_sparsity(&cfg, &cfg.s_list, &out),
        Command::MaskEval { .. } => cmd_mask_eval(&cfg, cfg.mask_fraction, &out),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match execute(&cli) {
        Ok(m) => {
            log::info!("{} finished; {} artifacts in {}", cli.command.name(), m.outputs.len(), cli.out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
