//! Run configuration as `key = value` text.
//!
//! Values are layered: built-in defaults, then a config file, then
//! command-line overrides. Blank lines and lines starting with `#` are
//! ignored. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::interest::PrototypeCount;
use crate::matching::Mode;
use crate::model::{Architecture, ModelConfig};
use crate::synth::SynthConfig;
use crate::tensor::Precision;
use crate::trainer::{SiView, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to start from (finetune) or to evaluate (eval, cluster-debug).
    pub checkpoint: Option<PathBuf>,
    pub precision: Precision,
    pub threads: usize,
    pub min_seq_len: usize,
    pub lr_search: bool,
    pub eval_ks: Vec<usize>,
    pub bucket_edges: Vec<u64>,
    pub dump_scores: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            precision: Precision::Single,
            threads: 0,
            min_seq_len: 3,
            lr_search: false,
            eval_ks: vec![10, 50],
            bucket_edges: vec![0, 1, 5, 20],
            dump_scores: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

pub const KEYS: &[&str] = &[
    "data_dir", "out_dir", "checkpoint", "precision", "threads", "min_seq_len", "lr_search", "eval_ks",
    "bucket_edges", "dump_scores", "d", "heads", "ffn", "enc_layers", "dec_layers", "max_seq_len",
    "architecture", "adapter_hidden", "disable_adapters", "embed_std", "mode", "batch_size", "tau", "lambda",
    "gamma", "lr", "lr_grid", "epochs", "patience", "dropout", "augment_rate", "seed", "clip_norm",
    "exclude_self", "si_view", "disable_ss_loss", "disable_ortho", "cluster_k", "prototypes", "eval_every",
    "synth_seed", "synth_users", "synth_items", "synth_dim", "synth_clusters", "synth_min_len",
    "synth_max_len", "synth_image_less", "synth_center_scale", "synth_noise",
];

impl RunConfig {
    /// Sets one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "precision" => {
                self.precision = match v {
                    "f32" | "single" => Precision::Single,
                    "f64" | "double" => Precision::Double,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            "threads" => self.threads = parse(key, v)?,
            "min_seq_len" => self.min_seq_len = parse(key, v)?,
            "lr_search" => self.lr_search = parse_bool(key, v)?,
            "eval_ks" => self.eval_ks = parse_list(key, v)?,
            "bucket_edges" => self.bucket_edges = parse_list(key, v)?,
            "dump_scores" => self.dump_scores = parse_bool(key, v)?,
            "d" => m.d = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn" => m.ffn = parse(key, v)?,
            "enc_layers" => m.enc_layers = parse(key, v)?,
            "dec_layers" => m.dec_layers = parse(key, v)?,
            "max_seq_len" => m.max_seq_len = parse(key, v)?,
            "architecture" => {
                m.architecture = match v {
                    "encoder_decoder" => Architecture::EncoderDecoder,
                    "encoder_only_2layer" => Architecture::EncoderOnly2,
                    "decoder_only_2layer" => Architecture::DecoderOnly2,
                    _ => {
                        return Err(Error::Config(format!(
                            "architecture: expected encoder_decoder, encoder_only_2layer or decoder_only_2layer, got {v:?}"
                        )))
                    }
                }
            }
            "adapter_hidden" => {
                let h: usize = parse(key, v)?;
                if m.adapter_hidden.is_some() {
                    m.adapter_hidden = Some(h);
                } else {
                    return Err(Error::Config("adapter_hidden: adapters are disabled".into()));
                }
            }
            "disable_adapters" => {
                if parse_bool(key, v)? {
                    m.adapter_hidden = None;
                } else if m.adapter_hidden.is_none() {
                    m.adapter_hidden = ModelConfig::default().adapter_hidden;
                }
            }
            "embed_std" => m.embed_std = parse(key, v)?,
            "mode" => {
                t.mode = Mode::from_str(v).map_err(|_| Error::Config(format!("mode: expected inductive or transductive, got {v:?}")))?;
                m.use_ids = t.mode == Mode::Transductive;
            }
            "batch_size" => t.batch_size = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_grid" => t.lr_grid = parse_list(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "dropout" => t.dropout = parse(key, v)?,
            "augment_rate" => t.augment_rate = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "exclude_self" => t.exclude_self = parse_bool(key, v)?,
            "si_view" => {
                t.si_view = match v {
                    "first" => SiView::First,
                    "mean" => SiView::Mean,
                    _ => return Err(Error::Config(format!("si_view: expected first or mean, got {v:?}"))),
                }
            }
            "disable_ss_loss" => t.disable_ss_loss = parse_bool(key, v)?,
            "disable_ortho" => t.disable_ortho = parse_bool(key, v)?,
            "cluster_k" => t.clustering.k = if v == "auto" { None } else { Some(parse(key, v)?) },
            "prototypes" => {
                t.clustering.prototypes = if v.contains('.') {
                    PrototypeCount::Ratio(parse(key, v)?)
                } else {
                    PrototypeCount::Absolute(parse(key, v)?)
                }
            }
            "eval_every" => t.eval_every = parse(key, v)?,
            "synth_seed" => s.seed = parse(key, v)?,
            "synth_users" => s.n_users = parse(key, v)?,
            "synth_items" => s.n_items = parse(key, v)?,
            "synth_dim" => s.dim = parse(key, v)?,
            "synth_clusters" => s.n_clusters = parse(key, v)?,
            "synth_min_len" => s.min_len = parse(key, v)?,
            "synth_max_len" => s.max_len = parse(key, v)?,
            "synth_image_less" => s.image_less = parse(key, v)?,
            "synth_center_scale" => s.center_scale = parse(key, v)?,
            "synth_noise" => s.noise = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines from text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", ln + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", ln + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?}: expected key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must list positive cutoffs".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` dump of every setting.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("data_dir = {}", self.data_dir.display()),
            format!("out_dir = {}", self.out_dir.display()),
            format!(
                "checkpoint = {}",
                self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            ),
            format!("precision = {}", if self.precision == Precision::Single { "f32" } else { "f64" }),
            format!("threads = {}", self.threads),
            format!("min_seq_len = {}", self.min_seq_len),
            format!("lr_search = {}", self.lr_search),
            format!("eval_ks = {}", self.eval_ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")),
            format!(
                "bucket_edges = {}",
                self.bucket_edges.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("dump_scores = {}", self.dump_scores),
            format!("d = {}", m.d),
            format!("heads = {}", m.heads),
            format!("ffn = {}", m.ffn),
            format!("enc_layers = {}", m.enc_layers),
            format!("dec_layers = {}", m.dec_layers),
            format!("max_seq_len = {}", m.max_seq_len),
            format!(
                "architecture = {}",
                match m.architecture {
                    Architecture::EncoderDecoder => "encoder_decoder",
                    Architecture::EncoderOnly2 => "encoder_only_2layer",
                    Architecture::DecoderOnly2 => "decoder_only_2layer",
                }
            ),
            format!("disable_adapters = {}", m.adapter_hidden.is_none()),
        ];
        if let Some(h) = m.adapter_hidden {
            lines.push(format!("adapter_hidden = {h}"));
        }
        lines.extend([
            format!("embed_std = {}", m.embed_std),
            format!("mode = {}", if t.mode == Mode::Transductive { "transductive" } else { "inductive" }),
            format!("batch_size = {}", t.batch_size),
            format!("tau = {}", t.tau),
            format!("lambda = {}", t.lambda),
            format!("gamma = {}", t.gamma),
            format!("lr = {}", t.lr),
            format!("lr_grid = {}", list(&t.lr_grid)),
            format!("epochs = {}", t.epochs),
            format!("patience = {}", t.patience),
            format!("dropout = {}", t.dropout),
            format!("augment_rate = {}", t.augment_rate),
            format!("seed = {}", t.seed),
            format!("clip_norm = {}", t.clip_norm),
            format!("exclude_self = {}", t.exclude_self),
            format!("si_view = {}", if t.si_view == SiView::Mean { "mean" } else { "first" }),
            format!("disable_ss_loss = {}", t.disable_ss_loss),
            format!("disable_ortho = {}", t.disable_ortho),
            format!("cluster_k = {}", t.clustering.k.map_or("auto".to_string(), |k| k.to_string())),
            format!(
                "prototypes = {}",
                match t.clustering.prototypes {
                    PrototypeCount::Ratio(r) => format!("{r:?}"),
                    PrototypeCount::Absolute(k) => k.to_string(),
                }
            ),
            format!("eval_every = {}", t.eval_every),
            format!("synth_seed = {}", s.seed),
            format!("synth_users = {}", s.n_users),
            format!("synth_items = {}", s.n_items),
            format!("synth_dim = {}", s.dim),
            format!("synth_clusters = {}", s.n_clusters),
            format!("synth_min_len = {}", s.min_len),
            format!("synth_max_len = {}", s.max_len),
            format!("synth_image_less = {}", s.image_less),
            format!("synth_center_scale = {}", s.center_scale),
            format!("synth_noise = {}", s.noise),
        ]);
        lines.join("\n") + "\n"
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}
