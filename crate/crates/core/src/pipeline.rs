//! Stage drivers shared by the command-line tool and tests.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, modality_score_tables, popularity_report, write_results, Predictor, RankResult};
use crate::interest::InterestIndex;
use crate::model::{Model, ID_TABLE};
use crate::param::ParamStore;
use crate::store::{popularity_counts, DataPaths, Dataset};
use crate::synth::generate;
use crate::trainer::{finetune, finetune_search, pretrain, refresh_index, EpochLog, TrainReport, LOG_HEADER};

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&DataPaths::in_dir(&cfg.data_dir), cfg.min_seq_len)
}

/// Fresh model sized for `data`.
pub fn build_model(cfg: &RunConfig, data: &Dataset, use_ids: bool) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new(cfg.precision);
    let mc = crate::model::ModelConfig {
        use_ids,
        ..cfg.model.clone()
    };
    let model = Model::new(mc, data.text.dim(), data.visual.dim(), data.n_items(), &mut store, cfg.train.seed)?;
    Ok((model, store))
}

/// Model whose parameters come from `path`. With `allow_missing_ids` the ID
/// table may be absent from the checkpoint and keeps its fresh values.
pub fn load_model(
    cfg: &RunConfig,
    data: &Dataset,
    path: &Path,
    use_ids: bool,
    allow_missing_ids: bool,
) -> Result<(Model, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let (model, mut store) = build_model(cfg, data, use_ids)?;
    ck.apply(&mut store, |name| allow_missing_ids && name == ID_TABLE)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), strip(e))))?;
    Ok((model, store))
}

fn strip(e: Error) -> String {
    match e {
        Error::Checkpoint(s) => s,
        other => other.to_string(),
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let p = cfg.out_dir.join("config.txt");
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))
}

struct LogFile {
    path: PathBuf,
    file: fs::File,
}

impl LogFile {
    fn create(path: PathBuf) -> Result<Self> {
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(LogFile { path, file })
    }

    fn sink(&mut self) -> impl FnMut(&EpochLog) + '_ {
        move |e: &EpochLog| {
            if let Err(err) = writeln!(self.file, "{e}") {
                log::warn!("cannot write {}: {err}", self.path.display());
            }
        }
    }
}

pub struct StageOutput {
    pub model: Model,
    pub store: ParamStore,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub test: Option<RankResult>,
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<StageOutput> {
    prepare_out(cfg)?;
    let data = load_data(cfg)?;
    let (model, mut store) = build_model(cfg, &data, false)?;
    let mut log = LogFile::create(cfg.out_dir.join("pretrain_log.csv"))?;
    let report = pretrain(&model, &mut store, &data, &cfg.train, &mut log.sink())?;
    let path = cfg.out_dir.join(PRETRAIN_CKPT);
    Checkpoint::from_store(&store, Some(&report.optimizer)).save(&path)?;
    Ok(StageOutput {
        model,
        store,
        report,
        checkpoint: path,
        test: None,
    })
}

/// Fine-tunes from `cfg.checkpoint` (or from scratch when unset) and evaluates
/// the best parameters on the test split.
pub fn run_finetune(cfg: &RunConfig) -> Result<StageOutput> {
    prepare_out(cfg)?;
    let data = load_data(cfg)?;
    let use_ids = cfg.train.mode == crate::matching::Mode::Transductive;
    let (model, mut store) = match &cfg.checkpoint {
        Some(p) => load_model(cfg, &data, p, use_ids, true)?,
        None => {
            log::warn!("no checkpoint given; fine-tuning from random initialization");
            build_model(cfg, &data, use_ids)?
        }
    };
    let mut log = LogFile::create(cfg.out_dir.join("finetune_log.csv"))?;
    let report = if cfg.lr_search {
        finetune_search(&model, &mut store, &data, &cfg.train, &mut log.sink())?.1
    } else {
        finetune(&model, &mut store, &data, &cfg.train, &mut log.sink())?
    };
    let path = cfg.out_dir.join(FINETUNE_CKPT);
    Checkpoint::from_store(&store, Some(&report.optimizer)).save(&path)?;
    let test = evaluate_and_write(cfg, &data, &model, &store, report.index.as_ref())?;
    Ok(StageOutput {
        model,
        store,
        report,
        checkpoint: path,
        test: Some(test),
    })
}

fn evaluate_and_write(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Model,
    store: &ParamStore,
    index: Option<&InterestIndex>,
) -> Result<RankResult> {
    let pred = Predictor {
        model,
        store,
        features: data.features(),
        index,
    };
    let examples = data.test.examples();
    let result = evaluate(&pred, &examples, &cfg.eval_ks)?;
    let counts = popularity_counts(&data.train, data.n_items());
    let buckets = popularity_report(&result, &counts, &cfg.bucket_edges)?;
    write_results(&cfg.out_dir.join("results.csv"), &result, &buckets)?;
    if cfg.dump_scores {
        let (t, v) = modality_score_tables(&pred, &examples)?;
        t.write(&cfg.out_dir.join("scores_text.mmf"))?;
        v.write(&cfg.out_dir.join("scores_visual.mmf"))?;
    }
    Ok(result)
}

/// Model for evaluation-style commands: from the checkpoint when given,
/// otherwise freshly initialized.
fn model_for_inspection(cfg: &RunConfig, data: &Dataset) -> Result<(Model, ParamStore)> {
    match &cfg.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let use_ids = ck.params.iter().any(|(n, _)| n == ID_TABLE);
            load_model(cfg, data, p, use_ids, false)
        }
        None => build_model(cfg, data, false),
    }
}

/// Evaluates on the test split and writes `results.csv`.
pub fn run_eval(cfg: &RunConfig) -> Result<RankResult> {
    prepare_out(cfg)?;
    let data = load_data(cfg)?;
    let (model, store) = model_for_inspection(cfg, &data)?;
    let index = refresh_index(&model, &store, data.features(), &cfg.train.clustering)?;
    evaluate_and_write(cfg, &data, &model, &store, index.as_ref())
}

/// Writes `clusters.tsv` with one `item_id, modality, prototype` line per
/// token.
pub fn run_cluster_debug(cfg: &RunConfig) -> Result<InterestIndex> {
    prepare_out(cfg)?;
    let data = load_data(cfg)?;
    let (model, store) = model_for_inspection(cfg, &data)?;
    if !model.config.architecture.uses_interests() {
        return Err(Error::Config("architecture: decoder_only_2layer has no interest clustering".into()));
    }
    let index = refresh_index(&model, &store, data.features(), &cfg.train.clustering)?.expect("interests");
    let mut out = String::from("item_id\tmodality\tprototype\n");
    for (key, p) in index.assignments() {
        out.push_str(&format!("{}\t{}\t{p}\n", data.catalog.id_of(key.item), key.modality));
    }
    let path = cfg.out_dir.join("clusters.tsv");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Writes a synthetic domain into the output directory.
pub fn run_gen_synth(cfg: &RunConfig) -> Result<DataPaths> {
    let data = generate(&cfg.synth)?;
    data.write(&cfg.out_dir)
}
