use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use roomgraph_core::features::gather_rows;
use roomgraph_core::infer::{self, evaluate_model, write_rankings_csv};
use roomgraph_core::train::train_with;
use roomgraph_core::{
    compute_soft_scores, gen_synthetic as generate, graph_stats, ground_truth_map,
    image_affinities, load_checkpoint, load_features, read_annotations, save_checkpoint,
    save_features, split_dataset, tune_temperature, DatasetSplit, Error, FeatureManifest,
    FeatureMatrix, GcnModel, GroundTruthMap, KnowledgeGraph, QuerySet, SoftScoreTable, SplitPart,
};

use crate::config::RunConfig;

const KS: [usize; 3] = [1, 3, 5];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Anything that failed while running; exit code 1.
    Run(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Run(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Creates the output directory and records the effective configuration.
fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_text(&out.join("config.txt"), &cfg.echo())?;
    Ok(out)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn checkpoint(cfg: &RunConfig) -> Result<GcnModel> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(load_checkpoint(path)?)
}

/// Everything the training and scoring commands read from the data dir.
struct Dataset {
    features: FeatureMatrix,
    manifest: FeatureManifest,
    split: DatasetSplit,
    gt: GroundTruthMap,
}

impl Dataset {
    fn load(dir: &Path) -> Result<Self> {
        let split: DatasetSplit = serde_json::from_reader(open(&dir.join("split.json"))?)?;
        let gt: GroundTruthMap = serde_json::from_reader(open(&dir.join("ground_truth.json"))?)?;
        Ok(Self {
            features: load_features(&dir.join("features.afm1"))?,
            manifest: FeatureManifest::read(&dir.join("features.json"))?,
            split,
            gt,
        })
    }

    fn queries(&self, part: SplitPart) -> Result<QuerySet> {
        Ok(QuerySet::from_split(
            &self.features,
            &self.manifest,
            &self.split,
            part,
            &self.gt,
        )?)
    }
}

pub fn gen_synthetic(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec();
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = out_dir(cfg)?;
    let data = generate(&spec)?;
    save_features(&data.features, &out.join("features.afm1"))?;
    data.manifest.write(&out.join("features.json"))?;
    write_text(
        &out.join("scores.json"),
        &(serde_json::to_string_pretty(&data.scores)? + "\n"),
    )?;
    write_text(
        &out.join("ground_truth.json"),
        &(serde_json::to_string_pretty(&data.gt)? + "\n"),
    )
}

pub fn build_graph(cfg: &RunConfig) -> Result<()> {
    let data = data_dir(cfg);
    let out = out_dir(cfg)?;
    let manifest = FeatureManifest::read(&data.join("features.json"))?;
    let scores: SoftScoreTable = match &cfg.annotations {
        Some(path) => compute_soft_scores(&read_annotations(path)?)?,
        None => serde_json::from_reader(open(&data.join("scores.json"))?)?,
    };
    let mut rooms = manifest.rooms();
    if rooms.is_empty() {
        rooms = scores.rooms();
    }
    let gt = ground_truth_map(&scores, &rooms)?;
    let split = split_dataset(&manifest.image_counts()?, cfg.split, cfg.seed)?;
    let graph = roomgraph_core::build_graph(&split, &gt, &scores, cfg.seed)?;
    graph.save(&out)?;
    write_text(
        &out.join("scores.json"),
        &(serde_json::to_string_pretty(&scores)? + "\n"),
    )?;
    write_text(
        &out.join("split.json"),
        &(serde_json::to_string_pretty(&split)? + "\n"),
    )?;
    write_text(
        &out.join("ground_truth.json"),
        &(serde_json::to_string_pretty(&gt)? + "\n"),
    )
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let graph = KnowledgeGraph::load(&data_dir(cfg))?;
    let out = out_dir(cfg)?;
    let json = serde_json::to_string_pretty(&graph_stats(&graph))? + "\n";
    print!("{json}");
    write_text(&out.join("stats.json"), &json)
}

fn training_inputs(cfg: &RunConfig) -> Result<(Dataset, KnowledgeGraph, Option<QuerySet>)> {
    let dir = data_dir(cfg);
    let data = Dataset::load(&dir)?;
    let graph = KnowledgeGraph::load(&dir)?;
    let has_val = data.split.categories.values().any(|c| !c.val.is_empty());
    let val = if has_val {
        Some(data.queries(SplitPart::Val)?)
    } else {
        None
    };
    Ok((data, graph, val))
}

fn validate_model(cfg: &RunConfig, in_dim: usize) -> Result<()> {
    cfg.gcn_config(in_dim)
        .validate()
        .and_then(|_| cfg.train_config().validate())
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (data, graph, val) = training_inputs(cfg)?;
    validate_model(cfg, data.features.dim())?;
    let out = out_dir(cfg)?;
    let x = gather_rows(&data.features, &data.manifest, graph.nodes())?.to_dense();
    let (_, log) = train_with(
        &graph,
        &x,
        &cfg.gcn_config(data.features.dim()),
        &cfg.train_config(),
        val.as_ref(),
        |step, model| {
            let path = out.join(format!("step_{step}.gck1"));
            save_checkpoint(model, &path)?;
            log::info!("wrote {}", path.display());
            Ok(())
        },
    )?;
    let path = out.join("train_log.jsonl");
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w)?;
    w.flush().map_err(io_err(&path))?;
    if let Some(last) = log.entries.last() {
        println!("step {}: loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let model = checkpoint(cfg)?;
    let data = Dataset::load(&data_dir(cfg))?;
    let out = out_dir(cfg)?;
    let report = evaluate_model(&model, &data.queries(cfg.part)?, &KS)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    write_text(&out.join("eval_report.json"), &json)
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let model = checkpoint(cfg)?;
    let data = Dataset::load(&data_dir(cfg))?;
    let out = out_dir(cfg)?;
    let q = data.queries(cfg.part)?;
    let aff = if cfg.per_image {
        image_affinities(&model, &q.images, &q.image_names, &q.rooms, &q.room_names)?
    } else {
        q.category_affinities(&model)?
    };
    let path = out.join("rankings.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    write_rankings_csv(&aff, &mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn tune_temp(cfg: &RunConfig) -> Result<()> {
    let (data, graph, val) = training_inputs(cfg)?;
    validate_model(cfg, data.features.dim())?;
    let val =
        val.ok_or_else(|| CliError::Usage("temperature tuning needs a validation split".into()))?;
    let out = out_dir(cfg)?;
    let x = gather_rows(&data.features, &data.manifest, graph.nodes())?.to_dense();
    let result = tune_temperature(
        &cfg.temperatures,
        &graph,
        &x,
        &cfg.gcn_config(data.features.dim()),
        &cfg.train_config(),
        &val,
    )?;
    let json = serde_json::to_string_pretty(&result)? + "\n";
    print!("{json}");
    write_text(&out.join("tune_result.json"), &json)
}

pub fn export_embeddings(cfg: &RunConfig) -> Result<()> {
    let model = checkpoint(cfg)?;
    let dir = data_dir(cfg);
    let features = load_features(&dir.join("features.afm1"))?;
    let manifest = FeatureManifest::read(&dir.join("features.json"))?;
    let out = out_dir(cfg)?;
    let names: Vec<String> = manifest.rows.iter().map(ToString::to_string).collect();
    let path = out.join("embeddings.tsv");
    infer::export_embeddings(&model, &features.to_dense(), &names, &path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}
