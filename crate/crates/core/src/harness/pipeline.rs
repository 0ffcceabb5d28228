use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{embed_records, load_dataset, stratified_split, DatasetRecord, Split};
use super::train::{evaluate, train, EpochLog, RepeatSummary, TrainSettings};
use crate::embedding::{Embedders, SentenceEmbedder, WordEmbedder};
use crate::error::{Error, Result};
use crate::explain::{explain_post, extract_subgraph, score_edges, train_explainer, EdgeScorer, ExplanationBundle, SubgraphExplanation};
use crate::head::Metrics;
use crate::kg::{filter_by_symptoms, ingest_triplets, KnowledgeGraph, SymptomLexicon};
use crate::model::SeverityModel;
use crate::text::EmbeddedPost;

/// Table-backed providers where a path is configured, synthetic ones otherwise.
pub fn embedders_for(config: &RunConfig) -> Result<Embedders> {
    let words = match &config.paths.word_embeddings {
        Some(p) => WordEmbedder::from_table(p, config.embedding_seed)?,
        None => WordEmbedder::synthetic(config.word_dim, config.embedding_seed),
    };
    let sentences = match &config.paths.sentence_embeddings {
        Some(p) => SentenceEmbedder::from_table(p)?,
        None => SentenceEmbedder::synthetic(config.sentence_dim, config.embedding_seed),
    };
    if words.dim() != config.word_dim || sentences.dim() != config.sentence_dim {
        return Err(Error::Config(format!(
            "embedding tables have widths {}/{}, config expects {}/{}",
            words.dim(),
            sentences.dim(),
            config.word_dim,
            config.sentence_dim
        )));
    }
    Ok(Embedders { words, sentences })
}

pub fn build_graph(triplets: &Path, lexicon: &Path, threshold: f64, sentences: &SentenceEmbedder) -> Result<KnowledgeGraph> {
    let rows = ingest_triplets(triplets)?;
    let lex = SymptomLexicon::load(lexicon, sentences)?;
    let g = filter_by_symptoms(&rows, &lex, threshold, sentences)?;
    log::info!(
        "graph: {} of {} entities kept, {} edges",
        g.node_count(),
        rows.iter()
            .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        g.edge_count()
    );
    Ok(g)
}

/// The configured graph file, or a graph built from triplets and lexicon.
pub fn resolve_graph(config: &RunConfig, embedders: &Embedders) -> Result<KnowledgeGraph> {
    if let Some(p) = &config.paths.graph {
        return KnowledgeGraph::load(p);
    }
    match (&config.paths.triplets, &config.paths.lexicon) {
        (Some(t), Some(l)) => build_graph(t, l, config.cosine_threshold, &embedders.sentences),
        _ => Err(Error::Config("set paths.graph, or both paths.triplets and paths.lexicon".into())),
    }
}

pub fn dataset_records(config: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let path = config
        .paths
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset path configured".into()))?;
    load_dataset(path, config.class_count)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
    All,
}

impl Partition {
    pub fn select(self, split: &Split, n: usize) -> Vec<usize> {
        match self {
            Partition::Train => split.train.clone(),
            Partition::Val => split.val.clone(),
            Partition::Test => split.test.clone(),
            Partition::All => (0..n).collect(),
        }
    }
}

fn pick(posts: &[EmbeddedPost], idx: &[usize]) -> Vec<EmbeddedPost> {
    idx.iter().map(|i| posts[*i].clone()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub split: Split,
}

/// Loads inputs, trains with the configured seed and returns the best checkpoint.
pub fn run_training(config: &RunConfig) -> Result<TrainReport> {
    let seed = config.require_seed()?;
    config.validate()?;
    let embedders = embedders_for(config)?;
    let graph = resolve_graph(config, &embedders)?;
    let records = dataset_records(config)?;
    let posts = embed_records(&records, &embedders, config.max_sentences, config.max_tokens)?;
    let split = stratified_split(&records, config.split_seed.unwrap_or(seed));
    let model = SeverityModel::new(config.model_config())?;
    let settings = TrainSettings {
        lr: config.lr,
        epochs: config.epochs,
        batch: config.batch,
        seed,
        blocks: config.blocks()?,
    };
    let outcome = train(&model, &graph, &pick(&posts, &split.train), &pick(&posts, &split.val), &settings)?;
    Ok(TrainReport {
        checkpoint: Checkpoint {
            config: config.clone(),
            params: outcome.best,
            graph,
        },
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub partition: Partition,
    pub posts: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<RepeatSummary>,
}

/// Metrics of `checkpoint` on a partition of `records`. With `repeats > 1`,
/// the model is retrained with seeds `seed + 1, ...` on the same split and the
/// median and standard deviation over all runs are reported as well.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    records: &[DatasetRecord],
    partition: Partition,
    repeats: usize,
) -> Result<EvalReport> {
    if repeats == 0 {
        return Err(Error::Validation("repeats must be at least 1".into()));
    }
    let config = &checkpoint.config;
    let seed = config.require_seed()?;
    let split_seed = config.split_seed.unwrap_or(seed);
    let embedders = embedders_for(config)?;
    let posts = embed_records(records, &embedders, config.max_sentences, config.max_tokens)?;
    let split = stratified_split(records, split_seed);
    let selected = pick(&posts, &partition.select(&split, posts.len()));
    let model = SeverityModel::new(config.model_config())?;
    let blocks = config.blocks()?;
    let metrics = evaluate(&model, &checkpoint.params, &checkpoint.graph, &selected, blocks)?.metrics;

    let repeats = if repeats > 1 {
        let mut runs = vec![metrics.clone()];
        for i in 1..repeats {
            let settings = TrainSettings {
                lr: config.lr,
                epochs: config.epochs,
                batch: config.batch,
                seed: seed.wrapping_add(i as u64),
                blocks,
            };
            let out = train(
                &model,
                &checkpoint.graph,
                &pick(&posts, &split.train),
                &pick(&posts, &split.val),
                &settings,
            )?;
            runs.push(evaluate(&model, &out.best, &checkpoint.graph, &selected, blocks)?.metrics);
        }
        Some(RepeatSummary::new(runs)?)
    } else {
        None
    };
    Ok(EvalReport {
        partition,
        posts: selected.len(),
        metrics,
        repeats,
    })
}

/// Trains the edge scorer against the checkpoint's KG encoder and keeps the top-K edges.
pub fn explain_subgraph(checkpoint: &Checkpoint, top_k: usize) -> Result<SubgraphExplanation> {
    let config = &checkpoint.config;
    let model = SeverityModel::new(config.model_config())?;
    let graph = &checkpoint.graph;
    let scorer = EdgeScorer::new(graph.feature_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.require_seed()?);
    rng.set_stream(3);
    let run = train_explainer(
        graph,
        &model.kg,
        &checkpoint.params,
        &scorer,
        scorer.initialized(&mut rng),
        &config.explainer_config(),
    )?;
    log::info!(
        "explainer loss {:.6e} -> {:.6e}",
        run.initial_loss,
        run.best_loss
    );
    let scores = score_edges(graph, &scorer, &run.store)?;
    let sub = extract_subgraph(&scores, top_k)?;
    Ok(SubgraphExplanation::new(graph, &sub))
}

/// One explanation per record.
pub fn explain_records(checkpoint: &Checkpoint, records: &[DatasetRecord], top_k: usize) -> Result<Vec<ExplanationBundle>> {
    let config = &checkpoint.config;
    let embedders = embedders_for(config)?;
    let posts = embed_records(records, &embedders, config.max_sentences, config.max_tokens)?;
    let model = SeverityModel::new(config.model_config())?;
    let blocks = config.blocks()?;
    let subgraph = explain_subgraph(checkpoint, top_k)?;
    let kg = model.encode_graph(&checkpoint.params, &checkpoint.graph)?;
    posts
        .iter()
        .map(|p| explain_post(&model, &checkpoint.params, p, &kg, blocks, &subgraph))
        .collect()
}

/// Fused vectors for every record, as TSV rows.
pub fn dump_records<W: std::io::Write>(checkpoint: &Checkpoint, records: &[DatasetRecord], out: &mut W) -> Result<usize> {
    let config = &checkpoint.config;
    let embedders = embedders_for(config)?;
    let posts = embed_records(records, &embedders, config.max_sentences, config.max_tokens)?;
    let model = SeverityModel::new(config.model_config())?;
    super::train::dump_embeddings(&model, &checkpoint.params, &checkpoint.graph, &posts, config.blocks()?, out)
}
