use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{weighted_metrics, Metrics};
use crate::kg::KnowledgeGraph;
use crate::model::SeverityModel;
use crate::numerics::{Adam, Graph, Mode, ParamStore};
use crate::text::{Blocks, EmbeddedPost};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub blocks: Blocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

/// Adam over mini-batches of soft-label cross-entropy, one epoch at a time.
pub struct Trainer<'a> {
    model: &'a SeverityModel,
    graph: &'a KnowledgeGraph,
    posts: &'a [EmbeddedPost],
    settings: TrainSettings,
    store: ParamStore,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a SeverityModel,
        graph: &'a KnowledgeGraph,
        posts: &'a [EmbeddedPost],
        settings: TrainSettings,
    ) -> Result<Self> {
        if posts.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if let Some(p) = posts.iter().find(|p| p.label.is_none()) {
            return Err(Error::Validation(format!("training post {:?} has no label", p.id)));
        }
        if settings.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let store = model.initialized(&mut ChaCha8Rng::seed_from_u64(settings.seed));
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            graph,
            posts,
            adam: Adam::new(settings.lr),
            settings,
            store,
            rng,
            epoch: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled training posts; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.posts.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.settings.batch).enumerate() {
            let batch: Vec<&EmbeddedPost> = chunk.iter().map(|i| &self.posts[*i]).collect();
            let mut g = Graph::new();
            let step = self
                .model
                .batch_loss(&mut g, &self.store, self.graph, &batch, self.settings.blocks, Mode::Train, &mut self.rng)
                .and_then(|loss| Ok((g.value(loss).item()?, g.backward(loss)?)));
            let (loss, grads) = match step {
                Ok(r) => r,
                Err(Error::NumericDomain(msg)) => {
                    let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
                    return Err(Error::Training(format!(
                        "non-finite value in epoch {}, batch {b} (posts {ids:?}): {msg}",
                        self.epoch + 1
                    )));
                }
                Err(e) => return Err(e),
            };
            self.adam.step(&mut self.store, &grads);
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F1 (lowest training
    /// loss when there is no validation set); earliest epoch wins ties.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn train(
    model: &SeverityModel,
    graph: &KnowledgeGraph,
    train_posts: &[EmbeddedPost],
    val_posts: &[EmbeddedPost],
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, graph, train_posts, settings.clone())?;
    let mut log = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for _ in 0..settings.epochs {
        let train_loss = trainer.run_epoch()?;
        let epoch = trainer.epochs_run();
        let val_f1 = if val_posts.is_empty() {
            None
        } else {
            Some(evaluate(model, trainer.store(), graph, val_posts, settings.blocks)?.metrics.f1)
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}{}",
            val_f1.map(|f| format!(", val weighted F1 {f:.4}")).unwrap_or_default()
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            val_f1,
        });
        let score = val_f1.unwrap_or(-train_loss);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, trainer.store().clone()));
        }
    }
    let (_, best_epoch, best) = match best {
        Some(b) => b,
        None => (0.0, 0, trainer.into_store()),
    };
    Ok(TrainOutcome { best, best_epoch, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode predictions and weighted metrics over labelled posts.
pub fn evaluate(
    model: &SeverityModel,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    posts: &[EmbeddedPost],
    blocks: Blocks,
) -> Result<Evaluation> {
    if posts.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let kg = model.encode_graph(store, graph)?;
    let mut gold = Vec::with_capacity(posts.len());
    let mut predictions = Vec::with_capacity(posts.len());
    for p in posts {
        let label = p
            .label
            .ok_or_else(|| Error::Validation(format!("post {:?} has no label", p.id)))?;
        gold.push(label);
        predictions.push(model.predict(store, p, &kg, blocks)?.predicted_rank);
    }
    let classes = model.config.classes;
    for c in 0..classes {
        if !gold.contains(&c) {
            log::warn!("class {c} does not occur in the evaluated posts");
        }
    }
    Ok(Evaluation {
        metrics: weighted_metrics(&gold, &predictions, classes)?,
        predictions,
    })
}

/// Writes `id<TAB>label<TAB>z_1 ... z_d` per post; the label field is empty when unknown.
pub fn dump_embeddings<W: Write>(
    model: &SeverityModel,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    posts: &[EmbeddedPost],
    blocks: Blocks,
    out: &mut W,
) -> Result<usize> {
    let kg = model.encode_graph(store, graph)?;
    for p in posts {
        let z = model.predict(store, p, &kg, blocks)?.fused;
        let mut line = p.id.replace(['\t', '\n'], " ");
        line.push('\t');
        if let Some(l) = p.label {
            line.push_str(&l.to_string());
        }
        for v in z {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())
            .map_err(|e| Error::io("write embeddings", e))?;
    }
    Ok(posts.len())
}

/// Median and sample standard deviation of one metric over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("spread of no values"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        let std = if n < 2 {
            0.0
        } else {
            let mean = v.iter().sum::<f64>() / n as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Ok(Spread { median, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeats: usize,
    pub precision: Spread,
    pub recall: Spread,
    pub f1: Spread,
    pub runs: Vec<Metrics>,
}

impl RepeatSummary {
    pub fn new(runs: Vec<Metrics>) -> Result<Self> {
        let pick = |f: fn(&Metrics) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(RepeatSummary {
            repeats: runs.len(),
            precision: pick(|m| m.precision)?,
            recall: pick(|m| m.recall)?,
            f1: pick(|m| m.f1)?,
            runs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_examples() {
        assert_eq!(Spread::of(&[0.4]).unwrap(), Spread { median: 0.4, std: 0.0 });
        let s = Spread::of(&[3.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
