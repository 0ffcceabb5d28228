use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::embedding::SentenceEmbedder;
use crate::error::{Error, Result};

use super::graph::{Edge, KnowledgeGraph, Node};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One row of the triplet interchange file.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RawTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub head_summary: String,
    pub tail_summary: String,
}

/// Reads `head<TAB>relation<TAB>tail<TAB>head_summary<TAB>tail_summary` rows.
/// Blank lines and lines starting with `#` are skipped; repeated rows are kept once.
pub fn ingest_triplets(path: &Path) -> Result<Vec<RawTriplet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_triplets(&text, path)
}

pub fn parse_triplets(text: &str, origin: &Path) -> Result<Vec<RawTriplet>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        if let Some(k) = fields.iter().position(|f| f.is_empty()) {
            return Err(err(format!("field {} is empty", k + 1)));
        }
        let t = RawTriplet {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
            head_summary: fields[3].to_string(),
            tail_summary: fields[4].to_string(),
        };
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::contract(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::contract("cosine with a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymptomEntry {
    pub name: String,
    pub description: Option<String>,
    pub embedding: Vec<f64>,
}

/// Symptom anchors used to decide which entities belong in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SymptomLexicon {
    entries: Vec<SymptomEntry>,
}

impl SymptomLexicon {
    pub fn new(entries: Vec<SymptomEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("symptom lexicon is empty".into()));
        }
        let dim = entries[0].embedding.len();
        for e in &entries {
            if e.embedding.len() != dim || e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("symptom {:?} has an invalid embedding", e.name)));
            }
        }
        Ok(SymptomLexicon { entries })
    }

    /// Lines of `name` or `name<TAB>description`; `#` starts a comment line.
    /// The description is embedded when present, otherwise the name.
    pub fn parse(text: &str, embedder: &SentenceEmbedder) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, description) = match line.split_once('\t') {
                Some((n, d)) if !d.trim().is_empty() => (n.trim(), Some(d.trim().to_string())),
                Some((n, _)) => (n.trim(), None),
                None => (line, None),
            };
            let embedding = embedder.embed_sentence(description.as_deref().unwrap_or(name))?;
            entries.push(SymptomEntry {
                name: name.to_string(),
                description,
                embedding,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path, embedder: &SentenceEmbedder) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text, embedder)
    }

    pub fn entries(&self) -> &[SymptomEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest cosine between `v` and any symptom.
    pub fn max_similarity(&self, v: &[f64]) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for e in &self.entries {
            best = best.max(cosine(v, &e.embedding)?);
        }
        Ok(best)
    }
}

/// Builds the graph from raw triplets, keeping entities whose summary
/// embedding reaches `threshold` cosine similarity with some symptom.
///
/// Nodes are ordered by entity name and edges by (head, relation, tail), so
/// the result does not depend on the row order of the input. An entity that
/// appears with several summaries uses the lexicographically smallest one.
/// Triplets whose head and tail are the same entity are dropped.
pub fn filter_by_symptoms(
    triplets: &[RawTriplet],
    lexicon: &SymptomLexicon,
    threshold: f64,
    embedder: &SentenceEmbedder,
) -> Result<KnowledgeGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("cosine threshold {threshold} is outside [0, 1]")));
    }
    if lexicon.is_empty() {
        return Err(Error::Config("symptom lexicon is empty".into()));
    }
    let mut summaries: BTreeMap<&str, &str> = BTreeMap::new();
    for t in triplets {
        for (e, s) in [(&t.head, &t.head_summary), (&t.tail, &t.tail_summary)] {
            summaries
                .entry(e.as_str())
                .and_modify(|cur| {
                    if s.as_str() < *cur {
                        *cur = s.as_str();
                    }
                })
                .or_insert(s.as_str());
        }
    }

    let mut nodes = Vec::new();
    let mut index = BTreeMap::new();
    for (entity, summary) in summaries {
        let feature = embedder.embed_sentence(summary)?;
        let sim = lexicon.max_similarity(&feature)?;
        if sim >= threshold {
            index.insert(entity, nodes.len());
            nodes.push(Node {
                entity: entity.to_string(),
                summary: summary.to_string(),
                feature,
            });
        } else {
            log::debug!("dropping entity {entity:?} (max similarity {sim:.4})");
        }
    }
    if nodes.is_empty() {
        return Err(Error::Validation(format!(
            "no entity reaches cosine similarity {threshold} with the symptom lexicon"
        )));
    }

    let edges: BTreeSet<Edge> = triplets
        .iter()
        .filter(|t| t.head != t.tail)
        .filter_map(|t| {
            Some(Edge {
                head: *index.get(t.head.as_str())?,
                relation: t.relation.clone(),
                tail: *index.get(t.tail.as_str())?,
            })
        })
        .collect();
    KnowledgeGraph::new(nodes, edges.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn raw(h: &str, r: &str, t: &str) -> RawTriplet {
        RawTriplet {
            head: h.into(),
            relation: r.into(),
            tail: t.into(),
            head_summary: format!("{h} text"),
            tail_summary: format!("{t} text"),
        }
    }

    /// Three-dimensional table embedder with hand-placed vectors.
    fn table() -> SentenceEmbedder {
        let mut t = HashMap::new();
        t.insert("insomnia text".to_string(), vec![1.0, 0.0, 0.0]);
        t.insert("fatigue text".to_string(), vec![1.0, 1.0, 0.0]);
        t.insert("weather text".to_string(), vec![0.0, 0.0, 1.0]);
        t.insert("sleep loss".to_string(), vec![1.0, 0.0, 0.0]);
        SentenceEmbedder::with_table(3, t)
    }

    #[test]
    fn parses_rows_and_reports_lines() {
        let p = Path::new("t.tsv");
        let text = "# comment\ninsomnia\tsymptom_of\tdepression\ta\tb\n\ninsomnia\tsymptom_of\tdepression\ta\tb\n";
        let rows = parse_triplets(text, p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].relation, "symptom_of");
        match parse_triplets("a\tb\tc\td\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_triplets("# x\na\tb\tc\t\te\n", p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("field 4"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn filtering_keeps_similar_entities() {
        let emb = table();
        let lex = SymptomLexicon::parse("insomnia\tsleep loss\n", &emb).unwrap();
        let rows = vec![
            raw("insomnia", "co_occurs", "fatigue"),
            raw("weather", "affects", "insomnia"),
            raw("fatigue", "self", "fatigue"),
        ];
        let g = filter_by_symptoms(&rows, &lex, 0.5, &emb).unwrap();
        let names: Vec<&str> = g.nodes().iter().map(|n| n.entity.as_str()).collect();
        // insomnia: cosine 1.0, fatigue: 0.7071, weather: 0.0
        assert_eq!(names, vec!["fatigue", "insomnia"]);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edges()[0].head, 1);
        assert_eq!(g.edges()[0].tail, 0);

        let strict = filter_by_symptoms(&rows, &lex, 0.8, &emb).unwrap();
        assert_eq!(strict.node_count(), 1);
        assert!(filter_by_symptoms(&rows, &lex, 1.5, &emb).is_err());
    }

    #[test]
    fn empty_lexicon_is_a_configuration_error() {
        let emb = table();
        assert!(matches!(SymptomLexicon::parse("# nothing\n", &emb), Err(Error::Config(_))));
    }

    #[test]
    fn row_order_does_not_matter() {
        let emb = table();
        let lex = SymptomLexicon::parse("insomnia\tsleep loss\n", &emb).unwrap();
        let mut rows = vec![
            raw("insomnia", "co_occurs", "fatigue"),
            raw("fatigue", "worsens", "insomnia"),
            raw("weather", "affects", "insomnia"),
        ];
        let a = filter_by_symptoms(&rows, &lex, 0.5, &emb).unwrap();
        rows.reverse();
        let b = filter_by_symptoms(&rows, &lex, 0.5, &emb).unwrap();
        assert_eq!(a, b);
    }
}
