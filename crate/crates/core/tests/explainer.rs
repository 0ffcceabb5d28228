use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sevex::explain::{extract_subgraph, fidelity_loss, score_edges, train_explainer, EdgeScorer, ExplainerConfig};
use sevex::toy;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn informative_edge_ranks_first_and_beats_random_subgraphs() {
    let dim = 6;
    let toy::SingleEdgeFixture {
        graph,
        informative,
        encoder,
        params: model,
    } = toy::single_informative_edge(dim, 6, 30.0, 1).unwrap();

    // Oracle: drop each edge alone and measure how far g moves.
    let e = graph.edge_count();
    let ablation: Vec<f64> = (0..e)
        .map(|drop| {
            let mask: Vec<f64> = (0..e).map(|i| if i == drop { 0.0 } else { 1.0 }).collect();
            fidelity_loss(&graph, &encoder, &model, &mask, 1.0).unwrap()
        })
        .collect();
    let oracle = (0..e).max_by(|a, b| ablation[*a].total_cmp(&ablation[*b])).unwrap();
    assert_eq!(oracle, informative);
    assert!(ablation.iter().enumerate().all(|(i, v)| i == informative || *v == 0.0));

    let scorer = EdgeScorer::new(dim);
    let init = scorer.initialized(&mut ChaCha8Rng::seed_from_u64(3));
    let config = ExplainerConfig::default();
    let run = train_explainer(&graph, &encoder, &model, &scorer, init, &config).unwrap();
    assert!(run.best_loss <= run.initial_loss);
    let scores = score_edges(&graph, &scorer, &run.store).unwrap();
    let k = 2;
    let sub = extract_subgraph(&scores, k).unwrap();
    assert_eq!(sub.edges[0], informative);

    let ours = fidelity_loss(&graph, &encoder, &model, &sub.mask(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random: Vec<f64> = (0..20)
        .map(|_| {
            let mut ids: Vec<usize> = (0..e).collect();
            ids.shuffle(&mut rng);
            let mut mask = vec![0.0; e];
            for i in &ids[..k] {
                mask[*i] = 1.0;
            }
            fidelity_loss(&graph, &encoder, &model, &mask, 1.0).unwrap()
        })
        .collect();
    assert!(ours <= median(random), "{ours}");
}
