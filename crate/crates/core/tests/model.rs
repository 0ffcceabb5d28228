use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevex::model::SeverityModel;
use sevex::numerics::{check_gradients, Mode, Tensor};
use sevex::text::{Blocks, MultiHeadAttention};
use sevex::toy;

const TEXTS: [(&str, usize); 2] = [
    ("I cannot sleep at all. Everything feels heavy and grey.", 3),
    ("Had a nice walk today. Dinner was good.", 0),
];

#[test]
fn full_model_gradients_match_finite_differences() {
    let width = 8;
    let model = SeverityModel::new(toy::tiny_model_config(width, 4)).unwrap();
    let emb = toy::tiny_embedders(width, 3);
    let posts = toy::embed_texts(&TEXTS, &emb, 4, 8).unwrap();
    let graph = toy::five_node_graph(width, 4).unwrap();
    let mut store = model.initialized(&mut ChaCha8Rng::seed_from_u64(11));
    // Move ε off zero so its gradient is exercised away from the initial point.
    for name in ["kg.gin0.epsilon", "kg.gin1.epsilon"] {
        store.get_mut(name).unwrap().data_mut()[0] = 0.1;
    }
    let refs: Vec<_> = posts.iter().collect();
    let report = check_gradients(
        |g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            model.batch_loss(g, p, &graph, &refs, Blocks::ALL, Mode::Eval, &mut rng)
        },
        &store,
        1e-6,
    )
    .unwrap();
    assert!(report.coordinates > 1000);
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}

#[test]
fn every_attention_row_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let heads = rng.random_range(1..=4);
        let d = heads * rng.random_range(1..=4) + rng.random_range(0..heads);
        let n = rng.random_range(1..=7);
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        valid[rng.random_range(0..n)] = true;
        let layer = MultiHeadAttention::projected("a", d, heads).unwrap();
        let mut store = sevex::numerics::ParamStore::new();
        layer.init(&mut store, &mut rng);
        let x = Tensor::uniform(&[n, d], 2.0, &mut rng);
        let out = layer.apply(&store, &x, &valid).unwrap();
        for h in 0..heads {
            for q in 0..n {
                let row = out.row(h, q);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "trial {trial}");
                for (k, v) in valid.iter().enumerate() {
                    if !v {
                        assert_eq!(row[k], 0.0);
                    }
                }
            }
        }

        let graph = toy::random_graph(rng.random_range(1..=8), 4, 0.4, &mut rng).unwrap();
        let config = sevex::gnn::GnnConfig {
            in_dim: 4,
            hidden: 4,
            gat_heads: 2,
            leaky_slope: 0.2,
        };
        let enc = sevex::gnn::KgEncoder::new(config).unwrap();
        let mut s = sevex::numerics::ParamStore::new();
        enc.init(&mut s, &mut rng);
        let adj = graph.adjacency();
        for a in enc.gat_attention(&s, &graph).unwrap() {
            for i in 0..graph.node_count() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                for j in 0..graph.node_count() {
                    if i != j && adj.at(i, j) == 0.0 {
                        assert_eq!(a.at(i, j), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn word_only_ablation_zeroes_the_other_slices() {
    let width = 8;
    let model = SeverityModel::new(toy::tiny_model_config(width, 4)).unwrap();
    let emb = toy::tiny_embedders(width, 3);
    let posts = toy::embed_texts(&TEXTS, &emb, 4, 8).unwrap();
    let store = model.initialized(&mut ChaCha8Rng::seed_from_u64(2));
    let [w, s, p] = model.text.block_ranges();
    for post in &posts {
        let full = model.text.encode(&store, post, Blocks::ALL).unwrap();
        let words = model.text.encode(&store, post, Blocks::from_numbers(&[1]).unwrap()).unwrap();
        assert_eq!(&words.data()[w.clone()], &full.data()[w.clone()]);
        assert!(words.data()[w.clone()].iter().any(|v| *v != 0.0));
        assert!(words.data()[s.clone()].iter().all(|v| *v == 0.0));
        assert!(words.data()[p.clone()].iter().all(|v| *v == 0.0));
    }
}
